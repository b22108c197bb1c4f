import json
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from muxpr.errors import ConfigError, ConvergenceFailure, DegenerateSpikeWarning, DimensionError, ResourceError
from muxpr.forward import measure
from muxpr.metrics import cosine_similarity, match_and_score
from muxpr.model import SamplingMatrix, SourceEnsemble, make_ensemble, make_sampling_matrix, mixing_matrix
from muxpr.spectral import (
    CHUNK_ROWS,
    BulkEdge,
    LargestGap,
    MarchenkoPasturEdge,
    WCMAccumulator,
    WeightedCovarianceMatrix,
    build_wcm,
    count_spikes,
    eig_hermitian,
    make_rule,
    recover,
    weighted_mp_edge,
    write_spectrum_csv,
    write_summary_json,
)

from conftest import random_hermitian
from oracles import bisection_eigvals, random_overlap_mean, wcm_loop

THREE = [5 / 12, 4 / 12, 3 / 12]


def _instance(d, weights, n, seed, kind="gaussian"):
    ens = make_ensemble(d, weights, seed=seed)
    A = make_sampling_matrix(kind, n, d, seed=seed + 1000)
    return ens, A, measure(ens, A)


def _rel_err(Y, M):
    target = M + np.eye(M.shape[0])
    return np.linalg.norm(Y - target) / np.linalg.norm(target)


# --- build_wcm --------------------------------------------------------------


def test_single_term():
    A = SamplingMatrix(np.eye(3)[:1], "gaussian")
    Y = build_wcm(np.array([2.5]), A).entries
    np.testing.assert_array_equal(Y, np.diag([2.5, 0, 0]))


def test_matches_outer_product_loop():
    _, A, y = _instance(7, [0.6, 0.4], 300, 1)
    np.testing.assert_allclose(build_wcm(y, A).entries, wcm_loop(y.values, A.rows), atol=1e-12)


def test_streaming_equals_batch():
    _, A, y = _instance(12, THREE, 5000, 2)
    batch = build_wcm(y, A).entries
    acc = WCMAccumulator(12)
    for s, e in [(0, 1), (1, 700), (700, 2500), (2500, 5000)]:
        acc.add(y.values[s:e], A.rows[s:e])
    np.testing.assert_allclose(acc.finalize().entries, batch, rtol=0, atol=1e-12)
    left, right = WCMAccumulator(12), WCMAccumulator(12)
    left.add(y.values[:1234], A.rows[:1234])
    right.add(y.values[1234:], A.rows[1234:])
    merged = left.merge(right).finalize()
    np.testing.assert_allclose(merged.entries, batch, rtol=0, atol=1e-12)
    assert merged.n_used == 5000 and merged.intensities.size == 5000


def test_worker_count_does_not_change_bits():
    _, A, y = _instance(10, [0.6, 0.4], 3 * CHUNK_ROWS + 17, 3)
    one = build_wcm(y, A, workers=1).entries
    four = build_wcm(y, A, workers=4).entries
    assert one.tobytes() == four.tobytes()


def test_converges_to_mixing_plus_identity():
    ens, A, y = _instance(64, [0.7, 0.3], 200_000, 4)
    assert _rel_err(build_wcm(y, A).entries, mixing_matrix(ens).entries) <= 0.05


def test_constant_intensities_give_identity():
    d = 32
    n = int(2e5 * d / 64)
    A = make_sampling_matrix("gaussian", n, d, seed=5)
    Y = build_wcm(np.ones(n), A).entries
    assert np.linalg.norm(Y - np.eye(d)) / np.sqrt(d) <= 0.05


def test_error_median_shrinks_as_n_doubles():
    d, weights = 16, [0.7, 0.3]
    medians = []
    for n in (500, 1000, 2000, 4000):
        errs = []
        for s in range(10):
            ens, A, y = _instance(d, weights, n, 100 * s + 7)
            errs.append(_rel_err(build_wcm(y, A).entries, mixing_matrix(ens).entries))
        medians.append(np.median(errs))
    assert all(b < a for a, b in zip(medians, medians[1:]))


def test_wcm_validation():
    A = make_sampling_matrix("gaussian", 5, 3)
    with pytest.raises(DimensionError):
        build_wcm(np.ones(4), A)
    with pytest.raises(ResourceError):
        build_wcm(np.ones(5), A, max_dim=2)
    with pytest.raises(ConfigError):
        WCMAccumulator(3).finalize()
    with pytest.raises(ConfigError):
        WeightedCovarianceMatrix(np.array([[0, 1], [0, 0]]), 1)


# --- eig_hermitian ----------------------------------------------------------


def test_diagonal():
    res = eig_hermitian(np.diag([1.0, 3.0, 2.0]).astype(complex))
    np.testing.assert_allclose(res.eigenvalues, [3, 2, 1], atol=1e-15)
    for j, axis in enumerate([1, 2, 0]):
        assert abs(abs(res.eigenvectors[axis, j]) - 1) < 1e-14


def test_exact_structure_recovered():
    ens = make_ensemble(8, THREE, seed=9)
    res = eig_hermitian(mixing_matrix(ens).entries + np.eye(8), k=3)
    np.testing.assert_allclose(res.eigenvalues, np.array(THREE) + 1, atol=1e-12)
    for k in range(3):
        assert cosine_similarity(res.eigenvectors[:, k], ens.signals[k]) >= 1 - 1e-10


def test_matches_bisection_oracle(rng):
    H = random_hermitian(rng, 50)
    res = eig_hermitian(H)
    np.testing.assert_allclose(res.eigenvalues, bisection_eigvals(H), atol=1e-8)
    assert abs(res.eigenvalues.sum() - np.trace(H).real) <= 1e-8
    assert np.all(np.diff(res.eigenvalues) <= 0)


def test_power_method_agrees_with_dense(rng):
    ens = make_ensemble(40, THREE, seed=3)
    H = mixing_matrix(ens).entries + np.eye(40) + 0.01 * random_hermitian(rng, 40)
    dense = eig_hermitian(H, k=3)
    power = eig_hermitian(H, k=3, method="power")
    np.testing.assert_allclose(power.eigenvalues, dense.eigenvalues, atol=1e-10)
    for j in range(3):
        assert cosine_similarity(power.eigenvectors[:, j], dense.eigenvectors[:, j]) >= 1 - 1e-10
    assert power.iterations >= 1


def test_power_method_reports_failure(rng):
    H = random_hermitian(rng, 30)
    with pytest.raises(ConvergenceFailure) as info:
        eig_hermitian(H, k=5, method="power", max_iter=1)
    assert info.value.iterations == 1 and info.value.worst_residual > 0


def test_eig_validation():
    with pytest.raises(ConfigError):
        eig_hermitian(np.eye(3), k=4)
    with pytest.raises(ConfigError):
        eig_hermitian(np.eye(3), method="lanczos")
    with pytest.raises(DimensionError):
        eig_hermitian(np.ones((2, 3)))


@given(seed=st.integers(0, 2**32), d=st.integers(1, 40))
def test_eig_contract_property(seed, d):
    H = random_hermitian(np.random.default_rng(seed), d)
    res = eig_hermitian(H)
    V = res.eigenvectors
    assert np.abs(V.conj().T @ V - np.eye(d)).max() <= 1e-8
    assert res.residuals.max() <= 1e-8 * np.linalg.norm(H)
    assert abs(res.eigenvalues.sum() - np.trace(H).real) <= 1e-8 * max(1, d)


# --- spike counting ---------------------------------------------------------


def test_single_isolated_spike():
    ev = np.concatenate([[2.0], np.linspace(1.01, 0.99, 99)])
    assert count_spikes(ev) == 1
    assert count_spikes(ev, LargestGap()) == 1


def test_count_spikes_needs_two_values():
    with pytest.raises(ConfigError):
        count_spikes([1.0])


def test_flat_spectrum_has_no_spikes():
    assert count_spikes(np.ones(50)) == 0


def test_mp_edge_closed_form():
    for d, n in [(10, 1000), (200, 10_000), (50, 60)]:
        assert weighted_mp_edge(np.ones(n), d) == pytest.approx((1 + np.sqrt(d / n)) ** 2, rel=1e-9)
    assert weighted_mp_edge(np.ones(100), 10, entry_variance=0.25) == pytest.approx(0.25 * (1 + 0.1**0.5) ** 2)


def test_mp_edge_matches_simulated_bulk():
    d, n = 200, 10_000
    rng = np.random.default_rng(1)
    y = rng.exponential(size=n)
    A = make_sampling_matrix("gaussian", n, d, seed=2)
    top = np.linalg.eigvalsh(build_wcm(y, A).entries)[-1]
    assert top == pytest.approx(weighted_mp_edge(y, d), rel=0.03)


def test_rule_factory():
    _, A, y = _instance(20, [0.6, 0.4], 400, 1)
    Y = build_wcm(y, A)
    assert isinstance(make_rule("mp-edge", Y), MarchenkoPasturEdge)
    assert isinstance(make_rule("bulk-edge"), BulkEdge)
    assert make_rule("bulk-edge", c=2.0).c == 2.0
    assert isinstance(make_rule("largest-gap"), LargestGap)
    with pytest.raises(ConfigError):
        make_rule("mp-edge")
    with pytest.raises(ConfigError):
        make_rule("elbow")


# --- recover ----------------------------------------------------------------


def test_hint_overrides_count():
    ens, A, y = _instance(50, THREE, 50 * 50, 11)
    res = recover(build_wcm(y, A), k_hint=2)
    assert res.estimates.shape == (2, 50)
    np.testing.assert_allclose(np.linalg.norm(res.estimates, axis=1), 1.0, atol=1e-12)
    report = match_and_score(res.estimates, ens)
    assert list(report.matching[:2]) == [0, 1] and report.matching[2] == -1


def test_brightest_first_at_high_alpha():
    ens, A, y = _instance(40, [0.55, 0.3, 0.15], 40 * 400, 12)
    res = recover(build_wcm(y, A))
    assert res.spike_count == 3
    report = match_and_score(res.estimates, ens)
    assert np.all(report.rho > 0.8)
    assert list(report.matching) == [0, 1, 2]


def test_bulk_median_near_one():
    _, A, y = _instance(100, THREE, 100 * 50, 13)
    ev = recover(build_wcm(y, A)).eigenvalues
    assert 0.9 <= np.median(ev) <= 1.1


def test_subtract_identity_shifts_only_eigenvalues():
    _, A, y = _instance(30, [0.6, 0.4], 3000, 14)
    Y = build_wcm(y, A)
    plain, shifted = recover(Y, k_hint=2), recover(Y, k_hint=2, subtract_identity=True)
    assert np.array_equal(shifted.eigenvalues, plain.eigenvalues - 1.0)
    assert np.array_equal(shifted.estimates, plain.estimates)
    assert shifted.eigenvalue_shift == -1.0


def test_degenerate_spikes_warn():
    Y = WeightedCovarianceMatrix(np.diag([2.0, 2.0, 1.0, 1.0, 1.0, 1.0]).astype(complex), 1)
    with pytest.warns(DegenerateSpikeWarning):
        res = recover(Y, k_hint=2)
    assert res.warnings


def test_no_warning_for_separated_spikes():
    Y = WeightedCovarianceMatrix(np.diag([3.0, 2.0, 1.0, 1.0]).astype(complex), 1)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        recover(Y, k_hint=2)


def test_power_recover_needs_hint():
    Y = WeightedCovarianceMatrix(np.eye(4, dtype=complex), 1)
    with pytest.raises(ConfigError):
        recover(Y, method="power")
    res = recover(WeightedCovarianceMatrix(np.diag([3.0, 2.0, 1.0, 1.0]).astype(complex), 1), k_hint=1, method="power")
    assert abs(abs(res.estimates[0, 0]) - 1) < 1e-8


def test_exports(tmp_path):
    _, A, y = _instance(20, [0.6, 0.4], 2000, 15)
    res = recover(build_wcm(y, A))
    write_spectrum_csv(tmp_path / "s.csv", res.eigenvalues)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "rank,eigenvalue" and len(lines) == 21
    assert float(lines[1].split(",")[1]) == res.eigenvalues[0]
    write_summary_json(tmp_path / "s.json", res)
    summary = json.loads((tmp_path / "s.json").read_text())
    assert summary["spike_count"] == res.spike_count and len(summary["top_eigenvalues"]) == 10


def test_alpha_one_is_weak_recovery():
    d = 200
    rhos = []
    for s in range(20):
        ens, A, y = _instance(d, [1.0], d, 300 + s)
        rhos.append(match_and_score(recover(build_wcm(y, A), k_hint=1).estimates, ens).rho[0])
    # the random-vector baseline; alpha=1 sits near, not below, the transition
    assert np.mean(rhos) < 0.5
    assert np.mean(rhos) > random_overlap_mean(d)


@pytest.mark.xfail(strict=True, reason="alpha=1 already carries signal: mean rho ~0.23 vs the 3x-baseline bound ~0.19")
def test_far_below_transition_within_three_baselines():
    d = 200
    rhos = []
    for s in range(20):
        ens, A, y = _instance(d, [1.0], d, 300 + s)
        rhos.append(match_and_score(recover(build_wcm(y, A), k_hint=1).estimates, ens).rho[0])
    assert np.mean(rhos) <= 3 * random_overlap_mean(d)


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="finite alpha=50: the weakest source reaches rho ~0.70, not 0.90")
def test_three_sources_at_alpha_50_large_d():
    d = 1000
    ens, A, y = _instance(d, THREE, 50 * d, 16)
    res = recover(build_wcm(y, A), k_hint=3)
    assert np.all(match_and_score(res.estimates, ens).rho >= 0.90)
