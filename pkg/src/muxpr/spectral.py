"""Weighted covariance matrix, Hermitian eigensolvers, spike counting and signal recovery."""
from __future__ import annotations

import csv
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .errors import (
    ConfigError,
    ConvergenceFailure,
    DegenerateSpikeWarning,
    DimensionError,
    ResourceError,
)
from .model import MeasurementSet, SamplingMatrix

MAX_DIM = 4096
CHUNK_ROWS = 4096
EIG_TOL = 1e-8
ORTHO_TOL = 1e-8
DEGENERATE_GAP = 1e-10


@dataclass(frozen=True, eq=False)
class WeightedCovarianceMatrix:
    """Y = (1/n) sum_i y_i a_i a_i^*.

    ``intensities`` keeps the y_i that built Y; the Marchenko-Pastur spike
    rule needs their distribution.
    """

    entries: np.ndarray
    n_used: int
    intensities: np.ndarray | None = None
    entry_variance: float = 1.0

    def __post_init__(self):
        Y = np.asarray(self.entries, dtype=np.complex128)
        if Y.ndim != 2 or Y.shape[0] != Y.shape[1]:
            raise DimensionError(f"WCM must be square, got {Y.shape}")
        if np.abs(Y - Y.conj().T).max() > 1e-10 * max(1.0, np.abs(Y).max()):
            raise ConfigError("WCM is not Hermitian")
        Y.setflags(write=False)
        object.__setattr__(self, "entries", Y)
        if self.intensities is not None:
            y = np.asarray(self.intensities, dtype=np.float64)
            y.setflags(write=False)
            object.__setattr__(self, "intensities", y)

    @property
    def d(self) -> int:
        return self.entries.shape[0]


def _partial_sum(y: np.ndarray, rows: np.ndarray) -> np.ndarray:
    # sum_i y_i conj(rows_i)^T rows_i, i.e. sum_i y_i a_i a_i^*
    return (rows.conj().T * y) @ rows


class WCMAccumulator:
    """Streaming accumulation of the weighted covariance matrix.

    Chunks may be fed in any sizes; partial accumulators over disjoint ranges
    can be merged.  ``finalize`` divides by n and symmetrizes.
    """

    def __init__(self, d: int, max_dim: int = MAX_DIM, keep_intensities: bool = True, entry_variance: float = 1.0):
        if d < 1:
            raise DimensionError(f"d must be >= 1, got {d}")
        if d > max_dim:
            raise ResourceError(f"d={d} exceeds the dense WCM cap of {max_dim}")
        self.d = d
        self.entry_variance = entry_variance
        self._sum = np.zeros((d, d), dtype=np.complex128)
        self._n = 0
        self._ys: list[np.ndarray] | None = [] if keep_intensities else None

    def add(self, y, rows) -> "WCMAccumulator":
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        rows = np.asarray(rows, dtype=np.complex128)
        if rows.ndim != 2 or rows.shape != (y.size, self.d):
            raise DimensionError(f"chunk of {y.size} intensities does not match rows of shape {rows.shape}")
        self._sum += _partial_sum(y, rows)
        self._n += y.size
        if self._ys is not None:
            self._ys.append(y.copy())
        return self

    def merge(self, other: "WCMAccumulator") -> "WCMAccumulator":
        if other.d != self.d:
            raise DimensionError("cannot merge accumulators of different dimension")
        self._sum += other._sum
        self._n += other._n
        if self._ys is not None:
            self._ys = None if other._ys is None else self._ys + other._ys
        return self

    def finalize(self) -> WeightedCovarianceMatrix:
        if self._n == 0:
            raise ConfigError("no measurements accumulated")
        Y = self._sum / self._n
        Y = 0.5 * (Y + Y.conj().T)
        ys = None if self._ys is None else np.concatenate(self._ys)
        return WeightedCovarianceMatrix(Y, self._n, ys, self.entry_variance)


def build_wcm(
    y: MeasurementSet | np.ndarray,
    A: SamplingMatrix,
    workers: int = 1,
    max_dim: int = MAX_DIM,
) -> WeightedCovarianceMatrix:
    """Batch WCM over fixed row chunks; partial sums are combined in chunk
    order, so the result does not depend on ``workers``."""
    values = y.values if isinstance(y, MeasurementSet) else np.asarray(y, dtype=np.float64).reshape(-1)
    if values.size != A.n:
        raise DimensionError(f"{values.size} measurements for a sampling matrix with n={A.n}")
    acc = WCMAccumulator(A.d, max_dim=max_dim, entry_variance=A.entry_variance)
    bounds = [(s, min(s + CHUNK_ROWS, A.n)) for s in range(0, A.n, CHUNK_ROWS)]
    rows = A.rows

    def job(b):
        return _partial_sum(values[b[0] : b[1]], rows[b[0] : b[1]])

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            partials = list(pool.map(job, bounds))
    else:
        partials = [job(b) for b in bounds]
    for p in partials:
        acc._sum += p
    acc._n = values.size
    acc._ys = [values.copy()]
    return acc.finalize()


@dataclass(frozen=True, eq=False)
class SpectralResult:
    """Eigenpairs of a WCM, descending.  ``eigenvectors`` holds one vector per
    column; ``estimates`` holds the recovered signals one per row."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    residuals: np.ndarray
    spike_count: int = 0
    estimates: np.ndarray | None = None
    eigenvalue_shift: float = 0.0
    warnings: tuple[str, ...] = ()
    iterations: int = 0

    @property
    def d(self) -> int:
        return self.eigenvectors.shape[0]

    def summary(self, top: int = 10) -> dict:
        return {
            "d": int(self.d),
            "spike_count": int(self.spike_count),
            "estimates": 0 if self.estimates is None else int(self.estimates.shape[0]),
            "eigenvalue_shift": self.eigenvalue_shift,
            "top_eigenvalues": [float(v) for v in self.eigenvalues[:top]],
            "residuals": [float(r) for r in self.residuals[:top]],
            "max_residual": float(self.residuals.max()) if self.residuals.size else 0.0,
            "warnings": list(self.warnings),
        }


def _as_matrix(Y) -> np.ndarray:
    H = Y.entries if isinstance(Y, WeightedCovarianceMatrix) else np.asarray(Y, dtype=np.complex128)
    if H.ndim != 2 or H.shape[0] != H.shape[1] or H.shape[0] < 1:
        raise DimensionError(f"expected a non-empty square matrix, got {H.shape}")
    return H


def _residuals(H, vals, V):
    return np.linalg.norm(H @ V - V * vals, axis=0)


def _check(H, vals, V, tol, iterations=0):
    res = _residuals(H, vals, V)
    bound = tol * max(np.linalg.norm(H), np.finfo(float).tiny)
    gram_err = np.abs(V.conj().T @ V - np.eye(V.shape[1])).max()
    if res.max(initial=0.0) > bound or gram_err > ORTHO_TOL:
        raise ConvergenceFailure(
            f"eigenpairs miss the contract: worst residual {res.max():.3e} (bound {bound:.3e}), "
            f"orthonormality error {gram_err:.3e}",
            iterations=iterations,
            worst_residual=float(res.max()),
        )
    return res


def _subspace_topk(H, k, tol, max_iter, seed):
    """Block power iteration with Rayleigh-Ritz and deflation of converged vectors."""
    d = H.shape[0]
    normF = np.linalg.norm(H)
    radii = np.abs(H).sum(axis=1) - np.abs(np.diag(H))
    shift = float(np.min(np.diag(H).real - radii))  # Gershgorin lower bound
    B = H - shift * np.eye(d)
    p = min(d, k + max(k, 8))
    rng = np.random.default_rng(seed)
    V = rng.standard_normal((d, p)) + 1j * rng.standard_normal((d, p))
    V, _ = np.linalg.qr(V)
    locked_V = np.zeros((d, 0), dtype=np.complex128)
    locked_vals = np.zeros(0)
    worst = np.inf
    for it in range(1, max_iter + 1):
        W = B @ V
        if locked_V.shape[1]:
            W -= locked_V @ (locked_V.conj().T @ W)
        V, _ = np.linalg.qr(W)
        mu, S = np.linalg.eigh(V.conj().T @ H @ V)
        order = np.argsort(mu)[::-1]
        mu, V = mu[order], V @ S[:, order]
        need = k - locked_V.shape[1]
        res = _residuals(H, mu[:need], V[:, :need])
        worst = float(res.max())
        done = 0
        while done < need and res[done] <= tol * normF:
            done += 1
        if done:
            locked_V = np.hstack([locked_V, V[:, :done]])
            locked_vals = np.concatenate([locked_vals, mu[:done]])
            V = V[:, done:]
            if locked_V.shape[1] == k:
                return locked_vals, locked_V, it
    raise ConvergenceFailure(
        f"subspace iteration stopped after {max_iter} iterations with residual {worst:.3e}",
        iterations=max_iter,
        worst_residual=worst,
    )


def eig_hermitian(Y, k: int | None = None, method: str = "dense", tol: float = EIG_TOL,
                  max_iter: int | None = None, seed: int = 0) -> SpectralResult:
    """Top-k (default all) eigenpairs of a Hermitian matrix, descending.

    ``method="dense"`` uses LAPACK's divide-and-conquer solver;
    ``method="power"`` runs block power iteration with deflation and needs k.
    Either way residuals ||Yv - mu v|| must stay below ``tol * ||Y||_F`` and
    the vectors must be orthonormal, else ``ConvergenceFailure``.
    """
    H = _as_matrix(Y)
    d = H.shape[0]
    if k is None:
        k = d
    if not 1 <= k <= d:
        raise ConfigError(f"k must be in [1, {d}], got {k}")
    if method == "dense":
        vals, vecs = np.linalg.eigh(H)
        vals, vecs = vals[::-1][:k].copy(), vecs[:, ::-1][:, :k].copy()
        iterations = 0
    elif method == "power":
        vals, vecs, iterations = _subspace_topk(H, k, tol, max_iter or 10 * d, seed)
        order = np.argsort(vals)[::-1]
        vals, vecs = vals[order], vecs[:, order]
    else:
        raise ConfigError(f"unknown eigensolver method {method!r}")
    res = _check(H, vals, vecs, tol, iterations)
    return SpectralResult(vals, vecs, res, iterations=iterations)


# --- spike counting ---------------------------------------------------------


@dataclass(frozen=True)
class BulkEdge:
    """Bulk edge q_hi + c (q_hi - q_lo) from quantiles of the lower 3/4 of the spectrum.

    c = 1.22 separates a d=200, alpha=50 three-source spectrum from the no-signal
    control; with c = 1.0 the MP tail itself is counted as 2-4 spikes.
    """

    c: float = 1.22
    q_hi: float = 0.99
    q_lo: float = 0.50

    def edge(self, eigenvalues) -> float:
        ev = np.sort(np.asarray(eigenvalues, dtype=np.float64))
        d = ev.size
        lower = ev[: d - d // 4]
        hi, lo = np.quantile(lower, [self.q_hi, self.q_lo])
        return float(hi + self.c * (hi - lo))

    def count(self, eigenvalues) -> int:
        ev = np.asarray(eigenvalues, dtype=np.float64)
        return int(np.count_nonzero(ev > self.edge(ev)))


@dataclass(frozen=True)
class LargestGap:
    """Split at the widest consecutive gap among the top ceil(sqrt(d)) eigenvalues."""

    window: int | None = None

    def count(self, eigenvalues) -> int:
        ev = np.sort(np.asarray(eigenvalues, dtype=np.float64))[::-1]
        top = self.window or math.ceil(math.sqrt(ev.size))
        top = min(max(top, 2), ev.size)
        gaps = ev[: top - 1] - ev[1:top]
        return int(np.argmax(gaps)) + 1


def weighted_mp_edge(intensities, d: int, entry_variance: float = 1.0) -> float:
    """Right edge of the limiting spectrum of (1/n) sum_i y_i b_i b_i^*, b_i ~ CN(0, v I_d).

    Uses the empirical distribution of y in the inverse Stieltjes map
    z(m) = -1/m + mean(y / (1 + g y m)), g = d/n; the edge is z at the
    critical point of z on (-1/(g max y), 0).  For y = 1 this is (1 + sqrt g)^2.
    """
    y = np.asarray(intensities, dtype=np.float64).reshape(-1)
    n = y.size
    ymax = float(y.max())
    if n == 0 or ymax <= 0:
        return 0.0
    g = d / n

    def dz(m):
        t = 1.0 + g * y * m
        return 1.0 / m**2 - np.mean(g * y**2 / t**2)

    lo = -1.0 / (g * ymax)
    # dz is increasing on (lo, 0), from -inf at the pole to +inf at 0: one root
    m = brentq(dz, lo * (1 - 1e-12), lo * 1e-12, xtol=1e-15, rtol=1e-13, maxiter=500)
    z = -1.0 / m + np.mean(y / (1.0 + g * y * m))
    return float(entry_variance * z)


@dataclass(frozen=True, eq=False)
class MarchenkoPasturEdge:
    """Count eigenvalues above the weighted Marchenko-Pastur bulk edge predicted from the intensities."""

    intensities: np.ndarray
    entry_variance: float = 1.0
    margin: float = 0.0

    def edge(self, eigenvalues) -> float:
        d = np.asarray(eigenvalues).size
        return weighted_mp_edge(self.intensities, d, self.entry_variance) * (1.0 + self.margin)

    def count(self, eigenvalues) -> int:
        ev = np.asarray(eigenvalues, dtype=np.float64)
        return int(np.count_nonzero(ev > self.edge(ev)))


SpikeRule = BulkEdge | LargestGap | MarchenkoPasturEdge


def count_spikes(eigenvalues, rule: SpikeRule | None = None) -> int:
    ev = np.asarray(eigenvalues, dtype=np.float64).reshape(-1)
    if ev.size < 2:
        raise ConfigError("need at least two eigenvalues to count spikes")
    return (rule or BulkEdge()).count(ev)


def default_rule(Y: WeightedCovarianceMatrix | None) -> SpikeRule:
    if isinstance(Y, WeightedCovarianceMatrix) and Y.intensities is not None:
        return MarchenkoPasturEdge(Y.intensities, Y.entry_variance)
    return BulkEdge()


def make_rule(name: str, Y: WeightedCovarianceMatrix | None = None, **params) -> SpikeRule:
    """Rule by CLI/config name: ``mp-edge``, ``bulk-edge``, ``largest-gap``."""
    if name == "bulk-edge":
        return BulkEdge(**params)
    if name == "largest-gap":
        return LargestGap(**params)
    if name == "mp-edge":
        if Y is None or Y.intensities is None:
            raise ConfigError("the mp-edge rule needs the intensities that built the WCM")
        return MarchenkoPasturEdge(Y.intensities, Y.entry_variance, **params)
    raise ConfigError(f"unknown spike rule {name!r}")


def recover(
    Y: WeightedCovarianceMatrix,
    k_hint: int | None = None,
    rule: SpikeRule | None = None,
    subtract_identity: bool = False,
    method: str = "dense",
    tol: float = EIG_TOL,
) -> SpectralResult:
    """Eigendecompose Y, count spikes and return the top eigenvectors as signal estimates.

    The estimates are ordered by eigenvalue, brightest source first.
    ``k_hint`` overrides the detected spike count.  ``subtract_identity``
    only shifts the reported eigenvalues by -1; the eigenvectors are the same.
    """
    if method == "power":
        if k_hint is None:
            raise ConfigError("the power method needs k_hint (no full spectrum to count spikes)")
        res = eig_hermitian(Y, k_hint, method="power", tol=tol)
        spikes = k_hint
    else:
        res = eig_hermitian(Y, None, method=method, tol=tol)
        spikes = count_spikes(res.eigenvalues, rule or default_rule(Y)) if res.eigenvalues.size >= 2 else 1
    k = spikes if k_hint is None else int(k_hint)
    if not 0 <= k <= res.eigenvalues.size:
        raise ConfigError(f"k_hint={k_hint} out of range")
    V = res.eigenvectors[:, :k]
    estimates = (V / np.linalg.norm(V, axis=0)).T.copy()

    notes = []
    top = res.eigenvalues[: max(k, spikes)]
    for j in range(top.size - 1):
        if top[j] - top[j + 1] < DEGENERATE_GAP:
            msg = f"eigenvalues {j} and {j + 1} are degenerate (gap {top[j] - top[j + 1]:.2e}); estimates may be mixed"
            warnings.warn(msg, DegenerateSpikeWarning, stacklevel=2)
            notes.append(msg)
    shift = -1.0 if subtract_identity else 0.0
    vals = res.eigenvalues - 1.0 if subtract_identity else res.eigenvalues
    return SpectralResult(vals, res.eigenvectors, res.residuals, spikes, estimates, shift, tuple(notes), res.iterations)


# --- export -----------------------------------------------------------------


def write_spectrum_csv(path, eigenvalues) -> None:
    with open(Path(path), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["rank", "eigenvalue"])
        for r, v in enumerate(np.asarray(eigenvalues, dtype=np.float64)):
            w.writerow([r, repr(float(v))])


def write_summary_json(path, result: SpectralResult) -> None:
    Path(path).write_text(json.dumps(result.summary(), indent=2) + "\n")
