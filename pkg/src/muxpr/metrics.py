"""Recovery metrics: cosine similarity, greedy source matching, signal-to-background ratio."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionError, EmptyBackground, ZeroVector
from .model import SourceEnsemble, as_complex_vector

MIN_BACKGROUND = 10
SBR_BACKGROUND = "mean of all non-target pixels"


def cosine_similarity(x, y) -> float:
    """|x^* y| / (||x|| ||y||), in [0, 1]; blind to global phase and positive scale."""
    x = as_complex_vector(x, "x")
    y = as_complex_vector(y, "y")
    if x.size != y.size:
        raise DimensionError(f"dimension mismatch: {x.size} vs {y.size}")
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        raise ZeroVector("cosine similarity is undefined for a zero vector")
    return min(1.0, float(abs(np.vdot(x / nx, y / ny))))


def similarity_matrix(estimates: np.ndarray, signals: np.ndarray) -> np.ndarray:
    """rho between every estimate (rows) and every signal (columns)."""
    E = np.atleast_2d(np.asarray(estimates, dtype=np.complex128))
    X = np.atleast_2d(np.asarray(signals, dtype=np.complex128))
    if E.shape[1] != X.shape[1]:
        raise DimensionError(f"estimates have d={E.shape[1]}, signals have d={X.shape[1]}")
    ne, nx = np.linalg.norm(E, axis=1), np.linalg.norm(X, axis=1)
    if np.any(ne == 0) or np.any(nx == 0):
        raise ZeroVector("zero vector among estimates or signals")
    S = np.abs((E / ne[:, None]).conj() @ (X / nx[:, None]).T)
    return np.minimum(S, 1.0)


def greedy_match(S: np.ndarray) -> np.ndarray:
    """Match estimates (rows) to sources (columns) by descending similarity.

    Returns, per source, the matched estimate rank or -1.  Ties go to the
    lower source index, then the lower estimate rank.
    """
    n_est, K = S.shape
    order = sorted(((-S[e, k], k, e) for e in range(n_est) for k in range(K)))
    match = np.full(K, -1, dtype=int)
    used = set()
    for _, k, e in order:
        if match[k] < 0 and e not in used:
            match[k] = e
            used.add(e)
    return match


@dataclass(frozen=True, eq=False)
class RecoveryReport:
    rho: np.ndarray
    matching: np.ndarray
    spike_count_detected: int | None
    true_K: int

    def csv_rows(self, d, alpha, seed, weights) -> list[dict]:
        return [
            {
                "d": d,
                "K": self.true_K,
                "alpha": alpha,
                "seed": seed,
                "source_index": k,
                "lambda": float(weights[k]),
                "rho": float(self.rho[k]),
                "matched_estimate_rank": int(self.matching[k]),
            }
            for k in range(self.true_K)
        ]


def match_and_score(estimates, ensemble: SourceEnsemble | np.ndarray, spike_count: int | None = None) -> RecoveryReport:
    signals = ensemble.signals if isinstance(ensemble, SourceEnsemble) else np.atleast_2d(ensemble)
    E = np.atleast_2d(np.asarray(estimates, dtype=np.complex128))
    if E.shape[0] == 0:
        raise DimensionError("no estimates to score")
    S = similarity_matrix(E, signals)
    match = greedy_match(S)
    rho = np.array([S[e, k] if e >= 0 else 0.0 for k, e in enumerate(match)])
    return RecoveryReport(rho, match, spike_count, signals.shape[0])


def write_report_csv(path, rows: Sequence[dict]) -> None:
    fields = ["d", "K", "alpha", "seed", "source_index", "lambda", "rho", "matched_estimate_rank"]
    with open(Path(path), "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def sbr(image, targets: Sequence[tuple[int, int]]) -> np.ndarray:
    """Per-target intensity divided by the mean intensity over all non-target pixels."""
    img = np.asarray(image, dtype=np.float64)
    if img.size == 0:
        raise DimensionError("empty image")
    if img.ndim == 1:
        img = img[None, :]
    mask = np.ones(img.shape, dtype=bool)
    idx = []
    for t in targets:
        t = tuple(int(v) for v in t)
        if len(t) != img.ndim or any(not 0 <= v < s for v, s in zip(t, img.shape)):
            raise DimensionError(f"target {t} outside image of shape {img.shape}")
        mask[t] = False
        idx.append(t)
    if np.count_nonzero(mask) < MIN_BACKGROUND:
        raise EmptyBackground(
            f"only {np.count_nonzero(mask)} background pixels; at least {MIN_BACKGROUND} are required"
        )
    background = img[mask].mean()
    if background <= 0:
        raise EmptyBackground("background intensity is zero")
    return np.array([img[t] / background for t in idx])
