"""Forward model: multiplexed intensity measurements."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import DimensionError, NotHermitian
from .model import (
    MeasurementSet,
    MixingMatrix,
    NoiseConfig,
    SamplingMatrix,
    SourceEnsemble,
    block_rng,
    iter_blocks,
)

IMAG_TOL = 1e-10
_NOISE_STREAM = 1


def mixed_intensities(signals: np.ndarray, weights: np.ndarray, A: np.ndarray) -> np.ndarray:
    """sum_k w_k |a_i^* x_k|^2 for every row of ``A``; signals need not be orthogonal."""
    X = np.atleast_2d(signals)
    if X.shape[1] != A.shape[1]:
        raise DimensionError(f"signal dimension {X.shape[1]} != sampling dimension {A.shape[1]}")
    F = A @ X.T
    return (F.real**2 + F.imag**2) @ np.asarray(weights, dtype=np.float64)


def add_noise(y: np.ndarray, noise: NoiseConfig) -> np.ndarray:
    """Detector-level additive Gaussian noise; values are not clipped."""
    if noise.model == "none":
        return y
    out = y.copy()
    for b, start, stop in iter_blocks(y.size):
        out[start:stop] += noise.sigma * block_rng(noise.seed, b, _NOISE_STREAM).standard_normal(stop - start)
    return out


def measure(ensemble: SourceEnsemble, A: SamplingMatrix, noise: NoiseConfig | None = None) -> MeasurementSet:
    if ensemble.d != A.d:
        raise DimensionError(f"ensemble has d={ensemble.d}, sampling matrix has d={A.d}")
    noise = noise or NoiseConfig()
    y = mixed_intensities(ensemble.signals, ensemble.weights, A.rows)
    return MeasurementSet(add_noise(y, noise), noise, ensemble.fingerprint, A.fingerprint)


def measure_via_M(M: MixingMatrix, A: SamplingMatrix) -> MeasurementSet:
    """Quadratic forms a_i^* M a_i.

    The imaginary residue of each form must stay below ``IMAG_TOL`` (relative
    to the largest value for big matrices); otherwise ``NotHermitian``.
    """
    if M.d != A.d:
        raise DimensionError(f"mixing matrix has d={M.d}, sampling matrix has d={A.d}")
    R = A.rows
    q = np.einsum("ij,ij->i", R @ M.entries, R.conj())
    scale = max(1.0, float(np.abs(q.real).max()))
    worst = float(np.abs(q.imag).max())
    if worst > IMAG_TOL * scale:
        raise NotHermitian(f"quadratic form has imaginary residue {worst:.3e}")
    return MeasurementSet(q.real.copy(), NoiseConfig(), None, A.fingerprint)


def write_measurements_csv(path, y: MeasurementSet) -> None:
    with open(Path(path), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["index", "y"])
        for i, v in enumerate(y.values):
            w.writerow([i, repr(float(v))])


def read_measurements_csv(path) -> np.ndarray:
    with open(Path(path), newline="") as f:
        rows = list(csv.DictReader(f))
    return np.array([float(r["y"]) for r in rows])
