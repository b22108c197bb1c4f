"""Domain types: source ensembles, mixing matrices, sampling matrices, measurements.

Arrays are stored as ``complex128`` / ``float64`` numpy arrays and marked
read-only after construction, so instances can be shared between threads.

Row convention: ``SamplingMatrix.rows[i]`` is the conjugated sampling vector
a_i^*, so ``rows @ x`` gives the n inner products a_i^* x.  Ensemble signals
are stored one per row, shape (K, d).
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, ResourceError, WeightDegenerate

GAUSSIAN = "gaussian"
PHASE = "phase"
KINDS = (GAUSSIAN, PHASE)

# "unit": E|a_ij|^2 = 1, under which the WCM expectation is exactly M + (sum lambda) I.
# "dim": E|a_ij|^2 = 1/d, the CN(0, 1/d) convention.
NORMALIZATIONS = ("unit", "dim")

ORTHO_TOL = 1e-10
DEFAULT_WEIGHT_GAP = 1e-6
BLOCK_ROWS = 1024


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def block_rng(seed: int, block: int, stream: int = 0) -> np.random.Generator:
    """Generator for one fixed-size block of rows.

    Depends only on (seed, stream, block), so matrices are identical no
    matter how many rows are generated or how the blocks are scheduled.
    """
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(stream, block))
    return np.random.Generator(np.random.PCG64(ss))


def iter_blocks(n: int, block_rows: int = BLOCK_ROWS) -> Iterator[tuple[int, int, int]]:
    for b, start in enumerate(range(0, n, block_rows)):
        yield b, start, min(start + block_rows, n)


def as_complex_vector(x, name: str = "vector") -> np.ndarray:
    v = np.asarray(x, dtype=np.complex128)
    if v.ndim != 1 or v.size < 1:
        raise DimensionError(f"{name} must be a non-empty 1-D array, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ConfigError(f"{name} has non-finite entries")
    return v


def check_weights(weights: Sequence[float], min_gap: float = DEFAULT_WEIGHT_GAP) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.size == 0:
        raise ConfigError("at least one weight is required")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ConfigError(f"weights must be finite and strictly positive, got {w.tolist()}")
    if w.size > 1:
        gaps = np.abs(w[:, None] - w[None, :])[np.triu_indices(w.size, 1)]
        if gaps.min() < min_gap:
            i, j = np.argwhere(np.triu(np.abs(w[:, None] - w[None, :]) < min_gap, 1))[0]
            raise WeightDegenerate(
                f"weights {w[i]:g} and {w[j]:g} (indices {i}, {j}) differ by less than {min_gap:g}; "
                "degenerate weights make the sources unidentifiable"
            )
    return w


@dataclass(frozen=True, eq=False)
class SourceEnsemble:
    """K orthonormal complex signals with distinct positive weights."""

    signals: np.ndarray
    weights: np.ndarray
    normalized: bool = False
    seed: int | None = None
    min_gap: float = DEFAULT_WEIGHT_GAP

    def __post_init__(self):
        X = np.array(self.signals, dtype=np.complex128, copy=True)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] < 1:
            raise DimensionError(f"signals must have shape (K, d), got {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ConfigError("signals have non-finite entries")
        K, d = X.shape
        if K > d:
            raise DimensionError(f"cannot have K={K} orthonormal signals in dimension d={d}")
        w = check_weights(self.weights, self.min_gap).copy()
        if w.size != K:
            raise DimensionError(f"{w.size} weights given for {K} signals")
        gram = X.conj() @ X.T
        err = np.abs(gram - np.eye(K)).max()
        if err > ORTHO_TOL:
            raise ConfigError(f"signals are not orthonormal (max Gram deviation {err:.3e})")
        if self.normalized and abs(w.sum() - 1.0) > 1e-10:
            raise ConfigError(f"normalized ensemble weights sum to {w.sum()!r}, not 1")
        object.__setattr__(self, "signals", _freeze(X))
        object.__setattr__(self, "weights", _freeze(w))

    @property
    def K(self) -> int:
        return self.signals.shape[0]

    @property
    def d(self) -> int:
        return self.signals.shape[1]

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256(b"ensemble")
        h.update(self.signals.tobytes())
        h.update(self.weights.tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class MixingMatrix:
    entries: np.ndarray

    def __post_init__(self):
        M = np.array(self.entries, dtype=np.complex128, copy=True)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise DimensionError(f"mixing matrix must be square, got {M.shape}")
        if np.abs(M - M.conj().T).max() > 1e-12:
            raise ConfigError("mixing matrix is not Hermitian")
        object.__setattr__(self, "entries", _freeze(M))

    @property
    def d(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True, eq=False)
class SamplingMatrix:
    """n x d sensing matrix; row i holds a_i^*."""

    rows: np.ndarray
    kind: str
    seed: int | None = None
    normalization: str = "unit"

    def __post_init__(self):
        A = np.asarray(self.rows, dtype=np.complex128)
        if A.ndim != 2 or min(A.shape) < 1:
            raise DimensionError(f"sampling matrix must be a non-empty 2-D array, got {A.shape}")
        if self.kind not in KINDS:
            raise ConfigError(f"unknown sampling kind {self.kind!r}; expected one of {KINDS}")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(f"unknown normalization {self.normalization!r}")
        if A.flags.writeable:
            A = A.copy()
        object.__setattr__(self, "rows", _freeze(A))

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]

    @property
    def entry_variance(self) -> float:
        return 1.0 if self.normalization == "unit" else 1.0 / self.d

    def head(self, n: int) -> "SamplingMatrix":
        """The first n rows; identical to regenerating with n rows."""
        if not 1 <= n <= self.n:
            raise ConfigError(f"cannot take {n} of {self.n} rows")
        return SamplingMatrix(self.rows[:n], self.kind, self.seed, self.normalization)

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256(self.kind.encode())
        if self.seed is None:
            h.update(self.rows.tobytes())
        else:
            # seeded matrices are fully determined by their parameters
            h.update(f"{self.normalization}:{self.n}:{self.d}:{self.seed}".encode())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class NoiseConfig:
    """Additive Gaussian noise on the summed intensities (``sigma=0`` means noiseless)."""

    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.sigma) or self.sigma < 0:
            raise ConfigError(f"noise sigma must be >= 0, got {self.sigma!r}")

    @property
    def model(self) -> str:
        return "gaussian" if self.sigma > 0 else "none"


@dataclass(frozen=True, eq=False)
class MeasurementSet:
    values: np.ndarray
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    ensemble_ref: str | None = None
    matrix_ref: str | None = None

    def __post_init__(self):
        y = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        if y.size < 1:
            raise DimensionError("measurement set is empty")
        if not np.all(np.isfinite(y)):
            raise ConfigError("measurements have non-finite values")
        if not self.noisy and np.any(y < 0):
            raise ConfigError("noiseless intensities must be non-negative")
        object.__setattr__(self, "values", _freeze(y))

    @property
    def n(self) -> int:
        return self.values.size

    @property
    def noisy(self) -> bool:
        return self.noise.model != "none"


def _complex_normal(rng: np.random.Generator, shape, variance: float) -> np.ndarray:
    z = rng.standard_normal(shape + (2,))
    out = z.view(np.complex128)[..., 0]
    out *= np.sqrt(variance / 2.0)
    return out


def make_ensemble(
    d: int,
    weights: Sequence[float],
    seed: int = 0,
    normalized: bool = True,
    min_gap: float = DEFAULT_WEIGHT_GAP,
) -> SourceEnsemble:
    """Draw K random orthonormal signals in C^d.

    Signals are i.i.d. complex Gaussian vectors orthonormalized by Householder
    QR, with the phases of R's diagonal folded back in so the result is Haar
    distributed.  With ``normalized`` the weights are rescaled to sum to 1.
    """
    w = check_weights(weights, min_gap)
    K = w.size
    if d < 1:
        raise DimensionError(f"d must be >= 1, got {d}")
    if K > d:
        raise DimensionError(f"K={K} sources do not fit in dimension d={d}")
    if normalized:
        w = w / w.sum()
        # re-check: rescaling can shrink a gap below the tolerance
        check_weights(w, min_gap)
    rng = np.random.default_rng(seed)
    G = _complex_normal(rng, (d, K), 1.0)
    Q, R = np.linalg.qr(G)
    diag = np.diagonal(R)
    Q = Q * (diag / np.abs(diag))
    return SourceEnsemble(Q.T, w, normalized=normalized, seed=seed, min_gap=min_gap)


def mixing_matrix(ensemble: SourceEnsemble) -> MixingMatrix:
    X = ensemble.signals
    M = (X.T * ensemble.weights) @ X.conj()
    return MixingMatrix(0.5 * (M + M.conj().T))


def make_sampling_matrix(
    kind: str,
    n: int,
    d: int,
    seed: int = 0,
    normalization: str = "unit",
) -> SamplingMatrix:
    """Random sensing matrix, generated block by block from (seed, block index).

    ``gaussian``: entries CN(0, v); ``phase``: entries sqrt(v) * exp(i theta),
    theta uniform on [0, 2 pi).  v is 1 or 1/d depending on ``normalization``.
    """
    if kind not in KINDS:
        raise ConfigError(f"unknown sampling kind {kind!r}; expected one of {KINDS}")
    if normalization not in NORMALIZATIONS:
        raise ConfigError(f"unknown normalization {normalization!r}")
    n, d = int(n), int(d)
    if n < 1 or d < 1:
        raise DimensionError(f"need n >= 1 and d >= 1, got n={n}, d={d}")
    var = 1.0 if normalization == "unit" else 1.0 / d
    try:
        A = np.empty((n, d), dtype=np.complex128)
    except (MemoryError, ValueError) as exc:
        raise ResourceError(f"cannot allocate {n}x{d} complex matrix ({16 * n * d} bytes)") from exc
    for b, start, stop in iter_blocks(n):
        rng = block_rng(seed, b)
        shape = (stop - start, d)
        if kind == GAUSSIAN:
            A[start:stop] = _complex_normal(rng, shape, var)
        else:
            theta = rng.uniform(0.0, 2.0 * np.pi, size=shape)
            A[start:stop] = np.sqrt(var) * np.exp(1j * theta)
    return SamplingMatrix(A, kind, seed, normalization)
