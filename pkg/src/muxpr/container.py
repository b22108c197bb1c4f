"""Binary ``MPR1`` container for ensembles, sampling matrices, measurements and spectra.

Layout (all little-endian)::

    magic    4s   b"MPR1"
    kind     u8   payload kind, see PAYLOAD_KINDS
    flags    u8   bit 0: normalized weights / "dim" normalization; bit 1: noisy
    reserved u16
    n        u64  payload rows
    d        u64  payload columns
    seed     i64  generating seed (-1 when unknown)
    K        u64  source count (spike count for spectra)
    m        u64  number of float64 scalars that follow
    scalars  m * f64   weights; or [sigma]; or eigenvalues + residuals
    payload  n * d * 2 * f64   row-major (re, im) pairs

Round trips are bit-exact.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .model import MeasurementSet, NoiseConfig, SamplingMatrix, SourceEnsemble

MAGIC = b"MPR1"
_HEADER = struct.Struct("<4sBBHQQqQQ")

ENSEMBLE, SAMPLING_GAUSSIAN, SAMPLING_PHASE, MEASUREMENTS, SPECTRUM = 1, 2, 3, 4, 5
PAYLOAD_KINDS = {
    ENSEMBLE: "ensemble",
    SAMPLING_GAUSSIAN: "sampling:gaussian",
    SAMPLING_PHASE: "sampling:phase",
    MEASUREMENTS: "measurements",
    SPECTRUM: "spectrum",
}
FLAG_A, FLAG_NOISY = 1, 2


def _pack(kind, flags, payload, seed, K, scalars) -> bytes:
    payload = np.ascontiguousarray(payload, dtype="<c16")
    scalars = np.ascontiguousarray(scalars, dtype="<f8").reshape(-1)
    n, d = payload.shape
    seed = -1 if seed is None else int(seed)
    return (
        _HEADER.pack(MAGIC, kind, flags, 0, n, d, seed, K, scalars.size)
        + scalars.tobytes()
        + payload.tobytes()
    )


def _unpack(buf: bytes):
    if len(buf) < _HEADER.size:
        raise ConfigError("truncated MPR1 container")
    magic, kind, flags, _, n, d, seed, K, m = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise ConfigError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if kind not in PAYLOAD_KINDS:
        raise ConfigError(f"unknown payload kind {kind}")
    off = _HEADER.size
    expected = off + 8 * m + 16 * n * d
    if len(buf) != expected:
        raise ConfigError(f"container size {len(buf)} does not match header ({expected} bytes)")
    scalars = np.frombuffer(buf, dtype="<f8", count=m, offset=off).astype(np.float64)
    off += 8 * m
    payload = np.frombuffer(buf, dtype="<c16", count=n * d, offset=off).astype(np.complex128)
    return kind, flags, payload.reshape(n, d), (None if seed == -1 else seed), K, scalars


def dumps(obj) -> bytes:
    """Serialize a model object (or SpectralResult) to MPR1 bytes."""
    if isinstance(obj, SourceEnsemble):
        return _pack(ENSEMBLE, FLAG_A if obj.normalized else 0, obj.signals, obj.seed, obj.K, obj.weights)
    if isinstance(obj, SamplingMatrix):
        kind = SAMPLING_GAUSSIAN if obj.kind == "gaussian" else SAMPLING_PHASE
        flags = FLAG_A if obj.normalization == "dim" else 0
        return _pack(kind, flags, obj.rows, obj.seed, 0, [])
    if isinstance(obj, MeasurementSet):
        flags = FLAG_NOISY if obj.noisy else 0
        return _pack(MEASUREMENTS, flags, obj.values[:, None], obj.noise.seed, 0, [obj.noise.sigma])
    # deferred import: spectral depends on this module's siblings only
    from .spectral import SpectralResult

    if isinstance(obj, SpectralResult):
        scalars = np.concatenate([obj.eigenvalues, obj.residuals])
        return _pack(SPECTRUM, 0, obj.eigenvectors.T, None, obj.spike_count, scalars)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def loads(buf: bytes):
    kind, flags, payload, seed, K, scalars = _unpack(buf)
    if kind == ENSEMBLE:
        return SourceEnsemble(payload, scalars, normalized=bool(flags & FLAG_A), seed=seed)
    if kind in (SAMPLING_GAUSSIAN, SAMPLING_PHASE):
        return SamplingMatrix(
            payload,
            "gaussian" if kind == SAMPLING_GAUSSIAN else "phase",
            seed,
            "dim" if flags & FLAG_A else "unit",
        )
    if kind == MEASUREMENTS:
        noise = NoiseConfig(float(scalars[0]), 0 if seed is None else seed)
        return MeasurementSet(payload[:, 0].real.copy(), noise)
    from .spectral import SpectralResult

    m = scalars.size // 2
    vecs = payload.T.copy()
    return SpectralResult(
        eigenvalues=scalars[:m],
        eigenvectors=vecs,
        residuals=scalars[m:],
        spike_count=K,
    )


def save(path, obj) -> None:
    Path(path).write_bytes(dumps(obj))


def load(path):
    return loads(Path(path).read_bytes())
