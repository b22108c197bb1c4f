"""Monte-Carlo experiments: oversampling sweeps, WCM spectra, and a simulated
two-target focusing run through a random transmission matrix.

Every random draw is seeded from the master seed through ``derive_seed``, so
a configuration reproduces byte-identical CSV output whatever the worker count.
"""
from __future__ import annotations

import csv
import hashlib
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, EmptyBackground, MuxprError
from .forward import add_noise, measure, mixed_intensities
from .metrics import MIN_BACKGROUND, SBR_BACKGROUND, greedy_match, match_and_score, sbr, similarity_matrix
from .model import KINDS, NoiseConfig, check_weights, make_ensemble, make_sampling_matrix
from .spectral import build_wcm, make_rule, recover

SPIKE_RULES = ("mp-edge", "bulk-edge", "largest-gap")


def derive_seed(master: int, *keys) -> int:
    """Stable 63-bit seed from a master seed and a tuple of keys."""
    h = hashlib.blake2b(repr((int(master),) + tuple(keys)).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little") >> 1


@dataclass(frozen=True)
class SweepConfig:
    d: int
    weights: tuple[float, ...]
    alphas: tuple[float, ...]
    trials: int = 10
    kind: str = "gaussian"
    noise_sigma: float = 0.0
    spike_rule: str = "mp-edge"
    seed: int = 0
    normalized: bool = True

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        if self.d < 1:
            raise ConfigError(f"d must be >= 1, got {self.d}")
        if self.weights:
            check_weights(self.weights)
        if len(self.weights) > self.d:
            raise ConfigError(f"K={len(self.weights)} exceeds d={self.d}")
        if not self.alphas:
            raise ConfigError("at least one alpha is required")
        for a in self.alphas:
            if not (math.isfinite(a) and a > 0):
                raise ConfigError(f"alpha must be > 0, got {a}")
            if self.n_for(a) < 1:
                raise ConfigError(f"alpha={a} gives n < 1 at d={self.d}")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}")
        if self.spike_rule not in SPIKE_RULES:
            raise ConfigError(f"spike rule must be one of {SPIKE_RULES}")
        NoiseConfig(self.noise_sigma)

    @property
    def K(self) -> int:
        return len(self.weights)

    def n_for(self, alpha: float) -> int:
        return int(math.floor(alpha * self.d + 0.5))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ExperimentRecord:
    config: dict
    trial: int
    seed: int
    alpha: float | None = None
    n: int | None = None
    rho: list[float] = field(default_factory=list)
    matching: list[int] = field(default_factory=list)
    spike_count: int = -1
    eigenvalues: np.ndarray | None = None
    sbr: dict | None = None
    timings: dict = field(default_factory=dict)
    failed: bool = False
    error: str | None = None


def _run_point(config: SweepConfig, ai: int, trial: int, keep_spectrum=False, subtract_identity=False):
    alpha = config.alphas[ai]
    n = config.n_for(alpha)
    seed = derive_seed(config.seed, "point", ai, trial)
    rec = ExperimentRecord(config.to_dict(), trial, seed, alpha, n)
    K = config.K
    try:
        t0 = time.perf_counter()
        A = make_sampling_matrix(config.kind, n, config.d, derive_seed(seed, "matrix"))
        noise = NoiseConfig(config.noise_sigma, derive_seed(seed, "noise"))
        if K:
            ens = make_ensemble(config.d, config.weights, derive_seed(seed, "ensemble"), config.normalized)
            y = measure(ens, A, noise)
        else:
            # no-signal control: constant intensities
            ens = None
            y = add_noise(np.ones(n), noise)
        t1 = time.perf_counter()
        Y = build_wcm(y, A)
        t2 = time.perf_counter()
        res = recover(Y, k_hint=K or None, rule=make_rule(config.spike_rule, Y), subtract_identity=subtract_identity)
        t3 = time.perf_counter()
        rec.spike_count = int(res.spike_count)
        if ens is not None:
            report = match_and_score(res.estimates, ens, res.spike_count)
            rec.rho = [float(r) for r in report.rho]
            rec.matching = [int(m) for m in report.matching]
        if keep_spectrum:
            rec.eigenvalues = res.eigenvalues
        rec.timings = {"measure": t1 - t0, "wcm": t2 - t1, "recover": t3 - t2}
    except (MuxprError, np.linalg.LinAlgError) as exc:
        rec.failed = True
        rec.error = f"{type(exc).__name__}: {exc}"
        rec.rho = [math.nan] * K
    return rec


def _pool_map(fn, items, workers):
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def run_sweep(config: SweepConfig, workers: int = 1) -> list[ExperimentRecord]:
    """One record per (alpha, trial), in config order.  Failed points are flagged, not raised."""
    points = [(ai, t) for ai in range(len(config.alphas)) for t in range(config.trials)]
    return _pool_map(lambda p: _run_point(config, *p), points, workers)


def run_spectrum(config: SweepConfig, alpha: float | None = None, trial: int = 0,
                 subtract_identity: bool = False) -> ExperimentRecord:
    """Full WCM spectrum of one realization.

    An ``alpha`` already on the config's grid reproduces that sweep point
    exactly (same derived seeds); any other value gets a one-point config.
    """
    if alpha is None:
        if len(config.alphas) != 1:
            raise ConfigError("run_spectrum needs a single alpha")
        ai = 0
    elif float(alpha) in config.alphas:
        ai = config.alphas.index(float(alpha))
    else:
        config = SweepConfig(**{**config.to_dict(), "alphas": (alpha,)})
        ai = 0
    return _run_point(config, ai, trial, keep_spectrum=True, subtract_identity=subtract_identity)


def summarize(records: Sequence[ExperimentRecord]) -> dict[float, dict[str, np.ndarray]]:
    """Per-alpha mean, median and standard error of rho over successful trials."""
    by_alpha: dict[float, list] = {}
    for r in records:
        if not r.failed:
            by_alpha.setdefault(r.alpha, []).append(r.rho)
    out = {}
    for a, rows in by_alpha.items():
        R = np.array(rows, dtype=float)
        se = R.std(axis=0, ddof=1) / np.sqrt(len(R)) if len(R) > 1 else np.zeros(R.shape[1])
        out[a] = {"mean": R.mean(axis=0), "median": np.median(R, axis=0), "se": se, "trials": len(R)}
    return out


def empirical_thresholds(records: Sequence[ExperimentRecord], level: float = 0.5) -> np.ndarray:
    """Smallest swept alpha where the median rho of each source reaches ``level`` (inf if never)."""
    stats = summarize(records)
    K = len(next(iter(stats.values()))["median"])
    out = np.full(K, np.inf)
    for a in sorted(stats):
        hit = (stats[a]["median"] >= level) & np.isinf(out)
        out[hit] = a
    return out


SWEEP_FIELDS = ["d", "K", "alpha", "seed", "source_index", "lambda", "rho", "spike_count"]


def write_sweep_csv(path, records: Sequence[ExperimentRecord]) -> int:
    rows = 0
    with open(Path(path), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SWEEP_FIELDS)
        for r in records:
            cfg = r.config
            lam = _effective_weights(cfg)
            for k, rho in enumerate(r.rho):
                w.writerow([cfg["d"], len(lam), repr(r.alpha), r.seed, k, repr(lam[k]), repr(rho), r.spike_count])
                rows += 1
    return rows


def _effective_weights(cfg: dict) -> list[float]:
    w = np.asarray(cfg["weights"], dtype=float)
    if cfg.get("normalized") and w.size:
        w = w / w.sum()
    return [float(v) for v in w]




# --- focusing simulation ----------------------------------------------------


def default_schedule(n_max: int = 10240, n_min: int = 512, points: int = 6) -> tuple[int, ...]:
    n_min = min(n_min, n_max)
    sched = np.unique(np.rint(np.geomspace(n_min, n_max, points)).astype(int))
    return tuple(int(v) for v in sched)


def default_targets(grid: int, count: int = 2) -> tuple[tuple[int, int], ...]:
    rows = [(i + 1) * grid // (count + 1) for i in range(count)]
    return tuple((r, grid - 1 - r) for r in rows)


@dataclass(frozen=True)
class FocusConfig:
    d: int = 256
    grid: int = 32
    weights: tuple[float, ...] = (1.0, 0.7)
    targets: tuple[tuple[int, int], ...] | None = None
    n_schedule: tuple[int, ...] = field(default_factory=default_schedule)
    seed: int = 0
    noise_sigma: float = 0.0
    spike_rule: str = "mp-edge"

    def __post_init__(self):
        w = tuple(float(v) for v in self.weights)
        object.__setattr__(self, "weights", w)
        check_weights(w)
        if self.d < 1:
            raise ConfigError(f"d must be >= 1, got {self.d}")
        if self.grid < 1:
            raise ConfigError(f"grid must be >= 1, got {self.grid}")
        targets = self.targets if self.targets is not None else default_targets(self.grid, len(w))
        targets = tuple((int(r), int(c)) for r, c in targets)
        object.__setattr__(self, "targets", targets)
        if len(targets) != len(w):
            raise ConfigError(f"{len(targets)} targets for {len(w)} weights")
        if len(set(targets)) != len(targets):
            raise ConfigError(f"targets must be distinct, got {targets}")
        for r, c in targets:
            if not (0 <= r < self.grid and 0 <= c < self.grid):
                raise ConfigError(f"target {(r, c)} outside the {self.grid}x{self.grid} grid")
        if self.grid**2 - len(targets) < MIN_BACKGROUND:
            raise EmptyBackground(
                f"a {self.grid}x{self.grid} grid with {len(targets)} targets leaves "
                f"{self.grid**2 - len(targets)} background pixels; need {MIN_BACKGROUND}"
            )
        sched = tuple(int(n) for n in self.n_schedule)
        if not sched or min(sched) < 1:
            raise ConfigError("n_schedule needs positive measurement counts")
        object.__setattr__(self, "n_schedule", tuple(sorted(sched)))
        NoiseConfig(self.noise_sigma)
        if self.spike_rule not in SPIKE_RULES:
            raise ConfigError(f"spike rule must be one of {SPIKE_RULES}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["targets"] = [list(t) for t in self.targets]
        out["sbr_background"] = SBR_BACKGROUND
        return out


def phase_pattern(v: np.ndarray) -> np.ndarray:
    """Unit-modulus SLM pattern carrying the phase of ``v``."""
    return np.exp(1j * np.angle(v))


def camera_image(T: np.ndarray, pattern: np.ndarray, grid: int) -> np.ndarray:
    field_ = T @ pattern
    return (field_.real**2 + field_.imag**2).reshape(grid, grid)


def run_focusing(config: FocusConfig) -> ExperimentRecord:
    """Simulated focusing on several fluorescent targets behind a scattering medium.

    The medium is a (grid^2 x d) complex Gaussian transmission matrix T.  The
    signal of target k is x_k = conj(T[p_k]) / ||T[p_k]||, so showing the
    phase of x_k on the SLM phase-conjugates that row.  Random phase-only SLM
    patterns give the mixed intensities; the top eigenvectors of the WCM are
    displayed in turn and the per-target SBR is read off the camera image.
    """
    g, d = config.grid, config.d
    K = len(config.weights)
    w = np.asarray(config.weights)
    P = g * g
    T = make_sampling_matrix("gaussian", P, d, derive_seed(config.seed, "medium")).rows
    pix = [r * g + c for r, c in config.targets]
    X = T[pix].conj()
    X = X / np.linalg.norm(X, axis=1, keepdims=True)

    n_max = config.n_schedule[-1]
    A = make_sampling_matrix("phase", n_max, d, derive_seed(config.seed, "slm"))
    y = add_noise(mixed_intensities(X, w, A.rows), NoiseConfig(config.noise_sigma, derive_seed(config.seed, "noise")))

    control = np.array([sbr(camera_image(T, phase_pattern(X[k]), g), config.targets)[k] for k in range(K)])

    rec = ExperimentRecord(config.to_dict(), 0, config.seed)
    curves, rhos, spikes, flags = [], [], [], []
    images = None
    t0 = time.perf_counter()
    try:
        for n in config.n_schedule:
            Y = build_wcm(y[:n], A.head(n))
            res = recover(Y, k_hint=K, rule=make_rule(config.spike_rule, Y))
            S = similarity_matrix(res.estimates, X)
            match = greedy_match(S)
            imgs = [camera_image(T, phase_pattern(res.estimates[e]), g) for e in match]
            curves.append([float(sbr(imgs[k], config.targets)[k]) for k in range(K)])
            rhos.append([float(S[e, k]) for k, e in enumerate(match)])
            spikes.append(int(res.spike_count))
            if res.spike_count != K:
                flags.append(f"n={n}: detected {res.spike_count} spikes, expected {K}")
            images = imgs
    except (MuxprError, np.linalg.LinAlgError) as exc:
        rec.failed = True
        rec.error = f"{type(exc).__name__}: {exc}"
    rec.n = n_max
    rec.spike_count = spikes[-1] if spikes else -1
    rec.rho = rhos[-1] if rhos else []
    rec.sbr = {
        "n": list(config.n_schedule[: len(curves)]),
        "sbr": curves,
        "rho": rhos,
        "spike_counts": spikes,
        "control_sbr": [float(c) for c in control],
        "flags": flags,
        "images": images,
        "targets": config.targets,
    }
    rec.timings = {"total": time.perf_counter() - t0}
    return rec


def write_focus_csv(path, rec: ExperimentRecord) -> None:
    weights = rec.config["weights"]
    s = rec.sbr
    with open(Path(path), "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["n", "target_index", "lambda", "sbr", "control_sbr"])
        for n, row in zip(s["n"], s["sbr"]):
            for k, v in enumerate(row):
                wr.writerow([n, k, repr(float(weights[k])), repr(v), repr(s["control_sbr"][k])])


def write_pgm(path, image: np.ndarray, maxval: int = 65535) -> None:
    """Plain-text (P2) graymap, intensities scaled so the brightest pixel is ``maxval``."""
    img = np.asarray(image, dtype=np.float64)
    top = img.max()
    q = np.zeros(img.shape, dtype=np.int64) if top <= 0 else np.rint(img / top * maxval).astype(np.int64)
    h, w = q.shape
    lines = ["P2", f"{w} {h}", str(maxval)] + [" ".join(str(v) for v in row) for row in q]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pgm(path) -> np.ndarray:
    tokens = [t for line in Path(path).read_text().splitlines() if not line.startswith("#") for t in line.split()]
    if tokens[0] != "P2":
        raise ConfigError(f"{path} is not a plain PGM file")
    w, h = int(tokens[1]), int(tokens[2])
    return np.array(tokens[4 : 4 + w * h], dtype=np.int64).reshape(h, w)
