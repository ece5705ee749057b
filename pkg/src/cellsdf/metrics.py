"""Shape-set comparison: overlap, descriptors, KS tests and latent PCA."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .infer import MeshSurface
from .sdfdata import ContentError

METRICS = ("surface", "volume", "sphericity")
SERIES_COLUMNS = ("time", "mean", "median", "iqr_lo", "iqr_hi", "min", "max")


def dice(a, b) -> float:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"dice: shape mismatch {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


@dataclass(frozen=True)
class ShapeMetrics:
    surface: float
    volume: float
    sphericity: float
    volume_mode: str = "mesh"


def sphericity(volume: float, surface: float) -> float:
    """Wadell sphericity: area of the equal-volume sphere over the actual area."""
    return math.pi ** (1.0 / 3.0) * (6.0 * volume) ** (2.0 / 3.0) / surface


def shape_metrics(mesh: MeshSurface, volume_mode: str = "mesh", voxels=None, spacing=(1.0, 1.0, 1.0)) -> ShapeMetrics:
    """Surface, volume and sphericity of a mesh given in physical units.

    In ``voxel`` mode the volume is the foreground count of ``voxels`` times
    the voxel volume; the surface always comes from the mesh.
    """
    if mesh.is_empty:
        raise ContentError("shape_metrics: empty mesh")
    area = mesh.area()
    if volume_mode == "mesh":
        if not mesh.is_closed():
            raise ContentError("shape_metrics: mesh is not closed; volume undefined")
        vol = abs(mesh.signed_volume())
    elif volume_mode == "voxel":
        if voxels is None:
            raise ValueError("voxel mode needs a binary volume")
        vol = float(np.count_nonzero(voxels)) * float(np.prod(spacing))
    else:
        raise ValueError(f"unknown volume mode {volume_mode!r}")
    if area <= 0 or vol <= 0:
        raise ContentError("shape_metrics: degenerate shape")
    return ShapeMetrics(area, vol, sphericity(vol, area), volume_mode)


@dataclass
class DescriptorSeries:
    """Per-time statistics; ``rows[metric]`` has columns :data:`SERIES_COLUMNS`."""

    times: np.ndarray
    rows: dict

    def column(self, metric: str, name: str) -> np.ndarray:
        return self.rows[metric][:, SERIES_COLUMNS.index(name)]


def descriptor_series(table: Sequence[Sequence[ShapeMetrics]], times=None) -> DescriptorSeries:
    """Summarize a (sequence x time) table of :class:`ShapeMetrics`.

    Quantiles use linear interpolation between order statistics.
    """
    if len(table) == 0:
        raise ValueError("descriptor_series: no sequences")
    n_time = len(table[0])
    if any(len(row) != n_time for row in table):
        raise ValueError("descriptor_series: ragged sequence x time table")
    if times is None:
        times = np.arange(n_time, dtype=float)
    times = np.asarray(times, dtype=float)
    rows = {}
    for m in METRICS:
        vals = np.array([[getattr(c, m) for c in row] for row in table], dtype=np.float64)
        q = np.quantile(vals, [0.25, 0.5, 0.75], axis=0, method="linear")
        rows[m] = np.column_stack([times, vals.mean(axis=0), q[1], q[0], q[2], vals.min(axis=0), vals.max(axis=0)])
    return DescriptorSeries(times, rows)


# -- Kolmogorov-Smirnov -------------------------------------------------------


def kolmogorov_q(lam: float, terms: int = 100) -> float:
    """Survival function of the Kolmogorov distribution, ``P(K > lam)``."""
    if lam <= 0:
        return 1.0
    if lam < 1.0:
        # theta-function form converges fast for small arguments
        k = np.arange(1, terms + 1)
        s = np.exp(-((2 * k - 1) ** 2) * math.pi**2 / (8 * lam * lam)).sum()
        return float(min(1.0, max(0.0, 1.0 - math.sqrt(2 * math.pi) / lam * s)))
    k = np.arange(1, terms + 1)
    s = 2.0 * np.sum((-1.0) ** (k - 1) * np.exp(-2.0 * k * k * lam * lam))
    return float(min(1.0, max(0.0, s)))


def ks_statistic(x, y) -> float:
    x = np.sort(np.asarray(x, dtype=np.float64))
    y = np.sort(np.asarray(y, dtype=np.float64))
    grid = np.concatenate([x, y])
    fx = np.searchsorted(x, grid, side="right") / len(x)
    fy = np.searchsorted(y, grid, side="right") / len(y)
    return float(np.max(np.abs(fx - fy)))


def ks_two_sample(x, y, method: str = "asymptotic", n_permutations: int = 2000, rng=None) -> tuple[float, float]:
    """Two-sided two-sample KS test returning ``(D, p)``.

    ``asymptotic`` evaluates the Kolmogorov survival function at
    ``sqrt(n_eff) * D`` with ``n_eff = n m / (n + m)``. ``permutation``
    estimates the p-value by relabelling the pooled sample.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if len(x) < 2 or len(y) < 2:
        raise ValueError("ks_two_sample needs at least two values per sample")
    d = ks_statistic(x, y)
    if method == "asymptotic":
        n_eff = len(x) * len(y) / (len(x) + len(y))
        return d, kolmogorov_q(math.sqrt(n_eff) * d)
    if method == "permutation":
        rng = np.random.default_rng(0) if rng is None else rng
        pooled = np.concatenate([x, y])
        hits = 0
        for _ in range(n_permutations):
            perm = rng.permutation(pooled)
            if ks_statistic(perm[: len(x)], perm[len(x) :]) >= d - 1e-12:
                hits += 1
        return d, (hits + 1) / (n_permutations + 1)
    raise ValueError(f"unknown KS method {method!r}")


# -- latent space --------------------------------------------------------------


@dataclass
class PCAResult:
    ratios: np.ndarray
    components: np.ndarray
    projections: np.ndarray
    mean: np.ndarray

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.ratios)


def latent_pca(latents) -> PCAResult:
    z = np.asarray(latents, dtype=np.float64)
    if z.ndim != 2 or len(z) < 2:
        raise ValueError("latent_pca needs at least two codes")
    mean = z.mean(axis=0)
    zc = z - mean
    cov = zc.T @ zc / (len(z) - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    total = evals.sum()
    ratios = evals / total if total > 0 else np.full_like(evals, 1.0 / len(evals))
    return PCAResult(ratios, evecs.T, zc @ evecs, mean)


def nearest_centroid_labels(codes, labels, queries) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    centroids = np.stack([codes[labels == c].mean(axis=0) for c in classes])
    d = np.linalg.norm(np.asarray(queries, dtype=np.float64)[:, None, :] - centroids[None], axis=2)
    return classes[np.argmin(d, axis=1)]


# -- reports -------------------------------------------------------------------


def write_series_csv(path, series: DescriptorSeries, metric: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SERIES_COLUMNS)
        for row in series.rows[metric]:
            w.writerow([f"{v:.10g}" for v in row])


def write_pca_csv(path, result: PCAResult, n_proj: int = 2) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["component", "ratio", "cumulative"])
        for i, (r, c) in enumerate(zip(result.ratios, result.cumulative)):
            w.writerow([i, f"{r:.10g}", f"{c:.10g}"])
        w.writerow([])
        w.writerow(["index"] + [f"pc{i}" for i in range(n_proj)])
        for i, p in enumerate(result.projections[:, :n_proj]):
            w.writerow([i] + [f"{v:.10g}" for v in p])


def write_json(path, payload) -> None:
    def default(o):
        if isinstance(o, np.generic):
            return o.item()
        if isinstance(o, np.ndarray):
            return o.tolist()
        if hasattr(o, "__dataclass_fields__"):
            return asdict(o)
        raise TypeError(type(o))

    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=default)
