"""Voxel mask ingest, signed distance grids and training sample draws.

Sequence directory layout::

    meta.json          {"dims": [nx, ny, nz], "spacing_um": [sx, sy, sz],
                        "n_time": n, "name": "..."}
    frame_0000.raw     little-endian u8, x fastest
    frame_0001.raw     ...

Grid cache files (``*.nsdf``) hold one :class:`SdfGrid`: a 16-byte magic
(``NSDF0001`` zero padded), three u32 grid dims, ``time_coord`` and ``scale``
as f64, then f32 values with x fastest.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numba
import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

GRID_MAGIC = b"NSDF0001".ljust(16, b"\0")


class SdfDataError(ValueError):
    """Base class for data errors."""


class IngestError(SdfDataError):
    """A frame file is missing or unreadable."""


class SchemaError(SdfDataError):
    """Metadata or frame sizes are inconsistent."""


class ContentError(SdfDataError):
    """Volume content violates an invariant (empty frame, no surface, ...)."""


class ConfigError(SdfDataError):
    """Sampling parameters cannot be satisfied."""


# -- types -------------------------------------------------------------------


@dataclass
class VoxelSequence:
    volumes: list[np.ndarray]
    spacing: tuple[float, float, float]
    name: str = "sequence"

    def __post_init__(self):
        if not self.volumes:
            raise SchemaError("a sequence needs at least one frame")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise SchemaError(f"spacing must be three positive values, got {self.spacing}")
        dims = self.volumes[0].shape
        for k, v in enumerate(self.volumes):
            if v.ndim != 3 or v.shape != dims:
                raise SchemaError(f"frame {k} has dims {v.shape}, expected {dims}")
            if not v.any():
                raise ContentError(f"empty frame {k}")
        self.volumes = [np.asarray(v != 0, dtype=np.uint8) for v in self.volumes]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.volumes[0].shape

    @property
    def n_time(self) -> int:
        return len(self.volumes)


@dataclass
class SdfGrid:
    """Signed distances on a cell-centred grid in normalized units.

    The grid step is ``2 / max(dims)`` on every axis and the grid is centred
    at the origin, so the longest axis spans ``[-1, 1]`` exactly.
    """

    values: np.ndarray
    time_coord: float = 0.0
    scale: float = 1.0

    @property
    def grid(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def step(self) -> float:
        return 2.0 / max(self.values.shape)

    def axis_coords(self, axis: int) -> np.ndarray:
        n = self.values.shape[axis]
        return (np.arange(n) + 0.5) * self.step - n * self.step / 2.0

    def coords_of(self, flat_index: np.ndarray) -> np.ndarray:
        idx = np.unravel_index(flat_index, self.values.shape)
        return np.stack([self.axis_coords(a)[i] for a, i in enumerate(idx)], axis=1)

    def coords(self) -> np.ndarray:
        return self.coords_of(np.arange(self.values.size))


@dataclass
class SampleBatch:
    points: np.ndarray
    times: np.ndarray
    targets: np.ndarray
    seq_ids: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1)
        self.seq_ids = np.asarray(self.seq_ids, dtype=np.int64).reshape(-1)
        n = len(self.points)
        if not (len(self.times) == len(self.targets) == len(self.seq_ids) == n):
            raise SchemaError("points, times, targets and seq_ids must have equal length")
        if n and (np.abs(self.points).max() > 1.0 or np.abs(self.times).max() > 1.0):
            raise SchemaError("sample coordinates must lie in [-1, 1]^3 x [-1, 1]")

    def __len__(self):
        return len(self.targets)

    def select(self, mask) -> "SampleBatch":
        return SampleBatch(self.points[mask], self.times[mask], self.targets[mask], self.seq_ids[mask])

    @classmethod
    def concatenate(cls, batches: Sequence["SampleBatch"]) -> "SampleBatch":
        return cls(
            np.concatenate([b.points for b in batches]),
            np.concatenate([b.times for b in batches]),
            np.concatenate([b.targets for b in batches]),
            np.concatenate([b.seq_ids for b in batches]),
        )


# -- sequence I/O ------------------------------------------------------------


def load_voxel_sequence(path) -> VoxelSequence:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
    except FileNotFoundError:
        raise IngestError(f"{path}: missing meta.json") from None
    except json.JSONDecodeError as exc:
        raise IngestError(f"{path}: corrupt meta.json ({exc})") from None
    try:
        dims = tuple(int(d) for d in meta["dims"])
        spacing = tuple(float(s) for s in meta["spacing_um"])
        n_time = int(meta["n_time"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: bad meta.json ({exc})") from None
    if len(dims) != 3 or min(dims) < 1 or n_time < 1:
        raise SchemaError(f"{path}: invalid dims {dims} or n_time {n_time}")
    size = int(np.prod(dims))
    volumes = []
    for k in range(n_time):
        fpath = path / f"frame_{k:04d}.raw"
        try:
            raw = fpath.read_bytes()
        except OSError:
            raise IngestError(f"missing or unreadable frame {k} ({fpath})") from None
        if len(raw) != size:
            raise SchemaError(f"frame {k} ({fpath}) holds {len(raw)} bytes, expected {size} for dims {dims}")
        volumes.append(np.frombuffer(raw, dtype=np.uint8).reshape(dims, order="F"))
    for k, v in enumerate(volumes):
        if not v.any():
            raise ContentError(f"empty frame {k}")
    return VoxelSequence(volumes, spacing, str(meta.get("name", path.name)))


def save_voxel_sequence(path, seq: VoxelSequence) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {"dims": list(seq.dims), "spacing_um": list(seq.spacing), "n_time": seq.n_time, "name": seq.name}
    (path / "meta.json").write_text(json.dumps(meta, indent=2))
    for k, v in enumerate(seq.volumes):
        (path / f"frame_{k:04d}.raw").write_bytes(np.asarray(v, dtype=np.uint8).tobytes(order="F"))


# -- centering and alignment -------------------------------------------------

_STRUCT26 = np.ones((3, 3, 3), dtype=bool)


def _principal_axes(coords_um: np.ndarray, skew_tol: float = 0.05) -> np.ndarray:
    """Columns are principal axes, longest first, as a proper rotation."""
    centred = coords_um - coords_um.mean(axis=0)
    cov = centred.T @ centred / len(centred)
    evals, evecs = np.linalg.eigh(cov)
    E = evecs[:, ::-1].copy()
    skews = np.zeros(3)
    for k in range(3):
        proj = centred @ E[:, k]
        sd = proj.std()
        skews[k] = np.mean(proj**3) / sd**3 if sd > 0 else 0.0
        if abs(skews[k]) > skew_tol:
            if skews[k] < 0:
                E[:, k] *= -1
                skews[k] *= -1
        elif E[k, k] < 0:
            # skewness uninformative: prefer the orientation closest to the grid axes
            E[:, k] *= -1
    if np.linalg.det(E) < 0:
        k = int(np.argmin(np.abs(skews)))
        E[:, k] *= -1
    return E


def _rotation_angle(E: np.ndarray) -> float:
    c = (np.trace(E) - 1.0) / 2.0
    return float(np.degrees(np.arccos(min(1.0, max(-1.0, c)))))


def _place(mask: np.ndarray, spacing, target, E: np.ndarray | None, out: np.ndarray) -> None:
    """Write ``mask`` into ``out`` with its centroid moved to ``target`` (voxel coords)."""
    idx = np.argwhere(mask)
    c = idx.mean(axis=0)
    target = np.asarray(target, dtype=float)
    if E is None:
        shift = np.round(target - c).astype(int)
        dst = idx + shift
    else:
        s = np.asarray(spacing, dtype=float)
        # backward map over the bounding box of the rotated body
        radius = np.sqrt((((idx - c) * s) ** 2).sum(axis=1)).max() / s.min() + 2
        lo = np.maximum(np.floor(target - radius).astype(int), 0)
        hi = np.minimum(np.ceil(target + radius).astype(int) + 1, out.shape)
        grids = np.meshgrid(*[np.arange(a, b) for a, b in zip(lo, hi)], indexing="ij")
        p = np.stack([g.ravel() for g in grids], axis=1).astype(float)
        src = c + ((p - target) * s) @ E.T / s
        src = np.round(src).astype(int)
        ok = np.all((src >= 0) & (src < mask.shape), axis=1)
        hit = np.zeros(len(p), dtype=bool)
        hit[ok] = mask[tuple(src[ok].T)] != 0
        dst = p[hit].astype(int)
        # re-centre with an integer shift so the centroid lands within half a voxel
        if len(dst):
            dst = dst + np.round(target - dst.mean(axis=0)).astype(int)
    inside = np.all((dst >= 0) & (dst < out.shape), axis=1)
    if not inside.all():
        raise ContentError("shape does not fit in its target region after centering")
    out[tuple(dst.T)] = 1


def _center_frame(vol: np.ndarray, spacing, align: bool, tol_deg: float) -> np.ndarray:
    labels, n = ndimage.label(vol, structure=_STRUCT26)
    if n > 2:
        raise ContentError(f"frame holds {n} connected components (at most 2 supported)")
    dims = np.array(vol.shape)
    center = (dims - 1) / 2.0
    s = np.asarray(spacing, dtype=float)
    out = np.zeros_like(vol, dtype=np.uint8)

    def axes_for(mask):
        if not align:
            return None
        E = _principal_axes(np.argwhere(mask) * s)
        return None if _rotation_angle(E) < tol_deg else E

    if n <= 1:
        _place(vol != 0, spacing, center, axes_for(vol != 0), out)
        return out

    comps = [labels == i for i in (1, 2)]
    # order daughters along the dominant axis of the pair
    e = _principal_axes(np.argwhere(vol) * s)[:, 0]
    e = e if e[np.argmax(np.abs(e))] > 0 else -e
    proj = [float((np.argwhere(m).mean(axis=0) * s) @ e) for m in comps]
    comps = [comps[i] for i in np.argsort(proj)]
    quarter = dims[0] / 4.0
    for m, sign in zip(comps, (-1.0, 1.0)):
        half_len = np.sqrt((((np.argwhere(m) - np.argwhere(m).mean(axis=0)) * s) ** 2).sum(axis=1)).max() / s[0]
        if half_len >= quarter:
            raise ContentError("daughter component too large for its half of the domain")
        target = center + np.array([sign * quarter, 0.0, 0.0])
        _place(m, spacing, target, axes_for(m), out)
    return out


def center_and_align(seq: VoxelSequence, align: bool = True, tol_deg: float = 3.0) -> VoxelSequence:
    """Centre every frame on its centroid and optionally rotate onto principal axes.

    Frames with two connected components (26-connectivity) are treated as a
    division: each body is centred in its own half of the x axis and aligned
    on its own. Rotations smaller than ``tol_deg`` are skipped, which keeps the
    operation idempotent under nearest-neighbour resampling.
    """
    vols = [_center_frame(v, seq.spacing, align, tol_deg) for v in seq.volumes]
    return VoxelSequence(vols, seq.spacing, seq.name)


def resample_isotropic(volume: np.ndarray, spacing, n: int) -> tuple[np.ndarray, float]:
    """Nearest-neighbour resample onto an ``n^3`` cube covering the largest extent.

    Returns the new volume and its isotropic spacing.
    """
    dims = np.array(volume.shape)
    s = np.asarray(spacing, dtype=float)
    extent = dims * s
    new_s = extent.max() / n
    centre_um = extent / 2.0
    axes = []
    for a in range(3):
        pos = (np.arange(n) + 0.5) * new_s - n * new_s / 2.0 + centre_um[a]
        axes.append(np.floor(pos / s[a]).astype(int))
    out = np.zeros((n, n, n), dtype=np.uint8)
    valid = [(ix >= 0) & (ix < dims[a]) for a, ix in enumerate(axes)]
    sub = volume[np.ix_(*[ix[v] for ix, v in zip(axes, valid)])]
    out[np.ix_(*[np.flatnonzero(v) for v in valid])] = sub
    return out, float(new_s)


# -- Euclidean distance transform --------------------------------------------


@numba.njit(cache=True)
def _envelope_lines(f, w):
    """In-place 1-D squared distance transform of every row of ``f``.

    ``f`` holds squared distances (``inf`` where unknown); ``w`` is the squared
    spacing along the row.
    """
    n_lines, n = f.shape
    v = np.zeros(n, dtype=np.int64)
    z = np.zeros(n + 1)
    out = np.empty(n)
    for li in range(n_lines):
        row = f[li]
        k = -1
        for q in range(n):
            fq = row[q]
            if fq == np.inf:
                continue
            if k < 0:
                k = 0
                v[0] = q
                z[0] = -np.inf
                z[1] = np.inf
                continue
            while True:
                p = v[k]
                s = ((fq + w * q * q) - (row[p] + w * p * p)) / (2.0 * w * (q - p))
                if s <= z[k]:
                    k -= 1
                else:
                    break
            k += 1
            v[k] = q
            z[k] = s
            z[k + 1] = np.inf
        if k < 0:
            continue
        j = 0
        for q in range(n):
            while z[j + 1] < q:
                j += 1
            d = q - v[j]
            out[q] = w * (d * d) + row[v[j]]
        for q in range(n):
            row[q] = out[q]


def squared_distance_to(mask: np.ndarray, spacing) -> np.ndarray:
    """Exact squared Euclidean distance from every voxel to the nearest ``True`` voxel."""
    f = np.where(mask, 0.0, np.inf)
    for axis in range(3):
        moved = np.ascontiguousarray(np.moveaxis(f, axis, -1))
        shape = moved.shape
        lines = moved.reshape(-1, shape[-1])
        _envelope_lines(lines, float(spacing[axis]) * float(spacing[axis]))
        f = np.moveaxis(lines.reshape(shape), -1, axis)
    return np.ascontiguousarray(f)


def signed_distance_transform(volume: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Signed distance in physical units: negative inside, positive outside.

    Each background voxel gets its distance to the nearest foreground voxel and
    each foreground voxel minus its distance to the nearest background voxel,
    so the zero crossing falls on voxel faces.
    """
    fg = np.asarray(volume) != 0
    if fg.all() or not fg.any():
        raise ContentError("volume needs both foreground and background voxels")
    d_fg = np.sqrt(squared_distance_to(fg, spacing))
    d_bg = np.sqrt(squared_distance_to(~fg, spacing))
    return np.where(fg, -d_bg, d_fg)


# -- normalization -----------------------------------------------------------


def time_coordinate(index: int, n_time: int) -> float:
    return 0.0 if n_time == 1 else -1.0 + 2.0 * index / (n_time - 1)


def normalize_to_domain(sdf_um: np.ndarray, spacing, time_index: int = 0, n_time: int = 1) -> SdfGrid:
    """Map a micrometre SDF on an isotropic grid into the normalized domain.

    The scale (micrometres per normalized unit) is half the largest physical
    extent, so the longest axis maps onto [-1, 1].
    """
    s = np.asarray(spacing, dtype=float).reshape(-1)
    if s.size == 1:
        s = np.repeat(s, 3)
    if not np.allclose(s, s[0], rtol=1e-12, atol=0):
        raise SchemaError("normalize_to_domain needs isotropic spacing; resample first")
    scale = max(sdf_um.shape) * s[0] / 2.0
    values = (np.asarray(sdf_um, dtype=np.float64) / scale).astype(np.float32)
    return SdfGrid(values, time_coordinate(time_index, n_time), float(scale))


def denormalize(grid: SdfGrid) -> np.ndarray:
    return np.asarray(grid.values, dtype=np.float64) * grid.scale


def write_grid(path, grid: SdfGrid) -> None:
    gx, gy, gz = grid.values.shape
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<3I", gx, gy, gz))
        fh.write(struct.pack("<2d", float(grid.time_coord), float(grid.scale)))
        fh.write(np.asarray(grid.values, dtype="<f4").tobytes(order="F"))


def read_grid(path) -> SdfGrid:
    data = Path(path).read_bytes()
    if data[:16] != GRID_MAGIC:
        raise IngestError(f"{path}: not an SDF grid file")
    gx, gy, gz = struct.unpack("<3I", data[16:28])
    t, scale = struct.unpack("<2d", data[28:44])
    n = gx * gy * gz
    if len(data) != 44 + 4 * n:
        raise IngestError(f"{path}: truncated grid payload")
    values = np.frombuffer(data, dtype="<f4", offset=44, count=n).reshape((gx, gy, gz), order="F")
    return SdfGrid(values.astype(np.float32), t, scale)


# -- training sample draws ----------------------------------------------------


@dataclass
class SamplingConfig:
    batch_sequences: int = 5
    points_per_timepoint: int = 20_000
    near_threshold_um: float = 0.6
    near_fraction: float = 0.7


@dataclass
class _Strata:
    near: np.ndarray
    far: np.ndarray


@dataclass
class GridSampler:
    """Caches the near/far voxel indices of every grid it has seen."""

    near_threshold_um: float = 0.6
    _cache: dict = field(default_factory=dict)

    def strata(self, grid: SdfGrid) -> _Strata:
        key = id(grid)
        hit = self._cache.get(key)
        if hit is None or hit[0] is not grid:
            flat = grid.values.reshape(-1)
            near = flat <= self.near_threshold_um / grid.scale
            hit = (grid, _Strata(np.flatnonzero(near), np.flatnonzero(~near)))
            self._cache[key] = hit
        return hit[1]

    def draw(self, grid: SdfGrid, n: int, rng: np.random.Generator, near_fraction: float = 0.7):
        """Flat voxel indices: ``round(near_fraction * n)`` near-surface, the rest far."""
        st = self.strata(grid)
        total = len(st.near) + len(st.far)
        if n > total:
            raise ConfigError(f"points_per_timepoint={n} exceeds the {total} samples in the grid")
        want_near = int(round(near_fraction * n))
        want_far = n - want_near
        n_near = min(want_near, len(st.near))
        n_far = min(want_far, len(st.far))
        if n_near < want_near:
            n_far = n - n_near
            log.info("near stratum exhausted: %d near + %d far (wanted %d near)", n_near, n_far, want_near)
        elif n_far < want_far:
            n_near = n - n_far
            log.info("far stratum exhausted: %d near + %d far (wanted %d far)", n_near, n_far, want_far)
        near = rng.choice(st.near, size=n_near, replace=False) if n_near else st.near[:0]
        far = rng.choice(st.far, size=n_far, replace=False) if n_far else st.far[:0]
        return near, far


def sample_grid(grid: SdfGrid, flat_index: np.ndarray, seq_id: int) -> SampleBatch:
    pts = grid.coords_of(flat_index)
    return SampleBatch(
        pts,
        np.full(len(flat_index), grid.time_coord),
        grid.values.reshape(-1)[flat_index],
        np.full(len(flat_index), seq_id),
    )


def draw_training_batch(
    grids: Mapping[int, Sequence[SdfGrid]],
    rng: np.random.Generator,
    cfg: SamplingConfig,
    sampler: GridSampler | None = None,
) -> SampleBatch:
    """Pick ``batch_sequences`` sequences with repetition, one random time point
    each, and draw stratified samples from each chosen grid."""
    sampler = sampler or GridSampler(cfg.near_threshold_um)
    keys = sorted(grids)
    parts = []
    for _ in range(cfg.batch_sequences):
        seq = keys[int(rng.integers(len(keys)))]
        frames = grids[seq]
        grid = frames[int(rng.integers(len(frames)))]
        near, far = sampler.draw(grid, cfg.points_per_timepoint, rng, cfg.near_fraction)
        parts.append(sample_grid(grid, np.concatenate([near, far]), seq))
    return SampleBatch.concatenate(parts)
