"""Grid evaluation, latent sampling, voxelization and mesh extraction."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _mc_tables as mc
from .model import ModelState, forward
from .sdfdata import ConfigError, SdfGrid

log = logging.getLogger(__name__)


@dataclass
class GridSpec:
    dims: tuple[int, int, int] = (64, 64, 64)
    time_points: Sequence[float] = (0.0,)
    chunk: int = 32
    max_chunk_bytes: int = 1 << 30

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or min(self.dims) < 2:
            raise ConfigError("grid dims must be three values >= 2")
        if self.chunk < 1:
            raise ConfigError("chunk must be >= 1")
        self.time_points = [float(t) for t in self.time_points]


def _chunk_bytes(state: ModelState, chunk: int) -> int:
    # without recording, only a couple of layers are alive at once
    widest = max(i + o for o, i in state.arch.layer_shapes())
    return chunk**3 * widest * np.dtype(state.dtype).itemsize * 3


# Every decoder call sees exactly this many rows (the tail is zero-padded), so
# BLAS always takes the same kernel path and a point's value does not depend on
# how the grid was split into chunks.
EVAL_ROWS = 512


def forward_fixed(state: ModelState, pts: np.ndarray, t: float, z, angles) -> np.ndarray:
    n = len(pts)
    padded = np.zeros((-(-n // EVAL_ROWS) * EVAL_ROWS, 3))
    padded[:n] = pts
    out = np.empty(len(padded), dtype=state.dtype)
    tt = np.full(EVAL_ROWS, t)
    for lo in range(0, len(padded), EVAL_ROWS):
        out[lo : lo + EVAL_ROWS] = forward(state, padded[lo : lo + EVAL_ROWS], tt, z, angles)
    return out[:n]


def plan_chunks(dims, chunk: int) -> list[tuple[slice, slice, slice]]:
    """Sub-grid blocks of edge ``chunk`` covering ``dims`` in x-fastest order."""
    blocks = []
    for k in range(0, dims[2], chunk):
        for j in range(0, dims[1], chunk):
            for i in range(0, dims[0], chunk):
                blocks.append((slice(i, min(i + chunk, dims[0])), slice(j, min(j + chunk, dims[1])), slice(k, min(k + chunk, dims[2]))))
    return blocks


def evaluate_grid(state: ModelState, z, angles, spec: GridSpec, scale: float = 1.0, workers: int = 1) -> list[SdfGrid]:
    """Evaluate the decoder on every grid point, one ``chunk^3`` block at a time.

    Returns one :class:`SdfGrid` per entry of ``spec.time_points``. Blocks are
    independent, so results do not depend on ``chunk`` or ``workers``.
    """
    need = _chunk_bytes(state, spec.chunk)
    if need > spec.max_chunk_bytes:
        fit = spec.chunk
        while fit > 1 and _chunk_bytes(state, fit) > spec.max_chunk_bytes:
            fit -= 1
        raise ConfigError(f"chunk {spec.chunk} needs ~{need >> 20} MiB; use chunk <= {fit}")
    probe = SdfGrid(np.empty(spec.dims, dtype=np.float32))
    axes = [probe.axis_coords(a) for a in range(3)]
    blocks = plan_chunks(spec.dims, spec.chunk)
    out = []
    for t in spec.time_points:
        values = np.empty(spec.dims, dtype=state.dtype)

        def run(block):
            gx, gy, gz = np.meshgrid(axes[0][block[0]], axes[1][block[1]], axes[2][block[2]], indexing="ij")
            pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
            pred = forward_fixed(state, pts, t, z, angles)
            values[block] = pred.reshape(gx.shape)

        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                list(pool.map(run, blocks))
        else:
            for b in blocks:
                run(b)
        out.append(SdfGrid(values.astype(np.float32), t, scale))
    return out


def synthesize_latents(mode: str, n: int, rng: np.random.Generator, std: float = 0.001, latent_dim: int | None = None, trained=None, variance: bool = False):
    """Draw ``n`` latent codes.

    ``gaussian`` draws iid N(0, std^2) vectors of length ``latent_dim``;
    ``perturb`` cycles through ``trained`` codes and adds N(0, std^2) noise.
    With ``variance=True`` the ``std`` argument is read as a variance.
    """
    sd = np.sqrt(std) if variance else std
    if mode == "gaussian":
        if sd <= 0:
            raise ValueError("std must be positive")
        if latent_dim is None:
            raise ValueError("gaussian mode needs latent_dim")
        return [rng.normal(0.0, sd, size=latent_dim) for _ in range(n)]
    if mode == "perturb":
        if trained is None or len(trained) == 0:
            raise ValueError("perturb mode needs trained latent codes")
        trained = np.asarray(trained, dtype=np.float64)
        return [trained[i % len(trained)] + (rng.normal(0.0, sd, size=trained.shape[1]) if sd > 0 else 0.0) for i in range(n)]
    raise ValueError(f"unknown synthesis mode {mode!r}")


def interpolate_time(state: ModelState, z, angles, t_list, dims=(64, 64, 64), chunk: int = 32, scale: float = 1.0) -> list[SdfGrid]:
    t_list = [float(t) for t in t_list]
    if any(abs(t) > 1.0 for t in t_list):
        raise ValueError("time points must lie in [-1, 1]")
    return evaluate_grid(state, z, angles, GridSpec(dims, t_list, chunk), scale)


def frame_time(k: int, n_frames: int) -> float:
    """Time coordinate of frame ``k`` (0-based) of ``n_frames`` equally spaced frames."""
    return -1.0 + 2.0 * k / (n_frames - 1) if n_frames > 1 else 0.0


def voxelize(grid: SdfGrid) -> np.ndarray:
    return (np.asarray(grid.values) <= 0).astype(np.uint8)


# -- meshes -------------------------------------------------------------------


@dataclass
class MeshSurface:
    vertices: np.ndarray
    triangles: np.ndarray
    unit: str = "normalized"
    time_index: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def scaled(self, factor: float, unit: str) -> "MeshSurface":
        return MeshSurface(self.vertices * factor, self.triangles.copy(), unit, self.time_index, dict(self.meta))

    def edges(self) -> np.ndarray:
        tri = self.triangles
        e = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
        return np.sort(e, axis=1)

    def is_closed(self) -> bool:
        """Every edge is shared by exactly two triangles."""
        if self.is_empty:
            return False
        _, counts = np.unique(self.edges(), axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def euler_characteristic(self) -> int:
        n_edges = len(np.unique(self.edges(), axis=0))
        n_verts = len(np.unique(self.triangles))
        return int(n_verts - n_edges + len(self.triangles))

    def area(self) -> float:
        v = self.vertices[self.triangles]
        return float(0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1).sum())

    def signed_volume(self) -> float:
        v = self.vertices[self.triangles]
        return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)


def _weld(vertices: np.ndarray, triangles: np.ndarray, tol: float = 1e-9):
    """Merge coincident vertices and drop triangles that collapse."""
    if len(vertices) == 0:
        return vertices, triangles
    key = np.round(vertices / tol).astype(np.int64)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(first)
    remap = np.empty_like(order)
    remap[order] = np.arange(len(order))
    verts = vertices[first[order]]
    tris = remap[inverse[triangles]]
    ok = (tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2]) & (tris[:, 0] != tris[:, 2])
    tris = tris[ok]
    v = verts[tris]
    area2 = np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)
    tris = tris[area2 > tol * tol]
    used = np.unique(tris)
    compact = np.full(len(verts), -1)
    compact[used] = np.arange(len(used))
    return verts[used], compact[tris]


def marching_cubes(grid: SdfGrid, iso: float = 0.0, time_index: int = 0) -> MeshSurface:
    """Triangulate the ``iso`` level set of ``grid`` with the classic lookup tables.

    Vertices are placed by linear interpolation along cell edges and shared
    between neighbouring cells; triangles are wound so normals point towards
    increasing values. Coordinates are in the grid's normalized units.
    """
    v = np.asarray(grid.values, dtype=np.float64)
    if not (v.min() < iso <= v.max() or v.min() <= iso < v.max()):
        log.warning("iso-level %g outside value range [%g, %g]; empty mesh", iso, v.min(), v.max())
        return MeshSurface(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), time_index=time_index)
    nx, ny, nz = v.shape
    inside = v < iso
    cells = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int32)
    for bit, (ox, oy, oz) in enumerate(mc.CORNER_OFFSETS):
        cells |= inside[ox : nx - 1 + ox, oy : ny - 1 + oy, oz : nz - 1 + oz].astype(np.int32) << bit
    active = np.flatnonzero((cells != 0) & (cells != 255))
    cases = cells.reshape(-1)[active]
    cx, cy, cz = np.unravel_index(active, cells.shape)
    base = np.stack([cx, cy, cz], axis=1)

    tri_edges = mc.TRI_TABLE[cases]  # (n_cells, 16)
    n_tri = (tri_edges >= 0).sum(axis=1) // 3
    cell_of_tri = np.repeat(np.arange(len(cases)), n_tri)
    slot = np.concatenate([np.arange(k) for k in n_tri]) if len(n_tri) else np.zeros(0, dtype=int)
    local = np.stack([tri_edges[cell_of_tri, 3 * slot + j] for j in range(3)], axis=1)  # (T, 3)

    # global id of a grid edge: (axis, start voxel)
    ca = mc.CORNER_OFFSETS[mc.EDGE_CORNERS[:, 0]]
    cb = mc.CORNER_OFFSETS[mc.EDGE_CORNERS[:, 1]]
    start = np.minimum(ca, cb)
    axis = np.argmax(np.abs(cb - ca), axis=1)
    s = base[cell_of_tri][:, None, :] + start[local]
    flat = np.ravel_multi_index((s[..., 0], s[..., 1], s[..., 2]), v.shape)
    gid = axis[local] * v.size + flat
    uniq, inv = np.unique(gid.reshape(-1), return_inverse=True)
    tris = inv.reshape(-1, 3)

    e_axis = uniq // v.size
    e_start = np.stack(np.unravel_index(uniq % v.size, v.shape), axis=1)
    e_end = e_start + np.eye(3, dtype=int)[e_axis]
    va = v[tuple(e_start.T)]
    vb = v[tuple(e_end.T)]
    frac = (iso - va) / (vb - va)
    pos = e_start + frac[:, None] * (e_end - e_start)

    step = grid.step
    dims = np.array(v.shape)
    verts = (pos + 0.5) * step - dims * step / 2.0
    # table winding is clockwise seen from outside; flip to outward normals
    tris = tris[:, ::-1]
    verts, tris = _weld(verts, tris)
    return MeshSurface(verts, tris, "normalized", time_index)


def write_obj(path, mesh: MeshSurface) -> None:
    with open(path, "w") as fh:
        fh.write(f"# unit {mesh.unit} time_index {mesh.time_index}\n")
        for x, y, z in mesh.vertices:
            fh.write(f"v {x:.9g} {y:.9g} {z:.9g}\n")
        for a, b, c in mesh.triangles + 1:
            fh.write(f"f {a} {b} {c}\n")


def read_obj(path) -> MeshSurface:
    verts, tris = [], []
    unit = "normalized"
    for line in Path(path).read_text().splitlines():
        if line.startswith("v "):
            verts.append([float(x) for x in line.split()[1:4]])
        elif line.startswith("f "):
            tris.append([int(x.split("/")[0]) - 1 for x in line.split()[1:4]])
        elif line.startswith("# unit"):
            unit = line.split()[2]
    return MeshSurface(np.array(verts).reshape(-1, 3), np.array(tris, dtype=np.int64).reshape(-1, 3), unit)


def write_mask(path, volume: np.ndarray) -> None:
    """Raw u8 mask, x fastest."""
    Path(path).write_bytes(np.asarray(volume, dtype=np.uint8).tobytes(order="F"))
