"""Desk-scale studies on analytic shape fixtures.

Every fixture is sampled from a closed-form SDF, so reconstructions can be
scored against an exact ground truth. Each ``run_*`` function trains the
models it needs, writes ``results.csv`` and ``manifest.json`` into its output
directory and returns a report dict that includes an ``acceptance`` block of
named boolean checks.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import subprocess
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .infer import GridSpec, evaluate_grid, marching_cubes, voxelize
from .metrics import dice, shape_metrics
from .model import ArchitectureSpec, ModelState, init_model
from .rotations import euler_matrix, geodesic_distance, random_rotation
from .sdfdata import GridSampler, SampleBatch, SdfGrid, sample_grid, time_coordinate
from .train import FitConfig, TrainConfig, fit_latent, train

log = logging.getLogger(__name__)

FIXTURE_KINDS = ("growing_sphere", "splitting_spheres", "spiky_star")


# -- fixtures -----------------------------------------------------------------


@dataclass
class FixtureSpec:
    kind: str = "growing_sphere"
    n_sequences: int = 8
    n_time: int = 10
    grid: int = 64
    seed: int = 0
    scale_um: float = 16.0
    n_spikes: int = 5

    def __post_init__(self):
        if self.kind not in FIXTURE_KINDS:
            raise ValueError(f"unknown fixture kind {self.kind!r}; choose from {FIXTURE_KINDS}")
        if self.n_sequences < 1 or self.n_time < 1 or self.grid < 2:
            raise ValueError("fixture needs n_sequences >= 1, n_time >= 1, grid >= 2")


def sphere_sdf(p, center, r):
    return np.linalg.norm(p - np.asarray(center), axis=-1) - r


def capsule_sdf(p, direction, length, r):
    """Distance to the segment from the origin to ``length * direction``, minus ``r``."""
    h = np.clip(p @ direction, 0.0, length)
    return np.linalg.norm(p - h[..., None] * direction, axis=-1) - r


def _unit_dirs(rng, k, min_angle_deg=50.0):
    dirs = []
    cos_max = np.cos(np.radians(min_angle_deg))
    while len(dirs) < k:
        v = rng.normal(size=3)
        v /= np.linalg.norm(v)
        if all(v @ d < cos_max for d in dirs):
            dirs.append(v)
    return np.array(dirs)


def _shape_params(spec: FixtureSpec, rng) -> list[dict]:
    out = []
    for _ in range(spec.n_sequences):
        if spec.kind == "growing_sphere":
            out.append({"r0": float(rng.uniform(0.2, 0.35)), "r1": float(rng.uniform(0.45, 0.65))})
        elif spec.kind == "splitting_spheres":
            out.append({"r": float(rng.uniform(0.22, 0.32)), "offset": 0.4})
        else:
            out.append(
                {
                    "body": float(rng.uniform(0.28, 0.36)),
                    "dirs": _unit_dirs(rng, spec.n_spikes).tolist(),
                    "len0": float(rng.uniform(0.02, 0.08)),
                    "len1": float(rng.uniform(0.3, 0.45)),
                    "radius": 0.07,
                }
            )
    return out


def analytic_sdf(kind: str, params: dict, p: np.ndarray, t: float) -> np.ndarray:
    """Closed-form SDF of one fixture shape at time ``t`` in normalized units."""
    s = (t + 1.0) / 2.0
    if kind == "growing_sphere":
        return sphere_sdf(p, (0, 0, 0), params["r0"] + (params["r1"] - params["r0"]) * s)
    if kind == "splitting_spheres":
        c = params["offset"] * max(t, 0.0)
        return np.minimum(sphere_sdf(p, (c, 0, 0), params["r"]), sphere_sdf(p, (-c, 0, 0), params["r"]))
    body = params["body"]
    length = body + params["len0"] + (params["len1"] - params["len0"]) * s
    d = sphere_sdf(p, (0, 0, 0), body)
    for u in np.asarray(params["dirs"]):
        d = np.minimum(d, capsule_sdf(p, u, length, params["radius"]))
    return d


@dataclass
class Fixture:
    spec: FixtureSpec
    params: list[dict]
    rotations: list[np.ndarray]
    times: list[float]
    grids: dict[int, list[SdfGrid]]
    oracle: Callable[[np.ndarray, float, int], np.ndarray]


def make_fixture(spec: FixtureSpec, rng: np.random.Generator | None = None, rotations=None, params=None) -> Fixture:
    """Sample a fixture set on a ``grid^3`` lattice.

    ``rotations`` optionally gives one matrix per sequence; sequence ``i`` then
    holds the base shape rotated by ``rotations[i]``. ``params`` overrides the
    randomly drawn shape parameters.
    """
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    params = _shape_params(spec, rng) if params is None else params
    if len(params) != spec.n_sequences:
        raise ValueError("params must have one entry per sequence")
    rots = [np.eye(3)] * spec.n_sequences if rotations is None else [np.asarray(R, dtype=np.float64) for R in rotations]

    def oracle(p, t, seq):
        # rotating a shape by R evaluates the base SDF at R^T x
        return analytic_sdf(spec.kind, params[seq], np.asarray(p, dtype=np.float64) @ rots[seq], t)

    n = spec.grid
    probe = SdfGrid(np.zeros((n, n, n), dtype=np.float32), 0.0, spec.scale_um)
    pts = probe.coords()
    times = [time_coordinate(k, spec.n_time) for k in range(spec.n_time)]
    grids = {
        s: [SdfGrid(oracle(pts, t, s).reshape(n, n, n).astype(np.float32), t, spec.scale_um) for t in times]
        for s in range(spec.n_sequences)
    }
    return Fixture(spec, params, rots, times, grids, oracle)


# -- shared helpers -------------------------------------------------------------


def reconstruct(model: ModelState, seq: int, t: float, dims: int, chunk: int = 32) -> SdfGrid:
    z = model.latents[seq]
    a = model.angles[seq] if model.arch.equivariant else None
    return evaluate_grid(model, z, a, GridSpec((dims, dims, dims), [t], chunk))[0]


def reconstruction_dice(model: ModelState, fixture: Fixture, seqs=None, time_indices=None, grid: int | None = None) -> np.ndarray:
    """DSC between reconstructions and fixture shapes, shape (n_seq, n_time)."""
    seqs = range(fixture.spec.n_sequences) if seqs is None else seqs
    time_indices = range(fixture.spec.n_time) if time_indices is None else time_indices
    n = grid or fixture.spec.grid
    probe = SdfGrid(np.zeros((n, n, n), dtype=np.float32), 0.0)
    pts = probe.coords()
    out = np.zeros((len(seqs), len(time_indices)))
    for i, s in enumerate(seqs):
        for j, k in enumerate(time_indices):
            t = fixture.times[k]
            truth = (fixture.oracle(pts, t, s) <= 0).reshape(n, n, n)
            out[i, j] = dice(voxelize(reconstruct(model, s, t, n)), truth)
    return out


def mesh_sphericity(grid: SdfGrid) -> float:
    mesh = marching_cubes(grid)
    # empty or boundary-clipped surfaces have no meaningful sphericity
    if mesh.is_empty or not mesh.is_closed():
        return float("nan")
    return shape_metrics(mesh.scaled(grid.scale, "um")).sphericity


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True, timeout=5, cwd=Path(__file__).parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()


def write_manifest(out_dir, config: dict, seed: int, extra: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "git_describe": _git_describe(),
        "version": __version__,
    }
    if extra:
        payload.update(extra)
    (out / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True, default=str))


def write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([f"{v:.6g}" if isinstance(v, float) else v for v in r])


def _finish(name, out_dir, cfg, header, rows, report) -> dict:
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_rows(out / "results.csv", header, rows)
        write_manifest(out, {"experiment": name, **_cfg_dict(cfg)}, cfg.seed, {"acceptance": report.get("acceptance", {})})
        (out / "report.json").write_text(json.dumps(_without_models(report), indent=2, sort_keys=True, default=_json_default))
    return report


def _without_models(obj):
    # trained models are returned to the caller but not serialized into reports
    if isinstance(obj, dict):
        return {str(k): _without_models(v) for k, v in obj.items() if not isinstance(v, ModelState)}
    return obj


def _json_default(o):
    if isinstance(o, (np.generic,)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _cfg_dict(cfg) -> dict:
    d = asdict(cfg)
    d.pop("out_dir", None)
    return d


def _train_cfg(cfg, **over) -> TrainConfig:
    kw = dict(
        epochs=cfg.epochs,
        batch_sequences=cfg.batch_sequences,
        points_per_timepoint=cfg.points_per_timepoint,
        sigma2=cfg.sigma2,
        lr=cfg.lr,
        lr_decay_every=cfg.lr_decay_every,
        seed=cfg.seed,
        lr_latent_scale=cfg.lr_latent_scale,
        lr_angle_scale=getattr(cfg, "lr_angle_scale", 1.0),
    )
    kw.update(over)
    return TrainConfig(**kw)


def loss_dropped(history) -> bool:
    """Trailing 100-epoch mean loss below the first 10-epoch mean.

    Single steps are noisy, so this is the progress check used instead of
    monotonicity.
    """
    if len(history) < 2:
        return True
    total = np.array([h.loss_rec + h.loss_code for h in history])
    return bool(total[-100:].mean() < total[:10].mean())


@dataclass
class StudyConfig:
    """Training knobs shared by all studies."""

    epochs: int = 500
    batch_sequences: int = 1
    points_per_timepoint: int = 8000
    sigma2: float = 1.0
    lr: float = 3e-4
    lr_decay_every: int = 200
    lr_latent_scale: float = 1.0
    seed: int = 0
    out_dir: str | None = None


# -- reconstruction -----------------------------------------------------------


@dataclass
class ReconstructionConfig(StudyConfig):
    kind: str = "growing_sphere"
    n_sequences: int = 8
    n_time: int = 10
    grid: int = 64
    equivariant: bool = True
    min_mean_dice: float = 0.90


def run_reconstruction(cfg: ReconstructionConfig) -> dict:
    fx = make_fixture(FixtureSpec(cfg.kind, cfg.n_sequences, cfg.n_time, cfg.grid, cfg.seed))
    model = init_model(ArchitectureSpec(equivariant=cfg.equivariant), cfg.n_sequences, np.random.default_rng(cfg.seed), cfg.sigma2)
    t0 = time.perf_counter()
    res = train(model, fx.grids, _train_cfg(cfg))
    d = reconstruction_dice(model, fx)
    rows = [(s, k, fx.times[k], float(d[s, k])) for s in range(cfg.n_sequences) for k in range(cfg.n_time)]
    report = {
        "mean_dice": float(d.mean()),
        "min_dice": float(d.min()),
        "final_loss_rec": res.history[-1].loss_rec,
        "seconds": time.perf_counter() - t0,
        "model": model,
    }
    report["acceptance"] = {"mean_dice": report["mean_dice"] >= cfg.min_mean_dice, "loss_dropped": loss_dropped(res.history)}
    return _finish("reconstruction", cfg.out_dir, cfg, ["sequence", "time_index", "t", "dice"], rows, report)


# -- equivariant fitting --------------------------------------------------------


@dataclass
class EquivariantFitConfig(StudyConfig):
    n_spheres: int = 3
    n_stars: int = 3
    n_time: int = 6
    grid: int = 48
    target_sequence: int = -1
    fit_iterations: int = 300
    fit_restarts: int = 8
    fit_points: int = 4000
    fit_sigma2: float | None = 0.1
    fit_angle_init: str = "screen"
    min_cosine: float = 0.95
    max_angle_deg: float = 5.0


def _mixed_fixture(cfg: EquivariantFitConfig) -> Fixture:
    rng = np.random.default_rng(cfg.seed)
    sp = FixtureSpec("growing_sphere", cfg.n_spheres, cfg.n_time, cfg.grid, cfg.seed)
    st = FixtureSpec("spiky_star", cfg.n_stars, cfg.n_time, cfg.grid, cfg.seed)
    a = make_fixture(sp, rng)
    b = make_fixture(st, rng)
    n = cfg.n_spheres + cfg.n_stars
    kinds = ["growing_sphere"] * cfg.n_spheres + ["spiky_star"] * cfg.n_stars
    params = a.params + b.params
    grids = {i: a.grids[i] for i in range(cfg.n_spheres)}
    grids.update({cfg.n_spheres + i: b.grids[i] for i in range(cfg.n_stars)})

    def oracle(p, t, seq):
        return analytic_sdf(kinds[seq], params[seq], np.asarray(p, dtype=np.float64), t)

    spec = FixtureSpec("growing_sphere", n, cfg.n_time, cfg.grid, cfg.seed)
    return Fixture(spec, params, [np.eye(3)] * n, a.times, grids, oracle)


def sequence_samples(grids, seq_id: int, n_per_time: int, rng, near_threshold_um: float = 0.6) -> SampleBatch:
    sampler = GridSampler(near_threshold_um)
    parts = []
    for g in grids:
        near, far = sampler.draw(g, n_per_time, rng)
        parts.append(sample_grid(g, np.concatenate([near, far]), seq_id))
    return SampleBatch.concatenate(parts)


def run_equivariant_fit(cfg: EquivariantFitConfig, model: ModelState | None = None) -> dict:
    """Train on a sphere/star mix, then refit a rotated copy of one training sequence."""
    fx = _mixed_fixture(cfg)
    n = fx.spec.n_sequences
    history = None
    if model is None:
        model = init_model(ArchitectureSpec(), n, np.random.default_rng(cfg.seed), cfg.sigma2)
        history = train(model, fx.grids, _train_cfg(cfg)).history
    target = cfg.target_sequence % n
    rng = np.random.default_rng(cfg.seed + 1)
    R_tilde = random_rotation(rng)
    # the rotated copy is sampled from the closed form, on the same lattice
    probe = fx.grids[target][0]
    pts = probe.coords()
    rotated = [
        SdfGrid(fx.oracle(pts @ R_tilde, t, target).reshape(probe.grid).astype(np.float32), t, probe.scale) for t in fx.times
    ]
    samples = sequence_samples(rotated, 0, cfg.fit_points // max(1, len(rotated)), rng)
    fcfg = FitConfig(cfg.fit_iterations, cfg.fit_restarts, sigma2=cfg.fit_sigma2, angle_init=cfg.fit_angle_init, seed=cfg.seed)
    fit = fit_latent(model, samples, fcfg)
    z0 = model.latents[target]
    cosine = float(fit.z @ z0 / (np.linalg.norm(fit.z) * np.linalg.norm(z0)))
    R_expected = R_tilde @ euler_matrix(model.angles[target])
    err = float(np.degrees(geodesic_distance(euler_matrix(fit.angles), R_expected)))
    rows = [(r, float(l)) for r, l in enumerate(fit.restart_losses)]
    report = {
        "cosine": cosine,
        "angle_error_deg": err,
        "fit_loss": fit.loss,
        "target_sequence": target,
        "rotation": R_tilde,
        "model": model,
    }
    report["acceptance"] = {"cosine": cosine >= cfg.min_cosine, "angle": err <= cfg.max_angle_deg}
    if history is not None:
        report["acceptance"]["loss_dropped"] = loss_dropped(history)
    return _finish("equivariant-fit", cfg.out_dir, cfg, ["restart", "loss"], rows, report)


# -- equivariance ablation ------------------------------------------------------


@dataclass
class AblationConfig(StudyConfig):
    kind: str = "spiky_star"
    n_base: int = 6
    n_rotations: int = 4
    n_time: int = 4
    grid: int = 48
    latent_dims: tuple[int, ...] = (8,)
    lr_angle_scale: float = 10.0


def rotated_copies(spec: FixtureSpec, n_rotations: int, rng) -> tuple[Fixture, np.ndarray]:
    """``n_rotations`` copies of every base shape; copy 0 is the unrotated base.

    Returns the fixture and the base index of every sequence.
    """
    base = _shape_params(spec, rng)
    params, rots, base_of = [], [], []
    for b, p in enumerate(base):
        for r in range(n_rotations):
            params.append(p)
            rots.append(np.eye(3) if r == 0 else euler_matrix(rng.uniform(-np.pi, np.pi, size=3)))
            base_of.append(b)
    full = replace(spec, n_sequences=len(params))
    return make_fixture(full, rng, rotations=rots, params=params), np.array(base_of)


def cluster_tightness(latents: np.ndarray, base_of: np.ndarray) -> float:
    """Mean latent distance among copies of a base shape over the mean distance across bases."""
    z = np.asarray(latents, dtype=np.float64)
    d = np.linalg.norm(z[:, None] - z[None], axis=2)
    same = base_of[:, None] == base_of[None]
    off = ~np.eye(len(z), dtype=bool)
    within = d[same & off]
    across = d[~same]
    if len(within) == 0 or len(across) == 0:
        return float("nan")
    return float(within.mean() / across.mean())


def run_ablation_equivariance(cfg: AblationConfig) -> dict:
    rng = np.random.default_rng(cfg.seed)
    spec = FixtureSpec(cfg.kind, cfg.n_base, cfg.n_time, cfg.grid, cfg.seed)
    fx, base_of = rotated_copies(spec, cfg.n_rotations, rng)
    rows, cells = [], {}
    for dim in cfg.latent_dims:
        for equivariant in (True, False):
            arch = ArchitectureSpec(latent_dim=dim, equivariant=equivariant)
            model = init_model(arch, fx.spec.n_sequences, np.random.default_rng(cfg.seed), cfg.sigma2)
            res = train(model, fx.grids, _train_cfg(cfg))
            d = reconstruction_dice(model, fx)
            per_seq = d.mean(axis=1)
            tight = cluster_tightness(model.latents, base_of)
            key = f"{'equivariant' if equivariant else 'plain'}_{dim}"
            cells[key] = {
                "dice_mean": float(per_seq.mean()),
                "dice_std": float(per_seq.std()),
                "tightness": tight,
                "loss_dropped": loss_dropped(res.history),
                "model": model,
            }
            rows.append((dim, "equivariant" if equivariant else "non-equivariant", float(per_seq.mean()), float(per_seq.std()), tight))
    report = {"cells": cells, "base_of": base_of}
    acc = {}
    for dim in cfg.latent_dims:
        e, p = cells[f"equivariant_{dim}"], cells[f"plain_{dim}"]
        acc[f"dice_dim{dim}"] = e["dice_mean"] >= p["dice_mean"]
        if cfg.n_rotations > 1:
            acc[f"tightness_dim{dim}"] = e["tightness"] < p["tightness"]
    acc["loss_dropped"] = all(c["loss_dropped"] for c in cells.values())
    report["acceptance"] = acc
    return _finish("equivariance-ablation", cfg.out_dir, cfg, ["latent_dim", "variant", "dice_mean", "dice_std", "tightness"], rows, report)


# -- temporal interpolation -----------------------------------------------------


@dataclass
class InterpolationConfig(StudyConfig):
    kind: str = "growing_sphere"
    n_sequences: int = 8
    n_time: int = 13
    stride: int = 4
    grid: int = 64
    min_heldout_dice: float = 0.85


def run_interpolation_study(cfg: InterpolationConfig) -> dict:
    """Train on every ``stride``-th frame and score all frames."""
    fx = make_fixture(FixtureSpec(cfg.kind, cfg.n_sequences, cfg.n_time, cfg.grid, cfg.seed))
    trained = list(range(0, cfg.n_time, cfg.stride))
    data = {s: [fx.grids[s][k] for k in trained] for s in fx.grids}
    model = init_model(ArchitectureSpec(), cfg.n_sequences, np.random.default_rng(cfg.seed), cfg.sigma2)
    res = train(model, data, _train_cfg(cfg))
    d = reconstruction_dice(model, fx)
    per_time = d.mean(axis=0)
    rows = [(k, fx.times[k], k not in trained, float(per_time[k]), float(d[:, k].std())) for k in range(cfg.n_time)]
    held = [k for k in range(cfg.n_time) if k not in trained]
    report = {
        "per_time_dice": per_time,
        "trained": trained,
        "heldout": held,
        "trained_mean": float(per_time[trained].mean()),
        "heldout_mean": float(per_time[held].mean()) if held else float("nan"),
        "heldout_min": float(per_time[held].min()) if held else float("nan"),
        "model": model,
    }
    report["acceptance"] = {
        "heldout_floor": (not held) or report["heldout_min"] >= cfg.min_heldout_dice,
        "loss_dropped": loss_dropped(res.history),
    }
    return _finish("interpolation", cfg.out_dir, cfg, ["time_index", "t", "heldout", "dice_mean", "dice_std"], rows, report)


# -- spectral bias --------------------------------------------------------------


@dataclass
class SpectralConfig(StudyConfig):
    omegas: tuple[float, ...] = (1.0, 5.0, 15.0, 30.0)
    n_sequences: int = 4
    n_time: int = 4
    grid: int = 64


def _fixture_sphericity(fx: Fixture, seqs, time_indices) -> float:
    vals = [mesh_sphericity(fx.grids[s][k]) for s in seqs for k in time_indices]
    return float(np.mean(vals))


def _model_sphericity(model: ModelState, fx: Fixture, seqs, time_indices) -> float:
    vals = np.array([mesh_sphericity(reconstruct(model, s, fx.times[k], fx.spec.grid)) for s in seqs for k in time_indices])
    ok = np.isfinite(vals)
    return float(vals[ok].mean()) if ok.any() else float("nan")


def run_spectral_study(cfg: SpectralConfig) -> dict:
    fx = make_fixture(FixtureSpec("spiky_star", cfg.n_sequences, cfg.n_time, cfg.grid, cfg.seed))
    seqs, times = range(cfg.n_sequences), range(cfg.n_time)
    truth = _fixture_sphericity(fx, seqs, times)
    rows, cells = [], {}
    for w in cfg.omegas:
        model = init_model(ArchitectureSpec(omega0=w), cfg.n_sequences, np.random.default_rng(cfg.seed), cfg.sigma2)
        res = train(model, fx.grids, _train_cfg(cfg))
        d = float(reconstruction_dice(model, fx).mean())
        sph = _model_sphericity(model, fx, seqs, times)
        cells[w] = {"dice": d, "sphericity": sph, "loss_dropped": loss_dropped(res.history)}
        rows.append((w, d, sph, truth))
    lo, hi = min(cfg.omegas), max(cfg.omegas)
    report = {"cells": cells, "truth_sphericity": truth}
    report["acceptance"] = {
        "sphericity_direction": cells[lo]["sphericity"] > cells[hi]["sphericity"],
        "dice_direction": cells[hi]["dice"] >= cells[lo]["dice"],
        "loss_dropped": all(c["loss_dropped"] for c in cells.values()),
    }
    return _finish("spectral", cfg.out_dir, cfg, ["omega0", "dice", "sphericity", "truth_sphericity"], rows, report)


# -- activation comparison ------------------------------------------------------


@dataclass
class ActivationConfig(StudyConfig):
    n_sequences: int = 4
    n_time: int = 4
    grid: int = 48
    eval_every: int = 25
    eval_grid: int = 48
    threshold: float = 0.9
    relu_latent_dim: int = 256


def run_activation_comparison(cfg: ActivationConfig) -> dict:
    fx = make_fixture(FixtureSpec("spiky_star", cfg.n_sequences, cfg.n_time, cfg.grid, cfg.seed))
    archs = {
        "sine": ArchitectureSpec(equivariant=False),
        "relu": ArchitectureSpec.deepsdf_relu(latent_dim=cfg.relu_latent_dim, equivariant=False),
    }
    rows, cells = [], {}
    truth = _fixture_sphericity(fx, range(cfg.n_sequences), range(cfg.n_time))
    for name, arch in archs.items():
        model = init_model(arch, cfg.n_sequences, np.random.default_rng(cfg.seed), cfg.sigma2)
        curve = []

        def record(epoch, m, curve=curve):
            if (epoch + 1) % cfg.eval_every == 0:
                d = float(reconstruction_dice(m, fx, grid=cfg.eval_grid).mean())
                curve.append((epoch + 1, d))
                rows.append((name, epoch + 1, d))

        res = train(model, fx.grids, _train_cfg(cfg), callback=record)
        reached = next((e for e, d in curve if d >= cfg.threshold), None)
        sph = _model_sphericity(model, fx, range(cfg.n_sequences), range(cfg.n_time))
        cells[name] = {"curve": curve, "epochs_to_threshold": reached, "final_dice": curve[-1][1] if curve else float("nan"), "sphericity": sph, "loss_dropped": loss_dropped(res.history)}
    s, r = cells["sine"]["epochs_to_threshold"], cells["relu"]["epochs_to_threshold"]
    report = {"cells": cells, "truth_sphericity": truth}
    report["acceptance"] = {
        "sine_faster": s is not None and (r is None or s < r),
        "loss_dropped": all(c["loss_dropped"] for c in cells.values()),
    }
    return _finish("activation", cfg.out_dir, cfg, ["variant", "epoch", "dice"], rows, report)


EXPERIMENTS = {
    "reconstruction": (ReconstructionConfig, run_reconstruction),
    "equivariant-fit": (EquivariantFitConfig, run_equivariant_fit),
    "equivariance-ablation": (AblationConfig, run_ablation_equivariance),
    "interpolation": (InterpolationConfig, run_interpolation_study),
    "spectral": (SpectralConfig, run_spectral_study),
    "activation": (ActivationConfig, run_activation_comparison),
}
