"""Train, sample and evaluate rotation-aware SDF models of time-evolving cell shapes.

Exit codes: 0 success, 1 an experiment's acceptance checks failed, 2 usage or
data error. Settings resolve as built-in defaults < ``--config`` file < flags,
and the resolved settings are written to ``manifest.json`` in every output
directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .experiments import EXPERIMENTS, config_hash, sequence_samples, write_manifest
from .infer import GridSpec, evaluate_grid, frame_time, marching_cubes, synthesize_latents, voxelize, write_mask, write_obj
from .metrics import METRICS, descriptor_series, dice, ks_two_sample, shape_metrics, write_json, write_series_csv
from .model import ArchitectureSpec, CheckpointFormatError, init_model, load_checkpoint
from .rotations import euler_matrix, matrix_to_euler, random_rotation
from .sdfdata import (
    SdfDataError,
    SdfGrid,
    center_and_align,
    load_voxel_sequence,
    normalize_to_domain,
    read_grid,
    resample_isotropic,
    signed_distance_transform,
    write_grid,
)
from .train import FitConfig, OptimizerState, TrainConfig, fit_latent, train, write_history

log = logging.getLogger("cellsdf")


class UsageError(Exception):
    pass


# -- config handling -------------------------------------------------------------


def load_config_file(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    try:
        text = p.read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read config {p}: {exc}") from None
    if p.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        return tomllib.loads(text.decode())
    return json.loads(text)


def resolve(defaults: dict, file_cfg: dict, section: str, flags: dict) -> dict:
    """defaults < file (top level, then ``[section]``) < explicitly given flags."""
    out = dict(defaults)
    for src in (file_cfg, file_cfg.get(section, {})):
        for k, v in src.items():
            if k in defaults:
                out[k] = v
    for k, v in flags.items():
        if v is not None and k in defaults:
            out[k] = v
    return out


def _manifest(out_dir, command: str, cfg: dict, seed: int, extra=None) -> None:
    write_manifest(out_dir, {"command": command, **cfg}, seed, extra)


# -- grid directories ------------------------------------------------------------


def write_grid_dir(out: Path, names: list[str], grids: dict[int, list[SdfGrid]], extra: dict | None = None) -> None:
    index = {"version": __version__, "sequences": []}
    for i, name in enumerate(names):
        d = out / name
        d.mkdir(parents=True, exist_ok=True)
        files = []
        for k, g in enumerate(grids[i]):
            f = d / f"t_{k:04d}.nsdf"
            write_grid(f, g)
            files.append(f"{name}/{f.name}")
        index["sequences"].append({"name": name, "frames": files, "dims": list(grids[i][0].grid), "scale": grids[i][0].scale})
    if extra:
        index.update(extra)
    (out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))


def read_grid_dir(path) -> tuple[list[str], dict[int, list[SdfGrid]]]:
    root = Path(path)
    if not root.is_dir():
        raise UsageError(f"{root} is not a directory")
    idx = root / "index.json"
    names, grids = [], {}
    if idx.exists():
        for i, seq in enumerate(json.loads(idx.read_text())["sequences"]):
            names.append(seq["name"])
            grids[i] = [read_grid(root / f) for f in seq["frames"]]
    else:
        for i, d in enumerate(sorted(p for p in root.iterdir() if p.is_dir())):
            frames = sorted(d.glob("*.nsdf"))
            if frames:
                names.append(d.name)
                grids[len(grids)] = [read_grid(f) for f in frames]
    if not grids:
        raise UsageError(f"{root} holds no SDF grids")
    return names, grids


def _hash_inputs(seq_dirs, cfg: dict) -> str:
    h = hashlib.sha256(json.dumps(cfg, sort_keys=True).encode())
    for d in seq_dirs:
        for f in sorted(Path(d).iterdir()):
            if f.is_file():
                h.update(f.name.encode())
                h.update(f.read_bytes())
    return h.hexdigest()


# -- commands --------------------------------------------------------------------


PREPARE_DEFAULTS = {"grid": 0, "align": True, "tol_deg": 3.0}


def cmd_prepare(args, file_cfg) -> int:
    cfg = resolve(PREPARE_DEFAULTS, file_cfg, "prepare", {"grid": args.grid, "align": False if args.no_align else None})
    src = Path(args.in_dir)
    if not src.is_dir():
        raise UsageError(f"input directory {src} does not exist")
    seq_dirs = [src] if (src / "meta.json").exists() else sorted(p for p in src.iterdir() if (p / "meta.json").exists())
    if not seq_dirs:
        raise UsageError(f"no sequences (meta.json) under {src}")
    out = Path(args.out_dir)
    digest = _hash_inputs(seq_dirs, cfg)
    if args.if_stale and (out / "index.json").exists():
        if json.loads((out / "index.json").read_text()).get("input_hash") == digest:
            print(f"{out}: up to date")
            return 0
    names, grids = [], {}
    for i, d in enumerate(seq_dirs):
        try:
            seq = load_voxel_sequence(d)
            seq = center_and_align(seq, align=cfg["align"], tol_deg=cfg["tol_deg"])
        except SdfDataError as exc:
            raise SdfDataError(f"{d}: {exc}") from None
        frames = []
        for k, vol in enumerate(seq.volumes):
            spacing = seq.spacing
            n = cfg["grid"] or max(vol.shape)
            if cfg["grid"] or not np.allclose(spacing, spacing[0]) or len(set(vol.shape)) > 1:
                vol, s = resample_isotropic(vol, spacing, n)
                spacing = (s, s, s)
            try:
                sdf = signed_distance_transform(vol, spacing)
            except SdfDataError as exc:
                raise SdfDataError(f"{d} frame {k}: {exc}") from None
            frames.append(normalize_to_domain(sdf, spacing, k, seq.n_time))
        names.append(seq.name)
        grids[i] = frames
        fg = [int(np.count_nonzero(v)) for v in seq.volumes]
        print(f"{seq.name}: {seq.n_time} frames, dims {frames[0].grid}, scale {frames[0].scale:.4g} um/unit, foreground {min(fg)}..{max(fg)} voxels")
    write_grid_dir(out, names, grids, {"input_hash": digest})
    _manifest(out, "prepare", {**cfg, "in_dir": str(src)}, args.seed)
    return 0


TRAIN_DEFAULTS = {
    **{f.name: f.default for f in dataclasses.fields(TrainConfig)},
    **{f"arch_{k}": v for k, v in ArchitectureSpec().to_dict().items()},
}


def _arch_from(cfg: dict) -> ArchitectureSpec:
    return ArchitectureSpec.from_dict({k[5:]: v for k, v in cfg.items() if k.startswith("arch_")})


def cmd_train(args, file_cfg) -> int:
    flags = {
        "epochs": args.epochs,
        "points_per_timepoint": args.points,
        "lr": args.lr,
        "sigma2": args.sigma2,
        "checkpoint_every": args.checkpoint_every,
        "arch_latent_dim": args.latent_dim,
        "arch_activation": args.activation,
        "arch_omega0": args.omega0,
        "arch_equivariant": False if args.no_equivariant else None,
        "seed": args.seed,
    }
    cfg = resolve(TRAIN_DEFAULTS, file_cfg, "train", flags)
    if not Path(args.data_dir).is_dir():
        raise UsageError(f"data directory {args.data_dir} does not exist")
    names, grids = read_grid_dir(args.data_dir)
    tcfg = TrainConfig(**{k: v for k, v in cfg.items() if not k.startswith("arch_")})
    ckpt = Path(args.out)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    if args.resume:
        model, opt_dict, extra = load_checkpoint(ckpt)
        opt = OptimizerState(opt_dict["m"], opt_dict["v"], opt_dict["step"]) if opt_dict else None
        start, rng_state = int(extra.get("epoch", 0)), extra.get("rng_state")
    else:
        model = init_model(_arch_from(cfg), len(names), np.random.default_rng(tcfg.seed), tcfg.sigma2, seq_ids=names)
        model.meta = {**(model.meta or {}), "scale": grids[0][0].scale, "n_time": len(grids[0])}
        opt, start, rng_state = None, 0, None
    res = train(model, grids, tcfg, ckpt, optimizer=opt, start_epoch=start, rng_state=rng_state)
    write_history(ckpt.with_suffix(".history.csv"), res.history)
    _manifest(ckpt.parent, "train", {**cfg, "data_dir": str(args.data_dir)}, tcfg.seed)
    if res.history:
        print(f"epoch {res.history[-1].epoch}: loss_rec {res.history[-1].loss_rec:.6g} loss_code {res.history[-1].loss_code:.6g}")
    return 0


def _load(path):
    if not Path(path).exists():
        raise UsageError(f"checkpoint {path} does not exist")
    return load_checkpoint(path)


def cmd_fit_latent(args, file_cfg) -> int:
    defaults = {f.name: f.default for f in dataclasses.fields(FitConfig)}
    defaults["points_per_timepoint"] = 4000
    cfg = resolve(defaults, file_cfg, "fit-latent", {"iterations": args.iterations, "n_restarts": args.restarts, "seed": args.seed})
    model, _, _ = _load(args.checkpoint)
    _, grids = read_grid_dir(args.data_dir)
    frames = grids[args.sequence]
    samples = sequence_samples(frames, 0, cfg["points_per_timepoint"], np.random.default_rng(cfg["seed"]))
    fcfg = FitConfig(**{k: v for k, v in cfg.items() if k != "points_per_timepoint"})
    res = fit_latent(model, samples, fcfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_json(out, {"z": res.z, "angles": res.angles, "loss": res.loss, "restart_losses": res.restart_losses})
    _manifest(out.parent, "fit-latent", cfg, cfg["seed"])
    print(f"fit loss {res.loss:.6g}")
    return 0


SYNTH_DEFAULTS = {"mode": "gaussian", "n": 33, "grid": 64, "n_time": 10, "std": 0.001, "variance": False, "chunk": 32, "mesh": True}


def _parse_angles(text):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"--angles expects three comma-separated numbers, got {text!r}") from None
    if len(vals) != 3:
        raise UsageError("--angles expects exactly three values")
    return np.array(vals)


def _export_sequence(d: Path, grids: list[SdfGrid], mesh: bool) -> None:
    d.mkdir(parents=True, exist_ok=True)
    for k, g in enumerate(grids):
        write_grid(d / f"t_{k:04d}.nsdf", g)
        write_mask(d / f"mask_{k:04d}.raw", voxelize(g))
        if mesh:
            m = marching_cubes(g, time_index=k).scaled(g.scale, "um")
            write_obj(d / f"mesh_{k:04d}.obj", m)


def cmd_synthesize(args, file_cfg) -> int:
    flags = {"mode": args.mode, "n": args.n, "grid": args.grid, "n_time": args.n_time, "std": args.std, "chunk": args.chunk}
    if args.variance:
        flags["variance"] = True
    if args.no_mesh:
        flags["mesh"] = False
    cfg = resolve(SYNTH_DEFAULTS, file_cfg, "synthesize", flags)
    model, _, extra = _load(args.checkpoint)
    rng = np.random.default_rng(args.seed)
    trained = model.latents if cfg["mode"] == "perturb" else None
    if cfg["mode"] == "perturb" and (trained is None or len(trained) == 0):
        raise UsageError("perturb mode needs a checkpoint with trained latent codes")
    codes = synthesize_latents(cfg["mode"], cfg["n"], rng, cfg["std"], model.arch.latent_dim, trained, cfg["variance"])
    scale = float(model.meta.get("scale", 1.0)) if isinstance(model.meta, dict) else 1.0
    spec = GridSpec((cfg["grid"],) * 3, [frame_time(k, cfg["n_time"]) for k in range(cfg["n_time"])], cfg["chunk"])
    out = Path(args.out)
    rotations = []
    for i, z in enumerate(codes):
        if args.angles is not None:
            a = _parse_angles(args.angles)
        elif args.random_rotation:
            a = matrix_to_euler(random_rotation(rng))
        else:
            a = np.zeros(3)
        rotations.append(a.tolist())
        grids = evaluate_grid(model, z, a if model.arch.equivariant else None, spec, scale, workers=args.threads)
        _export_sequence(out / f"seq_{i:04d}", grids, cfg["mesh"])
    write_json(out / "latents.json", {"latents": np.array(codes), "angles": rotations})
    _manifest(out, "synthesize", {**cfg, "checkpoint": str(args.checkpoint), "angles": args.angles, "random_rotation": args.random_rotation}, args.seed)
    print(f"wrote {len(codes)} sequences to {out}")
    return 0


def cmd_interpolate(args, file_cfg) -> int:
    model, _, _ = _load(args.checkpoint)
    if args.times:
        times = [float(t) for t in args.times.split(",")]
    else:
        times = list(np.linspace(-1.0, 1.0, args.n_times))
    if any(abs(t) > 1 for t in times):
        raise UsageError("interpolation times must lie in [-1, 1]")
    i = model.index_of(args.sequence) if not str(args.sequence).isdigit() else int(args.sequence)
    z = model.latents[i]
    a = model.angles[i] if model.arch.equivariant else None
    grids = evaluate_grid(model, z, a, GridSpec((args.grid,) * 3, times, args.chunk), workers=args.threads)
    out = Path(args.out)
    _export_sequence(out, grids, not args.no_mesh)
    _manifest(out, "interpolate", {"times": times, "grid": args.grid, "sequence": str(args.sequence), "chunk": args.chunk}, args.seed)
    return 0


def cmd_export_mesh(args, file_cfg) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, f in enumerate(args.grids):
        g = read_grid(f)
        m = marching_cubes(g, iso=args.iso, time_index=k)
        if args.um:
            m = m.scaled(g.scale, "um")
        write_obj(out / (Path(f).stem + ".obj"), m)
    _manifest(out, "export-mesh", {"grids": [str(g) for g in args.grids], "iso": args.iso, "um": args.um}, args.seed)
    return 0


def _metrics_table(grids: dict[int, list[SdfGrid]], mode: str):
    table = []
    for i in sorted(grids):
        row = []
        for k, g in enumerate(grids[i]):
            mesh = marching_cubes(g, time_index=k).scaled(g.scale, "um")
            vox = voxelize(g) if mode == "voxel" else None
            s = g.scale * g.step
            row.append(shape_metrics(mesh, mode, vox, (s, s, s)))
        table.append(row)
    return table


def cmd_evaluate(args, file_cfg) -> int:
    _, real = read_grid_dir(args.real_dir)
    _, gen = read_grid_dir(args.gen_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"volume_mode": args.volume_mode, "ks_method": args.ks_method}
    paired = len(real) == len(gen) and all(
        len(real[i]) == len(gen[i]) and real[i][0].grid == gen[i][0].grid for i in real
    )
    if paired:
        rows = [[i, k, dice(voxelize(real[i][k]), voxelize(gen[i][k]))] for i in sorted(real) for k in range(len(real[i]))]
        with open(out / "dice.csv", "w") as fh:
            fh.write("sequence,time_index,dice\n")
            for i, k, d in rows:
                fh.write(f"{i},{k},{d:.10g}\n")
        summary["dice_mean"] = float(np.mean([r[2] for r in rows]))
    summary["paired"] = paired
    tables = {}
    for label, grids in (("real", real), ("generated", gen)):
        table = _metrics_table(grids, args.volume_mode)
        tables[label] = table
        try:
            series = descriptor_series(table)
        except ValueError:
            series = None
        if series is not None:
            for m in METRICS:
                write_series_csv(out / f"{label}_{m}.csv", series, m)
    ks = {}
    for m in METRICS:
        x = [getattr(c, m) for row in tables["real"] for c in row]
        y = [getattr(c, m) for row in tables["generated"] for c in row]
        d, p = ks_two_sample(x, y, method=args.ks_method)
        ks[m] = {"D": d, "p": p}
    summary["ks"] = ks
    write_json(out / "summary.json", summary)
    _manifest(out, "evaluate", {"real_dir": str(args.real_dir), "gen_dir": str(args.gen_dir), "volume_mode": args.volume_mode, "ks_method": args.ks_method}, args.seed)
    for m in METRICS:
        print(f"{m}: KS D={ks[m]['D']:.4f} p={ks[m]['p']:.4f}")
    if paired:
        print(f"mean DSC {summary['dice_mean']:.4f}")
    return 0


def _coerce(value: str, default):
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float) or default is None:
        try:
            return float(value)
        except ValueError:
            return value
    if isinstance(default, tuple):
        return tuple(type(default[0])(v) if default else float(v) for v in value.split(","))
    return value


def cmd_experiment(args, file_cfg) -> int:
    if args.name not in EXPERIMENTS:
        raise UsageError(f"unknown experiment {args.name!r}; available: {', '.join(sorted(EXPERIMENTS))}")
    cls, runner = EXPERIMENTS[args.name]
    defaults = {f.name: f.default for f in dataclasses.fields(cls)}
    flags = {"seed": args.seed, "out_dir": args.out or f"experiments/{args.name}"}
    for item in args.set or []:
        key, _, value = item.partition("=")
        if key not in defaults:
            raise UsageError(f"unknown setting {key!r} for {args.name}")
        flags[key] = _coerce(value, defaults[key])
    cfg = resolve(defaults, file_cfg, args.name, flags)
    for k, v in cfg.items():
        if isinstance(defaults[k], tuple) and isinstance(v, list):
            cfg[k] = tuple(v)
    if args.dry_run:
        print(json.dumps(cfg, indent=2, sort_keys=True, default=str))
        return 0
    report = runner(cls(**cfg))
    acc = report.get("acceptance", {})
    for k, ok in acc.items():
        print(f"{'PASS' if ok else 'FAIL'} {k}")
    return 0 if all(acc.values()) else 1


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (default 0)")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads for grid evaluation (default 1)")
    common.add_argument("--config", default=argparse.SUPPRESS, help="TOML or JSON settings file")
    common.add_argument("--verbose", "-v", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="cellsdf", description=__doc__.splitlines()[0], parents=[common])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", parents=[common], help="voxel sequences -> normalized SDF grid cache")
    s.add_argument("in_dir")
    s.add_argument("out_dir")
    s.add_argument("--grid", type=int, help="resample every frame to grid^3 voxels")
    s.add_argument("--no-align", action="store_true", help="centre only, skip principal-axis alignment")
    s.add_argument("--if-stale", action="store_true", help="skip when inputs and settings are unchanged")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", parents=[common], help="train a decoder on a prepared grid directory")
    s.add_argument("data_dir")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--epochs", type=int)
    s.add_argument("--points", type=int, help="points per time point")
    s.add_argument("--lr", type=float)
    s.add_argument("--sigma2", type=float)
    s.add_argument("--latent-dim", type=int)
    s.add_argument("--activation", choices=["sine", "relu"])
    s.add_argument("--omega0", type=float)
    s.add_argument("--no-equivariant", action="store_true")
    s.add_argument("--checkpoint-every", type=int)
    s.add_argument("--resume", action="store_true", help="continue from the checkpoint at --out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("fit-latent", parents=[common], help="fit a latent code and rotation to a new sequence")
    s.add_argument("checkpoint")
    s.add_argument("data_dir")
    s.add_argument("--sequence", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--iterations", type=int)
    s.add_argument("--restarts", type=int)
    s.set_defaults(func=cmd_fit_latent)

    s = sub.add_parser("synthesize", parents=[common], help="generate sequences from sampled latent codes")
    s.add_argument("checkpoint")
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=["gaussian", "perturb"])
    s.add_argument("--n", type=int)
    s.add_argument("--grid", type=int)
    s.add_argument("--n-time", type=int)
    s.add_argument("--std", type=float)
    s.add_argument("--variance", action="store_true", help="read --std as a variance")
    s.add_argument("--chunk", type=int)
    s.add_argument("--no-mesh", action="store_true")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--angles", help="fixed rotation a,b,c in radians")
    g.add_argument("--random-rotation", action="store_true")
    s.set_defaults(func=cmd_synthesize)

    s = sub.add_parser("interpolate", parents=[common], help="evaluate a trained sequence at arbitrary times")
    s.add_argument("checkpoint")
    s.add_argument("--sequence", default="0")
    s.add_argument("--out", required=True)
    s.add_argument("--times", help="comma-separated times in [-1, 1]")
    s.add_argument("--n-times", type=int, default=30)
    s.add_argument("--grid", type=int, default=64)
    s.add_argument("--chunk", type=int, default=32)
    s.add_argument("--no-mesh", action="store_true")
    s.set_defaults(func=cmd_interpolate)

    s = sub.add_parser("export-mesh", parents=[common], help="marching cubes on grid files")
    s.add_argument("grids", nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--iso", type=float, default=0.0)
    s.add_argument("--um", action="store_true", help="write vertices in micrometres")
    s.set_defaults(func=cmd_export_mesh)

    s = sub.add_parser("evaluate", parents=[common], help="compare two grid directories")
    s.add_argument("real_dir")
    s.add_argument("gen_dir")
    s.add_argument("--out", required=True)
    s.add_argument("--volume-mode", choices=["mesh", "voxel"], default="mesh")
    s.add_argument("--ks-method", choices=["asymptotic", "permutation"], default="asymptotic")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("experiment", parents=[common], help=f"run a study: {', '.join(sorted(EXPERIMENTS))}")
    s.add_argument("name")
    s.add_argument("--out")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a study setting")
    s.add_argument("--dry-run", action="store_true", help="print the resolved settings and exit")
    s.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("config", None), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        file_cfg = load_config_file(args.config)
        # the master seed and thread count follow the same precedence as everything else
        for name, default in (("seed", 0), ("threads", 1)):
            if not hasattr(args, name):
                setattr(args, name, int(file_cfg.get(name, default)))
        return args.func(args, file_cfg)
    except (UsageError, SdfDataError, CheckpointFormatError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
