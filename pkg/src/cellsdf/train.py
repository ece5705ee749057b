"""Auto-decoder training: joint Adam over decoder weights, latents and angles."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .autodiff import Tape
from .model import ModelState, decoder_graph, init_angles, init_latents, save_checkpoint
from .rotations import euler_matrix, geodesic_distance, matrix_to_euler, random_rotation
from .sdfdata import GridSampler, SampleBatch, SamplingConfig, SdfGrid, draw_training_batch

log = logging.getLogger(__name__)


class NonFiniteGradientError(FloatingPointError):
    pass


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 2000
    batch_sequences: int = 5
    points_per_timepoint: int = 20_000
    lr: float = 1e-4
    lr_decay_factor: float = 0.5
    lr_decay_every: int = 350
    sigma2: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    near_threshold_um: float = 0.6
    near_fraction: float = 0.7
    checkpoint_every: int = 0
    # multipliers on lr for the latent and angle tables (1.0 = one shared rate)
    lr_latent_scale: float = 1.0
    lr_angle_scale: float = 1.0

    def __post_init__(self):
        if self.lr <= 0 or self.lr_latent_scale <= 0 or self.lr_angle_scale <= 0:
            raise ValueError("lr must be positive")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must lie in (0, 1]")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def sampling(self) -> SamplingConfig:
        return SamplingConfig(self.batch_sequences, self.points_per_timepoint, self.near_threshold_um, self.near_fraction)

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


# -- losses -------------------------------------------------------------------


def loss_reconstruction(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if pred.shape != target.shape:
        raise ValueError("pred and target lengths differ")
    if pred.size == 0:
        raise ValueError("reconstruction loss of an empty batch")
    return float(np.mean(np.abs(pred - target)))


def loss_code(z, sigma2: float) -> float:
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    z = np.asarray(z, dtype=np.float64)
    return float(np.sum(z * z) / sigma2)


@dataclass
class LossBreakdown:
    total: float
    rec: float
    code: float
    per_sequence: dict = field(default_factory=dict)


def _loss_graph(state: ModelState, batch: SampleBatch, train_weights: bool, train_codes: bool, sigma2=None):
    sigma2 = state.sigma2 if sigma2 is None else sigma2
    arch = state.arch
    dtype = state.dtype
    tape = Tape()
    wn = [
        (tape.input(W, requires_grad=train_weights), tape.input(b, requires_grad=train_weights))
        for W, b in state.weights
    ]
    terms, per_seq, seq_nodes = [], {}, {}
    rec_sum = code_sum = 0.0
    for s in np.unique(batch.seq_ids):
        s = int(s)
        if not 0 <= s < state.n_sequences:
            raise KeyError(f"unknown sequence index {s}")
        sel = batch.seq_ids == s
        z = tape.input(state.latents[s].astype(dtype).reshape(1, -1), requires_grad=train_codes)
        a = tape.input(state.angles[s].copy(), requires_grad=train_codes and arch.equivariant)
        x = tape.input(batch.points[sel].astype(dtype))
        t = tape.input(batch.times[sel].astype(dtype).reshape(-1, 1))
        out = decoder_graph(tape, arch, wn, x, t, z, a if arch.equivariant else None)
        rec = tape.l1_mean(out, batch.targets[sel])
        code = tape.sum_squares(z, 1.0 / sigma2)
        terms += [rec, code]
        r, c = float(rec.value[0, 0]), float(code.value[0, 0])
        rec_sum += r
        code_sum += c
        per_seq[s] = (r, c)
        seq_nodes[s] = (z, a)
    if not terms:
        raise ValueError("empty batch")
    loss = tape.add(*terms)
    return tape, loss, wn, seq_nodes, LossBreakdown(float(loss.value[0, 0]), rec_sum, code_sum, per_seq)


def total_loss(state: ModelState, batch: SampleBatch) -> LossBreakdown:
    """Sum over the batch's distinct sequences of mean-L1 plus the latent penalty."""
    return _loss_graph(state, batch, False, False)[-1]


def parameters(state: ModelState) -> list[np.ndarray]:
    """Trainable arrays in optimizer order: W0, b0, W1, b1, ..., latents, angles."""
    out = []
    for W, b in state.weights:
        out += [W, b]
    return out + [state.latents, state.angles]


def parameter_names(state: ModelState) -> list[str]:
    names = []
    for k in range(len(state.weights)):
        names += [f"W{k}", f"b{k}"]
    return names + ["latents", "angles"]


def loss_and_grads(state: ModelState, batch: SampleBatch):
    """Loss breakdown and gradients aligned with :func:`parameters`."""
    tape, loss, wn, seq_nodes, br = _loss_graph(state, batch, True, True)
    tape.backward(loss)
    grads = []
    for W, b in wn:
        grads += [W.grad, b.grad]
    gz = np.zeros_like(state.latents)
    ga = np.zeros_like(state.angles)
    for s, (z, a) in seq_nodes.items():
        gz[s] += z.grad.reshape(-1)
        if state.arch.equivariant:
            ga[s] += a.grad
    return br, grads + [gz, ga]


# -- Adam ---------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "OptimizerState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, opt: OptimizerState, lr, beta1=0.9, beta2=0.999, eps=1e-8, names=None) -> None:
    """One bias-corrected Adam update applied in place.

    ``lr`` may be a scalar or one value per parameter tensor.
    """
    if len(params) != len(grads) or len(params) != len(opt.m):
        raise ValueError("params, grads and optimizer moments must align")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            name = names[i] if names else f"tensor {i}"
            raise NonFiniteGradientError(f"non-finite gradient in {name}")
    opt.step += 1
    t = opt.step
    lrs = lr if isinstance(lr, (list, tuple)) else [lr] * len(params)
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v, lr_i in zip(params, grads, opt.m, opt.v, lrs):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        g = g.astype(p.dtype, copy=False)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr_i * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)


# -- training loop ------------------------------------------------------------


@dataclass
class HistoryRow:
    epoch: int
    loss_rec: float
    loss_code: float
    lr: float
    seconds: float


def write_history(path, rows: Sequence[HistoryRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss_rec", "loss_code", "lr", "seconds"])
        for r in rows:
            w.writerow([r.epoch, repr(r.loss_rec), repr(r.loss_code), repr(r.lr), f"{r.seconds:.3f}"])


@dataclass
class TrainResult:
    model: ModelState
    history: list[HistoryRow]
    optimizer: OptimizerState
    rng_state: dict


def train(
    model: ModelState,
    data: Mapping[int, Sequence[SdfGrid]],
    cfg: TrainConfig,
    checkpoint_path=None,
    optimizer: OptimizerState | None = None,
    start_epoch: int = 0,
    rng_state: dict | None = None,
    callback: Callable[[int, ModelState], None] | None = None,
) -> TrainResult:
    """Run ``cfg.epochs`` epochs of ``ceil(N / batch_sequences)`` Adam steps.

    Passing ``optimizer``, ``start_epoch`` and ``rng_state`` from a checkpoint
    continues a run exactly where it stopped. The model is updated in place.
    """
    missing = [s for s in data if not 0 <= s < model.n_sequences]
    if missing:
        raise KeyError(f"data sequences {missing} are not registered in the model")
    model.sigma2 = cfg.sigma2
    rng = np.random.default_rng(cfg.seed)
    if rng_state is not None:
        rng.bit_generator.state = rng_state
    params = parameters(model)
    names = parameter_names(model)
    opt = optimizer or OptimizerState.zeros_like(params)
    sampler = GridSampler(cfg.near_threshold_um)
    steps = math.ceil(len(data) / cfg.batch_sequences)
    history: list[HistoryRow] = []
    scfg = cfg.sampling()

    def snapshot(epoch):
        return {"epoch": epoch, "rng_state": rng.bit_generator.state, "train_config": cfg.to_dict()}

    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(cfg, epoch)
        rec = code = 0.0
        for _ in range(steps):
            batch = draw_training_batch(data, rng, scfg, sampler)
            br, grads = loss_and_grads(model, batch)
            if not np.isfinite(br.total):
                if checkpoint_path is not None:
                    save_checkpoint(Path(str(checkpoint_path) + ".diverged"), model, opt, snapshot(epoch))
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            lrs = [lr] * (len(params) - 2) + [lr * cfg.lr_latent_scale, lr * cfg.lr_angle_scale]
            adam_step(params, grads, opt, lrs, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, names)
            rec += br.rec
            code += br.code
        history.append(HistoryRow(epoch, rec / steps, code / steps, lr, time.perf_counter() - t0))
        if cfg.checkpoint_every and checkpoint_path is not None and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, model, opt, snapshot(epoch + 1))
        if callback is not None:
            callback(epoch, model)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, opt, snapshot(cfg.epochs))
    return TrainResult(model, history, opt, rng.bit_generator.state)


# -- fitting a new sequence ---------------------------------------------------


@dataclass
class FitConfig:
    iterations: int = 300
    n_restarts: int = 8
    lr_latent: float = 1e-3
    lr_angles: float = 2e-2
    lr_decay_every: int = 100
    lr_decay_factor: float = 0.5
    sigma2: float | None = None
    angle_init: str = "spread"
    n_screen: int = 256
    screen_separation_deg: float = 30.0
    screen_codes: str = "trained"
    seed: int = 0

    def __post_init__(self):
        if self.angle_init not in ("prior", "spread", "screen"):
            raise ValueError(f"unknown angle_init {self.angle_init!r}")
        if self.screen_codes not in ("zero", "trained"):
            raise ValueError(f"unknown screen_codes {self.screen_codes!r}")
        if self.iterations < 1 or self.n_restarts < 1:
            raise ValueError("iterations and n_restarts must be >= 1")


@dataclass
class FitResult:
    z: np.ndarray
    angles: np.ndarray
    loss: float
    restart_losses: list[float]


def fit_objective(model: ModelState, samples: SampleBatch, z, angles, sigma2=None) -> float:
    """Mean L1 of the rotated decoder plus the latent penalty, for one sequence."""
    probe = _single(model, z, angles)
    return total_loss_for(probe, samples, sigma2)


def total_loss_for(probe: ModelState, samples: SampleBatch, sigma2=None) -> float:
    s = samples.select(np.ones(len(samples), dtype=bool))
    s.seq_ids[:] = 0
    return _loss_graph(probe, s, False, False, sigma2)[-1].total


def _single(model: ModelState, z, angles) -> ModelState:
    return ModelState(
        model.arch,
        model.weights,
        np.asarray(z, dtype=np.float64).reshape(1, -1),
        np.asarray(angles if angles is not None else np.zeros(3), dtype=np.float64).reshape(1, 3),
        model.sigma2,
        ["fit"],
    )


def fit_latent(model: ModelState, samples: SampleBatch, cfg: FitConfig | None = None) -> FitResult:
    """Optimize a latent code and rotation for a new sequence with frozen weights.

    Each restart draws a fresh latent from N(0, 0.01^2). The first restart
    draws angles from the training prior; with ``angle_init="spread"`` the
    others start from Haar-random rotations so the search covers SO(3).
    The best iterate over all restarts is returned.
    """
    cfg = cfg or FitConfig()
    if len(samples) == 0:
        raise ValueError("fit_latent needs at least one sample")
    sigma2 = model.sigma2 if cfg.sigma2 is None else cfg.sigma2
    rng = np.random.default_rng(cfg.seed)
    s = samples.select(np.ones(len(samples), dtype=bool))
    s.seq_ids[:] = 0
    equivariant = model.arch.equivariant
    screened = _screen_rotations(model, s, cfg, rng, sigma2) if equivariant and cfg.angle_init == "screen" else []
    best = (np.inf, None, None)
    restart_losses = []
    for r in range(cfg.n_restarts):
        z0 = init_latents(1, model.arch.latent_dim, rng)
        if not equivariant:
            a0 = np.zeros((1, 3))
        elif r < len(screened):
            a0 = screened[r].reshape(1, 3)
        elif r == 0 or cfg.angle_init == "prior":
            a0 = init_angles(1, rng)
        else:
            a0 = matrix_to_euler(random_rotation(rng)).reshape(1, 3)
        probe = _single(model, z0, a0)
        params = [probe.latents, probe.angles]
        opt = OptimizerState.zeros_like(params)
        run_best = np.inf
        for it in range(cfg.iterations):
            tape, loss, _, seq_nodes, br = _loss_graph(probe, s, False, True, sigma2)
            if br.total < run_best:
                run_best = br.total
            if br.total < best[0]:
                best = (br.total, probe.latents.copy(), probe.angles.copy())
            tape.backward(loss)
            z, a = seq_nodes[0]
            grads = [z.grad.reshape(1, -1).astype(np.float64), a.grad.reshape(1, 3) if equivariant else np.zeros((1, 3))]
            decay = cfg.lr_decay_factor ** (it // cfg.lr_decay_every)
            adam_step(params, grads, opt, [cfg.lr_latent * decay, cfg.lr_angles * decay], names=["latent", "angles"])
        final = total_loss_for(probe, s, sigma2)
        if final < best[0]:
            best = (final, probe.latents.copy(), probe.angles.copy())
        restart_losses.append(min(run_best, final))
        log.debug("restart %d: loss %.6g", r, restart_losses[-1])
    loss, z, a = best
    angles = _canonical_angles(a.reshape(3)) if equivariant else a.reshape(3)
    return FitResult(z.reshape(-1), angles, float(loss), restart_losses)


def _screen_rotations(model: ModelState, samples: SampleBatch, cfg: FitConfig, rng, sigma2) -> list[np.ndarray]:
    """Starting angles for the restarts from a coarse search over SO(3).

    Scores ``n_screen`` Haar-random rotations against template shapes and
    keeps the best ones that are pairwise at least ``screen_separation_deg``
    apart, so restarts begin in distinct basins. Templates are the trained
    codes (``screen_codes="trained"``) or the prior mean z = 0. Only the
    angles are reused; every restart still draws a fresh latent.
    """
    if cfg.screen_codes == "trained" and model.n_sequences:
        codes = list(model.latents)
    else:
        codes = [np.zeros(model.arch.latent_dim)]
    # the data term alone ranks orientations; the code penalty is constant per template
    cands = [random_rotation(rng) for _ in range(cfg.n_screen)]
    scores = [min(fit_objective(model, samples, z, matrix_to_euler(R), sigma2) for z in codes) for R in cands]
    chosen: list[np.ndarray] = []
    for i in np.argsort(scores, kind="stable"):
        R = cands[i]
        if all(np.degrees(geodesic_distance(R, Q)) >= cfg.screen_separation_deg for Q in chosen):
            chosen.append(R)
        if len(chosen) == cfg.n_restarts:
            break
    return [matrix_to_euler(R) for R in chosen]


def _canonical_angles(a: np.ndarray) -> np.ndarray:
    return matrix_to_euler(euler_matrix(a))
