"""Conditional space-time SDF decoder and its rotation-equivariant wrapper.

Layer layout (``hidden_layers = L``):

* layer 0 (input layer) reads ``[x', t, z]``;
* layers ``k = 1 .. L-1`` read ``[h, x', t]`` when ``coord_inject`` is on,
  with ``z`` appended for every ``k`` in ``latent_inject_layers``;
* a linear output layer maps the last hidden state to one SDF value.

``x'`` is ``R^T x`` for the equivariant model and ``x`` otherwise. Hidden
layers apply ``sin(omega0 * (W h + b))`` (or ReLU for the baseline).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Node, Tape
from .rotations import EULER_ORDER

MAGIC = b"NSMC0001"
FORMAT_VERSION = 1


class CheckpointFormatError(ValueError):
    """Raised for checkpoints with a bad magic, version or truncated payload."""


@dataclass(frozen=True)
class ArchitectureSpec:
    hidden_layers: int = 9
    hidden_width: int = 128
    latent_dim: int = 64
    omega0: float = 30.0
    activation: str = "sine"
    latent_inject_layers: tuple[int, ...] = (1, 5, 8)
    coord_inject: bool = True
    equivariant: bool = True
    output_tanh: bool = False

    def __post_init__(self):
        object.__setattr__(self, "latent_inject_layers", tuple(sorted(set(self.latent_inject_layers))))
        if self.hidden_layers < 1 or self.hidden_width < 1 or self.latent_dim < 0:
            raise ValueError("hidden_layers and hidden_width must be >= 1, latent_dim >= 0")
        if self.activation not in ("sine", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.activation == "sine" and self.omega0 <= 0:
            raise ValueError("omega0 must be positive")
        bad = [k for k in self.latent_inject_layers if not 1 <= k <= self.hidden_layers - 1]
        if bad:
            raise ValueError(f"latent_inject_layers {bad} outside [1, {self.hidden_layers - 1}]")

    @classmethod
    def deepsdf_relu(cls, **overrides) -> "ArchitectureSpec":
        """ReLU baseline: 8 layers of 128, latent 256 fed at the input and re-fed mid-network."""
        kw = dict(
            hidden_layers=8,
            hidden_width=128,
            latent_dim=256,
            activation="relu",
            latent_inject_layers=(4,),
            coord_inject=False,
        )
        kw.update(overrides)
        return cls(**kw)

    def layer_inputs(self) -> list[int]:
        """Input width of every linear layer, output layer last."""
        w, d = self.hidden_width, self.latent_dim
        sizes = [4 + d]
        for k in range(1, self.hidden_layers):
            n = w
            inject_z = k in self.latent_inject_layers
            if self.coord_inject or inject_z:
                n += 4
            if inject_z:
                n += d
            sizes.append(n)
        sizes.append(w)
        return sizes

    def layer_shapes(self) -> list[tuple[int, int]]:
        ins = self.layer_inputs()
        outs = [self.hidden_width] * self.hidden_layers + [1]
        return list(zip(outs, ins))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["latent_inject_layers"] = list(self.latent_inject_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        d = dict(d)
        d["latent_inject_layers"] = tuple(d.get("latent_inject_layers", ()))
        return cls(**d)


def count_parameters(arch: ArchitectureSpec) -> int:
    return sum(o * i + o for o, i in arch.layer_shapes())


@dataclass
class ModelState:
    arch: ArchitectureSpec
    weights: list[tuple[np.ndarray, np.ndarray]]
    latents: np.ndarray
    angles: np.ndarray
    sigma2: float = 1e-4
    seq_ids: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return self.weights[0][0].dtype

    @property
    def n_sequences(self) -> int:
        return self.latents.shape[0]

    def index_of(self, seq_id) -> int:
        if isinstance(seq_id, (int, np.integer)):
            if not 0 <= seq_id < self.n_sequences:
                raise KeyError(f"unknown sequence index {seq_id}")
            return int(seq_id)
        try:
            return self.seq_ids.index(seq_id)
        except ValueError:
            raise KeyError(f"unknown sequence {seq_id!r}") from None

    def copy(self) -> "ModelState":
        return ModelState(
            self.arch,
            [(W.copy(), b.copy()) for W, b in self.weights],
            self.latents.copy(),
            self.angles.copy(),
            self.sigma2,
            list(self.seq_ids),
            json.loads(json.dumps(self.meta)),
        )


def init_weights(arch: ArchitectureSpec, rng: np.random.Generator, dtype=np.float32):
    weights = []
    shapes = arch.layer_shapes()
    for k, (c_out, c_in) in enumerate(shapes):
        if arch.activation == "sine":
            bound = 1.0 / c_in if k == 0 else np.sqrt(6.0 / (arch.omega0**2 * c_in))
        else:
            bound = np.sqrt(6.0 / c_in)
        W = rng.uniform(-bound, bound, size=(c_out, c_in)).astype(dtype)
        weights.append((W, np.zeros(c_out, dtype=dtype)))
    return weights


def init_latents(n: int, latent_dim: int, rng: np.random.Generator, std: float = 0.01) -> np.ndarray:
    return rng.normal(0.0, std, size=(n, latent_dim))


def init_angles(n: int, rng: np.random.Generator) -> np.ndarray:
    # N(0, pi^2 / 64), i.e. std pi / 8
    return rng.normal(0.0, np.pi / 8.0, size=(n, 3))


def init_model(
    arch: ArchitectureSpec,
    n_sequences: int,
    rng: np.random.Generator,
    sigma2: float = 1e-4,
    dtype=np.float32,
    seq_ids=None,
) -> ModelState:
    weights = init_weights(arch, rng, dtype)
    latents = init_latents(n_sequences, arch.latent_dim, rng)
    angles = init_angles(n_sequences, rng) if arch.equivariant else np.zeros((n_sequences, 3))
    if seq_ids is None:
        seq_ids = [f"seq{i:04d}" for i in range(n_sequences)]
    if len(seq_ids) != n_sequences:
        raise ValueError("seq_ids length must equal n_sequences")
    return ModelState(arch, weights, latents, angles, float(sigma2), list(seq_ids))


# -- forward ------------------------------------------------------------------


def decoder_graph(
    tape: Tape,
    arch: ArchitectureSpec,
    weights: list[tuple[Node, Node]],
    x: Node,
    t: Node,
    z: Node,
    angles: Node | None = None,
) -> Node:
    """Build the decoder on ``tape``; returns a (B, 1) node."""
    if z.value.shape[-1] != arch.latent_dim:
        raise ValueError(f"latent has {z.value.shape[-1]} entries, architecture expects {arch.latent_dim}")
    xr = tape.rotate3(x, angles) if arch.equivariant else x
    coords = tape.concat([xr, t])
    act = (lambda n: tape.sine(n, arch.omega0)) if arch.activation == "sine" else tape.relu

    h = act(tape.linear(tape.concat([coords, z]), *weights[0]))
    for k in range(1, arch.hidden_layers):
        inject_z = k in arch.latent_inject_layers
        parts = [h]
        if arch.coord_inject or inject_z:
            parts.append(coords)
        if inject_z:
            parts.append(z)
        h = act(tape.linear(tape.concat(parts) if len(parts) > 1 else h, *weights[k]))
    out = tape.linear(h, *weights[-1])
    if arch.output_tanh:
        out = _tanh(tape, out)
    return out


def _tanh(tape: Tape, x: Node) -> Node:
    out = np.tanh(x.value)

    def backward(node):
        x._accumulate(node.grad * (1.0 - out * out))

    return tape._push(out, "scale", (x,), backward)


def forward(
    state: ModelState,
    x,
    t,
    z,
    angles=None,
    tape: Tape | None = None,
) -> np.ndarray:
    """Evaluate the decoder at points ``x`` (B, 3) and times ``t`` (B,)."""
    arch = state.arch
    dtype = state.dtype
    x = np.asarray(x, dtype=dtype).reshape(-1, 3)
    t = np.asarray(t, dtype=dtype).reshape(-1, 1)
    if x.shape[0] != t.shape[0]:
        raise ValueError("x and t must have the same number of rows")
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    if z.shape[1] != arch.latent_dim:
        raise ValueError(f"latent has {z.shape[1]} entries, architecture expects {arch.latent_dim}")
    if arch.equivariant and angles is None:
        raise ValueError("equivariant model requires rotation angles")
    if x.shape[0] == 0:
        return np.zeros(0, dtype=dtype)
    tape = tape or Tape(record=False)
    wn = [(tape.input(W), tape.input(b)) for W, b in state.weights]
    an = tape.input(np.asarray(angles, dtype=np.float64).reshape(3)) if arch.equivariant else None
    out = decoder_graph(tape, arch, wn, tape.input(x), tape.input(t), tape.input(z.astype(dtype)), an)
    return out.value.reshape(-1)


# -- checkpoints ----------------------------------------------------------------


def serialize(state: ModelState, optimizer=None, extra: dict | None = None) -> bytes:
    """Encode ``state`` (and optionally Adam moments) as checkpoint bytes.

    Layout: magic, u64 header length, JSON header, f32 parameter blob,
    f64 latent blob, f64 angle blob, optional f64 moment blob.
    """
    header = {
        "format": FORMAT_VERSION,
        "arch": state.arch.to_dict(),
        "sigma2": state.sigma2,
        "euler_order": EULER_ORDER,
        "seq_ids": list(state.seq_ids),
        "dtype": np.dtype(state.dtype).name,
        "latent_shape": list(state.latents.shape),
        "meta": state.meta,
        "extra": extra or {},
        "optimizer": None,
    }
    if optimizer is not None:
        header["optimizer"] = {
            "step": int(optimizer.step),
            "shapes": [list(m.shape) for m in optimizer.m],
            "dtypes": [np.dtype(m.dtype).name for m in optimizer.m],
        }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<Q", len(hbytes)))
    buf.write(hbytes)
    for W, b in state.weights:
        buf.write(np.ascontiguousarray(W, dtype="<f4").tobytes())
        buf.write(np.ascontiguousarray(b, dtype="<f4").tobytes())
    buf.write(np.ascontiguousarray(state.latents, dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(state.angles, dtype="<f8").tobytes())
    if optimizer is not None:
        for m, v in zip(optimizer.m, optimizer.v):
            buf.write(np.ascontiguousarray(m, dtype="<f8").tobytes())
            buf.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return buf.getvalue()


def deserialize(data: bytes):
    """Decode checkpoint bytes into ``(state, optimizer_payload, extra)``.

    ``optimizer_payload`` is ``None`` or a dict with ``step``, ``m`` and ``v``.
    """
    if len(data) < 16 or data[:8] != MAGIC:
        raise CheckpointFormatError("not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if 16 + hlen > len(data):
        raise CheckpointFormatError("truncated checkpoint header")
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"corrupt checkpoint header: {exc}") from None
    if header.get("format") != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {header.get('format')}")
    if header.get("euler_order") != EULER_ORDER:
        raise CheckpointFormatError(f"unsupported Euler order {header.get('euler_order')!r}")
    arch = ArchitectureSpec.from_dict(header["arch"])
    dtype = np.dtype(header["dtype"])
    pos = 16 + hlen

    def take(count, fmt):
        nonlocal pos
        nbytes = count * np.dtype(fmt).itemsize
        if pos + nbytes > len(data):
            raise CheckpointFormatError("truncated checkpoint payload")
        arr = np.frombuffer(data, dtype=fmt, count=count, offset=pos)
        pos += nbytes
        return arr

    weights = []
    for c_out, c_in in arch.layer_shapes():
        W = take(c_out * c_in, "<f4").reshape(c_out, c_in).astype(dtype)
        b = take(c_out, "<f4").astype(dtype)
        weights.append((W, b))
    n, d = header["latent_shape"]
    latents = take(n * d, "<f8").reshape(n, d).astype(np.float64)
    angles = take(n * 3, "<f8").reshape(n, 3).astype(np.float64)
    opt = None
    if header["optimizer"] is not None:
        m, v = [], []
        for shape, dt in zip(header["optimizer"]["shapes"], header["optimizer"]["dtypes"]):
            size = int(np.prod(shape))
            m.append(take(size, "<f8").reshape(shape).astype(dt))
            v.append(take(size, "<f8").reshape(shape).astype(dt))
        opt = {"step": header["optimizer"]["step"], "m": m, "v": v}
    if pos != len(data):
        raise CheckpointFormatError("trailing bytes after checkpoint payload")
    state = ModelState(arch, weights, latents, angles, header["sigma2"], header["seq_ids"], header["meta"])
    return state, opt, header["extra"]


def save_checkpoint(path, state: ModelState, optimizer=None, extra=None) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(state, optimizer, extra))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return deserialize(fh.read())
