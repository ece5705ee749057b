import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cellsdf.model import (
    ArchitectureSpec,
    CheckpointFormatError,
    count_parameters,
    deserialize,
    forward,
    init_model,
    load_checkpoint,
    save_checkpoint,
    serialize,
)
from cellsdf.rotations import euler_matrix

SMALL = dict(hidden_layers=9, hidden_width=16, latent_dim=8, latent_inject_layers=(1, 5, 8))

# closed-form sum over the default layer shapes:
# input 68 -> 128, hidden layers 1..8 read 128 + 4 (+64 at layers 1, 5, 8), output 128 -> 1
DEFAULT_PARAMS = (68 * 128 + 128) + 3 * (196 * 128 + 128) + 5 * (132 * 128 + 128) + (128 + 1)


def test_default_parameter_count():
    assert DEFAULT_PARAMS == 169_729
    assert count_parameters(ArchitectureSpec()) == DEFAULT_PARAMS
    assert abs(DEFAULT_PARAMS - 168_500) / 168_500 < 0.01


def test_tiny_parameter_count():
    arch = ArchitectureSpec(hidden_layers=1, hidden_width=1, latent_dim=0, latent_inject_layers=())
    # one 4 -> 1 layer and one 1 -> 1 output layer
    assert count_parameters(arch) == (4 + 1) + (1 + 1)


def test_width_scaling():
    a = ArchitectureSpec(hidden_width=128)
    b = ArchitectureSpec(hidden_width=256)
    square = lambda arch: sum(o * i for o, i in arch.layer_shapes()[1:-1] if i == o + 4)  # noqa: E731
    hidden = lambda arch: arch.hidden_width**2  # noqa: E731
    assert hidden(b) == 4 * hidden(a)
    assert 3.5 < square(b) / square(a) < 4.1


def test_invalid_architectures():
    with pytest.raises(ValueError):
        ArchitectureSpec(latent_inject_layers=(0,))
    with pytest.raises(ValueError):
        ArchitectureSpec(latent_inject_layers=(9,))
    with pytest.raises(ValueError):
        ArchitectureSpec(activation="tanh")


def test_relu_baseline_shape():
    arch = ArchitectureSpec.deepsdf_relu()
    assert arch.hidden_layers == 8 and arch.latent_dim == 256 and arch.activation == "relu"
    assert arch.layer_inputs()[4] == 128 + 4 + 256


def test_init_bounds_and_variance():
    rng = np.random.default_rng(0)
    m = init_model(ArchitectureSpec(), 3, rng)
    W0 = m.weights[0][0]
    assert W0.shape == (128, 68) and np.abs(W0).max() <= 1 / 68
    assert np.isclose(np.sqrt(6 / (900 * 128)), 7.2169e-3, rtol=1e-4)
    bound = np.sqrt(6 / (900 * 132))
    assert max(np.abs(m.weights[k][0]).max() for k in (2, 3, 4, 6, 7)) <= bound
    wide = init_model(ArchitectureSpec(hidden_width=256), 1, rng)
    bound = np.sqrt(6 / (900 * 260))
    hidden = np.concatenate([wide.weights[k][0].ravel() for k in (2, 3, 4, 6, 7)])
    assert hidden.size > 1e5 and np.abs(hidden).max() <= bound
    assert abs(hidden.var() / (bound**2 / 3) - 1) < 0.05
    assert all(np.all(b == 0) for _, b in m.weights)
    assert m.latents.shape == (3, 64) and m.angles.shape == (3, 3)


def test_latent_and_angle_init_distributions():
    m = init_model(ArchitectureSpec(latent_dim=64), 400, np.random.default_rng(1))
    assert abs(m.latents.std() - 0.01) < 0.0005
    assert abs(m.angles.std() - np.pi / 8) < 0.02


def test_relu_init_is_kaiming_uniform():
    m = init_model(ArchitectureSpec.deepsdf_relu(), 1, np.random.default_rng(0))
    W = m.weights[1][0]
    assert np.abs(W).max() <= np.sqrt(6 / 128)


def test_empty_sequence_table():
    m = init_model(ArchitectureSpec(), 0, np.random.default_rng(0))
    assert m.latents.shape == (0, 64)
    assert forward(m, np.zeros((2, 3)), np.zeros(2), np.zeros(64), np.zeros(3)).shape == (2,)


def small_state(equivariant=True, seed=0):
    return init_model(ArchitectureSpec(equivariant=equivariant, **SMALL), 2, np.random.default_rng(seed), dtype=np.float64)


def test_zero_angles_match_plain_model(rng):
    eq = small_state(True)
    plain = small_state(False)
    x = rng.uniform(-1, 1, (50, 3))
    t = rng.uniform(-1, 1, 50)
    z = eq.latents[0]
    assert np.array_equal(forward(eq, x, t, z, np.zeros(3)), forward(plain, x, t, z))


@settings(max_examples=25, deadline=None)
@given(st.tuples(*[st.floats(-np.pi, np.pi)] * 3), st.integers(0, 1000))
def test_rotation_consistency(angles, seed):
    r = np.random.default_rng(seed)
    m = small_state(True)
    x = r.uniform(-1, 1, (20, 3))
    t = r.uniform(-1, 1, 20)
    z = r.normal(0, 0.01, 8)
    R = euler_matrix(angles)
    a = forward(m, x, t, z, angles)
    b = forward(m, x @ R, t, z, np.zeros(3))
    assert np.allclose(a, b, rtol=0, atol=1e-12)


def test_empty_batch_and_errors():
    m = small_state()
    assert forward(m, np.zeros((0, 3)), np.zeros(0), np.zeros(8), np.zeros(3)).shape == (0,)
    with pytest.raises(ValueError):
        forward(m, np.zeros((1, 3)), np.zeros(1), np.zeros(7), np.zeros(3))
    with pytest.raises(ValueError):
        forward(m, np.zeros((1, 3)), np.zeros(1), np.zeros(8), None)


def test_injection_wiring(rng):
    m = small_state(False)
    x = rng.uniform(-1, 1, (30, 3))
    t = rng.uniform(-1, 1, 30)
    z = rng.normal(0, 0.5, 8)
    base = forward(m, x, t, z)
    cut = m.copy()
    for k in (5, 8):
        W, _ = cut.weights[k]
        W[:, -8:] = 0.0  # latent columns come last in the layer input
    assert not np.allclose(forward(cut, x, t, z), base)
    assert np.array_equal(forward(m, x, t, np.zeros(8)), forward(cut, x, t, np.zeros(8)))


def test_checkpoint_roundtrip(tmp_path):
    m = init_model(ArchitectureSpec(**SMALL), 3, np.random.default_rng(2), sigma2=1e-3, seq_ids=["a", "b", "c"])
    data = serialize(m, extra={"epoch": 7})
    back, opt, extra = deserialize(data)
    assert serialize(back, extra={"epoch": 7}) == data
    assert opt is None and extra == {"epoch": 7}
    assert back.seq_ids == ["a", "b", "c"] and back.sigma2 == 1e-3
    assert back.index_of("b") == 1
    assert data[:8] == b"NSMC0001"
    save_checkpoint(tmp_path / "m.ckpt", m)
    again, _, _ = load_checkpoint(tmp_path / "m.ckpt")
    assert np.array_equal(again.latents, m.latents)


def test_relu_checkpoint_reports_activation():
    m = init_model(ArchitectureSpec.deepsdf_relu(hidden_width=8, latent_dim=4), 1, np.random.default_rng(0))
    back, _, _ = deserialize(serialize(m))
    assert back.arch.activation == "relu"


def test_corrupt_checkpoints():
    data = serialize(small_state())
    with pytest.raises(CheckpointFormatError):
        deserialize(data[:-3])
    with pytest.raises(CheckpointFormatError):
        deserialize(b"XXXXXXXX" + data[8:])
    with pytest.raises(CheckpointFormatError):
        deserialize(data + b"\0")
    with pytest.raises(CheckpointFormatError):
        deserialize(data.replace(b'"format": 1', b'"format": 9'))
