import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cbtfed.exceptions import FormatError, ShapeError
from cbtfed.optim import Adam
from cbtfed.params import ParamVector, glorot_init, load_checkpoint, save_checkpoint

shapes = st.lists(st.lists(st.integers(1, 4), min_size=0, max_size=3), min_size=1, max_size=4)


def _vector(shape_list, data):
    manifest = tuple((f"t{i}.w", tuple(s)) for i, s in enumerate(shape_list))
    n = sum(int(np.prod(s)) for s in shape_list)
    values = data.draw(arrays(np.float64, n, elements=st.floats(allow_nan=False, width=64)))
    return ParamVector(values, manifest)


@given(shapes, st.data())
def test_checkpoint_round_trip_bit_exact(tmp_path_factory, shape_list, data):
    p = _vector(shape_list, data)
    path = tmp_path_factory.mktemp("ck") / "w.ckpt"
    save_checkpoint(path, p)
    q = load_checkpoint(path)
    assert q.manifest == p.manifest and q.data.tobytes() == p.data.tobytes()


@given(shapes, st.data())
def test_flatten_unflatten_identity(shape_list, data):
    p = _vector(shape_list, data)
    assert ParamVector.from_arrays(p.unflatten()) == p


def test_checkpoint_layout(tmp_path):
    p = ParamVector(np.arange(5.0), (("a", (2,)), ("b", (1, 3))))
    save_checkpoint(tmp_path / "c", p)
    raw = (tmp_path / "c").read_bytes()
    head, payload = raw.split(b"END\n", 1)
    assert head.decode().splitlines()[1:] == ["a 2", "b 1,3"]
    assert np.array_equal(np.frombuffer(payload, "<f8"), p.data)


@pytest.mark.parametrize("mangle,msg", [
    (lambda raw: b"NOPE" + raw[4:], "magic"),
    (lambda raw: raw[:-8], "payload"),
    (lambda raw: raw.replace(b"a 2", b"a2x"), "malformed"),
])
def test_checkpoint_errors(tmp_path, mangle, msg):
    p = ParamVector(np.arange(2.0), (("a", (2,)),))
    save_checkpoint(tmp_path / "c", p)
    (tmp_path / "d").write_bytes(mangle((tmp_path / "c").read_bytes()))
    with pytest.raises(FormatError, match=msg):
        load_checkpoint(tmp_path / "d")


def test_manifest_length_checked():
    with pytest.raises(ShapeError):
        ParamVector(np.zeros(3), (("a", (2,)),))


def test_glorot_bounds_and_biases():
    m = (("w", (30, 20)), ("b", (20,)), ("g", (20,)))
    p = glorot_init(m, np.random.default_rng(0), ones={"g"}).unflatten()
    assert np.abs(p["w"]).max() <= np.sqrt(6 / 50)
    assert np.all(p["b"] == 0) and np.all(p["g"] == 1)
    assert np.std(p["w"]) == pytest.approx(np.sqrt(6 / 50) / np.sqrt(3), rel=0.1)


def test_adam_first_step_and_zero_lr():
    g = np.array([0.5, -2.0, 1e-3])
    x = np.zeros(3)
    step = Adam(0.1).step(x, g)
    assert np.allclose(step, -0.1 * g / (np.abs(g) + 1e-8))
    assert np.array_equal(Adam(0.0).step(x + 1, g), x + 1)


def test_adam_converges_on_quadratic():
    opt, x = Adam(0.05), np.array([3.0, -2.0])
    for _ in range(2000):
        x = opt.step(x, 2 * (x - [1.0, 0.5]))
    assert np.allclose(x, [1.0, 0.5], atol=1e-3)
