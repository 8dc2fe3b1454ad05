import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cycledeform import autodiff as ad
from cycledeform.errors import ShapeMismatch
from cycledeform.geometry import normalize_bbox
from cycledeform.losses import chamfer_asym_t
from cycledeform.model import DEFAULT_CONFIG, Model, ModelConfig, parameter_shapes


@pytest.fixture(scope="module")
def model():
    return Model(DEFAULT_CONFIG, seed=0, dtype=np.float64)


def cloud(seed, n=64):
    return normalize_bbox(np.random.default_rng(seed).uniform(-1, 1, (n, 3)))


def test_layout_counts():
    assert DEFAULT_CONFIG.pair_param_count == 774 == 2 * 3 + 6 * 2 * 64
    assert DEFAULT_CONFIG.code_size == 512
    shapes = dict(parameter_shapes(DEFAULT_CONFIG))
    assert shapes["pred.W0"] == (512, 1024)
    assert shapes["pred.W1"] == (774, 512)
    assert shapes["deform.W1"] == (64, 3)
    assert shapes["deform.W7"] == (3, 64)
    assert all(shapes[f"deform.W{k}"] == (64, 64) for k in range(2, 7))
    assert len([k for k in shapes if k.startswith("deform.")]) == 7


def test_descriptor_round_trip():
    assert ModelConfig.from_descriptor(DEFAULT_CONFIG.descriptor()) == DEFAULT_CONFIG


def test_encoders_independent(model):
    for i in range(3):
        assert model.params[f"encA.W{i}"] is not model.params[f"encB.W{i}"]
        assert not np.array_equal(model.params[f"encA.W{i}"], model.params[f"encB.W{i}"])


def test_init_is_seeded():
    a, b = Model(seed=3), Model(seed=3)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    c = Model(seed=4)
    assert not np.array_equal(a.params["pred.W0"], c.params["pred.W0"])


def test_encode_length_and_permutation_invariance(model):
    X = cloud(0)
    code = model.encode(X).value
    assert code.shape == (512,)
    perm = np.random.default_rng(1).permutation(len(X))
    np.testing.assert_array_equal(model.encode(X[perm]).value, code)
    np.testing.assert_array_equal(model.encode(X[perm], "encB").value, model.encode(X, "encB").value)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_encode_permutation_invariance_property(seed):
    m = Model(ModelConfig((8, 16, 32), 16, 8, 3), seed=seed % 7, dtype=np.float64)
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(int(rng.integers(1, 40)), 3))
    perm = rng.permutation(len(X))
    np.testing.assert_array_equal(m.encode(X[perm]).value, m.encode(X).value)


def test_single_point_encoding_is_its_feature(model):
    p = np.array([[0.1, -0.2, 0.3]])
    P = model.params
    h = p
    for i in range(3):
        h = np.maximum(h @ P[f"encA.W{i}"].T + P[f"encA.b{i}"], 0)
    np.testing.assert_allclose(model.encode(p).value, h[0], rtol=1e-12, atol=1e-15)


def test_predict_params(model):
    va, vb = model.encode(cloud(0)), model.encode(cloud(1), "encB")
    flat = model.predict_params(va, vb).value
    assert flat.shape == (774,)
    np.testing.assert_array_equal(model.predict_params(va, vb).value, flat)
    swapped = model.predict_params(vb, va).value
    assert not np.allclose(swapped, flat)
    with pytest.raises(ShapeMismatch):
        model.predict_params(va.value[:10], vb)


def test_deform_shape_and_range(model):
    flat = model.predict_params(model.encode(cloud(0)), model.encode(cloud(1), "encB"))
    for n in (1, 5, 300):
        out = model.deform(flat, np.random.default_rng(n).uniform(-1, 1, (n, 3))).value
        assert out.shape == (n, 3)
        assert np.all(np.abs(out) < 1)


def test_deform_zero_everything_gives_zero():
    cfg = ModelConfig((4, 8), 4, 6, 3)
    m = Model(cfg, dtype=np.float64)
    m.params = {k: np.zeros_like(v) for k, v in m.params.items()}
    out = m.map(cloud(0, 10), cloud(1, 10)).value
    np.testing.assert_array_equal(out, np.zeros((10, 3)))


def test_deform_two_modules_by_hand():
    cfg = ModelConfig((4,), 4, 5, 2)
    rng = np.random.default_rng(9)
    m = Model(cfg, seed=1, dtype=np.float64)
    s1, b1 = rng.normal(size=3), rng.normal(size=3)
    s2, b2 = rng.normal(size=5), rng.normal(size=5)
    flat = np.concatenate([s1, b1, s2, b2])
    p = np.array([[0.3, -0.7, 0.2]])
    W1, W2 = m.params["deform.W1"], m.params["deform.W2"]
    x1 = np.maximum(W1 @ (s1 * p[0] + b1), 0)
    x2 = np.tanh(W2 @ (s2 * x1 + b2))
    np.testing.assert_allclose(m.deform(ad.Tensor(flat), p).value[0], x2, rtol=1e-12)
    # batched path agrees with the single-pair path
    batched = m.deform(ad.Tensor(flat[None]), p[None]).value
    np.testing.assert_allclose(batched[0, 0], x2, rtol=1e-12)


def test_map_contract(model):
    S, T = cloud(3, 50), cloud(4, 70)
    out = model.map(S, T).value
    assert out.shape == S.shape
    np.testing.assert_array_equal(model.map(S, T).value, out)
    # point i of the output is the image of source point i
    sub = model.map_points(S, T, S[[7, 3]]).value
    np.testing.assert_allclose(sub, out[[7, 3]], rtol=1e-12, atol=1e-15)


def test_map_pairs_matches_map():
    m = Model(ModelConfig((8, 16), 8, 8, 3), seed=2, dtype=np.float64)
    clouds = np.stack([cloud(i, 20) for i in range(3)])
    pairs = [(0, 1), (2, 0), (1, 1)]
    D = m.map_pairs(clouds, pairs).value
    for r, (i, j) in enumerate(pairs):
        np.testing.assert_allclose(D[r], m.map(clouds[i], clouds[j]).value, rtol=1e-10, atol=1e-12)


def test_end_to_end_gradient():
    m = Model(ModelConfig((16, 16, 16), 16, 16, 7), seed=0, dtype=np.float64)
    A, B = cloud(5, 64), cloud(6, 64)

    def f(P):
        return chamfer_asym_t(m.map(A, B, P), B)

    f(m.tensors())
    rep = ad.grad_check(f, m.params, h=1e-4, tol_rel=1e-3, max_entries=40,
                        rng=np.random.default_rng(0), freeze_branches=True)
    assert rep.passed, rep.summary()


def test_concurrent_inference_is_consistent(model):
    from concurrent.futures import ThreadPoolExecutor

    pairs = [(cloud(i, 64), cloud(i + 1, 64)) for i in range(4)]
    serial = [model.map(S, T).value for S, T in pairs]
    with ThreadPoolExecutor(4) as ex:
        parallel = list(ex.map(lambda st: model.map(*st).value, pairs))
    for a, b in zip(serial, parallel):
        np.testing.assert_array_equal(a, b)
