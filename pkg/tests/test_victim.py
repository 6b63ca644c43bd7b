import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _support import toy_dataset, toy_victim
from p2s_attack import weights
from p2s_attack.errors import FormatError, NonFiniteLoss, ShapeMismatch
from p2s_attack.geometry import PointCloud
from p2s_attack.victim import TrainConfig, VictimModel, accuracy, forward, input_gradient, train


def random_model(seed, k=4):
    rng = np.random.default_rng(seed)
    m = VictimModel.init(k, seed=seed)
    m.set_layers([(W, rng.normal(0, 0.1, b.shape)) for W, b in m.layers])
    return m


def loss_value(model, pts, y):
    z = model.logits(pts)
    z = z - z.max()
    return -(z[y] - np.log(np.exp(z).sum()))


def activation_pattern(model, pts):
    """Which ReLUs are on and which point wins each pooled channel."""
    _, cache = model._forward(pts[None])
    parts = [a > 0 for _, a in cache["point"]] + [a > 0 for _, a in cache["head"][:-1]]
    return [p.tobytes() for p in parts] + [cache["pool"][1].tobytes()]


def fd_input_gradient(model, pts, y, step=1e-4):
    """Central differences; where the step crosses a kink, the one-sided
    difference on the side sharing the base activation pattern."""
    g = np.zeros_like(pts)
    base = activation_pattern(model, pts)
    f0 = loss_value(model, pts, y)
    for idx in np.ndindex(*pts.shape):
        up, down = pts.copy(), pts.copy()
        up[idx] += step
        down[idx] -= step
        same_up = activation_pattern(model, up) == base
        same_down = activation_pattern(model, down) == base
        if same_up and same_down:
            g[idx] = (loss_value(model, up, y) - loss_value(model, down, y)) / (2 * step)
        elif same_up:
            g[idx] = (loss_value(model, up, y) - f0) / step
        elif same_down:
            g[idx] = (f0 - loss_value(model, down, y)) / step
        else:
            g[idx] = np.nan
    return g


@pytest.fixture(scope="module")
def trained():
    return toy_victim(toy_dataset(per_class=8, n=128))


def test_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    worst = 0.0
    for case in range(20):
        model = random_model(case)
        pts = rng.normal(size=(int(rng.integers(8, 40)), 3))
        y = int(rng.integers(model.num_classes))
        g = input_gradient(model, PointCloud(pts), "cross_entropy", y)
        fd = fd_input_gradient(model, pts, y)
        ok = np.isfinite(fd)
        assert ok.mean() > 0.95
        worst = max(worst, np.abs(g - fd)[ok].max() / np.abs(fd[ok]).max())
    assert worst < 1e-3


def test_negated_loss_gradient_is_exact_negation():
    model, pts = random_model(1), np.random.default_rng(1).normal(size=(30, 3))
    a = model.input_gradient(pts, 2, "cross_entropy")
    b = model.input_gradient(pts, 2, "negated_cross_entropy")
    np.testing.assert_array_equal(b, -a)


def test_points_outside_every_pool_get_zero_gradient():
    model = random_model(2)
    pts = np.random.default_rng(2).normal(size=(200, 3))
    pts[5] = 0.0  # near the centroid: never an extreme along any channel
    g = model.input_gradient(pts, 0)
    h = pts
    for W, b in model.point_layers:
        h = np.maximum(h @ W + b, 0)
    selected = np.unique(h.argmax(axis=0))
    unselected = np.setdiff1d(np.arange(200), selected)
    assert len(unselected) > 0
    np.testing.assert_array_equal(g[unselected], 0.0)


def test_max_pool_tie_goes_to_lowest_index():
    model = random_model(3)
    pts = np.random.default_rng(3).normal(size=(10, 3))
    pts[7] = pts[2]  # duplicate point: identical features everywhere
    g = model.input_gradient(pts, 1)
    np.testing.assert_array_equal(g[7], 0.0)


def test_permutation_invariance_exact():
    model = random_model(4)
    rng = np.random.default_rng(4)
    pts = rng.normal(size=(64, 3))
    base = model.logits(pts)
    for _ in range(100):
        np.testing.assert_array_equal(model.logits(pts[rng.permutation(64)]), base)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 50))
def test_permutation_invariance_property(seed, n):
    rng = np.random.default_rng(seed)
    model = random_model(seed % 7)
    pts = rng.normal(size=(n, 3))
    np.testing.assert_array_equal(model.logits(pts[rng.permutation(n)]), model.logits(pts))


def test_zero_weight_model_outputs_biases():
    model = VictimModel.init(3)
    bias = np.array([0.5, -1.0, 2.0])
    layers = [(np.zeros_like(W), np.zeros_like(b)) for W, b in model.layers]
    layers[-1] = (layers[-1][0], bias)
    model.set_layers(layers)
    np.testing.assert_array_equal(forward(model, np.random.default_rng(0).normal(size=(5, 3))), bias)


def test_batch_logits_match_single():
    model = random_model(5)
    X = np.random.default_rng(5).normal(size=(4, 20, 3))
    np.testing.assert_allclose(model.logits_batch(X), np.stack([model.logits(x) for x in X]), rtol=1e-13)


def test_input_width_mismatch():
    model = random_model(6)
    with pytest.raises(ShapeMismatch):
        model.logits(np.zeros((5, 2)).reshape(5, 2))


def test_parameter_gradients_match_finite_differences():
    model = random_model(7, k=3)
    rng = np.random.default_rng(7)
    X, y = rng.normal(size=(3, 15, 3)), np.array([0, 2, 1])
    _, grads, _ = model.loss_and_grads(X, y)
    layers = model.layers
    for li in (0, 2, len(layers) - 1):
        W, b = layers[li]
        for idx in [(0, 0), (W.shape[0] - 1, W.shape[1] - 1)]:
            old = W[idx]
            W[idx] = old + 1e-6
            up = model.loss_and_grads(X, y)[0]
            W[idx] = old - 1e-6
            down = model.loss_and_grads(X, y)[0]
            W[idx] = old
            assert grads[li][0][idx] == pytest.approx((up - down) / 2e-6, rel=1e-4, abs=1e-8)


def test_training_reaches_high_accuracy(trained):
    model, clouds, hist = trained
    assert hist.accuracy[-1] >= 0.99
    assert accuracy(model, clouds) >= 0.99
    held_out = toy_dataset(per_class=5, n=128, seed=99)
    assert accuracy(model, [PointCloud(c.points, c.label, c.id) for c in held_out]) >= 0.9
    for W, b in model.layers:
        assert np.all(np.isfinite(W)) and np.all(np.isfinite(b))


def test_training_loss_mostly_decreases(trained):
    _, _, hist = trained
    ups = np.sum(np.diff(hist.loss) > 0)
    assert ups <= 0.2 * (len(hist.loss) - 1)
    assert hist.loss[-1] < hist.loss[0]


def test_training_deterministic():
    clouds = toy_dataset(per_class=3, n=64)
    cfg = TrainConfig(epochs=2, seed=3, points_per_cloud=32)
    a, ha = train(VictimModel.init(3, seed=1), clouds, cfg)
    b, hb = train(VictimModel.init(3, seed=1), clouds, cfg)
    assert ha.loss == hb.loss
    for (W1, b1), (W2, b2) in zip(a.layers, b.layers):
        np.testing.assert_array_equal(W1, W2)
        np.testing.assert_array_equal(b1, b2)


def test_training_momentum_optimizer_runs():
    clouds = toy_dataset(per_class=3, n=64)
    model, hist = train(VictimModel.init(3), clouds, TrainConfig(epochs=2, optimizer="momentum", lr=1e-3))
    assert len(hist.loss) == 2 and np.all(np.isfinite(hist.loss))


def test_training_rejects_single_class():
    clouds = [c for c in toy_dataset(per_class=3, n=64) if c.label == 0]
    with pytest.raises(ValueError):
        train(VictimModel.init(3), clouds)


def test_training_divergence_raises():
    clouds = toy_dataset(per_class=2, n=32)
    model = VictimModel.init(3)
    model.set_layers([(W * 1e300, b) for W, b in model.layers])
    with pytest.raises(NonFiniteLoss):
        train(model, clouds, TrainConfig(epochs=1, data_init=False))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")


def test_save_load_round_trip(tmp_path, trained):
    model = trained[0]
    path = tmp_path / "m.p2sw"
    model.save(path, meta={"note": "x"})
    back = VictimModel.load(path)
    pts = np.random.default_rng(8).normal(size=(77, 3))
    np.testing.assert_array_equal(back.logits(pts), model.logits(pts))


def test_saved_header_layout(tmp_path):
    model = VictimModel.init(5)
    path = tmp_path / "m.p2sw"
    model.save(path)
    raw = path.read_bytes()
    assert raw[:4] == b"P2SW"
    hlen = int.from_bytes(raw[4:8], "little")
    import json

    header = json.loads(raw[8 : 8 + hlen])
    assert header["role"] == "victim" and header["version"] == 1
    assert header["meta"]["point_widths"] == [3, 32, 64, 128]
    assert header["meta"]["head_widths"] == [128, 64, 5]
    shapes = [tuple(a["shape"]) for a in header["arrays"]]
    assert shapes[0] == (3, 32) and shapes[-1] == (5,)
    n_values = sum(int(np.prod(s)) for s in shapes)
    assert len(raw) == 8 + hlen + 8 * n_values
    first = np.frombuffer(raw[8 + hlen : 8 + hlen + 8 * 96], dtype="<f8").reshape(3, 32)
    np.testing.assert_array_equal(first, model.point_layers[0][0])


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "m.p2sw"
    VictimModel.init(3).save(path)
    data = path.read_bytes()
    path.write_bytes(data[:-9])
    with pytest.raises(FormatError):
        VictimModel.load(path)


def test_header_shape_mismatch_rejected(tmp_path):
    model = VictimModel.init(3)
    path = tmp_path / "m.p2sw"
    weights.save(path, model.named_arrays(), "victim", {"point_widths": [3, 32, 64, 128], "head_widths": [128, 64, 4], "num_classes": 4})
    with pytest.raises(FormatError):
        VictimModel.load(path)
