import numpy as np
import pytest

from fcclsim import losses as L
from fcclsim.errors import ParameterError, ShapeError, StateError
from fcclsim.gradcheck import FD_RTOL, numeric_grad, relative_error
from fcclsim.models import (
    AdamState,
    ClientModel,
    Layer,
    Snapshot,
    adam_step,
    apply_gradients,
    backward,
    build_scenario_models,
    forward,
    init_model,
    load_model,
    save_model,
)


def toy_model(seed=0, activation="tanh"):
    # 4 -> 6 -> 5 extractor, 3 classes: 30 + 36 + 18 = 84 parameters
    return init_model([4, 6, 5], 3, np.random.default_rng(seed), activation)


def test_forward_zero_weights():
    layers = [Layer(np.zeros((3, 4)), np.zeros((1, 4)), "tanh")]
    m = ClientModel(layers, np.zeros((4, 2)), np.zeros((1, 2)))
    h, z, _ = forward(m, np.ones((5, 3)))
    assert np.array_equal(h, np.zeros((5, 4)))
    assert np.array_equal(z, np.zeros((5, 2)))


def test_forward_identity_layer(rng):
    m = ClientModel([Layer(np.eye(3), np.zeros((1, 3)), "linear")], np.ones((3, 2)), np.zeros((1, 2)))
    x = rng.normal(size=(4, 3))
    h, _, _ = forward(m, x)
    assert np.array_equal(h, x)


def test_forward_layerwise_oracle(rng):
    m = toy_model(3)
    x = rng.normal(size=(7, 4))
    a = x
    for layer in m.layers:
        a = np.tanh(a @ layer.weight + layer.bias)
    z = a @ m.classifier_weight + m.classifier_bias
    h, z_out, _ = forward(m, x)
    assert np.max(np.abs(h - a)) <= 1e-12
    assert np.max(np.abs(z_out - z)) <= 1e-12


def test_forward_shape_error():
    with pytest.raises(ShapeError):
        forward(toy_model(), np.zeros((2, 5)))


def test_backward_zero_upstream():
    m = toy_model()
    _, _, cache = forward(m, np.ones((3, 4)))
    grads = backward(m, cache, np.zeros((3, 3)), np.zeros((3, 5)))
    assert all(not np.any(g) for g in grads.values())


def test_backward_grad_h_only_leaves_classifier_untouched(rng):
    m = toy_model()
    _, _, cache = forward(m, rng.normal(size=(3, 4)))
    grads = backward(m, cache, None, rng.normal(size=(3, 5)))
    assert not np.any(grads["classifier.weight"]) and not np.any(grads["classifier.bias"])
    assert np.any(grads["extractor.0.weight"])


def _flat_check(model, loss_of_model, grads):
    params = model.params()
    for name, p in params.items():
        def f(v, name=name):
            trial = model.copy()
            ps = trial.params()
            ps[name] = v
            trial.set_params(ps)
            return loss_of_model(trial)

        assert relative_error(grads[name], numeric_grad(f, p)) < FD_RTOL, name


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("activation", ["tanh", "relu"])
def test_full_network_ce_gradient(seed, activation):
    r = np.random.default_rng(seed)
    m = toy_model(seed, activation)
    assert sum(p.size for p in m.params().values()) <= 200
    x, y = r.normal(size=(6, 4)), r.integers(0, 3, 6)
    _, z, cache = forward(m, x)
    grads = backward(m, cache, L.ce_loss(z, y).grads["z"])
    _flat_check(m, lambda mm: L.ce_loss(forward(mm, x)[1], y).value, grads)


def test_full_network_feature_and_logit_injection(rng):
    m = toy_model(1)
    x = rng.normal(size=(6, 4))
    zbar = rng.normal(size=(6, 3))
    s_avg = L.instance_similarity(rng.normal(size=(6, 2)), 0.5)

    def loss(mm):
        h, z, _ = forward(mm, x)
        return L.collaborative_loss(z, zbar, h, s_avg, 0.0051, 3.0, 0.5).value

    h, z, cache = forward(m, x)
    res = L.collaborative_loss(z, zbar, h, s_avg, 0.0051, 3.0, 0.5)
    grads = backward(m, cache, res.grads["z_local"], res.grads["h_local"])
    _flat_check(m, loss, grads)


def test_stale_cache_rejected(rng):
    m = toy_model()
    _, z, cache = forward(m, rng.normal(size=(3, 4)))
    apply_gradients(m, AdamState(), {k: np.ones_like(v) for k, v in m.params().items()})
    with pytest.raises(StateError):
        backward(m, cache, np.zeros_like(z))
    with pytest.raises(StateError):
        backward(toy_model(), forward(toy_model(), np.ones((2, 4)))[2], np.zeros((2, 3)))


def test_adam_zero_gradient_keeps_params():
    p = {"w": np.array([[1.0, -2.0]])}
    out = adam_step(AdamState(), p, {"w": np.zeros((1, 2))})
    assert np.array_equal(out["w"], p["w"])


def test_adam_first_step_closed_form():
    g = np.array([[0.5, -3.0, 1e-3]])
    state = AdamState(lr=0.001)
    out = adam_step(state, {"w": np.zeros((1, 3))}, {"w": g})
    # bias-corrected first step: m_hat = g, v_hat = g^2
    np.testing.assert_allclose(out["w"], -0.001 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    assert state.step == 1
    adam_step(state, out, {"w": g})
    assert state.step == 2


def test_adam_shape_error():
    with pytest.raises(ShapeError):
        adam_step(AdamState(), {"w": np.zeros((2, 2))}, {"w": np.zeros((1, 2))})


def test_adam_deterministic(rng):
    def run():
        m = toy_model(4)
        st = AdamState()
        x, y = np.random.default_rng(2).normal(size=(8, 4)), np.arange(8) % 3
        for _ in range(10):
            _, z, cache = forward(m, x)
            apply_gradients(m, st, backward(m, cache, L.ce_loss(z, y).grads["z"]))
        return m.params()

    a, b = run(), run()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_build_scenario_models():
    models = build_scenario_models([[16, 32, 8], [16, 48, 12]], 5, seed=3)
    assert [m.feature_dim for m in models] == [8, 12]
    assert all(m.class_count == 5 for m in models)
    again = build_scenario_models([[16, 32, 8], [16, 48, 12]], 5, seed=3)
    assert all(np.array_equal(a, b) for m1, m2 in zip(models, again) for a, b in zip(m1.params().values(), m2.params().values()))
    with pytest.raises(ParameterError):
        build_scenario_models([], 5, 0)


def test_sub_seeds_give_distinct_clients():
    a, b = build_scenario_models([[8, 8, 4], [8, 8, 4]], 3, seed=0)
    wa, wb = a.layers[0].weight.ravel(), b.layers[0].weight.ravel()
    # independent U(-l, l) draws: correlation near 0, far from identical
    assert abs(np.corrcoef(wa, wb)[0, 1]) < 0.5
    assert not np.array_equal(wa, wb)


def test_he_uniform_bounds():
    m = init_model([10, 20], 3, np.random.default_rng(0))
    assert np.max(np.abs(m.layers[0].weight)) <= np.sqrt(6 / 10)
    assert not np.any(m.layers[0].bias)


def test_snapshot_frozen_and_bitwise(rng):
    m = toy_model(2)
    x = rng.normal(size=(5, 4))
    snap = Snapshot.of(m, epoch_tag=3)
    assert np.array_equal(forward(snap, x)[1], forward(m, x)[1])
    with pytest.raises(ValueError):
        snap.model.layers[0].weight[0, 0] = 1.0
    before = forward(snap, x)[1]
    apply_gradients(m, AdamState(), {k: np.ones_like(v) for k, v in m.params().items()})
    assert np.array_equal(forward(snap, x)[1], before)
    assert snap.epoch_tag == 3


def test_heterogeneous_models_share_loss_shapes(rng):
    models = build_scenario_models([[6, 5, 3], [6, 9, 7]], 4, seed=1)
    x = rng.normal(size=(10, 6))
    outs = [forward(m, x) for m in models]
    zbar = np.mean([z for _, z, _ in outs], axis=0)
    s_avg = np.mean([L.instance_similarity(h).s for h, _, _ in outs], axis=0)
    for m, (h, z, cache) in zip(models, outs):
        res = L.collaborative_loss(z, zbar, h, s_avg)
        grads = backward(m, cache, res.grads["z_local"], res.grads["h_local"])
        assert grads["extractor.1.weight"].shape == m.layers[1].weight.shape


def test_save_load_roundtrip(tmp_path, rng):
    m = toy_model(5, "relu")
    path = tmp_path / "model.txt"
    save_model(m, path)
    assert path.read_text().startswith("FCCLSIM-MODEL 1\n")
    back = load_model(path)
    assert all(np.array_equal(a, b) for a, b in zip(m.params().values(), back.params().values()))
    assert [l.activation for l in back.layers] == ["relu", "relu"]
    (tmp_path / "bad.txt").write_text("nope\n")
    with pytest.raises(StateError):
        load_model(tmp_path / "bad.txt")
