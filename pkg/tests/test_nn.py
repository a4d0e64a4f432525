import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stereocorr import nn
from stereocorr.errors import ModelFormatError
from stereocorr.geometry import FeatureTuple


# ---------------------------------------------------------------------------
# independent scalar oracle: plain Python lists, no numpy
# ---------------------------------------------------------------------------

def _oracle_ln(vec, g, b, eps=nn.LN_EPS):
    mu = sum(vec) / len(vec)
    var = sum((v - mu) ** 2 for v in vec) / len(vec)
    s = math.sqrt(var + eps)
    return [(v - mu) / s * gi + bi for v, gi, bi in zip(vec, g, b)]


def _oracle_gelu(x):
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def _oracle_mlp(vec, w1, b1, w2, b2):
    hidden = [_oracle_gelu(sum(vec[i] * w1[i][j] for i in range(len(vec))) + b1[j]) for j in range(len(b1))]
    return [sum(hidden[j] * w2[j][k] for j in range(len(hidden))) + b2[k] for k in range(len(b2))]


def oracle_forward(params, cfg, x):
    P = {k: np.asarray(v).tolist() for k, v in params.items()}
    T, D = cfg.tokens, cfg.embed_dim
    h = [[x[t] * P["embed.w"][t][d] + P["embed.b"][t][d] for d in range(D)] for t in range(T)]
    for i in range(cfg.layers):
        q = f"layers.{i}."
        u = [_oracle_ln(h[t], P[q + "ln1.g"], P[q + "ln1.b"]) for t in range(T)]
        for d in range(D):
            col = [u[t][d] for t in range(T)]
            mixed = _oracle_mlp(col, P[q + "tok.w1"], P[q + "tok.b1"], P[q + "tok.w2"], P[q + "tok.b2"])
            for t in range(T):
                h[t][d] += mixed[t]
        for t in range(T):
            v = _oracle_ln(h[t], P[q + "ln2.g"], P[q + "ln2.b"])
            mixed = _oracle_mlp(v, P[q + "ch.w1"], P[q + "ch.b1"], P[q + "ch.w2"], P[q + "ch.b2"])
            h[t] = [a + m for a, m in zip(h[t], mixed)]
    mean = [sum(h[t][d] for t in range(T)) / T for d in range(D)]
    K = cfg.head_outputs
    return [sum(mean[d] * P["head.w"][d][k] for d in range(D)) + P["head.b"][k] for k in range(K)]


def randomized(cfg, seed, scale=0.5):
    model = nn.init_model(cfg, seed)
    rng = np.random.default_rng(seed + 1000)
    for k, v in model.params.items():
        model.params[k] = v + rng.normal(0.0, scale, v.shape)
    return model


# ---------------------------------------------------------------------------


def test_init_is_deterministic_and_zero_headed():
    cfg = nn.MixerConfig()
    a, b = nn.init_model(cfg, 5), nn.init_model(cfg, 5)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    assert not np.array_equal(a.params["embed.w"], nn.init_model(cfg, 6).params["embed.w"])
    assert np.all(a.params["head.w"] == 0) and np.all(a.params["head.b"] == 0)
    x = np.random.default_rng(0).normal(size=(20, 4))
    assert np.all(nn.forward(a, x) == 0.0)


def test_init_weight_bounds():
    cfg = nn.MixerConfig(embed_dim=8, token_hidden=6, channel_hidden=5)
    m = nn.init_model(cfg, 0)
    assert np.abs(m.params["embed.w"]).max() <= 1.0
    assert np.abs(m.params["layers.0.tok.w1"]).max() <= math.sqrt(1 / 4)
    assert np.abs(m.params["layers.1.ch.w2"]).max() <= math.sqrt(1 / 5)
    assert np.all(m.params["layers.0.ch.b1"] == 0)
    assert np.all(m.params["layers.0.ln1.g"] == 1)


def test_gate_head_starts_uncertain():
    m = nn.init_model(nn.MixerConfig(head_outputs=2), 1)
    logits = nn.forward(m, FeatureTuple(0.3, 0.2, 0.1, 0.1))
    np.testing.assert_array_equal(logits, [0.0, 0.0])
    p = np.exp(logits) / np.exp(logits).sum()
    np.testing.assert_array_equal(p, [0.5, 0.5])


def averaging_model():
    cfg = nn.MixerConfig(embed_dim=1, layers=0)
    m = nn.init_model(cfg, 0)
    m.params["embed.w"][:] = 1.0
    m.params["embed.b"][:] = 0.0
    m.params["head.w"][:] = 1.0
    m.params["head.b"][:] = 0.0
    return m


def test_degenerate_config_averages_inputs():
    m = averaging_model()
    x = np.array([0.4, -1.2, 3.0, 0.25])
    assert nn.forward(m, x)[0] == pytest.approx(x.mean(), rel=1e-15)


def test_degenerate_config_input_gradient():
    m = averaging_model()
    _, cache = nn.forward_batch(m, np.array([[0.4, -1.2, 3.0, 0.25]]))
    _, dx = nn.backward_batch(m, cache, np.array([[1.0]]), want_input=True)
    np.testing.assert_allclose(dx, [[0.25, 0.25, 0.25, 0.25]], rtol=1e-15)


def test_constant_weights_against_oracle():
    cfg = nn.MixerConfig(embed_dim=2, token_hidden=2, channel_hidden=2, layers=2)
    m = nn.init_model(cfg, 0)
    for k, v in m.params.items():
        if nn.is_decayed(k):
            m.params[k] = np.full_like(v, 0.1)
        elif not k.endswith(".g"):
            m.params[k] = np.zeros_like(v)
    x = [0.5, 0.5, 0.5, 0.5]
    expected = oracle_forward(m.params, cfg, x)[0]
    # every token embedding is constant across channels, so each LayerNorm emits
    # zeros and only the residual path reaches the head: 0.1 * (0.05 + 0.05)
    assert expected == pytest.approx(0.01, rel=1e-12)
    assert nn.forward(m, np.array(x))[0] == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("cfg", [
    nn.MixerConfig(embed_dim=2, token_hidden=2, channel_hidden=2, layers=2),
    nn.MixerConfig(embed_dim=3, token_hidden=5, channel_hidden=4, layers=1, head_outputs=2),
    nn.MixerConfig(),
])
def test_random_weights_against_oracle(cfg):
    m = randomized(cfg, 11)
    rng = np.random.default_rng(2)
    for _ in range(3):
        x = rng.normal(size=4)
        np.testing.assert_allclose(nn.forward(m, x), oracle_forward(m.params, cfg, list(x)), rtol=1e-10, atol=1e-12)


def test_forward_is_pure():
    m = randomized(nn.MixerConfig(), 3)
    x = np.random.default_rng(0).normal(size=(16, 4))
    a = nn.forward(m, x)
    b = nn.forward(m, x)
    np.testing.assert_array_equal(a, b)


def test_zero_upstream_gives_zero_gradients():
    m = randomized(nn.MixerConfig(), 4)
    g = nn.backward(m, np.ones(4), np.zeros(1))
    assert set(g) == set(m.params)
    assert all(np.all(v == 0) for v in g.values())


def finite_difference_max_rel_error(model, X, upstream, eps=1e-5, probes=None, rng=None):
    _, cache = nn.forward_batch(model, X)
    grads = nn.backward_batch(model, cache, upstream)

    def loss():
        return float(np.sum(nn.forward_batch(model, X)[0] * upstream))

    worst = 0.0
    for name, p in model.params.items():
        indices = list(np.ndindex(p.shape))
        if probes is not None and len(indices) > probes:
            pick = rng.choice(len(indices), size=probes, replace=False)
            indices = [indices[i] for i in pick]
        for idx in indices:
            orig = p[idx]
            p[idx] = orig + eps
            hi = loss()
            p[idx] = orig - eps
            lo = loss()
            p[idx] = orig
            fd = (hi - lo) / (2 * eps)
            an = grads[name][idx]
            denom = max(abs(fd), abs(an), 1e-6)
            worst = max(worst, abs(fd - an) / denom)
    return worst


def test_backward_matches_finite_differences_every_parameter():
    cfg = nn.MixerConfig(embed_dim=3, token_hidden=4, channel_hidden=5, layers=2, head_outputs=2)
    m = randomized(cfg, 7)
    rng = np.random.default_rng(1)
    X = rng.normal(size=(3, 4))
    up = rng.normal(size=(3, 2))
    assert finite_difference_max_rel_error(m, X, up) < 1e-4


def test_input_gradient_matches_finite_differences():
    m = randomized(nn.MixerConfig(embed_dim=4, token_hidden=3, channel_hidden=3), 8)
    X = np.random.default_rng(5).normal(size=(2, 4))
    up = np.array([[1.0], [-0.5]])
    _, cache = nn.forward_batch(m, X)
    _, dx = nn.backward_batch(m, cache, up, want_input=True)
    eps = 1e-6
    for i in np.ndindex(X.shape):
        Xp, Xm = X.copy(), X.copy()
        Xp[i] += eps
        Xm[i] -= eps
        fd = (np.sum(nn.forward(m, Xp) * up) - np.sum(nn.forward(m, Xm) * up)) / (2 * eps)
        assert fd == pytest.approx(dx[i], rel=1e-5, abs=1e-8)


def test_layer_norm_output_is_standardized():
    rng = np.random.default_rng(9)
    x = rng.normal(0.0, 3.0, size=(50, 4, 32)) + rng.normal(size=(50, 4, 1))
    x[0, 0] = np.linspace(-0.05, 0.05, 32)  # small but non-constant token
    y, _ = nn._layer_norm(x, np.ones(32), np.zeros(32))
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-6)
    v = x.var(axis=-1)
    np.testing.assert_allclose(y.var(axis=-1), v / (v + nn.LN_EPS), rtol=1e-9)


def test_gelu_is_exact_erf_form():
    for x in (-3.0, -0.5, 0.0, 0.7, 4.0):
        assert nn.gelu(np.array(x)) == pytest.approx(_oracle_gelu(x), rel=1e-15, abs=1e-300)
        fd = (_oracle_gelu(x + 1e-6) - _oracle_gelu(x - 1e-6)) / 2e-6
        assert nn.gelu_grad(np.array(x)) == pytest.approx(fd, rel=1e-7, abs=1e-9)


def grads_with_norm(norm, shape_seed=0):
    rng = np.random.default_rng(shape_seed)
    g = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=5)}
    scale = norm / nn.global_norm(g)
    return {k: v * scale for k, v in g.items()}


def test_clip_leaves_small_gradients():
    g = grads_with_norm(0.5)
    out = nn.clip_global_norm(g, 1.0)
    for k in g:
        np.testing.assert_array_equal(out[k], g[k])


def test_clip_scales_large_gradients():
    g = grads_with_norm(4.0)
    out = nn.clip_global_norm(g, 1.0)
    scale = 1.0 / nn.global_norm(g)
    for k in g:
        np.testing.assert_allclose(out[k], g[k] * scale, rtol=1e-15)
        np.testing.assert_allclose(out[k], g[k] * 0.25, rtol=1e-12)
    assert nn.global_norm(out) == pytest.approx(1.0, rel=1e-12)


def test_clip_zero_gradients():
    g = {"a": np.zeros((2, 2))}
    assert np.all(nn.clip_global_norm(g, 1.0)["a"] == 0)
    with pytest.raises(ValueError):
        nn.clip_global_norm(g, 0.0)


@settings(max_examples=100)
@given(st.floats(1e-6, 1e6), st.floats(1e-3, 1e3), st.integers(0, 1000))
def test_clip_bounds_and_is_idempotent(norm, max_norm, seed):
    g = grads_with_norm(norm, seed)
    once = nn.clip_global_norm(g, max_norm)
    twice = nn.clip_global_norm(once, max_norm)
    assert nn.global_norm(once) <= max_norm + 1e-12 * max(1.0, max_norm)
    for k in g:
        np.testing.assert_allclose(twice[k], once[k], rtol=1e-12)


def test_serialization_round_trip_is_exact():
    m = randomized(nn.MixerConfig(embed_dim=5, token_hidden=3, channel_hidden=4, head_outputs=2), 1)
    doc = json.loads(json.dumps(nn.model_to_dict(m)))
    assert doc["format_version"] == nn.FORMAT_VERSION
    back = nn.model_from_dict(doc)
    assert back.config == m.config
    for k in m.params:
        np.testing.assert_array_equal(back.params[k], m.params[k])


def test_serialization_is_row_major():
    m = nn.init_model(nn.MixerConfig(embed_dim=2, layers=0), 0)
    m.params["embed.w"] = np.arange(8, dtype=float).reshape(4, 2)
    assert nn.model_to_dict(m)["params"]["embed.w"]["data"] == [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]


def test_loading_validates_shapes_and_version():
    doc = nn.model_to_dict(nn.init_model(nn.MixerConfig(embed_dim=2), 0))
    bad = json.loads(json.dumps(doc))
    bad["params"]["head.w"]["shape"] = [3, 1]
    with pytest.raises(ModelFormatError, match="head.w"):
        nn.model_from_dict(bad)
    bad = json.loads(json.dumps(doc))
    bad["params"]["embed.b"]["data"].pop()
    with pytest.raises(ModelFormatError):
        nn.model_from_dict(bad)
    bad = json.loads(json.dumps(doc))
    bad["format_version"] = 99
    with pytest.raises(ModelFormatError):
        nn.model_from_dict(bad)
    bad = json.loads(json.dumps(doc))
    del bad["params"]["layers.1.ch.w1"]
    with pytest.raises(ModelFormatError, match="missing"):
        nn.model_from_dict(bad)


def test_config_validation():
    with pytest.raises(ValueError):
        nn.MixerConfig(tokens=5)
    with pytest.raises(ValueError):
        nn.MixerConfig(embed_dim=0)
