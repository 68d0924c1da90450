import numpy as np
import pytest

from arenatraj import adapter, tape as tp
from arenatraj.gradcheck import grad_check
from arenatraj.model import ModelConfig, init_params


def _leaves(tape, cfg, n_domains=3, variant="token_wise", seed=0):
    params = init_params(cfg, n_domains, variant, "off", seed=seed)
    return params, {k: tape.leaf(v) for k, v in params.items()}


def _cfg(dz=8, heads=2):
    return ModelConfig(d_model=8, d_z=dz, n_heads=2, adapter_heads=heads,
                       t_steps=4)


def test_bypass_returns_input_tensor_unchanged():
    t = tp.Tape()
    z = t.leaf(np.random.default_rng(0).normal(size=(6, 1, 8)))
    out = adapter.adapter_forward({}, z, np.zeros(6, int), np.zeros(6, int),
                                  "bypass", 2)
    assert out.adapted is z
    assert out.gate is None and out.attention is None


def test_no_gating_outputs_the_conditioned_summary():
    t = tp.Tape()
    cfg = _cfg()
    _, leaves = _leaves(t, cfg, variant="no_gating")
    rng = np.random.default_rng(1)
    z = t.leaf(rng.normal(size=(5, 1, cfg.d_z)))
    roles = np.array([0, 1, 1, 0, 1])
    doms = np.array([0, 0, 1, 2, 1])
    out = adapter.adapter_forward(leaves, z, roles, doms, "no_gating", cfg.adapter_heads)
    assert out.adapted is out.conditioned
    # and equals the gated path's conditioned branch bit for bit (shared
    # parameter names are initialized identically across variants)
    t2 = tp.Tape()
    _, leaves2 = _leaves(t2, cfg, variant="token_wise")
    z2 = t2.leaf(z.value.copy())
    out2 = adapter.adapter_forward(leaves2, z2, roles, doms, "token_wise", cfg.adapter_heads)
    assert np.array_equal(out.conditioned.value, out2.conditioned.value)


def test_zero_initialized_gate_blends_at_exactly_half():
    t = tp.Tape()
    cfg = _cfg()
    _, leaves = _leaves(t, cfg, variant="token_wise")
    rng = np.random.default_rng(2)
    z = t.leaf(rng.normal(size=(4, 1, cfg.d_z)))
    roles = np.array([0, 1, 1, 1])
    doms = np.array([0, 1, 2, 0])
    out = adapter.adapter_forward(leaves, z, roles, doms, "token_wise", cfg.adapter_heads)
    assert np.all(out.gate.value == 0.5)
    expect = 0.5 * out.conditioned.value + 0.5 * z.value
    assert np.array_equal(out.adapted.value, expect)


def test_single_token_attention_weight_is_exactly_one():
    t = tp.Tape()
    cfg = _cfg()
    _, leaves = _leaves(t, cfg)
    z = t.leaf(np.random.default_rng(3).normal(size=(6, 1, cfg.d_z)))
    out = adapter.adapter_forward(leaves, z, np.zeros(6, int),
                                  np.arange(6) % 3, "token_wise", cfg.adapter_heads)
    assert out.attention.shape == (6, cfg.adapter_heads, 1, 1)
    assert np.all(out.attention.value == 1.0)


def test_token_wise_gate_is_a_convex_blend():
    t = tp.Tape()
    cfg = _cfg()
    params, leaves = _leaves(t, cfg)
    # non-trivial gate: overwrite the zero output layer
    params["adapter.gate.out.w"] = np.random.default_rng(4).normal(size=params["adapter.gate.out.w"].shape)
    leaves = {k: t.leaf(v) for k, v in params.items()}
    z = t.leaf(np.random.default_rng(5).normal(size=(5, 1, cfg.d_z)))
    out = adapter.adapter_forward(leaves, z, np.ones(5, int),
                                  np.arange(5) % 3, "token_wise", cfg.adapter_heads)
    a = out.gate.value
    assert np.all((a > 0) & (a < 1))
    blend = a * out.conditioned.value + (1 - a) * z.value
    np.testing.assert_allclose(out.adapted.value, blend, rtol=0, atol=0)


def test_feature_wise_gate_is_unsquashed():
    t = tp.Tape()
    cfg = _cfg()
    params, _ = _leaves(t, cfg, variant="feature_wise")
    params["adapter.gate.out.w"] = np.random.default_rng(6).normal(size=params["adapter.gate.out.w"].shape) * 3
    leaves = {k: t.leaf(v) for k, v in params.items()}
    z = t.leaf(np.random.default_rng(7).normal(size=(5, 1, cfg.d_z)))
    out = adapter.adapter_forward(leaves, z, np.ones(5, int),
                                  np.arange(5) % 3, "feature_wise", cfg.adapter_heads)
    assert out.gate.value.min() < 0 or out.gate.value.max() > 1


def test_multi_token_attention_rows_sum_to_one():
    t = tp.Tape()
    cfg = _cfg()
    _, leaves = _leaves(t, cfg)
    z = t.leaf(np.random.default_rng(8).normal(size=(4, 7, cfg.d_z)))
    out = adapter.adapter_forward(leaves, z, np.zeros(4, int), np.zeros(4, int),
                                  "token_wise", cfg.adapter_heads)
    assert out.attention.shape == (4, cfg.adapter_heads, 1, 7)
    np.testing.assert_allclose(out.attention.value.sum(-1), 1.0, atol=1e-12)
    assert out.adapted.shape == (4, 7, cfg.d_z)


def test_unknown_variant_and_bad_shapes_are_rejected():
    t = tp.Tape()
    cfg = _cfg()
    _, leaves = _leaves(t, cfg)
    z = t.leaf(np.zeros((3, 1, cfg.d_z)))
    with pytest.raises(ValueError, match="variant"):
        adapter.adapter_forward(leaves, z, np.zeros(3, int), np.zeros(3, int), "gated", 2)
    flat = t.leaf(np.zeros((3, cfg.d_z)))
    with pytest.raises(tp.ShapeError):
        adapter.adapter_forward(leaves, flat, np.zeros(3, int), np.zeros(3, int),
                                "token_wise", 2)
    with pytest.raises(tp.ShapeError, match="role ids"):
        adapter.embed_labels(leaves, np.zeros(3, int), np.zeros(4, int))


@pytest.mark.parametrize("variant", ["token_wise", "feature_wise", "no_gating"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_adapter_gradients_match_finite_differences(variant, seed):
    cfg = _cfg()
    params = init_params(cfg, 3, variant, "off", seed=seed)
    rng = np.random.default_rng(seed + 100)
    params = dict(params)
    params["z"] = rng.normal(size=(4, 2, cfg.d_z))
    probe = rng.normal(size=(4, 2, cfg.d_z))
    roles = rng.integers(0, 2, 4)
    doms = rng.integers(0, 3, 4)

    def f(leaves):
        out = adapter.adapter_forward(leaves, leaves["z"], roles, doms,
                                      variant, cfg.adapter_heads)
        return tp.reduce_sum(tp.square(out.adapted) * probe)

    rep = grad_check(f, params, max_coords_per_param=8, seed=seed)
    assert rep.passed, rep.worst
