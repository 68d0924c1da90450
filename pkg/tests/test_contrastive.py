import numpy as np
import pytest

from arenatraj import contrastive, tape as tp
from arenatraj.gradcheck import grad_check
from arenatraj.model import ModelConfig, init_params


def _unit_rows(a):
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


def test_select_pairs_is_ordered_and_label_matched():
    assert contrastive.select_pairs([1, 1, 2]) == [(0, 1), (1, 0)]
    assert contrastive.select_pairs(["a", "b", "a", "a"]) == [
        (0, 2), (0, 3), (2, 0), (2, 3), (3, 0), (3, 2)]
    assert contrastive.select_pairs([1, 2, 3]) == []


def test_two_row_same_label_batch_scores_exactly_zero():
    t = tp.Tape()
    emb = t.leaf(_unit_rows(np.random.default_rng(0).normal(size=(2, 16))))
    loss = contrastive.info_nce(emb, [7, 7], temperature=0.1)
    assert loss.value == 0.0


def test_identical_rows_score_log_of_batch_minus_one():
    m = 5
    t = tp.Tape()
    row = _unit_rows(np.random.default_rng(1).normal(size=(1, 16)))
    emb = t.leaf(np.repeat(row, m, axis=0))
    loss = contrastive.info_nce(emb, [0] * m, temperature=0.5)
    assert abs(loss.value - np.log(m - 1)) < 1e-9


def test_orthogonal_negatives_closed_form():
    # two identical positives plus two orthogonal negatives, tau = 1:
    # denominator per anchor is e^1 + e^0 + e^0, so each pair costs
    # -log(e / (e + 2))
    t = tp.Tape()
    e = np.eye(16)
    emb = t.leaf(np.stack([e[0], e[0], e[1], e[2]]))
    loss = contrastive.info_nce(emb, [0, 0, 1, 2], temperature=1.0)
    expect = -np.log(np.e / (np.e + 2.0))
    assert abs(loss.value - expect) < 1e-9


def test_pair_losses_are_never_negative():
    rng = np.random.default_rng(2)
    for _ in range(50):
        b = int(rng.integers(2, 9))
        t = tp.Tape()
        emb = t.leaf(_unit_rows(rng.normal(size=(b, 8))))
        labels = rng.integers(0, 3, b).tolist()
        if not contrastive.select_pairs(labels):
            continue
        loss = contrastive.info_nce(emb, labels, temperature=0.2)
        assert np.isfinite(loss.value)


def test_bad_temperature_and_label_count_are_rejected():
    t = tp.Tape()
    emb = t.leaf(_unit_rows(np.ones((2, 4))))
    with pytest.raises(tp.DomainError, match="temperature"):
        contrastive.info_nce(emb, [0, 0], temperature=0.0)
    with pytest.raises(tp.ShapeError):
        contrastive.info_nce(emb, [0, 0, 0], temperature=1.0)


def test_batch_without_pairs_warns_and_returns_zero():
    t = tp.Tape()
    emb = t.leaf(_unit_rows(np.random.default_rng(3).normal(size=(3, 4))))
    with pytest.warns(UserWarning, match="no same-label pair"):
        loss = contrastive.info_nce(emb, [0, 1, 2], temperature=1.0)
    assert loss.value == 0.0


def test_single_domain_batch_reduces_to_the_role_term():
    t = tp.Tape()
    rng = np.random.default_rng(4)
    z_role = t.leaf(_unit_rows(rng.normal(size=(6, 8))))
    z_dom = t.leaf(_unit_rows(rng.normal(size=(6, 8))))
    roles = [0, 1, 0, 1, 0, 1]
    doms = ["indoor"] * 6
    with pytest.warns(UserWarning, match="domain term skipped"):
        combined = contrastive.hierarchical_loss(
            z_role, z_dom, roles, doms, temperature=0.1, domain_balance=1.0,
            variant="hierarchical")
    solo = contrastive.info_nce(z_role, roles, temperature=0.1)
    assert combined.value == solo.value


def test_role_term_backward_leaves_domain_inputs_untouched():
    t = tp.Tape()
    rng = np.random.default_rng(5)
    z_role = t.leaf(_unit_rows(rng.normal(size=(4, 8))))
    z_dom = t.leaf(_unit_rows(rng.normal(size=(4, 8))))
    loss = contrastive.hierarchical_loss(
        z_role, z_dom, [0, 0, 1, 1], ["a", "b", "a", "b"], temperature=0.1,
        domain_balance=1.0, variant="role_only")
    t.backward(loss)
    assert np.all(z_dom.grad == 0.0)
    assert np.any(z_role.grad != 0.0)


def test_off_variant_contributes_no_graph_term():
    assert contrastive.hierarchical_loss(None, None, [], [], 0.1, 1.0, "off") is None


def test_shared_feature_uses_one_normalized_space():
    t = tp.Tape()
    z = t.leaf(np.random.default_rng(6).normal(size=(4, 8)))
    zr, zd = contrastive.embeddings_for_variant({}, z, "shared_feature")
    assert zr is zd
    np.testing.assert_allclose(np.linalg.norm(zr.value, axis=-1), 1.0, atol=1e-12)


def test_embeddings_for_variant_respects_head_presence():
    cfg = ModelConfig(d_model=8, d_z=8, n_heads=2, adapter_heads=2, d_p=6, t_steps=4)
    t = tp.Tape()
    params = init_params(cfg, 2, "bypass", "role_only", seed=0)
    leaves = {k: t.leaf(v) for k, v in params.items()}
    z = t.leaf(np.random.default_rng(7).normal(size=(4, 8)))
    zr, zd = contrastive.embeddings_for_variant(leaves, z, "role_only")
    assert zd is None and zr.shape == (4, 6)
    assert not any(k.startswith("heads.domain") for k in params)


@pytest.mark.parametrize("variant", ["hierarchical", "role_only", "domain_only",
                                     "shared_feature"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_hierarchical_loss_gradients_match_finite_differences(variant, seed):
    cfg = ModelConfig(d_model=8, d_z=8, n_heads=2, adapter_heads=2, d_p=6, t_steps=4)
    params = dict(init_params(cfg, 3, "bypass", variant, seed=seed))
    rng = np.random.default_rng(seed + 50)
    params["z"] = rng.normal(size=(6, cfg.d_z))
    roles = [0, 1, 0, 1, 0, 1]
    doms = [0, 0, 1, 1, 2, 2]

    def f(leaves):
        zr, zd = contrastive.embeddings_for_variant(leaves, leaves["z"], variant)
        return contrastive.hierarchical_loss(zr, zd, roles, doms, 0.2, 0.7, variant)

    rep = grad_check(f, params, max_coords_per_param=8, seed=seed)
    assert rep.passed, rep.worst
