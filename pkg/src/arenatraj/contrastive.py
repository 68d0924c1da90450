"""Hierarchical contrastive objective over adapted latents.

Two linear heads project each agent latent into separate role and domain
spaces (L2-normalized).  Within a space, InfoNCE pulls same-label rows
together against all other rows:

    l(i, j) = -log( exp(s_ij / tau) / sum_{k != i} exp(s_ik / tau) )

averaged over ordered same-label pairs.  The combined loss is
L_role + domain_balance * L_domain; a space whose batch carries fewer than
two distinct labels contributes nothing (and says so once via warnings).
"""

from __future__ import annotations

import warnings

import numpy as np

from . import tape as tp

VARIANTS = ("hierarchical", "role_only", "domain_only", "shared_feature", "off")


def project(leaves, z, which: str):
    """Linear head + L2 normalization -> unit rows in the role/domain space."""
    if which not in ("role", "domain"):
        raise ValueError(f"unknown projection space {which!r}")
    out = tp.matmul(z, leaves[f"heads.{which}.w"]) + leaves[f"heads.{which}.b"]
    return tp.l2_normalize(out)


def select_pairs(labels) -> list[tuple[int, int]]:
    """All ordered (i, j), i != j, with equal labels."""
    labels = list(labels)
    return [(i, j) for i in range(len(labels)) for j in range(len(labels))
            if i != j and labels[i] == labels[j]]


def info_nce(emb, labels, temperature: float):
    """Mean InfoNCE over ordered same-label pairs; emb rows must be unit-norm.

    The per-pair loss is always >= 0 because the denominator includes the
    positive pair's own term; this is asserted on the computed values.
    """
    if temperature <= 0:
        raise tp.DomainError(f"temperature must be > 0, got {temperature}")
    b = emb.shape[0]
    if len(labels) != b:
        raise tp.ShapeError(f"{len(labels)} labels for {b} embeddings")
    pairs = select_pairs(labels)
    if not pairs:
        warnings.warn("info_nce: no same-label pair in batch, returning 0")
        return emb.tape.const(0.0)
    logits = tp.matmul(emb, tp.transpose(emb)) * (1.0 / temperature)
    off = 1.0 - np.eye(b)
    # detached row-max over k != i keeps exp() in range without touching grads
    row_max = np.max(np.where(off > 0, logits.value, -np.inf), axis=1, keepdims=True)
    shifted = tp.exp(logits - row_max) * off
    log_denom = tp.log(tp.reduce_sum(shifted, axis=1, keepdims=True)) + row_max
    pair_w = np.zeros((b, b))
    for i, j in pairs:
        pair_w[i, j] = 1.0 / len(pairs)
    per_pair = log_denom - logits              # (B, B) valid at i != j
    vals = per_pair.value[pair_w > 0]
    assert vals.min() >= -1e-9, f"negative pair loss {vals.min()}"
    return tp.reduce_sum(per_pair * pair_w)


def embeddings_for_variant(leaves, z_adapted, variant: str):
    """(role-space rows, domain-space rows) as the variant defines them.

    shared_feature drops the heads and scores both levels on the normalized
    latent itself; off yields nothing.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown contrastive variant {variant!r}")
    if variant == "off":
        return None, None
    if variant == "shared_feature":
        shared = tp.l2_normalize(z_adapted)
        return shared, shared
    z_role = project(leaves, z_adapted, "role") if variant in ("hierarchical", "role_only") else None
    z_dom = project(leaves, z_adapted, "domain") if variant in ("hierarchical", "domain_only") else None
    return z_role, z_dom


def _term(emb, labels, temperature: float, space: str):
    if len(set(labels)) < 2:
        warnings.warn(f"contrastive {space} term skipped: single-label batch")
        return None
    return info_nce(emb, labels, temperature)


def hierarchical_loss(z_role, z_domain, roles, domains, temperature: float,
                      domain_balance: float, variant: str):
    """Combine the role- and domain-space InfoNCE terms per the variant.

    Returns None for variant "off" (the caller then omits the term entirely,
    keeping that path bitwise-identical to a build without this module).
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown contrastive variant {variant!r}")
    if variant == "off":
        return None
    role_t = _term(z_role, roles, temperature, "role") if variant in (
        "hierarchical", "shared_feature", "role_only") else None
    dom_t = _term(z_domain, domains, temperature, "domain") if variant in (
        "hierarchical", "shared_feature", "domain_only") else None
    if role_t is not None and dom_t is not None:
        return role_t + dom_t * domain_balance
    if role_t is not None:
        return role_t
    if dom_t is not None:
        return dom_t * domain_balance
    tape = (z_role if z_role is not None else z_domain).tape
    return tape.const(0.0)
