"""Role- and domain-conditioned latent adapter.

Each agent row gets a query built from its role and domain embeddings; the
query cross-attends over that row's tokens (a single latent token, or the
encoder's T time tokens) and a gate blends the attended summary back into the
tokens:

    alpha = sigmoid(GateNet([z, z_cond]))        token_wise
    z_adapted = alpha * z_cond + (1 - alpha) * z

Variants: feature_wise keeps the raw GateNet output as the gate (no squash),
no_gating returns z_cond itself, bypass returns the input tokens untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as tp

VARIANTS = ("token_wise", "feature_wise", "no_gating", "bypass")


@dataclass
class AdapterOutput:
    adapted: object            # (B*N, S, d) tokens fed downstream
    conditioned: object        # (B*N, S, d) attended summary broadcast over S
    gate: object               # (B*N, S, d) blend weights, None unless gated
    attention: object          # (B*N, H, 1, S) attention weights, None on bypass


def embed_labels(leaves, role_ids: np.ndarray, domain_ids: np.ndarray):
    """Sum of role and domain embedding rows -> (B*N, d) query."""
    if role_ids.shape != domain_ids.shape:
        raise tp.ShapeError(f"role ids {role_ids.shape} vs domain ids {domain_ids.shape}")
    return tp.gather(leaves["adapter.role.table"], role_ids) + \
        tp.gather(leaves["adapter.domain.table"], domain_ids)


def cross_attend(leaves, query, tokens, n_heads: int):
    """Label query attends over tokens; returns ((B*N, d) summary, weights).

    With a single token the softmax row is the exact constant 1.0, so the
    summary is exactly the projected token.
    """
    bn, s, d = tokens.shape
    if query.shape != (bn, d):
        raise tp.ShapeError(f"query {query.shape} does not match tokens {tokens.shape}")
    if d % n_heads:
        raise tp.ShapeError(f"token dim {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    q = tp.matmul(query, leaves["adapter.attn.q.w"]) + leaves["adapter.attn.q.b"]
    k = tp.matmul(tokens, leaves["adapter.attn.k.w"]) + leaves["adapter.attn.k.b"]
    v = tp.matmul(tokens, leaves["adapter.attn.v.w"]) + leaves["adapter.attn.v.b"]
    q = tp.transpose(tp.reshape(q, (bn, 1, n_heads, dh)), (0, 2, 1, 3))
    k = tp.transpose(tp.reshape(k, (bn, s, n_heads, dh)), (0, 2, 1, 3))
    v = tp.transpose(tp.reshape(v, (bn, s, n_heads, dh)), (0, 2, 1, 3))
    scores = tp.matmul(q, tp.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    weights = tp.softmax(scores)                      # (B*N, H, 1, S)
    ctx = tp.reshape(tp.matmul(weights, v), (bn, d))  # heads re-concatenated
    out = tp.matmul(ctx, leaves["adapter.attn.o.w"]) + leaves["adapter.attn.o.b"]
    return out, weights


def gate(leaves, z_tokens, z_cond, squash: bool):
    """GateNet([z, z_cond]) -> blend weights, sigmoid-squashed unless raw."""
    g_in = tp.concat([z_tokens, z_cond], axis=-1)
    hidden = tp.tanh(tp.matmul(g_in, leaves["adapter.gate.hidden.w"]) +
                     leaves["adapter.gate.hidden.b"])
    raw = tp.matmul(hidden, leaves["adapter.gate.out.w"]) + leaves["adapter.gate.out.b"]
    return tp.sigmoid(raw) if squash else raw


def adapter_forward(leaves, z_tokens, role_ids: np.ndarray, domain_ids: np.ndarray,
                    variant: str, n_heads: int) -> AdapterOutput:
    """Condition tokens on (role, domain); z_tokens is (B*N, S, d)."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown adapter variant {variant!r}")
    if z_tokens.value.ndim != 3:
        raise tp.ShapeError(f"adapter expects (rows, tokens, dim), got {z_tokens.shape}")
    if variant == "bypass":
        return AdapterOutput(adapted=z_tokens, conditioned=z_tokens,
                             gate=None, attention=None)
    bn, s, d = z_tokens.shape
    query = embed_labels(leaves, role_ids, domain_ids)
    pooled, weights = cross_attend(leaves, query, z_tokens, n_heads)
    z_cond = tp.broadcast_to(tp.reshape(pooled, (bn, 1, d)), (bn, s, d))
    if variant == "no_gating":
        return AdapterOutput(adapted=z_cond, conditioned=z_cond,
                             gate=None, attention=weights)
    alpha = gate(leaves, z_tokens, z_cond, squash=(variant == "token_wise"))
    adapted = alpha * z_cond + (1 - alpha) * z_tokens
    return AdapterOutput(adapted=adapted, conditioned=z_cond,
                         gate=alpha, attention=weights)
