"""Masked-trajectory CVAE: encoder, Gaussian posterior, one-shot decoder.

Agents are flattened to rows (B sequences x N agents); the encoder runs a
shared per-agent GRU over time and one self-attention layer across the agents
of each sequence, so it is permutation-equivariant.  The latent adapter
(see adapter.py) is inserted on the per-agent latent by default, or on the
encoder's time tokens with ``insertion="encoder"``.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import adapter as adapter_mod
from . import tape as tp
from .data import SceneSequence

ROLE_VOCAB = ("ball", "player")
TEAM_VOCAB = ("offense", "defense", "none")

ADAPTER_VARIANTS = ("token_wise", "feature_wise", "no_gating", "bypass")
CONTRASTIVE_VARIANTS = ("hierarchical", "role_only", "domain_only", "shared_feature", "off")


@dataclass
class ModelConfig:
    d_model: int = 32
    d_z: int = 16
    n_heads: int = 4            # encoder agent-attention heads
    adapter_heads: int = 4
    d_p: int = 16               # contrastive projection dim
    insertion: str = "latent"   # latent | encoder
    t_steps: int | None = None  # bound to the dataset at fit time

    def validate(self) -> None:
        if self.insertion not in ("latent", "encoder"):
            raise ValueError(f"unknown insertion point {self.insertion!r}")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must divide by n_heads")
        if self.token_dim % self.adapter_heads:
            raise ValueError("adapter token dim must divide by adapter_heads")
        for f in ("d_model", "d_z", "d_p"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")

    @property
    def token_dim(self) -> int:
        """Width of the tokens the adapter conditions (d_z on the latent path,
        d_model on the encoder's time tokens)."""
        return self.d_z if self.insertion == "latent" else self.d_model


def _param_rng(seed: int, name: str) -> np.random.Generator:
    # keyed by name so a parameter's init does not depend on which other
    # parameter groups exist (variants add/remove groups)
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def _linear(params, seed, name, din, dout, zero=False):
    if zero:
        params[f"{name}.w"] = np.zeros((din, dout))
    else:
        s = 1.0 / np.sqrt(din)
        params[f"{name}.w"] = _param_rng(seed, name).uniform(-s, s, (din, dout))
    params[f"{name}.b"] = np.zeros(dout)


def init_params(cfg: ModelConfig, n_domains: int, adapter_variant: str,
                contrastive_variant: str, seed: int) -> dict[str, np.ndarray]:
    """Create exactly the parameter groups the configured variants can reach."""
    cfg.validate()
    if cfg.t_steps is None:
        raise ValueError("t_steps must be set before init_params")
    if adapter_variant not in ADAPTER_VARIANTS:
        raise ValueError(f"unknown adapter variant {adapter_variant!r}")
    if contrastive_variant not in CONTRASTIVE_VARIANTS:
        raise ValueError(f"unknown contrastive variant {contrastive_variant!r}")
    d, dz = cfg.d_model, cfg.d_z
    p: dict[str, np.ndarray] = {}
    _linear(p, seed, "enc.in_proj", 3, d)
    p["enc.gru.w_ih"] = _param_rng(seed, "enc.gru.w_ih").uniform(
        -1 / np.sqrt(d), 1 / np.sqrt(d), (3 * d, d))
    p["enc.gru.w_hh"] = _param_rng(seed, "enc.gru.w_hh").uniform(
        -1 / np.sqrt(d), 1 / np.sqrt(d), (3 * d, d))
    p["enc.gru.b_ih"] = np.zeros(3 * d)
    p["enc.gru.b_hh"] = np.zeros(3 * d)
    p["enc.team.table"] = _param_rng(seed, "enc.team.table").normal(0, 0.02, (len(TEAM_VOCAB), d))
    for nm in ("enc.attn.q", "enc.attn.k", "enc.attn.v", "enc.attn.o"):
        _linear(p, seed, nm, d, d)
    _linear(p, seed, "post.mu", d, dz)
    _linear(p, seed, "post.logvar", d, dz)
    _linear(p, seed, "cond", d, d)
    if adapter_variant != "bypass":
        tok = cfg.token_dim
        p["adapter.role.table"] = _param_rng(seed, "adapter.role.table").normal(
            0, 0.02, (len(ROLE_VOCAB), tok))
        p["adapter.domain.table"] = _param_rng(seed, "adapter.domain.table").normal(
            0, 0.02, (n_domains, tok))
        for nm in ("adapter.attn.q", "adapter.attn.k", "adapter.attn.v"):
            _linear(p, seed, nm, tok, tok)
        _linear(p, seed, "adapter.attn.o", tok, tok)
        if adapter_variant in ("token_wise", "feature_wise"):
            _linear(p, seed, "adapter.gate.hidden", 2 * tok, tok)
            # zero init so the gate opens at exactly 1/2
            _linear(p, seed, "adapter.gate.out", tok, tok, zero=True)
    if contrastive_variant in ("hierarchical", "role_only"):
        _linear(p, seed, "heads.role", dz, cfg.d_p)
    if contrastive_variant in ("hierarchical", "domain_only"):
        _linear(p, seed, "heads.domain", dz, cfg.d_p)
    _linear(p, seed, "dec.fuse", dz + d, d)
    _linear(p, seed, "dec.out", d, 2 * cfg.t_steps)
    return p


# --- batching ----------------------------------------------------------------


@dataclass
class Batch:
    """B sequences x N agents flattened to B*N rows for the shared encoder."""
    x_vis: np.ndarray        # (B, N, T, 2) visible part (missing entries zeroed)
    mask: np.ndarray         # (B, N, T)
    y: np.ndarray            # (B, N, T, 2) complete target
    anchor: np.ndarray       # (B*N, 2) last observed position per agent
    role_ids: np.ndarray     # (B*N,)
    team_ids: np.ndarray     # (B*N,)
    domain_ids: np.ndarray   # (B*N,)
    b: int
    n: int
    t: int


def make_batch(sequences: Sequence[SceneSequence], masks: Sequence[np.ndarray],
               domain_vocab: Sequence[str]) -> Batch:
    b = len(sequences)
    n, t = sequences[0].n_agents, sequences[0].t_steps
    y = np.stack([s.X for s in sequences])
    mask = np.stack(list(masks))
    if mask.shape != (b, n, t):
        raise ValueError(f"mask stack shape {mask.shape} != {(b, n, t)}")
    x_vis = y * mask[..., None]
    roles, teams, doms = [], [], []
    dom_index = {d: i for i, d in enumerate(domain_vocab)}
    for s in sequences:
        if s.n_agents != n or s.t_steps != t:
            raise ValueError("sequences in a batch must share N and T")
        if s.domain not in dom_index:
            raise KeyError(f"domain {s.domain!r} not in model vocabulary {list(domain_vocab)}")
        roles.extend(ROLE_VOCAB.index(r) for r in s.roles)
        teams.extend(TEAM_VOCAB.index(tm) for tm in s.team)
        doms.extend([dom_index[s.domain]] * n)
    last_obs = t - 1 - np.argmax(mask[..., ::-1] > 0, axis=-1)        # (B, N)
    anchor = np.take_along_axis(y, last_obs[..., None, None], axis=2)
    return Batch(x_vis, mask, y, anchor.reshape(b * n, 2), np.asarray(roles),
                 np.asarray(teams), np.asarray(doms), b, n, t)


# --- forward pieces ------------------------------------------------------------


def _affine(leaves, name, x):
    return tp.matmul(x, leaves[f"{name}.w"]) + leaves[f"{name}.b"]


def encode(leaves, tape, batch: Batch, cfg: ModelConfig,
           adapter_variant: str = "bypass"):
    """Masked trajectories -> per-agent summary h (B*N, d_model).

    Returns (h, time_tokens); with ``insertion="encoder"`` the adapter is
    applied to the (B*N, T, d_model) time tokens before summarizing and
    time_tokens is the adapter output, else time_tokens is None.
    """
    b, n, t = batch.b, batch.n, batch.t
    bn = b * n
    d = cfg.d_model
    feats = np.concatenate([batch.x_vis, batch.mask[..., None]], axis=-1)
    x = tape.const(feats.reshape(bn * t, 3))
    proj = tp.reshape(_affine(leaves, "enc.in_proj", x), (bn, t, d))
    h_seq = tp.gru_sequence(proj, leaves["enc.gru.w_ih"], leaves["enc.gru.w_hh"],
                            leaves["enc.gru.b_ih"], leaves["enc.gru.b_hh"])
    adapter_out = None
    if cfg.insertion == "encoder" and adapter_variant != "bypass":
        adapter_out = adapter_mod.adapter_forward(
            leaves, h_seq, batch.role_ids, batch.domain_ids,
            adapter_variant, cfg.adapter_heads)
        h_seq = adapter_out.adapted
    h_last = tp.reshape(tp.gather(h_seq, np.array([t - 1]), axis=1), (bn, d))
    h_last = h_last + tp.gather(leaves["enc.team.table"], batch.team_ids)

    # one self-attention layer across the agents of each sequence
    nh, dh = cfg.n_heads, d // cfg.n_heads
    q = tp.transpose(tp.reshape(_affine(leaves, "enc.attn.q", h_last), (b, n, nh, dh)), (0, 2, 1, 3))
    k = tp.transpose(tp.reshape(_affine(leaves, "enc.attn.k", h_last), (b, n, nh, dh)), (0, 2, 1, 3))
    v = tp.transpose(tp.reshape(_affine(leaves, "enc.attn.v", h_last), (b, n, nh, dh)), (0, 2, 1, 3))
    scores = tp.matmul(q, tp.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    attn = tp.softmax(scores)
    ctx = tp.reshape(tp.transpose(tp.matmul(attn, v), (0, 2, 1, 3)), (bn, d))
    h = h_last + _affine(leaves, "enc.attn.o", ctx)
    return h, adapter_out


def posterior(leaves, h):
    """h -> (mu, sigma) of a diagonal Gaussian; sigma = exp(logvar / 2) > 0."""
    mu = _affine(leaves, "post.mu", h)
    logvar = _affine(leaves, "post.logvar", h)
    sigma = tp.exp(logvar * 0.5)
    return mu, sigma


def reparameterize(mu, sigma, eps):
    """z = mu + sigma * eps with eps a constant draw; gradients reach mu and
    sigma only."""
    return mu + sigma * eps


def condition(leaves, h):
    return _affine(leaves, "cond", h)


def decode(leaves, z, cond, cfg: ModelConfig, anchor):
    """(B*N, d_z) latent + (B*N, d_model) condition -> (B*N, T, 2) trajectory.

    The head emits per-step deltas which are accumulated from each agent's
    last observed position (`anchor`, a (B*N, 1, 2) constant): absolute
    placement comes for free and the network only models motion."""
    t = cfg.t_steps
    fused = tp.tanh(_affine(leaves, "dec.fuse", tp.concat([z, cond], axis=-1)))
    steps = tp.reshape(_affine(leaves, "dec.out", fused), (z.shape[0], t, 2))
    tri = z.tape.const(np.tril(np.ones((t, t))))   # running-sum operator
    return tp.matmul(tri, steps) + anchor


def _adapt_latent(leaves, z, batch: Batch, cfg: ModelConfig, variant: str):
    """Apply the adapter on the per-agent latent (one token per agent)."""
    if cfg.insertion != "latent" or variant == "bypass":
        return z, None
    bn = z.shape[0]
    tokens = tp.reshape(z, (bn, 1, cfg.d_z))
    out = adapter_mod.adapter_forward(leaves, tokens, batch.role_ids,
                                      batch.domain_ids, variant, cfg.adapter_heads)
    return tp.reshape(out.adapted, (bn, cfg.d_z)), out


@dataclass
class ForwardOut:
    tape: tp.Tape
    leaves: dict
    h: object
    mu: object
    sigma: object
    z: object
    z_adapted: object
    adapter_out: object
    cond: object
    y_post: object          # (B*N, T, 2) posterior-path decode
    samples: list           # K prior-path decodes, same shape
    eps: np.ndarray


def forward(params: dict, batch: Batch, cfg: ModelConfig, adapter_variant: str,
            k_samples: int, rng: np.random.Generator,
            eps_post: np.ndarray | None = None) -> ForwardOut:
    """Posterior path plus K prior-path samples sharing the condition features."""
    tape = tp.Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    h, enc_adapter = encode(leaves, tape, batch, cfg, adapter_variant)
    mu, sigma = posterior(leaves, h)
    cond = condition(leaves, h)
    bn = batch.b * batch.n
    if eps_post is None:
        eps_post = rng.standard_normal((bn, cfg.d_z))
    z = reparameterize(mu, sigma, tape.const(eps_post))
    z_adapted, adapter_out = _adapt_latent(leaves, z, batch, cfg, adapter_variant)
    anc = tape.const(batch.anchor[:, None, :])
    y_post = decode(leaves, z_adapted, cond, cfg, anc)
    samples = []
    for _ in range(k_samples):
        z_k = tape.const(rng.standard_normal((bn, cfg.d_z)))
        z_k_ad, _ = _adapt_latent(leaves, z_k, batch, cfg, adapter_variant)
        samples.append(decode(leaves, z_k_ad, cond, cfg, anc))
    return ForwardOut(tape, leaves, h, mu, sigma, z, z_adapted,
                      adapter_out or enc_adapter, cond, y_post, samples, eps_post)


def objective_from_leaves(leaves: dict, batch: Batch, cfg: ModelConfig,
                          adapter_variant: str, contrastive_variant: str,
                          weights, eps_post: np.ndarray,
                          eps_priors: Sequence[np.ndarray]):
    """Full training objective on an existing tape; eps draws are explicit so
    the same graph can be replayed (training, gradient checking, resume)."""
    from . import contrastive as contrastive_mod
    from . import losses as losses_mod
    tape = next(iter(leaves.values())).tape
    h, enc_adapter = encode(leaves, tape, batch, cfg, adapter_variant)
    mu, sigma = posterior(leaves, h)
    cond = condition(leaves, h)
    z = reparameterize(mu, sigma, tape.const(eps_post))
    z_adapted, _ = _adapt_latent(leaves, z, batch, cfg, adapter_variant)
    anc = tape.const(batch.anchor[:, None, :])
    y_post = decode(leaves, z_adapted, cond, cfg, anc)
    samples = []
    for e in eps_priors:
        z_k, _ = _adapt_latent(leaves, tape.const(e), batch, cfg, adapter_variant)
        samples.append(decode(leaves, z_k, cond, cfg, anc))
    hier = None
    if contrastive_variant != "off":
        z_r, z_d = contrastive_mod.embeddings_for_variant(
            leaves, z_adapted, contrastive_variant)
        hier = contrastive_mod.hierarchical_loss(
            z_r, z_d, batch.role_ids.tolist(), batch.domain_ids.tolist(),
            weights.temperature, weights.domain_balance, contrastive_variant)
    bn = batch.b * batch.n
    return losses_mod.total_loss(
        y_post, samples, batch.y.reshape(bn, batch.t, 2),
        batch.mask.reshape(bn, batch.t).astype(float), mu, sigma, hier,
        batch.b, batch.n, batch.t, weights)


def objective(params: dict, batch: Batch, cfg: ModelConfig, adapter_variant: str,
              contrastive_variant: str, weights, eps_post: np.ndarray,
              eps_priors: Sequence[np.ndarray]):
    """Fresh-tape objective over numpy params: (tape, leaves, LossBreakdown)."""
    tape = tp.Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    bd = objective_from_leaves(leaves, batch, cfg, adapter_variant,
                               contrastive_variant, weights, eps_post, eps_priors)
    return tape, leaves, bd


def objective_plain_cvae(params: dict, batch: Batch, cfg: ModelConfig, weights,
                         eps_post: np.ndarray, eps_priors: Sequence[np.ndarray]):
    """Objective along forward_plain_cvae: no adapter or contrastive stages."""
    from . import losses as losses_mod
    tape = tp.Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    h, _ = encode(leaves, tape, batch, cfg, "bypass")
    mu, sigma = posterior(leaves, h)
    cond = condition(leaves, h)
    z = reparameterize(mu, sigma, tape.const(eps_post))
    anc = tape.const(batch.anchor[:, None, :])
    y_post = decode(leaves, z, cond, cfg, anc)
    samples = [decode(leaves, tape.const(e), cond, cfg, anc) for e in eps_priors]
    bn = batch.b * batch.n
    bd = losses_mod.total_loss(
        y_post, samples, batch.y.reshape(bn, batch.t, 2),
        batch.mask.reshape(bn, batch.t).astype(float), mu, sigma, None,
        batch.b, batch.n, batch.t, weights)
    return tape, leaves, bd


def forward_plain_cvae(params: dict, batch: Batch, cfg: ModelConfig,
                       k_samples: int, rng: np.random.Generator,
                       eps_post: np.ndarray | None = None) -> ForwardOut:
    """Reference CVAE path with the adapter and contrastive stages absent.

    Kept separate so the bypass/off configuration can be checked against a
    build that never touches those modules.
    """
    tape = tp.Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    h, _ = encode(leaves, tape, batch, cfg, "bypass")
    mu, sigma = posterior(leaves, h)
    cond = condition(leaves, h)
    bn = batch.b * batch.n
    if eps_post is None:
        eps_post = rng.standard_normal((bn, cfg.d_z))
    z = reparameterize(mu, sigma, tape.const(eps_post))
    anc = tape.const(batch.anchor[:, None, :])
    y_post = decode(leaves, z, cond, cfg, anc)
    samples = []
    for _ in range(k_samples):
        z_k = tape.const(rng.standard_normal((bn, cfg.d_z)))
        samples.append(decode(leaves, z_k, cond, cfg, anc))
    return ForwardOut(tape, leaves, h, mu, sigma, z, z, None, cond,
                      y_post, samples, eps_post)


def sample_completions(params: dict, batch: Batch, cfg: ModelConfig,
                       adapter_variant: str, k: int, seed: int) -> np.ndarray:
    """K prior-path trajectories (K, B, N, T, 2); deterministic per seed."""
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    tape = tp.Tape()
    leaves = {kk: tape.leaf(v) for kk, v in params.items()}
    h, _ = encode(leaves, tape, batch, cfg, adapter_variant)
    cond = condition(leaves, h)
    bn = batch.b * batch.n
    anc = tape.const(batch.anchor[:, None, :])
    out = np.empty((k, batch.b, batch.n, batch.t, 2))
    for i in range(k):
        z_k = tape.const(rng.standard_normal((bn, cfg.d_z)))
        z_ad, _ = _adapt_latent(leaves, z_k, batch, cfg, adapter_variant)
        y = decode(leaves, z_ad, cond, cfg, anc)
        out[i] = y.value.reshape(batch.b, batch.n, batch.t, 2)
    return out


def posterior_embeddings(params: dict, batch: Batch, cfg: ModelConfig,
                         adapter_variant: str):
    """Deterministic per-agent adapted latent at the posterior mean (eps = 0)."""
    tape = tp.Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    h, _ = encode(leaves, tape, batch, cfg, adapter_variant)
    mu, _ = posterior(leaves, h)
    z_adapted, _ = _adapt_latent(leaves, mu, batch, cfg, adapter_variant)
    return tape, leaves, z_adapted
