"""Training objective: masked-ELBO + visible reconstruction + winner-take-all
diversity + contrastive term.

    total = elbo + rec_weight * rec + wta_weight * wta + contrast_weight * hier
    elbo  = MSE over missing entries + kl_weight * KL(q || N(0, I))

MSE terms normalize by the count of (agent, step) entries on their side of the
mask; KL sums over latent dims and averages over agent rows.  WTA scores each
of K prior samples per sequence and backpropagates through the best one only
(ties break to the lowest sample index).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tape as tp


@dataclass(frozen=True)
class LossWeights:
    kl_weight: float = 0.1
    rec_weight: float = 1.0
    wta_weight: float = 1.0
    contrast_weight: float = 0.1
    domain_balance: float = 1.0
    temperature: float = 0.1

    def __post_init__(self):
        for f in ("kl_weight", "rec_weight", "wta_weight", "contrast_weight",
                  "domain_balance"):
            if getattr(self, f) < 0:
                raise ValueError(f"{f} must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


def kl_gaussian_standard(mu, sigma):
    """KL(N(mu, diag sigma^2) || N(0, I)), summed over dims, mean over rows."""
    if np.any(sigma.value <= 0):
        raise tp.DomainError("sigma must be positive for the KL term")
    var = tp.square(sigma)
    rows = mu.shape[0]
    per = tp.square(mu) + var - 1.0 - tp.log(var)
    return tp.reduce_sum(per) * (0.5 / rows)


def _masked_mse(pred, target: np.ndarray, mask: np.ndarray, side: str):
    """Sum of squared coordinate error over masked (agent, step) entries,
    divided by the entry count.  mask is 1 where the entry counts."""
    count = float(mask.sum())
    if count == 0:
        warnings.warn(f"no {side} entries in batch; that MSE term is 0")
        return pred.tape.const(0.0)
    err = tp.square(pred - target) * mask[..., None]
    return tp.reduce_sum(err) * (1.0 / count)


def elbo_loss(y_hat, y: np.ndarray, miss_mask: np.ndarray, mu, sigma,
              kl_weight: float):
    """Missing-region MSE plus weighted KL; y_hat/(y, miss_mask) flat rows."""
    return _masked_mse(y_hat, y, miss_mask, "missing") + \
        kl_gaussian_standard(mu, sigma) * kl_weight


def rec_loss(y_hat, y: np.ndarray, vis_mask: np.ndarray):
    """Visible-region MSE on the same prediction."""
    return _masked_mse(y_hat, y, vis_mask, "visible")


def wta_loss(samples, y: np.ndarray, b: int, n: int, t: int):
    """min over K samples of per-sequence full-trajectory MSE, mean over B.

    samples: K tensors of shape (B*N, T, 2).  Returns (loss, winner indices);
    the graph routes gradients through each sequence's winner only.
    """
    k = len(samples)
    if k == 0:
        raise ValueError("wta_loss needs at least one sample")
    norm = 1.0 / (n * t)
    per_seq = []
    for s in samples:
        err = tp.reshape(tp.square(s - y), (b, n * t * 2))
        per_seq.append(tp.reduce_sum(err, axis=1) * norm)   # (B,)
    errs = np.stack([p.value for p in per_seq])             # (K, B)
    winners = np.argmin(errs, axis=0)                       # lowest index wins ties
    loss = None
    for ki in range(k):
        pick = (winners == ki).astype(float)
        if not pick.any():
            continue
        term = tp.reduce_sum(per_seq[ki] * pick)
        loss = term if loss is None else loss + term
    return loss * (1.0 / b), winners


@dataclass
class LossBreakdown:
    total: object          # scalar tensor, ready for backward()
    elbo: float
    rec: float
    wta: float
    hier: float
    total_value: float
    winners: np.ndarray

    def check_consistency(self, w: LossWeights, tol: float = 1e-12) -> None:
        recon = self.elbo + w.rec_weight * self.rec + w.wta_weight * self.wta \
            + w.contrast_weight * self.hier
        if abs(recon - self.total_value) > tol * max(1.0, abs(self.total_value)):
            raise AssertionError(
                f"loss breakdown drifted: parts -> {recon}, total {self.total_value}")


def total_loss(y_post, samples, y_flat: np.ndarray, mask_flat: np.ndarray,
               mu, sigma, hier, b: int, n: int, t: int,
               w: LossWeights) -> LossBreakdown:
    """Assemble the published objective from the forward pieces.

    hier may be None (contrastive off), which omits the term from the graph.
    """
    elbo_t = elbo_loss(y_post, y_flat, 1.0 - mask_flat, mu, sigma, w.kl_weight)
    rec_t = rec_loss(y_post, y_flat, mask_flat)
    wta_t, winners = wta_loss(samples, y_flat, b, n, t)
    total = elbo_t + rec_t * w.rec_weight + wta_t * w.wta_weight
    hier_v = 0.0
    if hier is not None:
        total = total + hier * w.contrast_weight
        hier_v = float(hier.value)
    out = LossBreakdown(total, float(elbo_t.value), float(rec_t.value),
                        float(wta_t.value), hier_v, float(total.value), winners)
    out.check_consistency(w)
    return out
