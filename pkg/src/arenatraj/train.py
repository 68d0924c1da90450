"""Training loop: Adam with step-decay, seeded epoch pipeline, checkpoints.

Determinism contract: every random draw (shuffle order, corruption masks,
latent noise) comes from a SeedSequence keyed by (seed, stream tag, absolute
epoch, index), so a run resumed from a checkpoint at epoch E replays exactly
the batches an uninterrupted run would see from E onward.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import model as model_mod
from .data import Dataset, MaskSpec, is_normalized, make_mask
from .kernels import adam_update
from .losses import LossWeights
from .model import ADAPTER_VARIANTS, CONTRASTIVE_VARIANTS, ModelConfig
from .tape import NonFiniteError, ShapeError

CKPT_FORMAT = "arenatraj-ckpt-v1"
LOG_COLUMNS = ("epoch", "lr", "elbo", "rec", "wta", "hier", "total")

# SeedSequence stream tags
_MASKS, _NOISE, _SHUFFLE = 1, 2, 3


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, checkpoint_path=None):
        self.epoch = epoch
        self.checkpoint_path = checkpoint_path
        at = f"; last good checkpoint at {checkpoint_path}" if checkpoint_path else ""
        super().__init__(f"training diverged (non-finite loss) in epoch {epoch}{at}")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr0: float = 0.001
    decay_factor: float = 0.9
    decay_every: int = 20
    seed: int = 0
    k_train: int = 5
    adapter_variant: str = "token_wise"
    contrastive_variant: str = "hierarchical"
    insertion: str = "latent"
    kl_weight: float = 0.1
    rec_weight: float = 1.0
    wta_weight: float = 1.0
    contrast_weight: float = 0.1
    domain_balance: float = 1.0
    temperature: float = 0.1
    mask_pattern: str = "random"     # infill-style corruption at train time
    mask_ratio: float = 0.3
    mask_horizon: int | None = None
    checkpoint_every: int = 0    # 0 = final checkpoint only

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be > 0")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must be in (0, 1]")
        if self.decay_every < 1:
            raise ValueError("decay_every must be >= 1")
        if self.k_train < 1:
            raise ValueError("k_train must be >= 1")
        if self.adapter_variant not in ADAPTER_VARIANTS:
            raise ValueError(f"unknown adapter_variant {self.adapter_variant!r}")
        if self.contrastive_variant not in CONTRASTIVE_VARIANTS:
            raise ValueError(f"unknown contrastive_variant {self.contrastive_variant!r}")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")
        self.weights()  # range-checks the loss weights
        MaskSpec(self.mask_pattern, self.mask_ratio, self.mask_horizon)

    def weights(self) -> LossWeights:
        return LossWeights(self.kl_weight, self.rec_weight, self.wta_weight,
                           self.contrast_weight, self.domain_balance,
                           self.temperature)


def load_config(path) -> tuple[TrainConfig, ModelConfig]:
    """JSON -> (TrainConfig, ModelConfig); unknown keys are errors, the
    optional "model" object carries ModelConfig fields."""
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ValueError("config must be a JSON object")
    model_raw = raw.pop("model", {})
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    known_m = {f.name for f in fields(ModelConfig)}
    unknown_m = set(model_raw) - known_m
    if unknown_m:
        raise ValueError(f"unknown model config keys: {sorted(unknown_m)}")
    tcfg = TrainConfig(**raw)
    mcfg = ModelConfig(**model_raw)
    mcfg.insertion = tcfg.insertion
    tcfg.validate()
    return tcfg, mcfg


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """lr0 * decay_factor^(epoch // decay_every); epoch is 0-based."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_every)


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def fresh(cls, params: dict) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()})


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float):
    """One bias-corrected Adam update over every parameter, fixed name order.

    Non-finite gradients skip the whole step (parameters and moments stay
    put) and report the offending names.
    """
    bad = sorted(k for k, g in grads.items() if not np.all(np.isfinite(g)))
    if bad:
        return bad
    state.step += 1
    for k in sorted(params):
        adam_update(params[k], grads[k], state.m[k], state.v[k], state.step, lr)
    return []


def effective_contrastive(variant: str, n_domains: int) -> str:
    """Single-domain data can never pair domains, so domain-side terms (and
    their parameters) drop out up front."""
    if n_domains >= 2:
        return variant
    if variant == "hierarchical":
        return "role_only"
    if variant == "domain_only":
        return "off"
    return variant


def epoch_batches(dataset: Dataset, tcfg: TrainConfig, mcfg: ModelConfig,
                  epoch: int, domain_vocab):
    """Deterministic batch stream for one absolute epoch.

    Yields (batch, eps_post, eps_priors).  Masks are keyed by the sequence's
    stable dataset index, noise by position in the shuffled stream, so the
    stream depends only on (seed, epoch).
    """
    n = len(dataset.sequences)
    n_agents = dataset.sequences[0].n_agents
    t = dataset.sequences[0].t_steps
    spec = MaskSpec(tcfg.mask_pattern, tcfg.mask_ratio, tcfg.mask_horizon)
    order = np.random.default_rng(
        np.random.SeedSequence([tcfg.seed, _SHUFFLE, epoch])).permutation(n)
    for pos, start in enumerate(range(0, n, tcfg.batch_size)):
        idxs = order[start:start + tcfg.batch_size]
        seqs = [dataset.sequences[i] for i in idxs]
        masks = [make_mask(spec, n_agents, t, np.random.default_rng(
            np.random.SeedSequence([tcfg.seed, _MASKS, epoch, int(i)])))
            for i in idxs]
        batch = model_mod.make_batch(seqs, masks, domain_vocab)
        rng = np.random.default_rng(
            np.random.SeedSequence([tcfg.seed, _NOISE, epoch, pos]))
        bn = batch.b * batch.n
        eps_post = rng.standard_normal((bn, mcfg.d_z))
        eps_priors = [rng.standard_normal((bn, mcfg.d_z))
                      for _ in range(tcfg.k_train)]
        yield batch, eps_post, eps_priors


@dataclass
class FitResult:
    params: dict
    opt: OptimizerState
    log_rows: list
    domain_vocab: list
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    contrastive_used: str
    epochs_done: int
    incidents: list = field(default_factory=list)


def _write_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r["epoch"], repr(r["lr"]), repr(r["elbo"]), repr(r["rec"]),
                        repr(r["wta"]), repr(r["hier"]), repr(r["total"])])


def fit(dataset: Dataset, tcfg: TrainConfig, mcfg: ModelConfig | None = None,
        log_path=None, ckpt_path=None, resume_from=None) -> FitResult:
    """Train on a normalized dataset per the configured recipe.

    Writes one log row per epoch (epoch numbers are 1-based in the log; the
    schedule uses 0-based epochs).  Divergence aborts with the last good
    checkpoint retained on disk when a checkpoint path is given.
    """
    tcfg.validate()
    if not dataset.sequences:
        raise ValueError("fit needs a non-empty dataset")
    if not is_normalized(dataset):
        raise ValueError("fit expects normalized data; call normalize() first")
    mcfg = mcfg or ModelConfig()
    mcfg.insertion = tcfg.insertion
    t_steps = dataset.sequences[0].t_steps
    if mcfg.t_steps is None:
        mcfg.t_steps = t_steps
    elif mcfg.t_steps != t_steps:
        raise ValueError(f"model built for T={mcfg.t_steps}, data has T={t_steps}")

    domain_vocab = dataset.domains()
    used_contrastive = effective_contrastive(tcfg.contrastive_variant,
                                             len(domain_vocab))
    if used_contrastive != tcfg.contrastive_variant:
        warnings.warn(
            f"contrastive variant {tcfg.contrastive_variant!r} reduced to "
            f"{used_contrastive!r}: dataset has a single domain")

    start_epoch = 0
    log_rows: list[dict] = []
    if resume_from is not None:
        ck = checkpoint_load(resume_from)
        _check_resume_compat(ck, tcfg, mcfg, domain_vocab, used_contrastive)
        params = ck["params"]
        opt = OptimizerState(ck["adam_m"], ck["adam_v"], ck["adam_step"])
        start_epoch = ck["epochs_done"]
        log_rows = list(ck["log_rows"])
    else:
        params = model_mod.init_params(mcfg, len(domain_vocab),
                                       tcfg.adapter_variant, used_contrastive,
                                       tcfg.seed)
        opt = OptimizerState.fresh(params)

    weights = tcfg.weights()
    incidents: list[str] = []
    last_good = {k: v.copy() for k, v in params.items()}
    last_good_opt = OptimizerState({k: v.copy() for k, v in opt.m.items()},
                                   {k: v.copy() for k, v in opt.v.items()}, opt.step)
    covered: set[str] = set()

    def save(path, epochs_done):
        checkpoint_save(path, params, opt, tcfg, mcfg, domain_vocab,
                        used_contrastive, epochs_done, log_rows)

    for epoch in range(start_epoch, tcfg.epochs):
        lr = lr_schedule(epoch, tcfg)
        sums = {k: 0.0 for k in ("elbo", "rec", "wta", "hier", "total")}
        n_batches = 0
        try:
            for batch, eps_post, eps_priors in epoch_batches(
                    dataset, tcfg, mcfg, epoch, domain_vocab):
                tape, leaves, bd = model_mod.objective(
                    params, batch, mcfg, tcfg.adapter_variant, used_contrastive,
                    weights, eps_post, eps_priors)
                if not np.isfinite(bd.total_value):
                    raise NonFiniteError(f"total loss {bd.total_value}")
                tape.backward(bd.total)
                if epoch == start_epoch:
                    covered |= {k for k in params if tape.reached(leaves[k])}
                grads = {k: leaves[k].grad for k in params}
                bad = adam_step(params, grads, opt, lr)
                if bad:
                    incidents.append(
                        f"epoch {epoch + 1}: skipped step, non-finite grads in {bad}")
                    warnings.warn(incidents[-1])
                sums["elbo"] += bd.elbo
                sums["rec"] += bd.rec
                sums["wta"] += bd.wta
                sums["hier"] += bd.hier
                sums["total"] += bd.total_value
                n_batches += 1
        except NonFiniteError as err:
            incidents.append(f"epoch {epoch + 1}: diverged: {err}")
            params.clear()
            params.update(last_good)
            if ckpt_path is not None:
                checkpoint_save(ckpt_path, last_good, last_good_opt, tcfg, mcfg,
                                domain_vocab, used_contrastive, epoch, log_rows)
            if log_path is not None:
                _write_log(log_path, log_rows)
            raise TrainingDiverged(epoch + 1, ckpt_path) from err

        if epoch == start_epoch and not resume_from:
            orphans = sorted(set(params) - covered)
            assert not orphans, (
                f"optimizer covers parameters the loss never reaches: {orphans}")

        row = {"epoch": epoch + 1, "lr": lr}
        row.update({k: sums[k] / n_batches for k in sums})
        log_rows.append(row)
        last_good = {k: v.copy() for k, v in params.items()}
        last_good_opt = OptimizerState({k: v.copy() for k, v in opt.m.items()},
                                       {k: v.copy() for k, v in opt.v.items()},
                                       opt.step)
        if ckpt_path and tcfg.checkpoint_every and \
                (epoch + 1) % tcfg.checkpoint_every == 0:
            save(ckpt_path, epoch + 1)
        if log_path is not None:
            _write_log(log_path, log_rows)

    if ckpt_path is not None:
        save(ckpt_path, tcfg.epochs)
    return FitResult(params, opt, log_rows, domain_vocab, mcfg, tcfg,
                     used_contrastive, tcfg.epochs, incidents)


# --- checkpoints -------------------------------------------------------------


def _arr_to_json(a: np.ndarray):
    return {"shape": list(a.shape), "data": a.reshape(-1).tolist()}


def _arr_from_json(obj) -> np.ndarray:
    return np.asarray(obj["data"], dtype=np.float64).reshape(obj["shape"])


def checkpoint_save(path, params, opt: OptimizerState, tcfg: TrainConfig,
                    mcfg: ModelConfig, domain_vocab, contrastive_used: str,
                    epochs_done: int, log_rows) -> None:
    doc = {
        "format": CKPT_FORMAT,
        "params": {k: _arr_to_json(v) for k, v in sorted(params.items())},
        "adam_m": {k: _arr_to_json(v) for k, v in sorted(opt.m.items())},
        "adam_v": {k: _arr_to_json(v) for k, v in sorted(opt.v.items())},
        "adam_step": opt.step,
        "train_config": asdict(tcfg),
        "model_config": asdict(mcfg),
        "domain_vocab": list(domain_vocab),
        "contrastive_used": contrastive_used,
        "epochs_done": epochs_done,
        "log_rows": list(log_rows),
    }
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(doc, fh)
    tmp.replace(path)


def checkpoint_load(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    got = doc.get("format")
    if got != CKPT_FORMAT:
        raise ValueError(f"checkpoint format {got!r} != expected {CKPT_FORMAT!r}")
    for key in ("params", "adam_m", "adam_v"):
        doc[key] = {k: _arr_from_json(v) for k, v in doc[key].items()}
    return doc


def restore_into(template: dict, loaded: dict) -> None:
    """Copy checkpoint arrays into an architecture's parameter dict; any
    mismatch is reported by parameter path."""
    missing = sorted(set(template) - set(loaded))
    extra = sorted(set(loaded) - set(template))
    if missing or extra:
        raise ShapeError(
            f"checkpoint/architecture disagree: missing {missing}, unexpected {extra}")
    for k, v in template.items():
        lv = loaded[k]
        if lv.shape != v.shape:
            raise ShapeError(f"{k}: checkpoint shape {lv.shape} vs model {v.shape}")
        v[...] = lv


def _check_resume_compat(ck: dict, tcfg: TrainConfig, mcfg: ModelConfig,
                         domain_vocab, used_contrastive: str) -> None:
    saved = dict(ck["train_config"])
    now = asdict(tcfg)
    saved.pop("epochs"), now.pop("epochs")
    if saved != now:
        diff = sorted(k for k in now if saved.get(k) != now[k])
        raise ValueError(f"resume config differs from checkpoint in {diff}")
    if ck["model_config"] != asdict(mcfg):
        raise ValueError("resume model config differs from checkpoint")
    if list(ck["domain_vocab"]) != list(domain_vocab):
        raise ValueError("resume dataset domains differ from checkpoint")
    if ck["contrastive_used"] != used_contrastive:
        raise ValueError("resume contrastive reduction differs from checkpoint")
    if ck["epochs_done"] > tcfg.epochs:
        raise ValueError(
            f"checkpoint already at epoch {ck['epochs_done']} > target {tcfg.epochs}")
