"""Baselines, S2S/U2S evaluation protocols, and the ablation harness.

Baselines fill only the missing steps (visible steps pass through), so a
baseline's motion statistics approach ground truth as the mask thins.  The
default evaluation mask hides the last T/2 steps of every agent plus a random
20% of the observed prefix, seeded per sequence, so scores reflect both
prediction and imputation.
"""

from __future__ import annotations

import csv
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from itertools import product

import numpy as np

from . import metrics as metrics_mod
from . import model as model_mod
from . import train as train_mod
from .contrastive import project
from .data import Dataset, MaskSpec, make_mask, merge_unified
from .model import ModelConfig
from .tape import l2_normalize
from .train import TrainConfig

BASELINE_NAMES = ("mean", "median", "linear_fit", "ground_truth")
_EVAL_MASK_STREAM = 11


# --- baselines ---------------------------------------------------------------


def baseline_mean(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Fill missing steps with the per-agent mean of observed steps."""
    out = x.copy()
    for i in range(x.shape[0]):
        obs = mask[i] > 0
        if not obs.any():
            raise ValueError(f"agent {i} has no observed steps")
        out[i, ~obs] = x[i, obs].mean(axis=0)
    return out


def baseline_median(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Fill missing steps with the coordinate-wise median of observed steps."""
    out = x.copy()
    for i in range(x.shape[0]):
        obs = mask[i] > 0
        if not obs.any():
            raise ValueError(f"agent {i} has no observed steps")
        out[i, ~obs] = np.median(x[i, obs], axis=0)
    return out


def baseline_linear_fit(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per agent and coordinate, least-squares line over observed (t, value);
    missing steps are read off the line.  Agents with a single observation
    fall back to the mean fill with a warning."""
    out = x.copy()
    t_axis = np.arange(x.shape[1], dtype=float)
    for i in range(x.shape[0]):
        obs = mask[i] > 0
        if not obs.any():
            raise ValueError(f"agent {i} has no observed steps")
        if obs.sum() < 2:
            warnings.warn(f"linear_fit: agent {i} has <2 observations, mean fallback")
            out[i, ~obs] = x[i, obs].mean(axis=0)
            continue
        a = np.stack([t_axis[obs], np.ones(int(obs.sum()))], axis=1)
        coef, *_ = np.linalg.lstsq(a, x[i, obs], rcond=None)   # (2, 2)
        fill = np.stack([t_axis[~obs], np.ones(int((~obs).sum()))], axis=1) @ coef
        out[i, ~obs] = fill
    return out


@dataclass(frozen=True)
class BaselinePredictor:
    name: str

    def __post_init__(self):
        if self.name not in BASELINE_NAMES:
            raise ValueError(f"unknown baseline {self.name!r}; expected {BASELINE_NAMES}")

    train_domains = ()   # baselines carry no training provenance

    def predict(self, sequences, masks, k: int, seed: int) -> np.ndarray:
        """Single deterministic completion per sequence: (1, B, N, T, 2)."""
        fns = {"mean": baseline_mean, "median": baseline_median,
               "linear_fit": baseline_linear_fit,
               "ground_truth": lambda x, m: x.copy()}
        outs = [fns[self.name](s.X, m) for s, m in zip(sequences, masks)]
        return np.stack(outs)[None]


@dataclass
class ModelPredictor:
    params: dict
    model_cfg: ModelConfig
    adapter_variant: str
    contrastive_used: str
    domain_vocab: list
    train_domains: tuple

    @classmethod
    def from_fit(cls, res: train_mod.FitResult) -> "ModelPredictor":
        return cls(res.params, res.model_cfg, res.train_cfg.adapter_variant,
                   res.contrastive_used, res.domain_vocab,
                   tuple(res.domain_vocab))

    @classmethod
    def from_checkpoint(cls, path) -> "ModelPredictor":
        doc = train_mod.checkpoint_load(path)
        mcfg = ModelConfig(**doc["model_config"])
        tcfg = TrainConfig(**doc["train_config"])
        vocab = list(doc["domain_vocab"])
        template = model_mod.init_params(mcfg, len(vocab), tcfg.adapter_variant,
                                         doc["contrastive_used"], tcfg.seed)
        train_mod.restore_into(template, doc["params"])
        return cls(template, mcfg, tcfg.adapter_variant, doc["contrastive_used"],
                   vocab, tuple(vocab))

    def predict(self, sequences, masks, k: int, seed: int) -> np.ndarray:
        unseen = sorted({s.domain for s in sequences} - set(self.domain_vocab))
        if unseen:
            # an embedding table cannot look up a label it never trained on;
            # degrade to the first trained domain rather than refuse to run
            warnings.warn(f"domains {unseen} unseen at train time, "
                          f"substituting {self.domain_vocab[0]!r}")
            sequences = [replace(s, domain=self.domain_vocab[0])
                         if s.domain in unseen else s for s in sequences]
        batch = model_mod.make_batch(sequences, masks, self.domain_vocab)
        return model_mod.sample_completions(self.params, batch, self.model_cfg,
                                            self.adapter_variant, k, seed)


def get_predictor(name_or_path):
    """Baseline alias or checkpoint path -> predictor."""
    if isinstance(name_or_path, str) and name_or_path in BASELINE_NAMES:
        return BaselinePredictor(name_or_path)
    return ModelPredictor.from_checkpoint(name_or_path)


# --- protocols ---------------------------------------------------------------


@dataclass(frozen=True)
class ProtocolSpec:
    mode: str                      # S2S | U2S
    train_domains: tuple
    test_domain: str
    k: int = 20
    seed: int = 0
    mask: MaskSpec | None = None   # None -> default eval mask

    def __post_init__(self):
        if self.mode not in ("S2S", "U2S"):
            raise ValueError(f"unknown protocol mode {self.mode!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.mode == "S2S" and set(self.train_domains) != {self.test_domain}:
            raise ValueError("S2S trains and tests on the same single domain")
        if self.mode == "U2S" and len(set(self.train_domains)) < 2:
            raise ValueError("U2S needs at least two training domains")


_EVAL_PREFIX_CORRUPT = 0.2


def make_eval_mask(n_agents: int, t_steps: int, rng: np.random.Generator,
                   spec: MaskSpec | None = None) -> np.ndarray:
    """Default evaluation task: forecast the last T//2 steps from the first
    half, with a further random 20% of the observed prefix hidden so the task
    exercises imputation alongside prediction.  An explicit spec replaces the
    default entirely."""
    if spec is not None:
        return make_mask(spec, n_agents, t_steps, rng)
    horizon = t_steps // 2
    m = make_mask(MaskSpec("prediction", horizon=horizon), n_agents, t_steps, rng)
    prefix = t_steps - horizon
    m[:, :prefix][rng.random((n_agents, prefix)) < _EVAL_PREFIX_CORRUPT] = 0.0
    for i in np.flatnonzero(m.sum(axis=1) == 0):
        m[i, 0] = 1.0
    return m


def _eval_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([seed, _EVAL_MASK_STREAM, index]))


def evaluate(predictor, dataset: Dataset, protocol: ProtocolSpec,
             clip: bool = False) -> metrics_mod.MetricsReport:
    """Score a predictor on the protocol's test domain.

    Per sequence: seeded eval mask, K completions (deterministic baselines
    contribute one), minADE over the missing region per role, and motion
    statistics of the best-of-K completion.  `clip` projects completions into
    the field bounds first, which forces oob to 0 by construction.
    """
    if dataset.bounds is None:
        raise ValueError("evaluate needs a dataset with field bounds")
    seqs = [s for s in dataset.sequences if s.domain == protocol.test_domain]
    if not seqs:
        raise ValueError(f"no sequences of domain {protocol.test_domain!r} to evaluate")
    model_side = isinstance(predictor, ModelPredictor)
    if model_side:
        missing_prov = set(protocol.train_domains) - set(predictor.train_domains)
        if protocol.test_domain not in predictor.train_domains or missing_prov:
            warnings.warn(
                f"provenance: model trained on {list(predictor.train_domains)}, "
                f"protocol expects train={list(protocol.train_domains)} "
                f"test={protocol.test_domain!r}")

    n, t = seqs[0].n_agents, seqs[0].t_steps
    masks = [make_eval_mask(n, t, _eval_rng(protocol.seed, i), protocol.mask)
             for i in range(len(seqs))]
    completions = predictor.predict(seqs, masks, protocol.k, protocol.seed)
    if clip:
        b = dataset.bounds
        completions = np.stack([
            np.clip(completions[..., 0], b.x_min, b.x_max),
            np.clip(completions[..., 1], b.y_min, b.y_max)], axis=-1)

    acc: dict[str, dict[str, list]] = {
        role: {m: [] for m in metrics_mod.METRIC_NAMES}
        for role in ("ball", "player", "all")}
    for i, seq in enumerate(seqs):
        y, m = seq.X, masks[i]
        samp = completions[:, i]                       # (K, N, T, 2)
        d = np.linalg.norm(samp - y, axis=-1)          # (K, N, T)
        roles = np.asarray(seq.roles)
        ade_all = d[:, m == 0].mean(axis=1)
        best = samp[int(np.argmin(ade_all))]
        for role in acc:
            idx = np.arange(n) if role == "all" else np.flatnonzero(roles == role)
            if not idx.size:
                continue
            miss = m[idx] == 0
            if miss.any():
                acc[role]["min_ade_k"].append(float(d[:, idx][:, miss].mean(axis=1).min()))
            acc[role]["oob_rate"].append(metrics_mod.oob(best[idx], dataset.bounds))
            steps = np.linalg.norm(np.diff(best[idx], axis=1), axis=-1)
            acc[role]["step"].append(float(steps.mean()))
            acc[role]["path_l"].append(float(steps.sum(axis=1).mean()))
            disc, ends = metrics_mod.path_d(best, idx)
            acc[role]["path_d_discrepancy"].append(disc)
            acc[role]["path_d_endpoint"].append(float(ends.mean()))

    report = metrics_mod.MetricsReport()
    for role, per_metric in acc.items():
        for metric, vals in per_metric.items():
            if vals:
                report.put(protocol.test_domain, role, metric, float(np.mean(vals)))
    return report


@dataclass
class ProtocolOutcome:
    reports: dict
    fits: dict


def _check_domain_keys(train_by_domain: dict, test_by_domain: dict) -> None:
    for name, by in (("train", train_by_domain), ("test", test_by_domain)):
        for key, ds in by.items():
            if ds.domains() != [key]:
                raise ValueError(
                    f"{name} split keyed {key!r} holds domains {ds.domains()}")


def run_s2s(train_by_domain: dict, test_by_domain: dict, tcfg: TrainConfig,
            mcfg: ModelConfig | None = None, out_dir=None, k: int = 20,
            clip: bool = False) -> ProtocolOutcome:
    """One train+eval per domain; emits one metrics CSV per domain."""
    _check_domain_keys(train_by_domain, test_by_domain)
    reports, fits = {}, {}
    for domain in train_by_domain:
        res = train_mod.fit(train_by_domain[domain], tcfg,
                            replace(mcfg) if mcfg else None)
        proto = ProtocolSpec("S2S", (domain,), domain, k=k, seed=tcfg.seed)
        rep = evaluate(ModelPredictor.from_fit(res), test_by_domain[domain],
                       proto, clip=clip)
        reports[domain], fits[domain] = rep, res
        if out_dir is not None:
            rep.write_csv(f"{out_dir}/s2s_{domain}.csv", domain, "S2S")
    return ProtocolOutcome(reports, fits)


def run_u2s(train_by_domain: dict, test_by_domain: dict, tcfg: TrainConfig,
            mcfg: ModelConfig | None = None, out_dir=None, k: int = 20,
            clip: bool = False) -> ProtocolOutcome:
    """One train on the merged set, one eval per domain."""
    _check_domain_keys(train_by_domain, test_by_domain)
    merged = merge_unified(list(train_by_domain.values()))
    res = train_mod.fit(merged, tcfg, replace(mcfg) if mcfg else None)
    domains = tuple(train_by_domain)
    reports = {}
    for domain in test_by_domain:
        proto = ProtocolSpec("U2S", domains, domain, k=k, seed=tcfg.seed)
        rep = evaluate(ModelPredictor.from_fit(res), test_by_domain[domain],
                       proto, clip=clip)
        reports[domain] = rep
        if out_dir is not None:
            rep.write_csv(f"{out_dir}/u2s_{domain}.csv", domain, "U2S")
    return ProtocolOutcome(reports, {"unified": res})


# --- ablations ---------------------------------------------------------------


@dataclass(frozen=True)
class AblationGrid:
    adapter_variants: tuple
    contrastive_variants: tuple
    seeds: tuple

    def __post_init__(self):
        if not (self.adapter_variants and self.contrastive_variants and self.seeds):
            raise ValueError("ablation grid lists must be non-empty")

    def cells(self):
        return list(product(self.adapter_variants, self.contrastive_variants,
                            self.seeds))


def default_ablation_grids(seeds=(0,)) -> list[AblationGrid]:
    """Adapter sweep at the hierarchical anchor plus contrastive sweep at the
    token_wise anchor; the shared anchor cell appears in both sweeps (trained
    once, reported twice), 7 rows per seed per domain."""
    seeds = tuple(seeds)
    return [
        AblationGrid(("token_wise", "no_gating", "bypass"), ("hierarchical",), seeds),
        AblationGrid(("token_wise",),
                     ("hierarchical", "shared_feature", "role_only", "off"), seeds),
    ]


ABLATION_COLUMNS = ("adapter_variant", "contrastive_variant", "seed",
                    "domain", "metric", "value")


def ablation_suite(grids, train_by_domain: dict, test_by_domain: dict,
                   tcfg: TrainConfig, mcfg: ModelConfig | None = None,
                   out_csv=None, k: int = 20, jobs: int = 1):
    """Train and evaluate every grid cell under the U2S budget.

    Duplicate cells across grids are trained once and reported per mention.
    A failing cell is recorded and the suite continues.  Returns (rows,
    failures) with rows ordered by the grids' declared cell order.
    """
    ordered = []
    for g in grids:
        ordered.extend(g.cells())
    unique = list(dict.fromkeys(ordered))

    def run_cell(cell):
        a_var, c_var, seed = cell
        cfg = replace(tcfg, adapter_variant=a_var, contrastive_variant=c_var,
                      seed=seed)
        out = run_u2s(train_by_domain, test_by_domain, cfg,
                      replace(mcfg) if mcfg else None, k=k)
        return {dom: rep for dom, rep in out.reports.items()}

    results: dict = {}
    failures: list[tuple] = []
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futs = {cell: pool.submit(run_cell, cell) for cell in unique}
        for cell, fut in futs.items():
            try:
                results[cell] = fut.result()
            except Exception as err:   # cell isolation is the contract
                failures.append((*cell, repr(err)))
    else:
        for cell in unique:
            try:
                results[cell] = run_cell(cell)
            except Exception as err:
                failures.append((*cell, repr(err)))

    rows = []
    for cell in ordered:
        if cell not in results:
            continue
        a_var, c_var, seed = cell
        for dom, rep in results[cell].items():
            for metric in metrics_mod.METRIC_NAMES:
                if (dom, "all") in rep.rows and metric in rep.rows[(dom, "all")]:
                    rows.append({"adapter_variant": a_var,
                                 "contrastive_variant": c_var, "seed": seed,
                                 "domain": dom, "metric": metric,
                                 "value": rep.get(dom, "all", metric)})
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
            w.writeheader()
            for r in rows:
                w.writerow({**r, "value": repr(r["value"])})
    return rows, failures


# --- embedding export and probes ----------------------------------------------


def nearest_centroid_accuracy(train_emb: np.ndarray, train_labels,
                              test_emb: np.ndarray, test_labels) -> float:
    """Fit one centroid per label on the train split; accuracy on the test
    split by nearest centroid (Euclidean)."""
    train_labels = np.asarray(train_labels)
    test_labels = np.asarray(test_labels)
    labels = sorted(set(train_labels.tolist()))
    if len(labels) < 2:
        raise ValueError("nearest-centroid needs >= 2 classes")
    cents = np.stack([train_emb[train_labels == lab].mean(axis=0) for lab in labels])
    d = np.linalg.norm(test_emb[:, None] - cents[None], axis=-1)
    pred = np.asarray(labels)[np.argmin(d, axis=1)]
    return float((pred == test_labels).mean())


def embedding_spaces(mp: ModelPredictor, dataset: Dataset, seed: int = 0):
    """Per-agent embeddings in each trained contrastive space.

    Embeds fully observed sequences via the posterior-mean latent, so the
    embedding reflects the whole trajectory rather than a particular masking.
    Returns (spaces: dict name -> (rows, d) array, roles, domains, seq_ids,
    agent_ids).
    """
    seqs = dataset.sequences
    if not seqs:
        raise ValueError("no sequences to embed")
    n, t = seqs[0].n_agents, seqs[0].t_steps
    masks = [np.ones((n, t)) for _ in seqs]
    batch = model_mod.make_batch(seqs, masks, mp.domain_vocab)
    tape, leaves, z_ad = model_mod.posterior_embeddings(
        mp.params, batch, mp.model_cfg, mp.adapter_variant)
    used = mp.contrastive_used
    if used == "off":
        raise ValueError("checkpoint trained with contrastive off: no spaces to export")
    if used == "shared_feature":
        spaces = {"shared": l2_normalize(z_ad).value}
    else:
        spaces = {}
        if used in ("hierarchical", "role_only"):
            spaces["role"] = project(leaves, z_ad, "role").value
        if used in ("hierarchical", "domain_only"):
            spaces["domain"] = project(leaves, z_ad, "domain").value
    roles = [r for s in seqs for r in s.roles]
    domains = [s.domain for s in seqs for _ in range(n)]
    seq_ids = [i for i in range(len(seqs)) for _ in range(n)]
    agent_ids = list(range(n)) * len(seqs)
    return spaces, roles, domains, seq_ids, agent_ids


def export_embeddings(mp: ModelPredictor, dataset: Dataset, out_csv,
                      seed: int = 0) -> int:
    """Write one CSV row per (agent, space): seq_id, agent_id, role, domain,
    space, c0..c{d-1}.  Returns the row count."""
    spaces, roles, domains, seq_ids, agent_ids = embedding_spaces(mp, dataset, seed)
    width = max(arr.shape[1] for arr in spaces.values())
    n_rows = 0
    with open(out_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seq_id", "agent_id", "role", "domain", "space"] +
                   [f"c{j}" for j in range(width)])
        for space, arr in spaces.items():
            for r in range(arr.shape[0]):
                coords = [repr(v) for v in arr[r].tolist()]
                coords += [""] * (width - arr.shape[1])
                w.writerow([seq_ids[r], agent_ids[r], roles[r], domains[r],
                            space] + coords)
                n_rows += 1
    return n_rows
