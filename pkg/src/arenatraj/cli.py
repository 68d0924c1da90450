"""Command-line surface: data generation, stats, training, evaluation,
ablations, and embedding export.

Every command prints a single ``resolved-config:`` JSON line (enough to
reproduce the run) before doing work.  Stdout stays human-readable; all
machine outputs go to files.  Exit code is 0 iff every requested output was
written; any failure emits one ``arenatraj-error:`` JSON line on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import evaluation as ev
from . import metrics as metrics_mod
from . import train as train_mod
from .data import (PROFILES, Dataset, generate_dataset, is_normalized,
                   load_jsonl, merge_unified, normalize, save_jsonl)
from .model import ADAPTER_VARIANTS, CONTRASTIVE_VARIANTS, ModelConfig
from .train import TrainConfig

PROG = "arenatraj"


class _Parser(argparse.ArgumentParser):
    """Rejects unknown flags with the same machine-readable stderr line the
    command handlers use."""

    def error(self, message):
        _fail("ArgumentError", message)
        self.exit(2)


def _fail(kind: str, message: str) -> None:
    print(f"{PROG}-error: " + json.dumps({"type": kind, "message": message}),
          file=sys.stderr)


def _announce(command: str, **resolved) -> None:
    resolved["command"] = command
    print("resolved-config: " + json.dumps(resolved, sort_keys=True))


def _load_merged(paths: list) -> Dataset:
    parts = []
    for p in paths:
        ds = load_jsonl(p)
        parts.append(ds if is_normalized(ds) else normalize(ds))
    return parts[0] if len(parts) == 1 else merge_unified(parts)


def _split_by_domain(dataset: Dataset) -> dict:
    out: dict = {}
    for domain in dataset.domains():
        seqs = [s for s in dataset.sequences if s.domain == domain]
        out[domain] = Dataset(seqs, dataset.bounds, dataset.units,
                              dataset.orig_bounds, dataset.orig_units)
    return out


def _data_name(paths: list) -> str:
    return "+".join(Path(p).stem for p in paths)


# --- subcommand handlers -------------------------------------------------------


def _cmd_gen_data(args) -> list:
    _announce("gen-data", profile=args.profile, out=args.out, n=args.n,
              agents=args.agents, steps=args.steps, seed=args.seed)
    ds = generate_dataset(PROFILES[args.profile], args.n, n_agents=args.agents,
                          t_steps=args.steps, seed=args.seed)
    save_jsonl(ds, args.out)
    print(f"wrote {len(ds)} sequences to {args.out} ({ds.units})")
    for row in metrics_mod.gt_stats(ds):
        print("  {domain} {role}: step {step:.3f}  path_l {path_l:.3f}  "
              "path_d {path_d_discrepancy:.3f}/{path_d_endpoint:.3f}".format(**row))
    return [args.out]


def _cmd_stats(args) -> list:
    _announce("stats", data=args.data, out=args.out, seed=args.seed)
    parts = [load_jsonl(p) for p in args.data]
    ds = parts[0] if len(parts) == 1 else merge_unified(parts)
    rows = metrics_mod.gt_stats_csv(ds, args.out)
    print(f"wrote {len(rows)} stat rows to {args.out}")
    return [args.out]


def _resolve_train_config(args) -> tuple:
    if args.config is not None:
        tcfg, mcfg = train_mod.load_config(args.config)
    else:
        tcfg, mcfg = TrainConfig(), ModelConfig()
        mcfg.insertion = tcfg.insertion
    if args.seed is not None:
        tcfg.seed = args.seed
    return tcfg, mcfg


def _cmd_train(args) -> list:
    tcfg, mcfg = _resolve_train_config(args)
    _announce("train", config=args.config, data=args.data, out=args.out,
              seed=tcfg.seed, train_config=vars(tcfg).copy(),
              model_config=vars(mcfg).copy())
    ds = _load_merged(args.data)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "checkpoint.json")
    log = os.path.join(args.out, "train_log.csv")
    res = train_mod.fit(ds, tcfg, mcfg, log_path=log, ckpt_path=ckpt)
    last = res.log_rows[-1]
    print(f"trained {res.epochs_done} epochs on {ds.domains()} "
          f"(contrastive {res.contrastive_used}); final total {last['total']:.6f}")
    print(f"checkpoint {ckpt}")
    print(f"log {log}")
    return [ckpt, log]


def _cmd_eval(args) -> list:
    seed = 0 if args.seed is None else args.seed
    _announce("eval", ckpt=args.ckpt, data=args.data, protocol=args.protocol,
              out=args.out, k=args.k, clip=args.clip, seed=seed)
    predictor = ev.get_predictor(args.ckpt)
    ds = _load_merged(args.data)
    domains = ds.domains()
    combined = metrics_mod.MetricsReport()
    for domain in domains:
        if args.protocol == "S2S":
            proto = ev.ProtocolSpec("S2S", (domain,), domain, k=args.k, seed=seed)
        else:
            proto = ev.ProtocolSpec("U2S", tuple(domains), domain, k=args.k,
                                    seed=seed)
        rep = ev.evaluate(predictor, ds, proto, clip=args.clip)
        combined.rows.update(rep.rows)
        print(f"{domain}: minADE_{args.k if isinstance(predictor, ev.ModelPredictor) else 1} "
              f"{rep.get(domain, 'all', 'min_ade_k'):.6f}  "
              f"oob {rep.get(domain, 'all', 'oob_rate'):.4f}")
    combined.write_csv(args.out, _data_name(args.data), args.protocol)
    print(f"wrote {args.out}")
    return [args.out]


def _load_grids(spec: str, seed: int) -> list:
    if spec == "default":
        return ev.default_ablation_grids(seeds=(seed,))
    with open(spec) as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise ValueError("grid file must hold a JSON list of grid objects")
    grids = []
    for g in raw:
        unknown = set(g) - {"adapter_variants", "contrastive_variants", "seeds"}
        if unknown:
            raise ValueError(f"unknown grid keys: {sorted(unknown)}")
        grids.append(ev.AblationGrid(tuple(g["adapter_variants"]),
                                     tuple(g["contrastive_variants"]),
                                     tuple(g["seeds"])))
    return grids


def _cmd_ablate(args) -> list:
    tcfg, mcfg = _resolve_train_config(args)
    _announce("ablate", config=args.config, data=args.data,
              test_data=args.test_data, grid=args.grid, out=args.out,
              jobs=args.jobs, seed=tcfg.seed)
    grids = _load_grids(args.grid, tcfg.seed)
    train_by = _split_by_domain(_load_merged(args.data))
    test_by = _split_by_domain(_load_merged(args.test_data))
    rows, failures = ev.ablation_suite(grids, train_by, test_by, tcfg, mcfg,
                                       out_csv=args.out, k=args.k,
                                       jobs=args.jobs)
    for f in failures:
        print(f"cell-failure: adapter={f[0]} contrastive={f[1]} seed={f[2]} {f[3]}")
    print(f"wrote {len(rows)} rows to {args.out} ({len(failures)} failed cells)")
    return [args.out]


def _cmd_export_embeddings(args) -> list:
    seed = 0 if args.seed is None else args.seed
    _announce("export-embeddings", ckpt=args.ckpt, data=args.data,
              out=args.out, seed=seed)
    if args.ckpt in ev.BASELINE_NAMES:
        raise ValueError(f"baseline {args.ckpt!r} has no embedding spaces")
    predictor = ev.ModelPredictor.from_checkpoint(args.ckpt)
    ds = _load_merged(args.data)
    n = ev.export_embeddings(predictor, ds, args.out, seed=seed)
    print(f"wrote {n} embedding rows to {args.out}")
    return [args.out]


# --- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog=PROG, description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate synthetic scenes as JSONL")
    g.add_argument("--profile", choices=sorted(PROFILES), default="basketball")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=100)
    g.add_argument("--agents", type=int, default=5)
    g.add_argument("--steps", type=int, default=24)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=_cmd_gen_data)

    s = sub.add_parser("stats", help="ground-truth motion statistics CSV")
    s.add_argument("--data", action="append", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_stats)

    t = sub.add_parser("train", help="fit a model; writes checkpoint and log")
    t.add_argument("--config", default=None)
    t.add_argument("--data", action="append", required=True,
                   help="JSONL file; repeat to merge domains")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int, default=None,
                   help="overrides the config seed")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint or baseline")
    e.add_argument("--ckpt", required=True,
                   help=f"checkpoint path or one of {'/'.join(ev.BASELINE_NAMES)}")
    e.add_argument("--data", action="append", required=True)
    e.add_argument("--protocol", choices=("S2S", "U2S"), default="S2S")
    e.add_argument("--out", required=True)
    e.add_argument("--k", type=int, default=20)
    e.add_argument("--clip", action="store_true",
                   help="project completions into the field bounds first")
    e.add_argument("--seed", type=int, default=None)
    e.set_defaults(func=_cmd_eval)

    a = sub.add_parser("ablate", help="train and score a variant grid")
    a.add_argument("--config", default=None)
    a.add_argument("--data", action="append", required=True,
                   help="training JSONL; repeat per domain")
    a.add_argument("--test-data", action="append", required=True)
    a.add_argument("--grid", default="default",
                   help='"default" or a JSON grid file')
    a.add_argument("--out", required=True)
    a.add_argument("--k", type=int, default=20)
    a.add_argument("--jobs", type=int, default=1)
    a.add_argument("--seed", type=int, default=None)
    a.set_defaults(func=_cmd_ablate)

    x = sub.add_parser("export-embeddings",
                       help="per-agent contrastive-space embeddings CSV")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--data", action="append", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--seed", type=int, default=None)
    x.set_defaults(func=_cmd_export_embeddings)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        outputs = args.func(args)
        missing = [p for p in outputs if not os.path.exists(str(p))]
        if missing:
            raise RuntimeError(f"outputs not written: {missing}")
    except Exception as err:
        _fail(type(err).__name__, str(err))
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
