"""Command-line entry point: dataset generation, training, evaluation and ablations."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .core import TrainConfig, read_config, validate_config, write_config
from .extractors import build_toy_bank
from .harness import (DatasetSpec, ablate_distill_loss, ablate_extractor_count, ablate_hyperparams,
                      ablate_single_extractor, evaluate_config, fig3_analysis, gating_stats, render_matrix,
                      run_repeated, train_and_evaluate)
from .pipeline import load_checkpoint, save_checkpoint
from .synthdata import load_dataset, make_dataset, save_dataset

log = logging.getLogger("adadqa")

SUBDIRS = ("config", "metrics", "logs", "plots", "checkpoint")


class RunDir:
    def __init__(self, root: Path, run_id: str):
        self.path = root / run_id
        for sub in SUBDIRS:
            (self.path / sub).mkdir(parents=True, exist_ok=True)

    def __getattr__(self, name):
        if name in SUBDIRS:
            return self.path / name
        raise AttributeError(name)

    def write_json(self, name: str, obj) -> Path:
        p = self.metrics / name
        p.write_text(json.dumps(obj, indent=2, default=_json_default) + "\n")
        return p


def _json_default(o):
    if isinstance(o, np.ndarray):
        return [None if not np.isfinite(v) else float(v) for v in o.ravel()] if o.ndim == 1 else \
            [_json_default(r) for r in o]
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if hasattr(o, "__dict__"):
        return o.__dict__
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _config(args) -> TrainConfig:
    cfg = read_config(args.config) if args.config else TrainConfig.desk()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        changes["epochs"] = args.epochs
        if cfg.warmup_epochs >= args.epochs:
            changes["warmup_epochs"] = max(0, args.epochs - 1)
    return validate_config(cfg.replace(**changes))


def _dataset(args, cfg: TrainConfig, mode: str = "random"):
    if args.dataset:
        return load_dataset(args.dataset)
    return make_dataset(args.n, seed=cfg.seed, mode=mode)


def _run_dir(args, command: str) -> RunDir:
    run_id = args.run_id or f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"
    rd = RunDir(Path(args.out), run_id)
    log.info("writing results to %s", rd.path)
    return rd


def _log_writer(path: Path):
    fh = path.open("w")

    def write(record: dict) -> None:
        fh.write(json.dumps(record) + "\n")
        fh.flush()

    return write


# -- commands -------------------------------------------------------------------

def cmd_synth_gen(args) -> int:
    seed = args.seed if args.seed is not None else 0
    ds = make_dataset(args.n, seed=seed, mode=args.mode)
    target = Path(args.dataset or Path(args.out) / "datasets" / ds.dataset_id)
    save_dataset(ds, target)
    print(f"wrote {len(ds)} clips ({len(ds.train_idx)} train / {len(ds.test_idx)} test) to {target}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    ds = _dataset(args, cfg)
    rd = _run_dir(args, "train")
    write_config(cfg, rd.config / "config.ini")
    outcome = train_and_evaluate(cfg, ds, build_toy_bank(), _log_writer(rd.logs / "train.jsonl"))
    ckpt_path = Path(args.checkpoint) if args.checkpoint else rd.checkpoint / "last.ckpt"
    save_checkpoint(ckpt_path, outcome.trainer.checkpoint())
    rd.write_json("eval.json", outcome.result.__dict__)
    print(f"test SRCC {outcome.result.srcc:.4f} PLCC {outcome.result.plcc:.4f}; checkpoint {ckpt_path}")
    return 0


def _require_checkpoint(args):
    if not args.checkpoint:
        raise ValueError("--checkpoint is required for this command")
    return load_checkpoint(args.checkpoint)


def cmd_eval(args) -> int:
    ckpt = _require_checkpoint(args)
    ds = load_dataset(args.dataset) if args.dataset else make_dataset(args.n, seed=ckpt.config.seed)
    model = ckpt.build_model()
    res = evaluate_config(model, ds.test, ckpt.config, ds.dataset_id, ds.split_seed)
    rd = _run_dir(args, "eval")
    rd.write_json("eval.json", res.__dict__)
    print(f"SRCC {res.srcc:.4f} PLCC {res.plcc:.4f} mean {res.mean:.4f}")
    return 0


def cmd_repeat(args) -> int:
    cfg = _config(args)
    base = load_dataset(args.dataset) if args.dataset else DatasetSpec(args.n, cfg.seed)
    summary = run_repeated(cfg, base, args.n_repeats, master_seed=cfg.seed)
    rd = _run_dir(args, "repeat")
    write_config(cfg, rd.config / "config.ini")
    rd.write_json("repeat.json", summary)
    print(f"{summary['n']} repeats: SRCC {summary['mean_srcc']:.4f} +/- {summary['std_srcc']:.4f}, "
          f"PLCC {summary['mean_plcc']:.4f} +/- {summary['std_plcc']:.4f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    pool = build_toy_bank()
    rd = _run_dir(args, f"ablate-{args.table}")
    write_config(cfg, rd.config / "config.ini")
    if args.table == "table7":
        ds = _dataset(args, cfg, mode="mixed")
        outcome = train_and_evaluate(cfg, ds, pool)
        reports = [gating_stats(outcome.trainer.model, ds, args.threshold, pool, cfg)]
    else:
        ds = _dataset(args, cfg)
        if args.table == "table3":
            rep = ablate_extractor_count(cfg, args.counts, True, ds, pool)
            reports = [ablate_extractor_count(cfg, args.counts, False, ds, pool, report=rep)]
        elif args.table == "table4":
            reports = [ablate_single_extractor(cfg, ds, pool)]
        elif args.table == "table5":
            reports = [ablate_distill_loss(cfg, ds, pool)]
        else:
            reports = list(ablate_hyperparams(cfg, dataset=ds, pool=pool))
    for rep in reports:
        rep.write(rd.metrics)
        print(rep.render())
    return 0


def cmd_fig3(args) -> int:
    rd = _run_dir(args, "fig3")
    analysis = fig3_analysis(build_toy_bank(), plot_dir=rd.plots)
    rd.write_json("fig3.json", analysis)
    (rd.metrics / "fig3.txt").write_text(render_matrix(analysis))
    print(render_matrix(analysis))
    return 0


def cmd_inspect_gates(args) -> int:
    ckpt = _require_checkpoint(args)
    ds = load_dataset(args.dataset) if args.dataset else make_dataset(args.n, seed=ckpt.config.seed, mode="mixed")
    pool = build_toy_bank().subset(ckpt.extractor_names)
    rep = gating_stats(ckpt.build_model(), ds, args.threshold, pool, ckpt.config)
    rd = _run_dir(args, "gates")
    rep.write(rd.metrics)
    print(rep.render())
    return 0


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (defaults to the desk preset)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default="results", help="results root directory")
    common.add_argument("--run-id", default=None)
    common.add_argument("--dataset", help="dataset directory written by synth-gen")
    common.add_argument("--checkpoint", help="checkpoint path")
    common.add_argument("--n", type=int, default=200, help="clip count when generating a dataset in memory")
    common.add_argument("--epochs", type=int, default=None, help="override the configured epoch count")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="adadqa", description="Adaptive feature acquisition for video quality assessment")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-gen", parents=[common], help="generate and save a synthetic dataset")
    s.add_argument("--mode", choices=("random", "mixed"), default="random")
    s.set_defaults(func=cmd_synth_gen)

    sub.add_parser("train", parents=[common], help="train and evaluate one run").set_defaults(func=cmd_train)
    sub.add_parser("eval", parents=[common], help="evaluate a checkpoint").set_defaults(func=cmd_eval)

    s = sub.add_parser("repeat", parents=[common], help="repeated random splits")
    s.add_argument("--n-repeats", type=int, default=10)
    s.set_defaults(func=cmd_repeat)

    s = sub.add_parser("ablate", parents=[common], help="ablation tables")
    s.add_argument("table", choices=("table3", "table4", "table5", "table6", "table7"))
    s.add_argument("--counts", type=int, nargs="+", default=[3, 4, 5, 6, 7])
    s.add_argument("--threshold", type=float, default=3.5)
    s.set_defaults(func=cmd_ablate)

    sub.add_parser("fig3", parents=[common], help="distortion response analysis").set_defaults(func=cmd_fig3)

    s = sub.add_parser("inspect-gates", parents=[common], help="gating weights by quality group")
    s.add_argument("--threshold", type=float, default=3.5)
    s.set_defaults(func=cmd_inspect_gates)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # top-level diagnostic
        print(f"error: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
