"""Command-line entry point: ``omnidet <command> [options]``.

Exit status is 0 on success, 2 on a configuration or usage error and 1 on
any failure while running.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .budget import POLICIES, BudgetPolicy, budget_plan
from .data import generate_dataset, load_manifest, save_manifest
from .experiment import ConfigError, RunConfig, load_splits, run_ablation
from .model import BRANCHES, load_checkpoint
from .training import ItemStore, evaluate_items, predict_items, screen_unlabeled, train

log = logging.getLogger("omnidet")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with data/model/loss/weighting/train/screen sections")
    common.add_argument("--seed", type=int, help="overrides the seeds in the config")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="omnidet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", parents=[common], help="train a detector")
    t.add_argument("--data", required=True, help="dataset root with train/ and val/ splits")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--strategy", choices=("HLA", "SLA", "DLA", "FIXED"))
    t.add_argument("--branches", help=f"comma-separated subset of {','.join(BRANCHES)}")
    t.add_argument("--iterations", type=int)
    t.add_argument("--screen-with", help="baseline checkpoint used to screen the unlabeled pool first")

    e = sub.add_parser("eval", parents=[common], help="mAP of a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--branches", help="evaluate a subset of branches instead of the fusion")
    e.add_argument("--json", action="store_true", help="print JSON instead of a table")

    pr = sub.add_parser("predict", parents=[common], help="write detections as JSON")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--manifest", required=True, help="manifest.json or split directory")
    pr.add_argument("--out", help="output file (default stdout)")

    s = sub.add_parser("screen", parents=[common], help="filter the unlabeled pool with a baseline")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--threshold", type=float)
    s.add_argument("--out", required=True, help="filtered manifest path")

    b = sub.add_parser("budget", parents=[common], help="scan counts under a labeling budget")
    b.add_argument("--policy", required=True, type=str.upper, choices=POLICIES)
    b.add_argument("--budget", type=float, default=66000.0, help="seconds")
    b.add_argument("--json", action="store_true")

    a = sub.add_parser("ablate", parents=[common], help="compare label-assignment strategies")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--strategies", default="HLA,SLA,DLA")
    a.add_argument("--seeds", type=int, default=3, help="number of shared seeds")
    a.add_argument("--no-baseline", action="store_true", help="skip the strict box-only baseline")
    return p


def _manifest_path(p: str) -> Path:
    path = Path(p)
    return path / "manifest.json" if path.is_dir() else path


def _branches(arg: Optional[str]) -> Optional[tuple[str, ...]]:
    if arg is None:
        return None
    names = tuple(x.strip() for x in arg.split(",") if x.strip())
    bad = set(names) - set(BRANCHES)
    if not names or bad:
        raise ConfigError(f"invalid branches {arg!r}")
    return names


def _detections_json(item_ids, dets) -> list[dict]:
    return [{"id": i, "detections": [{"box": list(d.box.as_tuple()), "score": d.score, "label": d.label}
                                     for d in ds]} for i, ds in zip(item_ids, dets)]


def _run(args) -> int:
    cfg = RunConfig.load(args.config).with_seed(args.seed)

    if args.command == "gen-data":
        mans = generate_dataset(cfg.data, args.out)
        for split, m in mans.items():
            print(f"{split}: {len(m)} items {m.counts()}")
        return 0

    if args.command == "budget":
        try:
            policy = BudgetPolicy(args.policy, budget_seconds=args.budget)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        plan = budget_plan(policy)
        print(json.dumps(plan.to_dict(), indent=2) if args.json else plan.table())
        return 0

    if args.command == "train":
        model_cfg, loss_cfg, train_cfg = cfg.model, cfg.loss, cfg.train
        branches = _branches(args.branches)
        if branches:
            model_cfg = replace(model_cfg, enabled_branches=branches)
        if args.strategy:
            loss_cfg = replace(loss_cfg, strategy=args.strategy)
        if args.iterations:
            try:
                train_cfg = replace(train_cfg, iterations=args.iterations)
            except ValueError as e:
                raise ConfigError(str(e)) from e
        splits = load_splits(args.data)
        items = list(splits["train"].items)
        if args.screen_with:
            baseline, _ = load_checkpoint(args.screen_with)
            kept = {it.item_id for it in screen_unlabeled(baseline, splits["train"],
                                                          threshold=cfg.screen.threshold)}
            items = [it for it in items if it.granularity.value != "unlabeled" or it.item_id in kept]
            print(f"screening kept {len(kept)} unlabeled items")
        res = train(train_cfg, model_cfg, splits["train"], splits["val"], loss_cfg, cfg.weighting,
                    args.out, train_items=items)
        print(f"best iteration {res.best_iteration} val mAP {res.best_map:.4f}; run in {args.out}")
        return 0

    if args.command == "eval":
        model, _ = load_checkpoint(args.checkpoint)
        man = load_manifest(Path(args.data) / args.split / "manifest.json")
        r = evaluate_items(model, ItemStore(man), man.items, _branches(args.branches))
        print(r.to_json() if args.json else r.table())
        return 0

    if args.command == "predict":
        model, _ = load_checkpoint(args.checkpoint)
        man = load_manifest(_manifest_path(args.manifest))
        dets = predict_items(model, ItemStore(man), man.items)
        text = json.dumps(_detections_json([it.item_id for it in man.items], dets), indent=1)
        if args.out:
            Path(args.out).write_text(text)
        else:
            print(text)
        return 0

    if args.command == "screen":
        model, _ = load_checkpoint(args.checkpoint)
        man = load_manifest(_manifest_path(args.manifest))
        thr = cfg.screen.threshold if args.threshold is None else args.threshold
        kept = {it.item_id for it in screen_unlabeled(model, man, threshold=thr)}
        items = [it for it in man.items if it.granularity.value != "unlabeled" or it.item_id in kept]
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        # keep image references resolvable from the new location
        moved = [replace(it, image_ref=os.path.relpath(man.image_path(it), out.parent)) for it in items]
        save_manifest(man.subset(moved), out)
        print(f"kept {len(kept)} unlabeled items; wrote {out}")
        return 0

    if args.command == "ablate":
        strategies = [s.strip().upper() for s in args.strategies.split(",") if s.strip()]
        bad = [s for s in strategies if s not in ("HLA", "SLA", "DLA", "FIXED")]
        if bad or not strategies:
            raise ConfigError(f"invalid strategies {args.strategies!r}")
        if args.seeds < 1:
            raise ConfigError("--seeds must be >= 1")
        base = cfg.train.seed
        res = run_ablation(args.data, args.out, cfg, strategies, [base + k for k in range(args.seeds)],
                           baseline=not args.no_baseline)
        ref = "FCOS" if not args.no_baseline else None
        print(res.table(reference=ref))
        return 0

    raise ConfigError(f"unknown command {args.command}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - report and signal runtime failure
        log.debug("failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
