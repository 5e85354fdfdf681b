"""``robust-reid`` command line: synth | ingest | balance | train | eval | report.

Every command writes ``resolved_config.json`` next to its outputs. The seed
falls back to ``$ROBUST_REID_SEED`` (then 0). Exit status is 0 on success, 2
for usage errors and the ``exit_code`` of the raised error class otherwise
(see :mod:`robust_reid.errors`).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .attacks import AttackSpec, parse_fraction
from .balancing import (AugmentationGenerator, BalanceConfig, balance, balance_report,
                        write_balance_report)
from .dataset import (SyntheticSpec, identity_stats, load_dataset, load_folder, make_synthetic,
                      save_dataset, split_query_gallery)
from .errors import EmptyDataset, IOFailure, InvalidSpec, MissingReport, ReIDError
from .evaluation import (bias_stats, extract_features, robust_eval, transfer_eval,
                         write_features_csv, write_histogram_csv, write_per_id_csv)
from .meta import TrainConfig, fit, prepare_training_data
from .model import load_checkpoint

log = logging.getLogger("robust_reid")

REPORT_FILE = "eval_report.json"


def _seed(value) -> int:
    if value is not None:
        return int(value)
    return int(os.environ.get("ROBUST_REID_SEED", 0))


def _write_config(out: Path, command: str, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(
        json.dumps({"command": command, **cfg}, indent=1, sort_keys=True))


def _prepare_out(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()) and not force:
        raise IOFailure(f"{out} exists and is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)


def _load_split(path: str, split: str):
    p = Path(path)
    if (p / split).is_dir():
        return load_dataset(p, split)
    return load_folder(p, split)


# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec_doc = json.loads(Path(args.spec).read_text())
    out = Path(args.out)
    _prepare_out(out, args.force)
    seed = _seed(args.seed)
    parts = spec_doc if "train" in spec_doc or "test" in spec_doc else {spec_doc.get("split", "train"): spec_doc}
    written = {}
    for j, (part, doc) in enumerate(sorted(parts.items())):
        doc = dict(doc)
        queries = int(doc.pop("queries_per_id", 1))
        if part == "test":
            doc["split"] = "gallery"
        spec = SyntheticSpec.from_dict(doc)
        ds = make_synthetic(spec, np.random.default_rng([seed, j]))
        if part == "test":
            q, g = split_query_gallery(ds, np.random.default_rng([seed, j, 1]), queries)
            for split_ds in (q, g):
                save_dataset(split_ds, out)
                written[split_ds.split] = len(split_ds)
        else:
            save_dataset(ds, out)
            written[ds.split] = len(ds)
    _write_config(out, "synth", {"spec": spec_doc, "seed": seed})
    for split, n in written.items():
        print(f"{split}: {n} images")
    return 0


def cmd_ingest(args) -> int:
    ds = _load_split(args.root, args.split)
    stats = identity_stats(ds)
    out = Path(args.out) if args.out else None
    print(f"{ds}")
    counts = np.array(list(stats.per_id_count.values()))
    print(f"images per identity: min {counts.min()}  mean {counts.mean():.2f}  max {counts.max()}")
    if out:
        out.mkdir(parents=True, exist_ok=True)
        with (out / f"{args.split}_identity_stats.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["identity", "count", "dominant_camera", "dominant_prop"])
            for ident, n in stats.per_id_count.items():
                cam, prop = stats.dominant_camera[ident]
                w.writerow([ident, n, cam, f"{prop:.6f}"])
        _write_config(out, "ingest", {"root": str(args.root), "split": args.split})
    return 0


def cmd_balance(args) -> int:
    ds = load_dataset(args.input, "train")
    out = Path(args.out)
    _prepare_out(out, args.force)
    seed = _seed(args.seed)
    default = BalanceConfig.default_for(ds, args.delta2)
    cfg = BalanceConfig(args.delta1 or default.delta1, args.delta2)
    balanced = balance(ds, cfg, AugmentationGenerator(ds), np.random.default_rng([seed, 101]))
    balanced.meta["balanced"] = True
    save_dataset(balanced, out)
    rows = balance_report(ds, balanced)
    write_balance_report(rows, out / "balance_report.csv")
    _write_config(out, "balance", {"input": str(args.input), "delta1": cfg.delta1,
                                   "delta2": cfg.delta2, "seed": seed})
    treated = [r["identity"] for r in rows if r["camera_treated"]]
    filled = [r["identity"] for r in rows if r["count_before"] < cfg.delta1]
    print(f"delta1={cfg.delta1} delta2={cfg.delta2}: {len(ds)} -> {len(balanced)} images")
    print(f"count-filled identities: {filled}")
    print(f"camera-treated identities: {treated}")
    return 0


def _train_config(args) -> TrainConfig:
    doc = json.loads(Path(args.config).read_text()) if args.config else {}
    doc.pop("command", None)
    for key in ("mode", "epochs", "train_dir", "out_dir", "resume"):
        val = getattr(args, key, None)
        if val is not None:
            doc[key] = val
    if args.seed is not None or "seed" not in doc:
        doc["seed"] = _seed(args.seed)
    for flag in ("fnes", "meta", "advinv", "balance"):
        if getattr(args, f"no_{flag}"):
            doc[f"use_{flag}"] = False
    if args.keep_checkpoints:
        doc["keep_checkpoints"] = True
    return TrainConfig.from_dict(doc)


def cmd_train(args) -> int:
    cfg = _train_config(args)
    if not cfg.train_dir or not cfg.out_dir:
        raise InvalidSpec("train needs train_dir and out_dir (config or flags)")
    out = Path(cfg.out_dir)
    ds = load_dataset(cfg.train_dir, "train")
    ds = prepare_training_data(ds, cfg)
    _write_config(out, "train", cfg.to_dict())
    result = fit(ds, cfg, out, resume=cfg.resume)
    print(f"trained {result.epochs_done} epochs ({cfg.mode}); checkpoint {out / 'last.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    seed = _seed(args.seed)
    target = load_checkpoint(args.checkpoint).bundle
    query = _load_split(args.query, "query")
    gallery = _load_split(args.gallery or args.query, "gallery")
    spec = None
    if args.attack != "none":
        spec = AttackSpec(args.attack, parse_fraction(args.eps), args.steps,
                          parse_fraction(args.kappa) if args.kappa else None,
                          random_init=not args.no_random_init)
    clean = robust_eval(target, query, gallery, None)
    robust = None
    if spec is not None:
        if args.source_checkpoint:
            source = load_checkpoint(args.source_checkpoint).bundle
            robust = transfer_eval(source, target, query, gallery, spec, seed)
        else:
            robust = robust_eval(target, query, gallery, spec, seed)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    headline = robust or clean
    doc = {"checkpoint": str(args.checkpoint), "source_checkpoint": args.source_checkpoint,
           "clean": clean.to_dict(), "robust": robust.to_dict() if robust else None,
           "bias": bias_stats(headline)}
    (out / REPORT_FILE).write_text(json.dumps(doc, indent=1, sort_keys=True))
    write_per_id_csv(headline, out / "per_id_ap.csv")
    write_histogram_csv(doc["bias"], out / "per_id_ap_hist.csv")
    if args.features_csv:
        write_features_csv(extract_features(target, gallery), out / "gallery_features.csv")
    _write_config(out, "eval", {k: v for k, v in vars(args).items() if k != "func"} | {"seed": seed})
    print(f"clean  {clean.summary()}")
    if robust:
        print(f"{spec.label:<6} {robust.summary()}")
    return 0


def cmd_report(args) -> int:
    rows = []
    for run in args.runs:
        path = Path(run) / REPORT_FILE
        if not path.exists():
            raise MissingReport(f"no {REPORT_FILE} in {run}")
        doc = json.loads(path.read_text())
        robust = doc.get("robust") or {}
        rows.append({
            "run": str(run),
            "clean_map": round(100 * doc["clean"]["map"], 2),
            "clean_rank1": round(100 * doc["clean"]["cmc"][0], 2),
            "attack": AttackSpec.from_dict(robust["attack"]).label if robust.get("attack") else "",
            "robust_map": round(100 * robust["map"], 2) if robust else None,
            "robust_rank1": round(100 * robust["cmc"][0], 2) if robust else None,
            "per_id_std": round(100 * doc["bias"]["std"], 2),
        })
    rows.sort(key=lambda r: -(r["robust_map"] if r["robust_map"] is not None else -1))
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with out.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
        out.with_suffix(".json").write_text(json.dumps(rows, indent=1))
    print(f"{'run':<32} {'clean':>13} {'robust':>13}  attack")
    for r in rows:
        rob = f"{r['robust_map']:.2f}/{r['robust_rank1']:.2f}" if r["robust_map"] is not None else "-"
        print(f"{r['run']:<32} {r['clean_map']:>6.2f}/{r['clean_rank1']:<6.2f} {rob:>13}  {r['attack']}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="robust-reid", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a procedural dataset to disk")
    s.add_argument("spec", help="synthetic spec JSON (single spec or {train: ..., test: ...})")
    s.add_argument("out")
    s.add_argument("--seed", type=int)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", help="validate a directory and report identity statistics")
    s.add_argument("root")
    s.add_argument("--split", default="train", choices=["train", "query", "gallery"])
    s.add_argument("--out")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("balance", help="inter-ID filling and intra-ID camera diversification")
    s.add_argument("input")
    s.add_argument("out")
    s.add_argument("--delta1", type=int, help="count threshold (default: rounded mean)")
    s.add_argument("--delta2", type=float, default=0.5, help="dominant-camera share threshold")
    s.add_argument("--seed", type=int)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_balance)

    s = sub.add_parser("train", help="train a model (vanilla, metric-at or full)")
    s.add_argument("config", nargs="?", help="TrainConfig JSON")
    s.add_argument("--mode", choices=["vanilla", "metric-at", "full"])
    s.add_argument("--epochs", type=int)
    s.add_argument("--train-dir", dest="train_dir")
    s.add_argument("--out", dest="out_dir")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--seed", type=int)
    s.add_argument("--keep-checkpoints", action="store_true")
    for flag in ("fnes", "meta", "advinv", "balance"):
        s.add_argument(f"--no-{flag}", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="clean and attacked retrieval evaluation")
    s.add_argument("checkpoint")
    s.add_argument("query", help="dataset root holding query/ (and gallery/) or a flat folder")
    s.add_argument("gallery", nargs="?", help="gallery root or folder (default: query root)")
    s.add_argument("--attack", default="none", choices=["none", "fna", "sma", "mifgsm"])
    s.add_argument("--eps", default="8/255")
    s.add_argument("--steps", type=int, default=16)
    s.add_argument("--kappa")
    s.add_argument("--no-random-init", action="store_true")
    s.add_argument("--source-checkpoint", help="craft attacks on this model (black-box transfer)")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.add_argument("--features-csv", action="store_true", help="also export gallery features")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="compare eval reports of several runs")
    s.add_argument("runs", nargs="+")
    s.add_argument("--out", help="CSV path (a .json twin is written too)")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, torch.get_num_threads()))
    try:
        return args.func(args)
    except ReIDError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: IOFailure: {exc}", file=sys.stderr)
        return IOFailure.exit_code
    except (json.JSONDecodeError, TypeError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return InvalidSpec.exit_code


if __name__ == "__main__":
    sys.exit(main())
