"""Command-line entry point: simulate, train, eval, report, ingest.

Every command exits 0 on success. On failure it prints one JSON line
``{"error": <kind>, "message": <text>}`` to stderr and exits nonzero.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from collections import defaultdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, check_config
from .config import ConfigError, RunConfig
from .datapipe import (
    CorpusError,
    ManifestError,
    SplitError,
    load_corpus,
    pivot_visits,
    read_manifest,
    split_holdout,
    split_kfold,
    split_one_center_out,
    write_manifest,
    write_packed,
)
from .synthdisease import build_dataset, make_chain, procedural_corpus
from .training import JsonlLog, NonFiniteLossError, Trainer, check_compatible, read_jsonl

SPLIT_MODES = ("fixed", "kfold", "center")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fmt_float(v):
    return repr(float(v))


# configuration and data

def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    over = {}
    if getattr(args, "seed", None) is not None:
        over["train.seed"] = str(args.seed)
        over["model.seed"] = str(args.seed)
    if getattr(args, "out", None):
        over["train.out"] = args.out
    if getattr(args, "data", None):
        over["data.manifest"] = args.data
    if getattr(args, "split", None):
        over["split.mode"] = args.split
    if getattr(args, "horizons", None) is not None:
        over["model.K"] = str(args.horizons)
    if getattr(args, "transition_prob", None) is not None:
        over["data.transition_prob"] = repr(args.transition_prob)
    if getattr(args, "mask_fraction", None) is not None:
        over["data.mask_fraction"] = repr(args.mask_fraction)
    cfg = cfg.override(**over) if over else cfg
    if cfg.split.mode not in SPLIT_MODES:
        raise ConfigError(f"split.mode must be one of {SPLIT_MODES}, got {cfg.split.mode!r}")
    return cfg


def synthetic_records(cfg: RunConfig):
    d = cfg.data
    if d.corpus:
        corpus = load_corpus(d.corpus)
    else:
        corpus = procedural_corpus(d.corpus_size, size=cfg.model.image_height, seed=cfg.train.seed)
    chain = make_chain(d.transition_prob, n_stages=cfg.model.n_prognosis_classes)
    return build_dataset(corpus, chain, d.n_samples, seed=cfg.train.seed, K=cfg.model.K,
                         mask_fraction=d.mask_fraction, n_centers=d.n_centers)


def load_records(cfg: RunConfig):
    if cfg.data.manifest:
        records, _ = read_manifest(cfg.data.manifest)
    else:
        records = synthetic_records(cfg)
    check_compatible(records, cfg.model)
    return records


# aggregation shared by train summaries and report

def tidy_rows(rows: Sequence[dict]) -> list[dict]:
    """Flatten evaluation rows into (run, p, horizon, metric, mean, std) records.

    Rows are grouped by (run, p); within a group every horizon/metric value is
    averaged over the rows (folds). std is the population standard deviation,
    so a single row gives std 0. Horizon 0 carries the current-stage metrics.
    """
    groups = defaultdict(list)
    K = None
    for r in rows:
        k = len(r["horizons"])
        if K is None:
            K = k
        elif k != K:
            raise ValueError(f"inconsistent horizon counts across logs: {K} and {k}")
        groups[(str(r.get("run", "")), r.get("p"))].append(r)
    out = []
    for (run, p), members in sorted(groups.items(), key=lambda kv: (kv[0][0], -1 if kv[0][1] is None else kv[0][1])):
        values = defaultdict(list)
        for r in members:
            for name, v in r["diag"].items():
                values[(0, f"diag_{name}")].append(v)
            for h in r["horizons"]:
                for name, v in h.items():
                    if name in ("horizon", "n_prognosis", "n_progression"):
                        continue
                    values[(int(h["horizon"]), name)].append(v)
        for (horizon, metric), vs in sorted(values.items(), key=lambda kv: (kv[0][1], kv[0][0])):
            vs = [v for v in vs if v is not None]
            if not vs:
                continue
            out.append({"run": run, "p": p, "horizon": horizon, "metric": metric,
                        "mean": float(np.mean(vs)), "std": float(np.std(vs)), "n": len(vs)})
    return out


def write_tidy_csv(rows: Sequence[dict], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["run", "p", "horizon", "metric", "mean", "std", "n"])
    for r in rows:
        w.writerow([r["run"], "" if r["p"] is None else r["p"], r["horizon"], r["metric"],
                    _fmt_float(r["mean"]), _fmt_float(r["std"]), r["n"]])


def summarize(rows: Sequence[dict]) -> dict:
    tidy = tidy_rows([{**r, "run": "all", "p": None} for r in rows])
    return {"n_runs": len(rows),
            "metrics": [{k: r[k] for k in ("horizon", "metric", "mean", "std", "n")} for r in tidy]}


def _dump_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n")


# commands

def cmd_simulate(args) -> dict:
    cfg = resolve_config(args)
    if args.n is not None:
        cfg = cfg.override(**{"data.n_samples": str(args.n)})
    out = Path(cfg.train.out)
    records = synthetic_records(cfg)
    try:
        write_manifest(records, out / "manifest.csv")
        cfg.override(**{"data.manifest": str(out / "manifest.csv")}).save(out / "config.txt")
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out}: {exc.strerror}") from None
    return {"manifest": str(out / "manifest.csv"), "n": len(records)}


def _train_one(cfg: RunConfig, records, train_idx, valid_idx, out: Path, run: str, fold: str) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    p = None if cfg.data.manifest else cfg.data.transition_prob
    log = JsonlLog(out / "metrics.jsonl", {"run": run, "p": p, "fold": fold})
    trainer = Trainer(cfg, records, out)
    try:
        row = trainer.fit(train_idx, valid_idx, log)
    finally:
        trainer.close()
    return {**row, "run": run, "p": p, "fold": fold}


def cmd_train(args) -> dict:
    cfg = resolve_config(args)
    out = Path(cfg.train.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.txt")
    records = load_records(cfg)
    run = args.run or "run"
    seed = cfg.train.seed
    rows = []
    if cfg.split.mode == "fixed":
        fold = split_holdout(records, cfg.split.valid_fraction, seed)
        rows.append(_train_one(cfg, records, fold.train, fold.test, out, run, "valid"))
    elif cfg.split.mode == "kfold":
        for f in split_kfold(records, cfg.split.k, seed):
            rows.append(_train_one(cfg, records, f.train, f.test, out / f.name, run, f.name))
    else:
        # one center held out for testing; k-fold CV on the rest picks each model's stopping point
        for outer in split_one_center_out(records):
            for inner in split_kfold(records, cfg.split.k, seed, indices=outer.train):
                where = out / f"center_{outer.name}" / inner.name
                _train_one(cfg, records, inner.train, inner.test, where, run, f"{outer.name}/{inner.name}")
                trainer = Trainer(cfg, records)
                try:
                    trainer.load_checkpoint(Checkpoint.load(where / "best.ckpt"))
                    report, _ = trainer.evaluate(outer.test)
                finally:
                    trainer.close()
                row = {"kind": "eval", "split": f"test:{outer.name}", "epoch": trainer.epoch,
                       "run": run, "p": None if cfg.data.manifest else cfg.data.transition_prob,
                       "fold": f"{outer.name}/{inner.name}", **report}
                JsonlLog(where / "test.jsonl")(row)
                rows.append(row)
    summary = summarize(rows)
    summary["mode"] = cfg.split.mode
    _dump_json(summary, out / "summary.json")
    with open(out / "summary.csv", "w", newline="") as fh:
        write_tidy_csv(tidy_rows(rows), fh)
    return {"out": str(out), "runs": len(rows), "mean_ba": float(np.mean([r["ba"] for r in rows]))}


def _checkpoint_dirs(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    found = sorted(path.rglob("best.ckpt"))
    if not found:
        raise CheckpointError(f"no checkpoint found under {path}")
    return found


def cmd_eval(args) -> dict:
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint")
    ckpt_paths = _checkpoint_dirs(Path(args.checkpoint))
    first = Checkpoint.load(ckpt_paths[0])
    base = RunConfig.from_flat(first.extra.get("run_config", {}))
    if args.config:
        requested = RunConfig.load(args.config)
        check_config(first, requested.model.to_dict())
        base = requested
    over = {}
    if args.data:
        over["data.manifest"] = args.data
    if args.transition_prob is not None:
        over["data.transition_prob"] = repr(args.transition_prob)
    if args.mask_fraction is not None:
        over["data.mask_fraction"] = repr(args.mask_fraction)
    if args.seed is not None:
        over["train.seed"] = str(args.seed)
    cfg = base.override(**over) if over else base
    records = load_records(cfg)
    out = Path(args.out or cfg.train.out)
    split = args.split or "all"
    rows, dumps = [], {}
    for path in ckpt_paths:
        ckpt = Checkpoint.load(path)
        run_cfg = RunConfig.from_flat(ckpt.extra.get("run_config", cfg.to_flat()))
        check_config(ckpt, cfg.model.to_dict())
        if split == "all":
            idx = np.arange(len(records))
        elif split == "valid":
            idx = split_holdout(records, run_cfg.split.valid_fraction, run_cfg.train.seed).test
        elif split.startswith("center="):
            c = split.split("=", 1)[1]
            idx = np.flatnonzero([r.center_id == c for r in records])
            if idx.size == 0:
                raise SplitError(f"no records from center {c!r}")
        else:
            raise UsageError(f"--split for eval must be all, valid or center=<id>, got {split!r}")
        trainer = Trainer(cfg, records)
        try:
            trainer.load_checkpoint(ckpt)
            report, pred = trainer.evaluate(idx, record_attention=bool(args.attention_dump))
        finally:
            trainer.close()
        name = str(path.parent.relative_to(args.checkpoint)) if Path(args.checkpoint).is_dir() else path.stem
        rows.append({"kind": "eval", "split": split, "epoch": ckpt.epoch, "fold": name,
                     "run": args.run or "run",
                     "p": None if cfg.data.manifest else cfg.data.transition_prob, **report})
        tag = name.replace("/", "_")
        dumps[f"{tag}/index"] = idx
        dumps[f"{tag}/diag_probs"] = pred.diag
        dumps[f"{tag}/prognosis_probs"] = pred.prognosis
        dumps[f"{tag}/progression_probs"] = pred.progression
        if args.attention_dump:
            for layer, a in enumerate(pred.attention):
                dumps[f"{tag}/attention_layer{layer}"] = a
    out.mkdir(parents=True, exist_ok=True)
    log = JsonlLog(out / "eval.jsonl")
    for r in rows:
        log(r)
    summary = summarize(rows)
    _dump_json(summary, out / "eval_summary.json")
    np.savez(out / "softmax.npz", **{k: v for k, v in dumps.items() if "attention" not in k})
    if args.attention_dump:
        np.savez(args.attention_dump, **{k: v for k, v in dumps.items() if "attention" in k or k.endswith("/index")})
    return {"out": str(out), "folds": len(rows), "ba": [r["ba"] for r in rows]}


def cmd_report(args) -> dict:
    if not args.logs:
        raise UsageError("report needs at least one metrics log")
    rows = []
    for path in args.logs:
        try:
            found = [r for r in read_jsonl(path) if r.get("kind") == "eval"]
        except OSError as exc:
            raise OSError(f"cannot read log {path}: {exc.strerror}") from None
        if not found:
            raise ValueError(f"{path}: no evaluation rows")
        for r in found:
            if args.run_from_path:
                r["run"] = str(Path(path).parent)
        rows.extend(found)
    tidy = tidy_rows(rows)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w", newline="") as fh:
            write_tidy_csv(tidy, fh)
        return {"out": args.out, "rows": len(tidy)}
    buf = io.StringIO()
    write_tidy_csv(tidy, buf)
    sys.stdout.write(buf.getvalue())
    return {"rows": len(tidy)}


def cmd_ingest(args) -> dict:
    if not args.data:
        raise UsageError("ingest needs --data")
    src = Path(args.data)
    if src.suffix == ".npz":
        if not args.out:
            raise UsageError("converting an npz corpus needs --out <archive.pk8>")
        images = load_corpus(src)
        write_packed(args.out, images)
        return {"archive": args.out, "n": int(images.shape[0]),
                "height": int(images.shape[1]), "width": int(images.shape[2])}
    if args.visit_months:
        months = [int(m) for m in args.visit_months.split(",")]
        with open(src, newline="") as fh:
            visits = list(csv.DictReader(fh))
        tol = RunConfig.load(args.config).data.align_tolerance_months if args.config else 6
        rows = pivot_visits(visits, months, tolerance_months=tol)
        if not args.out:
            raise UsageError("pivoting visits needs --out <manifest.csv>")
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w", newline="") as fh:
            cols = ["image", "center_id", "subject_id"] + [f"y{k}" for k in range(len(months))]
            w = csv.DictWriter(fh, cols, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        src = Path(args.out)
    records, report = read_manifest(src)
    if args.out and not args.visit_months:
        _dump_json(report, Path(args.out))
    report["manifest"] = str(src)
    return report


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="prognosis", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, *flags):
        if "config" in flags:
            p.add_argument("--config", help="flat key = value config file")
        if "seed" in flags:
            p.add_argument("--seed", type=int)
        if "out" in flags:
            p.add_argument("--out")
        if "data" in flags:
            p.add_argument("--data", help="manifest CSV (default: synthetic data from the config)")
        if "split" in flags:
            p.add_argument("--split")
        if "horizons" in flags:
            p.add_argument("--horizons", type=int, help="number of follow-up horizons K")
        if "chain" in flags:
            p.add_argument("--transition-prob", type=float)
            p.add_argument("--mask-fraction", type=float)

    p = sub.add_parser("simulate", help="write a synthetic rotation dataset as manifest + archive")
    common(p, "config", "seed", "out", "horizons", "chain")
    p.add_argument("--n", type=int, help="number of samples")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train and persist the best checkpoint")
    common(p, "config", "seed", "out", "data", "split", "horizons", "chain")
    p.add_argument("--run", help="run label written into the logs (default: run)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate checkpoint(s) and emit per-horizon metrics")
    common(p, "config", "seed", "out", "data", "split", "chain")
    p.add_argument("--checkpoint", help="checkpoint file or a training output directory")
    p.add_argument("--attention-dump", help="write attention maps to this .npz file")
    p.add_argument("--run")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="aggregate metric logs into a tidy CSV")
    p.add_argument("logs", nargs="*")
    p.add_argument("--out")
    p.add_argument("--run-from-path", action="store_true",
                   help="label each log by its directory instead of the logged run name")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("ingest", help="validate a manifest, convert a corpus or pivot visit rows")
    common(p, "config", "out", "data")
    p.add_argument("--visit-months", help="comma list of horizon months for pivoting visit rows")
    p.set_defaults(func=cmd_ingest)
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": " ".join(str(message).split())}) + "\n")
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a subcommand is required: simulate, train, eval, report or ingest")
        result = args.func(args)
    except UsageError as exc:
        return _fail("usage", str(exc), 2)
    except NonFiniteLossError as exc:
        return _fail("non_finite_loss", str(exc), 3)
    except (ConfigError, CheckpointError, ManifestError, CorpusError, SplitError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    except (ValueError, OSError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    if args.command != "report" or result.get("out"):
        sys.stdout.write(json.dumps(result, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
