"""Command-line entry point: ``abevo <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure or undefined metric.

Config files are flat ``key = value`` text. Keys are prefixed by the section they configure
(``model.hidden``, ``mlm.steps``, ``evolution.lr``, ``finetune.epochs``, ``task.folds``,
``library.n_v``); simulate reads unprefixed repertoire keys. Precedence, lowest first: config file,
the ``SEED`` environment variable, command-line flags.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import __version__, config
from .corpus import (DataError, cluster_filter, dedup, read_binder_db, read_chunks, read_records, read_scores,
                     shuffle_and_chunk, split_chunks, write_chunks, write_csv)
from .evaluation import EvalReport, UndefinedMetricError, plots, read_curve_csv, task_specificity
from .model import Checkpoint, ModelConfig, Transformer
from .model import checkpoint as ckpt_io
from .seqcore import FastaError
from .simgen import STAGES, GeneLibrary, LibraryConfig, RepertoireSpec, generate_repertoire
from .tasks import TaskConfig, run_bcell, run_binding, run_discovery, run_paratope, stage_index
from .train import NumericError, TrainConfig, check_head_gradients, finetune, pretrain, write_log

log = logging.getLogger("abevo")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOLERANCE = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --- config helpers ------------------------------------------------------------

def _section(values: dict[str, str], prefix: str) -> dict[str, str]:
    p = prefix + "."
    return {k[len(p):]: v for k, v in values.items() if k.startswith(p)}


def _seed(args) -> Optional[int]:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"SEED must be an integer, got {env!r}") from None
    return None


def _read_config(path: str) -> dict[str, str]:
    try:
        return config.read_kv(path)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _load_values(args) -> dict[str, str]:
    return _read_config(args.config) if getattr(args, "config", None) else {}


def _build(cls, values: dict[str, str], seed: Optional[int], **overrides):
    merged: dict[str, Any] = dict(values)
    if seed is not None and "seed" in {f.name for f in dataclasses.fields(cls)}:
        merged["seed"] = seed
    merged.update({k: v for k, v in overrides.items() if v is not None})
    try:
        built = config.from_mapping(cls, merged, strict=True)
        if hasattr(built, "validate"):
            built.validate()
    except (TypeError, ValueError) as exc:
        # a bad key or value in a config file is an invocation problem, not a data problem
        raise UsageError(str(exc)) from None
    return built


def _model_cfg(values, seed) -> ModelConfig:
    return _build(ModelConfig, _section(values, "model"), seed)


def _task_cfg(values, seed, **overrides) -> TaskConfig:
    ft = _build(TrainConfig, {"phase": "finetune", "epochs": "10", "lr": "3e-4", "warmup": "20", "patience": "3",
                              **_section(values, "finetune")}, seed)
    task = _build(TaskConfig, _section(values, "task"), seed, **overrides)
    task.finetune = ft
    return task


def _load_model(args, values, seed) -> Transformer:
    if getattr(args, "checkpoint", None):
        return ckpt_io.load(args.checkpoint).model()
    return Transformer(_model_cfg(values, seed))


# --- output helpers --------------------------------------------------------------

class Run:
    """Collects outputs under ``out_dir`` and writes ``manifest.json`` beside them."""

    def __init__(self, args, out_dir: str | Path):
        self.args = args
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.outputs: list[str] = []

    def path(self, name: str) -> Path:
        p = self.out / name
        self.outputs.append(name)
        return p

    def write_text(self, name: str, text: str) -> Path:
        p = self.path(name)
        p.write_text(text)
        return p

    def write_json(self, name: str, obj) -> Path:
        return self.write_text(name, json.dumps(obj, sort_keys=True, indent=2) + "\n")

    def finish(self, inputs: dict[str, Optional[str]], seed: Optional[int]) -> None:
        epoch = os.environ.get("SOURCE_DATE_EPOCH")
        now = (datetime.datetime.fromtimestamp(int(epoch), datetime.timezone.utc) if epoch
               else datetime.datetime.now(datetime.timezone.utc))
        manifest = {
            "subcommand": self.args.command,
            "config": getattr(self.args, "config", None),
            "seed": seed,
            "inputs": {k: v for k, v in sorted(inputs.items()) if v is not None},
            "outputs": sorted(self.outputs),
            "version": __version__,
            "timestamp": now.isoformat(timespec="seconds"),
        }
        (self.out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def _records(path: str):
    p = Path(path)
    if p.is_dir():
        train, valid = split_chunks(read_chunks(p))
        return train, valid
    return read_records(p), None


def _report_files(run: Run, report: EvalReport, stem: str = "report") -> None:
    for p in report.write(run.out, stem):
        run.outputs.append(p.name)


def _svg_for_report(run: Run, report: EvalReport, stem: str = "report") -> None:
    for name, c in sorted(report.curves.items()):
        svg = plots.line_chart({"ranking": (c.x, c.y), "random order": (c.x, c.baseline)},
                               title=f"{report.task} cumulative matches ({name})", xlabel="rank",
                               ylabel="matched sequences")
        plots.write_svg(svg, run.path(f"{stem}.curve.{name}.svg"))
    if report.confusion is not None:
        plots.write_svg(plots.heatmap(report.confusion, report.class_names, title=f"{report.task} confusion"),
                        run.path(f"{stem}.confusion.svg"))


# --- subcommands ---------------------------------------------------------------

def cmd_simulate(args) -> int:
    seed = _seed(args)
    values = _read_config(args.spec) if args.spec else {}
    spec = _build(RepertoireSpec, {k: v for k, v in values.items() if "." not in k}, seed)
    lib = GeneLibrary.random(_build(LibraryConfig, _section(values, "library"), None))
    records = generate_repertoire(spec, lib)
    run = Run(args, args.out)
    write_csv(records, run.path("repertoire.csv"))
    carriers = sorted({r.cdr3 for r in records if r.extra.get("motif") and r.cdr3})
    if carriers:
        run.write_text("binders.txt", "".join(c + "\n" for c in carriers))
    print(f"simulated {len(records)} records -> {run.out / 'repertoire.csv'}")
    run.finish({"spec": args.spec}, spec.seed)
    return EXIT_OK


def cmd_preprocess(args) -> int:
    seed = _seed(args) or 0
    records = read_records(args.input)
    unique = dedup(records)
    kept = cluster_filter(unique, args.identity)
    chunks = shuffle_and_chunk(kept, args.chunk_size, seed)
    run = Run(args, args.out)
    for p in write_chunks(chunks, run.out / "chunks"):
        run.outputs.append(str(p.relative_to(run.out)))
    run.write_json("summary.json", {"input": len(records), "deduplicated": len(unique), "clustered": len(kept),
                                    "chunks": len(chunks), "identity_threshold": args.identity})
    print(f"{len(records)} -> {len(unique)} unique -> {len(kept)} after clustering; {len(chunks)} chunks")
    run.finish({"input": args.input}, seed)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    seed = _seed(args)
    values = _load_values(args)
    model_cfg = _model_cfg(values, seed)
    mlm = _build(TrainConfig, {"phase": "mlm", **_section(values, "mlm")}, seed)
    evo_values = _section(values, "evolution")
    evolution = _build(TrainConfig, {"phase": "evolution", "lr": "1e-4", **evo_values}, seed)
    if args.mlm_only:
        evolution = None
    train, valid = _records(args.data)
    if valid is None:
        chunks = shuffle_and_chunk(train, max(1, len(train) - max(1, len(train) // 10)), mlm.seed)
        train, valid = split_chunks(chunks)
    res = pretrain(train, valid, model_cfg, mlm, evolution)
    run = Run(args, args.out)
    ckpt_io.save(ckpt_io.from_model(res.model, res.step, res.optimizer, {"phases": ["mlm"] if evolution is None
                                                                         else ["mlm", "evolution"]}),
                 run.path("checkpoint.bin"))
    write_log(res.log_rows, run.path("log.csv"))
    run.write_json("diagnostics.json", [dataclasses.asdict(d) for d in res.history])
    if res.history:
        d = res.history[-1]
        print(f"step {d.step}: mlm {d.mlm_accuracy:.3f} agp {d.germline_accuracy:.3f} "
              f"position {d.position_accuracy:.3f} mutation {d.mutation_accuracy:.3f}")
    run.finish({"data": args.data, "config": args.config}, seed)
    return EXIT_OK


HEADS = {"binding": "binary-seq", "paratope": "token-label", "bcell": "multiclass-seq", "discovery": "binary-seq"}


def cmd_finetune(args) -> int:
    seed = _seed(args)
    values = _load_values(args)
    task = _task_cfg(values, seed)
    model = _load_model(args, values, seed)
    records, _ = _records(args.data)
    train = [r for r in records if r.split in (None, "train")]
    valid = [r for r in records if r.split == "valid"]
    n_classes, label_fn = (len(STAGES), stage_index) if args.task == "bcell" else (2, None)
    res = finetune(model, train, valid, HEADS[args.task], task.finetune, n_classes=n_classes, label_fn=label_fn)
    run = Run(args, args.out)
    ckpt_io.save(ckpt_io.from_model(res.model, 0, None, {"task": args.task, "head_kind": res.head_kind,
                                                          "best_epoch": res.best_epoch}),
                 run.path("finetuned.bin"))
    run.write_json("history.json", res.history)
    print(f"best epoch {res.best_epoch} of {len(res.history)}")
    run.finish({"data": args.data, "checkpoint": args.checkpoint, "config": args.config}, seed)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    seed = _seed(args)
    values = _load_values(args)
    task = _task_cfg(values, seed, folds=args.folds)
    records, _ = _records(args.data)
    scores = None
    model = None
    if args.scores:
        if args.task != "binding":
            raise UsageError("--scores carries one score per sequence and only applies to the binding task")
        scores = read_scores(args.scores)
    else:
        model = _load_model(args, values, seed)
    runner = {"binding": run_binding, "paratope": run_paratope, "bcell": run_bcell}[args.task]
    report = runner(records, model, task, scores) if scores is not None else runner(records, model, task)
    run = Run(args, args.out)
    _report_files(run, report)
    _svg_for_report(run, report)
    _print_report(report)
    run.finish({"data": args.data, "checkpoint": args.checkpoint, "scores": args.scores, "config": args.config}, seed)
    return EXIT_NUMERIC if report.errors else EXIT_OK


def cmd_discover(args) -> int:
    seed = _seed(args)
    values = _load_values(args)
    task = _task_cfg(values, seed, trim=args.trim, folds=args.folds)
    records, _ = _records(args.profiles)
    db = read_binder_db(args.db)
    scores = read_scores(args.scores) if args.scores else None
    model = None if scores is not None else _load_model(args, values, seed)
    result = run_discovery(records, model, db, task, scores)
    run = Run(args, args.out)
    _report_files(run, result.report)
    _svg_for_report(run, result.report)
    with open(run.path("ranked.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "cdr3", "score"])
        for rid, cdr3, s in result.ranked:
            w.writerow([rid, cdr3, f"{s:.12g}"])
    _print_report(result.report)
    run.finish({"profiles": args.profiles, "db": args.db, "checkpoint": args.checkpoint, "scores": args.scores,
                "config": args.config}, seed)
    return EXIT_OK


def cmd_stats(args) -> int:
    records, _ = _records(args.data)
    if args.label == "stage":
        labels = [stage_index(r) for r in records]
    elif args.label == "label":
        labels = [r.label for r in records]
        if any(y is None for y in labels):
            raise DataError("every record needs a label for --label label")
    else:
        labels = [r.profile_id for r in records]
    rep = task_specificity(records, labels, args.test)
    run = Run(args, args.out)
    run.write_json("specificity.json", rep.to_dict())
    print(f"germline usage p={rep.germline_usage_pvalue:.4g}  mutation count p={rep.mutation_count_pvalue:.4g}  "
          f"specificity {rep.level()}")
    run.finish({"data": args.data}, _seed(args))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = _seed(args) or 0
    values = _load_values(args)
    base = {"layers": "2", "heads": "2", "hidden": "8", "ffn": "16", "max_len": "64"}
    cfg = _build(ModelConfig, {**base, **_section(values, "model")}, None)
    errors = check_head_gradients(cfg, args.checks, seed)
    worst = max(errors.values())
    for k, v in errors.items():
        print(f"{k}: {v:.3e}")
    print(f"max relative error {worst:.3e}")
    if args.out:
        run = Run(args, args.out)
        run.write_json("gradcheck.json", {"errors": errors, "max": worst, "tolerance": GRADCHECK_TOLERANCE})
        run.finish({"config": args.config}, seed)
    return EXIT_OK if worst < GRADCHECK_TOLERANCE else EXIT_NUMERIC


def cmd_plot(args) -> int:
    run = Run(args, args.out)
    if args.report:
        report = json.loads(Path(args.report).read_text())
        for name, c in sorted(report.get("curves", {}).items()):
            svg = plots.line_chart({"ranking": (c["x"], c["y"]), "random order": (c["x"], c["baseline"])},
                                   title=f"cumulative matches ({name})", xlabel="rank", ylabel="matched sequences")
            plots.write_svg(svg, run.path(f"curve.{name}.svg"))
        if report.get("confusion") is not None:
            plots.write_svg(plots.heatmap(np.array(report["confusion"]), report.get("class_names") or [],
                                          title="confusion (row-normalized)"), run.path("confusion.svg"))
    if args.curve:
        c = read_curve_csv(args.curve)
        plots.write_svg(plots.line_chart({"ranking": (c.x, c.y), "random order": (c.x, c.baseline)},
                                         xlabel="rank", ylabel="matched sequences"),
                        run.path(Path(args.curve).stem + ".svg"))
    if args.log:
        with open(args.log, newline="") as fh:
            rows = list(csv.DictReader(fh))
        xs = [float(r["step"]) for r in rows]
        ys = [float(r["loss"]) for r in rows]
        plots.write_svg(plots.line_chart({"loss": (xs, ys)}, title="training loss", xlabel="step", ylabel="loss"),
                        run.path("loss.svg"))
    if not (args.report or args.curve or args.log):
        raise UsageError("plot needs at least one of --report, --curve, --log")
    run.finish({"report": args.report, "curve": args.curve, "log": args.log}, _seed(args))
    return EXIT_OK


def _print_report(report: EvalReport) -> None:
    parts = [f"{k}={getattr(report, k):.4f}" for k in ("acc", "auc", "f1", "mcc") if getattr(report, k) is not None]
    print(f"{report.task}: " + " ".join(parts))
    for k, v in sorted(report.errors.items()):
        print(f"  {k}: undefined ({v})")
    for row in report.hit_table:
        print(f"  identity {row.identity_threshold:.2f} prob>{row.prob_threshold:.1f}: "
              f"{row.hits}/{row.total} = {row.hit_rate:.3f}%")


# --- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="overrides the config file and the SEED variable")
    common.add_argument("--threads", type=int, default=None, help="BLAS thread cap (default: all logical cores)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="abevo", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"abevo {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", parents=[common], help="generate a synthetic repertoire")
    p.add_argument("--spec", help="repertoire config (RepertoireSpec keys, library.* keys)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("preprocess", parents=[common], help="deduplicate, cluster-filter and chunk a corpus")
    p.add_argument("--input", required=True, help="corpus CSV or JSONL")
    p.add_argument("--out", required=True)
    p.add_argument("--identity", type=float, default=0.7, help="CDR-H3 cluster identity threshold")
    p.add_argument("--chunk-size", type=int, default=1000)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("pretrain", parents=[common], help="MLM then evolution-aware pretraining")
    p.add_argument("--data", required=True, help="chunk directory from preprocess, or a corpus file")
    p.add_argument("--config", help="model.*, mlm.*, evolution.* keys")
    p.add_argument("--mlm-only", action="store_true", help="skip the evolution phase")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", parents=[common], help="train a task head on a labeled dataset")
    p.add_argument("--task", required=True, choices=sorted(HEADS))
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", help="pretrained checkpoint (default: randomly initialized model)")
    p.add_argument("--config", help="model.*, finetune.* keys")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", parents=[common], help="cross-validated benchmark for one task")
    p.add_argument("--task", required=True, choices=["bcell", "binding", "paratope"])
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--scores", help="external id,score CSV; skips training")
    p.add_argument("--config", help="model.*, finetune.*, task.* keys")
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("discover", parents=[common], help="noisy-label discovery and known-binder matching")
    p.add_argument("--profiles", required=True, help="corpus file with profile_id and profile labels")
    p.add_argument("--db", required=True, help="known binder CDR-H3 list, one per line")
    p.add_argument("--checkpoint")
    p.add_argument("--scores", help="external id,score CSV; skips training")
    p.add_argument("--config", help="model.*, finetune.*, task.* keys")
    p.add_argument("--trim", type=float, default=None, help="trimmed-mean fraction per tail (default 0.1)")
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_discover)

    p = sub.add_parser("stats", parents=[common], help="germline-usage and mutation-count specificity tests")
    p.add_argument("--data", required=True)
    p.add_argument("--label", choices=["label", "stage", "profile"], default="label")
    p.add_argument("--test", choices=["kruskal", "welch"], default="kruskal")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every loss head")
    p.add_argument("--config", help="model.* keys for the tiny model")
    p.add_argument("--checks", type=int, default=300)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("plot", parents=[common], help="SVG charts from reports, curves or training logs")
    p.add_argument("--report")
    p.add_argument("--curve")
    p.add_argument("--log")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def _thread_limit(n: Optional[int]):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be at least 1")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except UsageError as exc:
        print(f"abevo {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, UndefinedMetricError, FloatingPointError) as exc:
        print(f"abevo {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FastaError, ValueError, KeyError, OSError) as exc:
        print(f"abevo {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
