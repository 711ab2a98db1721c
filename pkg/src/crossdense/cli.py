"""Command line entry point.

Subcommands: train, eval, attack, corrupt, gradcheck, export-graph. Every
command takes a JSON config (validated against the published schema) and
writes only inside the configured output directory. Exit codes: 0 success,
2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import rng as rng_mod
from .attacks import robust_accuracy
from .checkpoint import apply_checkpoint, checkpoint_hash, save_checkpoint
from .config import (RunConfig, apply_normalization, corruption_kinds,
                     corruption_severities, corruption_table, load_config,
                     load_schema, make_datasets, make_model, model_from_section)
from .corruptions import (cache_corrupted_sets, mce, model_predict,
                          severity_errors)
from .errors import (CheckpointError, ConfigError, CrossdenseError, DataError,
                     NumericError)
from .gradcheck import model_gradcheck
from .model import export_graph
from .optim import Schedule, SgdConfig, evaluate, train
from .report import EvalReport
from .tensor import Precision

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _schema_doc_lines() -> list[str]:
    """One `key  description` line per config key, straight from the schema
    so --help can never fall out of sync with validation."""
    schema = load_schema()
    defs = schema.get("$defs", {})

    def walk(node, prefix):
        if "$ref" in node:
            node = defs[node["$ref"].rsplit("/", 1)[-1]]
        lines = []
        for key, sub in node.get("properties", {}).items():
            dotted = f"{prefix}{key}"
            desc = sub.get("description", "")
            lines.append(f"  {dotted:34s} {desc}")
            inner = sub
            if inner.get("type") == "array" and "items" in inner \
                    and isinstance(inner["items"], dict):
                inner = inner["items"]
            lines.extend(walk(inner, dotted + "."))
        return lines

    return walk(schema, "")


def _build_parser() -> argparse.ArgumentParser:
    epilog = "config file keys:\n" + "\n".join(_schema_doc_lines())
    parser = argparse.ArgumentParser(
        prog="crossdense",
        description="Train and evaluate cross-connected dense ensemble CNNs.",
        epilog=epilog,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("-c", "--config", required=True, help="JSON run config")
        p.add_argument("--output-dir", help="override the config output_dir")
        if checkpoint:
            p.add_argument("--checkpoint",
                           help="model checkpoint (default: <output_dir>/checkpoint.dcce)")
            p.add_argument("--workers", type=int,
                           help="parallel eval batches (default from config; 1 = bit-reproducible)")

    common(sub.add_parser("train", help="train a model, write checkpoint and log"))
    common(sub.add_parser("eval", help="clean accuracy report"), checkpoint=True)
    common(sub.add_parser("attack", help="adversarial robustness report"),
           checkpoint=True)
    common(sub.add_parser("corrupt", help="corruption robustness report (CE, mCE)"),
           checkpoint=True)

    g = sub.add_parser("gradcheck", help="finite-difference audit of the model gradients")
    common(g)
    g.add_argument("--tolerance", type=float, default=1e-3,
                   help="max relative error allowed (default 1e-3)")
    g.add_argument("--sample", type=int, default=0,
                   help="probe at most N elements per tensor (0 = all)")

    e = sub.add_parser("export-graph", help="write the wiring plan as dot or json")
    common(e)
    e.add_argument("--format", choices=("dot", "json"), default="dot")
    return parser


def _prepare(args) -> tuple[RunConfig, Path]:
    cfg = load_config(args.config)
    outdir = Path(args.output_dir) if args.output_dir else cfg.output_dir
    outdir.mkdir(parents=True, exist_ok=True)
    return cfg, outdir


def _load_model(cfg: RunConfig, args, outdir: Path):
    model = make_model(cfg)
    apply_normalization(model, cfg)
    ckpt = Path(args.checkpoint) if getattr(args, "checkpoint", None) \
        else outdir / "checkpoint.dcce"
    apply_checkpoint(model, ckpt)
    return model, ckpt


def _report(cfg: RunConfig, baseline_id=None) -> EvalReport:
    return EvalReport(config_hash=cfg.hash, seed=cfg.seed,
                      version=__version__, baseline_id=baseline_id)


def cmd_train(args) -> int:
    cfg, outdir = _prepare(args)
    train_set, test_set = make_datasets(cfg)
    model = make_model(cfg)
    apply_normalization(model, cfg)
    epochs = cfg.train.get("epochs", 0)
    sched = Schedule(lr0=cfg.train.get("lr0", 0.1),
                     total_epochs=max(epochs, 1))
    sgd = SgdConfig(momentum=cfg.train.get("momentum", 0.9),
                    weight_decay=cfg.train.get("weight_decay", 5e-4))
    model, log = train(model, train_set, epochs=epochs,
                       batch_size=cfg.train.get("batch_size", 128),
                       sched=sched, sgd=sgd, augment_cfg=cfg.augment,
                       seed=cfg.seed, val_set=test_set)
    save_checkpoint(outdir / "checkpoint.dcce", model)
    log.write(outdir / "train_log.csv")
    print(f"wrote {outdir / 'checkpoint.dcce'} and train_log.csv "
          f"({len(log.rows)} epochs)")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, outdir = _prepare(args)
    _, test_set = make_datasets(cfg)
    model, _ = _load_model(cfg, args, outdir)
    report = _report(cfg)
    report.add("clean_accuracy", test_set.split or "test", evaluate(model, test_set))
    report.add("param_count", "model", model.param_count())
    report.write(outdir / "eval_report.csv")
    print(f"wrote {outdir / 'eval_report.csv'}")
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg, outdir = _prepare(args)
    _, test_set = make_datasets(cfg)
    model, _ = _load_model(cfg, args, outdir)
    workers = args.workers or cfg.workers
    report = _report(cfg)
    report.add("clean_accuracy", "test", evaluate(model, test_set))
    for spec in cfg.attacks:
        condition = f"{spec.kind}_eps{spec.params.epsilon:g}"
        if spec.kind == "pgd":
            condition += f"_steps{spec.params.steps}"
        acc = robust_accuracy(model, test_set, spec.kind, spec.params,
                              seed=cfg.seed, workers=workers)
        report.add("robust_accuracy", condition, acc)
    report.write(outdir / "attack_report.csv")
    print(f"wrote {outdir / 'attack_report.csv'}")
    return EXIT_OK


def cmd_corrupt(args) -> int:
    cfg, outdir = _prepare(args)
    _, test_set = make_datasets(cfg)
    model, ckpt = _load_model(cfg, args, outdir)
    table = corruption_table(cfg)
    kinds = corruption_kinds(cfg)
    severities = corruption_severities(cfg)

    baseline_section = cfg.corruption.get("baseline")
    if baseline_section:
        baseline = model_from_section(baseline_section["model"], cfg.seed,
                                      cfg.precision)
        apply_normalization(baseline, cfg)
        apply_checkpoint(baseline, baseline_section["checkpoint"])
        baseline_id = checkpoint_hash(baseline_section["checkpoint"])
    else:
        baseline = model
        baseline_id = checkpoint_hash(ckpt)

    report = _report(cfg, baseline_id=baseline_id)
    model_ce, baseline_ce = {}, {}
    for kind in kinds:
        errs = severity_errors(model_predict(model), test_set, kind,
                               seed=cfg.seed, table=table, severities=severities)
        for s, e in zip(severities, errs):
            report.add("corruption_error", f"{kind}_s{s}", e)
        model_ce[kind] = float(sum(errs))
        report.add("corruption_error", kind, model_ce[kind])
        if baseline is model:
            baseline_ce[kind] = model_ce[kind]
        else:
            baseline_ce[kind] = float(sum(severity_errors(
                model_predict(baseline), test_set, kind,
                seed=cfg.seed, table=table, severities=severities)))
    report.add("mce", "overall", mce(model_ce, baseline_ce))
    if cfg.corruption.get("write_cache"):
        cache_corrupted_sets(test_set, kinds, outdir / "corruption_cache",
                             seed=cfg.seed, table=table)
    report.write(outdir / "corruption_report.csv")
    print(f"wrote {outdir / 'corruption_report.csv'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg, outdir = _prepare(args)
    # F64 for finite-difference conditioning; dropout off because FD through
    # a resampled mask is not a derivative of anything
    section = dict(cfg.doc["model"])
    section["dropout_rate"] = 0.0
    model = model_from_section(section, cfg.seed, Precision.F64)
    shape = cfg.model_cfg.resolved().input_shape
    classes = cfg.model_cfg.resolved().num_classes
    g = rng_mod.stream(cfg.seed, "gradcheck")
    images = g.random((2, *shape))
    labels = np.arange(2) % classes
    report = model_gradcheck(model, images, labels, tol=args.tolerance,
                             max_elements=args.sample,
                             rng=np.random.default_rng(cfg.seed))
    text = "\n".join(report.lines()) + "\n"
    (outdir / "gradcheck_report.txt").write_text(text)
    print(text, end="")
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_export_graph(args) -> int:
    cfg, outdir = _prepare(args)
    model = make_model(cfg)
    path = outdir / f"graph.{args.format}"
    path.write_text(export_graph(model, args.format))
    print(f"wrote {path}")
    return EXIT_OK


_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "attack": cmd_attack,
    "corrupt": cmd_corrupt,
    "gradcheck": cmd_gradcheck,
    "export-graph": cmd_export_graph,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, CheckpointError) as e:
        print(f"error: config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"error: data: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"error: numeric: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except CrossdenseError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
