"""Single command-line entry point for the whole pipeline.

Subcommands: generate, stats, preprocess, train, transfer, evaluate,
attribute, selftest.  Flags override config-file values; every run writes
its fully resolved configuration next to its artifacts.  Exit codes:
0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import attribution as attr
from . import beamstats as bs
from . import config as cfgmod
from . import dataset as ds
from . import reporting
from . import resnet as rn
from . import selftest
from . import synth
from . import trainer as tr
from .errors import DataError, InvalidConfig, NumericError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="beamsight", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p):
        p.add_argument("--config", type=str, default=None, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=None,
                       help="intra-stage parallelism cap; 1 implies deterministic mode")
        p.add_argument("--out", type=str, default=None, help="output root directory")

    p = sub.add_parser("generate", help="write a synthetic roof-texture corpus")
    common(p)
    p.add_argument("--n-hazard", type=int, default=None)
    p.add_argument("--n-safe", type=int, default=None)
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--corpus", type=str, default=None, help="corpus directory to write")

    p = sub.add_parser("stats", help="beam-map circle statistics and t-tests")
    common(p)
    p.add_argument("--map", dest="map_path", type=str, default=None,
                   help="beam-map JSON (defaults to the bundled sample map)")
    p.add_argument("--radius", type=float, default=9.0)
    p.add_argument("--test", choices=("welch", "paired"), default="welch")

    p = sub.add_parser("preprocess", help="tile a corpus and split train/validation")
    common(p)
    p.add_argument("--corpus", type=str, default=None)
    p.add_argument("--per-tile-split", action="store_true",
                   help="split individual tiles instead of whole source images")

    p = sub.add_parser("train", help="train a classifier from scratch on a corpus")
    common(p)
    p.add_argument("--corpus", type=str, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)

    p = sub.add_parser("transfer", help="source pretraining, head-only retraining, scratch baseline")
    common(p)
    p.add_argument("--corpus", type=str, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--source-epochs", type=int, default=None)

    p = sub.add_parser("evaluate", help="confusion matrix of a checkpoint on a corpus")
    common(p)
    p.add_argument("--checkpoint", type=str, default=None)
    p.add_argument("--corpus", type=str, default=None)

    p = sub.add_parser("attribute", help="integrated-gradients heatmaps for corpus tiles")
    common(p)
    p.add_argument("--checkpoint", type=str, default=None)
    p.add_argument("--corpus", type=str, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--limit", type=int, default=None, help="max tiles per label")

    p = sub.add_parser("selftest", help="gradient-check, completeness, and t-CDF oracle suites")
    common(p)
    p.add_argument("--gradient-instances", type=int, default=20)
    return parser


def _resolve_config(args) -> cfgmod.RunConfig:
    cfg = cfgmod.load_config(args.config) if args.config else cfgmod.RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.synth = replace(cfg.synth, seed=args.seed)
        cfg.split = replace(cfg.split, seed=args.seed)
        cfg.hparams = replace(cfg.hparams, seed=args.seed)
    if args.workers is not None:
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
        cfg.workers = args.workers
        if args.workers == 1:
            cfg.deterministic = True
    if args.out is not None:
        cfg.paths.out_root = args.out
    for flag, target in (("epochs", "epochs"), ("batch_size", "batch_size"),
                         ("learning_rate", "learning_rate")):
        if getattr(args, flag, None) is not None:
            cfg.hparams = replace(cfg.hparams, **{target: getattr(args, flag)})
    if getattr(args, "image_size", None) is not None:
        cfg.synth = replace(cfg.synth, image_size=args.image_size)
    if getattr(args, "n_hazard", None) is not None:
        cfg.generate = replace(cfg.generate, n_hazard=args.n_hazard)
    if getattr(args, "n_safe", None) is not None:
        cfg.generate = replace(cfg.generate, n_safe=args.n_safe)
    if getattr(args, "steps", None) is not None:
        cfg.attribution = replace(cfg.attribution, steps=args.steps)
    if getattr(args, "source_epochs", None) is not None:
        cfg.source_task = replace(cfg.source_task, epochs=args.source_epochs)
    if getattr(args, "corpus", None):
        cfg.paths.corpus_root = args.corpus
    if getattr(args, "checkpoint", None):
        cfg.paths.checkpoint = args.checkpoint
    if getattr(args, "per_tile_split", False):
        cfg.split = replace(cfg.split, group_by_source=False)
    cfg.validate()
    return cfg


def _load_tiles(cfg: cfgmod.RunConfig):
    samples = synth.read_corpus(cfg.paths.corpus_root)
    tiles = [t for s in samples for t in ds.tile4(s)]
    return ds.split(tiles, cfg.split)


def _sample_map_path() -> Path:
    return Path(__file__).parent / "data" / "sample_beam_map.json"


def cmd_generate(args) -> int:
    cfg = _resolve_config(args)
    gen = cfg.generate
    if gen.n_hazard <= 0 or gen.n_safe <= 0:
        raise UsageError("counts must be positive")
    out_dir = cfg.out_root() / "generate"
    corpus = Path(cfg.paths.corpus_root)
    cfgmod.write_resolved(cfg, out_dir, "generate")
    synth.generate_corpus(gen.n_hazard, gen.n_safe, cfg.synth, corpus, workers=cfg.workers)
    print(f"wrote {gen.n_hazard} hazard + {gen.n_safe} safe images to {corpus}")
    return EXIT_OK


def cmd_stats(args) -> int:
    cfg = _resolve_config(args)
    map_path = Path(args.map_path) if args.map_path else _sample_map_path()
    bmap = bs.parse_beam_map(map_path)
    if args.radius <= 0:
        raise UsageError("--radius must be positive")
    report = bs.summary_table(bmap, radius=args.radius, test_kind=args.test)
    out_dir = cfg.out_root() / "stats"
    out_dir.mkdir(parents=True, exist_ok=True)
    cfgmod.write_resolved(cfg, out_dir, "stats")
    reporting.write_stats_tsv(report, out_dir / "summary.tsv")
    reporting.write_stats_text(report, out_dir / "summary.txt")
    reporting.plot_group_comparison(report, out_dir / "group_comparison.png")
    sys.stdout.write(reporting.stats_text(report))
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cfg = _resolve_config(args)
    out_dir = cfg.out_root() / "preprocess"
    out_dir.mkdir(parents=True, exist_ok=True)
    cfgmod.write_resolved(cfg, out_dir, "preprocess")
    samples = synth.read_corpus(cfg.paths.corpus_root)
    tiles = [t for s in samples for t in ds.tile4(s)]
    train_set, val_set = ds.split(tiles, cfg.split)
    labels = sorted({t.label for t in tiles})
    counts = {
        "tiles": {lab: sum(t.label == lab for t in tiles) for lab in labels},
        "train": {lab: sum(t.label == lab for t in train_set) for lab in labels},
        "val": {lab: sum(t.label == lab for t in val_set) for lab in labels},
    }
    (out_dir / "counts.json").write_text(json.dumps(counts, indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
    with open(out_dir / "split.tsv", "w", encoding="utf-8") as fh:
        fh.write("source_id\ttile_index\tlabel\tsubset\n")
        for subset, members in (("train", train_set), ("val", val_set)):
            for t in members:
                fh.write(f"{t.source_id}\t{t.tile_index}\t{t.label}\t{subset}\n")
    for lab in labels:
        print(f"{lab}: {counts['tiles'][lab]} tiles -> "
              f"{counts['train'][lab]} train / {counts['val'][lab]} val")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out_dir = cfg.out_root() / "train"
    out_dir.mkdir(parents=True, exist_ok=True)
    cfgmod.write_resolved(cfg, out_dir, "train")
    train_set, val_set = _load_tiles(cfg)
    classes = tr.class_index(train_set + val_set)
    mcfg = replace(cfg.model, num_classes=len(classes))
    model = rn.apply_freeze_policy(rn.build_model(mcfg, seed=cfg.seed), "none")
    history, best = tr.train(model, train_set, val_set, cfg.hparams, classes=classes)
    reporting.write_history_tsv(history, out_dir / "history.tsv")
    reporting.plot_histories({"train": history}, out_dir / "accuracy_curves.png")
    (out_dir / "best.ckpt").write_bytes(best)
    best_model = rn.model_from_bytes(best)
    cm, acc = tr.evaluate(best_model, val_set, cfg.hparams.batch_size, classes)
    reporting.write_confusion(cm, out_dir / "confusion.txt")
    print(f"best validation accuracy {max(r.val_accuracy for r in history):.4f}; "
          f"artifacts in {out_dir}")
    return EXIT_OK


def cmd_transfer(args) -> int:
    cfg = _resolve_config(args)
    out_dir = cfg.out_root() / "transfer"
    out_dir.mkdir(parents=True, exist_ok=True)
    cfgmod.write_resolved(cfg, out_dir, "transfer")
    train_set, val_set = _load_tiles(cfg)
    classes = tr.class_index(train_set + val_set)
    source_cfg = replace(cfg.synth, image_size=cfg.model.input_size,
                         seed=cfg.synth.seed + 1)
    source = synth.generate_texture_families(cfg.source_task.n_per_class, source_cfg)
    report = tr.transfer_experiment(source, train_set, val_set, cfg.hparams,
                                    config=cfg.model, source_epochs=cfg.source_task.epochs)
    reporting.write_history_tsv(report.source_history, out_dir / "source_history.tsv")
    histories = {}
    for arm, result in report.arms.items():
        reporting.write_history_tsv(result.history, out_dir / f"{arm}_history.tsv")
        (out_dir / f"best_{arm}.ckpt").write_bytes(result.best_checkpoint)
        histories[arm] = result.history
    (out_dir / "source.ckpt").write_bytes(report.source_checkpoint)
    reporting.plot_histories(histories, out_dir / "accuracy_curves.png",
                             title="Transfer vs scratch")
    summary = {arm: {"best_val_accuracy": r.best_val_accuracy,
                     "trained_param_count": r.trained_param_count}
               for arm, r in report.arms.items()}
    (out_dir / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
    for arm, info in sorted(summary.items()):
        print(f"{arm}: best val acc {info['best_val_accuracy']:.4f}, "
              f"{info['trained_param_count']} trained parameters")
    return EXIT_OK


def _require_checkpoint(cfg) -> rn.Model:
    if not cfg.paths.checkpoint:
        raise UsageError("--checkpoint is required")
    return rn.load_checkpoint(cfg.paths.checkpoint)


def cmd_evaluate(args) -> int:
    cfg = _resolve_config(args)
    model = _require_checkpoint(cfg)
    train_set, val_set = _load_tiles(cfg)
    classes = tr.class_index(train_set + val_set)
    out_dir = cfg.out_root() / "evaluate"
    out_dir.mkdir(parents=True, exist_ok=True)
    cfgmod.write_resolved(cfg, out_dir, "evaluate")
    cm, acc = tr.evaluate(model, val_set, cfg.hparams.batch_size, classes)
    reporting.write_confusion(cm, out_dir / "confusion.txt")
    sys.stdout.write(reporting.confusion_text(cm))
    return EXIT_OK


def cmd_attribute(args) -> int:
    cfg = _resolve_config(args)
    model = _require_checkpoint(cfg)
    out_dir = cfg.out_root() / "attribution"
    out_dir.mkdir(parents=True, exist_ok=True)
    cfgmod.write_resolved(cfg, out_dir, "attribute")
    samples = synth.read_corpus(cfg.paths.corpus_root)
    tiles = [t for s in samples for t in ds.tile4(s)]
    labels = sorted({t.label for t in tiles})
    side = model.config.input_size
    rows = []

    def _one(tile):
        prepared = tile if (tile.height, tile.width) == (side, side) else ds.resize(tile, side)
        x = np.transpose(prepared.pixels, (2, 0, 1)).astype(np.float32)
        logits = model.classify(x[None])
        target = int(logits.argmax(axis=1)[0])
        amap = attr.integrated_gradients(attr.AttributionRequest(
            model=model, x=x, steps=cfg.attribution.steps, target=target))
        name = f"{tile.source_id}_t{tile.tile_index}"
        attr.render_heatmap(amap, prepared.pixels, out_dir / tile.label / f"{name}.png")
        score = ""
        if prepared.beam_mask is not None:
            score = f"{attr.beam_alignment_score(amap, prepared.beam_mask):.6f}"
        return (name, tile.label, target, amap.completeness_residual, score)

    selected = []
    for lab in labels:
        members = [t for t in tiles if t.label == lab]
        if args.limit is not None:
            members = members[: args.limit]
        selected.extend(members)
    if cfg.workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            rows = list(pool.map(_one, selected))
    else:
        rows = [_one(t) for t in selected]
    with open(out_dir / "attribution.tsv", "w", encoding="utf-8") as fh:
        fh.write("tile\tlabel\tpredicted_class\tcompleteness_residual\talignment_score\n")
        for name, lab, target, residual, score in rows:
            fh.write(f"{name}\t{lab}\t{target}\t{residual:.6e}\t{score}\n")
    print(f"attributed {len(rows)} tiles into {out_dir}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    cfg = _resolve_config(args)
    reports = selftest.run_all(gradient_instances=args.gradient_instances)
    out_dir = cfg.out_root() / "selftest"
    out_dir.mkdir(parents=True, exist_ok=True)
    cfgmod.write_resolved(cfg, out_dir, "selftest")
    lines = []
    all_ok = True
    for rep in reports:
        status = "pass" if rep.passed else "FAIL"
        lines.append(f"{rep.name}: {rep.checked} checks, {len(rep.failures)} failures [{status}]")
        for f in rep.failures:
            lines.append(f"  - {f}")
        all_ok &= rep.passed
    text = "\n".join(lines) + "\n"
    (out_dir / "selftest.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    if not all_ok:
        raise NumericError("selftest suites reported failures")
    return EXIT_OK


_COMMANDS = {
    "generate": cmd_generate,
    "stats": cmd_stats,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "transfer": cmd_transfer,
    "evaluate": cmd_evaluate,
    "attribute": cmd_attribute,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.subcommand](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvalidConfig as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
