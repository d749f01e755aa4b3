"""Command-line pipeline: ingest -> pretrain -> finetune/evaluate -> embed -> project -> report."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import audio_io, metrics
from .audio_io import Manifest, ManifestEntry, load_clip, scan_audio_dir, split_folds
from .checkpoint import load_checkpoint
from .config import PROFILES, RunConfig, load_config
from .finetune import Classifier, ProbeFeatures, cross_validate, pool, probe_train
from .model import ArchitectureConfig, PretrainModel
from .pretrain import (IncompatibleCheckpointError, InitStrategy, TrainingDivergedError,
                       run_pretraining)
from .tsne import EmbeddingMatrix, render_scatter, silhouette, tsne


def _eprint(*args):
    print(*args, file=sys.stderr)


def _cache_dir():
    return os.environ.get("VOCREP_CACHE") or None


def _effective_config(args) -> RunConfig:
    return load_config(path=getattr(args, "config", None),
                       profile_name=getattr(args, "profile", None),
                       seed=getattr(args, "seed", None),
                       deterministic=True if getattr(args, "deterministic", False) else None,
                       jobs=getattr(args, "jobs", None))


def _write_config(cfg: RunConfig, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(cfg.to_json() + "\n", encoding="utf-8")


def _maybe_dump_config(args, cfg: RunConfig) -> bool:
    if getattr(args, "dump_config", False):
        print(cfg.to_json())
        return True
    return False


# ---------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------

def _stats_table(manifest: Manifest) -> str:
    by_dataset: dict[str, list[ManifestEntry]] = {}
    for e in manifest.entries:
        by_dataset.setdefault(e.dataset_name, []).append(e)
    lines = [f"{'Dataset':<28} {'Dur. (h)':>10} {'# Samples':>10} {'Avg Dur. (s)':>13}"]
    for name in sorted(by_dataset):
        hours, count, avg = audio_io.corpus_stats(Manifest(by_dataset[name]))
        lines.append(f"{name:<28} {hours:>10.2f} {count:>10d} {avg:>13.2f}")
    hours, count, avg = audio_io.corpus_stats(manifest)
    lines.append(f"{'Total':<28} {hours:>10.2f} {count:>10d} {avg:>13.2f}")
    return "\n".join(lines)


def cmd_ingest(args) -> int:
    cfg = _effective_config(args)
    if _maybe_dump_config(args, cfg):
        return 0
    if args.from_manifest:
        manifest = Manifest.read_jsonl(args.from_manifest)
        if not manifest.entries:
            _eprint("error: manifest is empty")
            return 1
        print(_stats_table(manifest))
        return 0

    root = Path(args.input)
    files = scan_audio_dir(root)
    if not files:
        _eprint("error: no audio found")
        return 1
    label_map = {}
    if args.labels:
        label_map = json.loads(Path(args.labels).read_text(encoding="utf-8"))

    def describe(path: Path):
        try:
            w = load_clip(path, _cache_dir())
        except Exception as exc:  # list and continue
            return path, exc
        return path, w

    jobs = 1 if cfg.deterministic and cfg.jobs == 1 else max(1, cfg.jobs)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool_:
            results = list(pool_.map(describe, files))
    else:
        results = [describe(p) for p in files]

    entries = []
    failures = []
    for path, result in results:
        if isinstance(result, Exception):
            failures.append((path, result))
            continue
        rel = path.relative_to(root).as_posix()
        label = label_map.get(rel) or label_map.get(str(path)) or label_map.get(path.name)
        if label is None and args.labels_from_dirs and path.parent != root:
            label = path.parent.name
        entries.append(ManifestEntry(
            path=str(path), dataset_name=args.dataset or root.name, label=label,
            duration_s=len(result.samples) / audio_io.TARGET_RATE,
            num_samples=len(result.samples)))
    for path, exc in failures:
        _eprint(f"skipped {path}: {exc}")
    if not entries:
        _eprint("error: no audio found")
        return 1

    manifest = Manifest(entries)
    out_dir = Path(args.out)
    _write_config(cfg, out_dir)
    manifest.write_jsonl(out_dir / "manifest.jsonl")
    print(_stats_table(manifest))
    print(f"wrote {out_dir / 'manifest.jsonl'} ({len(entries)} entries)")
    return 0


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    cfg = _effective_config(args)
    pre = cfg.pretrain
    if args.total_updates is not None:
        pre = replace(pre, total_updates=args.total_updates)
    if args.batch_clips is not None:
        pre = replace(pre, batch_clips=args.batch_clips)
    if args.peak_lr is not None:
        pre = replace(pre, peak_lr=args.peak_lr)
    cfg = replace(cfg, pretrain=pre)
    if _maybe_dump_config(args, cfg):
        return 0

    manifest = Manifest.read_jsonl(args.manifest)
    strategy = (InitStrategy("warm_start", args.init_from) if args.init_from
                else InitStrategy("scratch"))
    out_dir = Path(args.out)
    _write_config(cfg, out_dir)
    try:
        summary = run_pretraining(manifest, cfg.arch, cfg.pretrain, out_dir,
                                  seed=cfg.seed, strategy=strategy,
                                  cache_dir=_cache_dir(), log=print)
    except IncompatibleCheckpointError as exc:
        _eprint("error: incompatible warm-start checkpoint; mismatched tensors:")
        for name in exc.names:
            _eprint(f"  {name}")
        return 2
    except TrainingDivergedError as exc:
        dump = out_dir / "diverged.json"
        dump.write_text(json.dumps({"step": exc.step, **exc.diagnostics}, indent=2))
        _eprint(f"error: {exc}; diagnostics in {dump}")
        return 3
    if summary["init_report"].missing:
        _eprint(f"warm start left {len(summary['init_report'].missing)} tensors at "
                "their fresh initialization")
    print(f"best checkpoint at update {summary['best_step']} "
          f"(validation loss {summary['best_loss']:.4f})")
    print(f"wrote {out_dir / 'best.ckpt'} and {out_dir / 'loss.csv'}")
    return 0


# ---------------------------------------------------------------------------
# finetune / evaluate
# ---------------------------------------------------------------------------

def _run_cv(args, probe_allowed: bool) -> int:
    cfg = _effective_config(args)
    fin = cfg.finetune
    if getattr(args, "freeze_encoder", False):
        fin = replace(fin, freeze_encoder=True)
    if getattr(args, "head", None):
        fin = replace(fin, head=args.head)
    folds_k = args.folds if args.folds is not None else cfg.folds
    cfg = replace(cfg, finetune=fin, folds=folds_k)
    if _maybe_dump_config(args, cfg):
        return 0

    manifest = Manifest.read_jsonl(args.manifest)
    unlabeled = [e.path for e in manifest.entries if e.label is None]
    if unlabeled:
        _eprint(f"error: {len(unlabeled)} unlabeled entries, first: {unlabeled[0]}")
        return 1
    dataset = args.dataset or manifest.entries[0].dataset_name
    split = split_folds(manifest, folds_k, seed=cfg.seed, stratified=True)

    out_dir = Path(args.out)
    _write_config(cfg, out_dir)
    (out_dir / "folds.json").write_text(split.to_json() + "\n", encoding="utf-8")

    probe = getattr(args, "probe", None)
    if probe:
        if not probe_allowed:
            _eprint("error: probe mode is only available through `evaluate`")
            return 1
        features = ProbeFeatures.read_csv(probe)
        report = probe_train(features, manifest, split, cfg.finetune, seed=cfg.seed,
                             dataset_name=dataset, config_fingerprint=cfg.fingerprint())
    else:
        if not args.checkpoint:
            _eprint("error: --checkpoint is required without --probe")
            return 1
        report = cross_validate(manifest, split, args.checkpoint, cfg.finetune,
                                seed=cfg.seed, dataset_name=dataset,
                                cache_dir=_cache_dir(),
                                config_fingerprint=cfg.fingerprint())
    (out_dir / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out_dir / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    print(report.aggregate_line())
    print(f"wrote {out_dir / 'report.json'} and {out_dir / 'report.csv'}")
    return 0


def cmd_finetune(args) -> int:
    return _run_cv(args, probe_allowed=False)


def cmd_evaluate(args) -> int:
    return _run_cv(args, probe_allowed=True)


# ---------------------------------------------------------------------------
# embed / project
# ---------------------------------------------------------------------------

def cmd_embed(args) -> int:
    cfg = _effective_config(args)
    if _maybe_dump_config(args, cfg):
        return 0
    manifest = Manifest.read_jsonl(args.manifest)
    ckpt = load_checkpoint(args.checkpoint)
    arch = ArchitectureConfig.from_dict(ckpt.config["arch"])
    model = PretrainModel(arch, cfg.seed)
    model.load_arrays({k: v for k, v in ckpt.tensors.items()
                       if not k.startswith("optim.")})
    out_dir = Path(args.out)
    _write_config(cfg, out_dir)
    cache = audio_io.ClipCache(cache_dir=_cache_dir())
    cap = int(round(cfg.finetune.max_clip_s * audio_io.TARGET_RATE))
    path = out_dir / "embeddings.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        dim = arch.context.model_dim
        writer.writerow(["path", "label"] + [f"e{i}" for i in range(dim)])
        for e in manifest.entries:
            pooled = pool(model.embed(cache.samples(e.path)[:cap]), "mean").data
            writer.writerow([e.path, e.label or ""] + [repr(float(v)) for v in pooled])
    print(f"wrote {path} ({len(manifest.entries)} rows)")
    return 0


def _read_embeddings_csv(path) -> EmbeddingMatrix:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["path", "label"]:
            raise ValueError("embeddings CSV must start with path,label columns")
        paths, labels, rows = [], [], []
        for rec in reader:
            paths.append(rec[0])
            labels.append(rec[1])
            rows.append([float(v) for v in rec[2:]])
    return EmbeddingMatrix(rows=np.asarray(rows), labels=labels, paths=paths)


def cmd_project(args) -> int:
    cfg = _effective_config(args)
    if _maybe_dump_config(args, cfg):
        return 0
    try:
        emb = _read_embeddings_csv(args.from_csv)
    except FileNotFoundError:
        _eprint(f"error: no such file {args.from_csv}")
        return 1
    n = emb.rows.shape[0]
    if n < 5:
        _eprint(f"error: too few points for a projection ({n} < 5)")
        return 1
    perplexity = args.perplexity
    if perplexity is None:
        perplexity = min(30.0, max(2.0, (n - 1) / 3.0))
    out_dir = Path(args.out)
    _write_config(cfg, out_dir)
    projection = tsne(emb, perplexity=perplexity, iters=args.iters, seed=cfg.seed)
    csv_path = out_dir / "projection.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "label", "x", "y"])
        for p, label, (x, y) in zip(emb.paths, emb.labels, projection.points):
            writer.writerow([p, label, repr(float(x)), repr(float(y))])
    svg_path = out_dir / "projection.svg"
    svg_path.write_text(render_scatter(projection, emb.labels) + "\n", encoding="utf-8")
    print(f"final KL divergence {projection.final_kl:.4f}")
    if len(set(emb.labels)) > 1:
        print(f"silhouette by label {silhouette(projection.points, emb.labels):.4f}")
    print(f"wrote {csv_path} and {svg_path}")
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def cmd_report(args) -> int:
    cfg = _effective_config(args)
    if _maybe_dump_config(args, cfg):
        return 0
    reports = []
    for path in args.reports:
        report = metrics.MetricsReport.from_json(Path(path).read_text(encoding="utf-8"))
        reports.append(report)
        print(f"{report.dataset_name}: {report.aggregate_line()}")
    if args.csv:
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["dataset", "uar", "accuracy", "f1_macro"])
            for report in reports:
                agg = report.aggregate()
                writer.writerow([report.dataset_name,
                                 metrics.format_mean_std(*agg["uar"]),
                                 metrics.format_mean_std(*agg["accuracy"]),
                                 metrics.format_mean_std(*agg["f1_macro"])])
        print(f"wrote {args.csv}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file with a 'profile' plus overrides")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--deterministic", action="store_true",
                        help="force single-threaded execution")
    common.add_argument("--profile", choices=PROFILES, default=None)
    common.add_argument("--jobs", type=int, default=None)
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--dump-config", action="store_true",
                        help="print the effective config as JSON and exit")

    parser = argparse.ArgumentParser(
        prog="vocrep",
        description="Self-supervised representation learning for vocal audio.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common],
                       help="index a directory of WAV files into a manifest")
    p.add_argument("--input", help="directory of audio files")
    p.add_argument("--from-manifest", help="print stats for an existing manifest")
    p.add_argument("--dataset", help="dataset name recorded in the manifest")
    p.add_argument("--labels", help="JSON file mapping relative paths to labels")
    p.add_argument("--labels-from-dirs", action="store_true",
                   help="use the parent directory name as the label")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("pretrain", parents=[common], help="run self-supervised training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--init-from", help="warm-start checkpoint")
    p.add_argument("--total-updates", type=int, default=None)
    p.add_argument("--batch-clips", type=int, default=None)
    p.add_argument("--peak-lr", type=float, default=None)
    p.set_defaults(func=cmd_pretrain)

    for name, fn in (("finetune", cmd_finetune), ("evaluate", cmd_evaluate)):
        p = sub.add_parser(name, parents=[common],
                           help="cross-validated supervised training and metrics")
        p.add_argument("--manifest", required=True)
        p.add_argument("--checkpoint", help="pre-trained backbone checkpoint")
        p.add_argument("--folds", type=int, default=None)
        p.add_argument("--dataset", help="dataset name for the report")
        p.add_argument("--freeze-encoder", action="store_true")
        p.add_argument("--head", choices=("linear", "mlp_relu"), default=None)
        if name == "evaluate":
            p.add_argument("--probe", help="fixed-feature CSV (path,f0,f1,...)")
        p.set_defaults(func=fn)

    p = sub.add_parser("embed", parents=[common], help="pooled clip embeddings to CSV")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("project", parents=[common],
                       help="2-D projection and SVG scatter of embeddings")
    p.add_argument("--from-csv", required=True, help="embeddings CSV (path,label,e0,...)")
    p.add_argument("--perplexity", type=float, default=None)
    p.add_argument("--iters", type=int, default=1000)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("report", parents=[common], help="print aggregate metric lines")
    p.add_argument("--reports", nargs="+", required=True)
    p.add_argument("--csv", help="write a combined CSV")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        _eprint(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
