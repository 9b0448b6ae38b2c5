"""Command-line entry point: phantom generation, training, evaluation,
paired comparison, and plot re-rendering.

Every command is config-driven and reproducible: the effective configuration
is written next to the outputs, a run directory is keyed by the config hash,
and identical inputs produce identical artifact digests. The output root can
be overridden with the CARTSEG_OUT_ROOT environment variable.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import datetime
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from .data_model import NAME_TO_LABEL, DomainRole, load_manifest, load_scan
from .errors import CartsegError, ConfigError, DataError, ParseError
from .evaluation import (
    DscReport,
    emit_outputs,
    plot_profile,
    register_laterality,
    slice_profile,
    stratified_report,
    wilcoxon_signed_rank,
    SliceProfile,
)
from .phantom import GAP_PRESETS, generate_benchmark
from .preprocess import preprocess_slice
from .training import (
    config_hash,
    config_to_dict,
    discover_folds,
    ensemble_predict,
    fold_plan,
    load_experiment_config,
    save_experiment_config,
    tiny_overrides,
    train_fold,
)

SIGNIFICANCE_LEVEL = 0.005


def _out_root(path: str) -> Path:
    env = os.environ.get("CARTSEG_OUT_ROOT")
    return Path(env) / path if env else Path(path)


def cmd_phantom_generate(args) -> int:
    if args.source_n < 1 or args.target_n < 1:
        raise ConfigError("--source-n and --target-n must be >= 1")
    source_app, target_app = GAP_PRESETS[args.gap]
    manifest = generate_benchmark(
        source_count=args.source_n,
        target_count=args.target_n,
        seed=args.seed,
        source_app=source_app,
        target_app=target_app,
        out_dir=_out_root(args.out),
        test_count=args.test_n,
        slice_count=args.slices,
    )
    print(manifest.root / "manifest.csv")
    return 0


def _train_one_fold(cfg, manifest, fold_index, train_src, train_tgt, val, fold_dir):
    return train_fold(cfg, train_src, train_tgt, val, manifest, fold_dir, fold_index=fold_index)


def _fold_job(config_path: str, manifest_path: str, fold_index: int, out_dir: str):
    # process-pool entry: reload inputs so the job is picklable
    cfg = load_experiment_config(config_path)
    manifest = load_manifest(manifest_path)
    for f, train_src, train_tgt, val in fold_plan(cfg, manifest):
        if f == fold_index:
            _train_one_fold(cfg, manifest, f, train_src, train_tgt, val, Path(out_dir) / f"fold_{f}")
            return fold_index
    raise ConfigError(f"fold {fold_index} not in plan")


def cmd_train(args) -> int:
    cfg = load_experiment_config(args.config)
    if args.tiny:
        cfg = replace(cfg, **tiny_overrides())
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs, lr_drop_epoch=min(cfg.lr_drop_epoch, args.epochs))
    if args.folds is not None:
        cfg = replace(cfg, fold_count=args.folds)
    manifest = load_manifest(args.manifest)
    digest = config_hash(cfg)
    run_id = f"{cfg.setting.value.lower()}_{digest}"
    run_dir = _out_root(args.out) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    config_path = run_dir / "effective_config.yaml"
    save_experiment_config(cfg, config_path)

    plan = fold_plan(cfg, manifest)
    if args.parallel_folds > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.parallel_folds) as pool:
            jobs = [
                pool.submit(_fold_job, str(config_path), str(args.manifest), f, str(run_dir))
                for f, *_ in plan
            ]
            for job in jobs:
                job.result()
    else:
        for f, train_src, train_tgt, val in plan:
            _train_one_fold(cfg, manifest, f, train_src, train_tgt, val, run_dir / f"fold_{f}")

    record = {
        "run_id": run_id,
        "config_hash": digest,
        "setting": cfg.setting.value,
        "artifact_paths": [f"fold_{f}" for f, *_ in plan],
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    with open(run_dir / "run.txt", "w", encoding="utf-8") as f:
        yaml.safe_dump(record, f, sort_keys=True)
    print(run_dir)
    return 0


def _parse_classes(spec: str | None) -> tuple[int, ...]:
    if not spec:
        return (1, 2, 3, 4)
    ids = []
    for name in spec.split(","):
        key = name.strip().lower()
        if key not in NAME_TO_LABEL or NAME_TO_LABEL[key] == 0:
            raise ConfigError(f"unknown class name {key!r}")
        ids.append(NAME_TO_LABEL[key])
    return tuple(ids)


def evaluate_run(run_dir, manifest, class_ids, bootstrap_iters, seed, method=None):
    """Ensemble inference over TEST scans; returns (report, profiles)."""
    run_dir = Path(run_dir)
    config_path = run_dir / "effective_config.yaml"
    if not config_path.exists():
        raise ParseError(f"run is missing {config_path}")
    cfg = load_experiment_config(config_path)
    folds = discover_folds(run_dir)
    method = method or cfg.setting.value.lower()

    test_records = manifest.records_for_role(DomainRole.TEST)
    if not test_records:
        raise DataError("manifest has no TEST domain")
    predictions, references = {}, {}
    for record in test_records:
        volume, mask = load_scan(manifest.resolve(record.volume_uri))
        if mask is None:
            raise DataError(f"test scan {record.scan_id!r} has no reference mask")
        volume, mask = register_laterality(volume, mask, record)
        probs = ensemble_predict(folds, volume, cfg.preprocess)
        predictions[record.scan_id] = probs.argmax(axis=1)
        ref = np.stack(
            [
                preprocess_slice(volume.voxels[z], volume.pixel_spacing, cfg.preprocess, mask=mask.labels[z])[1]
                for z in range(volume.slice_count)
            ]
        )
        references[record.scan_id] = ref

    report = stratified_report(predictions, references, manifest, class_ids=class_ids, method=method)
    profiles = [
        slice_profile(predictions, references, c, bootstrap_iters=bootstrap_iters, seed=seed, method=method)
        for c in class_ids
    ]
    return report, profiles


def _write_per_scan(report: DscReport, path: Path) -> None:
    from .data_model import LABEL_NAMES

    lines = ["scan_id," + ",".join(LABEL_NAMES[c] for c in report.class_ids)]
    for sid in sorted(report.per_scan):
        lines.append(sid + "," + ",".join(f"{report.per_scan[sid][c]:.6f}" for c in report.class_ids))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_evaluate(args) -> int:
    manifest = load_manifest(args.manifest)
    class_ids = _parse_classes(args.classes)
    out_dir = _out_root(args.out)
    report, profiles = evaluate_run(
        args.run, manifest, class_ids, bootstrap_iters=args.bootstrap, seed=args.seed, method=args.method
    )
    emit_outputs(report, profiles, out_dir)
    _write_per_scan(report, out_dir / "per_scan.csv")
    print(out_dir)
    return 0


def _read_per_scan(path) -> DscReport:
    path = Path(path)
    if not path.exists():
        raise ParseError(f"per-scan report not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    header = lines[0].split(",")
    class_ids = tuple(NAME_TO_LABEL[h] for h in header[1:])
    per_scan = {}
    for line in lines[1:]:
        parts = line.split(",")
        per_scan[parts[0]] = {c: float(v) for c, v in zip(class_ids, parts[1:])}
    return DscReport(
        method=path.parent.name,
        per_scan=per_scan,
        per_class_mean={},
        stratified={},
        class_ids=class_ids,
    )


def cmd_compare(args) -> int:
    report_a = _read_per_scan(args.report_a)
    report_b = _read_per_scan(args.report_b)
    if set(report_a.per_scan) != set(report_b.per_scan):
        raise DataError("reports cover different scan sets")
    ids = sorted(report_a.per_scan)
    lines = ["class,statistic,p_value,significant,delta_mean"]
    for c in report_a.class_ids:
        if c not in report_b.class_ids:
            continue
        a = np.array([report_a.per_scan[s][c] for s in ids])
        b = np.array([report_b.per_scan[s][c] for s in ids])
        stat, p = wilcoxon_signed_rank(b, a)
        flag = "*" if p < SIGNIFICANCE_LEVEL else ""
        from .data_model import LABEL_NAMES

        lines.append(f"{LABEL_NAMES[c]},{stat:.1f},{p:.6g},{flag},{float(b.mean() - a.mean()):.6f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        out = _out_root(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_plot(args) -> int:
    report_dir = Path(args.report)
    csvs = sorted(report_dir.glob("profile_*.csv"))
    if not csvs:
        raise DataError(f"no profile CSVs under {report_dir}")
    out_dir = _out_root(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for csv_path in csvs:
        rows = [line.split(",") for line in csv_path.read_text(encoding="utf-8").splitlines()[1:]]
        mean = np.array([float(r[1]) for r in rows])
        lo = np.array([float(r[2]) for r in rows])
        hi = np.array([float(r[3]) for r in rows])
        parts = csv_path.stem.split("_")
        class_id = NAME_TO_LABEL.get(parts[1], 0)
        profile = SliceProfile(
            class_id=class_id, per_slice_mean=mean, ci_low=lo, ci_high=hi, method="_".join(parts[2:])
        )
        plot_profile(profile, out_dir / (csv_path.stem + ".png"))
    print(out_dir)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cartseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    phantom = sub.add_parser("phantom", help="synthetic benchmark generation")
    phantom_sub = phantom.add_subparsers(dest="phantom_command", required=True)
    gen = phantom_sub.add_parser("generate", help="write a three-domain benchmark")
    gen.add_argument("--out", required=True)
    gen.add_argument("--source-n", type=int, required=True)
    gen.add_argument("--target-n", type=int, required=True)
    gen.add_argument("--test-n", type=int, default=None)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--gap", choices=sorted(GAP_PRESETS), default="mild")
    gen.add_argument("--slices", type=int, default=16)
    gen.set_defaults(func=cmd_phantom_generate)

    train = sub.add_parser("train", help="run one experiment setting over all folds")
    train.add_argument("--config", required=True)
    train.add_argument("--manifest", required=True)
    train.add_argument("--out", required=True)
    train.add_argument("--tiny", action="store_true", help="reduced-scale network/crop for CPU runs")
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--epochs", type=int, default=None)
    train.add_argument("--folds", type=int, default=None)
    train.add_argument("--parallel-folds", type=int, default=1)
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("evaluate", help="ensemble inference and reports on the TEST domain")
    ev.add_argument("--run", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--classes", default=None, help="comma-separated class names, e.g. fc,tc")
    ev.add_argument("--bootstrap", type=int, default=1000)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--method", default=None)
    ev.set_defaults(func=cmd_evaluate)

    cmp_ = sub.add_parser("compare", help="paired signed-rank comparison of two runs")
    cmp_.add_argument("report_a", help="per_scan.csv of the reference run")
    cmp_.add_argument("report_b", help="per_scan.csv of the candidate run")
    cmp_.add_argument("--out", default=None)
    cmp_.set_defaults(func=cmd_compare)

    plot = sub.add_parser("plot", help="re-render slice-profile plots from CSVs")
    plot.add_argument("--report", required=True)
    plot.add_argument("--out", required=True)
    plot.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CartsegError as e:
        print(f"ERROR:{type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
