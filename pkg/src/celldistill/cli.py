"""Command line pipeline driver.

Subcommands cover each pipeline stage plus full runs, evaluation, and
fixture generation.  Every invocation resolves one RunConfig (config file
plus flag overrides), validates it completely, and only then touches the
output directory.  All emitted artifacts are deterministic functions of
the resolved config, so identical invocations produce byte-identical
output trees.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, build_run_config, parse_config_text
from .distill import predict_instances, run_coin, save_checkpoint
from .grids import (DataError, FormatError, ImageRecord, load_dataset,
                    load_instance_map, save_binary_mask, save_dataset,
                    save_instance_map, save_pseudo_mask)
from .metrics import MetricsReport, evaluate, mean_reports
from .morphology import center_point, segment_instances
from .propagation import NumericError, PropagationResult, propagate_image
from .scoring import (FileBridgeOracle, build_pseudo_masks, report_payload,
                      score_image, topk_confidence_curve, write_prompts)
from .synth import SyntheticOracle, gen_dataset, small_label_map


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _all_records(dataset: dict[str, list[ImageRecord]]) -> list[ImageRecord]:
    records = [rec for records in dataset.values() for rec in records]
    return sorted(records, key=lambda rec: rec.image_id)


def _require_dirs(config: RunConfig, data: bool = False, out: bool = False,
                  pred: bool = False, bridge: bool = False) -> None:
    """Check every referenced path before any output is created."""
    if data:
        if not config.data_dir:
            raise ConfigError("data.dir is required for this command")
        if not Path(config.data_dir).is_dir():
            raise ConfigError(f"data.dir does not exist: {config.data_dir}")
    if out and not config.out_dir:
        raise ConfigError("out.dir is required for this command")
    if pred:
        if not config.pred_dir:
            raise ConfigError("eval.pred_dir is required for this command")
        if not Path(config.pred_dir).is_dir():
            raise ConfigError(
                f"eval.pred_dir does not exist: {config.pred_dir}")
    if bridge and config.oracle_mode == "bridge":
        if not config.oracle_bridge_dir:
            raise ConfigError("oracle.bridge_dir is required in bridge mode")
        if not Path(config.oracle_bridge_dir).is_dir():
            raise ConfigError(
                f"oracle.bridge_dir does not exist: {config.oracle_bridge_dir}")


def _manifest_fail_labels(config: RunConfig) -> dict[str, frozenset[int]]:
    manifest_path = Path(config.data_dir) / "manifest.json"
    if not manifest_path.is_file():
        return {}
    entry = json.loads(manifest_path.read_text()).get("fail_labels", {})
    return {image_id: frozenset(int(v) for v in labels)
            for image_id, labels in entry.items()}


def _build_oracle(config: RunConfig, dataset: dict[str, list[ImageRecord]]):
    if config.oracle_mode == "bridge":
        return FileBridgeOracle(config.oracle_bridge_dir)
    fail_labels = (_manifest_fail_labels(config)
                   if config.oracle_fail_small else None)
    try:
        return SyntheticOracle.from_dataset(
            dataset, jitter=config.oracle_jitter,
            failure_fraction=config.oracle_failure_fraction,
            seed=config.oracle_seed, fail_labels=fail_labels)
    except ValueError as exc:
        raise DataError(f"synthetic oracle: {exc}") from None


def _propagate_all(records: list[ImageRecord], config: RunConfig,
                   jobs: int) -> list[PropagationResult]:
    def work(rec: ImageRecord) -> PropagationResult:
        return propagate_image(rec.features, rec.seed,
                               per_axis=config.per_axis,
                               lam=config.ot_lambda, tol=config.ot_tol,
                               max_iter=config.ot_max_iter)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(work, records))
    return [work(rec) for rec in records]


def _write_propagation(records: list[ImageRecord],
                       results: list[PropagationResult], config: RunConfig,
                       out_root: Path) -> None:
    outdir = out_root / "propagate"
    outdir.mkdir(parents=True, exist_ok=True)
    for rec, result in zip(records, results):
        save_binary_mask(result.mask, outdir / f"{rec.image_id}.mask.pgm")
        payload = {
            "converged": result.converged,
            "lambda": config.ot_lambda,
            "tol": config.ot_tol,
            "patches": [
                {"iterations": iters, "residual": residual}
                for iters, residual in zip(result.patch_iterations,
                                           result.patch_residuals)
            ],
        }
        _write_json(outdir / f"{rec.image_id}.ot.json", payload)


def cmd_propagate(config: RunConfig, jobs: int = 1,
                  topk_curve: bool = False) -> int:
    _require_dirs(config, data=True, out=True)
    dataset = load_dataset(config.data_dir)
    records = _all_records(dataset)
    results = _propagate_all(records, config, jobs)
    _write_propagation(records, results, config, Path(config.out_dir))
    return 0


def _segment_all(records: list[ImageRecord],
                 results: list[PropagationResult],
                 config: RunConfig) -> list[np.ndarray]:
    return [segment_instances(result.mask, config.min_distance,
                              config.connectivity)
            for result in results]


def _instance_prompts(instances: np.ndarray) -> list[tuple[int, int, int]]:
    prompts = []
    for label in np.unique(instances):
        if label <= 0:
            continue
        row, col = center_point((instances == label).astype(np.uint8))
        prompts.append((int(label), row, col))
    return prompts


def cmd_score(config: RunConfig, jobs: int = 1,
              topk_curve: bool = False) -> int:
    _require_dirs(config, data=True, out=True, bridge=True)
    dataset = load_dataset(config.data_dir)
    records = _all_records(dataset)
    results = _propagate_all(records, config, jobs)
    maps = _segment_all(records, results, config)
    if config.oracle_mode == "bridge":
        prompts = [(rec.image_id, row, col)
                   for rec, instances in zip(records, maps)
                   for _, row, col in _instance_prompts(instances)]
        write_prompts(config.oracle_bridge_dir, prompts)
    oracle = _build_oracle(config, dataset)
    outdir = Path(config.out_dir) / "score"
    outdir.mkdir(parents=True, exist_ok=True)
    curve_rows = []
    for rec, instances in zip(records, maps):
        scored, report = score_image(rec.image_id, instances, oracle,
                                     mode=config.threshold_mode)
        _write_json(outdir / f"{rec.image_id}.scored.json",
                    report_payload(scored, report))
        pair = build_pseudo_masks(instances,
                                  {item.id: item.label for item in scored})
        save_pseudo_mask(pair.binary, pair.ignore,
                         outdir / f"{rec.image_id}.pseudo_binary.pgm")
        save_pseudo_mask(pair.edge, pair.ignore,
                         outdir / f"{rec.image_id}.pseudo_edge.pgm")
        if topk_curve and scored and rec.gt is not None:
            for point in topk_confidence_curve(scored, rec.gt):
                curve_rows.append((rec.image_id, point.k_percent, point.count,
                                   point.aji, point.random_aji))
    if topk_curve:
        lines = ["image_id,k_percent,count,aji,random_aji"]
        lines += [f"{image_id},{k},{count},{aji!r},{rand!r}"
                  for image_id, k, count, aji, rand in curve_rows]
        (outdir / "topk.csv").write_text("\n".join(lines) + "\n")
    return 0


def _rounds_payload(result) -> list[dict]:
    rounds = []
    for state in result.states:
        rounds.append({
            "round": state.round_index,
            "accepted": state.accepted,
            "accepted_by_image": dict(sorted(state.accepted_by_image.items())),
            "loss_total": [report.total for report in state.losses],
        })
    return rounds


def cmd_distill(config: RunConfig, jobs: int = 1,
                topk_curve: bool = False) -> int:
    _require_dirs(config, data=True, out=True, bridge=True)
    dataset = load_dataset(config.data_dir)
    oracle = _build_oracle(config, dataset)
    result = run_coin(dataset, oracle, config.distill_config())
    outdir = Path(config.out_dir) / "distill"
    outdir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.params, outdir / "checkpoint")
    _write_json(outdir / "rounds.json", _rounds_payload(result))
    return 0


def _report_dict(report: MetricsReport) -> dict:
    return asdict(report)


def cmd_run(config: RunConfig, jobs: int = 1, topk_curve: bool = False) -> int:
    _require_dirs(config, data=True, out=True, bridge=True)
    dataset = load_dataset(config.data_dir)
    records = _all_records(dataset)
    out_root = Path(config.out_dir)
    results = _propagate_all(records, config, jobs)
    _write_propagation(records, results, config, out_root)
    oracle = _build_oracle(config, dataset)
    result = run_coin(dataset, oracle, config.distill_config())
    save_checkpoint(result.params, out_root / "checkpoint")
    _write_json(out_root / "rounds.json", _rounds_payload(result))
    _write_json(out_root / "reports.json", {
        "accepted": result.accepted_counts,
        "reports": [_report_dict(report) for report in result.reports],
    })
    eval_records = dataset.get("test") or dataset.get("train", [])
    pred_dir = out_root / "predictions"
    pred_dir.mkdir(parents=True, exist_ok=True)
    for rec in sorted(eval_records, key=lambda rec: rec.image_id):
        pred = predict_instances(result.params, rec.features,
                                 config.edge_dilate, config.connectivity)
        save_instance_map(pred, pred_dir / f"{rec.image_id}.pred.pgm16")
    return 0


def cmd_eval(config: RunConfig, jobs: int = 1,
             topk_curve: bool = False) -> int:
    _require_dirs(config, data=True, out=True, pred=True)
    dataset = load_dataset(config.data_dir)
    records = [rec for rec in _all_records(dataset) if rec.gt is not None]
    if not records:
        raise DataError(f"{config.data_dir}: no images with ground truth")
    pred_root = Path(config.pred_dir)
    per_image: dict[str, MetricsReport] = {}
    for rec in records:
        pred_path = pred_root / f"{rec.image_id}.pred.pgm16"
        if not pred_path.is_file():
            raise DataError(f"{pred_path}: missing prediction")
        pred = load_instance_map(pred_path)
        per_image[rec.image_id] = evaluate(rec.gt, pred,
                                           config.adjacent_radius,
                                           config.adjacent_min_neighbors)
    mean = mean_reports(list(per_image.values()))
    out_root = Path(config.out_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    _write_json(out_root / "eval.json", {
        "images": {image_id: _report_dict(report)
                   for image_id, report in per_image.items()},
        "mean": _report_dict(mean),
    })
    print(f"evaluated {len(per_image)} images: "
          f"IoU {mean.overall.iou:.4f} AJI {mean.overall.aji:.4f} "
          f"PQ {mean.overall.pq:.4f}")
    return 0


def cmd_synth(config: RunConfig, jobs: int = 1,
              topk_curve: bool = False) -> int:
    _require_dirs(config, out=True)
    dataset = gen_dataset(config.synth)
    fail_labels = small_label_map(config.synth, dataset)
    save_dataset(Path(config.out_dir), dataset, extra={
        "synth": asdict(config.synth),
        "fail_labels": {image_id: sorted(labels)
                        for image_id, labels in fail_labels.items()},
    })
    return 0


_COMMANDS = {
    "propagate": cmd_propagate,
    "score": cmd_score,
    "distill": cmd_distill,
    "run": cmd_run,
    "eval": cmd_eval,
    "synth": cmd_synth,
}


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="celldistill",
        description="Annotation-free cell instance segmentation pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", help="path to a key = value config file")
        cmd.add_argument("--jobs", type=int, default=1,
                         help="parallel workers for per-image stages")
        cmd.add_argument("--seed", type=int,
                         help="override the global seed key")
        cmd.add_argument("--oracle", choices=("synthetic", "bridge"),
                         help="override oracle.mode")
        cmd.add_argument("--topk-curve", action="store_true",
                         help="emit the confidence-vs-AJI curve CSV")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        file_values = {}
        if args.config:
            config_path = Path(args.config)
            if not config_path.is_file():
                raise ConfigError(f"config file not found: {args.config}")
            file_values = parse_config_text(config_path.read_text(),
                                            source=args.config)
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = str(args.seed)
        if args.oracle is not None:
            overrides["oracle.mode"] = args.oracle
        config = build_run_config(file_values, overrides)
        return _COMMANDS[args.command](config, jobs=args.jobs,
                                       topk_curve=args.topk_curve)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
