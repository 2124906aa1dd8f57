"""
Command line entry point: `progtrans <command> ...`.

Exit codes: 0 on success, 1 on invalid input (arguments, config, dataset or
detections files), 2 on any runtime failure.
"""

import argparse
import json
import sys
from pathlib import Path
from typing import NoReturn, Optional, Sequence

from progtrans.config import ConfigError, dump_flat_config
from progtrans.data_model import (
    Detection,
    Domain,
    ImageView,
    Split,
    load_dataset,
    load_detections,
    save_dataset,
    save_mined,
)
from progtrans.evaluation import (
    ApMethod,
    corloc,
    evaluate_map,
    hidden_truth,
    metrics_json,
    metrics_rows,
    write_metrics,
)
from progtrans.logger import setup_logger
from progtrans.mining import MiningConfig, audit_mined, mine_source, mine_target, mining_stats
from progtrans.pipeline import (
    DATASET_FILES,
    AblationAxis,
    RunReport,
    load_loop_config,
    missing_annotations,
    render_report,
    run,
    run_ablation,
)
from progtrans.prometheus_wrapper.metrics_exporter import MetricsExporter
from progtrans.synthworld import generate_world, load_world_config

LOG = setup_logger(__name__)

EXIT_OK: int = 0
EXIT_INVALID: int = 1
EXIT_FAILURE: int = 2


def _write_text(text: str, out: Optional[str]) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    path = Path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    LOG.info("Wrote %s", path)


def _exporter(args: argparse.Namespace) -> Optional[MetricsExporter]:
    return MetricsExporter(port=args.metrics_port) if args.metrics_port else None


def cmd_gen_world(args: argparse.Namespace) -> None:
    """Generate the three synthetic datasets into `outdir`."""
    cfg = load_world_config(args.cfg)
    outdir = Path(args.outdir)
    for split, ds in zip(DATASET_FILES, generate_world(cfg)):
        save_dataset(ds, outdir / DATASET_FILES[split])
    (outdir / "world.cfg").write_text(dump_flat_config(cfg), encoding="utf-8")
    LOG.info("Wrote world (seed %d) to %s", cfg.seed, outdir)


def cmd_run(args: argparse.Namespace) -> None:
    """Run the transfer loop and write the report."""
    cfg = load_loop_config(args.cfg)
    report = run(cfg, exporter=_exporter(args), checkpoint_dir=args.checkpoints)
    _write_text(report.to_json(), args.out)


def _parse_values(raw: str) -> list[str]:
    values = [v.strip() for v in raw.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values needs at least one value")
    return values


def cmd_ablate(args: argparse.Namespace) -> None:
    """Run one full loop per axis value; write all reports as a JSON list."""
    cfg = load_loop_config(args.cfg)
    values = _parse_values(args.values)
    exporter = _exporter(args)
    reports = run_ablation(
        cfg, args.axis, values, exporter_factory=(lambda: exporter) if exporter else None
    )
    for value, report in zip(values, reports):
        final = report.iterations[-1]
        LOG.info("%s=%s: final mAP %.4f, CorLoc %.4f", args.axis, value, final.map, final.corloc)
    payload = [
        {"axis": args.axis, "value": value, "report": report.model_dump(mode="json")}
        for value, report in zip(values, reports)
    ]
    _write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", args.out)


def cmd_eval(args: argparse.Namespace) -> None:
    """Score a detections file against a dataset's hidden ground truth."""
    dets = load_detections(args.dets)
    ds = load_dataset(args.gt)
    truth = hidden_truth(ds)
    unknown = sorted(set(dets) - set(truth))
    if unknown:
        LOG.warning("Ignoring detections of %d unknown images", len(unknown))
    map_result = evaluate_map(dets, truth, iou_thresh=args.iou, method=args.method)
    loc = corloc(dets, truth) if ds.split is Split.TARGET_TRAIN else None
    rows = metrics_rows(ds.categories, map_result, loc)
    if args.out:
        write_metrics(rows, args.out)
    else:
        sys.stdout.write(metrics_json(rows) + "\n")
    LOG.info("mAP %.4f over %d categories", map_result.map, len(map_result.ap))


def cmd_mine(args: argparse.Namespace) -> None:
    """Apply the mining rules to a detections file and report their quality."""
    dets = load_detections(args.dets)
    ds = load_dataset(args.ds)
    cfg = MiningConfig(tau=args.tau, o=args.o)
    views = ds.views()

    def lookup(image: ImageView) -> list[Detection]:
        return dets.get(image.id, [])

    if ds.split is Split.SOURCE_TRAIN:
        mined = mine_source(views, lookup, cfg)
        truth = missing_annotations(ds)
    else:
        mined = mine_target(views, lookup, cfg)
        truth = hidden_truth(ds)
    problems = audit_mined(views, mined, cfg)
    if problems:
        raise RuntimeError(f"mined boxes fail the mining rules: {problems[:3]}")
    if args.out:
        save_mined(mined, args.out)
    stats = mining_stats(mined, truth)
    summary = {
        "domain": Domain.SOURCE.value if ds.split is Split.SOURCE_TRAIN else Domain.TARGET.value,
        **stats._asdict(),
    }
    sys.stdout.write(json.dumps(summary, indent=1, sort_keys=True) + "\n")


def cmd_report(args: argparse.Namespace) -> None:
    """Render a run report as CSV or Markdown."""
    path = Path(args.report)
    try:
        report = RunReport.from_json(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"Failed to read report '{path}': {e}") from e
    _write_text(render_report(report, args.format), args.out)


def _probability(raw: str) -> float:
    value = float(raw)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"{raw} is not in [0, 1]")
    return value


class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage errors raise instead of exiting."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    """The `progtrans` argument parser."""
    parser = _Parser(
        prog="progtrans",
        description="Weakly supervised detection with progressive knowledge transfer.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-world", help="write the synthetic datasets")
    p.add_argument("cfg", help="world config file (flat key = value)")
    p.add_argument("outdir", help="output directory")
    p.set_defaults(func=cmd_gen_world)

    p = sub.add_parser("run", help="run the transfer loop")
    p.add_argument("cfg", help="run config file (flat key = value)")
    p.add_argument("--out", help="report path (default: stdout)")
    p.add_argument("--checkpoints", help="directory for per-iteration weights")
    p.add_argument("--metrics-port", type=int, help="serve Prometheus metrics on this port")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="one run per value of a parameter")
    p.add_argument("cfg", help="run config file")
    p.add_argument("--axis", required=True, choices=[a.value for a in AblationAxis])
    p.add_argument("--values", required=True, help="comma separated values")
    p.add_argument("--out", help="output path (default: stdout)")
    p.add_argument("--metrics-port", type=int, help="serve Prometheus metrics on this port")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="mAP (and CorLoc on target_train) of a detections file")
    p.add_argument("--dets", required=True, help="detections JSON")
    p.add_argument("--gt", required=True, help="dataset JSON with hidden_gt")
    p.add_argument("--iou", type=_probability, default=0.5, help="mAP matching IoU")
    p.add_argument(
        "--method", choices=[m.value for m in ApMethod], default=ApMethod.ELEVEN_POINT.value
    )
    p.add_argument("--out", help="metrics file, .csv or .json (default: JSON on stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mine", help="mine pseudo ground truth from a detections file")
    p.add_argument("--dets", required=True, help="detections JSON")
    p.add_argument("--ds", required=True, help="source_train or target_train dataset JSON")
    p.add_argument("--tau", type=float, default=0.8, help="score threshold")
    p.add_argument("--o", type=float, default=0.1, help="source overlap threshold")
    p.add_argument("--out", help="write mined boxes here")
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("report", help="render a run report")
    p.add_argument("report", help="report JSON written by `run`")
    p.add_argument("--format", choices=["csv", "md"], default="csv")
    p.add_argument("--out", help="output path (default: stdout)")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, dispatch, and map failures to exit codes."""
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except ValueError as e:
        LOG.error("%s", e)
        return EXIT_INVALID
    except Exception as e:  # pylint: disable=broad-exception-caught
        LOG.error("%s: %s", type(e).__name__, e)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
