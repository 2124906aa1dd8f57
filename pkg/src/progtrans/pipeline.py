"""
Progressive knowledge transfer, end to end.

Iteration 0 trains the OCUD on the source data and the MIL head on the
weakly labelled target data (the one-step transfer baseline). Each
refinement then mines pseudo ground truth in the original source and target
datasets with the current target detector, refines the OCUD warm-started on
the augmented data, and refines the MIL head on the new proposals. Every
iteration is evaluated: mAP on target_test, CorLoc on target_train.
"""

import contextlib
import csv
import enum
import io
import json
import time
from pathlib import Path
from typing import Any, Callable, Iterator, Optional, Sequence

import numpy as np
import pydantic

from progtrans import rng
from progtrans.config import ConfigError, build_model, read_flat_config
from progtrans.data_model import (
    Annotation,
    Dataset,
    Detection,
    ImageView,
    Origin,
    Split,
    augment,
    load_dataset,
)
from progtrans.evaluation import ApMethod, evaluate_corloc, evaluate_map, hidden_truth
from progtrans.logger import setup_logger
from progtrans.mil import MilParams, MilTrainConfig, TargetDetector, train_mil
from progtrans.mining import (
    MiningConfig,
    MiningStats,
    audit_mined,
    mine_source,
    mine_target,
    mining_stats,
)
from progtrans.ocud import OcudParams, OcudTrainConfig, ProposalConfig, ocud_scores, train_ocud
from progtrans.prometheus_wrapper.metrics_exporter import MetricsExporter
from progtrans.synthworld import CandidatePool, WorldConfig, generate_world, load_world_config

LOG = setup_logger(__name__)

WORLD_PREFIX: str = "world."
DATASET_FILES: dict[Split, str] = {
    Split.SOURCE_TRAIN: "source_train.json",
    Split.TARGET_TRAIN: "target_train.json",
    Split.TARGET_TEST: "target_test.json",
}


class PipelineError(RuntimeError):
    """Custom exception for a failure inside the transfer loop."""

    def __init__(self, iteration: int, message: str) -> None:
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


class LoopConfig(pydantic.BaseModel):
    """
    Every knob of a run. Field aliases are the config-file keys (`N`,
    `lambda`); plain field names are accepted too.
    """

    model_config = pydantic.ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    n_refinements: int = pydantic.Field(5, ge=0, alias="N")
    beta: float = pydantic.Field(5.0, gt=0.0)
    lam: float = pydantic.Field(0.2, ge=0.0, alias="lambda")
    eta: float = pydantic.Field(0.5, ge=0.0, le=1.0)
    tau: float = pydantic.Field(0.8, gt=0.0, lt=1.0)
    o: float = pydantic.Field(0.1, gt=0.0, le=1.0)
    nms_iou: float = pydantic.Field(0.4, ge=0.0, le=1.0)
    proposal_nms_iou: float = pydantic.Field(0.7, ge=0.0, le=1.0)
    max_proposals: int = pydantic.Field(20, gt=0)
    det_score_thresh: float = pydantic.Field(0.0, ge=0.0, le=1.0)
    ocud_steps: int = pydantic.Field(3500, ge=0)
    ocud_refine_steps: int = pydantic.Field(1000, ge=0)
    ocud_lr: float = pydantic.Field(0.5, gt=0.0)
    mil_steps: int = pydantic.Field(1500, ge=0)
    mil_refine_steps: int = pydantic.Field(600, ge=0)
    mil_lr: float = pydantic.Field(0.1, gt=0.0)
    lr_drop_at: float = pydantic.Field(0.7, ge=0.0, le=1.0)
    match_iou: float = pydantic.Field(0.5, gt=0.0, le=1.0)
    neg_pos_ratio: float = pydantic.Field(3.0, gt=0.0)
    ap_method: ApMethod = ApMethod.ELEVEN_POINT
    mil_warm_start: bool = True
    source_inclusion: bool = True
    source_fraction: float = pydantic.Field(1.0, gt=0.0, le=1.0)
    fuse_before_nms: bool = True
    seed: int = pydantic.Field(42, ge=0)
    world: Optional[str] = None
    datasets: Optional[str] = None
    world_overrides: dict[str, Any] = pydantic.Field(default_factory=dict)

    def mining(self) -> MiningConfig:
        """Mining thresholds of this run."""
        return MiningConfig(tau=self.tau, o=self.o)

    def proposals(self) -> ProposalConfig:
        """Proposal settings of this run."""
        return ProposalConfig(
            proposal_nms_iou=self.proposal_nms_iou, max_proposals=self.max_proposals
        )

    def ocud_train(self, iteration: int) -> OcudTrainConfig:
        """OCUD schedule of an iteration (refinements use the short schedule)."""
        return OcudTrainConfig(
            steps=self.ocud_steps if iteration == 0 else self.ocud_refine_steps,
            lr=self.ocud_lr,
            lr_drop_at=self.lr_drop_at,
            match_iou=self.match_iou,
            neg_pos_ratio=self.neg_pos_ratio,
            seed=_stream_seed(self.seed, "ocud", iteration),
        )

    def mil_train(self, iteration: int) -> MilTrainConfig:
        """MIL schedule of an iteration (refinements use the short schedule)."""
        return MilTrainConfig(
            steps=self.mil_steps if iteration == 0 else self.mil_refine_steps,
            lr=self.mil_lr,
            lr_drop_at=self.lr_drop_at,
            beta=self.beta,
            lam=self.lam,
            seed=_stream_seed(self.seed, "mil", iteration),
        )


def _stream_seed(seed: int, *path: Any) -> int:
    return int(rng.stream(seed, *path).integers(0, 2**32))


def load_loop_config(path: str | Path) -> LoopConfig:
    """
    Read a run config file.

    Keys prefixed `world.` override world parameters; `world` and
    `datasets` paths are resolved relative to the config file.

    **Raises:**
        - `ConfigError`: On unknown keys or invalid values (world included).
    """
    path = Path(path)
    raw = read_flat_config(path)
    overrides = {k[len(WORLD_PREFIX) :]: v for k, v in raw.items() if k.startswith(WORLD_PREFIX)}
    values: dict[str, Any] = {k: v for k, v in raw.items() if not k.startswith(WORLD_PREFIX)}
    for key in ("world", "datasets"):
        if key in values:
            values[key] = str((path.parent / values[key]).resolve())
    values["world_overrides"] = overrides
    cfg = build_model(LoopConfig, values, str(path))
    resolve_world(cfg)
    return cfg


def resolve_world(cfg: LoopConfig) -> WorldConfig:
    """World parameters of a run: file (or defaults seeded by `cfg.seed`) plus overrides."""
    base = load_world_config(cfg.world) if cfg.world else WorldConfig(seed=cfg.seed)
    if not cfg.world_overrides:
        return base
    return build_model(
        WorldConfig, {**base.model_dump(), **cfg.world_overrides}, "world overrides"
    )


def load_datasets(cfg: LoopConfig, world: WorldConfig) -> tuple[Dataset, Dataset, Dataset]:
    """Datasets of a run: read from `cfg.datasets` or generated from `world`."""
    if cfg.datasets is None:
        return generate_world(world)
    root = Path(cfg.datasets)
    loaded = tuple(load_dataset(root / DATASET_FILES[split]) for split in DATASET_FILES)
    for split, ds in zip(DATASET_FILES, loaded):
        if ds.split is not split:
            raise ConfigError(f"{root / DATASET_FILES[split]} holds split {ds.split.value}")
    return loaded  # type: ignore[return-value]


class MiningSummary(pydantic.BaseModel):
    """Mined-box quality of one domain in one iteration."""

    precision: float
    recall: float
    n_mined: int
    n_gt: int

    @classmethod
    def of(cls, stats: MiningStats) -> "MiningSummary":
        """Report view of `MiningStats`."""
        return cls(**stats._asdict())


class IterationReport(pydantic.BaseModel):
    """Metrics of one iteration (0 is the one-step transfer baseline)."""

    iteration: int
    map: float
    ap: dict[str, float]
    corloc: float
    corloc_per_category: dict[str, float]
    source_mining: Optional[MiningSummary] = None
    target_mining: Optional[MiningSummary] = None
    leaked_objectness: Optional[float] = None
    ocud_loss: list[float]
    mil_loss: list[float]


class RunReport(pydantic.BaseModel):
    """Everything a run measured, with the full configuration echoed."""

    seed: int
    config: dict[str, Any]
    world: dict[str, Any]
    rng_streams: list[str]
    iterations: list[IterationReport]

    def to_json(self) -> str:
        """Deterministic JSON text (sorted keys)."""
        return json.dumps(self.model_dump(mode="json"), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        """Parse a report written by `to_json`."""
        return cls.model_validate_json(text)


class _CachedDetector:  # pylint: disable=too-few-public-methods
    def __init__(self, detector: TargetDetector) -> None:
        self.detector = detector
        self.__cache: dict[str, list[Detection]] = {}

    def __call__(self, image: ImageView) -> list[Detection]:
        dets = self.__cache.get(image.id)
        if dets is None:
            dets = self.detector(image)
            self.__cache[image.id] = dets
        return dets


def missing_annotations(ds: Dataset) -> dict[str, list[Annotation]]:
    """Hidden objects of each image that have no identical original annotation."""
    out = {}
    for img in ds.images:
        known = {(a.category, a.bbox) for a in img.annotations if a.origin is Origin.ORIGINAL}
        out[img.id] = [g for g in img.hidden_gt if (g.category, g.bbox) not in known]
    return out


def leaked_objectness(ocud: OcudParams, source: Dataset, pool: CandidatePool) -> Optional[float]:
    """
    Mean OCUD objectness over the unannotated objects of source images.

    Reads simulator truth; evaluation only. None when nothing leaked.
    """
    missing = missing_annotations(source)
    features = []
    for img in source.images:
        if not missing[img.id]:
            continue
        lost = {(a.category, a.bbox) for a in missing[img.id]}
        features.extend(
            obj.feature for obj in pool.objects(img.id) if (obj.category, obj.bbox) in lost
        )
    if not features:
        return None
    return float(np.mean(ocud_scores(ocud, np.stack(features))))


def _subsample_source(source: Dataset, fraction: float, seed: int) -> Dataset:
    if fraction >= 1.0:
        return source
    n = max(1, int(round(fraction * len(source.images))))
    gen = rng.stream(seed, "subsample")
    picked = gen.choice(len(source.images), size=n, replace=False)
    LOG.info("Using %d of %d source images", n, len(source.images))
    return source.subset(source.images[i].id for i in sorted(picked))


def _target_category_ids(target_train: Dataset) -> list[int]:
    ids = sorted({c for img in target_train.images for c in img.labels})
    if not ids:
        raise ConfigError("target_train has no image-level labels")
    return ids


def _register_metrics(exporter: MetricsExporter) -> None:
    if "progtrans_map" in exporter.gauges:
        return
    exporter.register_gauge("progtrans_map", "Target test mAP", ["iteration"])
    exporter.register_gauge("progtrans_corloc", "Target train CorLoc", ["iteration"])
    exporter.register_gauge(
        "progtrans_leaked_objectness",
        "Mean OCUD objectness of unannotated source objects",
        ["iteration"],
    )
    exporter.register_counter("progtrans_mined_boxes", "Mined pseudo boxes", ["domain"])
    exporter.register_histogram("progtrans_stage_seconds", "Stage wall time", ["stage"])


class TransferRun:
    """
    One run of the transfer loop over fixed datasets.

    Holds the candidate pool and the current OCUD/MIL weights between
    iterations; `run()` is the usual entry point.
    """

    def __init__(
        self,
        cfg: LoopConfig,
        world: WorldConfig,
        datasets: tuple[Dataset, Dataset, Dataset],
        exporter: Optional[MetricsExporter] = None,
        checkpoint_dir: Optional[str | Path] = None,
    ) -> None:
        self.cfg = cfg
        self.world = world
        full_source, self.target_train, self.target_test = datasets
        self.full_source = full_source
        self.source = _subsample_source(full_source, cfg.source_fraction, cfg.seed)
        self.category_ids = _target_category_ids(self.target_train)
        self.pool = CandidatePool(world, datasets)
        self.exporter = exporter or MetricsExporter()
        _register_metrics(self.exporter)
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.ocud: Optional[OcudParams] = None
        self.mil: Optional[MilParams] = None
        self.__last_detector: Optional[_CachedDetector] = None

    @contextlib.contextmanager
    def _stage(self, name: str) -> Iterator[None]:
        start = time.perf_counter()
        yield
        self.exporter.observe_histogram(
            "progtrans_stage_seconds", time.perf_counter() - start, {"stage": name}
        )

    def _detector(self) -> _CachedDetector:
        assert self.ocud is not None and self.mil is not None
        return _CachedDetector(
            TargetDetector(
                self.mil,
                self.ocud,
                self.pool,
                self.cfg.proposals(),
                eta=self.cfg.eta,
                nms_iou=self.cfg.nms_iou,
                score_thresh=self.cfg.det_score_thresh,
                fuse_before_nms=self.cfg.fuse_before_nms,
            )
        )

    def _train(
        self, iteration: int, ocud_sets: Sequence[Dataset]
    ) -> tuple[list[float], list[float]]:
        ocud_trace: list[float] = []
        mil_trace: list[float] = []
        warm = iteration > 0
        with self._stage("ocud"):
            self.ocud = train_ocud(
                ocud_sets,
                self.cfg.ocud_train(iteration),
                self.pool,
                init=self.ocud if warm else None,
                on_epoch=lambda _, loss: ocud_trace.append(loss),
            )
        with self._stage("mil"):
            self.mil = train_mil(
                self.target_train,
                self.ocud,
                self.pool,
                self.cfg.mil_train(iteration),
                self.cfg.proposals(),
                category_ids=self.category_ids,
                init=self.mil if warm and self.cfg.mil_warm_start else None,
                on_epoch=lambda _, loss: mil_trace.append(loss),
            )
        if self.checkpoint_dir is not None:
            self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
            self.ocud.save(self.checkpoint_dir / f"ocud_{iteration}.json")
            self.mil.save(self.checkpoint_dir / f"mil_{iteration}.json")
        return ocud_trace, mil_trace

    def _mine(self, detector: _CachedDetector) -> tuple[Dataset, Dataset, MiningStats, MiningStats]:
        mining_cfg = self.cfg.mining()
        source_views = self.source.views()
        target_views = self.target_train.views()
        with self._stage("mining"):
            mined_s = mine_source(source_views, detector, mining_cfg)
            mined_t = mine_target(target_views, detector, mining_cfg)

        problems = audit_mined(source_views, mined_s, mining_cfg) + audit_mined(
            target_views, mined_t, mining_cfg
        )
        if problems:
            raise RuntimeError(f"mined boxes fail the mining rules: {problems[:3]}")

        source_stats = mining_stats(mined_s, missing_annotations(self.source))
        target_stats = mining_stats(mined_t, hidden_truth(self.target_train))
        self.exporter.inc_counter(
            "progtrans_mined_boxes", {"domain": "source"}, source_stats.n_mined
        )
        self.exporter.inc_counter(
            "progtrans_mined_boxes", {"domain": "target"}, target_stats.n_mined
        )
        return (
            augment(self.source, mined_s),
            augment(self.target_train, mined_t),
            source_stats,
            target_stats,
        )

    def _evaluate(self, detector: _CachedDetector) -> tuple[dict[int, float], float, Any]:
        with self._stage("evaluate"):
            test_dets = {img.id: detector(img.view()) for img in self.target_test.images}
            result = evaluate_map(test_dets, self.target_test, method=self.cfg.ap_method)
            loc = evaluate_corloc(detector, self.target_train)
        return result.ap, result.map, loc

    def iteration(self, k: int) -> IterationReport:
        """Run iteration `k` (0 trains from scratch; later ones refine)."""
        source_stats = target_stats = None
        if k == 0:
            ocud_sets: list[Dataset] = [self.source]
        else:
            mined = self._mine(self.__last_detector or self._detector())
            source_plus, target_plus, source_stats, target_stats = mined
            ocud_sets = [source_plus, target_plus] if self.cfg.source_inclusion else [target_plus]

        ocud_trace, mil_trace = self._train(k, ocud_sets)
        self.__last_detector = self._detector()
        ap, mean_ap, loc = self._evaluate(self.__last_detector)
        assert self.ocud is not None
        leaked = leaked_objectness(self.ocud, self.full_source, self.pool)

        names = self.target_test.categories
        report = IterationReport(
            iteration=k,
            map=mean_ap,
            ap={names[c]: v for c, v in ap.items()},
            corloc=loc.mean,
            corloc_per_category={names[c]: v for c, v in loc.corloc.items()},
            source_mining=MiningSummary.of(source_stats) if source_stats else None,
            target_mining=MiningSummary.of(target_stats) if target_stats else None,
            leaked_objectness=leaked,
            ocud_loss=ocud_trace,
            mil_loss=mil_trace,
        )
        labels = {"iteration": str(k)}
        self.exporter.set_gauge("progtrans_map", mean_ap, labels)
        self.exporter.set_gauge("progtrans_corloc", loc.mean, labels)
        if leaked is not None:
            self.exporter.set_gauge("progtrans_leaked_objectness", leaked, labels)
        LOG.info(
            "Iteration %d: mAP %.4f, CorLoc %.4f, leaked objectness %s",
            k,
            mean_ap,
            loc.mean,
            "n/a" if leaked is None else f"{leaked:.4f}",
        )
        return report

    def run(self) -> RunReport:
        """Iterations 0..N, each wrapped so failures name their iteration."""
        iterations = []
        for k in range(self.cfg.n_refinements + 1):
            try:
                iterations.append(self.iteration(k))
            except PipelineError:
                raise
            except Exception as e:
                raise PipelineError(k, str(e)) from e
        streams = ["world", "subsample"] + [
            f"{name}/{k}" for k in range(self.cfg.n_refinements + 1) for name in ("ocud", "mil")
        ]
        return RunReport(
            seed=self.cfg.seed,
            config=self.cfg.model_dump(mode="json", by_alias=True),
            world=self.world.model_dump(mode="json"),
            rng_streams=streams,
            iterations=iterations,
        )


def run(
    cfg: LoopConfig,
    exporter: Optional[MetricsExporter] = None,
    checkpoint_dir: Optional[str | Path] = None,
) -> RunReport:
    """
    Execute the transfer loop for `cfg`.

    **Returns:**
        One report entry per iteration `0..N`; identical configs give
        byte-identical reports.

    **Raises:**
        - `ConfigError`: If the world or dataset inputs are invalid.
        - `PipelineError`: If a stage fails, naming the iteration.
    """
    world = resolve_world(cfg)
    datasets = load_datasets(cfg, world)
    LOG.info("Starting run: N=%d, seed=%d", cfg.n_refinements, cfg.seed)
    return TransferRun(cfg, world, datasets, exporter, checkpoint_dir).run()


class AblationAxis(str, enum.Enum):
    """Parameters `run_ablation` can sweep."""

    TAU = "tau"
    BETA = "beta"
    LAMBDA = "lambda"
    ETA = "eta"
    SOURCE_INCLUSION = "source_inclusion"
    SOURCE_FRACTION = "source_fraction"


_AXIS_FIELD = {
    AblationAxis.TAU: "tau",
    AblationAxis.BETA: "beta",
    AblationAxis.LAMBDA: "lam",
    AblationAxis.ETA: "eta",
    AblationAxis.SOURCE_INCLUSION: "source_inclusion",
    AblationAxis.SOURCE_FRACTION: "source_fraction",
}


def ablation_configs(
    cfg: LoopConfig, axis: AblationAxis | str, values: Sequence[Any]
) -> list[LoopConfig]:
    """One validated config per value, differing from `cfg` only on `axis`."""
    field = _AXIS_FIELD[AblationAxis(axis)]
    base = cfg.model_dump()
    return [build_model(LoopConfig, {**base, field: v}, f"ablation {field}={v}") for v in values]


def run_ablation(
    cfg: LoopConfig,
    axis: AblationAxis | str,
    values: Sequence[Any],
    exporter_factory: Optional[Callable[[], MetricsExporter]] = None,
) -> list[RunReport]:
    """
    A full run per value of `axis`, all sharing the seed and world.

    `source_inclusion=false` refines the OCUD on the mined target data
    only; `source_fraction` subsamples the source images before the run.
    """
    configs = ablation_configs(cfg, axis, values)
    world = resolve_world(cfg)
    datasets = load_datasets(cfg, world)
    reports = []
    for value, sub in zip(values, configs):
        LOG.info("Ablation %s=%s", AblationAxis(axis).value, value)
        exporter = exporter_factory() if exporter_factory else None
        reports.append(TransferRun(sub, world, datasets, exporter).run())
    return reports


REPORT_COLUMNS = (
    "iteration",
    "map",
    "corloc",
    "source_precision",
    "source_recall",
    "target_precision",
    "target_recall",
    "mined_source",
    "mined_target",
    "leaked_objectness",
)


def report_rows(report: RunReport) -> list[dict[str, Any]]:
    """One flat row per iteration."""
    rows = []
    for it in report.iterations:
        src, tgt = it.source_mining, it.target_mining
        rows.append(
            {
                "iteration": it.iteration,
                "map": it.map,
                "corloc": it.corloc,
                "source_precision": src.precision if src else None,
                "source_recall": src.recall if src else None,
                "target_precision": tgt.precision if tgt else None,
                "target_recall": tgt.recall if tgt else None,
                "mined_source": src.n_mined if src else 0,
                "mined_target": tgt.n_mined if tgt else 0,
                "leaked_objectness": it.leaked_objectness,
            }
        )
    return rows


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def render_report(report: RunReport, fmt: str = "csv") -> str:
    """
    Render per-iteration rows as `csv` or `md` (Markdown table).

    **Raises:**
        - `ValueError`: On an unknown format.
    """
    rows = report_rows(report)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(v) for k, v in row.items()})
        return buf.getvalue()
    if fmt == "md":
        lines = [
            "| " + " | ".join(REPORT_COLUMNS) + " |",
            "|" + "---|" * len(REPORT_COLUMNS),
        ]
        lines += ["| " + " | ".join(_cell(row[c]) for c in REPORT_COLUMNS) + " |" for row in rows]
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {fmt!r} (expected csv or md)")
