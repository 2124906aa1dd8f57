"""
Two-branch MIL classifier.

For R proposals with features F (R x d) and C target categories:

    x^d = F Wd^T + bd        s^d = sigmoid(x^d)
    sigma^d = softmax over proposals of (beta * s^d)      (per category)
    x^c = F Wc^T + bc
    sigma^c = softmax over categories of x^c              (per proposal)
    s = sigma^d * sigma^c    yhat_j = sum_i s_ij

trained with the image-level binary cross-entropy plus `lam` times a guide
term pulling `max_j s^d_ij` towards the OCUD objectness `s_i`. Inference
fuses `eta * s_ij + (1 - eta) * s_i`.

Each branch is a single linear layer; `mil_forward` is the only place that
maps features to `x^d`/`x^c`.
"""

import dataclasses
import json
import logging
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
import pydantic

from progtrans import rng
from progtrans.data_model import Dataset, Detection, ImageView
from progtrans.geometry import BBox, nms
from progtrans.logger import setup_logger
from progtrans.ocud import OcudParams, ProposalConfig, detect_objectness
from progtrans.synthworld import CandidateSource

LOG = setup_logger(__name__)

YHAT_EPS: float = 1e-7

EpochCallback = Callable[[int, float], None]


class MilTrainingError(RuntimeError):
    """Custom exception raised when no target image can be trained on."""


@dataclasses.dataclass(frozen=True, eq=False)
class MilParams:
    """
    Weights of both branches plus the loss hyperparameters.

    **Attributes:**
    - `wd`, `bd`: detection branch, `C x d` and `C`.
    - `wc`, `bc`: classification branch, `C x d` and `C`.
    - `beta`: scale applied to `s^d` before the softmax over proposals.
    - `lam`: weight of the guide loss.
    - `category_ids`: dataset category id of each column.
    """

    wd: np.ndarray
    bd: np.ndarray
    wc: np.ndarray
    bc: np.ndarray
    beta: float = 5.0
    lam: float = 0.2
    category_ids: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        arrays = {}
        for name in ("wd", "bd", "wc", "bc"):
            a = np.array(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(a)):
                raise ValueError(f"MilParams.{name} has non-finite entries")
            a.flags.writeable = False
            arrays[name] = a
        n_cats, dim = arrays["wd"].shape
        if arrays["wc"].shape != (n_cats, dim) or arrays["bd"].shape != (n_cats,) or arrays[
            "bc"
        ].shape != (n_cats,):
            raise ValueError("MilParams branch shapes do not agree")
        if self.beta <= 0 or self.lam < 0:
            raise ValueError(f"need beta > 0 and lam >= 0, got {self.beta}, {self.lam}")
        ids = tuple(int(c) for c in self.category_ids) or tuple(range(n_cats))
        if len(ids) != n_cats:
            raise ValueError(f"{len(ids)} category ids for {n_cats} columns")
        for name, a in arrays.items():
            object.__setattr__(self, name, a)
        object.__setattr__(self, "category_ids", ids)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MilParams):
            return NotImplemented
        return (
            all(
                np.array_equal(getattr(self, n), getattr(other, n))
                for n in ("wd", "bd", "wc", "bc")
            )
            and (self.beta, self.lam, self.category_ids)
            == (other.beta, other.lam, other.category_ids)
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def n_categories(self) -> int:
        """Number of target categories C."""
        return self.wd.shape[0]

    @property
    def dim(self) -> int:
        """Feature dimension d."""
        return self.wd.shape[1]

    @classmethod
    def init(
        cls,
        category_ids: Sequence[int],
        dim: int,
        gen: np.random.Generator,
        beta: float = 5.0,
        lam: float = 0.2,
        scale: float = 0.01,
    ) -> "MilParams":
        """Small gaussian weights, zero biases."""
        n_cats = len(category_ids)
        return cls(
            wd=gen.normal(0.0, scale, (n_cats, dim)),
            bd=np.zeros(n_cats),
            wc=gen.normal(0.0, scale, (n_cats, dim)),
            bc=np.zeros(n_cats),
            beta=beta,
            lam=lam,
            category_ids=tuple(category_ids),
        )

    def to_json(self) -> str:
        """Checkpoint with weights, hyperparameters and category ids."""
        return json.dumps(
            {
                "wd": self.wd.tolist(),
                "bd": self.bd.tolist(),
                "wc": self.wc.tolist(),
                "bc": self.bc.tolist(),
                "beta": self.beta,
                "lambda": self.lam,
                "category_ids": list(self.category_ids),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "MilParams":
        """Restore a checkpoint written by `to_json`."""
        p = json.loads(text)
        return cls(
            wd=np.asarray(p["wd"], dtype=float),
            bd=np.asarray(p["bd"], dtype=float),
            wc=np.asarray(p["wc"], dtype=float),
            bc=np.asarray(p["bc"], dtype=float),
            beta=float(p["beta"]),
            lam=float(p["lambda"]),
            category_ids=tuple(p["category_ids"]),
        )

    def save(self, path: str | Path) -> None:
        """Write the checkpoint to `path`."""
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "MilParams":
        """Read a checkpoint from `path`."""
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


@dataclasses.dataclass(frozen=True)
class ScoreTensors:
    """Intermediate and final scores of one forward pass (R x C unless noted)."""

    xd: np.ndarray
    xc: np.ndarray
    sd: np.ndarray
    sigma_d: np.ndarray
    sigma_c: np.ndarray
    s: np.ndarray
    yhat: np.ndarray  # length C


class LossTerms(NamedTuple):
    """Total loss and its two parts."""

    total: float
    wsddn: float
    guide: float


@dataclasses.dataclass(frozen=True)
class MilGrad:
    """Gradient of the total loss, shaped like the MilParams weights."""

    wd: np.ndarray
    bd: np.ndarray
    wc: np.ndarray
    bc: np.ndarray


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _check_features(p: MilParams, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=float)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError("MIL needs at least one proposal (an R x d feature matrix, R >= 1)")
    if features.shape[1] != p.dim:
        raise ValueError(f"features have dimension {features.shape[1]}, expected {p.dim}")
    return features


def _check_targets(p: MilParams, n_props: int, y: np.ndarray, s_obj: np.ndarray) -> None:
    if y.shape != (p.n_categories,):
        raise ValueError(f"labels have shape {y.shape}, expected ({p.n_categories},)")
    if s_obj.shape != (n_props,):
        raise ValueError(f"objectness has shape {s_obj.shape}, expected ({n_props},)")


def mil_forward(p: MilParams, features: np.ndarray) -> ScoreTensors:
    """
    Score every proposal for every category.

    **Raises:**
        - `ValueError`: If there is no proposal or the dimension is wrong.
    """
    features = _check_features(p, features)
    xd = features @ p.wd.T + p.bd
    xc = features @ p.wc.T + p.bc
    sd = _sigmoid(xd)
    sigma_d = _softmax(p.beta * sd, axis=0)
    sigma_c = _softmax(xc, axis=1)
    s = sigma_d * sigma_c
    return ScoreTensors(xd, xc, sd, sigma_d, sigma_c, s, s.sum(axis=0))


def wsddn_loss(yhat: np.ndarray, y: np.ndarray) -> float:
    """Mean binary cross-entropy of image-level scores, `yhat` clamped."""
    yc = np.clip(np.asarray(yhat, dtype=float), YHAT_EPS, 1.0 - YHAT_EPS)
    y = np.asarray(y, dtype=float)
    return float(-np.mean(y * np.log(yc) + (1.0 - y) * np.log(1.0 - yc)))


def guide_loss(sd: np.ndarray, s_obj: np.ndarray) -> float:
    """Mean squared gap between `max_j s^d_ij` and the objectness `s_i`."""
    return float(np.mean((sd.max(axis=1) - s_obj) ** 2))


def mil_loss(
    p: MilParams, features: np.ndarray, y: np.ndarray, s_obj: np.ndarray
) -> LossTerms:
    """
    `L = L_wsddn + lam * L_guide` for one image.

    **Parameters:**
        - `features`: `R x d` proposal features.
        - `y`: `{0, 1}` label per category column.
        - `s_obj`: OCUD objectness per proposal.
    """
    st = mil_forward(p, features)
    y = np.asarray(y, dtype=float)
    s_obj = np.asarray(s_obj, dtype=float)
    _check_targets(p, st.s.shape[0], y, s_obj)
    wsddn = wsddn_loss(st.yhat, y)
    guide = guide_loss(st.sd, s_obj)
    return LossTerms(wsddn + p.lam * guide, wsddn, guide)


def mil_grad(p: MilParams, features: np.ndarray, y: np.ndarray, s_obj: np.ndarray) -> MilGrad:
    """
    Exact gradient of `mil_loss(...).total` with respect to the weights.

    The clamp on `yhat` passes no gradient where it is active; the max in
    the guide loss routes its subgradient to the lowest category index on
    ties.
    """
    features = _check_features(p, features)
    y = np.asarray(y, dtype=float)
    s_obj = np.asarray(s_obj, dtype=float)
    st = mil_forward(p, features)
    n_props, n_cats = st.s.shape
    _check_targets(p, n_props, y, s_obj)

    inside = (st.yhat > YHAT_EPS) & (st.yhat < 1.0 - YHAT_EPS)
    yc = np.clip(st.yhat, YHAT_EPS, 1.0 - YHAT_EPS)
    g_yhat = np.where(inside, -(y / yc - (1.0 - y) / (1.0 - yc)) / n_cats, 0.0)

    # s_ij = sigma^d_ij * sigma^c_ij and d yhat_j / d s_ij = 1
    g_sigma_d = g_yhat[None, :] * st.sigma_c
    g_sigma_c = g_yhat[None, :] * st.sigma_d

    g_z = st.sigma_d * (g_sigma_d - (st.sigma_d * g_sigma_d).sum(axis=0, keepdims=True))
    g_xc = st.sigma_c * (g_sigma_c - (st.sigma_c * g_sigma_c).sum(axis=1, keepdims=True))

    g_sd = p.beta * g_z
    top = st.sd.argmax(axis=1)
    gap = st.sd[np.arange(n_props), top] - s_obj
    g_sd[np.arange(n_props), top] += p.lam * 2.0 * gap / n_props

    g_xd = g_sd * st.sd * (1.0 - st.sd)
    return MilGrad(
        wd=g_xd.T @ features,
        bd=g_xd.sum(axis=0),
        wc=g_xc.T @ features,
        bc=g_xc.sum(axis=0),
    )


class MilTrainConfig(pydantic.BaseModel):
    """SGD schedule for (re)training the MIL head. One step is one image."""

    model_config = pydantic.ConfigDict(frozen=True, extra="forbid")

    steps: int = pydantic.Field(1500, ge=0)
    lr: float = pydantic.Field(0.1, gt=0.0)
    lr_drop_at: float = pydantic.Field(0.7, ge=0.0, le=1.0)
    beta: float = pydantic.Field(5.0, gt=0.0)
    lam: float = pydantic.Field(0.2, ge=0.0)
    init_scale: float = pydantic.Field(0.01, ge=0.0)
    seed: int = pydantic.Field(0, ge=0)


class _MilExample(NamedTuple):
    image_id: str
    features: np.ndarray
    labels: np.ndarray
    objectness: np.ndarray


def _examples(
    images: Sequence[ImageView],
    ocud: OcudParams,
    candidates: CandidateSource,
    proposal_cfg: ProposalConfig,
    category_ids: Sequence[int],
) -> list[_MilExample]:
    examples, skipped = [], 0
    for image in images:
        proposals = detect_objectness(ocud, image, candidates, proposal_cfg)
        if not proposals:
            skipped += 1
            continue
        labels = np.array([1.0 if c in image.labels else 0.0 for c in category_ids])
        examples.append(
            _MilExample(
                image.id,
                np.stack([prop.feature for prop in proposals]),
                labels,
                np.array([prop.score for prop in proposals]),
            )
        )
    if skipped:
        LOG.warning("Skipped %d target images with zero proposals", skipped)
    return examples


def train_mil(
    target_train: Dataset | Sequence[ImageView],
    ocud: OcudParams,
    candidates: CandidateSource,
    cfg: MilTrainConfig,
    proposal_cfg: ProposalConfig,
    category_ids: Optional[Sequence[int]] = None,
    init: Optional[MilParams] = None,
    on_epoch: Optional[EpochCallback] = None,
) -> MilParams:
    """
    Train (or fine-tune) the MIL head on image-level labels.

    Proposals come from `detect_objectness` with the given OCUD and are
    fixed for the call. Each SGD step uses one image (all its proposals).
    Images without proposals are skipped with a warning.

    **Parameters:**
        - `category_ids`: Column categories for a scratch start; taken from
          `init` on a warm start.
        - `init`: Warm-start weights (`cfg.beta`/`cfg.lam` still apply).
        - `on_epoch`: Called with the mean loss before training and after
          each full pass.

    **Returns:**
        The trained parameters; `init` itself when `cfg.steps == 0`.

    **Raises:**
        - `ValueError`: If neither `category_ids` nor `init` is given.
        - `MilTrainingError`: If no image has a proposal.
    """
    if cfg.steps == 0 and init is not None:
        return init
    if init is None and not category_ids:
        raise ValueError("train_mil needs category_ids for a scratch start")

    ids = init.category_ids if init is not None else tuple(category_ids or ())
    images = target_train.views() if isinstance(target_train, Dataset) else list(target_train)
    examples = _examples(images, ocud, candidates, proposal_cfg, ids)
    if not examples:
        raise MilTrainingError("no target image has proposals to train on")

    gen = rng.stream(cfg.seed, "mil")
    dim = examples[0].features.shape[1]
    if init is None:
        params = MilParams.init(ids, dim, gen, cfg.beta, cfg.lam, cfg.init_scale)
    else:
        params = dataclasses.replace(init, beta=cfg.beta, lam=cfg.lam)
    if cfg.steps == 0:
        return params

    wd, bd = params.wd.copy(), params.bd.copy()
    wc, bc = params.wc.copy(), params.bc.copy()

    def current() -> MilParams:
        return MilParams(wd, bd, wc, bc, cfg.beta, cfg.lam, ids)

    def objective() -> float:
        p = current()
        return float(
            np.mean([mil_loss(p, ex.features, ex.labels, ex.objectness).total for ex in examples])
        )

    LOG.info(
        "Training MIL: %d images, %d categories, %d steps, lr=%g, warm_start=%s",
        len(examples),
        len(ids),
        cfg.steps,
        cfg.lr,
        init is not None,
    )
    if on_epoch is not None:
        on_epoch(0, objective())

    drop_step = int(cfg.lr_drop_at * cfg.steps)
    order = gen.permutation(len(examples))
    epoch = 0
    for step in range(cfg.steps):
        pos_in_epoch = step % len(examples)
        if pos_in_epoch == 0 and step > 0:
            order = gen.permutation(len(examples))
        ex = examples[order[pos_in_epoch]]
        lr = cfg.lr if step < drop_step else cfg.lr * 0.1

        grad = mil_grad(current(), ex.features, ex.labels, ex.objectness)
        wd -= lr * grad.wd
        bd -= lr * grad.bd
        wc -= lr * grad.wc
        bc -= lr * grad.bc

        if pos_in_epoch == len(examples) - 1:
            epoch += 1
            if on_epoch is not None or LOG.isEnabledFor(logging.DEBUG):
                loss = objective()
                LOG.debug("MIL epoch %d: loss %.6f", epoch, loss)
                if on_epoch is not None:
                    on_epoch(epoch, loss)

    return current()


def fuse_scores(s: np.ndarray, s_obj: np.ndarray, eta: float) -> np.ndarray:
    """
    `eta * s_ij + (1 - eta) * s_i`.

    **Raises:**
        - `ValueError`: On a shape mismatch or `eta` outside [0, 1].
    """
    s = np.asarray(s, dtype=float)
    s_obj = np.asarray(s_obj, dtype=float)
    if s.ndim != 2 or s_obj.shape != (s.shape[0],):
        raise ValueError(f"cannot fuse scores of shape {s.shape} with objectness {s_obj.shape}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    return eta * s + (1.0 - eta) * s_obj[:, None]


@dataclasses.dataclass(frozen=True)
class _Ranked:
    bbox: BBox
    score: float
    category: int
    fused: float


def detect_target(
    mil: MilParams,
    ocud: OcudParams,
    image: ImageView,
    candidates: CandidateSource,
    eta: float,
    nms_iou: float,
    proposal_cfg: ProposalConfig,
    score_thresh: float = 0.0,
    fuse_before_nms: bool = True,
) -> list[Detection]:
    """
    The target-domain detector: OCUD proposals scored by the MIL head.

    Every proposal yields one detection per category column with the fused
    score; detections under `score_thresh` are dropped and per-category NMS
    at `nms_iou` runs on the rest. With `fuse_before_nms` unset, NMS ranks
    by the MIL score `s_ij` and survivors get the fused score.
    """
    proposals = detect_objectness(ocud, image, candidates, proposal_cfg)
    if not proposals:
        return []
    st = mil_forward(mil, np.stack([prop.feature for prop in proposals]))
    s_obj = np.array([prop.score for prop in proposals])
    fused = np.clip(fuse_scores(st.s, s_obj, eta), 0.0, 1.0)
    rank_by = fused if fuse_before_nms else st.s

    kept: list[_Ranked] = []
    for j, category in enumerate(mil.category_ids):
        column = [
            _Ranked(prop.bbox, float(rank_by[i, j]), category, float(fused[i, j]))
            for i, prop in enumerate(proposals)
            if fused[i, j] >= score_thresh
        ]
        kept.extend(nms(column, nms_iou))
    return [Detection(bbox=r.bbox, category=r.category, score=r.fused) for r in kept]


class TargetDetector:  # pylint: disable=too-few-public-methods
    """
    `D_T` as a callable: image view in, detections out.

    Bundles the current OCUD and MIL weights with the inference settings.
    """

    def __init__(
        self,
        mil: MilParams,
        ocud: OcudParams,
        candidates: CandidateSource,
        proposal_cfg: ProposalConfig,
        eta: float = 0.5,
        nms_iou: float = 0.4,
        score_thresh: float = 0.0,
        fuse_before_nms: bool = True,
    ) -> None:
        self.mil = mil
        self.ocud = ocud
        self.__candidates = candidates
        self.__proposal_cfg = proposal_cfg
        self.__eta = eta
        self.__nms_iou = nms_iou
        self.__score_thresh = score_thresh
        self.__fuse_before_nms = fuse_before_nms

    def __call__(self, image: ImageView) -> list[Detection]:
        return detect_target(
            self.mil,
            self.ocud,
            image,
            self.__candidates,
            self.__eta,
            self.__nms_iou,
            self.__proposal_cfg,
            self.__score_thresh,
            self.__fuse_before_nms,
        )
