"""
Losses, optimiser and training loop.

Loss for the standard network::

    L = L_gland + L_contour + lam * (L_aux_gland + L_aux_contour) + gamma * sum ||W||^2

and for the plus network::

    L = L_gland + L_contour + L_lumen + L_lumen_contour
        + lam * (L_aux_gland + L_aux_lumen) + gamma * sum ||W||^2

Each term is a pixel-mean softmax cross-entropy (multiply by N*H*W for the
summed form). ``lam`` is divided by ``lambda_decay_factor`` every
``lambda_decay_every_epochs`` epochs. Weight decay covers convolution
kernels only.

Training log lines are space-separated ``key=value`` records. ``kind=train``
lines carry step, epoch, lambda, total loss and every term; ``kind=val``
lines carry the validation object Dice and detection F1. Floats are written
with 9 significant digits, and nothing in the log depends on wall-clock time.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from . import checkpoint as ckpt
from . import ops
from .data.augment import AugmentSpec, augment
from .data.types import Dataset, Sample, to_input
from .errors import ConfigError, NumericError
from .evaluation import detection_f1, lumen_instances, object_dice, postprocess
from .inference import predict_image
from .model import PLUS, STANDARD, MILDNet, SegmentationOutput, fan_in, xavier_init
from .tensor import Tensor

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "LabelBundle",
    "instance_edges",
    "contour_band",
    "loss_terms",
    "total_loss",
    "total_loss_plus",
    "lambda_schedule",
    "xavier_init",
    "fan_in",
    "AdamState",
    "adam_step",
    "TrainResult",
    "train",
]


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 2
    gamma: float = 1e-5
    lambda_init: float = 1.0
    lambda_decay_every_epochs: int = 8
    lambda_decay_factor: float = 10.0
    max_epochs: int = 30
    seed: int = 0
    max_steps: Optional[int] = None
    contour_width: int = 2
    val_fraction: float = 0.2
    val_every: int = 1  # epochs between validations
    target_dice: Optional[float] = None  # stop once validation Dice reaches this
    target_lumen_dice: Optional[float] = None  # plus variant: also require this lumen Dice
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = ("learning_rate", "batch_size", "lambda_decay_every_epochs", "lambda_decay_factor",
                    "max_epochs", "contour_width", "val_every", "eps")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.gamma < 0 or self.lambda_init < 0:
            raise ConfigError("gamma and lambda_init must be non-negative")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError(f"max_steps must be positive, got {self.max_steps}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown TrainConfig field(s): {sorted(unknown)}")
        return cls(**d)


def lambda_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Auxiliary-loss weight at ``epoch``: lambda_init / factor**(epoch // every)."""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    return cfg.lambda_init / cfg.lambda_decay_factor ** (epoch // cfg.lambda_decay_every_epochs)


# ----------------------------------------------------------------------
# labels
# ----------------------------------------------------------------------
def instance_edges(labels: np.ndarray) -> np.ndarray:
    """Pixels with a 4-neighbour of a different id (either side of every edge
    that touches a gland); background-background pairs never count."""
    p = np.pad(labels, 1, mode="edge")
    c = p[1:-1, 1:-1]
    edge = np.zeros(labels.shape, bool)
    for nb in (p[:-2, 1:-1], p[2:, 1:-1], p[1:-1, :-2], p[1:-1, 2:]):
        edge |= nb != c
    return edge


def contour_band(labels: np.ndarray, width: int = 2) -> np.ndarray:
    """Boundary band of every instance.

    Width 1 is the inner boundary; width 2 adds the pixel just outside it; every
    further 2 px grow the band by one pixel on each side.
    """
    edge = instance_edges(labels)
    if width <= 1:
        return edge & (labels > 0)
    grow = (width - 2) // 2
    if grow:
        edge = ndimage.binary_dilation(edge, structure=ndimage.generate_binary_structure(2, 1), iterations=grow)
    return edge


@dataclass
class LabelBundle:
    """Binary targets, each (N, H, W) uint8."""

    gland: np.ndarray
    contour: np.ndarray
    lumen: Optional[np.ndarray] = None
    lumen_contour: Optional[np.ndarray] = None

    @classmethod
    def from_instances(cls, labels: np.ndarray, lumen: Optional[np.ndarray] = None, width: int = 2) -> "LabelBundle":
        labels = np.asarray(labels)
        if labels.ndim == 2:
            labels = labels[None]
            lumen = None if lumen is None else np.asarray(lumen)[None]
        gland = (labels > 0).astype(np.uint8)
        contour = np.stack([contour_band(l, width) for l in labels]).astype(np.uint8)
        if lumen is None:
            return cls(gland, contour)
        lum = (lumen > 0).astype(np.uint8)
        lc = np.stack([contour_band(l, width) for l in lumen]).astype(np.uint8)
        return cls(gland, contour, lum, lc)

    @classmethod
    def stack(cls, bundles: Sequence["LabelBundle"]) -> "LabelBundle":
        def cat(name):
            parts = [getattr(b, name) for b in bundles]
            return None if any(p is None for p in parts) else np.concatenate(parts)

        return cls(cat("gland"), cat("contour"), cat("lumen"), cat("lumen_contour"))

    @property
    def shape(self) -> tuple:
        return self.gland.shape


# output branch -> label field
TARGETS = {
    "gland": "gland",
    "contour": "contour",
    "lumen": "lumen",
    "lumen_contour": "lumen_contour",
    "aux_gland": "gland",
    "aux_contour": "contour",
    "aux_lumen": "lumen",
}


# ----------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------
def loss_terms(out: SegmentationOutput, labels: LabelBundle) -> Dict[str, Tensor]:
    """Cross-entropy of every output branch against its target."""
    terms = {}
    for name, logits in out.logits.items():
        target = getattr(labels, TARGETS[name])
        if target is None:
            raise ConfigError(f"branch {name!r} needs {TARGETS[name]} labels, which are missing")
        if target.shape != (logits.shape[0],) + logits.shape[2:]:
            raise ConfigError(f"{name}: labels {target.shape} do not match output {logits.shape}")
        terms[name] = ops.softmax_cross_entropy(logits, target)
    return terms


def weight_decay(weights: Sequence[Tensor]) -> Tensor:
    total = None
    for w in weights:
        sq = ops.sum_squares(w)
        total = sq if total is None else ops.add(total, sq)
    return total if total is not None else Tensor(np.zeros((), np.float32))


def _combine(terms, main, aux, lam, gamma, weights, report):
    loss = terms[main[0]]
    for name in main[1:]:
        loss = ops.add(loss, terms[name])
    for name in aux:
        loss = ops.add(loss, ops.scale(terms[name], lam))
    decay = weight_decay(weights)
    loss = ops.add(loss, ops.scale(decay, gamma))
    if report is not None:
        for name, t in terms.items():
            report["L_" + name] = float(t.data)
        report["L_decay"] = float(decay.data)
    return loss


def total_loss(
    out: SegmentationOutput,
    labels: LabelBundle,
    lam: float,
    gamma: float,
    weights: Sequence[Tensor] = (),
    report: Optional[dict] = None,
) -> Tensor:
    """L_gland + L_contour + lam (L_aux_gland + L_aux_contour) + gamma sum ||W||^2.

    ``report``, when given, receives the value of every term.
    """
    if out.variant != STANDARD:
        raise ConfigError("total_loss takes a standard-variant output; use total_loss_plus")
    terms = loss_terms(out, labels)
    return _combine(terms, ("gland", "contour"), ("aux_gland", "aux_contour"), lam, gamma, weights, report)


def total_loss_plus(
    out: SegmentationOutput,
    labels: LabelBundle,
    lam: float,
    gamma: float,
    weights: Sequence[Tensor] = (),
    report: Optional[dict] = None,
) -> Tensor:
    """Four main branches plus lam-weighted gland and lumen auxiliaries (no contour auxiliary)."""
    if out.variant != PLUS:
        raise ConfigError("total_loss_plus takes a plus-variant output; use total_loss")
    terms = loss_terms(out, labels)
    main = ("gland", "contour", "lumen", "lumen_contour")
    return _combine(terms, main, ("aux_gland", "aux_lumen"), lam, gamma, weights, report)


def loss_for(variant: str) -> Callable:
    return total_loss_plus if variant == PLUS else total_loss


# ----------------------------------------------------------------------
# Adam
# ----------------------------------------------------------------------
@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def to_tensors(self) -> Dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out["opt.m." + name] = self.m[name]
            out["opt.v." + name] = self.v[name]
        return out

    @classmethod
    def from_tensors(cls, tensors: Dict[str, np.ndarray], step: int) -> "AdamState":
        st = cls(step=step)
        for key, arr in tensors.items():
            if key.startswith("opt.m."):
                st.m[key[6:]] = arr.copy()
            elif key.startswith("opt.v."):
                st.v[key[6:]] = arr.copy()
        return st


def adam_step(
    params: Dict[str, Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update of every parameter, in place.

    A missing gradient counts as zero. Any non-finite gradient aborts the step
    before a single weight moves, naming the offending tensor.
    """
    for name, p in params.items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NumericError(f"non-finite gradient in {name}; update aborted")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name], state.v[name] = m.astype(p.data.dtype), v.astype(p.data.dtype)
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data = (p.data - update).astype(p.data.dtype)


# ----------------------------------------------------------------------
# loop
# ----------------------------------------------------------------------
def format_record(rec: dict) -> str:
    parts = []
    for k, v in rec.items():
        if isinstance(v, float):
            v = f"{v:.9g}"
        parts.append(f"{k}={v}")
    return " ".join(parts)


def parse_record(line: str) -> dict:
    out = {}
    for tok in line.split():
        k, _, v = tok.partition("=")
        try:
            out[k] = int(v)
        except ValueError:
            try:
                out[k] = float(v)
            except ValueError:
                out[k] = v
    return out


@dataclass
class TrainResult:
    model: MILDNet  # best-validation weights
    best_dice: float  # best selection_score seen
    best_step: int
    records: List[dict]
    step: int
    epoch: int
    state: AdamState

    @property
    def losses(self) -> List[float]:
        return [r["loss"] for r in self.records if r["kind"] == "train"]

    @property
    def lambdas(self) -> Dict[int, float]:
        return {r["epoch"]: r["lambda"] for r in self.records if r["kind"] == "train"}


def validate(model: MILDNet, samples: Sequence[Sample]) -> Dict[str, float]:
    """Mean object Dice and detection F1 of post-processed gland predictions,
    plus lumen object Dice for the four-branch network when lumen labels exist."""
    dices, f1s, lumen = [], [], []
    with_lumen = model.cfg.variant == PLUS and all(s.lumen is not None for s in samples)
    for s in samples:
        probs = predict_image(model, s.image)
        pred = postprocess(probs["gland"][1])
        dices.append(object_dice(pred, s.labels))
        f1s.append(detection_f1(pred, s.labels))
        if with_lumen:
            lumen.append(object_dice(lumen_instances(probs["lumen"][1]), s.lumen))
    out = {"val_dice": float(np.mean(dices)), "val_f1": float(np.mean(f1s))}
    if with_lumen:
        out["val_lumen_dice"] = float(np.mean(lumen))
    return out


def selection_score(metrics: Dict[str, float]) -> float:
    """Checkpoint selection: gland Dice, averaged with lumen Dice when present."""
    if "val_lumen_dice" in metrics:
        return 0.5 * (metrics["val_dice"] + metrics["val_lumen_dice"])
    return metrics["val_dice"]


def _reached(cfg: TrainConfig, metrics: Dict[str, float]) -> bool:
    if cfg.target_dice is None and cfg.target_lumen_dice is None:
        return False
    if cfg.target_dice is not None and metrics["val_dice"] < cfg.target_dice:
        return False
    if cfg.target_lumen_dice is not None and metrics.get("val_lumen_dice", -1.0) < cfg.target_lumen_dice:
        return False
    return True


def _prepare(sample: Sample, aug: Optional[AugmentSpec], seed, width: int, cache: dict):
    if aug is None:
        if sample.name not in cache:
            cache[sample.name] = (sample, LabelBundle.from_instances(sample.labels, sample.lumen, width))
        return cache[sample.name]
    s = augment(sample, aug, seed)
    return s, LabelBundle.from_instances(s.labels, s.lumen, width)


def _copy_params(model: MILDNet) -> Dict[str, np.ndarray]:
    return {k: t.data.copy() for k, t in model.params.items()}


def train(
    model: MILDNet,
    dataset: Union[Dataset, Sequence[Sample]],
    cfg: TrainConfig,
    aug: Optional[AugmentSpec] = None,
    out_dir: Optional[Union[str, Path]] = None,
    resume: Optional[ckpt.Checkpoint] = None,
) -> TrainResult:
    """Train ``model`` in place and return the best-validation weights.

    ``dataset`` may be a :class:`Dataset` (its split is used) or a plain list
    of samples (split here with ``cfg.val_fraction``). With no validation
    items, validation runs on the training items. When ``out_dir`` is given
    the log (``train.log``), the best checkpoint (``best.ckpt``) and the final
    state including optimiser moments (``last.ckpt``) are written there.

    Shuffling is keyed on (seed, epoch) and dropout on (seed, step), so a run
    resumed from ``last.ckpt`` continues exactly as an uninterrupted run.
    """
    if not isinstance(dataset, Dataset):
        dataset = Dataset.from_samples(list(dataset), cfg.val_fraction, cfg.seed)
    train_items = dataset.train
    val_items = dataset.val or train_items
    if not train_items:
        raise ConfigError("no training items")
    variant = model.cfg.variant
    if variant == PLUS and any(s.lumen is None for s in train_items):
        raise ConfigError("the plus variant needs lumen labels for every training image")
    loss_fn = loss_for(variant)

    state = AdamState()
    step, start_epoch = 0, 0
    best_dice, best_step = -1.0, -1
    best = None
    if resume is not None:
        meta = resume.meta
        step = int(meta.get("step", 0))
        start_epoch = int(meta.get("next_epoch", 0))
        state = AdamState.from_tensors(resume.tensors, int(meta.get("adam_step", 0)))
        best_dice = float(meta.get("best_dice", -1.0))
        best_step = int(meta.get("best_step", -1))
        if out_dir is not None and (Path(out_dir) / "best.ckpt").exists():
            best = {k: v for k, v in ckpt.load(Path(out_dir) / "best.ckpt").tensors.items()}

    out_path = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_path / "train.log", "a" if resume is not None else "w")

    records: List[dict] = []

    def emit(rec):
        records.append(rec)
        line = format_record(rec)
        logger.debug(line)
        if log_fh is not None:
            log_fh.write(line + "\n")
            log_fh.flush()

    if aug is None:
        shapes = {s.image.shape[:2] for s in train_items}
        if len(shapes) > 1 or any(d % 8 for d in next(iter(shapes))):
            aug = AugmentSpec.crop_only(model.cfg.input_size)

    cache: dict = {}
    epoch = start_epoch
    stop = False
    try:
        for epoch in range(start_epoch, cfg.max_epochs):
            lam = lambda_schedule(epoch, cfg)
            order = np.random.default_rng([cfg.seed, 1, epoch]).permutation(len(train_items))
            for b in range(0, len(order), cfg.batch_size):
                idx = order[b : b + cfg.batch_size]
                prepared = [_prepare(train_items[i], aug, [cfg.seed, 2, step, j], cfg.contour_width, cache)
                            for j, i in enumerate(idx)]
                x = to_input(np.stack([p[0].image for p in prepared]))
                labels = LabelBundle.stack([p[1] for p in prepared])
                model.zero_grad()
                try:
                    out = model.forward(Tensor(x), training=True, rng=np.random.default_rng([cfg.seed, 3, step]))
                    report: dict = {}
                    loss = loss_fn(out, labels, lam, cfg.gamma, model.weight_tensors(), report)
                    loss.backward()
                    adam_step(model.params, state, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
                except NumericError as exc:
                    raise NumericError(f"training diverged at step {step} (epoch {epoch}): {exc}") from exc
                emit({"kind": "train", "step": step, "epoch": epoch, "lambda": lam, "loss": float(loss.data), **report})
                step += 1
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    stop = True
                    break
            last_epoch = stop or epoch == cfg.max_epochs - 1
            if (epoch + 1 - start_epoch) % cfg.val_every == 0 or last_epoch:
                metrics = validate(model, val_items)
                emit({"kind": "val", "step": step, "epoch": epoch, **metrics})
                score = selection_score(metrics)
                if score > best_dice:
                    best_dice, best_step = score, step
                    best = _copy_params(model)
                    if out_path is not None:
                        ckpt.save_model(out_path / "best.ckpt", model,
                                        {"best_dice": best_dice, "step": step, "epoch": epoch})
                if _reached(cfg, metrics):
                    stop = True
            if stop:
                break
    finally:
        if log_fh is not None:
            log_fh.close()

    meta = {"step": step, "next_epoch": epoch + 1, "adam_step": state.step,
            "best_dice": best_dice, "best_step": best_step}
    if out_path is not None:
        ckpt.save_model(out_path / "last.ckpt", model, meta, state.to_tensors())
    if best is None:
        best = _copy_params(model)
    best_params = {}
    for k, arr in best.items():
        t = Tensor(arr.copy(), requires_grad=True)
        t.name = k
        best_params[k] = t
    return TrainResult(MILDNet(model.cfg, best_params), best_dice, best_step, records, step, epoch, state)
