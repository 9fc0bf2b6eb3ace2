"""Volume-level overlap metrics, slice-wise prediction, and cross-validation /
transfer reports."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .autodiff.tensor import no_grad, precision
from .data.folds import FoldPlan, kfold_split
from .data.volume import CORONAL_AXIS, Volume, prepare_volume, sample_training_pair, stack_pairs
from .network import ArchConfig, ModelParams, check_params, model_forward

METRICS = ("dice", "sensitivity", "specificity")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(pred_mask: np.ndarray, true_mask: np.ndarray) -> ConfusionCounts:
    """Voxel counts with brain (label 1) as the positive class."""
    pred, truth = np.asarray(pred_mask), np.asarray(true_mask)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction extents {pred.shape} != truth extents {truth.shape}")
    for name, m in (("prediction", pred), ("truth", truth)):
        if not np.isin(m, (0, 1)).all():
            raise ValueError(f"{name} mask must be binary")
    pred, truth = pred.astype(bool), truth.astype(bool)
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    return ConfusionCounts(tp, fp, pred.size - tp - fp - fn, fn)


# Each metric returns None when its denominator is empty. Python int / int
# division is correctly rounded, so results equal the exact ratio rounded once.

def dice_score(c: ConfusionCounts) -> Optional[float]:
    denom = 2 * c.tp + c.fp + c.fn
    return 2 * c.tp / denom if denom else None


def sensitivity(c: ConfusionCounts) -> Optional[float]:
    denom = c.tp + c.fn
    return c.tp / denom if denom else None


def specificity(c: ConfusionCounts) -> Optional[float]:
    denom = c.tn + c.fp
    return c.tn / denom if denom else None


def score(pred_mask: np.ndarray, true_mask: np.ndarray) -> dict[str, Optional[float]]:
    c = confusion(pred_mask, true_mask)
    return {"dice": dice_score(c), "sensitivity": sensitivity(c), "specificity": specificity(c)}


def largest_component(mask: np.ndarray) -> np.ndarray:
    labels, count = ndimage.label(mask)
    if count <= 1:
        return mask.astype(np.uint8)
    sizes = np.bincount(labels.ravel())[1:]
    return (labels == 1 + int(np.argmax(sizes))).astype(np.uint8)


def predict_volume(params: ModelParams, cfg: ArchConfig, volume: Volume, batch_size: int = 8,
                   keep_largest_component: bool = False, precision_tag: str = "float32") -> Volume:
    """Segment every coronal slice in inference mode and restack the argmax labels.

    The volume is normalized and resized in-plane to ``cfg.input_hw`` first;
    class probabilities are resampled back so the mask has the input extents.
    """
    check_params(params, cfg)
    prepared = prepare_volume(volume, cfg.input_hw)
    count = prepared.coronal_count
    unlabeled = Volume(prepared.intensities, prepared.spacing, None, volume.subject_id)
    probs = []
    with precision(precision_tag), no_grad():
        for start in range(0, count, batch_size):
            pairs = [sample_training_pair(unlabeled, i, cfg.depth, cfg.classes)
                     for i in range(start, min(start + batch_size, count))]
            slices, subvols, _, _ = stack_pairs(pairs)
            out = model_forward(slices, subvols, params, cfg, training=False)
            probs.append(out.pixel_probs.data)
    stacked = np.concatenate(probs)  # Y,C,H,W with H = X, W = Z
    x, _, z = volume.extents
    if (x, z) != (cfg.input_hw, cfg.input_hw):
        stacked = ndimage.zoom(stacked, (1, 1, x / cfg.input_hw, z / cfg.input_hw), order=1,
                               mode="nearest", grid_mode=True)
    labels = stacked.argmax(axis=1).astype(np.uint8)  # Y,X,Z
    mask = np.moveaxis(labels, 0, CORONAL_AXIS)
    mask = (mask > 0).astype(np.uint8)
    if keep_largest_component:
        mask = largest_component(mask)
    return Volume(volume.intensities, volume.spacing, mask, volume.subject_id)


def mean_dice(volumes: Sequence[Volume], params: ModelParams, cfg: ArchConfig) -> Optional[float]:
    scores = [score(predict_volume(params, cfg, v).mask, v.mask)["dice"] for v in volumes]
    scores = [s for s in scores if s is not None]
    return sum(scores) / len(scores) if scores else None


def _mean(rows: Sequence[dict]) -> dict:
    out = {}
    for m in METRICS:
        vals = [r[m] for r in rows if r[m] is not None]
        out[m] = sum(vals) / len(vals) if vals else None
        out[f"{m}_excluded"] = len(rows) - len(vals)
    return out


@dataclass
class MetricsReport:
    protocol: str  # "crossval <k>" or "transfer <source>-><target>"
    method: str = "model"
    per_subject: dict[str, dict] = field(default_factory=dict)
    folds: dict[str, int] = field(default_factory=dict)  # subject -> fold, crossval only
    seed: Optional[int] = None  # training seed of the scored model(s)

    @property
    def fold_means(self) -> list[dict]:
        if not self.folds:
            return []
        k = max(self.folds.values()) + 1
        return [_mean([self.per_subject[s] for s, f in sorted(self.folds.items()) if f == i]) for i in range(k)]

    @property
    def mean(self) -> dict:
        return _mean([self.per_subject[s] for s in sorted(self.per_subject)])

    def to_dict(self) -> dict:
        return {"protocol": self.protocol, "method": self.method, "seed": self.seed, "per_subject": dict(sorted(self.per_subject.items())),
                "folds": dict(sorted(self.folds.items())), "fold_means": self.fold_means, "mean": self.mean}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "MetricsReport":
        return cls(raw["protocol"], raw.get("method", "model"), dict(raw["per_subject"]),
                   {k: int(v) for k, v in raw.get("folds", {}).items()}, raw.get("seed"))

    def table(self, per_fold: bool = False) -> str:
        rows = []
        if per_fold:
            rows += [(f"{self.method} (fold {i})", m) for i, m in enumerate(self.fold_means)]
        rows.append((f"{self.method} [{self.protocol}]", self.mean))
        return format_table(rows)


def _pct(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{100.0 * value:.2f}"


def format_table(rows: Sequence[tuple[str, dict]]) -> str:
    """Aligned ``Method | Dice | Sensitivity | Specificity`` table in percent."""
    header = ["Method", "Dice", "Sensitivity", "Specificity"]
    body = [[name] + [_pct(m[k]) for k in METRICS] for name, m in rows]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(4)]

    def line(cells):
        return " | ".join(c.ljust(widths[0]) if i == 0 else c.rjust(widths[i]) for i, c in enumerate(cells))

    lines = [line(header), "-+-".join("-" * w for w in widths)] + [line(r) for r in body]
    excluded = {k: sum(m.get(f"{k}_excluded", 0) for _, m in rows) for k in METRICS}
    if any(excluded.values()):
        lines.append("undefined (excluded): " + ", ".join(f"{k} {v}" for k, v in excluded.items() if v))
    return "\n".join(lines)


def score_volumes(params: ModelParams, cfg: ArchConfig, volumes: Sequence[Volume], precision_tag: str = "float32",
                  keep_largest_component: bool = False) -> dict[str, dict]:
    out = {}
    for v in volumes:
        if v.mask is None:
            raise ValueError(f"{v.subject_id}: evaluation needs a reference mask")
        pred = predict_volume(params, cfg, v, precision_tag=precision_tag, keep_largest_component=keep_largest_component)
        out[v.subject_id] = score(pred.mask, v.mask)
    return out


@dataclass
class CrossvalResult:
    report: MetricsReport
    plan: FoldPlan
    states: list  # TrainState per fold


def evaluate_crossval(volumes: Sequence[Volume], k: int, cfg, seed: int = 0, method: str = "model",
                      on_fold: Optional[Callable[[int, object], None]] = None,
                      keep_largest_component: bool = False) -> CrossvalResult:
    """Train on the complement of each fold and score its held-out subjects."""
    from .training import train

    by_id = {v.subject_id: v for v in volumes}
    plan = kfold_split(list(by_id), k, seed)
    report = MetricsReport(f"crossval {k}", method, seed=cfg.seed)
    states = []
    for fold in range(k):
        test_ids = plan.test_ids(fold)
        if not test_ids:
            raise ValueError(f"fold {fold} has no test subjects")
        state = train([by_id[s] for s in plan.train_ids(fold)], cfg)
        states.append(state)
        scores = score_volumes(state.params, cfg.arch, [by_id[s] for s in test_ids], cfg.precision,
                               keep_largest_component)
        for s, m in scores.items():
            report.per_subject[s] = m
            report.folds[s] = fold
        if on_fold is not None:
            on_fold(fold, state)
    return CrossvalResult(report, plan, states)


def evaluate_transfer(params: ModelParams, cfg: ArchConfig, target: Sequence[Volume], source_name: str,
                      target_name: str, method: str = "model", precision_tag: str = "float32",
                      keep_largest_component: bool = False, seed: Optional[int] = None) -> MetricsReport:
    """Score a trained model on another dataset without retraining."""
    report = MetricsReport(f"transfer {source_name}->{target_name}", method, seed=seed)
    report.per_subject = score_volumes(params, cfg, target, precision_tag, keep_largest_component)
    return report
