"""Closed-form identities of the losses and metrics, runnable without data."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff.tensor import Tensor, precision
from .evaluation import confusion, dice_score, sensitivity, specificity
from .losses import LossConfig, combine, cross_entropy_loss, dice_loss, dice_terms, one_hot, sec_loss, total_loss


@dataclass(frozen=True)
class Check:
    name: str
    value: float
    expected: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return abs(self.value - self.expected) <= self.tolerance


def _brute_force(pred: np.ndarray, truth: np.ndarray) -> tuple[int, int, int, int]:
    tp = fp = tn = fn = 0
    for p, t in zip(pred.ravel().tolist(), truth.ravel().tolist()):
        if p and t:
            tp += 1
        elif p:
            fp += 1
        elif t:
            fn += 1
        else:
            tn += 1
    return tp, fp, tn, fn


def run_selftest(seed: int = 0, metric_pairs: int = 200) -> list[Check]:
    checks: list[Check] = []
    rng = np.random.default_rng(seed)
    with precision("float64"):
        labels = (rng.random((2, 8, 8)) > 0.5).astype(int)
        labels[0, 0, 0], labels[0, 0, 1] = 0, 1  # both classes present
        target = one_hot(labels, 2)
        perfect = Tensor(target)
        presence = np.array([[1.0, 1.0], [1.0, float(labels[1].any())]])
        losses = total_loss(perfect, Tensor(presence), target, presence, LossConfig())
        checks += [
            Check("perfect prediction: cross-entropy", losses.ce.item(), 0.0, 1e-10),
            Check("perfect prediction: dice", losses.dice.item(), -1.0, 1e-6),
            Check("perfect prediction: sec", losses.sec.item(), 0.0, 1e-10),
            Check("perfect prediction: total", losses.total.item(), -1.0, 1e-6),
        ]
        uniform = Tensor(np.full(target.shape, 0.5))
        checks.append(Check("uniform binary prediction: cross-entropy", cross_entropy_loss(uniform, target).item(),
                            math.log(2.0), 1e-6))
        doubled = cross_entropy_loss(uniform, target, np.full((2, 8, 8), 2.0)).item()
        checks.append(Check("doubled pixel weights double cross-entropy", doubled, 2.0 * math.log(2.0), 1e-12))
        checks.append(Check("sec at p=0.5, y=(1,1)", sec_loss(Tensor([[0.5, 0.5]]), [[1.0, 1.0]]).item(),
                            math.log(2.0), 1e-12))

        # one row of four pixels: 3 predicted foreground, 2 true, 2 shared
        pred = np.zeros((1, 2, 1, 4))
        pred[0, 1, 0, :3] = 1.0
        pred[0, 0] = 1.0 - pred[0, 1]
        truth = one_hot(np.array([[[1, 1, 0, 0]]]), 2)
        checks.append(Check("dice term, 3 predicted / 2 true / 2 overlap",
                            dice_terms(Tensor(pred), truth).data[1], -0.8, 1e-6))
        disjoint = one_hot(np.array([[[0, 0, 1, 1]]]), 2)
        checks.append(Check("dice term, disjoint supports", dice_terms(Tensor(truth), disjoint).data[1], 0.0, 1e-6))
        total = combine(Tensor(0.5), Tensor(-0.8), Tensor(0.7), 0.1).item()
        checks.append(Check("total = ce + dice + 0.1 sec", total, -0.23, 1e-12))
        hard = Tensor(one_hot((rng.random((1, 6, 6)) > 0.4).astype(int), 2))
        hard_truth = one_hot((rng.random((1, 6, 6)) > 0.6).astype(int), 2)
        hard_dice = dice_score(confusion(hard.data[0, 1], hard_truth[0, 1]))
        checks.append(Check("hard dice term equals dice score", -dice_terms(hard, hard_truth).data[1],
                            hard_dice, 1e-5))
        soft = dice_loss(Tensor(rng.dirichlet([1.0, 1.0], size=(1, 6, 6)).transpose(0, 3, 1, 2)), hard_truth).item()
        checks.append(Check("soft dice loss lies in (-1, 0]", float(-1.0 < soft <= 0.0), 1.0, 0.0))

    fixture = confusion(np.array([1, 1, 0, 0]).reshape(2, 2, 1), np.array([1, 0, 1, 0]).reshape(2, 2, 1))
    checks.append(Check("2x2x1 fixture confusion", float((fixture.tp, fixture.fp, fixture.fn, fixture.tn) == (1, 1, 1, 1)),
                        1.0, 0.0))
    mismatches = 0
    for _ in range(metric_pairs):
        shape = tuple(int(s) for s in rng.integers(1, 17, size=3))
        pred = (rng.random(shape) < rng.random()).astype(np.uint8)
        truth = (rng.random(shape) < rng.random()).astype(np.uint8)
        tp, fp, tn, fn = _brute_force(pred, truth)
        c = confusion(pred, truth)
        expected = (2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else None,
                    tp / (tp + fn) if tp + fn else None,
                    tn / (tn + fp) if tn + fp else None)
        if (c.tp, c.fp, c.tn, c.fn) != (tp, fp, tn, fn) or (dice_score(c), sensitivity(c), specificity(c)) != expected:
            mismatches += 1
    checks.append(Check(f"metrics equal voxel recounts on {metric_pairs} random pairs", float(mismatches), 0.0, 0.0))
    return checks
