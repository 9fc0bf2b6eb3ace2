"""Central-difference verification of analytic gradients."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Mapping, Optional

import numpy as np

from .tensor import BranchTape, Tensor, backward, branch_tape, get_precision, no_grad


class NonFiniteLoss(FloatingPointError):
    pass


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


@dataclass(frozen=True)
class Probe:
    tensor: str
    index: int
    analytic: float
    numeric: float

    @property
    def error(self) -> float:
        return relative_error(self.analytic, self.numeric)


def grad_check_report(
    builder: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    samples: int = 8,
    rng: Optional[np.random.Generator] = None,
    require_double: bool = True,
    freeze_branches: bool = False,
) -> list[Probe]:
    """Compare backprop with central differences on sampled coordinates.

    ``builder(params)`` must rebuild the scalar loss from scratch on every
    call, so any randomness inside it has to be re-seeded per call. Up to
    ``samples`` coordinates are drawn from each tensor in ``params`` that
    requires grad.

    With ``freeze_branches`` the ReLU masks, pooling winners and clamp masks of
    the unperturbed evaluation are replayed for every perturbed one. The
    difference quotient then measures the slope of the smooth piece that
    backprop differentiates, instead of jumping across a kink whenever some
    unit lies within ``h`` of its switching point.
    """
    if require_double and get_precision() != "float64":
        raise RuntimeError("grad_check needs the engine in float64 precision")
    rng = rng if rng is not None else np.random.default_rng(0)
    leaves = {name: t for name, t in params.items() if t.requires_grad}
    for t in leaves.values():
        t.grad = None
    tape = BranchTape() if freeze_branches else None
    with branch_tape(tape) if tape is not None else contextlib.nullcontext():
        loss = builder(params)
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteLoss(f"loss is not finite: {loss.data}")
    backward(loss, leaves=list(leaves.values()))

    def evaluate() -> float:
        if tape is None:
            return builder(params).item()
        tape.rewind()
        with branch_tape(tape):
            return builder(params).item()

    probes: list[Probe] = []
    with no_grad():
        for name, t in leaves.items():
            count = min(samples, t.size)
            if count == 0:
                continue
            flat = t.data.reshape(-1)
            analytic = t.grad.reshape(-1)
            for idx in rng.choice(t.size, size=count, replace=False):
                original = flat[idx]
                flat[idx] = original + h
                up = evaluate()
                flat[idx] = original - h
                down = evaluate()
                flat[idx] = original
                if not (np.isfinite(up) and np.isfinite(down)):
                    raise NonFiniteLoss(f"loss not finite while perturbing {name}[{idx}]")
                probes.append(Probe(name, int(idx), float(analytic[idx]), (up - down) / (2.0 * h)))
    for t in leaves.values():
        t.grad = None
    return probes


def grad_check(
    builder: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    samples: int = 8,
    rng: Optional[np.random.Generator] = None,
    require_double: bool = True,
    freeze_branches: bool = False,
) -> float:
    """Return the worst relative error between backprop and finite differences."""
    probes = grad_check_report(builder, params, h, samples, rng, require_double, freeze_branches)
    return max((p.error for p in probes), default=0.0)
