"""Finite-difference verification of every differentiable op and of the full model."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import ops
from .autodiff.gradcheck import Probe, grad_check, grad_check_report
from .autodiff.tensor import Tensor, precision
from .network import ArchConfig, calibrate_batchnorm, init_params, model_forward

Builder = Callable[[dict], Tensor]


def _leaf(value: np.ndarray, name: str) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def _projected(out: Tensor, weights: np.ndarray) -> Tensor:
    # random projection gives every output element a distinct, nonzero upstream gradient
    return ops.sum(ops.mul(out, weights))


def _shape(rng: np.random.Generator) -> tuple[int, int, int, int]:
    return (int(rng.integers(1, 3)), int(rng.integers(1, 5)),
            2 * int(rng.integers(1, 5)), 2 * int(rng.integers(1, 5)))


def _away_from_zero(rng, shape, low=0.1):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(low, 1.0, size=shape)


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Builder, dict]]:
    """Builders for each op on random shapes up to 2x4x8x8.

    Inputs of nonsmooth ops are kept well away from their switching points so
    plain central differences are valid.
    """
    cases: dict[str, tuple[Builder, dict]] = {}
    shape = _shape(rng)
    n, c, h, w = shape

    def unary(name, fn, value):
        weights = rng.normal(size=fn(Tensor(value)).shape)
        cases[name] = (lambda p: _projected(fn(p["x"]), weights), {"x": _leaf(value, "x")})

    def binary(name, fn, a, b):
        weights = rng.normal(size=a.shape)
        cases[name] = (lambda p: _projected(fn(p["a"], p["b"]), weights),
                       {"a": _leaf(a, "a"), "b": _leaf(b, "b")})

    binary("add", ops.add, rng.normal(size=shape), rng.normal(size=shape))
    binary("sub", ops.sub, rng.normal(size=shape), rng.normal(size=shape))
    binary("mul", ops.mul, rng.normal(size=shape), rng.normal(size=shape))
    binary("div", ops.div, rng.normal(size=shape), _away_from_zero(rng, shape, 0.5))
    unary("square", ops.square, rng.normal(size=shape))
    unary("log", ops.log, rng.uniform(0.5, 2.0, size=shape))
    unary("sum", lambda x: ops.sum(x, axis=(0, 2)), rng.normal(size=shape))
    unary("mean", lambda x: ops.mean(x, axis=1), rng.normal(size=shape))
    unary("reshape", lambda x: ops.reshape(x, (n * c, h * w)), rng.normal(size=shape))
    unary("transpose", lambda x: ops.transpose(x, (0, 2, 3, 1)), rng.normal(size=shape))
    unary("relu", ops.relu, _away_from_zero(rng, shape))
    unary("sigmoid", ops.sigmoid, 3.0 * rng.normal(size=shape))
    unary("softmax", lambda x: ops.softmax(x, axis=1), 2.0 * rng.normal(size=shape))
    unary("upsample2x", ops.upsample2x, rng.normal(size=shape))
    # distinct values with gaps far above the step keep every pooling winner fixed
    pool_in = rng.permutation(np.linspace(-1.0, 1.0, n * c * h * w)).reshape(shape)
    unary("max_pool2d", ops.max_pool2d, pool_in)

    fin, fout = int(rng.integers(2, 9)), int(rng.integers(1, 9))
    lin_w = rng.normal(size=(n, fout))
    cases["linear"] = (
        lambda p: _projected(ops.linear(p["x"], p["w"], p["b"]), lin_w),
        {"x": _leaf(rng.normal(size=(n, fin)), "x"), "w": _leaf(rng.normal(size=(fin, fout)), "w"),
         "b": _leaf(rng.normal(size=fout), "b")},
    )

    cout = int(rng.integers(1, 5))
    for label, k, padding, bias in (("conv2d_3x3_same", 3, "same", True), ("conv2d_1x1", 1, "same", False),
                                    ("conv2d_3x3_valid", 3, "valid", False)):
        cshape = (n, c, max(h, k), max(w, k))
        ho, wo = (cshape[2], cshape[3]) if padding == "same" else (cshape[2] - k + 1, cshape[3] - k + 1)
        proj = rng.normal(size=(n, cout, ho, wo))
        params = {"x": _leaf(rng.normal(size=cshape), "x"), "k": _leaf(rng.normal(size=(cout, c, k, k)), "k")}
        if bias:
            params["b"] = _leaf(rng.normal(size=cout), "b")
        cases[label] = (
            lambda p, padding=padding, proj=proj: _projected(
                ops.conv2d(p["x"], p["k"], p.get("b"), padding=padding), proj),
            params,
        )

    other = (n, int(rng.integers(1, 5)), h, w)
    cat_w = rng.normal(size=(n, c + other[1], h, w))
    cases["concat"] = (
        lambda p: _projected(ops.concat([p["a"], p["b"]], axis=1), cat_w),
        {"a": _leaf(rng.normal(size=shape), "a"), "b": _leaf(rng.normal(size=other), "b")},
    )

    cs_w = rng.normal(size=shape)
    cases["channel_scale"] = (
        lambda p: _projected(ops.channel_scale(p["x"], p["s"]), cs_w),
        {"x": _leaf(rng.normal(size=shape), "x"), "s": _leaf(rng.uniform(0.1, 0.9, size=(n, c)), "s")},
    )

    bn_shape = (max(n, 2), c, h, w)
    bn_w = rng.normal(size=bn_shape)
    for training in (True, False):
        running_mean = Tensor(rng.normal(size=c) * 0.1)
        running_var = Tensor(rng.uniform(0.5, 1.5, size=c))
        cases[f"batch_norm_{'train' if training else 'eval'}"] = (
            lambda p, training=training, rm=running_mean, rv=running_var: _projected(
                ops.batch_norm(p["x"], p["scale"], p["shift"], Tensor(rm.data.copy()),
                               Tensor(rv.data.copy()), training), bn_w),
            {"x": _leaf(rng.normal(size=bn_shape), "x"), "scale": _leaf(rng.uniform(0.5, 1.5, size=c), "scale"),
             "shift": _leaf(rng.normal(size=c), "shift")},
        )

    drop_w = rng.normal(size=shape)
    drop_seed = int(rng.integers(2**31))
    cases["dropout"] = (
        lambda p: _projected(
            ops.dropout(p["x"], 0.3, True, np.random.Generator(np.random.Philox(drop_seed))), drop_w),
        {"x": _leaf(rng.normal(size=shape), "x")},
    )

    m, feat, k = h * w, c + 1, int(rng.integers(1, 5))
    enc_w = rng.normal(size=(n, k, feat))
    cases["encoding_aggregate"] = (
        lambda p: _projected(ops.encoding_aggregate(p["x"], p["codewords"], p["smoothing"]), enc_w),
        {"x": _leaf(rng.normal(size=(n, m, feat)), "x"),
         "codewords": _leaf(rng.normal(size=(k, feat)), "codewords"),
         "smoothing": _leaf(rng.uniform(0.5, 1.5, size=k), "smoothing")},
    )
    return cases


def check_ops(seed: int = 0, h: float = 1e-5, samples: int = 16) -> dict[str, float]:
    """Worst relative gradient error of every op, in double precision."""
    rng = np.random.default_rng(seed)
    with precision("float64"):
        return {name: grad_check(builder, params, h=h, samples=samples, rng=rng)
                for name, (builder, params) in op_cases(rng).items()}


def model_check_config(**overrides) -> ArchConfig:
    base = dict(input_hw=32, stages=3, base_channels=8, codewords=8)
    base.update(overrides)
    return ArchConfig(**base)


def check_model(seed: int = 0, cfg: ArchConfig | None = None, batch: int = 2, h: float = 1e-5,
                samples: int = 4, training: bool = False) -> float:
    """Worst relative error of the full model's parameter gradients."""
    return max((p.error for p in model_probes(seed, cfg, batch, h, samples, training)), default=0.0)


def model_probes(seed: int = 0, cfg: ArchConfig | None = None, batch: int = 2, h: float = 1e-5,
                 samples: int = 4, training: bool = False) -> list[Probe]:
    """Sampled analytic/numeric gradient pairs of the full model.

    The scalar is a fixed random projection of both heads. Branch decisions of
    ReLU and max-pool are frozen during the perturbed evaluations (see
    :func:`grad_check_report`). In inference mode the BN statistics are first
    calibrated on the same batch, so activations have realistic scale.
    """
    cfg = cfg or model_check_config()
    rng = np.random.default_rng(seed)
    with precision("float64"):
        params = init_params(cfg, seed)
        hw = cfg.input_hw
        slice_ = Tensor(rng.random((batch, 1, hw, hw)))
        subvol = Tensor(rng.random((batch, cfg.depth, hw, hw)))
        pixel_w = rng.normal(size=(batch, cfg.classes, hw, hw)) / (hw * hw)
        class_w = rng.normal(size=(batch, cfg.classes))
        if not training:
            calibrate_batchnorm(slice_, subvol, params, cfg)

        def build(p):
            out = model_forward(slice_, subvol, p, cfg, training=training,
                                rng=np.random.Generator(np.random.Philox(seed)))
            return ops.add(_projected(out.pixel_probs, pixel_w), _projected(out.class_probs, class_w))

        return grad_check_report(build, params, h=h, samples=samples, rng=rng, freeze_branches=True)


@dataclass
class GradcheckSummary:
    ops: dict[str, float]
    model: float
    seconds: float
    op_tolerance: float = 1e-6
    model_tolerance: float = 1e-5
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def run_gradcheck(seed: int = 0) -> GradcheckSummary:
    start = time.perf_counter()
    op_errors = check_ops(seed)
    model_error = check_model(seed)
    summary = GradcheckSummary(op_errors, model_error, time.perf_counter() - start)
    summary.failures = [name for name, err in op_errors.items() if not err < summary.op_tolerance]
    if not model_error < summary.model_tolerance:
        summary.failures.append("model")
    return summary
