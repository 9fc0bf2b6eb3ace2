"""Context-encoding segmentation network.

Layout (all convolutions stride 1, downsampling only by 2x2 max-pool):

* 2D encoder: ``stages`` x (dense block -> 1x1 transition -> max-pool) on the
  single coronal slice; the pre-pool transition output of each stage is kept
  as a skip connection.
* spatial encoder: the same stack applied to a D-slice sub-volume whose depth
  is read as D input channels. It exports no skips.
* fusion: channel concat of both bottlenecks -> 1x1 conv -> BN -> ReLU.
* context encoding: codeword encoding layer gives a global descriptor ``e``;
  ``gamma = sigmoid(e W + b)`` rescales the fused map channel by channel, and
  a separate sigmoid head on ``e`` predicts per-slice class presence.
* decoder: ``stages`` x (2x nearest upsample -> concat 2D skip -> dense block
  -> 1x1 transition) followed by a 1x1 classifier and a softmax.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import ops
from .autodiff.tensor import ShapeError, Tensor, get_dtype, no_grad

ModelParams = dict  # ordered name -> Tensor; BN running statistics are stored alongside with requires_grad=False


@dataclass(frozen=True)
class ArchConfig:
    stages: int = 4
    base_channels: int = 16
    growth: Optional[int] = None
    block_layers: int = 2
    codewords: int = 16
    depth: int = 10
    classes: int = 2
    input_hw: int = 256

    def __post_init__(self):
        if self.growth is None:
            object.__setattr__(self, "growth", max(1, self.base_channels // 2))
        for name in ("stages", "base_channels", "growth", "block_layers", "codewords", "depth", "input_hw"):
            if getattr(self, name) <= 0:
                raise ValueError(f"ArchConfig.{name} must be positive, got {getattr(self, name)}")
        if self.classes < 2:
            raise ValueError(f"ArchConfig.classes must be >= 2, got {self.classes}")
        if self.input_hw % (2 ** self.stages):
            raise ValueError(
                f"ArchConfig.input_hw={self.input_hw} is not divisible by 2**stages={2 ** self.stages}"
            )

    @property
    def widths(self) -> list[int]:
        return [self.base_channels * 2 ** s for s in range(self.stages)]

    @property
    def fused_channels(self) -> int:
        return self.widths[-1]

    @property
    def bottleneck_hw(self) -> int:
        return self.input_hw // 2 ** self.stages

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def small_arch(**overrides) -> ArchConfig:
    """Desk-scale architecture used for phantom experiments (64x64 slices)."""
    base = dict(stages=3, base_channels=8, codewords=8, input_hw=64)
    base.update(overrides)
    return ArchConfig(**base)


@dataclass
class ForwardOutput:
    pixel_probs: Tensor  # N,C,H,W
    class_probs: Tensor  # N,C
    gamma: Tensor  # N,Cf
    logits: Tensor
    encoding: Tensor  # N,Cf


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

class _Init:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: ModelParams = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name}")
        self.params[name] = Tensor(value, requires_grad=trainable, name=name)

    def conv(self, name: str, cin: int, cout: int, k: int, bias: bool = False) -> None:
        bound = np.sqrt(6.0 / (cin * k * k))
        self.add(f"{name}.weight", self.rng.uniform(-bound, bound, size=(cout, cin, k, k)))
        if bias:
            self.add(f"{name}.bias", np.zeros(cout))

    def linear(self, name: str, fin: int, fout: int) -> None:
        bound = np.sqrt(6.0 / fin)
        self.add(f"{name}.weight", self.rng.uniform(-bound, bound, size=(fin, fout)))
        self.add(f"{name}.bias", np.zeros(fout))

    def bn(self, name: str, c: int) -> None:
        self.add(f"{name}.scale", np.ones(c))
        self.add(f"{name}.shift", np.zeros(c))
        self.add(f"{name}.running_mean", np.zeros(c), trainable=False)
        self.add(f"{name}.running_var", np.ones(c), trainable=False)

    def dense_block(self, name: str, cin: int, cfg: ArchConfig) -> int:
        c = cin
        for j in range(cfg.block_layers):
            self.bn(f"{name}.l{j}.bn", c)
            self.conv(f"{name}.l{j}.conv", c, cfg.growth, 3)
            c += cfg.growth
        return c

    def transition(self, name: str, cin: int, cout: int) -> None:
        self.conv(f"{name}.conv", cin, cout, 1)
        self.bn(f"{name}.bn", cout)

    def encoder(self, name: str, cin: int, cfg: ArchConfig) -> None:
        c = cin
        for s, width in enumerate(cfg.widths):
            dense_out = self.dense_block(f"{name}.s{s}.dense", c, cfg)
            self.transition(f"{name}.s{s}.trans", dense_out, width)
            c = width


def init_params(cfg: ArchConfig, seed: int = 0) -> ModelParams:
    """Fresh parameters: fan-in scaled uniform convs/linears, unit BN, normal codewords."""
    init = _Init(np.random.Generator(np.random.Philox(seed)))
    cf = cfg.fused_channels
    init.encoder("enc2d", 1, cfg)
    init.encoder("enc3d", cfg.depth, cfg)
    init.transition("fuse", 2 * cf, cf)
    init.add("encoding.codewords", init.rng.standard_normal((cfg.codewords, cf)))
    init.add("encoding.smoothing", np.ones(cfg.codewords))
    init.bn("encoding.bn", cfg.codewords)
    init.linear("scale_fc", cf, cf)
    init.linear("sec_fc", cf, cfg.classes)
    c = cf
    for j in range(cfg.stages):
        level = cfg.stages - 1 - j
        width = cfg.widths[level]
        dense_out = init.dense_block(f"dec.s{j}.dense", c + width, cfg)
        init.transition(f"dec.s{j}.trans", dense_out, width)
        c = width
    init.conv("classifier", cfg.widths[0], cfg.classes, 1, bias=True)
    return init.params


def check_params(params: ModelParams, cfg: ArchConfig) -> None:
    """Raise ValueError unless ``params`` has exactly the names and shapes ``cfg`` builds."""
    expected = {name: t.shape for name, t in init_params(cfg).items()}
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise ValueError(f"parameter names do not fit the architecture: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ValueError(f"parameter {name} has shape {params[name].shape}, architecture needs {shape}")


def trainable(params: ModelParams) -> list[Tensor]:
    return [t for t in params.values() if t.requires_grad]


def count_parameters(params: ModelParams) -> int:
    return sum(t.size for t in trainable(params))


def shape_audit(cfg: ArchConfig) -> dict:
    """Channel/extent table of every stage plus the trainable parameter count.

    Derived by arithmetic from the config alone, independently of
    :func:`init_params`.
    """
    g, L, hw = cfg.growth, cfg.block_layers, cfg.input_hw
    total = 0

    def conv_count(cin, cout, k, bias=False):
        return cout * cin * k * k + (cout if bias else 0)

    def dense_count(cin):
        n, c = 0, cin
        for _ in range(L):
            n += 2 * c + conv_count(c, g, 3)
            c += g
        return n, c

    rows = []
    for path, cin in (("enc2d", 1), ("enc3d", cfg.depth)):
        c = cin
        for s, width in enumerate(cfg.widths):
            n, dense_out = dense_count(c)
            n += conv_count(dense_out, width, 1) + 2 * width
            total += n
            rows.append(dict(path=path, stage=s, extent=hw >> s, in_channels=c,
                             dense_channels=dense_out, out_channels=width, skip=path == "enc2d"))
            c = width
    cf = cfg.fused_channels
    total += conv_count(2 * cf, cf, 1) + 2 * cf
    rows.append(dict(path="fuse", stage=None, extent=cfg.bottleneck_hw, in_channels=2 * cf,
                     dense_channels=None, out_channels=cf, skip=False))
    total += cfg.codewords * cf + cfg.codewords + 2 * cfg.codewords
    total += cf * cf + cf + cf * cfg.classes + cfg.classes
    c = cf
    for j in range(cfg.stages):
        level = cfg.stages - 1 - j
        width = cfg.widths[level]
        n, dense_out = dense_count(c + width)
        n += conv_count(dense_out, width, 1) + 2 * width
        total += n
        rows.append(dict(path="dec", stage=j, extent=hw >> level, in_channels=c + width,
                         dense_channels=dense_out, out_channels=width, skip=False))
        c = width
    total += conv_count(cfg.widths[0], cfg.classes, 1, bias=True)
    return dict(rows=rows, parameters=total)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

@dataclass
class _Ctx:
    params: ModelParams
    cfg: ArchConfig
    training: bool = False
    rng: Optional[np.random.Generator] = None
    dropout: float = 0.0
    bn_momentum: float = 0.9

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.params[name]
        except KeyError:
            raise KeyError(f"missing parameter {name}") from None

    def bn(self, x: Tensor, name: str) -> Tensor:
        return ops.batch_norm(
            x, self[f"{name}.scale"], self[f"{name}.shift"],
            self[f"{name}.running_mean"], self[f"{name}.running_var"], self.training,
            momentum=self.bn_momentum,
        )

    def conv(self, x: Tensor, name: str) -> Tensor:
        return ops.conv2d(x, self[f"{name}.weight"], self.params.get(f"{name}.bias"), padding="same")


def _ctx(params, cfg, training=False, rng=None, dropout=0.0) -> _Ctx:
    return _Ctx(params, cfg, training, rng, dropout)


def dense_block_forward(x: Tensor, ctx: _Ctx, name: str) -> Tensor:
    """BN -> ReLU -> 3x3 conv per layer; each layer sees all earlier feature maps."""
    features = [x]
    for j in range(ctx.cfg.block_layers):
        inp = features[0] if len(features) == 1 else ops.concat(features, axis=1)
        h = ctx.conv(ops.relu(ctx.bn(inp, f"{name}.l{j}.bn")), f"{name}.l{j}.conv")
        h = ops.dropout(h, ctx.dropout, ctx.training, ctx.rng)
        features.append(h)
    return ops.concat(features, axis=1)


def _transition(x: Tensor, ctx: _Ctx, name: str) -> Tensor:
    return ops.relu(ctx.bn(ctx.conv(x, f"{name}.conv"), f"{name}.bn"))


def _encode(x: Tensor, ctx: _Ctx, name: str) -> tuple[Tensor, list[Tensor]]:
    hw = ctx.cfg.input_hw
    if x.ndim != 4 or x.shape[2:] != (hw, hw):
        raise ShapeError(f"{name}: expected N,C,{hw},{hw} input, got {x.shape}")
    skips = []
    for s in range(ctx.cfg.stages):
        x = _transition(dense_block_forward(x, ctx, f"{name}.s{s}.dense"), ctx, f"{name}.s{s}.trans")
        skips.append(x)
        x = ops.max_pool2d(x)
    return x, skips


def encoder2d_forward(slice_: Tensor, ctx: _Ctx) -> tuple[Tensor, list[Tensor]]:
    if slice_.ndim != 4 or slice_.shape[1] != 1:
        raise ShapeError(f"encoder2d: slice must be N,1,H,W, got {slice_.shape}")
    return _encode(slice_, ctx, "enc2d")


def spatial_encoder_forward(subvol: Tensor, ctx: _Ctx) -> Tensor:
    if subvol.ndim != 4 or subvol.shape[1] != ctx.cfg.depth:
        raise ShapeError(f"spatial encoder: depth axis must be {ctx.cfg.depth}, got shape {subvol.shape}")
    out, _ = _encode(subvol, ctx, "enc3d")
    return out


def fuse_features(f2d: Tensor, f3d: Tensor, ctx: _Ctx) -> Tensor:
    if f2d.shape[2:] != f3d.shape[2:]:
        raise ShapeError(f"fuse: spatial extents differ, {f2d.shape[2:]} vs {f3d.shape[2:]}")
    return _transition(ops.concat([f2d, f3d], axis=1), ctx, "fuse")


def encoding_layer_forward(x: Tensor, ctx: _Ctx) -> Tensor:
    """Global descriptor e[N,Cf] = sum_k ReLU(BN_k(e_k)) of the aggregated residuals."""
    n, cf, h, w = x.shape
    desc = ops.reshape(ops.transpose(x, (0, 2, 3, 1)), (n, h * w, cf))
    agg = ops.encoding_aggregate(desc, ctx["encoding.codewords"], ctx["encoding.smoothing"])  # n,K,cf
    k = agg.shape[1]
    normed = ops.relu(ctx.bn(ops.reshape(agg, (n, k, cf, 1)), "encoding.bn"))
    return ops.sum(ops.reshape(normed, (n, k, cf)), axis=1)


def context_scaling(x: Tensor, e: Tensor, weights: Tensor, bias: Tensor) -> tuple[Tensor, Tensor]:
    """gamma = sigmoid(e W + b); y = x scaled channel-wise by gamma."""
    if weights.shape[1] != x.shape[1]:
        raise ShapeError(f"context scaling: W produces {weights.shape[1]} channels, features have {x.shape[1]}")
    gamma = ops.sigmoid(ops.linear(e, weights, bias))
    return ops.channel_scale(x, gamma), gamma


def sec_head(e: Tensor, ctx: _Ctx) -> Tensor:
    return ops.sigmoid(ops.linear(e, ctx["sec_fc.weight"], ctx["sec_fc.bias"]))


def decoder_forward(y: Tensor, skips: list[Tensor], ctx: _Ctx) -> Tensor:
    if len(skips) != ctx.cfg.stages:
        raise ShapeError(f"decoder: expected {ctx.cfg.stages} skips, got {len(skips)}")
    for j in range(ctx.cfg.stages):
        skip = skips[ctx.cfg.stages - 1 - j]
        up = ops.upsample2x(y)
        y = dense_block_forward(ops.concat([up, skip], axis=1), ctx, f"dec.s{j}.dense")
        y = _transition(y, ctx, f"dec.s{j}.trans")
    return ctx.conv(y, "classifier")


def model_forward(
    slice_: Tensor,
    subvol: Tensor,
    params: ModelParams,
    cfg: ArchConfig,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    dropout: float = 0.1,
) -> ForwardOutput:
    """Full forward pass. Dropout is only active when ``training`` is set."""
    return _run(_ctx(params, cfg, training, rng, dropout if training else 0.0), slice_, subvol)


def _run(ctx: _Ctx, slice_, subvol) -> ForwardOutput:
    slice_, subvol = _as_input(slice_), _as_input(subvol)
    stage = "encoder2d"
    try:
        f2d, skips = encoder2d_forward(slice_, ctx)
        stage = "spatial encoder"
        f3d = spatial_encoder_forward(subvol, ctx)
        stage = "fusion"
        fused = fuse_features(f2d, f3d, ctx)
        stage = "encoding layer"
        e = encoding_layer_forward(fused, ctx)
        stage = "context scaling"
        y, gamma = context_scaling(fused, e, ctx["scale_fc.weight"], ctx["scale_fc.bias"])
        stage = "sec head"
        class_probs = sec_head(e, ctx)
        stage = "decoder"
        logits = decoder_forward(y, skips, ctx)
    except (ShapeError, KeyError) as exc:
        raise type(exc)(f"model_forward failed in {stage}: {exc}") from exc
    return ForwardOutput(ops.softmax(logits, axis=1), class_probs, gamma, logits, e)


def calibrate_batchnorm(slice_, subvol, params: ModelParams, cfg: ArchConfig) -> None:
    """Set every BN running statistic to the batch statistics of one pass over
    the given inputs, so inference mode reproduces the training-mode forward on
    that batch up to the unbiased variance factor."""
    with no_grad():
        _run(_Ctx(params, cfg, training=True, bn_momentum=0.0), slice_, subvol)


def _as_input(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=get_dtype()))
