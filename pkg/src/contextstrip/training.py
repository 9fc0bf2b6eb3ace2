"""Momentum SGD with a poly learning-rate schedule, epoch loop and checkpoints."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import __version__
from .autodiff.tensor import Tensor, backward, get_dtype, precision
from .data.volume import SamplePair, Volume, prepare_volume, sample_training_pair, stack_pairs
from .losses import LossConfig, one_hot, total_loss
from .network import ArchConfig, ModelParams, init_params, model_forward, small_arch

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "params.bin"


class TrainingDiverged(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.01
    poly_power: float = 0.9
    weight_decay: float = 1e-4
    momentum: float = 0.9
    epochs: int = 20
    batch_size: int = 4
    dropout: float = 0.1
    seed: int = 0
    slices_per_subject: int = 16  # coronal slices drawn per subject per epoch
    precision: str = "float32"
    arch: ArchConfig = field(default_factory=small_arch)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        for name in ("lr0", "poly_power", "weight_decay", "momentum", "dropout"):
            if getattr(self, name) < 0:
                raise ValueError(f"TrainConfig.{name} must be nonnegative, got {getattr(self, name)}")
        if self.momentum >= 1:
            raise ValueError(f"TrainConfig.momentum must be < 1, got {self.momentum}")
        if self.dropout >= 1:
            raise ValueError(f"TrainConfig.dropout must be < 1, got {self.dropout}")
        for name in ("epochs", "batch_size", "slices_per_subject"):
            if getattr(self, name) < 1:
                raise ValueError(f"TrainConfig.{name} must be >= 1, got {getattr(self, name)}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"TrainConfig.precision must be float32 or float64, got {self.precision!r}")
        if self.loss.classes != self.arch.classes:
            raise ValueError(f"loss classes {self.loss.classes} != arch classes {self.arch.classes}")

    @property
    def sec_weight(self) -> float:
        return self.loss.sec_weight

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: Mapping) -> "TrainConfig":
        raw = dict(raw)
        arch = ArchConfig(**raw.pop("arch", {}))
        loss = LossConfig(**raw.pop("loss", {}))
        return cls(arch=arch, loss=loss, **raw)


@dataclass
class TrainState:
    params: ModelParams
    velocity: dict[str, np.ndarray]
    step: int
    total_steps: int
    rng: np.random.Generator
    epoch: int = 0
    history: list[dict] = field(default_factory=list)


def poly_lr(t: int, total: int, lr0: float, power: float = 0.9) -> float:
    """lr0 * (1 - t/T)^power."""
    if total <= 0:
        raise ValueError(f"total step count must be positive, got {total}")
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    return lr0 * (1.0 - t / total) ** power


def sgd_step(params: ModelParams, velocity: dict[str, np.ndarray], lr: float, momentum: float = 0.9,
             weight_decay: float = 1e-4, gradients: Optional[Mapping[str, np.ndarray]] = None) -> None:
    """v <- mu v - lr (g + wd theta); theta <- theta + v, for every trainable tensor.

    Gradients come from ``gradients`` when given, otherwise from each tensor's
    ``.grad`` (missing means zero). Every gradient is validated before any
    parameter moves, so a bad gradient never leaves a half-applied update.
    Gradient buffers are cleared afterwards.
    """
    names = [n for n, t in params.items() if t.requires_grad]
    grads = {}
    for name in names:
        t = params[name]
        g = gradients.get(name) if gradients is not None else t.grad
        if g is None:
            g = np.zeros_like(t.data)
        g = np.asarray(g)
        if g.shape != t.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {t.shape}")
        if not np.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient for {name}")
        grads[name] = g.astype(t.data.dtype, copy=False)
    dtype = get_dtype()
    lr_c, mu_c, wd_c = dtype(lr), dtype(momentum), dtype(weight_decay)
    for name in names:
        t = params[name]
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(t.data)
        v *= mu_c
        v -= lr_c * (grads[name] + wd_c * t.data)
        t.data += v
        t.grad = None


def new_state(cfg: TrainConfig, steps_per_epoch: int) -> TrainState:
    with precision(cfg.precision):
        params = init_params(cfg.arch, cfg.seed)
    velocity = {n: np.zeros_like(t.data) for n, t in params.items() if t.requires_grad}
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    return TrainState(params, velocity, 0, cfg.epochs * steps_per_epoch, rng)


def steps_per_epoch(subjects: int, cfg: TrainConfig) -> int:
    return math.ceil(subjects * cfg.slices_per_subject / cfg.batch_size)


def _epoch_pairs(volumes: Sequence[Volume], cfg: TrainConfig, rng: np.random.Generator) -> list[SamplePair]:
    pairs = []
    for s in rng.permutation(len(volumes)):
        vol = volumes[s]
        count = vol.coronal_count
        picks = rng.choice(count, size=min(cfg.slices_per_subject, count), replace=False)
        if cfg.slices_per_subject > count:
            picks = np.concatenate([picks, rng.integers(0, count, cfg.slices_per_subject - count)])
        pairs.extend(sample_training_pair(vol, int(i), cfg.arch.depth, cfg.arch.classes) for i in picks)
    return [pairs[i] for i in rng.permutation(len(pairs))]


def train_step(state: TrainState, batch: Sequence[SamplePair], cfg: TrainConfig) -> dict[str, float]:
    """One forward/backward/update on a batch; returns the loss values."""
    slices, subvols, labels, presence = stack_pairs(batch)
    if labels is None:
        raise ValueError("training pairs need masks")
    out = model_forward(slices, subvols, state.params, cfg.arch, training=True, rng=state.rng, dropout=cfg.dropout)
    losses = total_loss(out.pixel_probs, out.class_probs, one_hot(labels, cfg.arch.classes), presence, cfg.loss)
    values = losses.values()
    if not all(math.isfinite(v) for v in values.values()):
        raise TrainingDiverged(f"non-finite loss {values}")
    backward(losses.total, [t for t in state.params.values() if t.requires_grad])
    lr = poly_lr(state.step, state.total_steps, cfg.lr0, cfg.poly_power)
    sgd_step(state.params, state.velocity, lr, cfg.momentum, cfg.weight_decay)
    state.step += 1
    values["lr"] = lr
    return values


def train(
    volumes: Sequence[Volume],
    cfg: TrainConfig,
    state: Optional[TrainState] = None,
    stop_epoch: Optional[int] = None,
    validation: Optional[Sequence[Volume]] = None,
    log_path: Optional[Path] = None,
    checkpoint_dir: Optional[Path] = None,
    on_epoch: Optional[Callable[[TrainState], None]] = None,
) -> TrainState:
    """Run (or resume) the seeded epoch loop over labelled volumes.

    Each epoch shuffles subjects, draws ``slices_per_subject`` coronal slices
    from each, shuffles the resulting pairs and walks them in batches.
    ``stop_epoch`` ends the run early at an epoch boundary, which together with
    ``state`` gives exact resumption. Volumes are normalized and resized here.
    """
    if not volumes:
        raise ValueError("training needs at least one volume")
    if any(v.mask is None for v in volumes):
        raise ValueError("every training volume needs a mask")
    from .evaluation import mean_dice  # local import: evaluation depends on training-free modules only

    prepared = [prepare_volume(v, cfg.arch.input_hw) for v in volumes]
    per_epoch = steps_per_epoch(len(prepared), cfg)
    with precision(cfg.precision):
        if state is None:
            state = new_state(cfg, per_epoch)
        elif state.total_steps != cfg.epochs * per_epoch:
            raise ValueError(f"resumed state plans {state.total_steps} steps, config implies {cfg.epochs * per_epoch}")
        last = cfg.epochs if stop_epoch is None else min(stop_epoch, cfg.epochs)
        while state.epoch < last:
            start = time.perf_counter()
            pairs = _epoch_pairs(prepared, cfg, state.rng)
            sums: dict[str, float] = {}
            lr = 0.0
            for b in range(0, len(pairs), cfg.batch_size):
                try:
                    values = train_step(state, pairs[b:b + cfg.batch_size], cfg)
                except TrainingDiverged as exc:
                    raise TrainingDiverged(f"epoch {state.epoch + 1}, step {state.step}: {exc}") from exc
                lr = values.pop("lr")
                for k, v in values.items():
                    sums[k] = sums.get(k, 0.0) + v
            batches = math.ceil(len(pairs) / cfg.batch_size)
            state.epoch += 1
            record = {"epoch": state.epoch, "lr": lr, **{k: v / batches for k, v in sums.items()}}
            record["val_dice"] = mean_dice(validation, state.params, cfg.arch) if validation else None
            record["wall_time"] = time.perf_counter() - start
            state.history.append(record)
            log.info("epoch %d/%d total %.4f dice %.4f (%.1fs)", state.epoch, cfg.epochs,
                     record["total"], record["dice"], record["wall_time"])
            if log_path is not None:
                with open(log_path, "a") as fh:
                    fh.write(json.dumps(record, sort_keys=True) + "\n")
            if checkpoint_dir is not None:
                save_checkpoint(state, cfg, checkpoint_dir)
            if on_epoch is not None:
                on_epoch(state)
    return state


def overfit_pair(pair: SamplePair, cfg: TrainConfig, steps: int = 200) -> list[float]:
    """Fit the model to a single pair for ``steps`` updates; returns the total loss per step."""
    with precision(cfg.precision):
        state = new_state(cfg, steps)
        state.total_steps = steps
        return [train_step(state, [pair], cfg)["total"] for _ in range(steps)]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _rng_to_json(rng: np.random.Generator) -> dict:
    def convert(value):
        if isinstance(value, dict):
            return {k: convert(v) for k, v in value.items()}
        if isinstance(value, np.ndarray):
            return [int(x) for x in value]
        return value
    return convert(rng.bit_generator.state)


def _rng_from_json(raw: dict) -> np.random.Generator:
    if raw.get("bit_generator") != "Philox":
        raise CheckpointError(f"unsupported generator {raw.get('bit_generator')!r}")
    state = dict(raw)
    state["state"] = {k: np.array(v, dtype=np.uint64) for k, v in raw["state"].items()}
    state["buffer"] = np.array(raw["buffer"], dtype=np.uint64)
    bitgen = np.random.Philox()
    bitgen.state = state
    return np.random.Generator(bitgen)


def _entries(state: TrainState):
    for name, t in state.params.items():
        yield name, "param" if t.requires_grad else "buffer", t.data
    for name, v in state.velocity.items():
        yield name, "velocity", v


def save_checkpoint(state: TrainState, cfg: TrainConfig, directory) -> Path:
    """Write ``manifest.json`` and a flat little-endian ``params.bin``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tag = cfg.precision
    dtype = np.dtype("<f4" if tag == "float32" else "<f8")
    entries, chunks, offset = [], [], 0
    for name, kind, data in _entries(state):
        chunks.append(np.ascontiguousarray(data, dtype=dtype).tobytes())
        entries.append({"name": name, "kind": kind, "shape": list(data.shape), "offset": offset, "count": data.size})
        offset += data.size
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "code_version": __version__,
        "precision": tag,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "step": state.step,
        "total_steps": state.total_steps,
        "epoch": state.epoch,
        "rng": _rng_to_json(state.rng),
        "history": [{k: v for k, v in h.items() if k != "wall_time"} for h in state.history],  # timing stays in the log
        "values": offset,
        "entries": entries,
    }
    (directory / BLOB_NAME).write_bytes(b"".join(chunks))
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory) -> tuple[TrainState, TrainConfig]:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST_NAME).read_text())
    except FileNotFoundError:
        raise CheckpointError(f"{directory}: no {MANIFEST_NAME}") from None
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{directory}: unsupported checkpoint format {manifest.get('format')!r}")
    tag = manifest.get("precision")
    if tag not in ("float32", "float64"):
        raise CheckpointError(f"{directory}: unknown precision tag {tag!r}")
    dtype = np.dtype("<f4" if tag == "float32" else "<f8")
    blob = (directory / BLOB_NAME).read_bytes()
    expected = manifest["values"] * dtype.itemsize
    if len(blob) != expected:
        raise CheckpointError(f"{directory}: blob holds {len(blob)} bytes, manifest describes {expected}")
    values = np.frombuffer(blob, dtype=dtype)
    cfg = TrainConfig.from_dict(manifest["config"])
    params: ModelParams = {}
    velocity: dict[str, np.ndarray] = {}
    with precision(tag):
        for entry in manifest["entries"]:
            chunk = values[entry["offset"]:entry["offset"] + entry["count"]].reshape(entry["shape"])
            data = chunk.astype(dtype.newbyteorder("="))
            if entry["kind"] == "velocity":
                velocity[entry["name"]] = data
            else:
                params[entry["name"]] = Tensor(data, requires_grad=entry["kind"] == "param", name=entry["name"])
    state = TrainState(params, velocity, manifest["step"], manifest["total_steps"],
                       _rng_from_json(manifest["rng"]), manifest["epoch"], manifest["history"])
    return state, cfg


def load_model(directory) -> tuple[ModelParams, ArchConfig, str]:
    """Parameters, architecture and precision tag stored in a checkpoint."""
    state, cfg = load_checkpoint(directory)
    return state.params, cfg.arch, cfg.precision
