"""Command-line interface.

Configuration is layered: built-in defaults, then an optional TOML file
(``--config``), then command-line flags. Every command that writes output
echoes the effective configuration to ``<out>/config.toml``.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import difflib
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import tomli_w

from .losses import LossConfig
from .network import ArchConfig, small_arch
from .training import TrainConfig

log = logging.getLogger("contextstrip")

COMMANDS = ("phantom", "train", "predict", "evaluate", "crossval", "transfer", "gradcheck", "selftest")
OPTIONAL = object()  # marks keys whose default is "unset"


class ConfigError(ValueError):
    pass


def _schema() -> dict[str, dict[str, tuple[type, Any]]]:
    arch = small_arch()
    train = TrainConfig()
    loss = LossConfig()
    return {
        "arch": {f.name: (int, getattr(arch, f.name)) for f in dataclasses.fields(ArchConfig)},
        "train": {f.name: (type(getattr(train, f.name)), getattr(train, f.name))
                  for f in dataclasses.fields(TrainConfig) if f.name not in ("arch", "loss")},
        "loss": {f.name: (type(getattr(loss, f.name)), getattr(loss, f.name))
                 for f in dataclasses.fields(LossConfig) if f.name != "classes"},
        "run": {
            "data": (str, OPTIONAL),  # dataset root
            "out": (str, OPTIONAL),  # output directory, defaults to runs/<command>
            "checkpoint": (str, OPTIONAL),
            "resume": (str, OPTIONAL),
            "inputs": (list, []),  # NIfTI files for predict
            "k": (int, 2),
            "count": (int, 8),
            "extent": (int, 64),
            "family": (str, "A"),
            "source_name": (str, "source"),
            "target_name": (str, "target"),
            "stop_epoch": (int, OPTIONAL),
            "largest_component": (bool, False),
            "compress": (bool, False),
        },
    }


SCHEMA = _schema()
SCHEMA["arch"]["growth"] = (int, OPTIONAL)  # derived from base_channels unless given


def _all_keys() -> list[str]:
    return [f"{section}.{key}" for section, keys in SCHEMA.items() for key in keys]


def _unknown(key: str) -> ConfigError:
    bare = key.split(".")[-1]
    candidates = _all_keys()
    close = difflib.get_close_matches(key, candidates, n=1, cutoff=0.6)
    if not close:
        close = [c for c in candidates if c.split(".")[-1] in difflib.get_close_matches(
            bare, [k.split(".")[-1] for k in candidates], n=1, cutoff=0.6)]
    hint = f"; did you mean '{close[0]}'?" if close else ""
    return ConfigError(f"unknown config key '{key}'{hint}")


def _coerce(key: str, value: Any, kind: type) -> Any:
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"config key '{key}' expects true/false, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key '{key}' expects an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key '{key}' expects a number, got {value!r}")
        return float(value)
    if kind is list:
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ConfigError(f"config key '{key}' expects a list of strings, got {value!r}")
        return list(value)
    if not isinstance(value, str):
        raise ConfigError(f"config key '{key}' expects a string, got {value!r}")
    return value


def _parse_literal(text: str) -> Any:
    """Read a flag value as a TOML literal, falling back to a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


@dataclass
class RunConfig:
    values: dict[str, dict[str, Any]]  # section -> key -> value; unset optional keys are absent

    @property
    def arch(self) -> ArchConfig:
        return ArchConfig(**self.values["arch"])

    @property
    def loss(self) -> LossConfig:
        return LossConfig(classes=self.arch.classes, **self.values["loss"])

    @property
    def train(self) -> TrainConfig:
        return TrainConfig(arch=self.arch, loss=self.loss, **self.values["train"])

    def run(self, key: str, default: Any = None) -> Any:
        return self.values["run"].get(key, default)

    def require(self, key: str) -> Any:
        value = self.run(key)
        if value in (None, []):
            raise ConfigError(f"missing required setting 'run.{key}'")
        return value

    def to_toml(self) -> str:
        return tomli_w.dumps({s: dict(sorted(v.items())) for s, v in self.values.items()})


def parse_config(path: Optional[os.PathLike] = None, overrides: Optional[dict[str, Any]] = None) -> RunConfig:
    """Merge defaults < TOML file < ``overrides`` (dotted keys) and validate."""
    values = {s: {k: d for k, (_, d) in keys.items() if d is not OPTIONAL} for s, keys in SCHEMA.items()}

    def assign(key: str, value: Any) -> None:
        section, _, name = key.partition(".")
        if section not in SCHEMA or name not in SCHEMA[section]:
            raise _unknown(key)
        values[section][name] = _coerce(key, value, SCHEMA[section][name][0])

    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            raw = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for section, table in raw.items():
            if not isinstance(table, dict):
                raise _unknown(section)
            for name, value in table.items():
                assign(f"{section}.{name}", value)
    for key, value in (overrides or {}).items():
        assign(key, value)
    config = RunConfig(values)
    try:
        config.train  # validates every dataclass invariant
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return config


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _out_dir(config: RunConfig, command: str, force: bool) -> Path:
    out = Path(config.run("out") or f"runs/{command}")
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(config.to_toml())
    return out


def _write_report(report, out: Path, name: str = "report") -> None:
    (out / f"{name}.json").write_text(report.to_json() + "\n")
    table = report.table(per_fold=bool(report.folds))
    (out / f"{name}.txt").write_text(table + "\n")
    print(table)


def cmd_phantom(config: RunConfig, force: bool) -> int:
    from .data.dataset import write_phantom_dataset

    out = _out_dir(config, "phantom", force)
    ids = write_phantom_dataset(out, config.run("count"), config.run("extent"), config.train.seed,
                                config.run("family"))
    log.info("wrote %d phantoms to %s", len(ids), out)
    return 0


def cmd_train(config: RunConfig, force: bool) -> int:
    from .data.dataset import load_dataset
    from .training import load_checkpoint, train

    cfg = config.train
    volumes = load_dataset(config.require("data"))
    state = None
    if config.run("resume"):
        state, saved = load_checkpoint(config.run("resume"))
        if saved != cfg:
            raise ConfigError("resume checkpoint was trained with a different configuration")
    out = _out_dir(config, "train", force)
    log_path = out / "train_log.jsonl"
    if state is None and log_path.exists():
        log_path.unlink()
    train(volumes, cfg, state, stop_epoch=config.run("stop_epoch"), log_path=log_path,
          checkpoint_dir=out / "checkpoint")
    log.info("checkpoint written to %s", out / "checkpoint")
    return 0


def _load_model(config: RunConfig):
    """Parameters, architecture, precision tag and training seed of the checkpoint."""
    from .training import load_checkpoint

    state, cfg = load_checkpoint(config.require("checkpoint"))
    return state.params, cfg.arch, cfg.precision, cfg.seed


def cmd_predict(config: RunConfig, force: bool) -> int:
    from .data.dataset import load_dataset
    from .data.nifti import read_nifti, write_nifti
    from .evaluation import predict_volume

    params, arch, tag, _ = _load_model(config)
    if config.run("inputs"):
        volumes = [read_nifti(p) for p in config.run("inputs")]
    else:
        volumes = load_dataset(config.require("data"))
    out = _out_dir(config, "predict", force)
    suffix = ".nii.gz" if config.run("compress") else ".nii"
    for volume in volumes:
        mask = predict_volume(params, arch, volume, precision_tag=tag,
                              keep_largest_component=config.run("largest_component"))
        write_nifti(mask, out / f"{volume.subject_id}_mask{suffix}", as_mask=True)
        log.info("segmented %s", volume.subject_id)
    return 0


def cmd_evaluate(config: RunConfig, force: bool) -> int:
    from .data.dataset import load_dataset
    from .evaluation import MetricsReport, score_volumes

    params, arch, tag, seed = _load_model(config)
    volumes = load_dataset(config.require("data"))
    out = _out_dir(config, "evaluate", force)
    report = MetricsReport(f"evaluate {Path(config.require('data')).name}", seed=seed)
    report.per_subject = score_volumes(params, arch, volumes, tag, config.run("largest_component"))
    _write_report(report, out)
    return 0


def cmd_crossval(config: RunConfig, force: bool) -> int:
    from .data.dataset import load_dataset
    from .evaluation import evaluate_crossval
    from .training import save_checkpoint

    cfg = config.train
    volumes = load_dataset(config.require("data"))
    out = _out_dir(config, "crossval", force)
    result = evaluate_crossval(
        volumes, config.run("k"), cfg, seed=cfg.seed,
        on_fold=lambda fold, state: save_checkpoint(state, cfg, out / f"fold{fold}"),
        keep_largest_component=config.run("largest_component"),
    )
    result.plan.save(out / "folds.json")
    _write_report(result.report, out)
    return 0


def cmd_transfer(config: RunConfig, force: bool) -> int:
    from .data.dataset import load_dataset
    from .evaluation import evaluate_transfer

    params, arch, tag, seed = _load_model(config)
    volumes = load_dataset(config.require("data"))
    out = _out_dir(config, "transfer", force)
    report = evaluate_transfer(params, arch, volumes, config.run("source_name"), config.run("target_name"),
                               precision_tag=tag, keep_largest_component=config.run("largest_component"),
                               seed=seed)
    _write_report(report, out)
    return 0


def cmd_gradcheck(config: RunConfig, force: bool) -> int:
    from .verify import run_gradcheck

    summary = run_gradcheck(config.train.seed)
    width = max(len(name) for name in summary.ops)
    for name, err in summary.ops.items():
        print(f"{name:<{width}}  {err:.3e}")
    print(f"{'full model':<{width}}  {summary.model:.3e}")
    print(f"worst op {max(summary.ops.values()):.3e} (< {summary.op_tolerance:g}), "
          f"model {summary.model:.3e} (< {summary.model_tolerance:g}), {summary.seconds:.1f}s")
    if config.run("out"):
        out = _out_dir(config, "gradcheck", force)
        (out / "gradcheck.json").write_text(json.dumps(
            {"ops": summary.ops, "model": summary.model, "seconds": summary.seconds,
             "failures": summary.failures}, indent=2, sort_keys=True) + "\n")
    if summary.failures:
        raise RuntimeError(f"gradient check failed for: {', '.join(summary.failures)}")
    return 0


def cmd_selftest(config: RunConfig, force: bool) -> int:
    from .selftest import run_selftest

    checks = run_selftest(config.train.seed)
    for c in checks:
        print(f"{'PASS' if c.ok else 'FAIL'}  {c.name}: {c.value:.10g} (expected {c.expected:.10g})")
    failed = [c.name for c in checks if not c.ok]
    if failed:
        raise RuntimeError(f"{len(failed)} self-test check(s) failed: {failed[0]}")
    return 0


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}

# flag -> (config key, argparse kwargs)
FLAGS = {
    "data": ("run.data", dict(help="dataset root (<root>/<id>/t1.nii, mask.nii)")),
    "out": ("run.out", dict(help="output directory (default runs/<command>)")),
    "checkpoint": ("run.checkpoint", dict(help="checkpoint directory")),
    "resume": ("run.resume", dict(help="checkpoint directory to resume training from")),
    "inputs": ("run.inputs", dict(nargs="+", help="NIfTI files to segment")),
    "k": ("run.k", dict(type=int, help="fold count")),
    "count": ("run.count", dict(type=int, help="number of phantoms")),
    "extent": ("run.extent", dict(type=int, help="phantom edge length in voxels")),
    "family": ("run.family", dict(help="phantom family (A or B)")),
    "source-name": ("run.source_name", dict(help="label of the training dataset")),
    "target-name": ("run.target_name", dict(help="label of the evaluated dataset")),
    "stop-epoch": ("run.stop_epoch", dict(type=int, help="stop after this epoch (resumable)")),
    "seed": ("train.seed", dict(type=int)),
    "epochs": ("train.epochs", dict(type=int)),
    "lr0": ("train.lr0", dict(type=float)),
    "batch-size": ("train.batch_size", dict(type=int)),
    "lambda": ("loss.sec_weight", dict(type=float, help="weight of the class-presence loss")),
}
BOOL_FLAGS = {"largest-component": "run.largest_component", "compress": "run.compress"}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML config file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override any config key (repeatable)")
    common.add_argument("--force", action="store_true", help="allow writing into a non-empty output directory")
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("-q", "--quiet", action="store_true")
    for flag, (key, kwargs) in FLAGS.items():
        common.add_argument(f"--{flag}", dest=key, default=argparse.SUPPRESS, **kwargs)
    for flag, key in BOOL_FLAGS.items():
        common.add_argument(f"--{flag}", dest=key, action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="contextstrip", description="Context-encoding skull stripping.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=_HELP[name])
    return parser


_HELP = {
    "phantom": "write a synthetic phantom dataset",
    "train": "train a model on a dataset",
    "predict": "segment NIfTI volumes with a checkpoint",
    "evaluate": "score a checkpoint on a labelled dataset",
    "crossval": "k-fold cross-validation report",
    "transfer": "score a checkpoint on another dataset without retraining",
    "gradcheck": "finite-difference check of every op and the full model",
    "selftest": "closed-form loss and metric identities",
}


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    overrides = {k: v for k, v in vars(args).items() if "." in k}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        overrides[key.strip()] = _parse_literal(value.strip())
    return overrides


@contextlib.contextmanager
def _thread_limit():
    value = os.environ.get("CONTEXTSTRIP_THREADS")
    if not value:
        yield
        return
    try:
        threads = int(value)
        if threads < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"CONTEXTSTRIP_THREADS must be a positive integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=threads):
        yield


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING if args.quiet else (logging.DEBUG if args.verbose else logging.INFO)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = parse_config(args.config, _overrides(args))
        with _thread_limit():
            return HANDLERS[args.command](config, args.force)
    except ConfigError as exc:
        print(f"contextstrip {args.command}: configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # one-line cause, full trace only when verbose
        if args.verbose:
            log.exception("command failed")
        print(f"contextstrip {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
