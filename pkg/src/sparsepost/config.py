"""Experiment configuration: a flat, diffable ``section.key = value`` text
format with a published schema. Unknown keys are rejected with the line they
appear on; every value is typed and validated before any compute starts.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

from .errors import ConfigError
from .masking import PruneSchedule
from .network import NetworkSpec
from .store import Dataset, load_fmnist, load_idx, resolve_data_dir, synth_blobs
from .streams import derive_seed
from .training import SchedulerSpec, SGDConfig


@dataclass(frozen=True)
class _Key:
    type: str  # int | float | bool | str | int_list
    default: Any
    choices: Optional[tuple] = None


SCHEMA: dict[str, _Key] = {
    "seed": _Key("int", 0),
    "dataset.kind": _Key("str", "blobs", ("blobs", "fmnist", "idx")),
    "dataset.data_dir": _Key("str", ""),
    "dataset.images": _Key("str", ""),
    "dataset.labels": _Key("str", ""),
    "dataset.test_images": _Key("str", ""),
    "dataset.test_labels": _Key("str", ""),
    "dataset.classes": _Key("int", 3),
    "dataset.per_class": _Key("int", 200),
    "dataset.test_per_class": _Key("int", 100),
    "dataset.dim": _Key("int", 8),
    "dataset.spread": _Key("float", 0.06),
    "network.hidden": _Key("int_list", (200, 200)),
    "mask.method": _Key("str", "full", ("full", "ip", "ipr", "rlm_ip", "rlm_ipr", "rlm_f", "rgm")),
    "mask.rate": _Key("float", 0.9),
    "mask.stages": _Key("str", ""),
    "mask.stage": _Key("int", -1),
    "prune.fraction": _Key("float", 0.2),
    "prune.iterations": _Key("int", 10),
    "prune.epochs_per_iteration": _Key("int", 60),
    "prune.rewind": _Key("bool", False),
    "train.learning_rate": _Key("float", 0.01),
    "train.momentum": _Key("float", 0.9),
    "train.weight_decay": _Key("float", 1e-3),
    "train.epochs": _Key("int", 60),
    "train.batch_size": _Key("int", 128),
    "train.scheduler": _Key("str", "multistep", ("constant", "multistep", "cosine")),
    "train.milestones": _Key("int_list", (20, 40)),
    "train.gamma": _Key("float", 0.1),
    "train.initial": _Key("float", 0.0),
    "train.final": _Key("float", 0.0),
    "sghmc.step_size": _Key("float", 0.01),
    "sghmc.friction": _Key("float", 0.1),
    "sghmc.prior_precision": _Key("float", 60.0),
    "sghmc.burn_in_epochs": _Key("int", 50),
    "sghmc.num_samples": _Key("int", 50),
    "sghmc.batch_size": _Key("int", 128),
    "sghmc.samples_per_epoch": _Key("int", 1),
    "sghmc.noise_enabled": _Key("bool", True),
    "sghmc.scheduler": _Key("str", "constant", ("constant", "cosine")),
    "sghmc.initial": _Key("float", 0.0),
    "sghmc.final": _Key("float", 0.0),
    "chains.count": _Key("int", 1),
    "eval.bins": _Key("int", 15),
    "eval.max_lag": _Key("int", 20),
    "bench.inputs": _Key("int", 32),
    "bench.repetitions": _Key("int", 5),
}


def _parse_value(key: str, spec: _Key, raw: str, line_no: int):
    def bail(msg):
        raise ConfigError(f"line {line_no}: {key}: {msg}")

    raw = raw.strip()
    try:
        if spec.type == "int":
            value = int(raw)
        elif spec.type == "float":
            value = float(raw)
        elif spec.type == "bool":
            if raw.lower() in ("true", "yes", "1"):
                value = True
            elif raw.lower() in ("false", "no", "0"):
                value = False
            else:
                bail(f"expected a boolean, got {raw!r}")
        elif spec.type == "int_list":
            value = tuple(int(p) for p in raw.replace(",", " ").split())
        else:
            value = raw
    except ValueError:
        bail(f"expected {spec.type}, got {raw!r}")
    if spec.choices is not None and value not in spec.choices:
        bail(f"must be one of {', '.join(spec.choices)}; got {value!r}")
    return value


@dataclass
class ExperimentConfig:
    """Validated configuration values plus factory helpers."""

    values: dict[str, Any]
    source: str = "<memory>"

    def __getitem__(self, key: str):
        return self.values[key]

    def override(self, key: str, value) -> None:
        self.values[key] = value

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    def sgd_config(self, epochs: Optional[int] = None) -> SGDConfig:
        v = self.values
        kind = v["train.scheduler"]
        if kind == "multistep":
            sched = SchedulerSpec.multistep(v["train.milestones"], v["train.gamma"])
        elif kind == "cosine":
            sched = SchedulerSpec.cosine(v["train.initial"], v["train.final"])
        else:
            sched = SchedulerSpec.constant()
        return SGDConfig(
            learning_rate=v["train.learning_rate"],
            momentum=v["train.momentum"],
            weight_decay=v["train.weight_decay"],
            epochs=v["train.epochs"] if epochs is None else epochs,
            batch_size=v["train.batch_size"],
            scheduler=sched,
            seed=derive_seed(self.seed, "train"),
        )

    def sghmc_config(self):
        from .sampling import SGHMCConfig

        v = self.values
        if v["sghmc.scheduler"] == "cosine":
            sched = SchedulerSpec.cosine(v["sghmc.initial"], v["sghmc.final"])
        else:
            sched = SchedulerSpec.constant()
        return SGHMCConfig(
            step_size=v["sghmc.step_size"],
            friction=v["sghmc.friction"],
            prior_precision=v["sghmc.prior_precision"],
            burn_in_epochs=v["sghmc.burn_in_epochs"],
            num_samples=v["sghmc.num_samples"],
            batch_size=v["sghmc.batch_size"],
            samples_per_epoch=v["sghmc.samples_per_epoch"],
            step_scheduler=sched,
            noise_enabled=v["sghmc.noise_enabled"],
            seed=self.seed,
        )

    def prune_schedule(self) -> PruneSchedule:
        v = self.values
        return PruneSchedule(
            per_iter_fraction=v["prune.fraction"],
            iterations=v["prune.iterations"],
            epochs_per_iteration=v["prune.epochs_per_iteration"],
        )

    def network(self, input_dim: int, num_classes: int) -> NetworkSpec:
        return NetworkSpec.mlp(input_dim, list(self.values["network.hidden"]), num_classes)

    def load_datasets(self, data_dir_flag: Optional[str] = None) -> tuple[Dataset, Dataset]:
        v = self.values
        kind = v["dataset.kind"]
        if kind == "blobs":
            seed = derive_seed(self.seed, "dataset")
            train = synth_blobs(
                v["dataset.classes"], v["dataset.per_class"], v["dataset.dim"],
                v["dataset.spread"], seed, split="train",
            )
            test = synth_blobs(
                v["dataset.classes"], v["dataset.test_per_class"], v["dataset.dim"],
                v["dataset.spread"], seed, split="test",
            )
            return train, test
        if kind == "fmnist":
            data_dir = resolve_data_dir(data_dir_flag or v["dataset.data_dir"] or None)
            if data_dir is None:
                raise ConfigError(
                    "dataset.kind=fmnist needs --data-dir, dataset.data_dir, "
                    "or the SPARSE_POSTERIOR_DATA environment variable"
                )
            return load_fmnist(data_dir, "train"), load_fmnist(data_dir, "test")
        for key in ("dataset.images", "dataset.labels", "dataset.test_images", "dataset.test_labels"):
            if not v[key]:
                raise ConfigError(f"dataset.kind=idx needs {key}")
        train = load_idx(v["dataset.images"], v["dataset.labels"])
        test = load_idx(v["dataset.test_images"], v["dataset.test_labels"])
        test.split = "test"
        return train, test

    def resolved_lines(self) -> list[str]:
        return [f"{k} = {_format_value(self.values[k])}" for k in sorted(self.values)]


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return " ".join(str(x) for x in value)
    return str(value)


def default_config() -> ExperimentConfig:
    return ExperimentConfig({k: s.default for k, s in SCHEMA.items()})


def parse_config_text(text: str, source: str = "<memory>") -> ExperimentConfig:
    values = {k: s.default for k, s in SCHEMA.items()}
    for line_no, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {raw_line.strip()!r}")
        key, _, raw_value = line.partition("=")
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"line {line_no}: unknown key {key!r}")
        values[key] = _parse_value(key, SCHEMA[key], raw_value, line_no)
    return ExperimentConfig(values, source=source)


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config_text(text, source=str(path))
