"""Run configuration: a YAML tree with full defaulting.

Every field has a default, so an empty file is a valid config. All derived
seeds come from ``seed`` through :func:`mtlat.seeding.derive_seed`.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .attacks import AttackBudget
from .bench import BenchOptions
from .corruptions import KINDS
from .data import Dataset, load_cifar_binary, load_idx, synth_dataset
from .errors import ConfigError, DataError
from .seeding import derive_seed
from .training import TrainRecipe

OUTPUT_ROOT_ENV = "MTLAT_OUTPUT_ROOT"
DATASET_KINDS = ("synth", "idx", "cifar")


@dataclass
class DatasetSpec:
    kind: str = "synth"
    # synth
    n_classes: int = 10
    n_per_class: int = 150
    n_test_per_class: int = 100
    difficulty: float = 0.5
    size: int = 32
    seed: int | None = None  # None: derived from the master seed
    # idx: train_images, train_labels, test_images, test_labels; cifar: train (list), test (list)
    paths: dict = field(default_factory=dict)
    channels: int = 3

    def check(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}, got {self.kind!r}")
        need = {"idx": ("train_images", "train_labels", "test_images", "test_labels"),
                "cifar": ("train", "test"), "synth": ()}[self.kind]
        missing = [k for k in need if k not in self.paths]
        if missing:
            raise ConfigError(f"dataset.paths is missing {missing} for kind {self.kind!r}")
        for k in need:
            for p in _as_list(self.paths[k]):
                if not Path(p).is_file():
                    raise DataError(f"dataset file not found: {p}")


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    train: dict = field(default_factory=dict)  # TrainRecipe fields except seed
    attack: dict = field(default_factory=dict)  # AttackBudget overrides for the attack subcommand
    bench: dict = field(default_factory=dict)  # BenchOptions fields

    # ---- resolved views

    def recipe(self) -> TrainRecipe:
        kw = dict(self.train)
        kw["seed"] = self.seed
        try:
            return TrainRecipe(**kw)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"train: {e}") from e

    def budget(self) -> AttackBudget:
        kw = dict(self.attack)
        kw.setdefault("seed", derive_seed(self.seed, "attack"))
        try:
            return AttackBudget(**kw)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"attack: {e}") from e

    def bench_options(self, jobs=1) -> BenchOptions:
        kw = dict(self.bench)
        for key in ("kinds", "mi_epsilons"):
            if key in kw:
                kw[key] = tuple(kw[key])
        if "severity_table" in kw and kw["severity_table"] is not None:
            bad = sorted(set(kw["severity_table"]) - set(KINDS))
            if bad:
                raise ConfigError(f"bench.severity_table has unknown kinds {bad}")
            kw["severity_table"] = {k: tuple(float(s) for s in v) for k, v in kw["severity_table"].items()}
        kw["jobs"] = jobs
        try:
            return BenchOptions(**kw)
        except TypeError as e:
            raise ConfigError(f"bench: {e}") from e

    def data_seed(self) -> int:
        return self.dataset.seed if self.dataset.seed is not None else derive_seed(self.seed, "dataset")

    def output_path(self) -> Path:
        p = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not p.is_absolute():
            p = Path(root) / p
        return p

    def load_dataset(self) -> Dataset:
        d = self.dataset
        d.check()
        if d.kind == "synth":
            return synth_dataset(self.data_seed(), d.n_classes, d.n_per_class, d.n_test_per_class,
                                 d.difficulty, d.size)
        if d.kind == "idx":
            p = d.paths
            train = load_idx(p["train_images"], p["train_labels"], channels=d.channels)
            test = load_idx(p["test_images"], p["test_labels"], channels=d.channels)
            n = int(max(train.labels.max(initial=0), test.labels.max(initial=0))) + 1
            return Dataset("idx", n, train, test)
        train = load_cifar_binary(*_as_list(d.paths["train"]))
        test = load_cifar_binary(*_as_list(d.paths["test"]))
        return Dataset("cifar", 10, train, test)

    # ---- serialization

    def resolved(self) -> dict:
        """Every field, with train/attack/bench expanded to their full defaults."""
        recipe = asdict(self.recipe())
        recipe.pop("seed")
        recipe["decay_epochs"] = list(recipe["decay_epochs"])
        bench = self.bench_options().to_dict()
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "dataset": asdict(self.dataset),
            "train": recipe,
            "attack": self.budget().to_dict(),
            "bench": bench,
        }

    def snapshot(self) -> str:
        return yaml.safe_dump(self.resolved(), sort_keys=True)


def _dataclass_from(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")
    return cls(**data)


_SECTION_KEYS = {
    "train": {f.name for f in dataclasses.fields(TrainRecipe)} - {"seed"},
    "attack": {f.name for f in dataclasses.fields(AttackBudget)},
    "bench": {f.name for f in dataclasses.fields(BenchOptions)} - {"jobs"},
}


def config_from_dict(data: dict | None) -> RunConfig:
    data = dict(data or {})
    top = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {unknown}")
    for section, keys in _SECTION_KEYS.items():
        sub = data.get(section) or {}
        if not isinstance(sub, dict):
            raise ConfigError(f"{section} must be a mapping")
        bad = sorted(set(sub) - keys)
        if bad:
            raise ConfigError(f"unknown keys in {section}: {bad}")
        data[section] = sub
    data["dataset"] = _dataclass_from(DatasetSpec, data.get("dataset"), "dataset")
    if not isinstance(data.get("seed", 0), int):
        raise ConfigError("seed must be an integer")
    cfg = RunConfig(**data)
    cfg.recipe()
    cfg.budget()
    return cfg


def load_config(path=None, overrides=()) -> RunConfig:
    """Read a YAML config (or defaults when ``path`` is None) and apply ``key.sub=value`` overrides."""
    data = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"malformed config {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
    for item in overrides:
        apply_override(data, item)
    return config_from_dict(data)


def apply_override(data: dict, item: str):
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f"bad override value {raw!r}") from e
    parts = key.strip().split(".")
    node = data
    for p in parts[:-1]:
        nxt = node.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"override {key!r} descends into a non-mapping")
        node = nxt
    node[parts[-1]] = value
