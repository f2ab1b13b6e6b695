"""Config-driven experiment pipeline and the with/without deep-block ablation.

A run is a pure function of its config: data preparation, an optional
memetic architecture search, federated training, held-out evaluation, then
reports and a checkpoint. Every artifact except ``status.json`` (which carries
a timestamp) is reproducible byte for byte.

Output directory layout::

    config.json        validated config echo, all defaults filled in
    manifest.json      dataset manifest plus split and shard sizes
    mao_log.jsonl      one line per generation (only when the search runs)
    mao_best.json      best chromosome and the model spec it decodes to
    rounds.jsonl       one line per (round, client)
    metrics.json       full test-split report, per-class rows included
    metrics.csv        one summary row
    per_class.csv      per-class precision/recall/F1/support
    model.fsyn         final global model
    status.json        ok/failed, stage reached, error text, timestamp
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import metrics
from .checkpoint import save_checkpoint
from .data import (
    AugmentSpec,
    Dataset,
    ShardStrategy,
    SplitSpec,
    balance_with_augmentation,
    generate_synthetic_dataset,
    load_dataset,
    shard_to_clients,
    split_dataset,
)
from .federated import FedConfig, FederationResult, run_federation
from .memetic import MaoConfig, MaoResult, TrainingFitness, architecture_layout, chromosome_to_spec, run_mao
from .model import BACKBONES, DeepBlockSpec, ModelGraph, ModelSpec, forward_batch

__all__ = [
    "ConfigError",
    "StageError",
    "DataConfig",
    "SplitConfig",
    "AugmentConfig",
    "ShardConfig",
    "DeepBlockConfig",
    "ModelConfig",
    "FederatedConfig",
    "SearchConfig",
    "ExperimentConfig",
    "load_config",
    "PreparedData",
    "prepare_data",
    "evaluate_model",
    "run_search",
    "per_class_csv",
    "ExperimentResult",
    "run_experiment",
    "run_search_only",
    "AblationReport",
    "run_ablation",
]


class ConfigError(ValueError):
    """Invalid config; the message starts with the offending field's path."""


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------------------
# config sections


def _fail(path: str, msg: str):
    raise ConfigError(f"{path}: {msg}")


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"          # or "directory"
    path: str | None = None            # required for "directory"
    classes: int = 8
    per_class: int = 150
    height: int = 32
    width: int = 32
    channels: int = 1
    noise: float = 0.05
    seed: int = 42

    def check(self, path):
        if self.source not in ("synthetic", "directory"):
            _fail(f"{path}.source", f"must be 'synthetic' or 'directory', got {self.source!r}")
        if self.source == "directory" and not self.path:
            _fail(f"{path}.path", "required when source is 'directory'")
        if self.classes < 2:
            _fail(f"{path}.classes", f"must be >= 2, got {self.classes}")
        if self.per_class < 1:
            _fail(f"{path}.per_class", f"must be >= 1, got {self.per_class}")
        for name in ("height", "width"):
            if getattr(self, name) < 4:
                _fail(f"{path}.{name}", f"must be >= 4, got {getattr(self, name)}")
        if self.channels not in (1, 3):
            _fail(f"{path}.channels", f"must be 1 or 3, got {self.channels}")
        if self.noise < 0:
            _fail(f"{path}.noise", f"must be >= 0, got {self.noise}")


@dataclass(frozen=True)
class SplitConfig:
    fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    seed: int = 42
    stratified: bool = True

    def check(self, path):
        try:
            self.spec()
        except ValueError as exc:
            _fail(f"{path}.fractions", str(exc))

    def spec(self) -> SplitSpec:
        return SplitSpec(tuple(self.fractions), self.seed, self.stratified)


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = False
    transforms: tuple[str, ...] = ("horizontal_flip", "rotation", "translation")
    target: int | None = None
    seed: int = 0

    def check(self, path):
        try:
            self.spec()
        except ValueError as exc:
            _fail(f"{path}.transforms", str(exc))
        if self.target is not None and self.target < 1:
            _fail(f"{path}.target", f"must be >= 1, got {self.target}")

    def spec(self) -> AugmentSpec:
        return AugmentSpec(tuple(self.transforms), self.target, self.seed)


@dataclass(frozen=True)
class ShardConfig:
    strategy: str = "iid"              # iid | dirichlet:<alpha> | label_skew:<c>
    seed: int = 42

    def check(self, path):
        try:
            self.parsed()
        except ValueError as exc:
            _fail(f"{path}.strategy", str(exc))

    def parsed(self) -> ShardStrategy:
        return ShardStrategy.parse(self.strategy)


@dataclass(frozen=True)
class DeepBlockConfig:
    width: int = 32
    loops: int = 2
    repeats: int = 3
    seq_width: int = 32

    def check(self, path):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 1:
                _fail(f"{path}.{f.name}", f"must be >= 1, got {getattr(self, f.name)}")


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "cnn-m"
    hidden: int = 32
    depth: int | None = None
    deep_block: DeepBlockConfig | None = DeepBlockConfig()
    seed: int = 42

    def check(self, path):
        if self.backbone not in BACKBONES:
            _fail(f"{path}.backbone", f"unknown backbone {self.backbone!r}; known: {', '.join(sorted(BACKBONES))}")
        if self.hidden < 1:
            _fail(f"{path}.hidden", f"must be >= 1, got {self.hidden}")
        if self.depth is not None and self.depth < 1:
            _fail(f"{path}.depth", f"must be >= 1, got {self.depth}")

    def spec(self, class_count: int, input_shape) -> ModelSpec:
        block = None if self.deep_block is None else DeepBlockSpec(**dataclasses.asdict(self.deep_block))
        return ModelSpec(self.backbone, class_count, tuple(input_shape), deep_block=block,
                         hidden=self.hidden, depth=self.depth, seed=self.seed)


@dataclass(frozen=True)
class FederatedConfig:
    rounds: int = 30
    clients: int = 5
    local_epochs: int = 1
    batch_size: int = 32
    optimizer: str = "adam"
    lr: float = 0.001
    sample_clients: int | None = None
    seed: int = 42
    workers: int = 1
    count_mode: str = "samples"
    aggregation: str = "weights"

    def check(self, path):
        _wrap(path, lambda: self.fed())

    def fed(self) -> FedConfig:
        return FedConfig(**dataclasses.asdict(self))


@dataclass(frozen=True)
class SearchConfig:
    population: int = 11
    generations: int = 15
    tournament: int = 3
    p_mutation: float = 0.2
    mutation_scale: float = 0.1
    budget_epochs: int = 2
    local_budget: int | None = 16      # each evaluation trains a model, so keep it finite
    seed: int = 42
    workers: int = 1
    registry: tuple[str, ...] = tuple(BACKBONES)
    batch_size: int = 32

    def check(self, path):
        for i, bb in enumerate(self.registry):
            if bb not in BACKBONES:
                _fail(f"{path}.registry[{i}]", f"unknown backbone {bb!r}; known: {', '.join(sorted(BACKBONES))}")
        if not self.registry:
            _fail(f"{path}.registry", "must name at least one backbone")
        _wrap(path, lambda: self.mao())

    def mao(self) -> MaoConfig:
        d = dataclasses.asdict(self)
        d.pop("registry")
        d.pop("batch_size")
        return MaoConfig(**d)


def _wrap(path, build):
    # turn a constructor's ValueError into a path-qualified one; the field
    # named first in the message is the one at fault
    try:
        build()
    except ValueError as exc:
        msg = str(exc)
        name = msg.split()[0]
        _fail(f"{path}.{name}" if name.isidentifier() else path, msg)


SECTIONS = {
    "data": DataConfig,
    "split": SplitConfig,
    "augment": AugmentConfig,
    "shards": ShardConfig,
    "model": ModelConfig,
    "federated": FederatedConfig,
    "search": SearchConfig,
}
NESTED = {("model", "deep_block"): DeepBlockConfig}


def _typecheck(path: str, value, default, annotation: str):
    """Loose JSON-level type check driven by the field's default and annotation."""
    optional = "None" in annotation
    if value is None:
        if not optional:
            _fail(path, "must not be null")
        return None
    if "tuple" in annotation:
        if not isinstance(value, (list, tuple)):
            _fail(path, f"must be a list, got {type(value).__name__}")
        return tuple(value)
    if annotation.startswith("bool"):
        if not isinstance(value, bool):
            _fail(path, f"must be true or false, got {value!r}")
        return value
    if annotation.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, int):
            _fail(path, f"must be an integer, got {value!r}")
        return value
    if annotation.startswith("float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            _fail(path, f"must be a number, got {value!r}")
        return float(value)
    if annotation.startswith("str"):
        if not isinstance(value, str):
            _fail(path, f"must be a string, got {value!r}")
        return value
    return value


def _build(cls, raw, path: str, section: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        _fail(path, f"must be an object, got {type(raw).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in names:
            _fail(f"{path}.{key}", f"unknown field; expected one of {', '.join(names)}")
    kwargs = {}
    for name, f in names.items():
        if name not in raw:
            continue
        sub = NESTED.get((section, name))
        if sub is not None:
            kwargs[name] = None if raw[name] is None else _build(sub, raw[name], f"{path}.{name}", name)
        else:
            kwargs[name] = _typecheck(f"{path}.{name}", raw[name], f.default, str(f.type))
    obj = cls(**kwargs)
    obj.check(path)
    return obj


@dataclass(frozen=True)
class ExperimentConfig:
    """Whole-run config; the defaults are the desk benchmark."""

    data: DataConfig = DataConfig()
    split: SplitConfig = SplitConfig()
    augment: AugmentConfig = AugmentConfig()
    shards: ShardConfig = ShardConfig()
    model: ModelConfig = ModelConfig()
    federated: FederatedConfig = FederatedConfig()
    search: SearchConfig | None = None     # None skips the architecture search
    output_dir: str = "runs/experiment"

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "ExperimentConfig":
        if not isinstance(raw, Mapping):
            _fail("config", f"must be an object, got {type(raw).__name__}")
        allowed = set(SECTIONS) | {"output_dir"}
        for key in raw:
            if key not in allowed:
                _fail(f"config.{key}", f"unknown section; expected one of {', '.join(sorted(allowed))}")
        kwargs = {}
        for name, sec in SECTIONS.items():
            if name in raw:
                if name == "search" and raw[name] is None:
                    kwargs[name] = None
                else:
                    kwargs[name] = _build(sec, raw[name], f"config.{name}", name)
        if "output_dir" in raw:
            kwargs["output_dir"] = _typecheck("config.output_dir", raw["output_dir"], "", "str")
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def with_overrides(self, overrides: Mapping[str, Any]) -> "ExperimentConfig":
        """Apply dotted-path overrides such as ``{"federated.rounds": 3}``."""
        raw = self.to_dict()
        for dotted, value in overrides.items():
            keys = dotted.split(".")
            node = raw
            for k in keys[:-1]:
                if not isinstance(node.get(k), dict):
                    node[k] = {}
                node = node[k]
            node[keys[-1]] = value
        return ExperimentConfig.from_dict(raw)


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return ExperimentConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# stages


@dataclass
class PreparedData:
    train: Dataset
    val: Dataset
    test: Dataset
    shards: list[Dataset]
    manifest: dict


def _load_source(cfg: DataConfig) -> Dataset:
    if cfg.source == "directory":
        return load_dataset(cfg.path, cfg.height, cfg.width)
    return generate_synthetic_dataset(cfg.classes, cfg.per_class, cfg.height, cfg.width,
                                      cfg.seed, cfg.channels, cfg.noise)


def prepare_data(cfg: ExperimentConfig) -> PreparedData:
    ds = _load_source(cfg.data)
    train, val, test = split_dataset(ds, cfg.split.spec())
    if cfg.augment.enabled:
        train = balance_with_augmentation(train, cfg.augment.spec())
    plan = shard_to_clients(train.labels, cfg.federated.clients, cfg.shards.parsed(), cfg.shards.seed)
    shards = [train.subset(s) for s in plan.shards]
    manifest = ds.manifest()
    manifest["splits"] = {"train": len(train), "val": len(val), "test": len(test)}
    manifest["shards"] = {"strategy": cfg.shards.strategy, "sizes": plan.sizes,
                          "class_counts": [s.class_counts().tolist() for s in shards]}
    return PreparedData(train, val, test, shards, manifest)


def evaluate_model(model: ModelGraph, ds: Dataset) -> metrics.ClassificationReport:
    """Test-set report; logits serve as the ranking scores for AUC/AP."""
    logits = forward_batch(model, ds.images).astype(np.float64)
    return metrics.evaluate_predictions(logits, ds.labels, model.spec.class_count,
                                        class_names=list(ds.class_names))


def run_search(cfg: ExperimentConfig, data: PreparedData) -> tuple[MaoResult, ModelSpec, float]:
    """Memetic search on train/val; returns the log, the decoded spec and its learning rate."""
    s = cfg.search
    fitness = TrainingFitness(data.train, data.val, s.budget_epochs, s.registry, s.batch_size, s.seed)
    result = run_mao(s.mao(), fitness, architecture_layout(s.registry))
    best = result.best.chromosome
    spec = chromosome_to_spec(best, s.registry, data.train.n_classes, data.train.image_shape,
                              seed=cfg.model.seed)
    return result, spec, best["learning_rate"]


def per_class_csv(report: metrics.ClassificationReport, variant: str | None = None) -> str:
    buf = io.StringIO()
    cols = (["variant"] if variant is not None else []) + ["class", "precision", "recall", "f1", "support"]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in report.to_dict()["per_class"]:
        vals = [row["class"], f"{row['precision']:.6f}", f"{row['recall']:.6f}",
                f"{row['f1']:.6f}", row["support"]]
        w.writerow(([variant] if variant is not None else []) + vals)
    return buf.getvalue()


def _write(out: Path, name: str, text: str) -> None:
    (out / name).write_text(text)


def _status(out: Path, status: str, stages: list[str], error: str | None = None,
            stage: str | None = None) -> None:
    doc = {"status": status, "completed_stages": stages, "failed_stage": stage, "error": error,
           "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z")}
    _write(out, "status.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")


class _Stages:
    """Runs named stages; the first failure is recorded and re-raised as StageError."""

    def __init__(self, out: Path):
        self.out = out
        self.done: list[str] = []

    def __call__(self, name, fn, *args):
        try:
            value = fn(*args)
        except Exception as exc:
            _status(self.out, "failed", self.done, f"{type(exc).__name__}: {exc}", name)
            raise StageError(name, exc) from exc
        self.done.append(name)
        return value


@dataclass
class ExperimentResult:
    out_dir: Path
    report: metrics.ClassificationReport
    federation: FederationResult
    spec: ModelSpec
    search: MaoResult | None = None


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None,
                   search: bool = True) -> ExperimentResult:
    """Full pipeline; ``search=False`` skips the architecture search even if configured."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    stage = _Stages(out)
    _status(out, "running", [])
    _write(out, "config.json", cfg.to_json())

    data = stage("data", prepare_data, cfg)
    _write(out, "manifest.json", json.dumps(data.manifest, indent=2, sort_keys=True) + "\n")

    spec = cfg.model.spec(data.train.n_classes, data.train.image_shape)
    fed = cfg.federated.fed()
    mao = None
    if search and cfg.search is not None:
        mao, spec, lr = stage("search", run_search, cfg, data)
        fed = dataclasses.replace(fed, lr=lr)
        _write(out, "mao_log.jsonl", mao.log_jsonl())
        _write(out, "mao_best.json", json.dumps(
            {"chromosome": mao.best.chromosome.as_dict(), "fitness": mao.best.fitness,
             "spec": spec.to_dict()}, indent=2, sort_keys=True) + "\n")

    result = stage("federated", run_federation, spec, data.shards, fed, data.val)
    _write(out, "rounds.jsonl", result.history_jsonl())

    report = stage("evaluate", evaluate_model, result.global_model, data.test)
    _write(out, "metrics.json", report.to_json())
    _write(out, "metrics.csv", metrics.rows_to_csv([report.summary_row(spec.backbone_id)]))
    _write(out, "per_class.csv", per_class_csv(report))

    stage("checkpoint", save_checkpoint, result.global_model, out / "model.fsyn")
    _status(out, "ok", stage.done)
    return ExperimentResult(out, report, result, spec, mao)


def run_search_only(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> MaoResult:
    """Data preparation plus the search stage; writes the search artifacts."""
    if cfg.search is None:
        raise ConfigError("config.search: required for the search stage")
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    stage = _Stages(out)
    _status(out, "running", [])
    _write(out, "config.json", cfg.to_json())
    data = stage("data", prepare_data, cfg)
    _write(out, "manifest.json", json.dumps(data.manifest, indent=2, sort_keys=True) + "\n")
    mao, spec, _ = stage("search", run_search, cfg, data)
    _write(out, "mao_log.jsonl", mao.log_jsonl())
    _write(out, "mao_best.json", json.dumps(
        {"chromosome": mao.best.chromosome.as_dict(), "fitness": mao.best.fitness,
         "spec": spec.to_dict()}, indent=2, sort_keys=True) + "\n")
    _status(out, "ok", stage.done)
    return mao


# ---------------------------------------------------------------------------
# ablation


@dataclass
class AblationReport:
    with_block: metrics.ClassificationReport
    without_block: metrics.ClassificationReport
    param_counts: dict[str, int]
    out_dir: Path | None = None
    rows: list[dict] = field(default_factory=list)

    @property
    def accuracy_gain(self) -> float:
        return self.with_block.accuracy - self.without_block.accuracy

    def comparison_csv(self) -> str:
        return metrics.rows_to_csv(self.rows)

    def delta_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "d_precision", "d_recall", "d_f1"])
        names = self.with_block.class_names or [str(i) for i in range(len(self.with_block.f1))]
        for i, name in enumerate(names):
            w.writerow([name] + [f"{getattr(self.with_block, m)[i] - getattr(self.without_block, m)[i]:+.6f}"
                                 for m in ("precision", "recall", "f1")])
        return buf.getvalue()


def run_ablation(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> AblationReport:
    """Train the configured model with and without its deep block on identical
    data, shards and seeds, then compare on the test split."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    stage = _Stages(out)
    _status(out, "running", [])
    block = cfg.model.deep_block or DeepBlockConfig()
    with_cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, deep_block=block), search=None)
    _write(out, "config.json", with_cfg.to_json())

    data = stage("data", prepare_data, with_cfg)
    _write(out, "manifest.json", json.dumps(data.manifest, indent=2, sort_keys=True) + "\n")
    spec = with_cfg.model.spec(data.train.n_classes, data.train.image_shape)
    variants = {"with_deep_block": spec, "without_deep_block": spec.without_deep_block()}
    reports, counts = {}, {}
    for name, s in variants.items():
        res = stage(f"federated[{name}]", run_federation, s, data.shards, cfg.federated.fed(), data.val)
        _write(out, f"rounds_{name}.jsonl", res.history_jsonl())
        reports[name] = stage(f"evaluate[{name}]", evaluate_model, res.global_model, data.test)
        counts[name] = res.global_model.parameter_count
        save_checkpoint(res.global_model, out / f"model_{name}.fsyn")

    rows = [reports[n].summary_row(f"{spec.backbone_id}/{n}") for n in variants]
    rep = AblationReport(reports["with_deep_block"], reports["without_deep_block"], counts, out, rows)
    _write(out, "ablation.csv", rep.comparison_csv())
    _write(out, "per_class.csv", per_class_csv(rep.with_block, "with_deep_block")
           + per_class_csv(rep.without_block, "without_deep_block").split("\n", 1)[1])
    _write(out, "per_class_delta.csv", rep.delta_csv())
    _write(out, "ablation.json", json.dumps(
        {"param_counts": counts, "accuracy_gain": rep.accuracy_gain,
         "with_deep_block": rep.with_block.to_dict(), "without_deep_block": rep.without_block.to_dict()},
        indent=2, sort_keys=True) + "\n")
    _status(out, "ok", stage.done)
    return rep
