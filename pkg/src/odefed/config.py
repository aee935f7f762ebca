"""Experiment files: a YAML document with ``dataset``, ``model``, ``train``,
``federated``, ``partition`` and ``output`` sections.

Every section is validated before any work starts, and unknown keys are
rejected anywhere in the tree. See ``presets/README.md`` for a commented
example.
"""

from __future__ import annotations

import re
from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .data import Dataset, load_cifar10, synth_dataset
from .federated import ClientSpec, FedConfig, FedDFOptions
from .models import EULER_MODES, FAMILIES, ConfigError, ModelConfig, depth_to_iterations


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DatasetSection(_Section):
    kind: Literal["synth", "cifar10"] = "synth"
    path: Optional[str] = None
    classes: int = Field(4, ge=2, le=10)
    side: int = Field(8, ge=8)
    train_per_class: int = Field(64, ge=1)
    test_per_class: int = Field(64, ge=1)
    server_per_class: int = Field(0, ge=0)
    server_holdout: int = Field(0, ge=0)  # cifar10 only: trailing training images kept for the server
    noise: float = Field(0.25, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "cifar10":
            if not self.path:
                raise ValueError("path is required when kind is cifar10")
            if self.classes != 10:
                raise ValueError("cifar10 has exactly 10 classes")
        return self


class ModelSection(_Section):
    family: Literal[FAMILIES] = "odenet"  # type: ignore[valid-type]
    depth: Optional[int] = Field(None, ge=12)
    iterations: Optional[int] = Field(None, ge=1)
    widths: tuple[int, int, int] = (64, 128, 256)
    norm_groups: int = Field(8, ge=1)
    kernel_size: int = Field(3, ge=1)
    euler_mode: Literal[EULER_MODES] = "interval_step"  # type: ignore[valid-type]

    @model_validator(mode="after")
    def _one_of(self):
        if self.depth is not None and self.iterations is not None:
            raise ValueError("give either depth or iterations, not both")
        return self

    @property
    def resolved_iterations(self) -> int:
        if self.iterations is not None:
            return self.iterations
        if self.depth is not None:
            return depth_to_iterations(self.depth)[0]
        return 1


class TrainSection(_Section):
    epochs: int = Field(10, ge=0)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(0.05, ge=0)
    seed: int = 0
    test_iterations: list[int] = Field(default_factory=list)

    @field_validator("test_iterations")
    @classmethod
    def _positive(cls, v):
        if any(c < 1 for c in v):
            raise ValueError("every tested iteration count must be >= 1")
        return v


class FedDFSection(_Section):
    budget: Optional[int] = Field(None, ge=0)
    steps: int = Field(50, ge=0)
    lr: float = Field(0.05, ge=0)
    temperature: float = Field(3.0, gt=0)
    batch_size: int = Field(32, ge=1)


_MIX_ITEM = re.compile(r"^\s*(\d+)\s*[x×]\s*([a-z]+)(?:-(\d+)|:C(\d+))?\s*$")


def parse_mix(entries: Union[str, list[str]]) -> list[tuple[int, str, Optional[int]]]:
    """``"10x odenet-34, 2x odenet:C4"`` -> ``[(10, "odenet", 5), (2, "odenet", 4)]``.

    ``family-N`` names a depth (mapped to its iteration count), ``family:CK``
    an explicit count, and a bare ``family`` inherits the global model's.
    """
    if isinstance(entries, str):
        entries = [e for e in entries.split(",") if e.strip()]
    out = []
    for entry in entries:
        m = _MIX_ITEM.match(entry)
        if not m:
            raise ValueError(f"cannot parse client mix entry {entry!r}; expected e.g. '10x odenet-34' or '2x odenet:C4'")
        count, family, depth, iters = m.groups()
        if family not in FAMILIES:
            raise ValueError(f"unknown family {family!r} in client mix entry {entry!r}")
        c = depth_to_iterations(int(depth))[0] if depth else (int(iters) if iters else None)
        if c is not None and c < 1:
            raise ValueError(f"iteration count must be >= 1 in {entry!r}")
        out.append((int(count), family, c))
    return out


class FederatedSection(_Section):
    clients: Optional[int] = Field(None, ge=1)
    mix: Union[str, list[str], None] = None
    fraction: float = Field(1.0, gt=0, le=1)
    rounds: int = Field(1, ge=1)
    algorithm: Literal["fedavg", "feddf"] = "fedavg"
    epochs: int = Field(1, ge=0)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(0.05, ge=0)
    seed: int = 0
    mode: Literal["inprocess", "socket"] = "inprocess"
    timeout: float = Field(300.0, gt=0)
    feddf: FedDFSection = FedDFSection()

    @field_validator("mix")
    @classmethod
    def _mix(cls, v):
        if v is not None:
            parse_mix(v)
        return v

    @model_validator(mode="after")
    def _count(self):
        if self.mix is None and self.clients is None:
            raise ValueError("give clients, mix, or both")
        if self.mix is not None and self.clients is not None:
            total = sum(n for n, _, _ in parse_mix(self.mix))
            if total != self.clients:
                raise ValueError(f"client mix adds up to {total} but clients is {self.clients}")
        return self

    @property
    def num_clients(self) -> int:
        if self.clients is not None:
            return self.clients
        return sum(n for n, _, _ in parse_mix(self.mix))


class PartitionSection(_Section):
    alpha: float = Field(1.0, gt=0)
    seed: int = 0


class OutputSection(_Section):
    dir: str = "runs/default"


class ExperimentConfig(_Section):
    dataset: DatasetSection = DatasetSection()
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    federated: Optional[FederatedSection] = None
    partition: PartitionSection = PartitionSection()
    output: OutputSection = OutputSection()

    @model_validator(mode="after")
    def _model_builds(self):
        # surface width/group mistakes at load time, not mid-run
        try:
            self.build_model_config()
        except ConfigError as exc:
            raise ValueError(str(exc)) from None
        if self.federated is not None and self.federated.mix is not None:
            for _, family, _ in parse_mix(self.federated.mix):
                if family != self.model.family:
                    raise ValueError(f"client mix family {family!r} differs from model.family {self.model.family!r}")
        return self

    # -- derived objects ----------------------------------------------------

    def build_model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(
            family=m.family,
            in_channels=3,
            stem_channels=m.widths[0],
            stage_channels=tuple(m.widths),
            iterations=m.resolved_iterations,
            kernel_size=m.kernel_size,
            num_classes=self.dataset.classes,
            norm_groups=m.norm_groups,
            euler_mode=m.euler_mode,
        )

    def fed_config(self) -> FedConfig:
        f = self._federated()
        d = f.feddf
        return FedConfig(
            clients=f.num_clients,
            fraction=f.fraction,
            rounds=f.rounds,
            seed=f.seed,
            algorithm=f.algorithm,
            feddf=FedDFOptions(d.budget, d.steps, d.lr, d.temperature, d.batch_size),
        )

    def client_specs(self) -> list[ClientSpec]:
        f = self._federated()
        if f.mix is None:
            iters = [None] * f.num_clients
        else:
            iters = [c for n, _, c in parse_mix(f.mix) for _ in range(n)]
        return [ClientSpec(k, c, f.epochs, f.batch_size, f.lr) for k, c in enumerate(iters)]

    def _federated(self) -> FederatedSection:
        if self.federated is None:
            raise ConfigError("this command needs a 'federated' section")
        return self.federated

    def load_data(self) -> tuple[Dataset, Dataset, Optional[Dataset]]:
        """``(train, test, server)``; ``server`` is None when no server pool is configured."""
        d = self.dataset
        if d.kind == "cifar10":
            train, test = load_cifar10(d.path)
            server = None
            if d.server_holdout:
                if d.server_holdout >= len(train):
                    raise ConfigError("dataset.server_holdout: must leave some training images")
                cut = len(train) - d.server_holdout
                server = train.subset(range(cut, len(train)))
                train = train.subset(range(cut))
            return train, test, server
        train = synth_dataset(d.classes, d.train_per_class, d.side, d.noise, d.seed, "train")
        test = synth_dataset(d.classes, d.test_per_class, d.side, d.noise, d.seed, "test")
        server = synth_dataset(d.classes, d.server_per_class, d.side, d.noise, d.seed, "server") if d.server_per_class else None
        return train, test, server

    def effective(self) -> dict:
        """All fields with defaults resolved, as plain YAML-safe data."""
        return self.model_dump(mode="json")


def _format_errors(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"])
        msg = err["msg"].removeprefix("Value error, ")
        if err["type"] == "extra_forbidden":
            msg = "unknown key"
        parts.append(f"{loc}: {msg}" if loc else msg)
    return "; ".join(parts)


def parse_config(data: dict, source: str = "<config>") -> ExperimentConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"{source}: {_format_errors(exc)}") from None


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such config file") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    return parse_config(data, str(path))


def dump_config(config: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(config.effective(), sort_keys=False))


PRESET_DIR = Path(__file__).with_name("presets")
PRESETS = ("tables-1-2", "figs-7-8", "tables-3-5", "table-6", "table-7")


def preset_path(name: str) -> Path:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    return PRESET_DIR / f"{name}.yaml"


def resolve_config(ref: str) -> ExperimentConfig:
    """Load ``ref`` as a file path, falling back to a shipped preset name."""
    if not Path(ref).exists() and ref in PRESETS:
        return load_config(preset_path(ref))
    return load_config(ref)
