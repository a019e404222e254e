"""Versioned JSON run configuration shared by every CLI command."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field as PydField, ValidationError

from .errors import ConfigError
from .grid import Grid, make_grid
from .physics import PdeSpec
from .trainer import TrainConfig

SCHEMA_VERSION = 1


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, strict=True)


class PdeBlock(_Block):
    kind: Literal["burgers", "lambda_omega", "gray_scott"] = "burgers"
    nu: float = 0.005
    diffusion: float = 0.1
    lambda_omega_form: Literal["literal", "literature"] = "literal"
    beta: float = 1.0
    eps1: float = 2e-5
    eps2: float = 1e-5
    b: float = 0.04
    d: float = 0.1
    advection: bool = True


class GridBlock(_Block):
    n: int = PydField(32, ge=4)
    x_min: float = 0.0
    x_max: float = 1.0


class FilterBlock(_Block):
    m: int = PydField(2, ge=1)
    horizon_factor: float = 3.015


class IcBlock(_Block):
    # "auto" picks the customary IC of the configured PDE
    kind: Literal["auto", "grf", "spots", "spiral"] = "auto"
    seed: int = 0


class ReferenceBlock(_Block):
    t_end: float = PydField(0.2, ge=0)
    dt_ref: float = PydField(0.002, gt=0)
    save_every: int = PydField(1, ge=1)


class TrainBlock(_Block):
    steps: int = 100
    dt: float = 0.002
    epochs: int = 20
    lr0: float = 1e-3
    lr_final: float = 1e-4
    bptt_window: int = 10
    w_out: float = 1.0
    w_lat: float = 1.0
    seed: int = 0
    clip_norm: float = 1.0
    checkpoint_every: int = 0
    output_gate_bias: bool = False
    final_linear: bool = False


class EvalBlock(_Block):
    metrics: list[Literal["rel_l2"]] = ["rel_l2"]
    extrapolation_steps: int = PydField(50, ge=0)


class RunConfig(_Block):
    version: Literal[1] = SCHEMA_VERSION
    pde: PdeBlock = PdeBlock()
    grid: GridBlock = GridBlock()
    filter: FilterBlock = FilterBlock()
    ic: IcBlock = IcBlock()
    reference: ReferenceBlock = ReferenceBlock()
    train: TrainBlock = TrainBlock()
    eval: EvalBlock = EvalBlock()

    def pde_spec(self) -> PdeSpec:
        return PdeSpec(**self.pde.model_dump())

    def make_grid(self) -> Grid:
        return make_grid(self.grid.n, self.grid.x_min, self.grid.x_max)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            pde=self.pde_spec(),
            n=self.grid.n,
            x_min=self.grid.x_min,
            x_max=self.grid.x_max,
            m=self.filter.m,
            horizon_factor=self.filter.horizon_factor,
            **self.train.model_dump(),
        )

    def resolved(self) -> dict:
        """Every field, including defaults, as plain JSON data."""
        return self.model_dump(mode="json")

    def dumps(self) -> str:
        return json.dumps(self.resolved(), indent=2, sort_keys=True) + "\n"


def _flatten_errors(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def parse_config(data: dict) -> RunConfig:
    """Validate a decoded JSON object; cross-field checks run here too."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    if "version" not in data:
        raise ConfigError("config is missing the 'version' field")
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"invalid config: {_flatten_errors(exc)}") from None
    # construct the domain objects so their invariants fire at load time
    cfg.pde_spec()
    cfg.make_grid()
    cfg.train_config()
    return cfg


def load_config(path) -> RunConfig:
    if path is None:
        return parse_config({"version": SCHEMA_VERSION})
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc.msg} at line {exc.lineno}") from None
    return parse_config(data)
