"""Classical RK4 reference solver over the PDDO spatial operators."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, NumericError, ShapeError
from .grid import Field, FieldSequence, Grid
from .pddo import DerivativeFilterSet
from .physics import PdeSpec, rhs_tensor

BLOWUP = 1e6
STABILITY_FACTOR = 0.2


@dataclass(frozen=True)
class SolveConfig:
    spec: PdeSpec
    grid: Grid
    t_end: float
    dt_ref: float
    save_every: int
    filters: DerivativeFilterSet

    def __post_init__(self):
        if not self.dt_ref > 0:
            raise ConfigError(f"dt_ref must be positive, got {self.dt_ref}")
        if int(self.save_every) != self.save_every or self.save_every < 1:
            raise ConfigError(f"save_every must be an integer >= 1, got {self.save_every}")
        if self.t_end < 0:
            raise ConfigError(f"t_end must be non-negative, got {self.t_end}")
        diff = self.spec.max_diffusivity()
        if diff > 0:
            bound = STABILITY_FACTOR * self.grid.dx**2 / diff
            if self.dt_ref > bound:
                raise ConfigError(
                    f"dt_ref {self.dt_ref} exceeds the explicit diffusion bound {bound:.4g} "
                    f"(0.2 dx^2 / {diff})"
                )
        if not np.isclose(self.grid.dx, self.filters.dx, rtol=1e-12, atol=0.0):
            raise ShapeError(f"grid spacing {self.grid.dx} does not match filter spacing {self.filters.dx}")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt_ref))

    @property
    def save_dt(self) -> float:
        return self.save_every * self.dt_ref


def rk4_advance(arr: np.ndarray, f: Callable[[np.ndarray], np.ndarray], dt: float) -> np.ndarray:
    """One classic four-stage step of ``du/dt = f(u)``."""
    k1 = f(arr)
    _check_stage(k1, 1)
    k2 = f(arr + 0.5 * dt * k1)
    _check_stage(k2, 2)
    k3 = f(arr + 0.5 * dt * k2)
    _check_stage(k3, 3)
    k4 = f(arr + dt * k3)
    _check_stage(k4, 4)
    return arr + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _check_stage(k: np.ndarray, stage: int) -> None:
    if not np.all(np.isfinite(k)):
        raise NumericError(f"non-finite RK4 stage {stage}")


def rhs_fn(spec: PdeSpec, filters: DerivativeFilterSet) -> Callable[[np.ndarray], np.ndarray]:
    return lambda a: rhs_tensor(spec, Tensor(a), filters).data


def rk4_step(field: Field, spec: PdeSpec, filters: DerivativeFilterSet, dt_ref: float) -> Field:
    if not np.isclose(field.grid.dx, filters.dx, rtol=1e-12, atol=0.0):
        raise ShapeError(f"grid spacing {field.grid.dx} does not match filter spacing {filters.dx}")
    return field.with_data(rk4_advance(field.data, rhs_fn(spec, filters), dt_ref), field.t + dt_ref)


def solve(cfg: SolveConfig, ic: Field) -> FieldSequence:
    """Integrate ``ic`` to ``cfg.t_end``, keeping every ``save_every``-th state."""
    if ic.grid != cfg.grid:
        raise ShapeError(f"initial condition grid {ic.grid} differs from solver grid {cfg.grid}")
    f = rhs_fn(cfg.spec, cfg.filters)
    u = ic.data.copy()
    t0 = ic.t
    saved = [u.copy()]
    for step in range(1, cfg.n_steps + 1):
        try:
            u = rk4_advance(u, f, cfg.dt_ref)
        except NumericError as exc:
            raise NumericError(f"{exc} at t={t0 + step * cfg.dt_ref:.6g}") from None
        peak = np.max(np.abs(u))
        if not math.isfinite(peak) or peak > BLOWUP:
            raise NumericError(f"solution blew up (|u|max={peak:.3g}) at t={t0 + step * cfg.dt_ref:.6g}")
        if step % cfg.save_every == 0:
            saved.append(u.copy())
    return FieldSequence.from_array(cfg.grid, np.stack(saved), cfg.save_dt, t0)
