"""PDE right-hand sides, physics residuals and the Burgers initial-condition sampler.

Every PDE is written as ``u_t = F(u)``; the residual of a sequence is
``R_k = (u_{k+2} - u_k) / (2 dt) - F(u_{k+1})``. A single operator
implementation (:func:`rhs_pair`) acts on autodiff tensors holding any number
of ``(u, v)`` channel pairs, so decoded fields (one pair) and latent codes
(one pair per latent channel) share it.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .grid import Field, FieldSequence, Grid
from .pddo import DerivativeFilterSet

KINDS = ("burgers", "lambda_omega", "gray_scott")


@dataclass(frozen=True)
class PdeSpec:
    """PDE identity and coefficients.

    ``lambda_omega_form`` is ``"literal"`` (``r = u^2 + v^2``, ``lambda = 1 - r^2``,
    ``omega = -r^2``) or ``"literature"`` (``lambda = 1 - A^2``,
    ``omega = -beta A^2`` with ``A^2 = u^2 + v^2``). ``advection=False`` drops
    the Burgers transport terms, leaving pure diffusion.
    """

    kind: str = "burgers"
    nu: float = 0.005
    diffusion: float = 0.1
    lambda_omega_form: str = "literal"
    beta: float = 1.0
    eps1: float = 2e-5
    eps2: float = 1e-5
    b: float = 0.04
    d: float = 0.1
    advection: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown PDE kind {self.kind!r}; expected one of {KINDS}")
        if self.lambda_omega_form not in ("literal", "literature"):
            raise ConfigError(f"unknown lambda-omega form {self.lambda_omega_form!r}")
        for name in ("nu", "diffusion", "beta", "eps1", "eps2", "b", "d"):
            if not np.isfinite(getattr(self, name)):
                raise ConfigError(f"PDE coefficient {name} must be finite")
        for name in ("nu", "diffusion", "eps1", "eps2"):
            if getattr(self, name) < 0:
                raise ConfigError(f"diffusivity {name} must be non-negative")

    def max_diffusivity(self) -> float:
        return {
            "burgers": self.nu,
            "lambda_omega": self.diffusion,
            "gray_scott": max(self.eps1, self.eps2),
        }[self.kind]

    def to_dict(self) -> dict:
        return asdict(self)


def _laplacian_kernel(filters: DerivativeFilterSet) -> np.ndarray:
    return filters["20"] + filters["02"]


def rhs_pair(spec: PdeSpec, u: Tensor, v: Tensor, filters: DerivativeFilterSet) -> tuple[Tensor, Tensor]:
    """``F(u, v)`` channelwise for tensors of equal shape ``(H, W, K)``."""
    if u.shape != v.shape:
        raise ShapeError(f"u and v must share a shape, got {u.shape} and {v.shape}")
    lap = _laplacian_kernel(filters)
    if spec.kind == "burgers":
        du = ad.scale(ad.periodic_filter(u, lap), spec.nu)
        dv = ad.scale(ad.periodic_filter(v, lap), spec.nu)
        if spec.advection:
            ux, uy = ad.periodic_filter(u, filters["10"]), ad.periodic_filter(u, filters["01"])
            vx, vy = ad.periodic_filter(v, filters["10"]), ad.periodic_filter(v, filters["01"])
            du = du - u * ux - v * uy
            dv = dv - u * vx - v * vy
        return du, dv
    if spec.kind == "lambda_omega":
        a2 = ad.square(u) + ad.square(v)
        if spec.lambda_omega_form == "literal":
            r2 = ad.square(a2)
            lam, omega = 1.0 - r2, ad.scale(r2, -1.0)
        else:
            lam, omega = 1.0 - a2, ad.scale(a2, -spec.beta)
        du = ad.scale(ad.periodic_filter(u, lap), spec.diffusion) + lam * u - omega * v
        dv = ad.scale(ad.periodic_filter(v, lap), spec.diffusion) + omega * u + lam * v
        return du, dv
    if spec.kind == "gray_scott":
        uv2 = u * ad.square(v)
        du = ad.scale(ad.periodic_filter(u, lap), spec.eps1) + ad.scale(1.0 - u, spec.b) - uv2
        dv = ad.scale(ad.periodic_filter(v, lap), spec.eps2) - ad.scale(v, spec.d) + uv2
        return du, dv
    raise ConfigError(f"unknown PDE kind {spec.kind!r}")


def rhs_tensor(spec: PdeSpec, x: Tensor, filters: DerivativeFilterSet) -> Tensor:
    """``F`` for a 2-channel ``(H, W, 2)`` state tensor."""
    if x.data.ndim != 3 or x.shape[2] != 2:
        raise ShapeError(f"expected a (H, W, 2) state, got {x.shape}")
    du, dv = rhs_pair(spec, ad.channels(x, 0, 1), ad.channels(x, 1, 2), filters)
    return ad.concat([du, dv])


def _check_spacing(dx: float, filters: DerivativeFilterSet) -> None:
    if not np.isclose(dx, filters.dx, rtol=1e-12, atol=0.0):
        raise ShapeError(f"grid spacing {dx} does not match filter spacing {filters.dx}")


def pde_rhs(spec: PdeSpec, field: Field, filters: DerivativeFilterSet) -> Field:
    """The time derivative ``-N[u]`` the PDE implies at ``field``."""
    if field.channels != 2:
        raise ShapeError(f"PDE state needs 2 channels, got {field.channels}")
    _check_spacing(field.grid.dx, filters)
    return field.with_data(rhs_tensor(spec, Tensor(field.data), filters).data)


def residual_tensors(spec: PdeSpec, states, dt: float, filters: DerivativeFilterSet) -> list[Tensor]:
    """Residuals at interior steps of a list of 2-channel state tensors."""
    if len(states) < 3:
        raise ShapeError(f"residuals need at least 3 snapshots, got {len(states)}")
    inv = 1.0 / (2.0 * dt)
    return [
        ad.scale(states[k + 2] - states[k], inv) - rhs_tensor(spec, states[k + 1], filters)
        for k in range(len(states) - 2)
    ]


def latent_residual_tensors(spec: PdeSpec, lat_u, lat_v, dt: float, filters: DerivativeFilterSet) -> list[Tensor]:
    """Residuals where channel ``c`` of ``lat_u``/``lat_v`` forms one ``(u, v)`` pair."""
    if len(lat_u) != len(lat_v):
        raise ShapeError(f"latent sequences differ in length: {len(lat_u)} vs {len(lat_v)}")
    if len(lat_u) < 3:
        raise ShapeError(f"latent residuals need at least 3 snapshots, got {len(lat_u)}")
    inv = 1.0 / (2.0 * dt)
    out = []
    for k in range(len(lat_u) - 2):
        fu, fv = rhs_pair(spec, lat_u[k + 1], lat_v[k + 1], filters)
        ru = ad.scale(lat_u[k + 2] - lat_u[k], inv) - fu
        rv = ad.scale(lat_v[k + 2] - lat_v[k], inv) - fv
        out.append(ad.concat([ru, rv]))
    return out


def output_residual(spec: PdeSpec, seq: FieldSequence, filters: DerivativeFilterSet) -> list[Field]:
    """Residual fields at interior timesteps, stamped at the central snapshot."""
    _check_spacing(seq.grid.dx, filters)
    res = residual_tensors(spec, [Tensor(f.data) for f in seq.fields], seq.dt, filters)
    return [seq[k + 1].with_data(r.data) for k, r in enumerate(res)]


def latent_residual(spec: PdeSpec, latent_u_seq, latent_v_seq, latent_grid, filters_latent: DerivativeFilterSet, dt: float) -> list[np.ndarray]:
    """Latent-space residuals as ``(h, w, 2K)`` arrays: ``K`` u-residual channels then ``K`` v-residual channels.

    ``latent_grid`` is a :class:`Grid` or the latent spacing itself (latent
    grids can be smaller than the 4-point minimum of :class:`Grid`).
    """
    dx = latent_grid.dx if isinstance(latent_grid, Grid) else float(latent_grid)
    _check_spacing(dx, filters_latent)
    lu = [ad.as_tensor(np.asarray(getattr(t, "data", t), dtype=float)) for t in latent_u_seq]
    lv = [ad.as_tensor(np.asarray(getattr(t, "data", t), dtype=float)) for t in latent_v_seq]
    return [r.data for r in latent_residual_tensors(spec, lu, lv, dt, filters_latent)]


def mse(residuals) -> Tensor:
    """Mean square over every entry of a list of tensors."""
    residuals = [ad.as_tensor(r) for r in residuals]
    if not residuals:
        raise ShapeError("mean square needs a non-empty residual list")
    count = sum(r.data.size for r in residuals)
    total = ad.sum_all(ad.square(residuals[0]))
    for r in residuals[1:]:
        total = total + ad.sum_all(ad.square(r))
    return ad.scale(total, 1.0 / count)


def total_loss(output_res, latent_res, weights=None) -> Tensor:
    """``w_out * MSE(output) + w_lat * MSE(latent)``; ``weights`` maps ``w_out``/``w_lat``."""
    weights = {"w_out": 1.0, "w_lat": 1.0, **(weights or {})}
    out_res = [r.data if isinstance(r, Field) else r for r in output_res]
    lat_res = [r.data if isinstance(r, Field) else r for r in latent_res]
    if not out_res or not lat_res:
        raise ShapeError("total loss needs non-empty output and latent residual lists")
    return ad.scale(mse(out_res), weights["w_out"]) + ad.scale(mse(lat_res), weights["w_lat"])


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def grf_channel(rng: np.random.Generator, grid: Grid) -> np.ndarray:
    """One zero-mean draw with spectrum ``25 w(k) / (|2 pi k|^2 + 25)``.

    The complex white noise ``w`` has i.i.d. standard normal real and imaginary
    parts, symmetrised so ``w(-k) = conj(w(k))``; the inverse transform is the
    unitary (``norm="ortho"``) DFT. The mean mode is zeroed.
    """
    n = grid.n
    z = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    z_neg = np.roll(z[::-1, ::-1], 1, axis=(0, 1))  # z at -k
    w = (z + np.conj(z_neg)) / np.sqrt(2.0)
    kappa = 2.0 * np.pi * np.fft.fftfreq(n, d=grid.dx)
    k2 = kappa[:, None] ** 2 + kappa[None, :] ** 2
    spec = 25.0 * w / (k2 + 25.0)
    spec[0, 0] = 0.0
    u = np.fft.ifft2(spec, norm="ortho")
    assert np.max(np.abs(u.imag)) < 1e-12
    return u.real


def sample_burgers_ic(seed: int, grid: Grid) -> Field:
    """Gaussian random field initial condition with covariance ``625 (-Lap + 25 I)^-2``."""
    if not _is_power_of_two(grid.n):
        raise ConfigError(f"spectral sampler needs a power-of-two grid, got n={grid.n}")
    rng = np.random.default_rng(seed)
    data = np.stack([grf_channel(rng, grid), grf_channel(rng, grid)], axis=-1)
    return Field(grid, data, 0.0)


def gray_scott_ic(grid: Grid, seed: int = 0, spots: int = 3, radius: float | None = None) -> Field:
    """Homogeneous state ``(1, 0)`` perturbed by a few seeded square patches of ``(0.5, 0.25)``."""
    rng = np.random.default_rng(seed)
    u = np.ones((grid.n, grid.n))
    v = np.zeros((grid.n, grid.n))
    half = max(1, int(round((radius or 0.05 * grid.length) / grid.dx)))
    for _ in range(spots):
        i, j = rng.integers(0, grid.n, size=2)
        rows = grid.wrap(np.arange(i - half, i + half + 1))
        cols = grid.wrap(np.arange(j - half, j + half + 1))
        u[np.ix_(rows, cols)] = 0.5
        v[np.ix_(rows, cols)] = 0.25
    return Field(grid, np.stack([u, v], axis=-1), 0.0)


def lambda_omega_ic(grid: Grid) -> Field:
    """Single-armed spiral ``A = tanh(r) cos/sin(theta - r)`` centred in the domain."""
    X, Y = grid.mesh()
    cx = cy = grid.x_min + 0.5 * grid.length
    r = np.hypot(X - cx, Y - cy)
    th = np.arctan2(Y - cy, X - cx)
    amp = np.tanh(r)
    return Field(grid, np.stack([amp * np.cos(th - r), amp * np.sin(th - r)], axis=-1), 0.0)
