"""Peridynamic differential operator (PDDO) derivative filters.

A point's family is the full ``(2m+1) x (2m+1)`` square of grid neighbours.
Offsets are ``xi = (xi1, xi2)`` with ``xi1`` along x (columns) and ``xi2``
along y (rows). Kernels are stored as ``(2m+1, 2m+1)`` arrays indexed
``[row, col]``, so ``kernel[a, b]`` multiplies the neighbour at offset
``((b - m) * dx, (a - m) * dx)``. Filters are applied as periodic
cross-correlation (no kernel flip)::

    out[i, j] = sum_{a, b} kernel[a, b] * f[i + a - m, j + b - m]

The six derivative orders are ``00, 10, 01, 20, 02, 11`` where the first digit
counts x-derivatives. Polynomial basis order is
``(1, xi1, xi2, xi1**2, xi2**2, xi1*xi2)``.
"""

from __future__ import annotations

import functools
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from .errors import ConfigError, FormatError, NumericError, ShapeError
from .grid import Field, FieldSequence

ORDERS = ("00", "10", "01", "20", "02", "11")
# (n1, n2) exponent pairs in basis order
EXPONENTS = ((0, 0), (1, 0), (0, 1), (2, 0), (0, 2), (1, 1))
MAX_CONDITION = 1e12
FILTER_MAGIC = b"PDFLT1"
_FILTER_HEADER = struct.Struct("<6sIdd")


def weight(xi_norm, delta: float):
    """Gaussian influence function ``exp(-4 |xi|^2 / delta^2)``."""
    if not delta > 0:
        raise ConfigError(f"horizon must be positive, got {delta}")
    return np.exp(-4.0 * np.square(xi_norm) / delta**2)


def basis(xi: np.ndarray) -> np.ndarray:
    """Evaluate the six monomials at offsets ``xi`` of shape ``(N, 2)``; returns ``(N, 6)``."""
    x1, x2 = xi[:, 0], xi[:, 1]
    return np.stack([np.ones_like(x1), x1, x2, x1 * x1, x2 * x2, x1 * x2], axis=1)


@dataclass(frozen=True)
class Family:
    m: int
    dx: float
    delta: float
    offsets: np.ndarray  # (N, 2), row-major over the kernel footprint
    areas: np.ndarray  # (N,)

    @property
    def size(self) -> int:
        return 2 * self.m + 1


def build_family(m: int, dx: float, horizon_factor: float) -> Family:
    if int(m) != m or m < 1:
        raise ConfigError(f"family half-width must be an integer >= 1, got {m}")
    if not dx > 0:
        raise ConfigError(f"grid spacing must be positive, got {dx}")
    if not horizon_factor > m:
        raise ConfigError(
            f"horizon_factor {horizon_factor} must exceed the half-width m={m} "
            "so the horizon covers every family member"
        )
    r = np.arange(-m, m + 1) * dx
    xi2, xi1 = np.meshgrid(r, r, indexing="ij")
    offsets = np.stack([xi1.ravel(), xi2.ravel()], axis=1)
    areas = np.full(len(offsets), dx * dx)
    return Family(int(m), float(dx), float(horizon_factor) * dx, offsets, areas)


@dataclass(frozen=True)
class MomentMatrix:
    A: np.ndarray
    b: np.ndarray


def rhs_matrix() -> np.ndarray:
    return np.diag([float(math.factorial(n1) * math.factorial(n2)) for n1, n2 in EXPONENTS])


def build_moment_matrix(family: Family) -> MomentMatrix:
    P = basis(family.offsets)
    w = weight(np.linalg.norm(family.offsets, axis=1), family.delta) * family.areas
    A = (P * w[:, None]).T @ P
    return MomentMatrix(A, rhs_matrix())


def solve_pd_coefficients(M: MomentMatrix, delta: float | None = None) -> np.ndarray:
    """Solve ``A a = b`` for the PD-function coefficients.

    Returns ``coeffs`` with ``coeffs[q, p]`` the weight of basis term ``q`` in
    the PD function of order ``p`` (the transpose of the usual printed layout).

    When ``delta`` is given the system is solved in offsets scaled by the
    horizon, which keeps the condition estimate independent of ``dx``.
    """
    degree = np.array([n1 + n2 for n1, n2 in EXPONENTS], dtype=float)
    D = delta**degree if delta is not None else np.ones(6)
    A_hat = M.A / np.outer(D, D)
    cond = np.linalg.cond(A_hat)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise NumericError(f"moment matrix is singular or ill-conditioned (condition estimate {cond:.3e})")
    lu = scipy.linalg.lu_factor(A_hat)
    coeffs = scipy.linalg.lu_solve(lu, M.b / D[:, None]) / D[:, None]
    return coeffs


@dataclass(frozen=True)
class DerivativeFilterSet:
    """Six PDDO kernels, already multiplied by the member areas."""

    kernels: dict
    dx: float
    m: int
    horizon_factor: float
    kind: str = "pddo"

    def __getitem__(self, order: str) -> np.ndarray:
        return self.kernels[order]

    @property
    def delta(self) -> float:
        return self.horizon_factor * self.dx


def _freeze(kernels: dict) -> dict:
    for k in kernels.values():
        k.setflags(write=False)
    return kernels


@functools.lru_cache(maxsize=64)
def build_filter_set(m: int = 2, dx: float = 1.0, horizon_factor: float = 3.015) -> DerivativeFilterSet:
    fam = build_family(m, dx, horizon_factor)
    coeffs = solve_pd_coefficients(build_moment_matrix(fam), fam.delta)
    P = basis(fam.offsets)
    w = weight(np.linalg.norm(fam.offsets, axis=1), fam.delta)
    g = (P * w[:, None]) @ coeffs  # (N, 6): PD function values per order
    vals = g * fam.areas[:, None]
    kernels = {o: vals[:, p].reshape(fam.size, fam.size).copy() for p, o in enumerate(ORDERS)}
    return DerivativeFilterSet(_freeze(kernels), float(dx), int(m), float(horizon_factor))


def fdm_filter_set(dx: float) -> DerivativeFilterSet:
    """Second-order central finite differences in the same 3x3 layout."""
    z = np.zeros((3, 3))
    k00 = z.copy()
    k00[1, 1] = 1.0
    k10 = z.copy()
    k10[1, 0], k10[1, 2] = -0.5 / dx, 0.5 / dx
    k20 = z.copy()
    k20[1] = np.array([1.0, -2.0, 1.0]) / dx**2
    k11 = np.array([[1.0, 0.0, -1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 1.0]]) / (4 * dx**2)
    kernels = {"00": k00, "10": k10, "01": k10.T.copy(), "20": k20, "02": k20.T.copy(), "11": k11}
    return DerivativeFilterSet(_freeze(kernels), float(dx), 1, 1.0, kind="fdm")


def orthogonality_table(filters: DerivativeFilterSet) -> np.ndarray:
    """``T[n, p] = (1/(n1! n2!)) sum_j xi^n kernel^p(xi_j)``; ideally the identity."""
    m, dx = filters.m, filters.dx
    r = np.arange(-m, m + 1) * dx
    xi2, xi1 = np.meshgrid(r, r, indexing="ij")
    P = basis(np.stack([xi1.ravel(), xi2.ravel()], axis=1))
    K = np.stack([filters[o].ravel() for o in ORDERS], axis=1)
    return (P.T @ K) / np.diag(rhs_matrix())[:, None]


def orthogonality_defect(filters: DerivativeFilterSet) -> float:
    return float(np.max(np.abs(orthogonality_table(filters) - np.eye(6))))


def periodic_correlate(arr: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Channelwise periodic cross-correlation of ``(H, W, C)`` data with a square kernel."""
    k = kernel.shape[0]
    m = k // 2
    H, W = arr.shape[:2]
    padded = np.pad(arr, ((m, m), (m, m), (0, 0)), mode="wrap")
    out = np.zeros_like(arr, dtype=np.float64)
    for a in range(k):
        for b in range(k):
            c = kernel[a, b]
            if c != 0.0:
                out += c * padded[a : a + H, b : b + W]
    return out


def periodic_correlate_adjoint(grad: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`periodic_correlate`: correlation with the point-reflected kernel."""
    return periodic_correlate(grad, kernel[::-1, ::-1])


def _check_dx(dx: float, filters: DerivativeFilterSet) -> None:
    if not math.isclose(dx, filters.dx, rel_tol=1e-12, abs_tol=0.0):
        raise ShapeError(f"grid spacing {dx} does not match filter spacing {filters.dx}")


def apply_derivative(field: Field, filters: DerivativeFilterSet, order: str) -> Field:
    if order not in filters.kernels:
        raise ConfigError(f"unknown derivative order {order!r}; expected one of {ORDERS}")
    _check_dx(field.grid.dx, filters)
    return field.with_data(periodic_correlate(field.data, filters[order]))


def temporal_derivative(seq: FieldSequence) -> FieldSequence:
    """Central difference ``(u_{k+2} - u_k) / (2 dt)``, stamped at ``t_{k+1}``."""
    if len(seq) < 3:
        raise ShapeError(f"temporal derivative needs at least 3 snapshots, got {len(seq)}")
    arr = seq.stack()
    rate = (arr[2:] - arr[:-2]) / (2.0 * seq.dt)
    return FieldSequence(
        tuple(seq[k + 1].with_data(rate[k]) for k in range(len(rate))),
        seq.dt,
    )


def write_filters(filters: DerivativeFilterSet, path) -> None:
    parts = [_FILTER_HEADER.pack(FILTER_MAGIC, filters.m, filters.dx, filters.horizon_factor)]
    parts += [np.ascontiguousarray(filters[o], dtype="<f8").tobytes() for o in ORDERS]
    Path(path).write_bytes(b"".join(parts))


def read_filters(path) -> DerivativeFilterSet:
    raw = Path(path).read_bytes()
    if len(raw) < _FILTER_HEADER.size:
        raise FormatError(f"truncated header: {len(raw)} of {_FILTER_HEADER.size} bytes", len(raw))
    magic, m, dx, hf = _FILTER_HEADER.unpack_from(raw, 0)
    if magic != FILTER_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if m < 1 or m > 1000:
        raise FormatError(f"dimension mismatch: implausible half-width m={m}", 6)
    k = 2 * m + 1
    expected = 6 * k * k * 8
    payload = raw[_FILTER_HEADER.size :]
    if len(payload) != expected:
        off = _FILTER_HEADER.size + min(len(payload), expected)
        raise FormatError(f"payload has {len(payload)} bytes, expected {expected}", off)
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(6, k, k)
    kernels = {o: flat[p].copy() for p, o in enumerate(ORDERS)}
    return DerivativeFilterSet(_freeze(kernels), float(dx), int(m), float(hf))
