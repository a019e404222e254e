"""Encoder -> periodic ConvLSTM -> decoder, used as a residual time integrator.

Shapes for an ``n x n`` grid (``n`` divisible by 8), n = 128 in brackets::

    state     n    x n    x 2    [128x128x2]
    enc.0     n/2  x n/2  x 8    [64x64x8]     conv 4x4 stride 2, tanh
    enc.1     n/4  x n/4  x 32   [32x32x32]    conv 4x4 stride 2, tanh
    enc.2     n/8  x n/8  x 64   [16x16x64]    conv 4x4 stride 2, tanh
    lstm      n/8  x n/8  x 64                 hidden and cell state
    dec.0     n/4  x n/4  x 16   [32x32x16]    conv 3x3 -> 64, tanh, shuffle x2
    dec.1     n/2  x n/2  x 8    [64x64x8]     conv 3x3 -> 32, tanh, shuffle x2
    dec.2     n    x n    x 2    [128x128x2]   conv 3x3 -> 8, tanh, shuffle x2

Every convolution uses one cell of periodic padding. The encoder output splits
into a u-latent (channels 0..31) and a v-latent (channels 32..63); their
concatenation is the ConvLSTM input. The decoded rate advances the state by
forward Euler: ``u_next = u_prev + dt * rate``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, NumericError, ShapeError
from .grid import Field, FieldSequence, Grid

LATENT = 64
HIDDEN = 64
ENCODER = ((2, 8), (8, 32), (32, LATENT))  # (in, out) channels, 4x4 stride 2
DECODER = ((HIDDEN, 64), (16, 32), (8, 8))  # (in, out) channels, 3x3 stride 1, then shuffle x2
GATES = ("i", "f", "c", "o")
ALPHA_MIN_INIT = 0.1


@dataclass
class ModelParams:
    """All trainable tensors by name, plus the integration step and grid side."""

    tensors: dict[str, Tensor]
    dt: float
    n: int
    output_gate_bias: bool = False
    final_linear: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.dt) and self.dt >= 0):
            raise ConfigError(f"integration step dt must be finite and non-negative, got {self.dt}")
        _check_side(self.n)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def trainable(self) -> list[Tensor]:
        return list(self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        tensors = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k) for k, v in self.tensors.items()}
        return replace(self, tensors=tensors)

    @property
    def latent_side(self) -> int:
        return self.n // 8


def _check_side(n: int) -> None:
    if n < 8 or n % 8:
        raise ConfigError(f"grid side must be a positive multiple of 8, got {n}")


def glorot_bound(shape: tuple) -> float:
    k1, k2, cin, cout = shape
    return math.sqrt(6.0 / (k1 * k2 * cin + k1 * k2 * cout))


def param_shapes(n: int, output_gate_bias: bool = False) -> dict[str, tuple]:
    s = n // 8
    shapes: dict[str, tuple] = {}
    for i, (cin, cout) in enumerate(ENCODER):
        shapes[f"enc.{i}.w"] = (4, 4, cin, cout)
        shapes[f"enc.{i}.b"] = (cout,)
    for g in GATES:
        shapes[f"lstm.W_x{g}"] = (3, 3, LATENT, HIDDEN)
        shapes[f"lstm.W_h{g}"] = (3, 3, HIDDEN, HIDDEN)
    shapes["lstm.W_ci"] = (s, s, HIDDEN)
    shapes["lstm.W_cf"] = (s, s, HIDDEN)
    for g in ("i", "f", "c") + (("o",) if output_gate_bias else ()):
        shapes[f"lstm.b_{g}"] = (HIDDEN,)
    shapes["lstm.alpha"] = ()
    for i, (cin, cout) in enumerate(DECODER):
        shapes[f"dec.{i}.w"] = (3, 3, cin, cout)
        shapes[f"dec.{i}.b"] = (cout,)
    return shapes


def init_params(seed: int, n: int, dt: float = 0.002, output_gate_bias: bool = False, final_linear: bool = False) -> ModelParams:
    """Glorot-uniform conv kernels, zero biases and peepholes, ``alpha ~ U(-2 pi, 2 pi)`` with ``|alpha| >= 0.1``."""
    _check_side(n)
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(n, output_gate_bias).items():
        if name == "lstm.alpha":
            alpha = 0.0
            while abs(alpha) < ALPHA_MIN_INIT:
                alpha = rng.uniform(-2 * np.pi, 2 * np.pi)
            data = np.asarray(alpha)
        elif len(shape) == 4:
            bound = glorot_bound(shape)
            data = rng.uniform(-bound, bound, size=shape)
        else:
            data = np.zeros(shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return ModelParams(tensors, float(dt), int(n), output_gate_bias, final_linear)


def _as_state(u) -> Tensor:
    if isinstance(u, Field):
        if u.channels != 2:
            raise ShapeError(f"network state needs 2 channels, got {u.channels}")
        return Tensor(u.data)
    return ad.as_tensor(u)


def _expect(t: Tensor, shape: tuple, stage: str) -> None:
    if t.shape != shape:
        raise ShapeError(f"{stage}: expected shape {shape}, got {t.shape}")


def encode(field, params: ModelParams) -> tuple[Tensor, Tensor]:
    x = _as_state(field)
    n = params.n
    _expect(x, (n, n, 2), "encoder input")
    side = n
    for i, (_, cout) in enumerate(ENCODER):
        x = ad.tanh(ad.conv2d_periodic(x, params[f"enc.{i}.w"], params[f"enc.{i}.b"], stride=2, pad=1))
        side //= 2
        _expect(x, (side, side, cout), f"enc.{i}")
    half = LATENT // 2
    return ad.channels(x, 0, half), ad.channels(x, half, LATENT)


class LstmWeights(NamedTuple):
    kernel: Tensor
    bias: Tensor


def lstm_weights(params: ModelParams) -> LstmWeights:
    """Fuse the eight gate kernels into one ``(3, 3, LATENT + HIDDEN, 4 HIDDEN)`` kernel.

    Convolving ``concat(x, h)`` with the fused kernel equals the sum
    ``W_x* x + W_h* h`` for every gate, in gate order i, f, c, o.
    """
    per_gate = [ad.concat([params[f"lstm.W_x{g}"], params[f"lstm.W_h{g}"]], axis=2) for g in GATES]
    kernel = ad.concat(per_gate, axis=3)
    hidden = params["lstm.W_xi"].shape[3]
    b_o = params["lstm.b_o"] if params.output_gate_bias else Tensor(np.zeros(hidden))
    bias = ad.concat([params["lstm.b_i"], params["lstm.b_f"], params["lstm.b_c"], b_o])
    return LstmWeights(kernel, bias)


def convlstm_step(x: Tensor, h_prev: Tensor, c_prev: Tensor, params: ModelParams, weights: LstmWeights | None = None, gates: dict | None = None) -> tuple[Tensor, Tensor]:
    """One periodic ConvLSTM update.

    ``gates`` is a test hook: it maps gate names ``"i"``, ``"f"``, ``"o"`` to
    tensors that replace the computed gate activations.
    """
    x, h_prev, c_prev = ad.as_tensor(x), ad.as_tensor(h_prev), ad.as_tensor(c_prev)
    s = params.latent_side
    _, _, cin, hidden = params["lstm.W_xi"].shape
    _expect(x, (s, s, cin), "lstm input")
    _expect(h_prev, (s, s, hidden), "lstm hidden state")
    _expect(c_prev, (s, s, hidden), "lstm cell state")
    w = weights or lstm_weights(params)
    z = ad.conv2d_periodic(ad.concat([x, h_prev]), w.kernel, w.bias, stride=1, pad=1)
    zi, zf, zc, zo = (ad.channels(z, k * hidden, (k + 1) * hidden) for k in range(4))
    i = ad.sigmoid(zi + params["lstm.W_ci"] * c_prev)
    f = ad.sigmoid(zf + params["lstm.W_cf"] * c_prev)
    c_tilde = ad.periodic_xi(zc, params["lstm.alpha"])
    o = ad.sigmoid(zo)
    if gates:
        i, f, o = (ad.as_tensor(gates[k]) if k in gates else g for k, g in (("i", i), ("f", f), ("o", o)))
    c = f * c_prev + i * c_tilde
    h = o * ad.tanh(c)
    return h, c


def decode(h: Tensor, params: ModelParams) -> Tensor:
    """Map the hidden state to a 2-channel rate field (field units per second)."""
    x = ad.as_tensor(h)
    s = params.latent_side
    _expect(x, (s, s, HIDDEN), "decoder input")
    last = len(DECODER) - 1
    for i, (_, cout) in enumerate(DECODER):
        x = ad.conv2d_periodic(x, params[f"dec.{i}.w"], params[f"dec.{i}.b"], stride=1, pad=1)
        if not (i == last and params.final_linear):
            x = ad.tanh(x)
        x = ad.pixel_shuffle(x, 2)
        s *= 2
        _expect(x, (s, s, cout // 4), f"dec.{i}")
    return x


def zero_state(params: ModelParams) -> tuple[Tensor, Tensor]:
    s, hidden = params.latent_side, params["lstm.W_xi"].shape[3]
    return Tensor(np.zeros((s, s, hidden))), Tensor(np.zeros((s, s, hidden)))


class StepOutput(NamedTuple):
    u: Tensor
    h: Tensor
    c: Tensor
    latent_u: Tensor
    latent_v: Tensor


def step(u_prev, h_prev, c_prev, params: ModelParams, weights: LstmWeights | None = None) -> StepOutput:
    """Advance the state by one ``dt``; also returns the encoder latents of ``u_prev``."""
    u_prev = _as_state(u_prev)
    lat_u, lat_v = encode(u_prev, params)
    h, c = convlstm_step(ad.concat([lat_u, lat_v]), h_prev, c_prev, params, weights)
    rate = decode(h, params)
    u_next = u_prev + ad.scale(rate, params.dt)
    return StepOutput(u_next, h, c, lat_u, lat_v)


class Rollout(NamedTuple):
    states: list  # steps + 1 tensors, initial state first
    latent_u: list  # steps tensors
    latent_v: list
    h: Tensor
    c: Tensor


def rollout_tensors(u0, steps: int, params: ModelParams, h0=None, c0=None) -> Rollout:
    """Autoregressive rollout on tensors; recorded on the tape when params are tracked."""
    if steps < 0:
        raise ConfigError(f"rollout needs steps >= 0, got {steps}")
    h, c = (h0, c0) if h0 is not None else zero_state(params)
    weights = lstm_weights(params)
    states, lat_u, lat_v = [_as_state(u0)], [], []
    for k in range(steps):
        out = step(states[-1], h, c, params, weights)
        if not np.all(np.isfinite(out.u.data)):
            raise NumericError(f"non-finite state at rollout step {k + 1}")
        states.append(out.u)
        lat_u.append(out.latent_u)
        lat_v.append(out.latent_v)
        h, c = out.h, out.c
    return Rollout(states, lat_u, lat_v, h, c)


def rollout(ic: Field, steps: int, params: ModelParams) -> tuple[FieldSequence, list[np.ndarray], list[np.ndarray]]:
    """Forward-only rollout from ``h0 = c0 = 0``.

    Returns the state sequence (``steps + 1`` fields, ``ic`` first) and the
    per-step u/v encoder latents (``steps`` arrays each).
    """
    if steps < 1:
        raise ConfigError(f"rollout needs steps >= 1, got {steps}")
    frozen = _frozen(params)
    r = rollout_tensors(Tensor(ic.data), steps, frozen)
    arr = np.stack([s.data for s in r.states])
    seq = FieldSequence.from_array(ic.grid, arr, params.dt, ic.t)
    return seq, [t.data for t in r.latent_u], [t.data for t in r.latent_v]


def predict(ic: Field, steps: int, params: ModelParams) -> FieldSequence:
    """Like :func:`rollout` but allows ``steps = 0`` (returns only ``ic``)."""
    if steps == 0:
        return FieldSequence((ic,), params.dt)
    return rollout(ic, steps, params)[0]


def _frozen(params: ModelParams) -> ModelParams:
    tensors = {k: Tensor(v.data, name=k) for k, v in params.tensors.items()}
    return replace(params, tensors=tensors)


def latent_spacing(grid: Grid) -> float:
    """Latent grid spacing ``L / (n / 8)``."""
    return grid.length / (grid.n // 8)
