"""Unsupervised physics-residual training with truncated backpropagation through time."""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, FormatError, NumericError
from .grid import Field, make_grid
from .network import ModelParams, init_params, latent_spacing, param_shapes, rollout_tensors, zero_state
from .pddo import build_filter_set
from .physics import PdeSpec, latent_residual_tensors, mse, residual_tensors

log = logging.getLogger(__name__)

CKPT_MAGIC = b"PDCKP1"
HISTORY_HEADER = ("epoch", "loss_output", "loss_latent", "loss_total", "lr")


@dataclass(frozen=True)
class TrainConfig:
    pde: PdeSpec = field(default_factory=PdeSpec)
    n: int = 32
    x_min: float = 0.0
    x_max: float = 1.0
    steps: int = 100
    dt: float = 0.002
    epochs: int = 100
    lr0: float = 1e-3
    lr_final: float = 1e-4
    bptt_window: int = 10
    w_out: float = 1.0
    w_lat: float = 1.0
    seed: int = 0
    m: int = 2
    horizon_factor: float = 3.015
    clip_norm: float = 1.0
    checkpoint_every: int = 0
    output_gate_bias: bool = False
    final_linear: bool = False

    def __post_init__(self):
        if self.steps < 3:
            raise ConfigError(f"rollout needs at least 3 steps, got {self.steps}")
        if not 3 <= self.bptt_window <= self.steps:
            raise ConfigError(f"bptt_window must lie in [3, steps={self.steps}], got {self.bptt_window}")
        if not self.lr0 >= self.lr_final > 0:
            raise ConfigError(f"need lr0 >= lr_final > 0, got {self.lr0}, {self.lr_final}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if not self.dt > 0:
            raise ConfigError(f"dt must be positive, got {self.dt}")
        if self.w_out < 0 or self.w_lat < 0:
            raise ConfigError("loss weights must be non-negative")

    @property
    def grid(self):
        return make_grid(self.n, self.x_min, self.x_max)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Exponential decay from ``lr0`` at epoch 0 to ``lr_final`` at the last epoch."""
    if cfg.epochs <= 1:
        return cfg.lr0
    frac = min(epoch, cfg.epochs - 1) / (cfg.epochs - 1)
    return cfg.lr0 * (cfg.lr_final / cfg.lr0) ** frac


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_update(params: dict, grads: dict, state: AdamState, lr: float) -> tuple[dict, AdamState]:
    """Bias-corrected Adam on dicts of arrays; inputs are left untouched."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_p[name] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(new_m, new_v, t, b1, b2, state.eps)


def clip_by_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        grads = {k: g * factor for k, g in grads.items()}
    return grads, norm


@dataclass
class LossHistory:
    rows: list = field(default_factory=list)

    def append(self, epoch: int, out: float, lat: float, total: float, lr: float) -> None:
        self.rows.append((epoch, out, lat, total, lr))

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[HISTORY_HEADER.index(name)] for r in self.rows])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_HEADER)
            for epoch, *vals in self.rows:
                w.writerow([epoch] + [repr(float(v)) for v in vals])

    @classmethod
    def read_csv(cls, path) -> "LossHistory":
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            header = tuple(next(r))
            if header != HISTORY_HEADER:
                raise FormatError(f"unexpected loss history header {header}")
            return cls([(int(row[0]), *map(float, row[1:])) for row in r])


class WindowLoss:
    """Residual losses of one BPTT window, as autodiff scalars."""

    def __init__(self, output: Tensor, latent: Tensor, total: Tensor):
        self.output, self.latent, self.total = output, latent, total


def window_loss(cfg: TrainConfig, params: ModelParams, states, lat_u, lat_v, filters, lat_filters) -> WindowLoss:
    out = mse(residual_tensors(cfg.pde, states, cfg.dt, filters))
    lat = mse(latent_residual_tensors(cfg.pde, lat_u, lat_v, cfg.dt, lat_filters))
    total = ad.scale(out, cfg.w_out) + ad.scale(lat, cfg.w_lat)
    return WindowLoss(out, lat, total)


class Trainer:
    """Holds the model, optimizer state and filters for one training run."""

    def __init__(self, cfg: TrainConfig, params: ModelParams | None = None):
        self.cfg = cfg
        grid = cfg.grid
        self.params = params or init_params(
            cfg.seed, cfg.n, cfg.dt, cfg.output_gate_bias, cfg.final_linear
        )
        self.filters = build_filter_set(cfg.m, grid.dx, cfg.horizon_factor)
        self.lat_filters = build_filter_set(cfg.m, latent_spacing(grid), cfg.horizon_factor)
        self.adam = AdamState.zeros({k: t.data for k, t in self.params.tensors.items()})
        self.history = LossHistory()

    def windows(self):
        T, W = self.cfg.steps, self.cfg.bptt_window
        return [(s, min(W, T - s)) for s in range(0, T, W)]

    def epoch_losses(self, ic: Field, lr: float | None, on_window=None) -> tuple[float, float, float]:
        """Run one epoch; update parameters after each window unless ``lr`` is None.

        Window ``k`` is seeded with detached copies of the previous window's
        final state, ConvLSTM state and the last two snapshots/latents, so every
        interior step gets a residual while gradients stop at window edges.
        """
        cfg = self.cfg
        u = Tensor(ic.data)
        h, c = zero_state(self.params)
        prev_states: list[Tensor] = []
        prev_lu: list[Tensor] = []
        prev_lv: list[Tensor] = []
        sums = np.zeros(3)
        windows = self.windows()
        for start, steps in windows:
            self.params.zero_grad()
            r = rollout_tensors(u, steps, self.params, h, c)
            states = prev_states + r.states
            lat_u, lat_v = prev_lu + r.latent_u, prev_lv + r.latent_v
            wl = window_loss(cfg, self.params, states, lat_u, lat_v, self.filters, self.lat_filters)
            vals = np.array([wl.output.item(), wl.latent.item(), wl.total.item()])
            if not np.all(np.isfinite(vals)):
                raise NumericError(f"non-finite loss in window starting at step {start}")
            sums += vals
            if lr is not None:
                ad.backward(wl.total)
                self._apply_gradients(lr)
            if on_window is not None:
                on_window(start, wl)
            u, h, c = r.states[-1].detach(), r.h.detach(), r.c.detach()
            prev_states = [r.states[-2].detach()]
            prev_lu = [t.detach() for t in lat_u[-2:]]
            prev_lv = [t.detach() for t in lat_v[-2:]]
        return tuple(sums / len(windows))

    def _apply_gradients(self, lr: float) -> None:
        tensors = self.params.tensors
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name!r}")
        grads, _ = clip_by_global_norm(grads, self.cfg.clip_norm)
        new, self.adam = adam_update({k: t.data for k, t in tensors.items()}, grads, self.adam, lr)
        for k, t in tensors.items():
            t.data = new[k]
            t.grad = None

    def fit(self, ic: Field, checkpoint_path=None, progress=None) -> tuple[ModelParams, LossHistory]:
        cfg = self.cfg
        if ic.grid != cfg.grid:
            raise ConfigError(f"initial condition grid {ic.grid} differs from configured grid {cfg.grid}")
        last_good = self.params.copy()
        for epoch in range(cfg.epochs):
            lr = lr_schedule(epoch, cfg)
            try:
                out, lat, total = self.epoch_losses(ic, lr)
            except NumericError as exc:
                exc.last_good = last_good
                if checkpoint_path is not None:
                    save_checkpoint(last_good, checkpoint_path)
                raise
            self.history.append(epoch, out, lat, total, lr)
            last_good = self.params.copy()
            if progress is not None:
                progress(epoch, out, lat, total, lr)
            log.debug("epoch %d: output %.4e latent %.4e total %.4e lr %.3e", epoch, out, lat, total, lr)
            if checkpoint_path is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(self.params, checkpoint_path)
        if checkpoint_path is not None:
            save_checkpoint(self.params, checkpoint_path)
        return self.params, self.history


def train(cfg: TrainConfig, ic: Field, checkpoint_path=None, progress=None) -> tuple[ModelParams, LossHistory]:
    return Trainer(cfg).fit(ic, checkpoint_path, progress)


def evaluate_losses(cfg: TrainConfig, params: ModelParams, ic: Field) -> tuple[float, float, float]:
    """Epoch-averaged (output, latent, total) losses without updating parameters."""
    return Trainer(cfg, params).epoch_losses(ic, None)


# --- checkpoints -----------------------------------------------------------------


def _meta(params: ModelParams) -> dict[str, np.ndarray]:
    return {
        "meta.dt": np.asarray(params.dt),
        "meta.n": np.asarray(float(params.n)),
        "meta.output_gate_bias": np.asarray(float(params.output_gate_bias)),
        "meta.final_linear": np.asarray(float(params.final_linear)),
    }


def checkpoint_bytes(params: ModelParams) -> bytes:
    entries = {**_meta(params), **{k: t.data for k, t in params.tensors.items()}}
    parts = [CKPT_MAGIC, struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(params: ModelParams, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def _read(raw: bytes, off: int, fmt: str, what: str):
    size = struct.calcsize(fmt)
    if off + size > len(raw):
        raise FormatError(f"truncated checkpoint while reading {what}", off)
    return struct.unpack_from(fmt, raw, off), off + size


def decode_checkpoint(raw: bytes) -> ModelParams:
    if raw[:6] != CKPT_MAGIC:
        raise FormatError(f"bad magic {raw[:6]!r}", 0)
    (count,), off = _read(raw, 6, "<I", "tensor count")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,), off = _read(raw, off, "<H", "name length")
        if off + nlen > len(raw):
            raise FormatError("truncated checkpoint while reading a tensor name", off)
        try:
            name = raw[off : off + nlen].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid UTF-8", off) from None
        off += nlen
        (rank,), off = _read(raw, off, "<I", f"rank of {name!r}")
        if rank > 8:
            raise FormatError(f"implausible rank {rank} for {name!r}", off - 4)
        dims, off = _read(raw, off, f"<{rank}I", f"dims of {name!r}")
        nbytes = 8 * int(np.prod(dims, dtype=np.int64))
        if off + nbytes > len(raw):
            raise FormatError(f"truncated data for tensor {name!r}", off)
        arrays[name] = np.frombuffer(raw[off : off + nbytes], dtype="<f8").astype(np.float64).reshape(dims)
        off += nbytes
    if off != len(raw):
        raise FormatError("trailing bytes after last tensor", off)
    for name in ("meta.dt", "meta.n"):
        if name not in arrays:
            raise FormatError(f"checkpoint is missing tensor {name!r}")
    n = int(arrays.pop("meta.n"))
    dt = float(arrays.pop("meta.dt"))
    ogb = bool(arrays.pop("meta.output_gate_bias", np.asarray(0.0)))
    final_linear = bool(arrays.pop("meta.final_linear", np.asarray(0.0)))
    tensors = {}
    for name, shape in param_shapes(n, ogb).items():
        if name not in arrays:
            raise FormatError(f"checkpoint is missing tensor {name!r}")
        if arrays[name].shape != shape:
            raise FormatError(f"tensor {name!r} has shape {arrays[name].shape}, expected {shape}")
        tensors[name] = Tensor(arrays.pop(name), requires_grad=True, name=name)
    if arrays:
        raise FormatError(f"checkpoint has unexpected tensors {sorted(arrays)}")
    return ModelParams(tensors, dt, n, ogb, final_linear)


def load_checkpoint(path) -> ModelParams:
    return decode_checkpoint(Path(path).read_bytes())
