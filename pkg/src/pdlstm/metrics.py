"""Error metrics and static plot artifacts (PGM images, CSV tables)."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .grid import Field, FieldSequence

EPS_DIV = 1e-12
EVAL_HEADER = ("step", "t", "rel_l2_u", "rel_l2_v", "rel_l2_all")


def _rel(diff: np.ndarray, truth: np.ndarray) -> float:
    return float(np.linalg.norm(diff) / max(np.linalg.norm(truth), EPS_DIV))


@dataclass(frozen=True)
class RelativeL2:
    per_step: np.ndarray  # (T,) over all channels
    per_channel: np.ndarray  # (T, C)
    times: np.ndarray

    @property
    def aggregate(self) -> float:
        return float(np.mean(self.per_step))


def relative_l2_error(pred, truth) -> RelativeL2:
    """Per-step ``||pred_k - truth_k|| / max(||truth_k||, 1e-12)`` plus their mean.

    Accepts two :class:`FieldSequence` objects (timestamps must agree to 1e-9)
    or two arrays shaped ``(T, H, W, C)``.
    """
    if isinstance(pred, FieldSequence) and isinstance(truth, FieldSequence):
        a, b = pred.stack(), truth.stack()
        if a.shape != b.shape:
            raise ShapeError(f"sequence shapes differ: {a.shape} vs {b.shape}")
        if not np.allclose(pred.times, truth.times, rtol=0.0, atol=1e-9):
            raise ShapeError("sequence timestamps differ by more than 1e-9")
        times = pred.times
    elif isinstance(pred, FieldSequence) or isinstance(truth, FieldSequence):
        raise ShapeError("cannot compare a FieldSequence with a raw array")
    else:
        a, b = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
        if a.shape != b.shape or a.ndim != 4:
            raise ShapeError(f"expected matching (T, H, W, C) arrays, got {a.shape} and {b.shape}")
        times = np.arange(a.shape[0], dtype=np.float64)
    if a.shape[0] == 0:
        raise ShapeError("cannot compare empty sequences")
    diff = a - b
    per_step = np.array([_rel(diff[k], b[k]) for k in range(a.shape[0])])
    per_channel = np.array(
        [[_rel(diff[k, ..., c], b[k, ..., c]) for c in range(a.shape[-1])] for k in range(a.shape[0])]
    )
    return RelativeL2(per_step, per_channel, np.asarray(times, dtype=np.float64))


def write_eval_csv(result: RelativeL2, path) -> None:
    if result.per_channel.shape[1] != 2:
        raise ShapeError("eval CSV expects two-channel (u, v) sequences")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_HEADER)
        for k, (t, (eu, ev), ea) in enumerate(zip(result.times, result.per_channel, result.per_step)):
            w.writerow([k, repr(float(t)), repr(float(eu)), repr(float(ev)), repr(float(ea))])


# --- images ------------------------------------------------------------------------


def quantize(values: np.ndarray) -> tuple[np.ndarray, float, float, bool]:
    lo, hi = float(np.min(values)), float(np.max(values))
    if hi == lo:
        return np.full(values.shape, 128, dtype=np.uint8), lo, hi, True
    scaled = np.rint((values - lo) / (hi - lo) * 255.0)
    return scaled.astype(np.uint8), lo, hi, False


def render_field(field: Field, channel: int, path) -> None:
    """Binary 8-bit PGM of one channel, min-max normalised; range goes to ``<path>.txt``.

    Row 0 of the array is the first image row. A constant channel renders as
    mid-gray and the sidecar says so.
    """
    if not 0 <= channel < field.channels:
        raise ConfigError(f"channel {channel} out of range for a {field.channels}-channel field")
    pixels, lo, hi, flat = quantize(field.data[..., channel])
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())
    lines = [f"min {lo!r}", f"max {hi!r}", f"t {field.t!r}", f"channel {channel}"]
    if flat:
        lines.append("constant field: rendered as mid-gray")
    Path(str(path) + ".txt").write_text("\n".join(lines) + "\n")


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header", pos)
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"not a binary PGM (magic {tokens[0]!r})", 0)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError("non-integer PGM header field", pos) from None
    if maxval != 255:
        raise FormatError(f"only 8-bit PGM is supported, maxval={maxval}", pos)
    pos += 1  # single whitespace after maxval
    body = raw[pos:]
    if len(body) != w * h:
        raise FormatError(f"PGM payload has {len(body)} bytes, expected {w * h}", pos)
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def write_loss_plot_csv(history_rows, path) -> None:
    """Log10 loss curves, one row per epoch, ready for any plotting tool."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "log10_output", "log10_latent", "log10_total"))
        for epoch, out, lat, total, _lr in history_rows:
            w.writerow([epoch] + [repr(float(np.log10(max(v, EPS_DIV)))) for v in (out, lat, total)])
