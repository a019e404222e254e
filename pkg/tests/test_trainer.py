import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pdlstm import autodiff as ad
from pdlstm.errors import ConfigError, FormatError, NumericError
from pdlstm.grid import make_grid
from pdlstm.network import init_params, rollout, rollout_tensors
from pdlstm.physics import latent_residual_tensors, mse, residual_tensors, sample_burgers_ic
from pdlstm.trainer import (
    HISTORY_HEADER,
    AdamState,
    LossHistory,
    TrainConfig,
    _meta,
    Trainer,
    adam_update,
    checkpoint_bytes,
    clip_by_global_norm,
    decode_checkpoint,
    load_checkpoint,
    lr_schedule,
    save_checkpoint,
    train,
    window_loss,
)


def tiny(**kw) -> TrainConfig:
    base = dict(n=8, steps=6, bptt_window=3, epochs=2, seed=1)
    base.update(kw)
    return TrainConfig(**base)


def tiny_ic(cfg: TrainConfig):
    return sample_burgers_ic(0, cfg.grid)


# --- learning-rate schedule ---------------------------------------------------------


def test_lr_schedule_endpoints_and_midpoint():
    cfg = TrainConfig(epochs=3)
    assert lr_schedule(0, cfg) == pytest.approx(1e-3, rel=1e-15)
    assert lr_schedule(2, cfg) == pytest.approx(1e-4, rel=1e-12)
    assert lr_schedule(1, cfg) == pytest.approx(math.sqrt(1e-7), rel=1e-12)


def test_lr_schedule_single_epoch_is_constant():
    assert lr_schedule(0, TrainConfig(epochs=1)) == 1e-3


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 200))
def test_lr_schedule_monotone(epochs):
    cfg = TrainConfig(epochs=epochs)
    lrs = [lr_schedule(e, cfg) for e in range(epochs)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert 1e-4 * (1 - 1e-12) <= min(lrs) and max(lrs) <= 1e-3


# --- Adam ---------------------------------------------------------------------------


def test_adam_zero_gradient_is_noop():
    p = {"w": np.array([1.0, -2.0])}
    new, state = adam_update(p, {"w": np.zeros(2)}, AdamState.zeros(p), 1e-2)
    assert np.array_equal(new["w"], p["w"])
    assert state.step == 1


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_subnormal=False), min_size=1, max_size=6), st.floats(1e-5, 1.0))
def test_adam_first_step_bounded_by_lr(grads, lr):
    g = np.array(grads)
    p = {"w": np.zeros_like(g)}
    new, _ = adam_update(p, {"w": g}, AdamState.zeros(p), lr)
    assert np.all(np.abs(new["w"]) <= lr * (1 + 1e-12))


def test_adam_does_not_mutate_inputs():
    p = {"w": np.ones(3)}
    g = {"w": np.array([0.1, -0.2, 0.3])}
    state = AdamState.zeros(p)
    adam_update(p, g, state, 0.1)
    assert np.array_equal(p["w"], np.ones(3)) and state.step == 0 and not state.m["w"].any()


def test_adam_converges_on_quadratic():
    target = np.array([0.7, -1.3])
    scales = np.array([1.0, 10.0])
    p = {"w": np.zeros(2)}
    state = AdamState.zeros(p)
    for k in range(5000):
        grad = 2 * scales * (p["w"] - target)
        lr = 0.05 * 0.999**k
        p, state = adam_update(p, {"w": grad}, state, lr)
    assert np.max(np.abs(p["w"] - target)) < 1e-6


def test_adam_rejects_non_finite_gradient():
    p = {"a": np.zeros(2), "b": np.zeros(2)}
    with pytest.raises(NumericError, match="'b'"):
        adam_update(p, {"a": np.zeros(2), "b": np.array([0.0, np.nan])}, AdamState.zeros(p), 1e-3)


def test_clip_by_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = clip_by_global_norm(g, 1.0)
    assert norm == 5.0
    np.testing.assert_allclose(clipped["a"], [0.6], rtol=1e-15)
    np.testing.assert_allclose(clipped["b"], [0.8], rtol=1e-15)
    same, _ = clip_by_global_norm(g, 10.0)
    assert same["a"] is g["a"]


# --- configuration ------------------------------------------------------------------


@pytest.mark.parametrize(
    "kw",
    [dict(steps=2, bptt_window=2), dict(bptt_window=2), dict(bptt_window=101), dict(lr0=1e-5),
     dict(lr_final=0.0), dict(epochs=-1), dict(dt=0.0), dict(w_lat=-1.0)],
)
def test_train_config_rejects(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_windows_cover_rollout():
    t = Trainer(tiny(steps=7, bptt_window=3))
    assert t.windows() == [(0, 3), (3, 3), (6, 1)]


# --- training loop ------------------------------------------------------------------


def test_zero_epochs_returns_initial_params():
    cfg = tiny(epochs=0)
    params, history = train(cfg, tiny_ic(cfg))
    ref = init_params(cfg.seed, cfg.n, cfg.dt)
    assert len(history) == 0
    assert checkpoint_bytes(params) == checkpoint_bytes(ref)


def test_training_is_bit_reproducible(tmp_path):
    cfg = tiny()
    ic = tiny_ic(cfg)
    runs = []
    for k in range(2):
        params, history = train(cfg, ic, checkpoint_path=tmp_path / f"c{k}.ckpt")
        history.write_csv(tmp_path / f"h{k}.csv")
        runs.append(((tmp_path / f"c{k}.ckpt").read_bytes(), (tmp_path / f"h{k}.csv").read_bytes()))
    assert runs[0] == runs[1]


def test_history_rows_are_finite_and_zero_based():
    cfg = tiny(epochs=3)
    _, history = train(cfg, tiny_ic(cfg))
    assert history.column("epoch").tolist() == [0, 1, 2]
    for name in HISTORY_HEADER[1:]:
        assert np.all(np.isfinite(history.column(name)))
    np.testing.assert_allclose(history.column("lr"), [lr_schedule(e, cfg) for e in range(3)], rtol=1e-15)
    np.testing.assert_allclose(
        history.column("loss_total"), history.column("loss_output") + history.column("loss_latent"), rtol=1e-12
    )


def test_training_changes_parameters():
    cfg = tiny(epochs=1)
    params, _ = train(cfg, tiny_ic(cfg))
    assert checkpoint_bytes(params) != checkpoint_bytes(init_params(cfg.seed, cfg.n, cfg.dt))


def test_fit_rejects_mismatched_grid():
    cfg = tiny()
    with pytest.raises(ConfigError, match="grid"):
        Trainer(cfg).fit(sample_burgers_ic(0, make_grid(16, 0, 1)))


def test_non_finite_loss_keeps_last_good_params(tmp_path):
    cfg = tiny(epochs=2)
    trainer = Trainer(cfg)
    trainer.params["dec.2.b"].data = np.full_like(trainer.params["dec.2.b"].data, np.nan)
    start = checkpoint_bytes(trainer.params)
    with pytest.raises(NumericError, match="non-finite") as info:
        trainer.fit(tiny_ic(cfg), checkpoint_path=tmp_path / "c.ckpt")
    assert checkpoint_bytes(info.value.last_good) == start
    assert (tmp_path / "c.ckpt").read_bytes() == start
    assert len(trainer.history) == 0


def _window_grads(cfg: TrainConfig, which: int) -> dict:
    trainer = Trainer(cfg)
    grads = {}

    def grab(start, wl):
        if start // cfg.bptt_window == which:
            trainer.params.zero_grad()
            ad.backward(wl.total)
            grads.update({k: t.grad.copy() for k, t in trainer.params.tensors.items() if t.grad is not None})

    trainer.epoch_losses(tiny_ic(cfg), None, on_window=grab)
    return grads


def test_first_window_gradients_ignore_later_windows():
    a = _window_grads(tiny(steps=3), 0)
    b = _window_grads(tiny(steps=9), 0)
    assert a.keys() == b.keys() and a
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()


def test_window_seeds_are_detached():
    cfg = tiny()
    trainer = Trainer(cfg)
    seen = []

    def grab(start, wl):
        leaves, stack, visited = [], [wl.total], set()
        while stack:
            t = stack.pop()
            if id(t) in visited:
                continue
            visited.add(id(t))
            if not t._parents:
                leaves.append(t)
            stack.extend(t._parents)
        seen.append({id(t) for t in leaves if t.requires_grad})

    trainer.epoch_losses(tiny_ic(cfg), None, on_window=grab)
    params = {id(t) for t in trainer.params.tensors.values()}
    assert all(s <= params for s in seen)


def test_zero_latent_weight_matches_detached_latent_loss():
    cfg = tiny(w_lat=0.0, steps=3)
    trainer = Trainer(cfg)
    ic = tiny_ic(cfg)
    r = rollout_tensors(ad.Tensor(ic.data), cfg.steps, trainer.params)
    wl = window_loss(cfg, trainer.params, r.states, r.latent_u, r.latent_v, trainer.filters, trainer.lat_filters)
    ad.backward(wl.total)
    got = {k: t.grad.copy() for k, t in trainer.params.tensors.items() if t.grad is not None}

    trainer.params.zero_grad()
    r = rollout_tensors(ad.Tensor(ic.data), cfg.steps, trainer.params)
    out = mse(residual_tensors(cfg.pde, r.states, cfg.dt, trainer.filters))
    lat = mse(latent_residual_tensors(
        cfg.pde, [t.detach() for t in r.latent_u], [t.detach() for t in r.latent_v], cfg.dt, trainer.lat_filters
    ))
    ad.backward(out + ad.scale(lat, 0.0))
    want = {k: t.grad.copy() for k, t in trainer.params.tensors.items() if t.grad is not None}
    assert got.keys() == want.keys()
    for k in got:
        np.testing.assert_allclose(got[k], want[k], rtol=1e-12, atol=1e-300)
    assert np.any(got["enc.0.w"] != 0)


# --- history and checkpoint files ---------------------------------------------------


def test_history_csv_roundtrip(tmp_path):
    h = LossHistory()
    h.append(0, 0.1, 0.2, 0.30000000000000004, 1e-3)
    h.append(1, 1 / 3, 2 / 3, 1.0, 3.1622776601683794e-4)
    h.write_csv(tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == ",".join(HISTORY_HEADER)
    assert LossHistory.read_csv(tmp_path / "h.csv").rows == h.rows


def test_history_csv_bad_header(tmp_path):
    (tmp_path / "h.csv").write_text("a,b\n1,2\n")
    with pytest.raises(FormatError, match="header"):
        LossHistory.read_csv(tmp_path / "h.csv")


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    p = init_params(3, 16, 0.004, output_gate_bias=True)
    save_checkpoint(p, tmp_path / "c.ckpt")
    q = load_checkpoint(tmp_path / "c.ckpt")
    assert q.dt == 0.004 and q.n == 16 and q.output_gate_bias and not q.final_linear
    assert checkpoint_bytes(q) == (tmp_path / "c.ckpt").read_bytes()
    assert (tmp_path / "c.ckpt").read_bytes()[:6] == b"PDCKP1"


def test_checkpoint_alpha_is_rank0():
    raw = checkpoint_bytes(init_params(0, 8))
    name = b"lstm.alpha"
    pos = raw.index(name) + len(name)
    assert int.from_bytes(raw[pos : pos + 4], "little") == 0


def test_loaded_checkpoint_rolls_out_identically(tmp_path):
    g = make_grid(16, 0, 1)
    ic = sample_burgers_ic(4, g)
    p = init_params(4, 16)
    save_checkpoint(p, tmp_path / "c.ckpt")
    a, _, _ = rollout(ic, 5, p)
    b, _, _ = rollout(ic, 5, load_checkpoint(tmp_path / "c.ckpt"))
    assert a.stack().tobytes() == b.stack().tobytes()


def _drop_tensor(raw: bytes, name: str) -> bytes:
    params = decode_checkpoint(raw)
    del params.tensors[name]
    entries = {**_meta(params), **{k: t.data for k, t in params.tensors.items()}}
    parts = [b"PDCKP1", struct.pack("<I", len(entries))]
    for k, arr in entries.items():
        parts.append(struct.pack("<H", len(k)) + k.encode())
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f8").tobytes())
    return b"".join(parts)


def test_checkpoint_missing_tensor_named():
    raw = checkpoint_bytes(init_params(0, 8))
    with pytest.raises(FormatError, match="lstm.W_hf"):
        decode_checkpoint(_drop_tensor(raw, "lstm.W_hf"))


@pytest.mark.parametrize("mutate, msg", [
    (lambda r: b"XXXXXX" + r[6:], "bad magic"),
    (lambda r: r[:-3], "truncated"),
    (lambda r: r + b"\0", "trailing"),
])
def test_checkpoint_corruption(mutate, msg):
    raw = checkpoint_bytes(init_params(0, 8))
    with pytest.raises(FormatError, match=msg):
        decode_checkpoint(mutate(raw))
