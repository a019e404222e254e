import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pdlstm.errors import ConfigError, FormatError, ShapeError
from pdlstm.grid import Field, FieldSequence, make_grid
from pdlstm.metrics import (
    EVAL_HEADER,
    quantize,
    read_pgm,
    relative_l2_error,
    render_field,
    write_eval_csv,
    write_loss_plot_csv,
)


def seq_of(arr: np.ndarray, dt: float = 0.1) -> FieldSequence:
    g = make_grid(arr.shape[1], 0, 1)
    return FieldSequence([Field(g, a, k * dt) for k, a in enumerate(arr)], dt)


def test_identical_sequences_have_zero_error():
    a = np.random.default_rng(0).standard_normal((3, 4, 4, 2))
    r = relative_l2_error(seq_of(a), seq_of(a.copy()))
    assert np.all(r.per_step == 0) and r.aggregate == 0.0
    np.testing.assert_allclose(r.times, [0, 0.1, 0.2], atol=1e-15)


def test_doubled_prediction_has_unit_error():
    a = np.random.default_rng(1).standard_normal((2, 4, 4, 2))
    r = relative_l2_error(2 * a, a)
    np.testing.assert_allclose(r.per_step, 1.0, rtol=1e-15)
    np.testing.assert_allclose(r.per_channel, 1.0, rtol=1e-15)


def test_hand_computed_single_step():
    truth = np.array([[[[1.0], [2.0]], [[2.0], [4.0]]]])  # norm 5
    pred = truth.copy()
    pred[0, 0, 0, 0] = 4.0  # diff norm 3
    assert abs(relative_l2_error(pred, truth).aggregate - 0.6) < 1e-12


def test_zero_truth_uses_floor():
    r = relative_l2_error(np.full((1, 2, 2, 1), 1e-13), np.zeros((1, 2, 2, 1)))
    assert r.aggregate == pytest.approx(2e-13 / 1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 10))
def test_error_scale_invariant(seed, s):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 2, 4, 4, 2))
    np.testing.assert_allclose(
        relative_l2_error(s * a, s * b).per_step, relative_l2_error(a, b).per_step, rtol=1e-12
    )


def test_mismatches_raise_shape_error():
    a = np.zeros((2, 4, 4, 2))
    with pytest.raises(ShapeError):
        relative_l2_error(a, np.zeros((3, 4, 4, 2)))
    with pytest.raises(ShapeError):
        relative_l2_error(seq_of(a), seq_of(np.zeros((2, 8, 8, 2))))
    with pytest.raises(ShapeError, match="timestamps"):
        relative_l2_error(seq_of(a, 0.1), seq_of(a, 0.2))
    with pytest.raises(ShapeError):
        relative_l2_error(seq_of(a), a)


def test_eval_csv(tmp_path):
    a = np.random.default_rng(2).standard_normal((2, 4, 4, 2))
    r = relative_l2_error(seq_of(1.5 * a), seq_of(a))
    write_eval_csv(r, tmp_path / "e.csv")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == ",".join(EVAL_HEADER)
    assert len(lines) == 3
    assert [float(x) for x in lines[2].split(",")[2:]] == pytest.approx([0.5, 0.5, 0.5], rel=1e-12)


def test_quantize_ramp_and_constant():
    px, lo, hi, flat = quantize(np.linspace(-1, 1, 256))
    assert (lo, hi, flat) == (-1.0, 1.0, False)
    assert px[0] == 0 and px[-1] == 255 and np.all(np.diff(px.astype(int)) >= 0)
    px, lo, hi, flat = quantize(np.full((3, 3), 7.0))
    assert flat and np.all(px == 128) and lo == hi == 7.0


def test_render_ramp_rows_monotone(tmp_path):
    g = make_grid(4, 0, 1)
    data = np.zeros((4, 4, 2))
    data[..., 0] = np.arange(4)[None, :] * 0.25
    render_field(Field(g, data, 0.5), 0, tmp_path / "f.pgm")
    img = read_pgm(tmp_path / "f.pgm")
    assert img.shape == (4, 4)
    assert all(np.all(np.diff(row.astype(int)) > 0) for row in img)
    side = (tmp_path / "f.pgm.txt").read_text()
    assert "min 0.0" in side and "max 0.75" in side and "t 0.5" in side
    assert "constant" not in side


def test_render_constant_field(tmp_path):
    render_field(Field(make_grid(4, 0, 1), np.full((4, 4, 2), 3.0)), 1, tmp_path / "c.pgm")
    assert np.all(read_pgm(tmp_path / "c.pgm") == 128)
    assert "constant field" in (tmp_path / "c.pgm.txt").read_text()


def test_render_roundtrip_within_quantum(tmp_path):
    vals = np.random.default_rng(3).standard_normal((8, 8, 2))
    render_field(Field(make_grid(8, 0, 1), vals), 0, tmp_path / "r.pgm")
    img = read_pgm(tmp_path / "r.pgm").astype(float) / 255
    lo, hi = vals[..., 0].min(), vals[..., 0].max()
    assert np.max(np.abs(img - (vals[..., 0] - lo) / (hi - lo))) <= 0.5 / 255 + 1e-12


def test_render_rejects_bad_channel(tmp_path):
    with pytest.raises(ConfigError):
        render_field(Field(make_grid(4, 0, 1), np.zeros((4, 4, 2))), 2, tmp_path / "x.pgm")


def test_read_pgm_rejects_garbage(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(FormatError, match="binary PGM"):
        read_pgm(tmp_path / "a.pgm")
    (tmp_path / "b.pgm").write_bytes(b"P5\n2 2\n255\n\x00")
    with pytest.raises(FormatError, match="payload"):
        read_pgm(tmp_path / "b.pgm")


def test_loss_plot_csv(tmp_path):
    write_loss_plot_csv([(0, 1.0, 0.1, 1.1, 1e-3)], tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "epoch,log10_output,log10_latent,log10_total"
    assert [float(x) for x in lines[1].split(",")] == pytest.approx([0, 0.0, -1.0, np.log10(1.1)])
