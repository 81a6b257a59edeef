import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_array_equal
from scipy import stats

from ivdrip import imaging
from ivdrip import synthdrip as sd

SCENE = sd.SceneSpec(size=128, background=2, luminance=0.25, gain=1.0, dripper=(40.0, 60.0),
                     drop_radius=8.0, noise_sigma=0.0, seed=5)


def drop_mask(scene, x, y, s, phase=0.5, thresh=0.04):
    """Pixels the drop changes: with-drop minus without-drop render of the same scene."""
    a = sd.render_frame(scene, x, y, s, phase, clamp=False)
    b = sd.render_frame(scene, x, y, s, phase, clamp=False, draw_drop=False)
    return np.abs(a - b).max(axis=2) > thresh, np.abs(a - b).sum(axis=2)


def centroid(weights):
    r, c = np.indices(weights.shape)
    tot = weights.sum()
    return (r * weights).sum() / tot, (c * weights).sum() / tot


# ---------------------------------------------------------------- rendering

def test_render_deterministic():
    scene = sd.SceneSpec(noise_sigma=0.05, seed=9)
    a = sd.render_frame(scene, 60.0, 64.0, 1, 0.3, noise_key=4)
    b = sd.render_frame(scene, 60.0, 64.0, 1, 0.3, noise_key=4)
    assert_array_equal(a, b)
    assert a.shape == (128, 128, 3) and a.dtype == np.float32
    assert a.min() >= 0 and a.max() <= 1


def test_noise_key_changes_noise_only():
    scene = sd.SceneSpec(noise_sigma=0.05, seed=9)
    a = sd.render_frame(scene, 60.0, 64.0, 1, noise_key=1)
    b = sd.render_frame(scene, 60.0, 64.0, 1, noise_key=2)
    assert not np.array_equal(a, b)
    assert abs(float((a - b).mean())) < 0.01


@pytest.mark.parametrize("seed", range(5))
def test_well_formed_drop_is_larger(seed):
    scene = sd.SceneSpec(background=seed % 4, seed=seed, noise_sigma=0.0)
    x, y = 60.0, 64.0
    m0, _ = drop_mask(scene, x, y, 0)
    m1, _ = drop_mask(scene, x, y, 1)
    assert m1.sum() > m0.sum() > 0


def test_gain_is_linear_before_clamping():
    full = sd.render_frame(SCENE, 60.0, 60.0, 1, clamp=False)
    half = sd.render_frame(sd.SceneSpec(**{**SCENE.__dict__, "gain": 0.5}), 60.0, 60.0, 1, clamp=False)
    assert_array_equal(half, full * np.float32(0.5))


def test_window_matches_full_render():
    scene = sd.SceneSpec(noise_sigma=0.0, seed=3, background=3)
    full = sd.render_frame(scene, 70.0, 50.0, 0, 0.4)
    part = sd.render_frame(scene, 70.0, 50.0, 0, 0.4, window=(30, 20, 50, 60))
    np.testing.assert_allclose(part, full[30:80, 20:80], atol=1e-6)


@pytest.mark.parametrize("x,y", [(-1.0, 5.0), (5.0, 128.0), (128.0, 0.0)])
def test_render_out_of_bounds(x, y):
    with pytest.raises(sd.ParameterError):
        sd.render_frame(SCENE, x, y, 0)


@pytest.mark.parametrize("kw", [{"gain": 0.1}, {"gain": 1.6}, {"noise_sigma": 0.2}, {"dripper": (2.0, 64.0)},
                                {"background": 7}])
def test_scene_validation(kw):
    with pytest.raises(sd.ParameterError):
        sd.SceneSpec(**kw).validate()


def test_drop_centroid_at_requested_position():
    for x, y, s in [(50.0, 60.0, 0), (72.5, 33.25, 1), (90.0, 100.0, 1)]:
        _, w = drop_mask(SCENE, x, y, s)
        cr, cc = centroid(w)
        assert abs(cr - x) < 1.5 and abs(cc - y) < 1.5


# ---------------------------------------------------------------- labels

def test_make_label_examples():
    Y = sd.make_label(0, 0, 0, 416, 26)
    assert Y.shape == (26, 26, 2) and Y[0, 0, 0] == 1 and Y.sum() == 1
    assert sd.make_label(208, 104, 1, 416, 26)[13, 6, 1] == 1
    assert sd.make_label(415, 415, 1, 416, 26)[25, 25, 1] == 1


@pytest.mark.parametrize("args", [(416, 0, 0), (0, -0.5, 0), (1, 1, 2)])
def test_make_label_rejects(args):
    with pytest.raises(sd.ParameterError):
        sd.make_label(*args, 416, 26)


def brute_force_cell(x, y, W, S):
    """Walk the cell edges instead of dividing."""
    i = max(k for k in range(S) if k * W <= x * S)
    j = max(k for k in range(S) if k * W <= y * S)
    return i, j


@settings(max_examples=300)
@given(st.data())
def test_make_label_one_hot_and_bracketing(data):
    W, S = data.draw(st.sampled_from([(416, 26), (128, 8), (64, 4)]))
    x = data.draw(st.floats(0, W, exclude_max=True))
    y = data.draw(st.floats(0, W, exclude_max=True))
    s = data.draw(st.integers(0, 1))
    Y = sd.make_label(x, y, s, W, S)
    assert Y.sum() == 1
    i, j, k = map(int, np.argwhere(Y)[0])
    assert k == s
    assert (i, j) == brute_force_cell(x, y, W, S)
    assert i * W / S <= x < (i + 1) * W / S or math.isclose(x, (i + 1) * W / S)


# ---------------------------------------------------------------- augment

def test_augment_identity():
    frame = sd.render_frame(SCENE, 60.0, 64.0, 1)
    out = sd.augment(sd.LabeledSample(frame, 60.0, 64.0, 1), 1.0)
    np.testing.assert_allclose(out.frame, frame, atol=1e-6)
    assert (out.x, out.y, out.s) == (60.0, 64.0, 1)


def test_augment_position_arithmetic():
    scene = sd.SceneSpec(size=416, dripper=(180.0, 200.0), drop_radius=20.0, noise_sigma=0.0)
    frame = sd.render_frame(scene, 200.0, 200.0, 1)
    out = sd.augment(sd.LabeledSample(frame, 200.0, 200.0, 1), 1.1, crop_offset=(0.0, 0.0))
    assert out.x == pytest.approx(220.0) and out.y == pytest.approx(220.0)


@pytest.mark.parametrize("zoom", [0.89, 1.11])
def test_augment_zoom_range(zoom):
    frame = sd.render_frame(SCENE, 60.0, 64.0, 1)
    with pytest.raises(sd.ParameterError):
        sd.augment(sd.LabeledSample(frame, 60.0, 64.0, 1), zoom)


def test_augment_evicting_crop_rejected():
    frame = sd.render_frame(SCENE, 10.0, 64.0, 1)
    with pytest.raises(sd.ParameterError):
        sd.augment(sd.LabeledSample(frame, 10.0, 64.0, 1), 1.0, crop_offset=(20.0, 0.0))


@settings(max_examples=25, deadline=None)
@given(zoom=st.floats(0.9, 1.1), dx=st.floats(-8, 8), dy=st.floats(-8, 8), s=st.integers(0, 1))
def test_augment_label_follows_drop(zoom, dx, dy, s):
    x, y = 60.0, 64.0
    with_drop = sd.LabeledSample(sd.render_frame(SCENE, x, y, s, clamp=False), x, y, s)
    without = sd.LabeledSample(sd.render_frame(SCENE, x, y, s, clamp=False, draw_drop=False), x, y, s)
    c = (zoom * 128 - 128) / 2
    off = (c + dx, c + dy)
    a, b = sd.augment(with_drop, zoom, off), sd.augment(without, zoom, off)
    cr, cc = centroid(np.abs(a.frame - b.frame).sum(axis=2))
    assert abs(cr - a.x) < 1.5 and abs(cc - a.y) < 1.5
    # the label cell is recovered from the image whenever the centroid is not on a cell edge
    cell = sd.label_cell(a.x, a.y, 128, 8)
    if min(a.x % 16, 16 - a.x % 16, a.y % 16, 16 - a.y % 16) > 1.5:
        assert sd.label_cell(cr, cc, 128, 8) == cell


# ---------------------------------------------------------------- datasets

def test_build_dataset_balance_and_determinism():
    a = sd.build_dataset(1000, seed=4)
    b = sd.build_dataset(1000, seed=4)
    assert [r.to_json() for r in a] == [r.to_json() for r in b]
    assert sum(r.s for r in a) == 500
    odd = sd.build_dataset(7, seed=1)
    n1 = sum(r.s for r in odd)
    assert abs(n1 - (7 - n1)) <= 1


def test_build_dataset_needs_two():
    with pytest.raises(sd.ParameterError):
        sd.build_dataset(1)


def test_positions_uniform_over_cells():
    S, W = 8, 128
    recs = sd.build_dataset(20 * S * S, W=W, S=S, seed=2)
    hist = np.zeros((S, S))
    for r in recs:
        hist[sd.label_cell(r.x, r.y, W, S)] += 1
    assert stats.chisquare(hist.ravel()).pvalue > 0.001


def test_render_sample_places_drop_on_record():
    for rec in sd.build_dataset(6, seed=8):
        sample = sd.render_sample(rec)
        assert sample.frame.shape == (128, 128, 3)
        assert (sample.x, sample.y, sample.s) == (rec.x, rec.y, rec.s)
        assert_array_equal(sample.frame, sd.render_sample(rec).frame)


def test_dataset_disk_round_trip(tmp_path):
    recs = sd.build_dataset(4, seed=3)
    out = sd.write_dataset(recs, tmp_path / "train")
    lines = [json.loads(l) for l in (out / "manifest.jsonl").read_text().splitlines()]
    assert set(lines[0]) == {"file", "x", "y", "s", "W", "S", "seed"}
    back = sd.read_dataset(out)
    mem = sd.materialize(recs)
    assert_array_equal(back.frames, mem.frames)
    assert_array_equal(back.s, mem.s)
    assert_array_equal(imaging.read_ppm(out / lines[0]["file"]), mem.frames[0])
    assert_array_equal(back.labels(), mem.labels())


# ---------------------------------------------------------------- streams

def test_stream_detach_count_and_spacing():
    st_ = sd.gen_stream(sd.DripStreamSpec(duration=60, fps=30, drop_period=2.0))
    assert len(st_.detach_times) == 30
    np.testing.assert_allclose(np.diff(st_.detach_times), 2.0)
    assert st_.detach_times[0] == pytest.approx(2.0)


def test_stream_frames_per_state():
    st_ = sd.gen_stream(sd.DripStreamSpec(duration=60, fps=30, drop_period=2.0, forming_fraction=0.5))
    for p in range(30):
        seg = st_.states[60 * p:60 * (p + 1)]
        assert_array_equal(seg, [0] * 30 + [1] * 30)


@pytest.mark.parametrize("duration,period", [(60.0, 2.0), (59.9, 2.0), (10.0, 0.3)])
def test_stream_tail_has_no_new_detach(duration, period):
    spec = sd.DripStreamSpec(duration=duration, fps=30, drop_period=period, tail_frames=40)
    st_ = sd.gen_stream(spec)
    assert len(st_) == int(duration * 30 + 1e-9) + 40
    assert st_.detach_times[-1] <= duration + 1e-9
    assert len(st_.detach_times) == int(duration / period + 1e-9)
    tail = st_.times > duration + 1e-9
    # no 1 -> 0 change past duration; the last drop ends up hanging at full size
    assert not np.any((st_.states[:-1] == 1) & (st_.states[1:] == 0) & tail[1:])
    last_start = st_.detach_times[-1]
    if st_.times[-1] - last_start >= period:
        assert st_.states[-1] == 1 and st_.phases[-1] == 1.0


def test_stream_shorter_than_a_period():
    st_ = sd.gen_stream(sd.DripStreamSpec(duration=1.5, fps=30, drop_period=2.0))
    assert st_.detach_times == []


@settings(max_examples=40, deadline=None)
@given(period=st.floats(0.5, 4.0), fps=st.sampled_from([15.0, 25.0, 30.0]), ff=st.floats(0.2, 0.8),
       duration=st.floats(5, 40))
def test_stream_one_transition_per_detach(period, fps, ff, duration):
    spec = sd.DripStreamSpec(duration=duration, fps=fps, drop_period=period, forming_fraction=ff)
    st_ = sd.gen_stream(spec)
    falls = np.flatnonzero((st_.states[:-1] == 1) & (st_.states[1:] == 0)) + 1
    assert len(falls) == len(st_.detach_times)
    # each 1 -> 0 change is observed at the first frame at or after its detach instant
    for k, t in zip(falls, st_.detach_times):
        assert st_.times[k - 1] < t <= st_.times[k] + 1e-9


def test_stream_step_schedule():
    st_ = sd.gen_stream(sd.DripStreamSpec(duration=120, fps=30, drop_period=[(0, 2.0), (60, 1.5)]))
    d = np.diff(st_.detach_times)
    assert np.allclose(d[:29], 2.0)
    assert np.allclose(d[29:], 1.5)
    assert len(st_.detach_times) == 30 + 40


@pytest.mark.parametrize("kw", [{"fps": 0}, {"drop_period": 0.05}, {"forming_fraction": 1.0}])
def test_stream_spec_validation(kw):
    with pytest.raises(sd.ParameterError):
        sd.gen_stream(sd.DripStreamSpec(**{"duration": 10, "fps": 30, "drop_period": 2.0, **kw}))


def test_write_stream_files(tmp_path):
    st_ = sd.gen_stream(sd.DripStreamSpec(duration=3, fps=10, drop_period=1.0,
                                          scene=sd.SceneSpec(size=32, dripper=(12.0, 16.0), drop_radius=2.0)))
    out = sd.write_stream(st_, tmp_path / "s", container="ppm")
    truth = [json.loads(l) for l in (out / "truth.jsonl").read_text().splitlines()]
    assert truth[0] == {"frame_index": 0, "t_seconds": 0.0, "state": 0}
    assert len(truth) == len(st_) == len(list((out / "frames").glob("*.ppm")))
    det = [json.loads(l)["t_seconds"] for l in (out / "detach.jsonl").read_text().splitlines()]
    assert det == st_.detach_times
