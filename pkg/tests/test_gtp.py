import numpy as np
import pytest
from hypothesis import given, strategies as st

from sdtrack.events import EVENT_DTYPE, EventWindow, SyntheticConfig, generate_synthetic_sequence
from sdtrack.gtp import (Aggregator, EventImage, GtpState, aggregate_baseline, aggregate_batch, aggregate_next,
                         aggregate_polarity_channels, aggregate_sequence, aggregate_stream,
                         aggregate_trajectory_channel, read_raw, write_preview, write_raw)


def window(events, w=8, h=8, t0=0, t1=100):
    arr = np.zeros(len(events), dtype=EVENT_DTYPE)
    for i, (x, y, t, p) in enumerate(events):
        arr[i] = (x, y, t, p)
    return EventWindow(arr, t0, t1, w, h)


def loop_gtp(windows, alpha, beta):
    """Per-pixel loop oracle of the three channels."""
    H, W = windows[0].shape
    prev = [[[0.0] * W for _ in range(H)] for _ in range(3)]
    out = []
    for win in windows:
        c1 = [[0] * W for _ in range(H)]
        c2 = [[0] * W for _ in range(H)]
        for x, y, _, p in win.events.tolist():
            if p > 0:
                c1[y][x] += 1
            else:
                c2[y][x] += 1
        img = np.zeros((3, H, W))
        for y in range(H):
            for x in range(W):
                h1, h2 = alpha * c1[y][x], alpha * c2[y][x]
                onsets = (prev[0][y][x] == 0 and h1 != 0) + (prev[1][y][x] == 0 and h2 != 0)
                h3 = beta * prev[2][y][x] + alpha * onsets
                img[:, y, x] = (h1, h2, h3)
        prev = [img[0].tolist(), img[1].tolist(), img[2].tolist()]
        out.append(img)
    return np.stack(out)


def random_windows(rng, n_windows, w=16, h=12, max_events=40):
    out = []
    for i in range(n_windows):
        n = int(rng.integers(0, max_events))
        ev = np.zeros(n, dtype=EVENT_DTYPE)
        ev["x"] = rng.integers(0, w, n)
        ev["y"] = rng.integers(0, h, n)
        ev["t"] = np.sort(rng.integers(i * 100, (i + 1) * 100, n))
        ev["p"] = rng.choice(np.array([-1, 1], dtype=np.int8), n)
        out.append(EventWindow(ev, i * 100, (i + 1) * 100, w, h))
    return out


def test_empty_window_gives_zero_planes():
    h1, h2 = aggregate_polarity_channels(window([]))
    assert not h1.any() and not h2.any()


def test_polarity_counts_scaled_by_alpha():
    w = window([(1, 1, 0, 1), (1, 1, 5, 1), (2, 2, 9, -1)])
    h1, h2 = aggregate_polarity_channels(w, 30)
    assert h1[1, 1] == 60 and h2[2, 2] == 30
    assert np.count_nonzero(h1) == 1 and np.count_nonzero(h2) == 1
    r1, r2 = aggregate_polarity_channels(w, 1)
    assert r1[1, 1] == 2 and r2[2, 2] == 1


def test_first_frame_onset_and_decay():
    st0 = GtpState.initial(8, 8, 30, 0.8)
    h1, h2 = aggregate_polarity_channels(window([(1, 1, 0, 1), (1, 1, 1, 1)]), 30)
    h3 = aggregate_trajectory_channel(st0, h1, h2)
    assert h3[1, 1] == 30
    st1 = GtpState(h1, h2, h3, 30, 0.8, 1)
    z = np.zeros((8, 8))
    assert aggregate_trajectory_channel(st1, z, z)[1, 1] == 24


def test_persistent_pixel_adds_no_onset():
    st0 = GtpState.initial(8, 8, 30, 0.5)
    img0, st1 = aggregate_next(st0, window([(3, 3, 0, 1)]))
    img1, _ = aggregate_next(st1, window([(3, 3, 0, 1)]))
    assert img1.channels[2, 3, 3] == 0.5 * 30


def test_three_frame_trace():
    st = GtpState.initial(8, 8, 30, 0.8)
    seq = []
    for w in (window([(4, 4, 0, 1), (4, 4, 1, 1), (5, 5, 2, -1)]), window([]), window([])):
        img, st = aggregate_next(st, w)
        seq.append(img.channels)
    assert seq[0][0, 4, 4] == 60 and seq[0][1, 5, 5] == 30
    trace = [c[2, 4, 4] for c in seq]
    assert trace == pytest.approx([30, 24, 19.2], abs=1e-9)


def test_dimension_mismatch_rejected():
    with pytest.raises(ValueError):
        aggregate_next(GtpState.initial(4, 4), window([]))


def test_parameter_validation():
    with pytest.raises(ValueError):
        GtpState.initial(4, 4, alpha=0)
    with pytest.raises(ValueError):
        GtpState.initial(4, 4, beta=1.5)


def test_streaming_matches_loop_oracle(rng):
    wins = random_windows(rng, 12)
    stream = np.stack([im.channels for im in aggregate_stream(wins, 30, 0.8)])
    assert np.array_equal(stream, loop_gtp(wins, 30, 0.8))


def test_streaming_matches_batch_on_100_windows(rng):
    wins = random_windows(rng, 100)
    stream = np.stack([im.channels for im in aggregate_stream(wins, 30, 0.8)])
    assert np.array_equal(stream, aggregate_batch(wins, 30, 0.8))


@given(seed=st.integers(0, 2**31), alpha=st.floats(0.1, 100), beta=st.floats(0, 1), n=st.integers(1, 15))
def test_stream_batch_equivalence_property(seed, alpha, beta, n):
    wins = random_windows(np.random.default_rng(seed), n, 6, 5, 15)
    stream = np.stack([im.channels for im in aggregate_stream(wins, alpha, beta)])
    assert np.array_equal(stream, aggregate_batch(wins, alpha, beta))


def test_right_then_left_leaves_full_trail():
    cfg = SyntheticConfig(width=64, height=32, object_size=6, start=(10, 16),
                          velocity_path=[(10, 3.0, 0.0), (10, -3.0, 0.0)], ticks_per_frame=3)
    seq = generate_synthetic_sequence(cfg)
    imgs = aggregate_stream(seq.windows(), 30, 0.8)
    ch3 = np.stack([im.channels[2] for im in imgs])
    trail = ch3.max(axis=0)[16]
    xs = [b.cx for b in seq.boxes]
    lo, hi = int(min(xs)), int(max(xs))
    assert np.all(trail[lo:hi] > 0)
    both = np.stack([im.channels[0] for im in imgs]).any(0) & np.stack([im.channels[1] for im in imgs]).any(0)
    assert both.any()


def test_channel3_steady_state_bound(rng):
    alpha, beta = 30.0, 0.8
    wins = random_windows(rng, 300, 6, 6, 30)
    ch3 = aggregate_batch(wins, alpha, beta)[:, 2]
    assert ch3.max() <= 2 * alpha / (1 - beta) + 1e-9
    assert ch3.min() >= 0


def test_beta_zero_single_frame_is_onset_indicator():
    w = window([(1, 1, 0, 1), (1, 1, 1, -1), (2, 3, 2, 1)])
    img = aggregate_stream([w], 30, 0.0)[0]
    expected = 30 * ((img.channels[0] != 0).astype(int) + (img.channels[1] != 0))
    assert np.array_equal(img.channels[2], expected)


def test_polarity_channels_ignore_event_order_but_event_frame_does_not():
    events = [(1, 1, 0, 1), (1, 1, 0, -1), (2, 2, 0, 1)]
    fwd = window(events)
    rev = window(events[::-1])
    a = aggregate_stream([fwd])[0].channels
    b = aggregate_stream([rev])[0].channels
    assert np.array_equal(a, b)
    fa = aggregate_baseline(fwd, "event_frame").channels
    fb = aggregate_baseline(rev, "event_frame").channels
    assert not np.array_equal(fa, fb)


def test_event_frame_keeps_latest_polarity_and_count_keeps_both():
    w = window([(3, 3, 0, 1), (3, 3, 5, -1)])
    ef = aggregate_baseline(w, "event_frame").channels
    assert ef[0, 3, 3] == 0 and ef[1, 3, 3] == 1 and not ef[2].any()
    ec = aggregate_baseline(w, "event_count").channels
    assert ec[0, 3, 3] == 1 and ec[1, 3, 3] == 1 and not ec[2].any()


@pytest.mark.parametrize("method", ["event_frame", "event_count"])
def test_baselines_on_empty_window(method):
    assert not aggregate_baseline(window([]), method).channels.any()


def test_unknown_method_rejected():
    with pytest.raises(ValueError):
        aggregate_baseline(window([]), "time_surface")
    with pytest.raises(ValueError):
        Aggregator("voxel")


def test_aggregator_matches_functional_forms(rng):
    wins = random_windows(rng, 5)
    got = Aggregator("gtp").run(wins)
    ref = aggregate_stream(wins)
    assert all(np.array_equal(a.channels, b.channels) for a, b in zip(got, ref))
    scaled = Aggregator("event_frame", baseline_scale=30).run(wins)
    assert all(np.array_equal(s.channels, 30 * aggregate_baseline(w, "event_frame").channels)
               for s, w in zip(scaled, wins))


def test_aggregate_sequence_groups_subwindows(rng):
    wins = random_windows(rng, 6)
    vol = aggregate_sequence(wins, T=2)
    assert vol.shape == (3, 2, 3, 12, 16)
    flat = np.stack([im.channels for im in aggregate_stream(wins)])
    assert np.array_equal(vol.reshape(flat.shape), flat)
    with pytest.raises(ValueError):
        aggregate_sequence(wins[:5], T=2)


def test_gtp_values_nonnegative_and_alpha_multiples(rng):
    vol = aggregate_batch(random_windows(rng, 20), 30, 0.8)
    assert vol.min() >= 0
    assert np.all(np.mod(vol[:, :2], 30) == 0)


def test_raw_export_round_trip_and_preview(tmp_path, rng):
    img = aggregate_stream(random_windows(rng, 3))[-1]
    write_raw(tmp_path / "a.raw", img)
    back = read_raw(tmp_path / "a.raw")
    assert np.array_equal(back, img.channels.astype(np.float32))
    write_preview(tmp_path / "a.png", img)
    from PIL import Image
    arr = np.asarray(Image.open(tmp_path / "a.png"))
    assert arr.shape == (12, 16, 3)
    assert np.array_equal(arr, img.to_uint8())


def test_uint8_export_clamps():
    img = EventImage(np.array([[[300.0]], [[-5.0]], [[19.2]]]), 0, "gtp")
    assert img.to_uint8().tolist() == [[[255, 0, 19]]]
    assert img.normalized()[0, 0, 0] == np.float32(300 / 255)


def test_truncated_raw_rejected(tmp_path):
    img = EventImage(np.ones((3, 2, 2)), 0, "gtp")
    write_raw(tmp_path / "a.raw", img)
    blob = (tmp_path / "a.raw").read_bytes()
    (tmp_path / "a.raw").write_bytes(blob[:-4])
    with pytest.raises(ValueError):
        read_raw(tmp_path / "a.raw")
