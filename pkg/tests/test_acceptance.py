"""End-to-end acceptance checks, one test per criterion.

Run with ``pytest tests/test_acceptance.py``; the terminal summary lists a
PASS/FAIL line per criterion. Criterion 10 trains two toy models and takes
roughly half an hour on one core.
"""
import time
import zlib

import numpy as np
import pytest

from sdtrack import autodiff as ad
from sdtrack.autodiff import Parameter, Tensor, gradient_error
from sdtrack.events import EVENT_DTYPE, EventWindow
from sdtrack.gtp import GtpState, aggregate_batch, aggregate_next, aggregate_stream
from sdtrack.evaluation import corners, compute_metrics, iou, SequenceResult
from sdtrack.model import SDTrack, ssa, tiny_config, toy_config
from sdtrack.neurons import NeuronConfig
from sdtrack.nn import BatchNorm, Recorder, SpikingNeuron, recording, surrogate_substitution
from sdtrack.profiler import E_AC_PJ, E_MAC_PJ, FiringStats, LayerFlops, energy, model_energy, record_firing
from sdtrack.training import DataConfig, TrainConfig, giou_loss, train_toy, weighted_total
from sdtrack.weights import load_weights, save_weights

from helpers import randomize_bn, toy_inputs
from test_autodiff import op_cases
from test_cli import pipeline_outputs


def random_windows(rng, n_windows, w, h, max_events):
    out = []
    for i in range(n_windows):
        n = int(rng.integers(0, max_events))
        ev = np.zeros(n, dtype=EVENT_DTYPE)
        ev["x"] = rng.integers(0, w, n)
        ev["y"] = rng.integers(0, h, n)
        ev["t"] = np.sort(rng.integers(i * 1000, (i + 1) * 1000, n))
        ev["p"] = rng.choice(np.array([-1, 1], dtype=np.int8), n)
        out.append(EventWindow(ev, i * 1000, (i + 1) * 1000, w, h))
    return out


def window(events, w=8, h=8):
    arr = np.zeros(len(events), dtype=EVENT_DTYPE)
    for i, e in enumerate(events):
        arr[i] = e
    return EventWindow(arr, 0, 100, w, h)


@pytest.fixture(scope="module")
def toy():
    model = SDTrack(toy_config(), rng=3)
    randomize_bn(model, np.random.default_rng(5))
    return model


def test_criterion_01_streaming_equals_batch_aggregation():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    for _ in range(100):
        wins = random_windows(rng, int(rng.integers(50, 60)), 64, 64, 200)
        stream = np.stack([im.channels for im in aggregate_stream(wins, 30, 0.8)])
        assert np.array_equal(stream, aggregate_batch(wins, 30, 0.8))
    assert time.perf_counter() - t0 < 10


def test_criterion_02_three_frame_hand_trace():
    state = GtpState.initial(8, 8, 30, 0.8)
    frames = []
    for w in (window([(4, 4, 0, 1), (4, 4, 1, 1), (5, 5, 2, -1)]), window([]), window([])):
        img, state = aggregate_next(state, w)
        frames.append(img.channels)
    assert frames[0][0, 4, 4] == 60 and frames[0][1, 5, 5] == 30
    trace = [f[2, 4, 4] for f in frames]
    assert all(abs(a - b) <= 1e-9 for a, b in zip(trace, [30, 24, 19.2]))


def spike_record(model, z, x, mode):
    with recording(Recorder(strict=True)) as rec:
        model.predict(z, x, mode)
    return rec


def test_criterion_03_integer_and_spike_ahead_sums_match(toy):
    assert toy.config.neuron == NeuronConfig.ILIF(D=4, tau=2.0) and toy.config.T == 1
    rng = np.random.default_rng(30)
    active = 0
    for _ in range(50):
        z, x = toy_inputs(rng, toy.config)
        integer, expanded = spike_record(toy, z, x, "eval"), spike_record(toy, z, x, "infer")
        assert integer.spike_sums == expanded.spike_sums
        active += sum(integer.spike_sums.values()) > 0
    assert active == 50


def test_criterion_04_spike_purity_audit(toy):
    rng = np.random.default_rng(40)
    for _ in range(50):
        z, x = toy_inputs(rng, toy.config)
        for mode in ("infer", "eval"):
            rec = spike_record(toy, z, x, mode)
            assert rec.violations == 0
    float_ids = [m.layer_id for m in toy.layers() if m.kind.startswith("float")]
    assert float_ids == ["stem", "head.cls.out", "head.offset.out", "head.size.out"]


def test_criterion_05_gradient_checks(float64):
    t0 = time.perf_counter()
    for name, case in op_cases().items():
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        a, b, build = case(rng)
        w = rng.normal(size=build().shape)
        err = gradient_error(lambda: (build() * w).sum(), [a] if b is None else [a, b])
        assert err < 1e-4, name
    rng = np.random.default_rng(50)
    for cfg in (NeuronConfig.LIF(tau=2.0, u_thr=0.5), NeuronConfig.ILIF(D=4)):
        x = Tensor(rng.normal(size=(4, 2, 4, 4)), requires_grad=True)
        w = Parameter(rng.normal(size=(3, 2, 3, 3)) * 0.7)
        bn = BatchNorm(3, rng=rng)
        sn = SpikingNeuron(cfg)
        sn.spike_coding = "integer"
        m = Parameter(rng.normal(size=(3, 5)))
        proj = rng.normal(size=(4, 4, 4, 5))
        saved = {k: v.copy() for k, v in bn.buffers.items()}

        def chain():
            for k, v in saved.items():
                bn.buffers[k][...] = v
            s = sn(bn(ad.conv2d(x, w, padding=1)) * 2.0, T=2)
            return ((s.transpose(0, 2, 3, 1) @ m) * proj).sum()

        with surrogate_substitution():
            assert gradient_error(chain, [x, w, bn.gamma, bn.beta, m]) < 1e-4
    assert time.perf_counter() - t0 < 60


def test_criterion_06_ssa_association_order():
    q = Tensor(np.array([[1.0, 0], [0, 1]]))
    k = Tensor(np.array([[1.0, 1], [0, 1]]))
    v = Tensor(np.array([[1.0, 0], [1, 1]]))
    assert np.array_equal(ssa(q, k, v, 0.5).data, [[0.5, 0], [1, 0.5]])
    rng = np.random.default_rng(60)
    worst = 0.0
    for _ in range(1000):
        N, d = int(rng.integers(1, 33)), int(rng.integers(1, 17))
        s = float(rng.uniform(0.05, 1.0))
        a, b, c = ((rng.random((N, d)) < 0.5).astype(np.float64) for _ in range(3))
        got = ssa(Tensor(a), Tensor(b), Tensor(c), s).data
        worst = max(worst, float(np.abs(got - (a @ b.T) @ c * s).max()))
    assert worst <= 1e-6


def test_criterion_07_energy_oracle():
    assert (E_MAC_PJ, E_AC_PJ) == (4.6, 0.9)
    hand = energy([LayerFlops("a", "float_conv", 500), LayerFlops("b", "spike_conv", 1000)],
                  [FiringStats("b", 10, 2)], T=1)
    assert hand.total_pj == 2480.0

    cfg = tiny_config()
    model = SDTrack(cfg, rng=0)
    rng = np.random.default_rng(70)

    def sparse(n):
        return ((rng.random((cfg.T, 1, 3, n, n)) < 0.05) * rng.uniform(0.1, 0.6, (cfg.T, 1, 3, n, n))
                ).astype(np.float32)

    z, x = sparse(cfg.template_size), sparse(cfg.search_size)
    model.calibrate_bn(z, x)
    report = model_energy(model, z, x)
    assert report.ac_pj > 0 and report.T == cfg.T * cfg.neuron.D
    firing, ssa_ops = record_firing(model, z, x)
    from sdtrack.profiler import layer_flops
    flops = layer_flops(model)
    base = energy(flops, firing, 1, ssa_ops=ssa_ops).total_pj
    for T in (1, 2, 4):
        assert energy(flops, firing, T, ssa_ops=ssa_ops).total_pj == pytest.approx(T * base, rel=1e-12)
    # raise every layer's firing rate in turn; energy must never drop
    prev = base
    for i, f in enumerate(firing):
        firing[i] = FiringStats(f.layer_id, f.total, min(f.total, f.nonzero + max(1, f.total // 10)))
        cur = energy(flops, firing, 1, ssa_ops=ssa_ops).total_pj
        assert cur >= prev
        prev = cur
    assert prev > base


def test_criterion_08_loss_arithmetic():
    assert weighted_total(1.0, 1.0, 1.0) == 8.0
    pred, gt = np.array([[0.5, 0.5, 1.0, 1.0]]), np.array([[2.5, 0.5, 1.0, 1.0]])
    assert abs(giou_loss(pred, gt).item() - 4 / 3) <= 1e-9


def test_criterion_09_metrics_match_brute_force():
    rng = np.random.default_rng(90)
    gt = [(rng.uniform(20, 300), rng.uniform(20, 200), rng.uniform(5, 60), rng.uniform(5, 60)) for _ in range(100)]
    pred = [(g[0] + rng.normal(0, 15), g[1] + rng.normal(0, 15), g[2] * rng.uniform(0.5, 1.5),
             g[3] * rng.uniform(0.5, 1.5)) for g in gt]
    m = compute_metrics(SequenceResult(pred, gt, 346, 260))
    hits = sum(iou(corners(p), corners(g)) >= i / 20 for i in range(21) for p, g in zip(pred, gt))
    close = sum(((p[0] - g[0]) ** 2 + (p[1] - g[1]) ** 2) ** 0.5 < 20 for p, g in zip(pred, gt))
    assert m.auc == hits / 2100 and m.pr == close / 100
    edge = SequenceResult([(30, 10, 4, 4)], [(10, 10, 4, 4)], 64, 64)
    assert edge.distances[0] == 20.0 and compute_metrics(edge).pr == 0.0


def test_criterion_10_toy_end_to_end(tmp_path):
    train = TrainConfig(steps=3000, eval_every=500, n_eval=20)
    runs = {}
    for method in ("gtp", "event_frame"):
        _, report = train_toy(data=DataConfig(method=method), train=train, log_path=tmp_path / f"{method}.jsonl")
        runs[method] = report
        print(f"{method}: mean IoU {report.final_iou:.4f} AUC {report.final_auc:.4f} in {report.seconds:.0f} s")
    assert train.steps <= 5000
    assert runs["gtp"].final_iou >= 0.5
    assert runs["event_frame"].final_iou <= runs["gtp"].final_iou + 0.05
    assert sum(r.seconds for r in runs.values()) <= 2 * 3600


def test_criterion_11_round_trip_and_cli_determinism(tmp_path):
    model = SDTrack(toy_config(T=2), rng=7)
    randomize_bn(model, np.random.default_rng(8))
    save_weights(model, tmp_path / "m.sdtw")
    loaded = load_weights(tmp_path / "m.sdtw")
    z, x = toy_inputs(np.random.default_rng(9), model.config)
    for mode in ("infer", "eval"):
        a, b = model.forward(z, x, mode), loaded.forward(z, x, mode)
        for name in ("score", "offset", "size"):
            assert np.array_equal(getattr(a, name).data, getattr(b, name).data)
    first = pipeline_outputs(tmp_path / "a")
    second = pipeline_outputs(tmp_path / "b")
    assert first.keys() == second.keys() and all(first[k] == second[k] for k in first)
