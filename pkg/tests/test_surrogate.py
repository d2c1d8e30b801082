import csv
import math
from dataclasses import replace

import numpy as np
import pytest

from vrnet import microgen as mg
from vrnet import netgraph as ng
from vrnet.dataset import build_dataset
from vrnet.mandel import DEFAULT_PHASES, plane_strain_stiffness
from vrnet.surrogate import (
    ModelConfig,
    TrainConfig,
    TrainingError,
    VRNet,
    evaluate,
    local_spikes,
    prepare,
    render_soft,
    tau_sensitivity,
    train,
)

SMALL = ModelConfig(scale=0.25, mlp=(32, 16, 16, 16, 16), resolution=16)


def small_net(seed=0):
    return VRNet(SMALL, DEFAULT_PHASES, seed)


def random_images(n, res=16, seed=0):
    rng = np.random.default_rng(seed)
    specs = [replace(s, tau=float(rng.uniform(0.1, 0.9))) for s in mg.sample_spec(seed, (3, 3), 1, n)]
    return specs, np.stack([render_soft(s, res) for s in specs])


def warmed_net(seed=0):
    """A net whose batchnorm layers have seen one batch."""
    net = small_net(seed)
    _, chi = random_images(8, seed=seed + 100)
    net(ng.Node(chi), ng.Node(np.full(8, 0.5)))
    net.eval()
    return net


@pytest.fixture(scope="module")
def tiny_data():
    records, _ = build_dataset(n_amplitudes=3, n_tau=6, resolution=16, seed=4)
    net = small_net()
    return records, prepare(records, net)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(kernels=(3, 5), channels=(4,))
    with pytest.raises(ValueError):
        ModelConfig(resolution=8)
    with pytest.raises(ValueError):
        ModelConfig(out_dim=5)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    assert ModelConfig().scaled_channels == (9, 12, 15, 18)
    assert SMALL.scaled_mlp == (8, 4, 4, 4, 4)


def test_untrained_predictions_admissible():
    net = small_net(3)
    _, chi = random_images(12, seed=3)
    tau = np.linspace(0.1, 0.9, 12)
    # training mode: batchnorm uses batch statistics, weights are random
    _, y, c, c0 = net(ng.Node(chi), ng.Node(tau))
    ok_v, ok_r = net.envelope_check(c.value, c0.value)
    assert ok_v.all() and ok_r.all()
    w = np.linalg.eigvalsh(y.value)
    assert np.all(w > 0.0) and np.all(w < 1.0)
    np.testing.assert_allclose(c0.value, 1.0 - chi.mean(axis=(1, 2)), atol=1e-14)


def test_homogeneous_image_gives_phase_stiffness():
    net = warmed_net()
    out = net.predict_images(np.zeros((2, 16, 16)), np.array([0.3, 0.7]))
    c = plane_strain_stiffness(DEFAULT_PHASES[0])
    for k in range(2):
        assert np.linalg.norm(out["C"][k] - c) <= 1e-9 * np.linalg.norm(c)


def test_eval_deterministic_and_tau_fallback():
    net = warmed_net()
    _, chi = random_images(4)
    a = net.predict_images(chi, np.full(4, 0.4))
    b = net.predict_images(chi, np.full(4, 0.4))
    np.testing.assert_array_equal(a["C"], b["C"])
    c = net.predict_images(chi)
    assert c["tau_from_c0"] and not a["tau_from_c0"]
    np.testing.assert_allclose(c["tau"], c["c0"])


def test_resolution_mismatch():
    net = warmed_net()
    with pytest.raises(ValueError):
        net.predict_images(np.zeros((1, 32, 32)))


def test_save_load_roundtrip(tmp_path):
    net = warmed_net(5)
    _, chi = random_images(3)
    ref = net.predict_images(chi, np.full(3, 0.5))["C"]
    path = str(tmp_path / "net.json")
    net.gap.eps = 1e-9
    net.save(path, {"note": 1})
    other = VRNet.load(path)
    assert other.cfg == SMALL
    assert other.gap.eps == 1e-9
    np.testing.assert_array_equal(other.predict_images(chi, np.full(3, 0.5))["C"], ref)


def test_end_to_end_gradient_finite_differences():
    net = warmed_net(7)
    r = mg.Renderer(16)
    rng = np.random.default_rng(7)
    a0 = mg.embed_center(rng.uniform(-1, 1, (3, 3)))[None]
    tau0 = np.array([0.45])
    w = rng.standard_normal((1, 3, 3))
    w = w + w.transpose(0, 2, 1)

    def objective(a, tau):
        chi = r.soft_graph(a, tau, 0.01)
        _, _, c, _ = net(chi, tau)
        return ng.sum(ng.mul(c, w))

    amps = ng.Parameter(a0.copy())
    tau = ng.Parameter(tau0.copy())
    objective(amps, tau).backward()

    def value(a, t):
        return objective(ng.Node(a), ng.Node(t)).item()

    h = 1e-6
    num = np.zeros(4)
    ana = np.zeros(4)
    for n, idx in enumerate([(0, 5, 5), (0, 4, 6), (0, 6, 5)]):
        e = np.zeros_like(a0)
        e[idx] = h
        num[n] = (value(a0 + e, tau0) - value(a0 - e, tau0)) / (2 * h)
        ana[n] = amps.grad[idx]
    num[3] = (value(a0, tau0 + h) - value(a0, tau0 - h)) / (2 * h)
    ana[3] = tau.grad[0]
    assert np.linalg.norm(num - ana) <= 1e-6 * np.linalg.norm(num)


def test_prepare_and_evaluate(tiny_data):
    records, data = tiny_data
    assert data.chi.shape == (len(records), 16, 16)
    np.testing.assert_allclose(data.c0, [r.c0 for r in records])
    w = np.linalg.eigvalsh(data.target)
    assert np.all(w >= -1e-9) and np.all(w <= 1 + 1e-9)
    net = warmed_net()
    phi, pred = evaluate(net, data)
    assert phi.shape == (len(records),) and np.all(phi >= 0)


def test_small_overfit_and_metrics(tiny_data, tmp_path):
    _, data = tiny_data
    tcfg = TrainConfig(batch_size=8, lr=0.01, epochs=25, patience=100, seed=1)
    path = tmp_path / "metrics.csv"
    res = train(data, None, SMALL, tcfg, metrics_path=str(path))
    first = res.history[0]["train"]
    assert res.best_val < 0.5 * first
    assert res.violations == 0
    assert not res.model.training
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "lr", "L_train", "L_val"]
    assert len(rows) == 26


def test_training_is_deterministic(tiny_data):
    _, data = tiny_data
    tcfg = TrainConfig(batch_size=8, lr=0.01, epochs=2, seed=3)
    a = train(data, data, SMALL, tcfg)
    b = train(data, data, SMALL, tcfg)
    assert [r["val"] for r in a.history] == [r["val"] for r in b.history]


def test_nan_target_raises(tiny_data):
    _, data = tiny_data
    bad = type(data)(data.chi, data.tau, data.c0, data.target.copy(), data.cbar)
    bad.target[:] = np.nan
    with pytest.raises(TrainingError):
        train(bad, None, SMALL, TrainConfig(batch_size=8, epochs=1))


def test_local_spikes():
    v = [1, 1, 1, 10, 1, 1, 1, 1, 2, 1]
    assert local_spikes(v) == [3]
    assert local_spikes([1.0] * 5) == []


def test_tau_sensitivity_rows():
    net = warmed_net(2)
    a = np.random.default_rng(2).uniform(-1, 1, (3, 3))
    taus = np.linspace(0.2, 0.8, 7)
    rows, spikes = tau_sensitivity(net, a, taus, temperature=0.01)
    assert [r["tau"] for r in rows] == list(taus)
    assert all(r["inside"] for r in rows)
    assert all(math.isnan(r["phi"]) for r in rows)
    # central differences of the prediction norm
    h = 1e-6
    r = mg.Renderer(16)
    pad = mg.embed_center(a)[None]

    def norm(t):
        tn = ng.Node(np.array([t]))
        _, _, c, _ = net(r.soft_graph(ng.Node(pad), tn, 0.01), tn)
        return float(np.linalg.norm(c.value[0]))

    t = taus[3]
    fd = (norm(t + h) - norm(t - h)) / (2 * h)
    assert rows[3]["dnorm_dtau"] == pytest.approx(fd, rel=1e-5, abs=1e-6)
    assert all(0 <= i < len(rows) for i in spikes)
