"""End-to-end acceptance checks, one test per criterion.

The desk-scale dataset and the trained checkpoint are cached under
``.vrnet_cache`` in the repository root. Delete that directory (or set
``VRNET_RETRAIN=1``) to regenerate them; generation takes about four
minutes and training about half an hour on one core.
"""
import json
import math
import os
import time

import numpy as np
import pytest
from scipy.linalg import sqrtm

from vrnet import dataset as ds
from vrnet import inverse
from vrnet import microgen as mg
from vrnet import netgraph as ng
from vrnet.bounds import PhasePair, hill_average, reuss_bound, voigt_bound
from vrnet.fftsolver import analytic_laminate, envelope, homogenize, laminate_image, threshold_sweep
from vrnet.mandel import (
    DEFAULT_PHASES,
    IsotropicPhase,
    iso_stiffness_3d,
    isotropic_projection_6,
    loewner_leq,
    plane_strain_stiffness,
    rel_frobenius,
)
from vrnet.specnorm import NormalizedDOF, denormalize, dof_to_tilde, factor_gap, normalize
from vrnet.surrogate import (
    ModelConfig,
    TrainConfig,
    VRNet,
    evaluate,
    local_spikes,
    prepare,
    tau_sensitivity,
    train,
)

from .conftest import record
from .strategies import random_spd_pair
from .test_netgraph import PRIMITIVES, fd_error

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CACHE = os.path.join(ROOT, ".vrnet_cache")
DATA_PATH = os.path.join(CACHE, "ds3x3_s0_n100.jsonl")
MODEL_PATH = os.path.join(CACHE, "accept_model.json")
DATA_ARGS = dict(modes=((3, 3),), n_amplitudes=100, n_tau=25, c0_range=(0.01, 0.99), seed=0,
                 resolution=64)
TRAIN_BUDGET = 30 * 60.0
# stop starting new epochs early enough to finish the last one inside the budget
TRAIN_LIMIT = 27.5 * 60.0
TRAIN_CFG = TrainConfig(batch_size=64, lr=0.1, factor=0.5, patience=5, weight_decay=1e-4,
                        epochs=10_000, seed=0, time_limit=TRAIN_LIMIT)
RETRAIN = os.environ.get("VRNET_RETRAIN", "") in ("1", "true", "yes")


def timed(fn):
    t = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t


# ---------------------------------------------------------------- shared fixtures

@pytest.fixture(scope="session")
def records():
    """The 3x3-mode desk-scale dataset (built once, then cached)."""
    os.makedirs(CACHE, exist_ok=True)
    if os.path.exists(DATA_PATH) and not RETRAIN:
        with open(ds.manifest_path(DATA_PATH)) as fh:
            man = json.load(fh)
        same = (man["n_amplitudes"] == DATA_ARGS["n_amplitudes"] and man["n_tau"] == DATA_ARGS["n_tau"]
                and man["seed"] == DATA_ARGS["seed"] and man["resolution"] == DATA_ARGS["resolution"])
        if same:
            return ds.read_jsonl(DATA_PATH)
    recs, man = ds.build_dataset(**DATA_ARGS)
    ds.save_dataset(DATA_PATH, recs, man)
    return recs


@pytest.fixture(scope="session")
def trained(records):
    """``(model, info)`` for the 0.5-scale surrogate trained under the time budget."""
    if os.path.exists(MODEL_PATH) and not RETRAIN:
        model = VRNet.load(MODEL_PATH)
        with open(MODEL_PATH) as fh:
            info = json.load(fh)["meta"]["extra"]
        info["cached"] = True
        return model, info
    tr, va = ds.split_records(records)
    t0 = time.perf_counter()
    model = VRNet(ModelConfig(scale=0.5, resolution=64), DEFAULT_PHASES, TRAIN_CFG.seed)
    train_data = prepare(tr, model, TRAIN_CFG.temperature)
    val_data = prepare(va, model, TRAIN_CFG.temperature)
    res = train(train_data, val_data, tcfg=TRAIN_CFG, model=model,
                metrics_path=os.path.join(CACHE, "accept_metrics.csv"))
    info = {"elapsed": time.perf_counter() - t0, "best_val": res.best_val,
            "best_epoch": res.best_epoch, "epochs": len(res.history),
            "violations": res.violations, "steps": res.steps,
            "n_train": len(tr), "n_val": len(va)}
    model.save(MODEL_PATH, info)
    info["cached"] = False
    return model, info


@pytest.fixture(scope="session")
def val_arrays(records, trained):
    _, va = ds.split_records(records)
    return prepare(va, trained[0])


# ---------------------------------------------------------------- 1

def _random_envelope_tensor(v, r, rng):
    """``C = R + G^(1/2) M G^(1/2)`` with ``G = V - R`` and ``0 <= M <= I``."""
    m = v.shape[0]
    g = np.real(sqrtm(v - r))
    q, _ = np.linalg.qr(rng.standard_normal((m, m)))
    mm = (q * rng.uniform(0.0, 1.0, m)) @ q.T
    c = r + g @ mm @ g
    return 0.5 * (c + c.T)


def test_c01_spectral_round_trip():
    rng = np.random.default_rng(101)

    def run():
        worst = 0.0
        for k in range(1000):
            m = 3 if k % 2 == 0 else 6
            a, b = random_spd_pair(rng, m)
            p = PhasePair(a, b, float(rng.uniform(0.0, 1.0)))
            v, r = voigt_bound(p), reuss_bound(p)
            c = _random_envelope_tensor(v, r, rng)
            f = factor_gap(v, r)
            back = denormalize(normalize(c, f), f)
            worst = max(worst, rel_frobenius(c, back))
        return worst

    worst, dt = timed(run)
    ok = worst <= 1e-10 and dt < 5.0
    record(1, ok, f"spectral round trip: max rel error {worst:.2e} (<= 1e-10), {dt:.2f} s (< 5 s)")
    assert ok


# ---------------------------------------------------------------- 2

def _pair_cases(rng):
    """100 (V, R) pairs: plane-strain isotropic, anisotropic 6x6 and matched-bulk 3D."""
    out = []
    for k in range(100):
        c0 = float(rng.uniform(0.0, 1.0))
        if k % 10 == 0:
            kappa = float(rng.uniform(0.5, 5.0))
            a = iso_stiffness_3d(kappa, float(rng.uniform(0.1, 3.0)))
            b = iso_stiffness_3d(kappa, float(rng.uniform(0.1, 3.0)))
            kind = "matched-bulk"
        elif k % 2 == 0:
            e = np.exp(rng.uniform(0.0, np.log(1e4), 2))
            nu = rng.uniform(-0.5, 0.49, 2)
            a = plane_strain_stiffness(IsotropicPhase(e[0], nu[0]))
            b = plane_strain_stiffness(IsotropicPhase(e[1], nu[1]))
            kind = "plane"
        else:
            a, b = random_spd_pair(rng, 6)
            kind = "aniso6"
        p = PhasePair(a, b, c0)
        out.append((kind, voigt_bound(p), reuss_bound(p)))
    return out


def test_c02_architectural_guarantee():
    rng = np.random.default_rng(202)

    def run():
        fails = total = 0
        matched_rank = set()
        for kind, v, r in _pair_cases(rng):
            f = factor_gap(v, r)
            m = v.shape[0]
            if kind == "matched-bulk":
                matched_rank.add(f.rank)
            for _ in range(100):
                lam = rng.uniform(0.0, 1.0, m)
                q = rng.uniform(1e-6, 1.0 - 1e-6, m * (m - 1) // 2)
                c = denormalize(dof_to_tilde(NormalizedDOF(lam, q)), f)
                total += 1
                if not (loewner_leq(c, v, 1e-9) and loewner_leq(r, c, 1e-9)):
                    fails += 1
        return fails, total, matched_rank

    (fails, total, ranks), dt = timed(run)
    ok = fails == 0 and total == 10_000 and ranks == {5} and dt < 30.0
    record(2, ok, f"architectural guarantee: {total - fails}/{total} reconstructions admissible, "
                  f"matched-bulk gap rank {sorted(ranks)}, {dt:.1f} s (< 30 s)")
    assert ok


# ---------------------------------------------------------------- 3

def test_c03_oracle_correctness():
    def run():
        worst_lam = 0.0
        for axis in (0, 1):
            for n0 in (1, 8, 16, 32, 48, 63):
                res = homogenize(laminate_image(64, n0, axis), DEFAULT_PHASES)
                worst_lam = max(worst_lam, rel_frobenius(analytic_laminate(DEFAULT_PHASES, n0 / 64, axis),
                                                         res.cbar))
        worst_single = 0.0
        for value, phase in ((0, DEFAULT_PHASES[0]), (1, DEFAULT_PHASES[1])):
            res = homogenize(np.full((64, 64), float(value)), DEFAULT_PHASES)
            worst_single = max(worst_single, rel_frobenius(plane_strain_stiffness(phase), res.cbar))
        return worst_lam, worst_single

    (lam, single), dt = timed(run)
    ok = lam <= 1e-6 and single <= 1e-12 and dt < 60.0
    record(3, ok, f"oracle correctness: laminate error {lam:.2e} (<= 1e-6), single phase {single:.2e} "
                  f"(<= 1e-12), {dt:.1f} s (< 60 s)")
    assert ok


# ---------------------------------------------------------------- 4

def test_c04_voigt_reuss_sandwich():
    mode_sets = [(3, 3), (5, 5), (7, 7), (9, 9), (11, 11), (3, 7), (5, 9), (11, 3)]
    rng = np.random.default_rng(404)

    def run():
        fails = 0
        for k in range(200):
            modes = mode_sets[k % len(mode_sets)]
            a = mg.sample_amplitudes(rng, modes, 1)[0]
            tau = float(rng.uniform(0.05, 0.95))
            chi = mg.render(mg.MicroSpec.from_amplitudes(a, tau), 64)
            res = homogenize(chi, DEFAULT_PHASES)
            v, r = envelope(DEFAULT_PHASES, res.vol0)
            if not (loewner_leq(res.cbar, v, 1e-8) and loewner_leq(r, res.cbar, 1e-8)):
                fails += 1
        return fails

    fails, dt = timed(run)
    ok = fails == 0 and dt < 600.0
    record(4, ok, f"Voigt-Reuss sandwich: {200 - fails}/200 microstructures inside, {dt:.1f} s (< 600 s)")
    assert ok


# ---------------------------------------------------------------- 5

def test_c05_monotone_volume_fraction():
    rng = np.random.default_rng(505)
    taus = np.linspace(0.0, 1.0, 100)
    violations = 0
    for _ in range(50):
        a = mg.sample_amplitudes(rng, (5, 5), 1)[0]
        pt = mg.range_normalize(mg.field(mg.embed_center(a), 64))
        c1 = np.array([mg.threshold_hard(pt, t).mean() for t in taus])
        violations += int(np.sum(np.diff(c1) > 0.0))
    ok = violations == 0
    record(5, ok, f"monotone volume fraction: {violations} violations over 50 grids x 100 thresholds")
    assert ok


# ---------------------------------------------------------------- 6

def test_c06_gradient_fidelity(trained, records):
    model, _ = trained
    rng = np.random.default_rng(606)
    renderer = mg.Renderer(model.cfg.resolution)
    t_grad = 0.01
    worst = 0.0

    def loss(a, tau, target):
        chi = renderer.soft_graph(a, tau, t_grad)
        _, y, _, _ = model(chi, tau)
        d = ng.sub(y, target)
        return ng.sum(ng.frobenius_norm(d)) * (1.0 / math.sqrt(3.0))

    t0 = time.perf_counter()
    for _ in range(20):
        rec = records[int(rng.integers(len(records)))]
        target = normalize(rec.stiffness, model.gap.factor(rec.c0)).ytilde[None]
        a0 = mg.embed_center(rng.uniform(-1.0, 1.0, (3, 3)))[None]
        tau0 = np.array([rng.uniform(0.2, 0.8)])
        amp = ng.Parameter(a0.copy())
        tau = ng.Parameter(tau0.copy())
        loss(amp, tau, target).backward()
        # directional derivative along a random direction in (A, tau) on the active block
        da = np.zeros_like(a0)
        da[0, 4:7, 4:7] = rng.standard_normal((3, 3))
        dt_ = rng.standard_normal(1)
        ana = float(np.sum(amp.grad * da) + tau.grad @ dt_)
        # the ReLU trunk is piecewise smooth with many kinks; a small step keeps
        # the stencil on one smooth piece, round-off stays near 1e-9 relative
        h = 1e-7

        def value(s):
            return loss(ng.Node(a0 + s * da), ng.Node(tau0 + s * dt_), target).item()

        num = (value(h) - value(-h)) / (2 * h)
        worst = max(worst, abs(ana - num) / max(abs(num), 1e-12))
    prim = max(fd_error(f, [x.copy() for x in xs]) for f, xs in PRIMITIVES.values())
    dt = time.perf_counter() - t0
    ok = worst <= 1e-3 and prim <= 1e-6 and dt < 120.0
    record(6, ok, f"gradient fidelity: end-to-end {worst:.2e} (<= 1e-3) on 20 configs, "
                  f"primitives {prim:.2e} (<= 1e-6), {dt:.1f} s (< 120 s)")
    assert ok


# ---------------------------------------------------------------- 7

def test_c07_desk_scale_training(records, trained, val_arrays):
    model, info = trained
    phi, pred = evaluate(model, val_arrays)
    val = float(np.mean(phi))
    ok_v, ok_r = model.envelope_check(pred["C"], pred["c0"])
    inside = bool(ok_v.all() and ok_r.all())

    tr, _ = ds.split_records(records)
    small = VRNet(ModelConfig(scale=0.5, resolution=64), DEFAULT_PHASES, 0)
    res = train(prepare(tr[:10], small), None,
                tcfg=TrainConfig(batch_size=10, lr=0.01, epochs=300, patience=50, seed=0), model=small)
    overfit = min(r["train"] for r in res.history)

    n = len(records)
    ok = (n >= 2000 and val <= 0.08 and info["elapsed"] <= TRAIN_BUDGET and info["violations"] == 0
          and res.violations == 0 and inside and overfit < 1e-3)
    how = "cached checkpoint" if info["cached"] else "trained this run"
    record(7, ok, f"desk-scale training: {n} records, val mean phi {100 * val:.2f}% (<= 8%), "
                  f"trained in {info['elapsed'] / 60:.1f} min (<= 30, {info['epochs']} epochs, {how}), "
                  f"violations {info['violations'] + res.violations}, overfit train L {overfit:.1e} (< 1e-3)")
    assert ok


# ---------------------------------------------------------------- 8

SMOOTH_T = 0.01


def spike_matches(spikes, change):
    """``(spikes near a change, changes near a spike)`` with a 2-row window."""
    hits = sum(any(abs(i - j) <= 2 for j in change) for i in spikes)
    near = sum(any(abs(i - j) <= 2 for i in spikes) for j in change)
    return hits, near


def test_c08_percolation_diagnostics(trained):
    model, _ = trained
    rng = np.random.default_rng(808)
    sweeps = changes = 0
    tally = {"prod": [0, 0, 0], "smooth": [0, 0, 0], "oracle": [0, 0, 0]}
    while sweeps < 5:
        a = rng.uniform(-1.0, 1.0, (3, 3))
        rows = threshold_sweep(a, DEFAULT_PHASES, 100, model.cfg.resolution)
        change = [i for i, r in enumerate(rows) if r["transition"] and not r["degenerate"]
                  and not rows[i - 1]["degenerate"]]
        if not change:
            continue
        sweeps += 1
        changes += len(change)
        taus = [r["tau"] for r in rows]
        found = {}
        for key, temp in (("prod", mg.DEFAULT_T), ("smooth", SMOOTH_T)):
            found[key] = tau_sensitivity(model, a, taus, temp)[1]
        norms = [np.linalg.norm(r["cbar"]) for r in rows]
        found["oracle"] = local_spikes(np.gradient(norms, taus))
        for key, spikes in found.items():
            spikes = [i for i in spikes if not rows[i]["degenerate"]]
            hits, near = spike_matches(spikes, change)
            t = tally[key]
            t[0] += hits
            t[1] += len(spikes)
            t[2] += near

    def frac(t):
        return t[0] / t[1] if t[1] else 0.0

    prod = tally["prod"]
    ok = prod[1] > 0 and frac(prod) >= 0.8
    others = ", ".join(f"{name} {100 * frac(tally[k]):.0f}% ({tally[k][2]}/{changes})"
                       for k, name in (("smooth", f"T={SMOOTH_T}"), ("oracle", "FFT oracle")))
    record(8, ok, f"percolation diagnostics: {prod[0]}/{prod[1]} surrogate gradient spikes within 2 rows "
                  f"of a component change ({100 * frac(prod):.0f}%, >= 80%; {prod[2]}/{changes} changes "
                  f"with a spike); {others}")
    assert ok


# ---------------------------------------------------------------- 9

INV_STEPS = 150


def held_out_targets(records, n=4):
    """Oracle tensors of specs drawn outside the dataset amplitude stream."""
    seen = {r.a for r in records}
    rng = np.random.default_rng(909)
    out = []
    while len(out) < n:
        a = mg.sample_amplitudes(rng, (3, 3), 1)[0]
        if tuple(float(x) for x in a.ravel()) in seen:
            continue
        spec = mg.MicroSpec.from_amplitudes(a, float(rng.uniform(0.3, 0.7)))
        res = homogenize(mg.render(spec, 64), DEFAULT_PHASES)
        if 0.2 <= res.vol0 <= 0.8:
            out.append((spec, res.cbar))
    return out


def test_c09_inverse_self_recovery(trained, records):
    model, _ = trained
    t0 = time.perf_counter()
    lines, ok = [], True
    for k, (spec, target) in enumerate(held_out_targets(records)):
        run = inverse.multistart_optimize(model, "match", target, n_start=64, steps=INV_STEPS,
                                          seed=k)
        ver = inverse.verify_candidates(model, run, top_k=5, target=target)
        best = run.candidates[0]
        oracle = ver[0].oracle_error
        ok &= best.objective <= 0.03 and oracle <= 0.10 and run.violations == 0
        lines.append(f"{100 * best.objective:.2f}%/{100 * oracle:.2f}%")
    dt = time.perf_counter() - t0
    ok &= dt < 15 * 60
    record(9, ok, f"inverse self-recovery (surrogate/FFT per target): {', '.join(lines)} "
                  f"(<= 3% / <= 10%), {dt / 60:.1f} min (< 15)")
    assert ok


# ---------------------------------------------------------------- 10

COUPLING_STEPS = 500

def test_c10_coupling_maximisation(trained, records):
    model, _ = trained
    k_data = inverse.coupling_ratio(np.stack([r.stiffness for r in records]))
    p99 = float(np.percentile(k_data, 99))
    k_pred = inverse.coupling_ratio(model.predict_specs([r.spec() for r in records])["C"])
    p99_pred = float(np.percentile(k_pred, 99))
    run = inverse.multistart_optimize(model, "coupling", n_start=64, steps=COUPLING_STEPS, seed=10)
    best = run.candidates[0]
    (ver,) = inverse.verify_candidates(model, run, top_k=1)
    # ideal optimum: equal-fraction laminate rotated by 45 degrees
    lam = analytic_laminate(DEFAULT_PHASES, 0.5, 0)
    c, s = math.cos(math.pi / 4), math.sin(math.pi / 4)
    r2 = math.sqrt(2.0) * c * s
    q = np.array([[c * c, s * s, r2], [s * s, c * c, -r2], [-r2, r2, c * c - s * s]])
    ideal = abs(inverse.diagonal_asymmetry(q @ lam @ q.T))
    asym = abs(inverse.diagonal_asymmetry(best.prediction))
    # the candidate and the dataset are compared under the same map on each side
    ok = (best.objective >= p99_pred and ver.oracle_error >= p99 and asym >= 0.5 * ideal
          and run.violations == 0)
    record(10, ok, f"coupling maximisation: best K surrogate {best.objective:.4f} vs surrogate dataset "
                   f"p99 {p99_pred:.4f}, FFT {ver.oracle_error:.4f} vs FFT dataset p99 {p99:.4f} "
                   f"(mixed: surrogate K vs FFT p99 {best.objective - p99:+.4f}); "
                   f"|E(45)-E(135)|/mean E {asym:.2f} vs 45-degree laminate {ideal:.2f} (>= half)")
    assert ok


# ---------------------------------------------------------------- 11

def test_c11_hill_and_isotropic_projection():
    rng = np.random.default_rng(1111)
    hill_fail = 0
    proj_err = 0.0
    for _ in range(500):
        a, b = random_spd_pair(rng, 6)
        p = PhasePair(a, b, float(rng.uniform(0.0, 1.0)))
        h = hill_average(p)
        if not (loewner_leq(h, voigt_bound(p), 1e-9) and loewner_leq(reuss_bound(p), h, 1e-9)):
            hill_fail += 1
        c = a
        pc = isotropic_projection_6(c)[0]
        idem = np.linalg.norm(isotropic_projection_6(pc)[0] - pc) / np.linalg.norm(pc)
        orth = abs(np.sum(pc * (c - pc))) / np.linalg.norm(c) ** 2
        proj_err = max(proj_err, idem, orth)
    ok = hill_fail == 0 and proj_err <= 1e-10
    record(11, ok, f"Hill and isotropic projection: {500 - hill_fail}/500 Hill averages inside, "
                   f"projection idempotence/orthogonality error {proj_err:.1e} (<= 1e-10)")
    assert ok
