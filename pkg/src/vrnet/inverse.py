"""Multistart gradient-based inverse design through a frozen surrogate.

Design variables are the amplitude block of the cosine field and a
threshold logit (``tau = sigmoid(logit)`` stays in the open unit
interval). All starts run as one batch through the soft renderer and the
surrogate in eval mode, so every iterate's prediction is admissible by
construction.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from . import microgen
from . import netgraph as ng
from .fftsolver import SolverConfig, SolverError, homogenize
from .mandel import SQRT2, directional_young, eigvalsh

DEFAULT_STARTS = 64
DEFAULT_STEPS = 500
DEFAULT_LR = 0.05
OPT_T = 1e-2
ANNEAL_FRACTION = 0.1
MISMATCH_TOL = 0.02


@dataclass
class DesignVariable:
    """Amplitude block and threshold logit of one start."""

    amplitudes: np.ndarray
    tau_logit: float

    @property
    def tau(self):
        return float(1.0 / (1.0 + math.exp(-self.tau_logit)))

    def spec(self, temperature=microgen.DEFAULT_T):
        return microgen.MicroSpec.from_amplitudes(self.amplitudes, self.tau, temperature)


@dataclass
class Candidate:
    rank: int
    start: int
    variable: DesignVariable
    objective: float
    prediction: np.ndarray
    c0: float


@dataclass
class DesignRun:
    """Result of :func:`multistart_optimize`.

    ``history`` has shape (steps + 1, n_start) and holds the objective of
    every start before each update and after the last one. ``violations``
    counts Löwner failures of the predictions along all trajectories.
    """

    kind: str
    n_start: int
    history: np.ndarray
    candidates: list
    diverged: np.ndarray
    violations: int = 0
    settings: dict = field(default_factory=dict)

    def best(self, k=5):
        return self.candidates[:k]


# ---------------------------------------------------------------- objectives

def _check_target(target):
    c = np.asarray(target, dtype=float)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError("target must be a square matrix")
    if not np.allclose(c, c.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(c).max())):
        raise ValueError("target must be symmetric")
    if eigvalsh(c)[0] <= 0.0:
        raise ValueError("target is not positive definite; infeasible by construction")
    return c


def match_error(target, c_hat):
    """Relative Frobenius distance ``|C* - C|_F / |C*|_F`` (numpy, batched)."""
    target = np.asarray(target, dtype=float)
    d = np.asarray(c_hat, dtype=float) - target
    return np.sqrt(np.sum(d * d, axis=(-2, -1))) / np.linalg.norm(target)


def coupling_ratio(c_hat):
    """``(|C1112| + |C2212|) / |C|_F`` from Mandel matrices (numpy, batched)."""
    c = np.asarray(c_hat, dtype=float)
    num = (np.abs(c[..., 0, 2]) + np.abs(c[..., 1, 2])) / SQRT2
    return num / np.sqrt(np.sum(c * c, axis=(-2, -1)))


def objective_match(target, c_hat):
    """Node of per-sample relative distances to ``target``; ``c_hat`` is (B, 3, 3)."""
    target = _check_target(target)
    d = ng.sub(c_hat, target)
    return ng.mul(ng.frobenius_norm(d), 1.0 / np.linalg.norm(target))


def objective_coupling(c_hat):
    """Node of per-sample coupling ratios (to be maximised).

    ``absolute`` has derivative 0 at 0.
    """
    c_hat = ng.as_node(c_hat)
    num = ng.add(ng.absolute(c_hat[:, 0, 2]), ng.absolute(c_hat[:, 1, 2]))
    return ng.div(ng.mul(num, 1.0 / SQRT2), ng.frobenius_norm(c_hat))


# ---------------------------------------------------------------- optimisation

def _embedding(modes, k):
    m1, m2 = modes
    e1 = np.zeros((k, m1))
    e2 = np.zeros((k, m2))
    i0, j0 = (k - m1) // 2, (k - m2) // 2
    e1[i0:i0 + m1, :m1] = np.eye(m1)
    e2[j0:j0 + m2, :m2] = np.eye(m2)
    return e1, e2


def temperature_schedule(step, steps, t_opt=OPT_T, t_final=microgen.DEFAULT_T,
                         fraction=ANNEAL_FRACTION):
    """Constant ``t_opt`` then a geometric anneal to ``t_final`` over the last steps."""
    n_anneal = int(math.ceil(fraction * steps))
    start = steps - n_anneal
    if n_anneal == 0 or step < start:
        return t_opt
    s = (step - start + 1) / n_anneal
    return float(t_opt * (t_final / t_opt) ** s)


def initial_design(n_start, modes=(3, 3), seed=0):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1.0, 1.0, size=(n_start,) + tuple(modes))
    tau = rng.uniform(0.2, 0.8, size=n_start)
    return a, np.log(tau / (1.0 - tau))


def multistart_optimize(model, kind="match", target=None, n_start=DEFAULT_STARTS,
                        steps=DEFAULT_STEPS, lr=DEFAULT_LR, modes=(3, 3), seed=0,
                        init=None, t_opt=OPT_T, t_final=microgen.DEFAULT_T, progress=None):
    """Run ``n_start`` independent AdamW trajectories in one batch.

    Parameters
    ----------
    model : VRNet
        Frozen surrogate (switched to eval mode).
    kind : {"match", "coupling"}
        ``match`` minimises the distance to ``target``; ``coupling``
        maximises the shear-normal coupling ratio.
    modes : tuple
        Size of the optimised amplitude block, centred in the padded grid.
    init : tuple of arrays, optional
        ``(amplitudes (n, M1, M2), tau_logits (n,))``; default draws
        ``U[-1, 1]`` amplitudes and ``tau ~ U(0.2, 0.8)``.

    Returns
    -------
    DesignRun
        Candidates ranked by the final objective at ``t_final``.
    """
    if n_start < 1:
        raise ValueError("n_start must be at least 1")
    if steps < 0:
        raise ValueError("steps must be non-negative")
    if kind == "match":
        target = _check_target(target)
        sign = 1.0
    elif kind == "coupling":
        sign = -1.0
    else:
        raise ValueError(f"unknown objective {kind!r}")
    model.eval()
    modes = microgen.check_modes(modes)
    k = microgen.K_PAD
    e1, e2 = _embedding(modes, k)
    a0, l0 = init if init is not None else initial_design(n_start, modes, seed)
    a0 = np.asarray(a0, dtype=float).reshape((n_start,) + modes)
    l0 = np.asarray(l0, dtype=float).reshape(n_start)
    amp = ng.Parameter(a0)
    logit = ng.Parameter(l0)
    opt = ng.AdamW([amp, logit], lr=lr, weight_decay=0.0)
    renderer = microgen.Renderer(model.cfg.resolution, k)

    def evaluate(temperature):
        padded = ng.matmul(ng.matmul(e1, amp), e2.T)
        tau = ng.sigmoid(logit)
        chi = renderer.soft_graph(padded, tau, temperature)
        _, _, c, c0 = model(chi, tau)
        if kind == "match":
            obj = objective_match(target, c)
        else:
            obj = objective_coupling(c)
        return obj, c, c0

    history = np.empty((steps + 1, n_start))
    diverged = np.zeros(n_start, dtype=bool)
    violations = 0
    for step in range(steps + 1):
        temp = temperature_schedule(min(step, steps - 1), steps, t_opt, t_final) if steps else t_final
        obj, c, c0 = evaluate(temp)
        vals = obj.value
        history[step] = vals
        bad = ~np.isfinite(vals)
        diverged |= bad
        ok_v, ok_r = model.envelope_check(np.nan_to_num(c.value), c0.value)
        violations += int(np.sum(~(ok_v & ok_r) & ~bad))
        if step == steps:
            break
        opt.zero_grad()
        ng.sum(ng.mul(obj, sign)).backward()
        for p in (amp, logit):
            p.grad = np.where(np.isfinite(p.grad), p.grad, 0.0)
            p.grad[diverged] = 0.0
        opt.step()
        if progress:
            progress(step + 1, steps, vals)

    # final ranking at the production temperature
    final, c, c0 = evaluate(t_final)
    fv = np.where(np.isfinite(final.value), final.value, np.inf if sign > 0 else -np.inf)
    order = np.argsort(fv if sign > 0 else -fv, kind="stable")
    cands = []
    for r, s in enumerate(order):
        var = DesignVariable(amp.value[s].copy(), float(logit.value[s]))
        cands.append(Candidate(r, int(s), var, float(final.value[s]), c.value[s].copy(),
                               float(c0.value[s])))
    settings = {"n_start": n_start, "steps": steps, "lr": lr, "modes": list(modes), "seed": seed,
                "t_opt": t_opt, "t_final": t_final, "anneal_fraction": ANNEAL_FRACTION}
    return DesignRun(kind, n_start, history, cands, diverged, violations, settings)


def monotone_fraction(history, warmup=10, slack=0.0):
    """Fraction of starts whose best-so-far objective does not increase after ``warmup``.

    Best-so-far is a running minimum, so this measures whether the running
    minimum after warm-up ends at or below its value at the end of warm-up.
    """
    h = np.asarray(history, dtype=float)
    if h.shape[0] <= warmup + 1:
        return 1.0
    best = np.minimum.accumulate(h, axis=0)
    return float(np.mean(best[-1] <= best[warmup] + slack))


# ---------------------------------------------------------------- verification

@dataclass
class Verification:
    rank: int
    spec: microgen.MicroSpec
    c0: float
    surrogate: np.ndarray
    oracle: np.ndarray
    surrogate_error: float
    oracle_error: float
    soft_hard_mismatch: float
    flagged: bool
    converged: bool
    message: str = ""


def verify_candidates(model, run, top_k=5, target=None, cfg=None, mismatch_tol=MISMATCH_TOL):
    """Homogenise the hard-threshold render of the best candidates.

    For ``match`` runs both columns are relative Frobenius errors to
    ``target``; for ``coupling`` runs they are the coupling ratios of the
    surrogate and the oracle. A candidate is flagged when the mean absolute
    difference between its soft and hard renders exceeds ``mismatch_tol``.
    """
    cfg = cfg or SolverConfig()
    res = model.cfg.resolution
    out = []
    for cand in run.candidates[:top_k]:
        spec = cand.variable.spec()
        hard = microgen.render(spec, res, hard=True)
        soft = microgen.render(spec, res, hard=False)
        mismatch = float(np.mean(np.abs(soft - hard)))
        pred = model.predict_images(hard, spec.tau)["C"][0]
        converged, msg = True, ""
        try:
            oracle = homogenize(hard, model.phases, cfg).cbar
        except SolverError as exc:
            oracle = np.full((3, 3), np.nan)
            converged, msg = False, str(exc)
        if run.kind == "match":
            se = float(match_error(target, pred))
            oe = float(match_error(target, oracle)) if converged else float("nan")
        else:
            se = float(coupling_ratio(pred))
            oe = float(coupling_ratio(oracle)) if converged else float("nan")
        out.append(Verification(cand.rank, spec, 1.0 - float(hard.mean()), pred, oracle, se, oe,
                                mismatch, mismatch > mismatch_tol, converged, msg))
    return out


def polar_table(c, n=360):
    """Rows ``(theta, E)`` of the directional Young's modulus on ``n`` angles."""
    theta = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
    return np.column_stack([theta, directional_young(c, theta)])


def diagonal_asymmetry(c):
    """``(E(45°) - E(135°)) / mean E`` as a signed measure of 45-degree anisotropy."""
    e = directional_young(c, np.array([np.pi / 4, 3 * np.pi / 4]))
    mean = float(np.mean(polar_table(c, 72)[:, 1]))
    return float((e[0] - e[1]) / mean)
