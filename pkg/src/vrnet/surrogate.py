"""Image-to-stiffness surrogate with built-in Voigt–Reuss admissibility.

The network maps a (soft) indicator image plus the scalars ``[c0, tau]`` to
six numbers in ``(0, 1)``: three eigenvalues and three rotation parameters of
the normalised tensor ``Y``. The stiffness is recovered as
``C = V(c0) - L(c0) Y L(c0)``, so every prediction lies inside the
Voigt–Reuss envelope whatever the weights are.

Trunk: four residual blocks (periodic conv, batchnorm, ReLU, 2x2 average
pool; 1x1 conv shortcut). Head: five dense layers with mixed activations and
a sigmoid output.
"""
import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import microgen
from . import netgraph as ng
from .mandel import DEFAULT_PHASES, IsotropicPhase, loewner_leq_batch, plane_strain_stiffness
from .specnorm import GapModel, normalize, phi_graph, tilde_graph

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture. Channel counts and widths are multiplied by ``scale``."""

    kernels: tuple = (3, 5, 7, 9)
    channels: tuple = (18, 24, 30, 36)
    mlp: tuple = (256, 128, 64, 64, 64)
    out_dim: int = 6
    aux_dim: int = 2
    scale: float = 0.5
    resolution: int = 64

    def __post_init__(self):
        if len(self.kernels) != len(self.channels):
            raise ValueError("one kernel size per residual block is required")
        m = 3
        if self.out_dim != m + m * (m - 1) // 2:
            raise ValueError("output dimension must be 6 for plane strain")
        if self.resolution < 2 ** len(self.channels):
            raise ValueError("resolution too small for the number of pooling stages")
        if not self.scale > 0.0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "kernels", tuple(int(k) for k in self.kernels))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "mlp", tuple(int(w) for w in self.mlp))

    @property
    def scaled_channels(self):
        return tuple(max(1, int(round(c * self.scale))) for c in self.channels)

    @property
    def scaled_mlp(self):
        return tuple(max(4, int(round(w * self.scale))) for w in self.mlp)

    @property
    def flat_dim(self):
        side = self.resolution
        for _ in self.channels:
            side //= 2
        return self.scaled_channels[-1] * side * side


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings (batch size, epochs and decay are our defaults)."""

    batch_size: int = 64
    lr: float = 1e-1
    factor: float = 0.5
    patience: int = 50
    min_lr: float = 1e-6
    epochs: int = 300
    weight_decay: float = 1e-4
    seed: int = 0
    temperature: float = microgen.DEFAULT_T
    time_limit: float = 0.0
    check_admissibility: bool = True

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2 (batchnorm)")
        for name in ("lr", "temperature"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


class TrainingError(RuntimeError):
    """Raised on a non-finite loss."""


class ResidualBlock(ng.Module):
    def __init__(self, c_in, c_out, k, rng):
        super().__init__()
        self.conv = ng.PeriodicConv2d(c_in, c_out, k, rng)
        self.bn = ng.BatchNorm(c_out)
        self.short = ng.PeriodicConv2d(c_in, c_out, 1, rng)
        self.short_bn = ng.BatchNorm(c_out)

    def __call__(self, x):
        main = ng.avgpool2(ng.relu(self.bn(self.conv(x))))
        short = ng.avgpool2(self.short_bn(self.short(x)))
        return ng.relu(ng.add(main, short))


class VRNet(ng.Module):
    """Residual CNN + MLP + spectral back-transform for one phase pair."""

    def __init__(self, cfg=None, phases=DEFAULT_PHASES, seed=0):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.phases = tuple(phases)
        self.seed = seed
        rng = np.random.default_rng(seed)
        chans = (1,) + self.cfg.scaled_channels
        self.blocks = [ResidualBlock(chans[i], chans[i + 1], k, rng)
                       for i, k in enumerate(self.cfg.kernels)]
        widths = (self.cfg.flat_dim + self.cfg.aux_dim,) + self.cfg.scaled_mlp
        self.dense = [ng.Dense(widths[i], widths[i + 1], rng) for i in range(len(widths) - 1)]
        self.dense_bn = [ng.BatchNorm(w) for w in widths[1:]]
        self.head = ng.Dense(widths[-1], self.cfg.out_dim, rng)
        self.gap = GapModel(plane_strain_stiffness(phases[0]), plane_strain_stiffness(phases[1]))

    # -- forward pieces
    def features(self, chi, tau):
        """DOF node ``xi`` (B, 6) from an image node (B, H, W) and ``tau`` (B,)."""
        chi = ng.as_node(chi)
        b, h, w = chi.shape
        if h != self.cfg.resolution or w != self.cfg.resolution:
            raise ValueError(f"image is {h}x{w}, model expects {self.cfg.resolution}^2")
        c0 = ng.sub(1.0, ng.mean(chi, axis=(1, 2)))
        x = ng.reshape(chi, (b, 1, h, w))
        for blk in self.blocks:
            x = blk(x)
        aux = ng.stack([c0, ng.as_node(tau)], axis=1)
        x = ng.concat([ng.flatten(x), aux], axis=1)
        for layer, bn in zip(self.dense, self.dense_bn):
            x = ng.mixed_activation(bn(layer(x)))
        return ng.sigmoid(self.head(x)), c0

    def __call__(self, chi, tau):
        """Return nodes ``(xi, Y, C, c0)``."""
        xi, c0 = self.features(chi, tau)
        y = tilde_graph(xi)
        c = self.gap.denormalize_graph(y, c0)
        return xi, y, c, c0

    # -- convenience
    def predict_images(self, chi, tau=None, batch=256):
        """Numpy forward in eval mode.

        ``tau`` defaults to the image ``c0`` (the image path has no threshold).
        Returns a dict of arrays ``xi``, ``Y``, ``C``, ``c0``, ``tau`` and the
        flag ``tau_from_c0``.
        """
        chi = np.asarray(chi, dtype=float)
        if chi.ndim == 2:
            chi = chi[None]
        fallback = tau is None
        if fallback:
            tau = 1.0 - chi.mean(axis=(1, 2))
        tau = np.broadcast_to(np.asarray(tau, dtype=float), (chi.shape[0],))
        was = self.training
        self.eval()
        outs = {"xi": [], "Y": [], "C": [], "c0": []}
        try:
            for s in range(0, chi.shape[0], batch):
                xi, y, c, c0 = self(ng.Node(chi[s:s + batch]), ng.Node(tau[s:s + batch]))
                for k, v in zip(("xi", "Y", "C", "c0"), (xi, y, c, c0)):
                    outs[k].append(v.value)
        finally:
            self.train(was)
        res = {k: np.concatenate(v) for k, v in outs.items()}
        res["tau"] = np.array(tau)
        res["tau_from_c0"] = fallback
        return res

    def predict_specs(self, specs, temperature=None):
        chi = np.stack([render_soft(s, self.cfg.resolution, temperature) for s in specs])
        return self.predict_images(chi, np.array([s.tau for s in specs]))

    def envelope_check(self, c, c0, tol=1e-9):
        """Boolean arrays ``(below_voigt, above_reuss)``."""
        v, r = self.gap.bounds(np.asarray(c0, dtype=float))
        return loewner_leq_batch(c, v, tol), loewner_leq_batch(r, c, tol)

    # -- persistence
    def meta(self):
        return {
            "model": asdict(self.cfg),
            "phases": [{"young": p.young, "poisson": p.poisson} for p in self.phases],
            "seed": self.seed,
            "aux_inputs": ["c0", "tau"],
            "gap_eps": self.gap.eps,
            "layers": [name for name, _ in self.named_parameters()],
        }

    def save(self, path, extra=None):
        meta = self.meta()
        if extra:
            meta["extra"] = extra
        return ng.save_checkpoint(path, self, meta)

    @classmethod
    def load(cls, path):
        state, meta = ng.read_checkpoint(path)
        m = dict(meta["model"])
        cfg = ModelConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in m.items()})
        phases = tuple(IsotropicPhase(p["young"], p["poisson"]) for p in meta["phases"])
        net = cls(cfg, phases, meta.get("seed", 0))
        if "gap_eps" in meta:
            net.gap.eps = float(meta["gap_eps"])
        net.load_state_dict(state)
        net.eval()
        return net


def render_soft(spec, resolution, temperature=None):
    t = spec.temperature if temperature is None else temperature
    return microgen.threshold_soft(microgen.range_normalize(microgen.field(spec, resolution)),
                                   spec.tau, t)


# ---------------------------------------------------------------- data

@dataclass
class Arrays:
    """Pre-rendered training arrays."""

    chi: np.ndarray
    tau: np.ndarray
    c0: np.ndarray
    target: np.ndarray
    cbar: np.ndarray


def prepare(records, model, temperature=microgen.DEFAULT_T):
    """Render images and normalise labels with the gap factor of each record's ``c0``."""
    n = len(records)
    res = model.cfg.resolution
    chi = np.empty((n, res, res))
    target = np.empty((n, 3, 3))
    cbar = np.empty((n, 3, 3))
    for i, rec in enumerate(records):
        chi[i] = render_soft(rec.spec(temperature), res)
        c = rec.stiffness
        cbar[i] = c
        target[i] = normalize(c, model.gap.factor(rec.c0)).ytilde
    tau = np.array([r.tau for r in records])
    c0 = np.array([r.c0 for r in records])
    return Arrays(chi, tau, c0, target, cbar)


def evaluate(model, data, batch=256):
    """Per-sample ``phi`` on prepared arrays in eval mode."""
    pred = model.predict_images(data.chi, data.tau, batch)
    d = pred["Y"] - data.target
    return np.sqrt(np.sum(d * d, axis=(1, 2)) / 3.0), pred


@dataclass
class TrainResult:
    model: VRNet
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = math.inf
    violations: int = 0
    steps: int = 0
    elapsed: float = 0.0


def train(train_data, val_data, mcfg=None, tcfg=None, phases=DEFAULT_PHASES, model=None,
          metrics_path=None, on_epoch=None):
    """Minimise the mean normalised error ``phi`` with AdamW and plateau decay.

    The loss is computed on ``Y`` only. The model with the best validation
    loss is restored before returning; if ``val_data`` is None the training
    loss is used instead.
    """
    tcfg = tcfg or TrainConfig()
    model = model or VRNet(mcfg, phases, tcfg.seed)
    model.train()
    params = model.parameters()
    opt = ng.AdamW(params, lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    sched = ng.LrSchedule(tcfg.lr, tcfg.factor, tcfg.patience, tcfg.min_lr)
    rng = np.random.default_rng(tcfg.seed)
    n = train_data.chi.shape[0]
    bs = min(tcfg.batch_size, n)
    out = TrainResult(model)
    best_state = None
    t0 = time.time()
    rows = []
    for epoch in range(tcfg.epochs):
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, bs):
            idx = order[s:s + bs]
            if idx.size < 2:
                continue
            model.zero_grad()
            xi, y, c, c0 = model(ng.Node(train_data.chi[idx]), ng.Node(train_data.tau[idx]))
            phi = phi_graph(train_data.target[idx], y)
            loss = ng.mean(phi)
            if not math.isfinite(loss.item()):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, step {out.steps}; "
                    f"lr={opt.lr:g}, xi range [{np.nanmin(xi.value):g}, {np.nanmax(xi.value):g}]"
                )
            loss.backward()
            opt.step()
            out.steps += 1
            losses.append(loss.item() * idx.size)
            if tcfg.check_admissibility:
                ok_v, ok_r = model.envelope_check(c.value, c0.value)
                out.violations += int(np.sum(~ok_v) + np.sum(~ok_r))
        train_loss = float(np.sum(losses) / n)
        if val_data is not None and val_data.chi.shape[0] > 0:
            val_loss = float(np.mean(evaluate(model, val_data)[0]))
        else:
            val_loss = train_loss
        row = {"epoch": epoch, "lr": opt.lr, "train": train_loss, "val": val_loss,
               "time": time.time() - t0}
        rows.append(row)
        if val_loss < out.best_val:
            out.best_val = val_loss
            out.best_epoch = epoch
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
        opt.lr = sched.step(val_loss)
        if on_epoch:
            on_epoch(row)
        log.info("epoch %d lr %.3g train %.5f val %.5f", epoch, row["lr"], train_loss, val_loss)
        if tcfg.time_limit and time.time() - t0 > tcfg.time_limit:
            break
    out.history = rows
    out.elapsed = time.time() - t0
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    if metrics_path:
        write_metrics(metrics_path, rows)
    return out


def write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "L_train", "L_val"])
        for r in rows:
            w.writerow([r["epoch"], f"{r['lr']:.6g}", f"{r['train']:.8g}", f"{r['val']:.8g}"])


# ---------------------------------------------------------------- diagnostics

def local_spikes(values, multiple=3.0):
    """Indices of interior local maxima exceeding ``multiple`` times the median."""
    v = np.abs(np.asarray(values, dtype=float))
    med = np.median(v)
    out = []
    for i in range(len(v)):
        left = v[i - 1] if i > 0 else -np.inf
        right = v[i + 1] if i + 1 < len(v) else -np.inf
        if v[i] >= left and v[i] >= right and v[i] > multiple * med:
            out.append(i)
    return out


def tau_sensitivity(model, a, taus, temperature=microgen.DEFAULT_T, oracle=None, spike_multiple=3.0):
    """Frobenius norm of the prediction along a threshold sweep and its ``tau`` derivative.

    The derivative is back-propagated through the soft renderer, the
    network and the gap factor.

    Parameters
    ----------
    a : ndarray
        Amplitude grid (any odd size up to the padded size).
    taus : array of float
    oracle : list of dict, optional
        Rows of :func:`vrnet.fftsolver.threshold_sweep` on the same grid;
        adds a ``phi`` column.

    Returns
    -------
    rows : list of dict
        ``tau``, ``norm``, ``dnorm_dtau``, ``c0``, ``C``, ``inside``, ``phi``.
    spikes : list of int
    """
    renderer = microgen.Renderer(model.cfg.resolution)
    pad = microgen.embed_center(np.asarray(a, dtype=float))
    taus = np.asarray(taus, dtype=float)
    was = model.training
    model.eval()
    try:
        tau_node = ng.Parameter(taus)
        amps = ng.Node(np.broadcast_to(pad, (taus.size,) + pad.shape).copy())
        chi = renderer.soft_graph(amps, tau_node, temperature)
        _, y, c, c0 = model(chi, tau_node)
        norm = ng.frobenius_norm(c)
        ng.sum(norm).backward()
    finally:
        model.train(was)
    ok_v, ok_r = model.envelope_check(c.value, c0.value)
    rows = []
    for i, t in enumerate(taus):
        row = {"tau": float(t), "norm": float(norm.value[i]), "dnorm_dtau": float(tau_node.grad[i]),
               "c0": float(c0.value[i]), "C": c.value[i], "inside": bool(ok_v[i] and ok_r[i]),
               "phi": float("nan")}
        if oracle is not None:
            o = oracle[i]
            if not o["degenerate"] and o["converged"]:
                f = model.gap.factor(o["c0"])
                yt = normalize(o["cbar"], f).ytilde
                row["phi"] = float(np.linalg.norm(yt - y.value[i]) / math.sqrt(3.0))
        rows.append(row)
    spikes = local_spikes([r["dnorm_dtau"] for r in rows], spike_multiple)
    return rows, spikes
