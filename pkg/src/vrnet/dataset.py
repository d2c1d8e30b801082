"""Dataset records, JSON-Lines I/O and the generation pipeline.

Each record holds one unit cell (mode sizes, amplitudes, threshold), its
phase-0 volume fraction and the homogenised stiffness as the six upper
triangle entries ``C11, C22, C33, C12, C13, C23`` of the Mandel matrix.
Floats are written with 17 significant digits so files round-trip
byte-identically.
"""
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import microgen
from .fftsolver import SolverConfig, SolverError, envelope, homogenize
from .mandel import DEFAULT_PHASES, format_float, loewner_leq

log = logging.getLogger(__name__)

_UPPER = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))


def cbar_to_vec(c):
    return [float(c[i, j]) for i, j in _UPPER]


def vec_to_cbar(v):
    c = np.zeros((3, 3))
    for (i, j), x in zip(_UPPER, v):
        c[i, j] = c[j, i] = x
    return c


@dataclass(frozen=True)
class DatasetRecord:
    m1: int
    m2: int
    a: tuple
    tau: float
    c0: float
    cbar: tuple
    split: str = "train"

    def __post_init__(self):
        if len(self.a) != self.m1 * self.m2:
            raise ValueError("amplitude count does not match mode sizes")
        if len(self.cbar) != 6:
            raise ValueError("cbar needs six entries")
        if self.split not in ("train", "val"):
            raise ValueError(f"unknown split tag {self.split!r}")

    @property
    def amplitudes(self):
        return np.array(self.a, dtype=float).reshape(self.m1, self.m2)

    @property
    def stiffness(self):
        return vec_to_cbar(self.cbar)

    def spec(self, temperature=microgen.DEFAULT_T):
        return microgen.MicroSpec.from_amplitudes(self.amplitudes, self.tau, temperature)

    def to_json(self):
        fl = lambda xs: "[" + ", ".join(format_float(x) for x in xs) + "]"  # noqa: E731
        return (
            f'{{"m1": {self.m1}, "m2": {self.m2}, "a": {fl(self.a)}, '
            f'"tau": {format_float(self.tau)}, "c0": {format_float(self.c0)}, '
            f'"cbar": {fl(self.cbar)}, "split": "{self.split}"}}'
        )

    @classmethod
    def from_json(cls, line):
        d = json.loads(line, parse_int=float)  # keeps the sign of "-0"
        return cls(int(d["m1"]), int(d["m2"]), tuple(float(x) for x in d["a"]),
                   float(d["tau"]), float(d["c0"]), tuple(float(x) for x in d["cbar"]),
                   d.get("split", "train"))


def check_record(rec, phases=DEFAULT_PHASES, tol=1e-6):
    """True if the stored stiffness is SPD and inside the envelope of ``c0``."""
    c = rec.stiffness
    if np.linalg.eigvalsh(c)[0] <= 0.0:
        return False
    v, r = envelope(phases, rec.c0)
    return loewner_leq(c, v, tol) and loewner_leq(r, c, tol)


def write_jsonl(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_jsonl(path):
    with open(path) as fh:
        return [DatasetRecord.from_json(line) for line in fh if line.strip()]


def manifest_path(path):
    root, _ = os.path.splitext(path)
    return root + ".manifest.json"


def _amplitude_job(args):
    a, taus, resolution, phases, cfg_tuple, c0_range = args
    cfg = SolverConfig(*cfg_tuple)
    pt = microgen.range_normalize(microgen.field(microgen.embed_center(a), resolution))
    out, failures, filtered = [], 0, 0
    for k, tau in enumerate(taus):
        chi = microgen.threshold_hard(pt, tau)
        c0 = 1.0 - float(chi.mean())
        if not (c0_range[0] <= c0 <= c0_range[1]):
            filtered += 1
            continue
        try:
            res = homogenize(chi, phases, cfg)
        except SolverError as exc:
            log.warning("solver failure at tau=%g: %s", tau, exc)
            failures += 1
            continue
        out.append((k, float(tau), c0, cbar_to_vec(res.cbar)))
    return out, failures, filtered


def worker_count():
    try:
        return max(1, int(os.environ.get("VRNET_THREADS", "1")))
    except ValueError:
        return 1


def build_dataset(modes=((3, 3),), n_amplitudes=100, n_tau=25, c0_range=(0.01, 0.99),
                  seed=0, resolution=64, phases=DEFAULT_PHASES, cfg=None,
                  val_fraction=0.2, workers=None, progress=None):
    """Generate, filter, homogenise and split.

    Amplitudes for each mode set come from an independent stream seeded by
    ``(seed, M1, M2)``. The train/validation split is drawn per record and
    stratified by mode set. Output order is (mode set, amplitude, threshold)
    regardless of the worker count.

    Returns
    -------
    records : list of DatasetRecord
    manifest : dict
    """
    cfg = cfg or SolverConfig()
    workers = workers or worker_count()
    taus = microgen.tau_grid(n_tau)
    cfg_tuple = (cfg.tol, cfg.max_iter, cfg.reference_medium)
    records, counts = [], {}
    total_fail = total_filtered = 0
    for mset in modes:
        m1, m2 = microgen.check_modes(mset)
        rng = np.random.default_rng([seed, m1, m2])
        amps = microgen.sample_amplitudes(rng, (m1, m2), n_amplitudes)
        jobs = [(a, taus, resolution, phases, cfg_tuple, c0_range) for a in amps]
        if workers > 1:
            with ProcessPoolExecutor(workers) as ex:
                results = list(ex.map(_amplitude_job, jobs, chunksize=4))
        else:
            results = []
            for i, job in enumerate(jobs):
                results.append(_amplitude_job(job))
                if progress:
                    progress(i + 1, len(jobs))
        rows = []
        for a, (out, fails, filt) in zip(amps, results):
            total_fail += fails
            total_filtered += filt
            for _, tau, c0, vec in out:
                rows.append((a, tau, c0, vec))
        split_rng = np.random.default_rng([seed, m1, m2, 1])
        n_val = int(round(val_fraction * len(rows)))
        is_val = np.zeros(len(rows), dtype=bool)
        is_val[split_rng.permutation(len(rows))[:n_val]] = True
        for (a, tau, c0, vec), v in zip(rows, is_val):
            records.append(DatasetRecord(m1, m2, tuple(float(x) for x in a.ravel()), tau, c0,
                                         tuple(vec), "val" if v else "train"))
        counts[f"{m1}x{m2}"] = {"candidates": n_amplitudes * n_tau, "retained": len(rows),
                                "val": int(n_val)}
    manifest = {
        "seed": seed,
        "modes": [list(m) for m in modes],
        "n_amplitudes": n_amplitudes,
        "n_tau": n_tau,
        "c0_range": list(c0_range),
        "resolution": resolution,
        "phases": [{"young": p.young, "poisson": p.poisson} for p in phases],
        "solver": {"tol": cfg.tol, "max_iter": cfg.max_iter,
                   "reference_medium": cfg.reference_medium},
        "split": {"train": 1.0 - val_fraction, "val": val_fraction},
        "counts": counts,
        "filtered": total_filtered,
        "solver_failures": total_fail,
        "records": len(records),
    }
    return records, manifest


def save_dataset(path, records, manifest):
    write_jsonl(path, records)
    with open(manifest_path(path), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def split_records(records):
    train = [r for r in records if r.split == "train"]
    val = [r for r in records if r.split == "val"]
    return train, val
