"""Command-line interface.

Machine-readable results go to ``--out`` (or standard output), short human
summaries to standard error. Exit codes: 0 success, 1 invalid arguments,
2 numerical failure, 3 I/O failure.
"""
import argparse
import csv
import json
import logging
import math
import os
import sys

import numpy as np

from . import bounds, dataset, inverse, microgen
from .fftsolver import SolverConfig, SolverError, envelope, homogenize, threshold_sweep
from .mandel import DEFAULT_PHASES, IsotropicPhase, eigvalsh, format_float, loewner_leq

log = logging.getLogger("vrnet")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
VERDICT_TOL = 1e-8


class UsageError(Exception):
    pass


class InputError(Exception):
    """Unreadable or malformed input file."""


class NumericalError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers

def parse_phases(text):
    try:
        vals = [float(x) for x in text.split(",")]
    except ValueError:
        raise UsageError(f"--phases expects four numbers, got {text!r}") from None
    if len(vals) != 4:
        raise UsageError("--phases expects E0,nu0,E1,nu1")
    try:
        return IsotropicPhase(vals[0], vals[1]), IsotropicPhase(vals[2], vals[3])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def parse_modes(text):
    out = []
    for item in text.split(","):
        try:
            m1, m2 = (int(x) for x in item.lower().split("x"))
            out.append(microgen.check_modes((m1, m2)))
        except ValueError as exc:
            raise UsageError(f"bad mode set {item!r}: {exc}") from None
    return tuple(out)


def parse_pair(text, name):
    try:
        lo, hi = (float(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"{name} expects two numbers") from None
    return lo, hi


def _read_text(path):
    try:
        with open(path) as fh:
            return fh.read()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None


def _load_json(path):
    try:
        return json.loads(_read_text(path))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None


def spec_to_dict(spec):
    return {"modes": list(spec.modes), "amplitudes": spec.amplitudes.tolist(),
            "tau": spec.tau, "temperature": spec.temperature}


def spec_from_dict(d):
    try:
        a = np.array(d["amplitudes"], dtype=float)
        return microgen.MicroSpec.from_amplitudes(a, float(d["tau"]),
                                                  float(d.get("temperature", microgen.DEFAULT_T)))
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed spec: {exc}") from None


def load_spec(path):
    return spec_from_dict(_load_json(path))


def load_image(path):
    try:
        return microgen.read_pgm(path)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None
    except ValueError as exc:
        raise InputError(str(exc)) from None


def load_matrix(path):
    d = _load_json(path)
    if isinstance(d, dict):
        d = d.get("C", d.get("cbar", d.get("matrix")))
    try:
        c = np.array(d, dtype=float)
    except (TypeError, ValueError):
        raise InputError(f"{path}: no 3x3 matrix found") from None
    if c.shape != (3, 3):
        raise InputError(f"{path}: expected a 3x3 matrix, got shape {c.shape}")
    return c


def verdict(c, phases, c0, tol=VERDICT_TOL):
    """Envelope check of a stiffness for the phase pair at ``c0``."""
    v, r = envelope(phases, c0)
    c = np.asarray(c, dtype=float)
    return {"c0": c0, "below_voigt": bool(loewner_leq(c, v, tol)),
            "above_reuss": bool(loewner_leq(r, c, tol)), "tol": tol}


def _matrix(c):
    return [[float(x) for x in row] for row in np.asarray(c)]


class _Output:
    """Context manager writing to ``--out`` or standard output."""

    def __init__(self, path, newline=None):
        self.path = path
        self.newline = newline

    def __enter__(self):
        if self.path in (None, "-"):
            self.fh = sys.stdout
        else:
            try:
                self.fh = open(self.path, "w", newline=self.newline)
            except OSError as exc:
                raise InputError(f"cannot write {self.path}: {exc}") from None
        return self.fh

    def __exit__(self, *exc):
        if self.fh is not sys.stdout:
            self.fh.close()
        return False


def write_json(path, obj):
    with _Output(path) as fh:
        json.dump(obj, fh, indent=1)
        fh.write("\n")


def _solver_cfg(args):
    return SolverConfig(tol=args.tol)


def _load_model(path):
    from .surrogate import VRNet
    if not path:
        raise UsageError("--checkpoint is required")
    try:
        return VRNet.load(path)
    except OSError as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from None
    except (KeyError, ValueError) as exc:
        raise InputError(f"bad checkpoint {path}: {exc}") from None


def _say(msg):
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------- commands

def cmd_dataset(args):
    modes = parse_modes(args.modes)
    lo, hi = parse_pair(args.filter, "--filter")
    if not 0.0 <= lo < hi <= 1.0:
        raise UsageError("--filter needs 0 <= lo < hi <= 1")
    if args.n_amplitudes < 1 or args.ntau < 1:
        raise UsageError("--n-amplitudes and --ntau must be positive")
    if not args.out:
        raise UsageError("dataset needs --out")
    records, manifest = dataset.build_dataset(
        modes, args.n_amplitudes, args.ntau, (lo, hi), args.seed, args.resolution,
        args.phases, _solver_cfg(args), val_fraction=args.val_fraction)
    try:
        dataset.save_dataset(args.out, records, manifest)
    except OSError as exc:
        raise InputError(f"cannot write {args.out}: {exc}") from None
    _say(f"{len(records)} records, {manifest['solver_failures']} solver failures, "
         f"{manifest['filtered']} filtered -> {args.out}")


def cmd_gen(args):
    m = parse_modes(args.modes)
    if len(m) != 1:
        raise UsageError("gen takes one mode set")
    if args.tau is not None and not 0.0 <= args.tau <= 1.0:
        raise UsageError("--tau must lie in [0, 1]")
    spec = microgen.sample_spec(args.seed, m[0], 1, 1, args.symmetry, args.temperature)[0]
    if args.tau is not None:
        spec = microgen.MicroSpec(spec.padded, args.tau, spec.temperature, spec.modes)
    write_json(args.out, spec_to_dict(spec))


def cmd_render(args):
    spec = load_spec(args.spec)
    chi = microgen.render(spec, args.resolution, hard=not args.soft)
    with _Output(args.out) as fh:
        fh.write(microgen.pgm_text(chi, 255 if args.soft else 1))
    _say(f"c0 = {1.0 - float(np.mean(chi)):.6f}")


def _image_from_args(args):
    if bool(args.image) == bool(args.spec):
        raise UsageError("give exactly one of --image or --spec")
    if args.image:
        return load_image(args.image), None
    spec = load_spec(args.spec)
    return microgen.render(spec, args.resolution, hard=True), spec


def cmd_homog(args):
    chi, _ = _image_from_args(args)
    chi = np.where(chi >= 0.5, 1.0, 0.0)
    res = homogenize(chi, args.phases, _solver_cfg(args))
    out = {"C": _matrix(res.cbar), "c0": res.vol0, "iterations": [int(i) for i in res.iterations],
           "converged": res.converged, "envelope": verdict(res.cbar, args.phases, res.vol0)}
    write_json(args.out, out)
    _say(f"c0 = {res.vol0:.6f}, {out['iterations']} iterations")


def cmd_bounds(args):
    if not 0.0 <= args.c0 <= 1.0:
        raise UsageError("--c0 must lie in [0, 1]")
    pair = bounds.PhasePair.from_phases(args.phases[0], args.phases[1], args.c0)
    refs = bounds.all_references(pair)
    with _Output(args.out, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "C11", "C22", "C33", "C12", "C13", "C23",
                    "below_voigt", "above_reuss"])
        for name, c in refs.items():
            v = verdict(c, args.phases, args.c0)
            w.writerow([name] + [format_float(x) for x in dataset.cbar_to_vec(c)]
                       + [int(v["below_voigt"]), int(v["above_reuss"])])


def _train_config(args):
    from .surrogate import ModelConfig, TrainConfig
    try:
        mcfg = ModelConfig(scale=args.scale, resolution=args.resolution)
        tcfg = TrainConfig(batch_size=args.batch_size, lr=args.lr, patience=args.patience,
                           epochs=args.epochs, seed=args.seed, time_limit=args.time_limit,
                           weight_decay=args.weight_decay)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return mcfg, tcfg


def cmd_train(args):
    from .surrogate import VRNet, prepare, train
    if not args.data or not args.checkpoint:
        raise UsageError("train needs --data and --checkpoint")
    mcfg, tcfg = _train_config(args)
    try:
        records = dataset.read_jsonl(args.data)
    except OSError as exc:
        raise InputError(f"cannot read {args.data}: {exc}") from None
    except (ValueError, KeyError) as exc:
        raise InputError(f"{args.data}: {exc}") from None
    tr, va = dataset.split_records(records)
    if len(tr) < 2:
        raise UsageError("need at least two training records")
    model = VRNet(mcfg, args.phases, args.seed)
    res = train(prepare(tr, model, tcfg.temperature), prepare(va, model, tcfg.temperature) if va else None,
                tcfg=tcfg, model=model, metrics_path=args.metrics)
    extra = {"train": {"best_epoch": res.best_epoch, "best_val": res.best_val,
                       "epochs_run": len(res.history), "violations": res.violations,
                       "batch_size": tcfg.batch_size, "lr": tcfg.lr,
                       "weight_decay": tcfg.weight_decay, "patience": tcfg.patience},
             "data": os.path.abspath(args.data)}
    try:
        model.save(args.checkpoint, extra)
    except OSError as exc:
        raise InputError(f"cannot write {args.checkpoint}: {exc}") from None
    _say(f"best val {res.best_val:.5f} at epoch {res.best_epoch}, "
         f"{res.violations} admissibility violations")


def cmd_predict(args):
    model = _load_model(args.checkpoint)
    if args.image:
        chi = load_image(args.image)
        tau = args.tau
    elif args.spec:
        spec = load_spec(args.spec)
        chi = microgen.render(spec, model.cfg.resolution, hard=args.hard)
        tau = spec.tau if args.tau is None else args.tau
    else:
        raise UsageError("give --image or --spec")
    if chi.shape != (model.cfg.resolution,) * 2:
        raise UsageError(f"image is {chi.shape[0]}x{chi.shape[1]}, "
                         f"checkpoint expects {model.cfg.resolution}^2")
    p = model.predict_images(chi, tau)
    c, c0 = p["C"][0], float(p["c0"][0])
    out = {"C": _matrix(c), "xi": p["xi"][0].tolist(), "Y": _matrix(p["Y"][0]), "c0": c0,
           "tau": float(p["tau"][0]), "tau_from_c0": bool(p["tau_from_c0"]),
           "envelope": verdict(c, model.phases, c0)}
    write_json(args.out, out)


def cmd_sweep(args):
    if args.ntau < 2:
        raise UsageError("--ntau must be at least 2")
    spec = load_spec(args.spec) if args.spec else None
    if spec is None:
        raise UsageError("sweep needs --spec")
    rows = threshold_sweep(spec.amplitudes, args.phases, args.ntau, args.resolution,
                           _solver_cfg(args))
    sens = spikes = None
    if args.checkpoint:
        from .surrogate import tau_sensitivity
        model = _load_model(args.checkpoint)
        sens, spikes = tau_sensitivity(model, spec.amplitudes, [r["tau"] for r in rows],
                                       oracle=rows, spike_multiple=args.spike_multiple)
    head = ["tau", "c0", "n0", "n1", "s0", "s1", "transition", "degenerate", "converged",
            "C11", "C22", "C33", "C12", "C13", "C23", "eig1", "eig2", "eig3",
            "below_voigt", "above_reuss"]
    if sens is not None:
        head += ["pred_norm", "pred_dnorm_dtau", "pred_phi", "pred_inside", "spike"]
    with _Output(args.out, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(head)
        for i, r in enumerate(rows):
            if r["converged"]:
                v = verdict(r["cbar"], args.phases, r["c0"])
                ok = [int(v["below_voigt"]), int(v["above_reuss"])]
            else:
                ok = ["", ""]
            line = [format_float(r["tau"]), format_float(r["c0"]), r["n0"], r["n1"], r["s0"], r["s1"],
                    int(r["transition"]), int(r["degenerate"]), int(r["converged"])]
            line += [format_float(x) for x in dataset.cbar_to_vec(r["cbar"])]
            line += [format_float(x) for x in r["eig"]] + ok
            if sens is not None:
                s = sens[i]
                phi = format_float(s["phi"]) if math.isfinite(s["phi"]) else ""
                line += [format_float(s["norm"]), format_float(s["dnorm_dtau"]),
                         phi, int(s["inside"]), int(i in spikes)]
            w.writerow(line)
    n_tr = sum(r["transition"] for r in rows)
    _say(f"{len(rows)} rows, {n_tr} component transitions"
         + (f", {len(spikes)} gradient spikes" if spikes is not None else ""))


def cmd_invert(args):
    model = _load_model(args.checkpoint)
    if args.starts < 1 or args.steps < 0 or args.top_k < 1:
        raise UsageError("--starts and --top-k must be positive, --steps non-negative")
    modes = parse_modes(args.modes)[0]
    target = None
    if args.objective == "match":
        if not args.target:
            raise UsageError("match objective needs --target")
        target = load_matrix(args.target)
        if eigvalsh(target)[0] <= 0.0:
            raise UsageError("target is not positive definite")
    if not args.out:
        raise UsageError("invert needs --out (directory)")
    run = inverse.multistart_optimize(model, args.objective, target, args.starts, args.steps,
                                      args.lr, modes, args.seed)
    ver = inverse.verify_candidates(model, run, args.top_k, target, _solver_cfg(args))
    try:
        os.makedirs(args.out, exist_ok=True)
        summary = []
        for v in ver:
            stem = os.path.join(args.out, f"cand{v.rank}")
            write_json(stem + ".spec.json", spec_to_dict(v.spec))
            microgen.write_pgm(stem + ".pgm", microgen.render(v.spec, model.cfg.resolution))
            with open(stem + ".polar.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["theta", "E_surrogate", "E_oracle"])
                ts = inverse.polar_table(v.surrogate, args.n_theta)
                to = (inverse.polar_table(v.oracle, args.n_theta) if v.converged
                      else np.full_like(ts, np.nan))
                for a, b in zip(ts, to):
                    w.writerow([format_float(a[0]), format_float(a[1]), format_float(b[1])])
            summary.append({
                "rank": v.rank, "tau": v.spec.tau, "c0": v.c0,
                "surrogate_error" if run.kind == "match" else "surrogate_coupling": v.surrogate_error,
                "oracle_error" if run.kind == "match" else "oracle_coupling": v.oracle_error,
                "soft_hard_mismatch": v.soft_hard_mismatch, "flagged": v.flagged,
                "converged": v.converged, "C_surrogate": _matrix(v.surrogate),
                "C_oracle": _matrix(v.oracle),
                "envelope": verdict(v.surrogate, model.phases, v.c0),
                "objective": run.candidates[v.rank].objective,
            })
        write_json(os.path.join(args.out, "candidates.json"),
                   {"objective": run.kind, "target": _matrix(target) if target is not None else None,
                    "settings": run.settings, "violations": run.violations,
                    "diverged": int(run.diverged.sum()), "candidates": summary})
    except OSError as exc:
        raise InputError(f"cannot write to {args.out}: {exc}") from None
    best = ver[0]
    _say(f"best candidate: surrogate {best.surrogate_error:.4g}, oracle {best.oracle_error:.4g}")


def cmd_polar(args):
    sources = [bool(args.matrix), bool(args.image), bool(args.spec)]
    if sum(sources) != 1:
        raise UsageError("give exactly one of --matrix, --image or --spec")
    if args.n_theta < 1:
        raise UsageError("--n-theta must be positive")
    info = None
    if args.matrix:
        c = load_matrix(args.matrix)
    else:
        chi, spec = _image_from_args(args)
        if args.checkpoint:
            model = _load_model(args.checkpoint)
            p = model.predict_images(chi, None if spec is None else spec.tau)
            c, c0 = p["C"][0], float(p["c0"][0])
        else:
            res = homogenize(np.where(chi >= 0.5, 1.0, 0.0), args.phases, _solver_cfg(args))
            c, c0 = res.cbar, res.vol0
        info = verdict(c, args.phases, c0)
    if eigvalsh(c)[0] <= 0.0:
        raise NumericalError("stiffness is not positive definite")
    table = inverse.polar_table(c, args.n_theta)
    with _Output(args.out, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["theta", "E"])
        for t, e in table:
            w.writerow([format_float(t), format_float(e)])
    if info is not None:
        _say(f"envelope: below_voigt={info['below_voigt']} above_reuss={info['above_reuss']}")


# ---------------------------------------------------------------- parser

def _common(p, resolution=64):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=int, default=resolution)
    p.add_argument("--phases", type=str, default=None, help="E0,nu0,E1,nu1 (default 1000,0.3,1,0.49)")
    p.add_argument("--tol", type=float, default=SolverConfig().tol, help="solver tolerance")
    p.add_argument("--checkpoint", type=str, default=None)
    p.add_argument("--out", type=str, default=None)


def build_parser():
    ap = _Parser(prog="vrnet", description="Voigt-Reuss constrained surrogate toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("dataset", help="generate a labelled dataset (JSON Lines)")
    _common(p)
    p.add_argument("--modes", default="3x3")
    p.add_argument("--n-amplitudes", type=int, default=100)
    p.add_argument("--ntau", type=int, default=25)
    p.add_argument("--filter", default="0.01,0.99")
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("gen", help="draw a random microstructure spec")
    _common(p)
    p.add_argument("--modes", default="3x3")
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--symmetry", choices=microgen.SYMMETRY_CLASSES, default="none")
    p.add_argument("--temperature", type=float, default=microgen.DEFAULT_T)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("render", help="render a spec to PGM")
    _common(p)
    p.add_argument("--spec", required=True)
    p.add_argument("--soft", action="store_true")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("homog", help="FFT homogenisation of an image or spec")
    _common(p)
    p.add_argument("--image")
    p.add_argument("--spec")
    p.set_defaults(func=cmd_homog)

    p = sub.add_parser("bounds", help="analytic bounds and estimates at c0")
    _common(p)
    p.add_argument("--c0", type=float, required=True)
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("train", help="train the surrogate")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--metrics")
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--patience", type=int, default=50)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--time-limit", type=float, default=0.0, help="seconds, 0 = none")
    p.add_argument("--scale", type=float, default=0.5)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="surrogate prediction for an image or spec")
    _common(p)
    p.add_argument("--image")
    p.add_argument("--spec")
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--hard", action="store_true", help="render specs with the hard threshold")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("sweep", help="threshold sweep with component counts")
    _common(p)
    p.add_argument("--spec")
    p.add_argument("--ntau", type=int, default=100)
    p.add_argument("--spike-multiple", type=float, default=3.0)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("invert", help="multistart inverse design")
    _common(p)
    p.add_argument("--objective", choices=("match", "coupling"), default="match")
    p.add_argument("--target", help="JSON file with a 3x3 Mandel matrix")
    p.add_argument("--modes", default="3x3")
    p.add_argument("--starts", type=int, default=inverse.DEFAULT_STARTS)
    p.add_argument("--steps", type=int, default=inverse.DEFAULT_STEPS)
    p.add_argument("--lr", type=float, default=inverse.DEFAULT_LR)
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--n-theta", type=int, default=360)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("polar", help="directional Young's modulus table")
    _common(p)
    p.add_argument("--matrix")
    p.add_argument("--image")
    p.add_argument("--spec")
    p.add_argument("--n-theta", type=int, default=360)
    p.set_defaults(func=cmd_polar)
    return ap


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        # argparse errors and --help; report the code instead of exiting
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.phases = parse_phases(args.phases) if args.phases else DEFAULT_PHASES
        if args.resolution < 2:
            raise UsageError("--resolution must be at least 2")
        if not args.tol > 0.0:
            raise UsageError("--tol must be positive")
        args.func(args)
    except UsageError as exc:
        _say(f"vrnet: error: {exc}")
        return EXIT_USAGE
    except InputError as exc:
        _say(f"vrnet: I/O error: {exc}")
        return EXIT_IO
    except (SolverError, NumericalError, np.linalg.LinAlgError, FloatingPointError,
            RuntimeError) as exc:
        _say(f"vrnet: numerical failure: {exc}")
        return EXIT_NUMERIC
    except ValueError as exc:
        # remaining validation errors from the library surface as usage errors
        _say(f"vrnet: error: {exc}")
        return EXIT_USAGE
    except OSError as exc:
        _say(f"vrnet: I/O error: {exc}")
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
