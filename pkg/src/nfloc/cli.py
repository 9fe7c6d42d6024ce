"""Command-line interface: ``nfloc {sweep,check-derivatives,bcrb,demo}``."""

import argparse
import csv
import os
import sys
import warnings

import numpy as np

from . import bounds, estimator
from .checks import derivative_gates
from .errors import ConfigError
from .harness import (ALGORITHMS, ExperimentConfig, default_jobs, derive_seed, run_bcrb_sweep,
                      run_sweep, sample_scenario, trial_errors)
from .frontend import random_beamformer, sigma2_for_snr, synthesize_received
from .io import write_result


def _float_list(text):
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}")


def _algo_list(text):
    algos = [s.strip() for s in text.split(",") if s.strip()]
    bad = [a for a in algos if a not in ALGORITHMS]
    if bad or not algos:
        raise argparse.ArgumentTypeError(f"unknown algorithm(s) {bad}; choose from {', '.join(ALGORITHMS)}")
    return algos


def _seed(text):
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser():
    p = argparse.ArgumentParser(prog="nfloc", description="Near-field multiuser localization experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default):
        sp.add_argument("--config", help="experiment config JSON (defaults are used when omitted)")
        sp.add_argument("--seed", type=_seed, help="master seed override")
        sp.add_argument("--out", default=out_default, help="output directory")
        sp.add_argument("--snr", type=_float_list, help="comma-separated SNR list in dB (override)")

    sp = sub.add_parser("sweep", help="run a Monte Carlo sweep and write result files")
    common(sp, "results")
    sp.add_argument("--jobs", type=int, default=None, help="worker processes (default $NFLOC_JOBS or 1)")
    sp.add_argument("--algo", type=_algo_list, help=f"comma-separated subset of {','.join(ALGORITHMS)}")
    sp.add_argument("--strict", action="store_true", help="exit 1 if any trial fails")

    sp = sub.add_parser("check-derivatives", help="finite-difference gates for message derivatives")
    sp.add_argument("--config", help="experiment config JSON")
    sp.add_argument("--seed", type=_seed, default=0)
    sp.add_argument("--points", type=int, default=20, help="random points per objective")

    sp = sub.add_parser("bcrb", help="bound-only sweep")
    common(sp, "results")

    sp = sub.add_parser("demo", help="single trial with a per-iteration trace")
    common(sp, "demo")
    sp.add_argument("--algo", type=_algo_list, help="aple-lm or aple-lm-acm")
    return p


def load_config(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    kw = {}
    if getattr(args, "seed", None) is not None:
        kw["seed"] = args.seed
    if getattr(args, "snr", None):
        kw["snr_db"] = args.snr
    if getattr(args, "algo", None):
        kw["algos"] = args.algo
    return cfg.replace(**kw) if kw else cfg


def cmd_sweep(args):
    cfg = load_config(args)
    jobs = default_jobs() if args.jobs is None else args.jobs
    if jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    result = run_sweep(cfg, jobs=jobs)
    paths = write_result(result, args.out)
    for a in result.aggregates:
        print(f"snr {a.snr_db:6.2f} dB  {a.algo:12s} rmse {a.rmse_m:.4g} m  nmse {a.nmse:.4g}  "
              f"bcrb {a.bcrb_rmse_m:.4g} m  ok {a.trials_ok}")
    print(f"wrote {paths['aggregates']}")
    if result.failed:
        print(f"warning: {result.failed} algorithm run(s) failed", file=sys.stderr)
        for r in result.records:
            for algo, msgs in r.failures.items():
                if not r.ok(algo):
                    print(f"warning: snr {r.snr_db} trial {r.trial} {algo}: {msgs[0]}", file=sys.stderr)
        if args.strict:
            return 1
    return 0


def cmd_check(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    results = derivative_gates(cfg, n_points=args.points, seed=args.seed)
    for g in results:
        print(f"{'PASS' if g.passed else 'FAIL'} {g.name}: worst {g.worst:.3e} (tol {g.tol:.0e})")
    return 0 if all(g.passed for g in results) else 1


def cmd_bcrb(args):
    cfg = load_config(args)
    rows = run_bcrb_sweep(cfg)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "bcrb.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["snr_db", "bcrb_rmse_m", "bcrb_nmse"])
        for snr, rmse, nmse in rows:
            w.writerow([repr(snr), repr(rmse), repr(nmse)])
            print(f"snr {snr:6.2f} dB  bcrb rmse {rmse:.4g} m  nmse {nmse:.4g}")
    print(f"wrote {path}")
    return 0


def _fmt_pos(p):
    return "[" + ", ".join(f"{v:9.5f}" for v in p) + "]"


def demo_lines(cfg, snr_db, algo="aple-lm"):
    """Text report of one trial; contains no timing so it is reproducible."""
    sc = sample_scenario(cfg, derive_seed(cfg.seed, 0, 0))
    W = random_beamformer(cfg.n_rf, sc.geometry.n_antennas, derive_seed(cfg.seed, 1, 0)).weights
    sigma2 = sigma2_for_snr(sc, W, snr_db)
    rx = synthesize_received(sc, W, sigma2, derive_seed(cfg.seed, 2, 0, 0))
    y = rx.noiseless if cfg.noiseless else rx.y
    spec = cfg.partition()
    est_cfg = cfg.estimator_config(exact=(algo == "aple-lm"))
    amps = np.array([u.amplitude for u in sc.users])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = estimator.run(y, W, sigma2, spec, est_cfg, cfg.n_users, amps)
        J = bounds.information_matrix(sc, W, sigma2, spec, est_cfg.position_prior_var, est_cfg.gain_prior_var)
        _, bound = bounds.position_bcrb(J)
    truth = sc.positions
    lines = [f"seed {cfg.seed}  snr {snr_db:g} dB  users {cfg.n_users}  algo {algo}"]
    lines += [f"true user {k}: {_fmt_pos(p)}" for k, p in enumerate(truth)]
    lines += [f"init user {k}: {_fmt_pos(p)}" for k, p in enumerate(res.init_positions)]
    for i, rec in enumerate(res.trace, 1):
        rmse = np.sqrt(np.mean(trial_errors(rec.positions, truth)[0]))
        lines.append(f"iter {i:2d}  xi {rec.xi_value:.6e}  psi {rec.psi_value:.6e}  rmse {rmse:.6f} m")
        lines += [f"  user {k}: {_fmt_pos(p)}" for k, p in enumerate(rec.positions)]
    sq, nmse = trial_errors(res.positions, truth, np.asarray(res.channels).reshape(cfg.n_users, -1, order="F"),
                            sc.channels())
    lines.append(f"converged {res.converged}  iterations {res.iterations}")
    lines.append(f"rmse {np.sqrt(np.mean(sq)):.6f} m  nmse {nmse:.6e}  bcrb rmse {bound:.6f} m")
    lines += [f"note: {f}" for f in res.failures]
    return lines


def cmd_demo(args):
    cfg = load_config(args)
    algo = args.algo[0] if args.algo else "aple-lm"
    if algo == "es-ga":
        raise ConfigError("demo traces the message-passing estimator; use aple-lm or aple-lm-acm")
    snr = args.snr[0] if args.snr else 20.0
    lines = demo_lines(cfg, snr, algo)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "demo.txt")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    print(f"wrote {path}")
    return 0


COMMANDS = {"sweep": cmd_sweep, "check-derivatives": cmd_check, "bcrb": cmd_bcrb, "demo": cmd_demo}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
