"""Acceptance criteria AC-1 to AC-12.

Each test prints one ``AC-n PASS/FAIL`` line; the lines are repeated in the
terminal summary.  The Monte Carlo sweeps are slow (about 40 minutes in total
on one core); ``NFLOC_JOBS`` parallelizes them.
"""

import time

import numpy as np
import pytest

from nfloc import bounds
from nfloc.channel import UserChannelParams, channel_matrix, channel_vector
from nfloc.checks import GRADIENT_TOL, HESSIAN_TOL, SYMMETRY_TOL, derivative_gates
from nfloc.cli import main
from nfloc.frontend import random_beamformer, sigma2_for_snr
from nfloc.geometry import ArrayGeometry, rayleigh_distance
from nfloc.harness import ExperimentConfig, derive_seed, run_sweep, sample_positions, sample_scenario
from nfloc.partition import build_B, make_partition, reconstruct_channel, reference_vector

from conftest import rel, report

IDENTITY_TOL = 1e-12
NOISELESS_TOL_M = 1e-4
NOISELESS_MIN_PASS = 95
HALVING_DB = 6.02
HALVING_TOL = 0.05
DOMINANCE_SE = 3.0
NEAR_BOUND_FACTOR = 2.0
APLE_GRID_TOL = 0.25
ES_GRID_FACTOR = 1.5
ACM_MIN_FRACTION = 0.8
FIRST_ITER_TOL = 0.25
RAYLEIGH_M = 101.25
RAYLEIGH_TOL = 1e-10

DESK = ExperimentConfig(n_users=2)


def min_scaled_eig(J):
    # diagonal congruence keeps the inertia and removes the scale spread between blocks
    d = 1 / np.sqrt(np.diag(J))
    return float(np.linalg.eigvalsh(0.5 * (J + J.T) * d[:, None] * d[None, :]).min())


def per_trial_mse(records, algo):
    return np.array([np.mean(r.sq_errors[algo]) for r in records if r.ok(algo)])


def test_ac1_partition_identity():
    t0 = time.perf_counter()
    g = ArrayGeometry(15, 15, 0.025, 0.05)
    spec = make_partition(g, 3)
    ci = g.flat_index(*spec.reference_indices[spec.central_index])
    rng = np.random.default_rng(1)
    worst = 0.0
    for s in range(100):
        K = int(rng.integers(1, 4))
        W = random_beamformer(32, g.n_antennas, s).weights
        pos = sample_positions(K, 120.0, 5.0, 10.0, rng)
        users = [UserChannelParams.with_default_gain(p, 0.05, tx_power_w=rng.uniform(0.5, 2.0),
                                                     pilot=np.exp(2j * np.pi * rng.uniform()))
                 for p in pos]
        B = build_B(pos, W, spec)
        rhos = []
        for u in users:
            h = channel_vector(u, g)
            rhos.append(u.amplitude * h[ci] * reference_vector(u.position, spec))
            H_hat = reconstruct_channel(u.position, h[ci], spec)
            worst = max(worst, rel(H_hat, channel_matrix(u, g)))
        for k, u in enumerate(users):
            Bk = B[:, k * spec.n_sub:(k + 1) * spec.n_sub]
            worst = max(worst, rel(Bk @ rhos[k], u.amplitude * (W @ channel_vector(u, g))))
        total = sum(u.amplitude * (W @ channel_vector(u, g)) for u in users)
        worst = max(worst, rel(B @ np.concatenate(rhos), total))
    dt = time.perf_counter() - t0
    report("AC-1", worst < IDENTITY_TOL and dt < 10,
           f"worst relative error {worst:.2e} (< {IDENTITY_TOL:g}), {dt:.1f} s (< 10 s)")


@pytest.fixture(scope="module")
def gates():
    t0 = time.perf_counter()
    res = {g.name: g for g in derivative_gates(DESK, n_points=20, seed=0)}
    return res, time.perf_counter() - t0


def test_ac2_gradient_gate(gates):
    res, dt = gates
    g = [res["xi gradient"], res["psi gradient"]]
    worst = max(x.worst for x in g)
    report("AC-2", worst < GRADIENT_TOL and dt < 60,
           f"xi {g[0].worst:.2e}, psi {g[1].worst:.2e} (< {GRADIENT_TOL:g}) at 20 points each, {dt:.1f} s")


def test_ac3_hessian_gate(gates):
    res, dt = gates
    h = [res["xi hessian"], res["psi hessian"]]
    s = [res["xi hessian symmetry"], res["psi hessian symmetry"]]
    ok = max(x.worst for x in h) < HESSIAN_TOL and max(x.worst for x in s) < SYMMETRY_TOL and dt < 120
    report("AC-3", ok, f"xi {h[0].worst:.2e}, psi {h[1].worst:.2e} (< {HESSIAN_TOL:g}); symmetry "
                       f"{s[0].worst:.1e}, {s[1].worst:.1e} (< {SYMMETRY_TOL:g}), {dt:.1f} s")


def test_ac4_noiseless_exactness():
    t0 = time.perf_counter()
    cfg = ExperimentConfig(n_users=1, snr_db=[20.0], n_trials=100, noiseless=True, bcrb=False)
    res = run_sweep(cfg)
    err = np.sqrt(per_trial_mse(res.records, "aple-lm"))
    n_ok = int(np.sum(err < NOISELESS_TOL_M))
    dt = time.perf_counter() - t0
    report("AC-4", n_ok >= NOISELESS_MIN_PASS and dt < 300,
           f"{n_ok}/100 trials below {NOISELESS_TOL_M:g} m (need {NOISELESS_MIN_PASS}), "
           f"worst {err.max():.2e} m, {dt:.0f} s")


def test_ac5_bcrb_sanity():
    t0 = time.perf_counter()
    snrs = [0.0, 5.0, 10.0, 15.0, 20.0, 25.0]
    spec = DESK.partition()
    est = DESK.estimator_config()
    sym_ok = psd_ok = mono_ok = True
    worst_half = 0.0
    for t in range(20):
        sc = sample_scenario(DESK, derive_seed(DESK.seed, 0, t))
        W = random_beamformer(DESK.n_rf, sc.geometry.n_antennas, derive_seed(DESK.seed, 1, t)).weights

        def bound(snr):
            J = bounds.information_matrix(sc, W, sigma2_for_snr(sc, W, snr), spec,
                                          est.position_prior_var, est.gain_prior_var).j
            return J, bounds.position_bcrb(J)[1]

        rmse = []
        for snr in snrs:
            J, b = bound(snr)
            sym_ok &= bool(np.max(np.abs(J - J.T)) <= 1e-12 * np.max(np.abs(J)))
            psd_ok &= min_scaled_eig(J) >= -len(J) * np.finfo(float).eps
            rmse.append(b)
        mono_ok &= bool(np.all(np.diff(rmse) < 0))
        worst_half = max(worst_half, abs(bound(20.0 + HALVING_DB)[1] / rmse[4] / 0.5 - 1))
    dt = time.perf_counter() - t0
    ok = sym_ok and psd_ok and mono_ok and worst_half < HALVING_TOL and dt < 60
    report("AC-5", ok, f"symmetric {sym_ok}, PSD {psd_ok}, strictly decreasing {mono_ok}, "
                       f"halving deviation {worst_half:.1e} (< {HALVING_TOL:g}), {dt:.1f} s")


@pytest.fixture(scope="module")
def desk_sweep():
    t0 = time.perf_counter()
    res = run_sweep(DESK.replace(snr_db=[0.0, 10.0, 20.0], n_trials=100))
    return res, time.perf_counter() - t0


def test_ac6_bound_dominance(desk_sweep):
    res, dt = desk_sweep
    parts, ok = [], dt < 1800
    for i, snr in enumerate(res.config["snr_db"]):
        recs = [r for r in res.records if r.snr_index == i]
        mse = per_trial_mse(recs, "aple-lm")
        se = mse.std(ddof=1) / np.sqrt(len(mse))
        bound = np.mean([r.bcrb_mse for r in recs])
        ok &= bool(mse.mean() >= bound - DOMINANCE_SE * se)
        parts.append(f"{snr:g} dB mse {mse.mean():.3g} (se {se:.2g}) vs bound {bound:.3g}")
    fails = [f"{r.snr_db:g} dB trial {r.trial}: {r.failures['aple-lm'][0]}"
             for r in res.records if not r.ok("aple-lm")]
    parts.append(f"{len(fails)} failed runs excluded" + (f" ({'; '.join(fails)})" if fails else ""))
    report("AC-6", ok, "; ".join(parts) + f"; {dt / 60:.1f} min")


def test_ac7_near_bound(desk_sweep):
    res, _ = desk_sweep
    a = next(a for a in res.aggregates if a.snr_db == 20.0 and a.algo == "aple-lm")
    ratio = a.rmse_m / a.bcrb_rmse_m
    report("AC-7", ratio <= NEAR_BOUND_FACTOR,
           f"20 dB rmse {a.rmse_m:.3f} m vs bound {a.bcrb_rmse_m:.3f} m, ratio {ratio:.2f} "
           f"(<= {NEAR_BOUND_FACTOR:g})")


def test_ac8_grid_economy():
    n_s = DESK.partition().ns_x
    rmse = {}
    for f in (2, 6):
        cfg = DESK.replace(snr_db=[15.0], n_trials=50, algos=["aple-lm", "es-ga"], bcrb=False,
                           estimator=dict(grid_x=f * n_s, grid_y=f * n_s))
        for a in run_sweep(cfg).aggregates:
            rmse[a.algo, f] = a.rmse_m
    aple = rmse["aple-lm", 2] / rmse["aple-lm", 6]
    es = rmse["es-ga", 2] / rmse["es-ga", 6]
    ok = abs(aple - 1) <= APLE_GRID_TOL and es >= ES_GRID_FACTOR
    report("AC-8", ok, f"aple-lm coarse/fine {rmse['aple-lm', 2]:.3f}/{rmse['aple-lm', 6]:.3f} = {aple:.2f} "
                       f"(within {APLE_GRID_TOL:g}); es-ga {rmse['es-ga', 2]:.3f}/{rmse['es-ga', 6]:.3f} "
                       f"= {es:.2f} (>= {ES_GRID_FACTOR:g})")


def test_ac9_acm_degradation():
    cfg = DESK.replace(snr_db=[15.0], n_trials=50, algos=["aple-lm", "aple-lm-acm"], bcrb=False)
    recs = [r for r in run_sweep(cfg).records if r.ok("aple-lm") and r.ok("aple-lm-acm")]
    worse = sum(r.nmse["aple-lm-acm"] > r.nmse["aple-lm"] for r in recs)
    frac = worse / len(recs)
    ex = np.median([r.nmse["aple-lm"] for r in recs])
    acm = np.median([r.nmse["aple-lm-acm"] for r in recs])
    report("AC-9", frac >= ACM_MIN_FRACTION,
           f"ACM NMSE worse in {worse}/{len(recs)} paired trials = {frac:.2f} (>= {ACM_MIN_FRACTION:g}); "
           f"median NMSE exact {ex:.2e}, ACM {acm:.2e}")


def test_ac10_convergence_shape():
    res = run_sweep(DESK.replace(snr_db=[14.0], n_trials=50, bcrb=False))
    recs = [r for r in res.records if r.ok("aple-lm")]
    n_it = max(len(r.iter_sq_errors["aple-lm"]) for r in recs)
    traces = []
    for r in recs:
        tr = list(r.iter_sq_errors["aple-lm"])
        final = float(np.mean(r.sq_errors["aple-lm"]))
        traces.append(np.sqrt(tr + [tr[-1]] * (n_it - len(tr)) + [final]))
    med = np.median(np.array(traces), axis=0)
    first, conv = med[0], med[-1]
    close = abs(first - conv) <= FIRST_ITER_TOL * conv
    mono = bool(np.all(np.diff(med) <= 1e-12 * med[:-1]))
    report("AC-10", close and mono,
           f"median rmse after iteration 1 {first:.3f} m vs converged {conv:.3f} m (within {FIRST_ITER_TOL:g}); "
           f"nonincreasing {mono} over {n_it} iterations: " + " ".join(f"{m:.3f}" for m in med))


def test_ac11_rayleigh_distance():
    d = rayleigh_distance(ArrayGeometry(45, 45, 0.025, 0.05))
    err = abs(d - RAYLEIGH_M) / RAYLEIGH_M
    report("AC-11", err < RAYLEIGH_TOL, f"{d!r} m vs {RAYLEIGH_M} m, relative error {err:.1e}")


def test_ac12_reproducibility(tmp_path):
    import json
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(dict(n_users=2, n_trials=2, snr_db=[10.0, 20.0], algos=["aple-lm", "es-ga"])))
    runs = {"a": 1, "b": 1, "c": 8}
    for name, jobs in runs.items():
        assert main(["sweep", "--config", str(cfg), "--seed", "11", "--jobs", str(jobs),
                     "--out", str(tmp_path / name)]) == 0
    same = all((tmp_path / n / f).read_bytes() == (tmp_path / "a" / f).read_bytes()
               for n in ("b", "c") for f in ("aggregates.csv", "trials.csv"))
    report("AC-12", same, "aggregates.csv and trials.csv byte-identical across two --jobs 1 runs and --jobs 8")
