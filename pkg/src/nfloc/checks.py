"""Finite-difference gates for the analytic message derivatives."""

from dataclasses import dataclass

import numpy as np

from .derivatives import PsiObjective, finite_difference
from .estimator import EstimatorConfig, Problem
from .frontend import random_beamformer, sigma2_for_snr, synthesize_received
from .harness import ExperimentConfig, derive_seed, sample_positions, sample_scenario

GRADIENT_TOL = 1e-5
HESSIAN_TOL = 1e-4
SYMMETRY_TOL = 1e-10


@dataclass
class GateResult:
    name: str
    worst: float
    tol: float

    @property
    def passed(self):
        return bool(self.worst < self.tol)


def _rel(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def message_objectives(cfg, seed, snr_db=20.0):
    """In-loop ``xi`` and ``psi`` position messages for one sampled scenario."""
    sc = sample_scenario(cfg, derive_seed(seed, 0))
    W = random_beamformer(cfg.n_rf, sc.geometry.n_antennas, derive_seed(seed, 1)).weights
    sigma2 = sigma2_for_snr(sc, W, snr_db)
    y = synthesize_received(sc, W, sigma2, derive_seed(seed, 2)).y
    spec = cfg.partition()
    est = EstimatorConfig.for_partition(spec, r_min=cfg.r_min_m, r_max=cfg.r_max_m)
    prob = Problem(y, W, sigma2, spec, est)
    K = cfg.n_users
    xi = prob.xi(K, rho_factor=prob.reference_factor(sc.positions))
    Bw = prob.measurement(sc.positions)
    mean = np.linalg.lstsq(Bw, prob.y_white, rcond=None)[0]
    psi = PsiObjective(mean, Bw, spec, K, est.gain_prior_var)
    return {"xi": xi, "psi": psi}


def random_points(cfg, n, seed):
    rng = np.random.default_rng(seed)
    return [sample_positions(cfg.n_users, cfg.cone_angle_deg, cfg.r_min_m, cfg.r_max_m, rng).ravel()
            for _ in range(n)]


def derivative_gates(cfg=None, n_points=5, seed=0):
    """Worst relative gradient / Hessian errors against central differences."""
    cfg = cfg or ExperimentConfig()
    objs = message_objectives(cfg, seed)
    pts = random_points(cfg, n_points, derive_seed(seed, 3))
    out = []
    for name, obj in objs.items():
        g_err, h_err, sym = 0.0, 0.0, 0.0
        for x in pts:
            b = obj.evaluate(x, 2)
            g_err = max(g_err, _rel(b.gradient, finite_difference(obj.value, x, 1e-6)))
            h_err = max(h_err, _rel(b.hessian, finite_difference(obj.gradient, x, 1e-6)))
            sym = max(sym, float(np.max(np.abs(b.hessian - b.hessian.T)) / np.max(np.abs(b.hessian))))
        out += [GateResult(f"{name} gradient", g_err, GRADIENT_TOL),
                GateResult(f"{name} hessian", h_err, HESSIAN_TOL),
                GateResult(f"{name} hessian symmetry", sym, SYMMETRY_TOL)]
    return out
