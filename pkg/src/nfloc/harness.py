"""Monte Carlo experiments: scenarios, the ES-GA baseline, metrics and sweeps.

Per-trial randomness is derived from ``numpy.random.SeedSequence`` so that
every trial depends only on the master seed and its indices:

* scenario and beamformer: ``(master, trial)``, shared by all SNR points;
* noise: ``(master, snr index, trial)``.

Results are therefore identical for any number of worker processes.
"""

import json
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.optimize import linear_sum_assignment
from threadpoolctl import threadpool_limits

from . import bounds, estimator
from .channel import UserChannelParams, array_response
from .derivatives import ResponseObjective
from .errors import ConfigError, DomainError, NumericalError
from .estimator import EstimatorConfig, best_grid_point, gradient_ascent, grid_candidates
from .frontend import (NoiseModel, UplinkScenario, random_beamformer, sigma2_for_snr,
                       synthesize_received)
from .geometry import ArrayGeometry
from .partition import make_partition

ALGORITHMS = ("aple-lm", "aple-lm-acm", "es-ga")

_SCENARIO, _BEAMFORMER, _NOISE = 0, 1, 2


@dataclass(frozen=True)
class ExperimentConfig:
    n_x: int = 21
    n_y: int = 21
    spacing_m: float = 0.025
    wavelength_m: float = 0.05
    subarray_m: int = 3
    n_rf: int = 32
    n_users: int = 2
    cone_angle_deg: float = 120.0
    r_min_m: float = 5.0
    r_max_m: float = 10.0
    snr_db: tuple = (0.0, 10.0, 20.0)
    n_trials: int = 10
    seed: int = 0
    algos: tuple = ("aple-lm",)
    noiseless: bool = False
    bcrb: bool = True
    estimator: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "snr_db", tuple(float(s) for s in self.snr_db))
        object.__setattr__(self, "algos", tuple(self.algos))
        object.__setattr__(self, "estimator", dict(self.estimator))
        if int(self.n_trials) != self.n_trials or self.n_trials < 1:
            raise ConfigError("n_trials must be an integer >= 1")
        if not self.snr_db:
            raise ConfigError("snr_db must be a nonempty list")
        if not 0 < self.cone_angle_deg < 180:
            raise ConfigError("cone_angle_deg must lie in (0, 180)")
        if int(self.n_users) != self.n_users or self.n_users < 1:
            raise ConfigError("n_users must be an integer >= 1")
        if not 0 < self.r_min_m <= self.r_max_m:
            raise ConfigError("need 0 < r_min_m <= r_max_m")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        bad = [a for a in self.algos if a not in ALGORITHMS]
        if bad or not self.algos:
            raise ConfigError(f"algos must be a nonempty subset of {list(ALGORITHMS)}, got {list(self.algos)}")
        if self.n_rf < 1:
            raise ConfigError("n_rf must be at least 1")
        try:
            self.partition()
            self.estimator_config()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    def geometry(self):
        return ArrayGeometry(self.n_x, self.n_y, self.spacing_m, self.wavelength_m)

    def partition(self):
        return make_partition(self.geometry(), self.subarray_m)

    def estimator_config(self, exact=True):
        kw = dict(self.estimator)
        kw.update(r_min=self.r_min_m, r_max=self.r_max_m, exact=exact)
        return EstimatorConfig.for_partition(self.partition(), **kw)

    def replace(self, **kw):
        d = self.to_dict()
        d.update(kw)
        return ExperimentConfig(**d)

    def to_dict(self):
        d = asdict(self)
        d["snr_db"] = list(self.snr_db)
        d["algos"] = list(self.algos)
        return d

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        extra = sorted(set(d) - known)
        if extra:
            raise ConfigError(f"unknown config field(s): {', '.join(extra)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                d = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
        return cls.from_dict(d)


@dataclass
class TrialRecord:
    snr_index: int
    snr_db: float
    trial: int
    seed: int
    true_positions: list
    estimates: dict = field(default_factory=dict)
    sq_errors: dict = field(default_factory=dict)
    nmse: dict = field(default_factory=dict)
    iter_sq_errors: dict = field(default_factory=dict)
    iterations: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    bcrb_mse: float = float("nan")
    bcrb_nmse: float = float("nan")
    wall_time_s: dict = field(default_factory=dict)

    def ok(self, algo):
        return algo in self.sq_errors

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Aggregate:
    snr_db: float
    algo: str
    rmse_m: float
    nmse: float
    bcrb_rmse_m: float
    trials_ok: int


@dataclass
class SweepResult:
    config: dict
    aggregates: list
    records: list
    failed: int = 0

    def to_dict(self):
        return {
            "config": self.config,
            "aggregates": [asdict(a) for a in self.aggregates],
            "records": [r.to_dict() for r in self.records],
            "failed": self.failed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["config"], [Aggregate(**a) for a in d["aggregates"]],
                   [TrialRecord.from_dict(r) for r in d["records"]], d["failed"])


def derive_seed(master, *key):
    """64-bit seed that depends only on ``master`` and the integer ``key``."""
    ss = np.random.SeedSequence(int(master), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, np.uint64)[0])


def sample_positions(n, cone_angle_deg, r_min, r_max, rng):
    """``n`` points uniform in direction over the cap about +z and uniform in range."""
    half = np.deg2rad(cone_angle_deg / 2)
    cos_t = rng.uniform(np.cos(half), 1.0, size=n)
    phi = rng.uniform(0.0, 2 * np.pi, size=n)
    r = rng.uniform(r_min, r_max, size=n)
    sin_t = np.sqrt(1 - cos_t ** 2)
    return r[:, None] * np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t], axis=1)


def sample_scenario(cfg, seed):
    rng = np.random.default_rng(seed)
    pos = sample_positions(cfg.n_users, cfg.cone_angle_deg, cfg.r_min_m, cfg.r_max_m, rng)
    users = tuple(UserChannelParams.with_default_gain(p, cfg.wavelength_m) for p in pos)
    return UplinkScenario(cfg.geometry(), users)


@dataclass
class BaselineResult:
    positions: np.ndarray
    betas: np.ndarray
    channels: np.ndarray


def es_ga_baseline(y, W, sigma2, geometry, est_cfg, n_users, amplitudes=None):
    """Exhaustive grid search plus gradient ascent, one user at a time.

    Each user maximizes ``|a^H W^H C^-1 y_res|^2 / (a^H W^H C^-1 W a)`` over the
    grid, is refined by gradient ascent and its fitted signal ``beta W a`` is
    removed from the residual.
    """
    noise = NoiseModel(sigma2, W)
    Ww = noise.whiten(np.asarray(W))
    res = noise.whiten(np.asarray(y, dtype=complex))
    grid = grid_candidates(est_cfg)
    q = geometry.positions()
    pos, betas, chans = [], [], []
    amps = np.ones(n_users, dtype=complex) if amplitudes is None else np.asarray(amplitudes, dtype=complex)
    for k in range(n_users):
        obj = ResponseObjective(res, Ww, geometry, est_cfg.exact)
        start = best_grid_point(obj, grid)
        ga = gradient_ascent(obj, start, est_cfg.ga_tol, est_cfg.max_ga_iter, est_cfg.range_limits)
        p = ga.position[0]
        a = array_response(p, q, geometry.wavelength_m, exact=est_cfg.exact)
        phi = Ww @ a
        beta = np.vdot(phi, res) / np.vdot(phi, phi).real
        res = res - beta * phi
        pos.append(p)
        betas.append(beta)
        chans.append(beta * a / amps[k])
    return BaselineResult(np.array(pos), np.array(betas), np.array(chans))


def match_users(estimated, truth):
    """Permutation ``perm`` minimizing ``sum_k ||estimated[perm[k]] - truth[k]||^2``."""
    est = np.asarray(estimated, dtype=float)
    tru = np.asarray(truth, dtype=float)
    cost = np.sum((tru[:, None, :] - est[None, :, :]) ** 2, axis=-1)
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(len(tru), dtype=int)
    perm[rows] = cols
    return perm


def trial_errors(estimated, truth, est_channels=None, true_channels=None):
    """Matched per-user squared position errors and the trial NMSE."""
    perm = match_users(estimated, truth)
    est = np.asarray(estimated, dtype=float)[perm]
    sq = np.sum((est - np.asarray(truth, dtype=float)) ** 2, axis=1)
    nmse = float("nan")
    if est_channels is not None and true_channels is not None:
        h_hat = np.asarray(est_channels)[perm]
        h = np.asarray(true_channels)
        nmse = float(np.mean(np.sum(np.abs(h_hat - h) ** 2, axis=1) / np.sum(np.abs(h) ** 2, axis=1)))
    return sq, nmse


def compute_metrics(records, algo):
    """``(rmse, nmse)`` of ``algo`` over the records where it succeeded."""
    ok = [r for r in records if r.ok(algo)]
    if not ok:
        raise ValueError(f"no successful trials for {algo!r}")
    mse = np.mean([np.mean(r.sq_errors[algo]) for r in ok])
    nmse = np.mean([r.nmse[algo] for r in ok])
    return float(np.sqrt(mse)), float(nmse)


def bcrb_rmse(records):
    vals = [r.bcrb_mse for r in records if np.isfinite(r.bcrb_mse)]
    return float(np.sqrt(np.mean(vals))) if vals else float("nan")


def aggregate(records, cfg):
    out = []
    for i, snr in enumerate(cfg.snr_db):
        recs = [r for r in records if r.snr_index == i]
        bound = bcrb_rmse(recs)
        for algo in cfg.algos:
            n_ok = sum(r.ok(algo) for r in recs)
            if n_ok:
                rmse, nmse = compute_metrics(recs, algo)
            else:
                rmse = nmse = float("nan")
            out.append(Aggregate(snr, algo, rmse, nmse, bound, n_ok))
    return out


def _run_algo(algo, y, W, sigma2, cfg, sc):
    spec = cfg.partition()
    amps = np.array([u.amplitude for u in sc.users])
    if algo == "es-ga":
        res = es_ga_baseline(y, W, sigma2, cfg.geometry(), cfg.estimator_config(), cfg.n_users, amps)
        return res.positions, res.channels, [], 0, []
    est_cfg = cfg.estimator_config(exact=(algo == "aple-lm"))
    res = estimator.run(y, W, sigma2, spec, est_cfg, cfg.n_users, amps)
    trace = [rec.positions for rec in res.trace]
    chans = np.asarray(res.channels).reshape(cfg.n_users, -1, order="F")
    return res.positions, chans, trace, res.iterations, res.failures


def run_trial(cfg, snr_index, trial):
    """One Monte Carlo trial at one SNR point, all algorithms on the same data."""
    sc = sample_scenario(cfg, derive_seed(cfg.seed, _SCENARIO, trial))
    W = random_beamformer(cfg.n_rf, sc.geometry.n_antennas,
                          derive_seed(cfg.seed, _BEAMFORMER, trial)).weights
    snr = cfg.snr_db[snr_index]
    sigma2 = sigma2_for_snr(sc, W, snr)
    noise_seed = derive_seed(cfg.seed, _NOISE, snr_index, trial)
    rx = synthesize_received(sc, W, sigma2, noise_seed)
    y = rx.noiseless if cfg.noiseless else rx.y
    truth = sc.positions
    h = sc.channels()
    rec = TrialRecord(snr_index, snr, trial, noise_seed, truth.tolist())
    for algo in cfg.algos:
        t0 = time.perf_counter()
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                pos, chans, trace, iters, fails = _run_algo(algo, y, W, sigma2, cfg, sc)
        except (NumericalError, DomainError, np.linalg.LinAlgError, FloatingPointError) as exc:
            rec.failures[algo] = [f"{type(exc).__name__}: {exc}"]
            rec.wall_time_s[algo] = time.perf_counter() - t0
            continue
        sq, nmse = trial_errors(pos, truth, chans, h)
        rec.estimates[algo] = np.asarray(pos).tolist()
        rec.sq_errors[algo] = sq.tolist()
        rec.nmse[algo] = nmse
        rec.iter_sq_errors[algo] = [float(np.mean(trial_errors(p, truth)[0])) for p in trace]
        rec.iterations[algo] = int(iters)
        if fails:
            rec.failures[algo] = list(fails)
        rec.wall_time_s[algo] = time.perf_counter() - t0
    if cfg.bcrb:
        spec = cfg.partition()
        est = cfg.estimator_config()
        J = bounds.information_matrix(sc, W, sigma2, spec, est.position_prior_var, est.gain_prior_var)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            _, rmse = bounds.position_bcrb(J)
            _, nmse = bounds.channel_bcrb(J, sc, spec)
        rec.bcrb_mse = rmse ** 2
        rec.bcrb_nmse = nmse
    return rec


def _work(args):
    cfg, snr_index, trial = args
    with threadpool_limits(1):
        return run_trial(cfg, snr_index, trial)


def default_jobs():
    try:
        return max(1, int(os.environ.get("NFLOC_JOBS", "1")))
    except ValueError:
        return 1


def run_sweep(cfg, jobs=None, progress=None):
    """All trials at all SNR points, aggregated per SNR and algorithm."""
    jobs = default_jobs() if jobs is None else max(1, int(jobs))
    items = [(cfg, i, t) for i in range(len(cfg.snr_db)) for t in range(cfg.n_trials)]
    if jobs == 1:
        records = []
        for it in items:
            records.append(_work(it))
            if progress:
                progress(records[-1])
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = []
            for rec in pool.map(_work, items):
                records.append(rec)
                if progress:
                    progress(rec)
    records.sort(key=lambda r: (r.snr_index, r.trial))
    failed = sum(1 for r in records for a in cfg.algos if not r.ok(a))
    return SweepResult(cfg.to_dict(), aggregate(records, cfg), records, failed)


def run_bcrb_sweep(cfg):
    """Bound-only sweep: ``[(snr_db, bcrb_rmse_m, bcrb_nmse)]`` averaged over scenarios."""
    spec = cfg.partition()
    est = cfg.estimator_config()
    out = []
    for i, snr in enumerate(cfg.snr_db):
        mse, nm = [], []
        for t in range(cfg.n_trials):
            sc = sample_scenario(cfg, derive_seed(cfg.seed, _SCENARIO, t))
            W = random_beamformer(cfg.n_rf, sc.geometry.n_antennas,
                                  derive_seed(cfg.seed, _BEAMFORMER, t)).weights
            sigma2 = sigma2_for_snr(sc, W, snr)
            J = bounds.information_matrix(sc, W, sigma2, spec, est.position_prior_var, est.gain_prior_var)
            mse.append(bounds.position_bcrb(J)[1] ** 2)
            nm.append(bounds.channel_bcrb(J, sc, spec)[1])
        out.append((snr, float(np.sqrt(np.mean(mse))), float(np.mean(nm))))
    return out
