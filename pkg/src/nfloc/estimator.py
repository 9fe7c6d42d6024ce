"""Message-passing multiuser position estimator.

The factor graph links user positions ``p`` to two factors: ``xi`` (the
likelihood of ``y`` given the subarray measurement matrix ``B(p)`` and the
stacked reference gains ``rho``) and ``psi`` (the constraint tying ``rho`` to
the central reference gain through ``c(p)``).  Position messages are
non-Gaussian; each is projected to a Gaussian by gradient ascent in polar
coordinates followed by a Hessian-based covariance.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError

from .derivatives import PsiObjective, XiObjective
from .errors import ConfigError, DomainError, NumericalError
from .frontend import NoiseModel
from .geometry import cartesian_to_polar, polar_jacobian, polar_to_cartesian, project_feasible
from .partition import reconstruct_channel, reference_vector

ARMIJO_C1 = 1e-4
MAX_BACKTRACK = 60
CHI_STEP = 0.05
RANGE_STEP = 0.5


@dataclass(frozen=True)
class EstimatorConfig:
    grid_x: int = 28
    grid_y: int = 28
    grid_r: int = 2
    r_min: float = 5.0
    r_max: float = 10.0
    ga_tol: float = 1e-5
    outer_tol: float = 1e-3
    max_outer: int = 20
    max_ga_iter: int = 500
    damping: float = 0.5
    init_var: float = 1e8
    gain_prior_var: float = 1e9
    position_prior_var: float = 1e9
    prior_mean: tuple | None = None
    range_margin: float = 2.0
    psi_start: str = "psi_to_p"
    gain_at: str = "marginal"
    exact: bool = True

    def __post_init__(self):
        for name in ("ga_tol", "outer_tol", "init_var", "gain_prior_var", "position_prior_var"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.damping <= 1:
            raise ConfigError("damping must lie in (0, 1]")
        for name in ("grid_x", "grid_y", "grid_r", "max_outer", "max_ga_iter"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.psi_start not in ("p_to_psi", "psi_to_p"):
            raise ConfigError("psi_start must be 'p_to_psi' or 'psi_to_p'")
        if self.gain_at not in ("marginal", "messages"):
            raise ConfigError("gain_at must be 'marginal' or 'messages'")
        if not self.range_margin >= 1:
            raise ConfigError("range_margin must be at least 1")
        if not 0 < self.r_min <= self.r_max:
            raise ConfigError("need 0 < r_min <= r_max")
        if self.grid_r < 2 and self.r_min != self.r_max:
            raise ConfigError("grid_r must be at least 2 unless r_min == r_max")

    @classmethod
    def for_partition(cls, spec, **kwargs):
        """Default grid of ``4 * N_S`` angular points per axis for ``spec``."""
        kwargs.setdefault("grid_x", 4 * spec.ns_x)
        kwargs.setdefault("grid_y", 4 * spec.ns_y)
        return cls(**kwargs)

    @property
    def range_limits(self):
        """Search interval for the range during gradient ascent."""
        return self.r_min / self.range_margin, self.r_max * self.range_margin

    def position_prior_mean(self, n_users):
        if self.prior_mean is not None:
            mu = np.asarray(self.prior_mean, dtype=float).reshape(3)
        else:
            mu = np.array([0.0, 0.0, 0.5 * (self.r_min + self.r_max)])
        return np.tile(mu, n_users)


@dataclass
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray
    domain: str = "position"

    def precision(self):
        return _inv_psd(self.cov)

    def copy(self):
        return GaussianBelief(self.mean.copy(), self.cov.copy(), self.domain)


@dataclass
class GAResult:
    position: np.ndarray
    value: float
    converged: bool
    iterations: int
    values: list


@dataclass
class MessageState:
    """Directional beliefs of the factor graph.

    The rho messages towards ``xi`` and from ``psi`` have zero mean and a
    rank-K covariance ``C diag(tau) C^H``; they are stored as the factor
    ``F = C diag(sqrt(tau))``.  The ``xi -> rho`` / ``rho -> psi`` message is
    stored as its precision factor (the whitened ``B`` at ``mu_{p->xi}``) and
    mean.
    """

    p_to_xi: GaussianBelief
    xi_to_p: GaussianBelief
    p_to_psi: GaussianBelief
    psi_to_p: GaussianBelief
    rho_to_xi_factor: np.ndarray | None = None
    psi_to_rho_factor: np.ndarray | None = None
    xi_to_rho_mean: np.ndarray | None = None
    xi_to_rho_factor: np.ndarray | None = None
    psi_to_gain: GaussianBelief | None = None
    iteration: int = 0
    damping: float = 0.5
    failures: list = field(default_factory=list)

    @property
    def rho_to_xi_mean(self):
        return np.zeros(self.rho_to_xi_factor.shape[0], dtype=complex)

    @property
    def psi_to_rho_mean(self):
        return np.zeros(self.psi_to_rho_factor.shape[0], dtype=complex)


@dataclass
class IterationRecord:
    positions: np.ndarray
    xi_value: float
    psi_value: float


@dataclass
class EstimateResult:
    positions: np.ndarray
    position_cov: np.ndarray
    gains: np.ndarray
    gain_cov: np.ndarray
    channels: np.ndarray
    init_positions: np.ndarray
    trace: list
    converged: bool
    iterations: int
    failures: list


def _inv_psd(c):
    c = 0.5 * (c + c.conj().T)
    try:
        return np.linalg.inv(c)
    except LinAlgError as exc:
        raise NumericalError("covariance is singular") from exc


def covariance_from_hessian(H):
    """``(-H)^{-1}`` with the eigenvalues of ``-H`` floored at ``1e-6 * max|eig|``."""
    H = 0.5 * (H + H.T)
    w, V = np.linalg.eigh(-H)
    top = np.max(np.abs(w))
    if not np.isfinite(top) or top == 0:
        raise NumericalError("Hessian is zero or not finite")
    w = np.maximum(w, 1e-6 * top)
    cov = (V / w) @ V.T
    return 0.5 * (cov + cov.T)


def grid_candidates(cfg):
    """Polar grid ``(chi_x, chi_y, r)`` with ``grid_x * grid_y * grid_r`` rows.

    ``chi`` runs over ``-1 + 2 (i - 1) / M`` and ``r`` linearly over the range
    bounds.  Points outside the unit disk are kept; scoring skips them.
    """
    cx = -1 + 2 * np.arange(cfg.grid_x) / cfg.grid_x
    cy = -1 + 2 * np.arange(cfg.grid_y) / cfg.grid_y
    r = np.linspace(cfg.r_min, cfg.r_max, cfg.grid_r)
    X, Y, R = np.meshgrid(cx, cy, r, indexing="ij")
    return np.stack([X.ravel(), Y.ravel(), R.ravel()], axis=1)


def _feasible_mask(grid):
    return grid[:, 0] ** 2 + grid[:, 1] ** 2 < 1


def best_grid_point(objective, grid):
    """Cartesian position of the highest-scoring feasible grid point (lowest index on ties)."""
    mask = _feasible_mask(grid)
    if not mask.any():
        raise ConfigError("no feasible grid point")
    pts = polar_to_cartesian(grid[mask])
    scores = objective.grid_values(pts)
    return pts[int(np.argmax(scores))]


def gradient_ascent(objective, start, tol, max_iter=500, r_limits=(1e-3, np.inf)):
    """Alternating chi / r gradient ascent with Armijo backtracking.

    Works in polar coordinates for all free users at once; ranges are kept
    inside ``r_limits``.  Stops when both
    the range step and the arc-length angular step ``r * |d chi|`` fall below
    ``tol``, when neither block can improve the objective, or after
    ``max_iter`` sweeps (not converged).
    """
    n = objective.n_free
    lo, hi = r_limits

    def project(xp):
        return project_feasible(xp, lo, hi)

    x = project(cartesian_to_polar(np.reshape(start, (n, 3))))

    def val(xp):
        try:
            return objective.value(polar_to_cartesian(xp))
        except (DomainError, NumericalError):
            return -np.inf

    def grad(xp):
        b = objective.evaluate(polar_to_cartesian(xp), 1)
        T = polar_jacobian(xp)
        return b.value, np.einsum("kij,ki->kj", T, b.gradient.reshape(n, 3))

    fx, gx = grad(x)
    values = [fx]
    # one chi block and one r block per user, visited in that order
    blocks = [(k, cols) for k in range(n) for cols in ((0, 1), (2,))]
    last = [None] * len(blocks)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        x_prev = x
        moved = False
        for b, (k, cols) in enumerate(blocks):
            g = gx[k, cols]
            gn = np.linalg.norm(g)
            if gn == 0 or not np.isfinite(gn):
                continue
            t = 2 * last[b] if last[b] is not None else (CHI_STEP if len(cols) == 2 else RANGE_STEP) / gn
            for _ in range(MAX_BACKTRACK):
                trial = x.copy()
                trial[k, cols] += t * g
                trial = project(trial)
                ascent = float(np.sum(g * (trial[k, cols] - x[k, cols])))
                if ascent > 0:
                    f_try = val(trial)
                    if f_try >= fx + ARMIJO_C1 * ascent:
                        x = trial
                        last[b] = t
                        moved = True
                        fx, gx = grad(x)
                        values.append(fx)
                        break
                t *= 0.5
        if not moved:
            converged = True
            break
        dr = np.linalg.norm(x[:, 2] - x_prev[:, 2])
        dchi = np.linalg.norm(x[:, 2:3] * (x[:, :2] - x_prev[:, :2]))
        if dr < tol and dchi < tol:
            converged = True
            break
    return GAResult(polar_to_cartesian(x), fx, converged, it, values)


def gaussian_approx_message(objective, start, cfg):
    """Gaussian projection of a position message: GA maximizer plus inverse curvature."""
    ga = gradient_ascent(objective, start, cfg.ga_tol, cfg.max_ga_iter, cfg.range_limits)
    H = objective.evaluate(ga.position, 2).hessian
    return GaussianBelief(ga.position.ravel(), covariance_from_hessian(H)), ga


def _product(a, b_mean, b_prec):
    """Product of belief ``a`` with a Gaussian given by mean and precision."""
    prec = a.precision() + b_prec
    cov = _inv_psd(prec)
    mean = cov @ (a.precision() @ a.mean + b_prec @ b_mean)
    return GaussianBelief(mean, 0.5 * (cov + cov.T), a.domain)


def _damp(old, new, beta):
    return GaussianBelief((1 - beta) * old.mean + beta * new.mean,
                          (1 - beta) * old.cov + beta * new.cov, old.domain)


class Problem:
    """Whitened data shared by every message computation of one run."""

    def __init__(self, y, W, sigma2, spec, cfg):
        self.spec = spec
        self.cfg = cfg
        self.noise = NoiseModel(sigma2, W)
        self.W = np.asarray(W)
        self.y_white = self.noise.whiten(np.asarray(y, dtype=complex))
        self.W_white = self.noise.whiten(self.W)

    def xi(self, n_free, fixed=None, rho_factor=None):
        return XiObjective(self.y_white, self.W_white, self.spec, n_free,
                           fixed=fixed, rho_factor=rho_factor, exact=self.cfg.exact)

    def reference_factor(self, positions):
        """``blkdiag(c_k) diag(sqrt(tau))`` evaluated at ``positions``."""
        m2 = self.spec.n_sub
        K = len(positions)
        F = np.zeros((K * m2, K), dtype=complex)
        for k, p in enumerate(positions):
            F[k * m2:(k + 1) * m2, k] = reference_vector(p, self.spec, self.cfg.exact)
        return F * np.sqrt(self.cfg.gain_prior_var)

    def measurement(self, positions):
        """Whitened ``B`` at ``positions``."""
        obj = self.xi(0, fixed=positions)
        return obj._B_fixed


def sequential_init(problem, n_users):
    """Grid search plus GA refinement, one user at a time, earlier users held fixed."""
    cfg = problem.cfg
    grid = grid_candidates(cfg)
    found = []
    for _ in range(n_users):
        fixed = np.array(found) if found else None
        obj = problem.xi(1, fixed=fixed)
        start = best_grid_point(obj, grid)
        ga = gradient_ascent(obj, start, cfg.ga_tol, cfg.max_ga_iter, cfg.range_limits)
        found.append(ga.position[0])
    init = np.array(found)
    mean = init.ravel()
    cov = cfg.init_var * np.eye(3 * n_users)
    state = MessageState(
        p_to_xi=GaussianBelief(mean.copy(), cov.copy()),
        xi_to_p=GaussianBelief(mean.copy(), cov.copy()),
        p_to_psi=GaussianBelief(mean.copy(), cov.copy()),
        psi_to_p=GaussianBelief(mean.copy(), cov.copy()),
        damping=cfg.damping,
    )
    return init, state


def feasible_positions(positions, cfg):
    """Positions from Gaussian means, pulled into the search domain where needed.

    A mean of combined Gaussian messages can fall at or behind the array plane
    or outside the range limits.  Such users are moved to ``z >= 1e-3 r`` and
    projected like a gradient-ascent iterate; feasible users are returned as is.
    """
    pos = np.array(positions, dtype=float).reshape(-1, 3)
    lo, hi = cfg.range_limits
    r = np.linalg.norm(pos, axis=1)
    bad = (pos[:, 2] <= 1e-3 * r) | (r < lo) | (r > hi)
    if np.any(bad):
        q = pos[bad]
        rq = np.maximum(np.linalg.norm(q, axis=1), lo)
        q[:, 2] = np.maximum(q[:, 2], 1e-3 * rq)
        pos[bad] = polar_to_cartesian(project_feasible(cartesian_to_polar(q), lo, hi))
    return pos


def _prior(cfg, n_users):
    mean = cfg.position_prior_mean(n_users)
    prec = np.eye(3 * n_users) / cfg.position_prior_var
    return mean, prec


def iterate(state, problem):
    """One clockwise and one counterclockwise sweep of message updates."""
    cfg = problem.cfg
    K = len(state.xi_to_p.mean) // 3
    beta = state.damping
    prior_mean, prior_prec = _prior(cfg, K)

    # p -> psi, psi -> rho, rho -> xi
    state.p_to_psi = _product(state.xi_to_p, prior_mean, prior_prec)
    mu_psi = feasible_positions(state.p_to_psi.mean, cfg)
    state.psi_to_rho_factor = problem.reference_factor(mu_psi)
    state.rho_to_xi_factor = state.psi_to_rho_factor

    # xi -> p
    obj = problem.xi(K, rho_factor=state.rho_to_xi_factor)
    xi_value = np.nan
    try:
        new, ga = gaussian_approx_message(obj, state.xi_to_p.mean, cfg)
        xi_value = ga.value
        state.xi_to_p = _damp(state.xi_to_p, new, beta)
    except (NumericalError, DomainError, LinAlgError) as exc:
        state.failures.append(f"iteration {state.iteration + 1}: xi->p kept previous value ({exc})")

    # xi -> rho, rho -> psi
    mu_xi = feasible_positions(state.p_to_xi.mean, cfg)
    Bw = problem.measurement(mu_xi)
    state.xi_to_rho_factor = Bw
    state.xi_to_rho_mean = np.linalg.lstsq(Bw, problem.y_white, rcond=None)[0]

    # psi -> p
    psi = PsiObjective(state.xi_to_rho_mean, Bw, problem.spec, K, cfg.gain_prior_var, cfg.exact)
    psi_value = np.nan
    try:
        start = state.p_to_psi.mean if cfg.psi_start == "p_to_psi" else state.psi_to_p.mean
        state.psi_to_p, ga = gaussian_approx_message(psi, start, cfg)
        psi_value = ga.value
    except (NumericalError, DomainError, LinAlgError) as exc:
        state.failures.append(f"iteration {state.iteration + 1}: psi->p kept previous value ({exc})")

    # p -> xi
    new = _product(state.psi_to_p, prior_mean, prior_prec)
    state.p_to_xi = _damp(state.p_to_xi, new, beta)
    state.iteration += 1
    return state, xi_value, psi_value


def position_marginal(state, cfg):
    K = len(state.xi_to_p.mean) // 3
    prior_mean, prior_prec = _prior(cfg, K)
    a = state.xi_to_p.precision()
    b = state.psi_to_p.precision()
    prec = a + b + prior_prec
    cov = _inv_psd(prec)
    mean = cov @ (a @ state.xi_to_p.mean + b @ state.psi_to_p.mean + prior_prec @ prior_mean)
    return GaussianBelief(mean, 0.5 * (cov + cov.T))


def gain_marginal(state, problem, positions=None):
    """``psi -> varrho`` combined with the gain prior.

    ``B`` and ``C`` are taken at ``mu_{p->xi}`` and ``mu_{p->psi}`` unless
    ``positions`` is given, in which case both use ``positions``.
    """
    cfg = problem.cfg
    K = len(state.p_to_psi.mean) // 3
    if positions is None:
        C_at, Bw = feasible_positions(state.p_to_psi.mean, cfg), state.xi_to_rho_factor
    else:
        C_at, Bw = positions, problem.measurement(positions)
    C = problem.reference_factor(C_at) / np.sqrt(cfg.gain_prior_var)
    L = Bw @ C
    info = L.conj().T @ L
    rhs = L.conj().T @ problem.y_white
    state.psi_to_gain = GaussianBelief(np.linalg.lstsq(info, rhs, rcond=None)[0],
                                       np.linalg.pinv(info), "gain")
    prec = info + np.eye(K) / cfg.gain_prior_var
    cov = _inv_psd(prec)
    return GaussianBelief(cov @ rhs, 0.5 * (cov + cov.conj().T), "gain")


def run(y, W, sigma2, spec, cfg, n_users, amplitudes=None):
    """Estimate ``n_users`` positions, reference gains and channels.

    ``amplitudes`` holds ``sqrt(P_k) x_k`` per user (default 1) and is used to
    turn reference gains into central reference channel coefficients.
    """
    problem = Problem(y, W, sigma2, spec, cfg)
    init, state = sequential_init(problem, n_users)
    trace = []
    prev = None
    converged = False
    marg = None
    for _ in range(cfg.max_outer):
        state, xv, pv = iterate(state, problem)
        marg = position_marginal(state, cfg)
        pos = feasible_positions(marg.mean, cfg)
        trace.append(IterationRecord(pos.copy(), xv, pv))
        if prev is not None:
            change = np.linalg.norm(pos - prev, axis=1) / np.linalg.norm(pos, axis=1)
            if np.all(change < cfg.outer_tol):
                converged = True
                break
        prev = pos
    pos = feasible_positions(marg.mean, cfg)
    gains = gain_marginal(state, problem, pos if cfg.gain_at == "marginal" else None)
    amps = np.ones(n_users, dtype=complex) if amplitudes is None else np.asarray(amplitudes, dtype=complex)
    h_ref = gains.mean / amps
    channels = np.array([reconstruct_channel(p, h, spec, cfg.exact) for p, h in zip(pos, h_ref)])
    return EstimateResult(
        positions=pos, position_cov=marg.cov, gains=gains.mean, gain_cov=gains.cov,
        channels=channels, init_positions=init, trace=trace, converged=converged,
        iterations=state.iteration, failures=list(state.failures),
    )

