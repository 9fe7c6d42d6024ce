"""Log-density of the position messages and its analytic derivatives.

Both position messages share one algebraic form.  For a linear model
``z = Phi(p) x + noise`` with whitened observation ``z``, whitened design
``Phi`` and a Gaussian prior on ``x`` with covariance ``F F^H``, integrating
``x`` out leaves (up to constants independent of ``p``)

    ln Delta(p) = Xi^H Upsilon^{-1} Xi,   Xi = Phi^H z,   Upsilon = (F F^H)^{-1} + Phi^H Phi.

``Upsilon^{-1}`` is applied as ``F (I + F^H Phi^H Phi F)^{-1} F^H``, which is
well defined when the prior covariance is singular (the rank-K covariance of
the rho message).  ``F = None`` means zero prior precision.

* the xi message uses ``Phi = C_n^{-1/2} B(p)`` and ``z = C_n^{-1/2} y``;
* the psi message uses ``Phi = L C(p)`` and ``z = L mu`` where ``L^H L`` is the
  precision of the incoming rho belief with mean ``mu``.

With ``v = Upsilon^{-1} Xi`` and ``r = z - Phi v`` the gradient is
``2 Re(r^H (d Phi) v)``.  Differentiating once more gives the Hessian used
for the Gaussian covariance of each message.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, cholesky

from .channel import array_response
from .errors import NumericalError
from .geometry import cartesian_to_polar, polar_jacobian

_EZ = np.array([0.0, 0.0, 1.0])


def response_derivatives(p, q, wavelength_m, order=1, exact=True):
    """Array response ``a = gamma / d * E`` and its derivatives with respect to ``p``.

    ``q`` holds antenna positions with shape ``(N, 3)``.  Returns ``(a, da)``
    for ``order=1`` and ``(a, da, d2a)`` for ``order=2`` with shapes ``(N,)``,
    ``(N, 3)`` and ``(N, 3, 3)``.  In the approximate model (``exact=False``)
    the amplitude factors are constant, so only the phase term varies.
    """
    p = np.asarray(p, dtype=float)
    q = np.atleast_2d(np.asarray(q, dtype=float))
    diff = p - q
    d = np.sqrt(np.einsum("ni,ni->n", diff, diff))
    e = diff / d[:, None]
    k = 2 * np.pi / wavelength_m
    E = np.exp(-1j * k * d)
    dE = (-1j * k * E)[:, None] * e
    if exact:
        cos = e[:, 2]
        root = np.sqrt(cos)
        gam = cos * root
        inv_d = 1.0 / d
        dcos = (_EZ - cos[:, None] * e) * inv_d[:, None]
        dgam = 1.5 * root[:, None] * dcos
        dinv = -e * (inv_d ** 2)[:, None]
    else:
        gam = np.ones_like(d)
        inv_d = np.ones_like(d)
    a = gam * inv_d * E
    if order == 0:
        return a
    if exact:
        da = dgam * (inv_d * E)[:, None] + dinv * (gam * E)[:, None] + dE * (gam * inv_d)[:, None]
    else:
        da = dE
    if order == 1:
        return a, da

    eye = np.eye(3)
    eet = e[:, :, None] * e[:, None, :]
    d2E = (-1j * k * E)[:, None, None] * (-1j * k * eet + (eye - eet) / d[:, None, None])
    if not exact:
        return a, da, d2E

    ez_e = _EZ[None, :, None] * e[:, None, :]
    d2cos = (cos[:, None, None] * (3 * eet - eye) - ez_e - np.transpose(ez_e, (0, 2, 1))) \
        / (d ** 2)[:, None, None]
    d2gam = 0.75 / root[:, None, None] * dcos[:, :, None] * dcos[:, None, :] \
        + 1.5 * root[:, None, None] * d2cos
    d2inv = (3 * eet - eye) / (d ** 3)[:, None, None]

    def sym(u, w):
        o = u[:, :, None] * w[:, None, :]
        return o + np.transpose(o, (0, 2, 1))

    d2a = (d2gam * (inv_d * E)[:, None, None]
           + d2inv * (gam * E)[:, None, None]
           + d2E * (gam * inv_d)[:, None, None]
           + sym(dgam, dinv) * E[:, None, None]
           + sym(dgam, dE) * inv_d[:, None, None]
           + sym(dinv, dE) * gam[:, None, None])
    return a, da, d2a


def channel_coeff_derivatives(p, q, wavelength_m, gain=None, order=1):
    """Channel coefficient of one antenna with its gradient (and Hessian) in ``p``."""
    if gain is None:
        gain = wavelength_m ** 2 / (16 * np.pi ** 2)
    out = response_derivatives(p, np.reshape(q, (1, 3)), wavelength_m, order=order)
    return tuple(gain * x[0] for x in out)


def ratio_derivatives(num, den, order):
    """Quotient rule for ``num / den`` where each argument is ``(value, d, d2)``.

    ``den`` entries broadcast against ``num`` (one denominator per subarray).
    """
    a, b = num[0], den[0]
    g = a / b
    if order == 0:
        return (g,)
    da, db = num[1], den[1]
    dg = (da - g[..., None] * db) / b[..., None]
    if order == 1:
        return g, dg
    d2a, d2b = num[2], den[2]
    o = dg[..., :, None] * db[..., None, :]
    d2g = (d2a - g[..., None, None] * d2b - o - np.swapaxes(o, -1, -2)) / b[..., None, None]
    return g, dg, d2g


@dataclass
class DerivativeBundle:
    value: float
    gradient: np.ndarray | None = None
    hessian: np.ndarray | None = None


def _factor(mat):
    n = mat.shape[0]
    try:
        return cho_factor(mat, lower=True)
    except LinAlgError:
        ridge = 1e-10 * max(np.trace(mat).real / n, np.finfo(float).tiny)
        try:
            return cho_factor(mat + ridge * np.eye(n), lower=True)
        except LinAlgError as exc:
            raise NumericalError("Upsilon is singular even after ridge regularization") from exc


def upsilon_solver(A, F):
    """Return ``x -> Upsilon^{-1} x`` for ``Upsilon = (F F^H)^{-1} + A``."""
    if F is None:
        fac = _factor(A)
        return lambda x: cho_solve(fac, x)
    S = np.eye(F.shape[1]) + F.conj().T @ A @ F
    S = 0.5 * (S + S.conj().T)
    fac = _factor(S)
    Fh = F.conj().T
    return lambda x: F @ cho_solve(fac, Fh @ x)


def evidence(z, Phi, F, dPhi=None, d2Phi=None, order=0):
    """Value, gradient and Hessian of ``Xi^H Upsilon^{-1} Xi`` for a parametrized design.

    ``dPhi`` has shape ``(P, N, n)`` and ``d2Phi`` shape ``(P, P, N, n)``.
    """
    A = Phi.conj().T @ Phi
    solve = upsilon_solver(A, F)
    xi = Phi.conj().T @ z
    v = solve(xi)
    value = float(np.real(np.vdot(xi, v)))
    if order == 0:
        return DerivativeBundle(value)
    r = z - Phi @ v
    U = dPhi @ v                                    # (P, N): dPhi_a v
    grad = 2 * np.real(U @ r.conj())
    if order == 1:
        return DerivativeBundle(value, grad)
    rhs = np.einsum("pnm,n->pm", dPhi.conj(), r) - U @ Phi.conj()
    dv = solve(rhs.T).T                             # (P, n): d v / d b
    dr = -U - dv @ Phi.T                            # (P, N): d r / d b
    term1 = (dr.conj() @ U.T).T
    term2 = np.einsum("n,abnm,m->ab", r.conj(), d2Phi, v) if d2Phi is not None else 0.0
    R = np.einsum("n,anm->am", r.conj(), dPhi)
    term3 = R @ dv.T
    hess = 2 * np.real(term1 + term2 + term3)
    return DerivativeBundle(value, grad, 0.5 * (hess + hess.T))


class MessageObjective:
    """Base class: subclasses build the whitened design for given free positions."""

    kind = None
    prior_factor = None

    def __init__(self, z, n_free):
        self.z = np.asarray(z, dtype=complex)
        self.n_free = n_free

    def design(self, positions, order):
        raise NotImplementedError

    def evaluate(self, positions, order=0):
        positions = np.asarray(positions, dtype=float).reshape(self.n_free, 3)
        Phi, dPhi, d2Phi = self.design(positions, order)
        return evidence(self.z, Phi, self.prior_factor, dPhi, d2Phi, order)

    def value(self, positions):
        return self.evaluate(positions, 0).value

    def gradient(self, positions):
        return self.evaluate(positions, 1).gradient

    def hessian(self, positions):
        return self.evaluate(positions, 2).hessian


def _stack_blocks(blocks, n_cols_fixed, Phi_fixed):
    """Assemble Phi, dPhi, d2Phi from per-user column blocks.

    ``blocks`` is a list of ``(Phi_k, dPhi_k, d2Phi_k)`` for the free users,
    where ``Phi_k`` has shape ``(N, c)``, ``dPhi_k`` ``(3, N, c)`` and
    ``d2Phi_k`` ``(3, 3, N, c)`` (the latter two may be ``None``).
    """
    Phis = [Phi_fixed] + [b[0] for b in blocks]
    Phi = np.concatenate(Phis, axis=1)
    N, n = Phi.shape
    dPhi = d2Phi = None
    if blocks and blocks[0][1] is not None:
        P = 3 * len(blocks)
        dPhi = np.zeros((P, N, n), dtype=complex)
        col = n_cols_fixed
        for k, b in enumerate(blocks):
            c = b[0].shape[1]
            dPhi[3 * k:3 * k + 3, :, col:col + c] = b[1]
            col += c
        if blocks[0][2] is not None:
            d2Phi = np.zeros((P, P, N, n), dtype=complex)
            col = n_cols_fixed
            for k, b in enumerate(blocks):
                c = b[0].shape[1]
                d2Phi[3 * k:3 * k + 3, 3 * k:3 * k + 3, :, col:col + c] = b[2]
                col += c
    return Phi, dPhi, d2Phi


class XiObjective(MessageObjective):
    """``ln Delta_{xi -> p}``: positions enter through the measurement matrix ``B``.

    Parameters
    ----------
    y_white : whitened received signal ``C_n^{-1/2} y``.
    W_white : whitened beamformer ``C_n^{-1/2} W`` (flat antenna order).
    spec : :class:`~nfloc.partition.PartitionSpec`.
    n_free : number of users whose positions are arguments.
    fixed : positions of users held fixed; their columns come first in ``B``.
    rho_factor : factor ``F`` of the rho -> xi covariance, or ``None`` for zero
        precision.  Rows follow the column order of ``B``.
    """

    kind = "xi"

    def __init__(self, y_white, W_white, spec, n_free, fixed=None, rho_factor=None, exact=True):
        super().__init__(y_white, n_free)
        from .partition import beamformer_layout

        self.spec = spec
        self.exact = exact
        self.Ws = beamformer_layout(W_white, spec)
        self.q = spec.antenna_positions().reshape(-1, 3)
        self.wavelength = spec.geometry.wavelength_m
        self.prior_factor = rho_factor
        fixed = np.zeros((0, 3)) if fixed is None else np.atleast_2d(np.asarray(fixed, dtype=float))
        self.fixed = fixed
        if len(fixed):
            self._B_fixed = np.concatenate([self._block(p, 0)[0] for p in fixed], axis=1)
        else:
            self._B_fixed = np.zeros((self.Ws.shape[1], 0), dtype=complex)

    def _block(self, p, order):
        spec = self.spec
        out = response_derivatives(p, self.q, self.wavelength, order=order, exact=self.exact)
        if order == 0:
            out = (out,)
        shaped = [x.reshape((spec.n_sub, spec.n_per_sub) + x.shape[1:]) for x in out]
        ref = [x[:, spec.ref_local:spec.ref_local + 1] for x in shaped]
        ratio = ratio_derivatives(shaped, ref, order)
        B = np.einsum("srn,sn->rs", self.Ws, ratio[0])
        dB = np.einsum("srn,snx->xrs", self.Ws, ratio[1]) if order >= 1 else None
        d2B = np.einsum("srn,snxy->xyrs", self.Ws, ratio[2]) if order >= 2 else None
        return B, dB, d2B

    def design(self, positions, order):
        blocks = [self._block(p, order) for p in positions]
        return _stack_blocks(blocks, self._B_fixed.shape[1], self._B_fixed)

    def grid_values(self, points, chunk=256):
        """Objective for each candidate position of a single free user (zero rho precision).

        Equals ``value`` at every point: the projection of ``z`` onto the span of
        the fixed users' columns plus the projection of the remainder onto the
        candidate's columns after the fixed span is removed.
        """
        if self.n_free != 1 or self.prior_factor is not None:
            raise ValueError("grid scoring needs one free user and zero rho precision")
        points = np.atleast_2d(np.asarray(points, dtype=float))
        spec = self.spec
        Qf = np.linalg.qr(self._B_fixed)[0] if self._B_fixed.shape[1] else None
        base = 0.0 if Qf is None else float(np.sum(np.abs(Qf.conj().T @ self.z) ** 2))
        out = np.empty(len(points))
        for lo in range(0, len(points), chunk):
            pts = points[lo:lo + chunk]
            a = array_response(pts[:, None, :], self.q, self.wavelength, exact=self.exact)
            a = a.reshape(len(pts), spec.n_sub, spec.n_per_sub)
            D = a / a[:, :, spec.ref_local, None]
            B = np.einsum("srn,gsn->grs", self.Ws, D)
            if Qf is not None:
                B = B - Qf @ (Qf.conj().T @ B)
            Q = np.linalg.qr(B)[0]
            proj = np.einsum("grs,r->gs", Q.conj(), self.z)
            out[lo:lo + chunk] = base + np.sum(np.abs(proj) ** 2, axis=1)
        return out


class PsiObjective(MessageObjective):
    """``ln Delta_{psi -> p}``: positions enter through the reference vectors ``c_k``.

    ``L`` is any factor with ``L^H L = C_{rho->psi}^{-1}`` and ``mean`` is
    ``mu_{rho->psi}``; ``gain_var`` holds the prior variances of the
    reference array gains.
    """

    kind = "psi"

    def __init__(self, mean, L, spec, n_users, gain_var, exact=True):
        L = np.asarray(L, dtype=complex)
        super().__init__(L @ np.asarray(mean, dtype=complex), n_users)
        self.L = L
        self.spec = spec
        self.exact = exact
        self.q = spec.reference_positions()
        self.wavelength = spec.geometry.wavelength_m
        gain_var = np.broadcast_to(np.asarray(gain_var, dtype=float), (n_users,))
        self.prior_factor = np.diag(np.sqrt(gain_var)).astype(complex)

    @classmethod
    def from_covariance(cls, mean, cov, spec, n_users, gain_var, exact=True):
        """Build from the rho -> psi mean and covariance."""
        prec = np.linalg.inv(cov)
        prec = 0.5 * (prec + prec.conj().T)
        L = cholesky(prec, lower=False)
        return cls(mean, L, spec, n_users, gain_var, exact)

    def _block(self, k, p, order):
        spec = self.spec
        out = response_derivatives(p, self.q, self.wavelength, order=order, exact=self.exact)
        if order == 0:
            out = (out,)
        ref = [x[spec.central_index:spec.central_index + 1] for x in out]
        c = ratio_derivatives(out, ref, order)
        Lk = self.L[:, k * spec.n_sub:(k + 1) * spec.n_sub]
        Phi = (Lk @ c[0])[:, None]
        dPhi = (Lk @ c[1]).T[:, :, None] if order >= 1 else None
        d2Phi = np.einsum("ns,sxy->xyn", Lk, c[2])[..., None] if order >= 2 else None
        return Phi, dPhi, d2Phi

    def design(self, positions, order):
        blocks = [self._block(k, p, order) for k, p in enumerate(positions)]
        empty = np.zeros((self.L.shape[0], 0), dtype=complex)
        return _stack_blocks(blocks, 0, empty)


class ResponseObjective(MessageObjective):
    """Single-user full-array fit ``max_p ||P_{W a(p)} y||^2`` used by the ES-GA baseline."""

    kind = "response"

    def __init__(self, y_white, W_white, geometry, exact=True):
        super().__init__(y_white, 1)
        self.W = np.asarray(W_white)
        self.q = geometry.positions()
        self.wavelength = geometry.wavelength_m
        self.exact = exact

    def design(self, positions, order):
        out = response_derivatives(positions[0], self.q, self.wavelength, order=order, exact=self.exact)
        if order == 0:
            out = (out,)
        Phi = (self.W @ out[0])[:, None]
        dPhi = (self.W @ out[1]).T[:, :, None] if order >= 1 else None
        d2Phi = np.einsum("rn,nxy->xyr", self.W, out[2])[..., None] if order >= 2 else None
        return Phi, dPhi, d2Phi

    def grid_values(self, points, chunk=256):
        """``|Phi^H z|^2 / ||Phi||^2`` for each candidate position."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.empty(len(points))
        for lo in range(0, len(points), chunk):
            pts = points[lo:lo + chunk]
            a = array_response(pts[:, None, :], self.q, self.wavelength, exact=self.exact)
            Phi = a @ self.W.T
            num = np.abs(Phi.conj() @ self.z) ** 2
            out[lo:lo + chunk] = num / np.sum(np.abs(Phi) ** 2, axis=1)
        return out


def eval_log_message(ctx, positions):
    return ctx.value(positions)


def grad_log_message(ctx, positions, domain="cartesian"):
    """Gradient bundle in Cartesian or polar ``(chi_x, chi_y, r)`` coordinates."""
    b = ctx.evaluate(positions, 1)
    if domain == "polar":
        pp = cartesian_to_polar(np.reshape(positions, (-1, 3)))
        T = polar_jacobian(pp)
        g = np.einsum("kij,ki->kj", T, b.gradient.reshape(-1, 3)).ravel()
        return DerivativeBundle(b.value, g)
    if domain != "cartesian":
        raise ValueError(f"unknown domain {domain!r}")
    return b


def hess_log_message(ctx, positions):
    return ctx.evaluate(positions, 2)


def finite_difference(f, x, step=1e-6, order=1):
    """Central-difference derivative of ``f`` at ``x``.

    The step along coordinate ``i`` is ``step * max(1, |x_i|)``.  ``order=1``
    gives the Jacobian (gradient for scalar ``f``), with the differentiated
    axis last; ``order=2`` differentiates the order-1 estimate once more.
    """
    x = np.asarray(x, dtype=float)
    if order == 2:
        return finite_difference(lambda t: finite_difference(f, t, step, 1), x, step, 1)
    if order != 1:
        raise ValueError("order must be 1 or 2")
    cols = []
    for i in range(x.size):
        h = step * max(1.0, abs(x.flat[i]))
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        cols.append((np.asarray(f(xp)) - np.asarray(f(xm))) / (2 * h))
    return np.stack(cols, axis=-1)
