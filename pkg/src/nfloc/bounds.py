"""Bayesian Cramer-Rao bounds for user positions, reference gains and channels.

The parameter vector is ``eta = [p_1, Re varrho_1, Im varrho_1, ..., p_K, ...]``
(five reals per user).  The noiseless received signal is written as

    mean(eta) = sum_k varrho_k W g_k(p_k),   g_k = a_k / a_k[central reference],

so position derivatives hold the reference gain fixed.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .derivatives import ratio_derivatives, response_derivatives
from .frontend import NoiseModel


@dataclass
class InformationMatrix:
    j: np.ndarray
    fisher: np.ndarray
    prior: np.ndarray


def _central_reference(spec):
    return spec.reference_positions()[spec.central_index]


def normalized_response(p, spec, order=1):
    """``g = a / a_ref`` over the whole array (flat order) with derivatives in ``p``."""
    g = spec.geometry
    lam = g.wavelength_m
    full = response_derivatives(p, g.positions(), lam, order=order)
    ref = response_derivatives(p, _central_reference(spec)[None, :], lam, order=order)
    if order == 0:
        full, ref = (full,), (ref,)
    return ratio_derivatives(full, ref, order)


def reference_gains(scenario, spec):
    """True ``varrho_k = sqrt(P_k) x_k alpha_k a_k[central reference]``."""
    q = _central_reference(spec)[None, :]
    lam = spec.geometry.wavelength_m
    return np.array([
        u.amplitude * u.complex_gain * response_derivatives(u.position, q, lam, order=0)[0]
        for u in scenario.users
    ])


def parameter_vector(scenario, spec):
    gains = reference_gains(scenario, spec)
    parts = [np.concatenate([u.position, [v.real, v.imag]]) for u, v in zip(scenario.users, gains)]
    return np.concatenate(parts)


def mean_from_parameters(eta, W, spec):
    """Noiseless ``y`` as a function of the real parameter vector."""
    eta = np.asarray(eta, dtype=float).reshape(-1, 5)
    out = np.zeros(np.shape(W)[0], dtype=complex)
    for row in eta:
        g = normalized_response(row[:3], spec, order=0)[0]
        out += (row[3] + 1j * row[4]) * (W @ g)
    return out


def mean_jacobian(scenario, W, spec):
    """``d mean / d eta`` as a complex ``(N_RF, 5K)`` matrix."""
    gains = reference_gains(scenario, spec)
    cols = []
    for u, v in zip(scenario.users, gains):
        g, dg = normalized_response(u.position, spec, order=1)
        Wg = W @ g
        cols.append(v * (W @ dg))
        cols.append(np.stack([Wg, 1j * Wg], axis=1))
    return np.concatenate(cols, axis=1)


def fisher_matrix(scenario, W, sigma2, spec):
    """``J_F = 2 Re(D^H C_n^{-1} D)`` with ``D = d mean / d eta``."""
    D = NoiseModel(sigma2, W).whiten(mean_jacobian(scenario, W, spec))
    J = 2 * np.real(D.conj().T @ D)
    return 0.5 * (J + J.T)


def prior_matrix(n_users, position_var, gain_var):
    """Prior information: ``1 / nu`` on each coordinate and ``2 / tau`` on each gain part."""
    block = np.diag([1 / position_var] * 3 + [2 / gain_var] * 2)
    return np.kron(np.eye(n_users), block)


def information_matrix(scenario, W, sigma2, spec, position_var=1e9, gain_var=1e9):
    F = fisher_matrix(scenario, W, sigma2, spec)
    P = prior_matrix(scenario.n_users, position_var, gain_var)
    return InformationMatrix(F + P, F, P)


def _inverse(J):
    J = 0.5 * (J + J.T)
    n = J.shape[0]
    try:
        fac = cho_factor(J)
    except LinAlgError:
        ridge = 1e-10 * np.trace(J) / n
        warnings.warn(f"information matrix singular; adding ridge {ridge:.3g}", RuntimeWarning)
        fac = cho_factor(J + ridge * np.eye(n))
    inv = cho_solve(fac, np.eye(n))
    return 0.5 * (inv + inv.T)


def position_bcrb(J):
    """Per-user position variance bounds ``(K, 3)`` and the RMSE bound."""
    J = J.j if isinstance(J, InformationMatrix) else J
    inv = _inverse(J)
    d = np.diag(inv).reshape(-1, 5)[:, :3]
    return d, float(np.sqrt(d.sum() / len(d)))


def channel_jacobian(scenario, spec):
    """``d [Re h_1, Im h_1, ..., Re h_K, Im h_K] / d eta`` (real, ``(2 K N_B, 5K)``)."""
    gains = reference_gains(scenario, spec)
    K = scenario.n_users
    n = spec.geometry.n_antennas
    G = np.zeros((2 * K * n, 5 * K))
    for k, (u, v) in enumerate(zip(scenario.users, gains)):
        g, dg = normalized_response(u.position, spec, order=1)
        block = np.concatenate([v * dg, g[:, None], 1j * g[:, None]], axis=1) / u.amplitude
        G[2 * k * n:(2 * k + 1) * n, 5 * k:5 * k + 5] = block.real
        G[(2 * k + 1) * n:(2 * k + 2) * n, 5 * k:5 * k + 5] = block.imag
    return G


def channel_bcrb(J, scenario, spec):
    """Per-entry variance bounds of the real-stacked channel and the NMSE bound."""
    J = J.j if isinstance(J, InformationMatrix) else J
    G = channel_jacobian(scenario, spec)
    var = np.einsum("ij,jk,ik->i", G, _inverse(J), G)
    n = spec.geometry.n_antennas
    per_user = var.reshape(scenario.n_users, 2 * n).sum(axis=1)
    energy = np.sum(np.abs(scenario.channels()) ** 2, axis=1)
    return var, float(np.mean(per_user / energy))
