"""Analog combining network, colored noise and received-signal synthesis."""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky, solve_triangular

from .channel import channel_vector
from .geometry import ArrayGeometry


@dataclass(frozen=True)
class Beamformer:
    """Unit-modulus analog combiner ``W`` of shape ``(N_RF, N_B)``."""

    weights: np.ndarray
    seed: int | None = None

    @property
    def n_rf(self):
        return self.weights.shape[0]


def random_beamformer(n_rf, n_b, seed):
    """Phase shifters with i.i.d. uniform phases on ``[0, 2 pi)``."""
    if n_rf < 1 or n_b < 1:
        raise ValueError("n_rf and n_b must be positive")
    rng = np.random.default_rng(seed)
    phases = rng.uniform(0.0, 2 * np.pi, size=(n_rf, n_b))
    return Beamformer(np.exp(1j * phases), seed)


class NoiseModel:
    """Combined noise ``n = W n0`` with ``n0 ~ CN(0, sigma2 I)``, so ``C_n = sigma2 W W^H``.

    Products with ``C_n^{-1}`` go through a Cholesky factor ``C_n = R R^H``;
    :meth:`whiten` applies ``R^{-1}``.  If the smallest eigenvalue of ``C_n``
    falls below ``1e-10 * trace(C_n) / N_RF`` that amount is added on the
    diagonal first.
    """

    def __init__(self, sigma2, weights):
        if not sigma2 > 0:
            raise ValueError("sigma2 must be positive to build a noise whitener")
        self.sigma2 = float(sigma2)
        self.weights = np.asarray(weights)
        cov = self.covariance
        n = cov.shape[0]
        ridge = 1e-10 * np.trace(cov).real / n
        self.ridge = 0.0
        if np.linalg.eigvalsh(cov)[0] < ridge:
            self.ridge = ridge
            cov = cov + ridge * np.eye(n)
        self._chol = cholesky(cov, lower=True)

    @property
    def covariance(self):
        W = self.weights
        return self.sigma2 * (W @ W.conj().T)

    def whiten(self, x):
        """``R^{-1} x`` for a vector or matrix ``x`` with ``N_RF`` rows."""
        return solve_triangular(self._chol, x, lower=True)

    def quad(self, x):
        """``x^H C_n^{-1} x``."""
        z = self.whiten(x)
        return float(np.real(np.vdot(z, z)))


@dataclass(frozen=True)
class UplinkScenario:
    geometry: ArrayGeometry
    users: tuple = field(default_factory=tuple)

    @property
    def n_users(self):
        return len(self.users)

    @property
    def positions(self):
        return np.array([u.position for u in self.users]).reshape(-1, 3)

    def channels(self):
        """Stacked channel vectors ``h_k`` (column-major), shape ``(K, N_B)``."""
        return np.array([channel_vector(u, self.geometry) for u in self.users]).reshape(
            -1, self.geometry.n_antennas)


@dataclass(frozen=True)
class ReceivedSignal:
    y: np.ndarray
    seed: int | None
    noiseless: np.ndarray


def noiseless_signal(scenario, W):
    """``sum_k sqrt(P_k) x_k W h_k``."""
    W = np.asarray(W)
    out = np.zeros(W.shape[0], dtype=complex)
    for u, h in zip(scenario.users, scenario.channels()):
        out += u.amplitude * (W @ h)
    return out


def synthesize_received(scenario, W, sigma2, seed):
    """Received vector with noise drawn in the antenna domain and then combined."""
    W = np.asarray(W)
    clean = noiseless_signal(scenario, W)
    rng = np.random.default_rng(seed)
    n_b = W.shape[1]
    n0 = np.sqrt(sigma2 / 2) * (rng.standard_normal(n_b) + 1j * rng.standard_normal(n_b))
    return ReceivedSignal(clean + W @ n0, seed, clean)


def sigma2_for_snr(scenario, W, target_snr_db):
    """Noise power giving ``||signal||^2 / (sigma2 trace(W W^H)) = 10^(SNR/10)``."""
    W = np.asarray(W)
    clean = noiseless_signal(scenario, W)
    power = float(np.real(np.vdot(clean, clean)))
    if power <= 0:
        raise ValueError("scenario produces zero signal power")
    trace = float(np.sum(np.abs(W) ** 2))
    return power / (trace * 10 ** (target_snr_db / 10))


def measured_snr_db(clean, W, sigma2):
    trace = float(np.sum(np.abs(np.asarray(W)) ** 2))
    return 10 * np.log10(float(np.real(np.vdot(clean, clean))) / (sigma2 * trace))
