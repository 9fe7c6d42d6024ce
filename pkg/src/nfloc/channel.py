"""Near-field channel model with element radiation pattern and spherical path loss.

A channel coefficient between a user at ``p`` and an antenna at ``q`` is

    h = alpha * gamma(p, q) / ||p - q|| * exp(-j 2 pi ||p - q|| / lambda)

where ``gamma`` is the square root of the element power pattern evaluated at
the elevation angle of ``p`` seen from ``q``.  The "approximate" model keeps
only the phase term, i.e. it assumes equal amplitudes over the whole array.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .geometry import ArrayGeometry, antenna_position


def radiation_gain(theta):
    """Normalized element power pattern: ``cos^3(theta)`` in front, 0 behind."""
    theta = np.asarray(theta, dtype=float)
    gain = np.where(theta <= np.pi / 2, np.cos(np.minimum(theta, np.pi / 2)) ** 3, 0.0)
    gain = np.maximum(gain, 0.0)
    return gain if gain.ndim else float(gain)


def default_gain(wavelength_m):
    """Constant Friis term ``lambda^2 / (16 pi^2)`` used as the default ``alpha``."""
    return wavelength_m ** 2 / (16 * np.pi ** 2)


@dataclass(frozen=True)
class UserChannelParams:
    """Parameters of a single-antenna user."""

    position: np.ndarray
    complex_gain: complex
    tx_power_w: float = 1.0
    pilot: complex = 1.0 + 0.0j

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float).reshape(3)
        object.__setattr__(self, "position", pos)
        if pos[2] <= 0:
            raise DomainError("user must be above the array plane (z > 0)")
        if not self.tx_power_w > 0:
            raise ValueError("tx_power_w must be positive")
        if not np.isclose(abs(self.pilot), 1.0, atol=1e-12):
            raise ValueError("pilot must have unit modulus")

    @classmethod
    def with_default_gain(cls, position, wavelength_m, **kwargs):
        return cls(position, default_gain(wavelength_m), **kwargs)

    @property
    def amplitude(self):
        """``sqrt(P) * x``, the factor multiplying the channel in the received signal."""
        return np.sqrt(self.tx_power_w) * self.pilot


def _cosines(p, q):
    diff = np.asarray(p, dtype=float) - np.atleast_2d(np.asarray(q, dtype=float))
    d = np.linalg.norm(diff, axis=-1)
    if np.any(d == 0):
        raise DomainError("user coincides with an antenna")
    cos = diff[..., 2] / d
    if np.any(cos <= 0):
        raise DomainError("user is not in front of every antenna (e_z^T (p - q) <= 0)")
    return d, cos


def amplitude_gain(p, q):
    """``gamma = (e_z^T (p - q) / ||p - q||)^(3/2)`` for one antenna."""
    _, cos = _cosines(p, q)
    return float(cos[0] ** 1.5)


def array_response(p, q, wavelength_m, exact=True, pattern=None):
    """Channel divided by ``alpha`` for every antenna row of ``q``.

    ``pattern`` optionally replaces the default ``cos^3`` power pattern with a
    scalar function of the elevation angle.  ``exact=False`` gives the
    phase-only approximate model.
    """
    d, cos = _cosines(p, q)
    phase = np.exp(-2j * np.pi * d / wavelength_m)
    if not exact:
        return phase
    if pattern is None:
        gamma = cos ** 1.5
    else:
        gamma = np.sqrt(np.asarray(pattern(np.arccos(np.clip(cos, -1.0, 1.0))), dtype=float))
    return gamma / d * phase


def channel_coeff(u, q, wavelength_m, pattern=None):
    """Channel coefficient between user ``u`` and a single antenna at ``q``."""
    return complex(u.complex_gain * array_response(u.position, q, wavelength_m, pattern=pattern)[0])


def channel_matrix(u, g, pattern=None):
    """``n_x x n_y`` channel matrix of user ``u`` over geometry ``g``."""
    h = u.complex_gain * array_response(u.position, g.positions(), g.wavelength_m, pattern=pattern)
    return h.reshape(g.n_x, g.n_y, order="F")


def channel_vector(u, g, pattern=None):
    """Column-major vectorization of :func:`channel_matrix`."""
    return u.complex_gain * array_response(u.position, g.positions(), g.wavelength_m, pattern=pattern)


def approx_channel_matrix(u, g):
    """Equal-amplitude model anchored at the array reference antenna."""
    ref = antenna_position(*g.reference_index, g)
    h_ref = channel_coeff(u, ref, g.wavelength_m)
    d = np.linalg.norm(u.position - g.positions(), axis=-1)
    d_ref = np.linalg.norm(u.position - ref)
    h = h_ref * np.exp(-2j * np.pi * (d - d_ref) / g.wavelength_m)
    return h.reshape(g.n_x, g.n_y, order="F")


def steering_vector(n, theta, spacing_m, wavelength_m):
    """ULA steering vector ``[1, e^{j 2 pi d cos(theta)/lambda}, ...]``."""
    k = np.arange(n)
    return np.exp(2j * np.pi * spacing_m / wavelength_m * k * np.cos(theta))


def farfield_channel_matrix(gain, theta_x, theta_y, g: ArrayGeometry):
    """Rank-one plane-wave channel ``gain * a_x(theta_x) a_y(theta_y)^T``."""
    ax = steering_vector(g.n_x, theta_x, g.spacing_m, g.wavelength_m)
    ay = steering_vector(g.n_y, theta_y, g.spacing_m, g.wavelength_m)
    return gain * np.outer(ax, ay)
