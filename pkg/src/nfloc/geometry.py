"""Planar array geometry and user coordinate transforms.

Antenna indices are 1-based ``(i, j)`` pairs.  Whenever the array is flattened
the ordering is column-major over ``(i, j)`` (``i`` runs fastest), so the flat
index of antenna ``(i, j)`` is ``(j - 1) * n_x + (i - 1)``.

Polar user coordinates are ``(chi_x, chi_y, r)``: the direction cosines with
respect to the x and y axes and the distance to the array centre.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DomainError

#: Margin kept between feasible direction cosines and the unit circle.
CHI_MARGIN = 1e-9


@dataclass(frozen=True)
class ArrayGeometry:
    """Uniform planar array in the z = 0 plane, centred on the origin."""

    n_x: int
    n_y: int
    spacing_m: float
    wavelength_m: float

    def __post_init__(self):
        if int(self.n_x) != self.n_x or self.n_x < 1:
            raise ValueError(f"n_x must be a positive integer, got {self.n_x!r}")
        if int(self.n_y) != self.n_y or self.n_y < 1:
            raise ValueError(f"n_y must be a positive integer, got {self.n_y!r}")
        if not self.spacing_m > 0:
            raise ValueError(f"spacing_m must be positive, got {self.spacing_m!r}")
        if not self.wavelength_m > 0:
            raise ValueError(f"wavelength_m must be positive, got {self.wavelength_m!r}")

    @property
    def n_antennas(self):
        return self.n_x * self.n_y

    @property
    def reference_index(self):
        """1-based index of the array reference antenna."""
        return (int(np.ceil((self.n_x + 1) / 2)), int(np.ceil((self.n_y + 1) / 2)))

    def positions(self):
        """All antenna positions, shape ``(n_x * n_y, 3)``, column-major order."""
        i = np.arange(1, self.n_x + 1)
        j = np.arange(1, self.n_y + 1)
        ii, jj = np.meshgrid(i, j, indexing="ij")
        x = (ii - (self.n_x + 1) / 2) * self.spacing_m
        y = (jj - (self.n_y + 1) / 2) * self.spacing_m
        pos = np.zeros((self.n_x, self.n_y, 3))
        pos[..., 0] = x
        pos[..., 1] = y
        return pos.reshape(-1, 3, order="F")

    def flat_index(self, i, j):
        """Column-major flat index (0-based) of 1-based antenna ``(i, j)``."""
        return (np.asarray(j) - 1) * self.n_x + (np.asarray(i) - 1)


def antenna_position(i, j, g):
    """Position of the ``(i, j)``-th antenna (1-based) of geometry ``g``."""
    if not (1 <= i <= g.n_x and 1 <= j <= g.n_y):
        raise ValueError(f"antenna index ({i}, {j}) outside 1..{g.n_x} x 1..{g.n_y}")
    return np.array([(i - (g.n_x + 1) / 2) * g.spacing_m,
                     (j - (g.n_y + 1) / 2) * g.spacing_m,
                     0.0])


def distance(p, q):
    return float(np.linalg.norm(np.asarray(p, dtype=float) - np.asarray(q, dtype=float)))


def _check_polar(pp):
    pp = np.asarray(pp, dtype=float)
    if pp.shape[-1] != 3:
        raise ValueError(f"polar positions need a trailing axis of length 3, got {pp.shape}")
    s = pp[..., 0] ** 2 + pp[..., 1] ** 2
    if np.any(s >= 1.0):
        raise DomainError("direction cosines must satisfy chi_x^2 + chi_y^2 < 1")
    if np.any(pp[..., 2] <= 0):
        raise DomainError("range must be positive")
    return pp, np.sqrt(1.0 - s)


def polar_to_cartesian(pp):
    """Map ``(..., 3)`` polar coordinates to Cartesian positions above the array."""
    pp, root = _check_polar(pp)
    r = pp[..., 2]
    return np.stack([r * pp[..., 0], r * pp[..., 1], r * root], axis=-1)


def cartesian_to_polar(p):
    """Inverse of :func:`polar_to_cartesian` for points with z > 0."""
    p = np.asarray(p, dtype=float)
    if np.any(p[..., 2] <= 0):
        raise DomainError("users must lie strictly above the array plane (z > 0)")
    r = np.linalg.norm(p, axis=-1)
    return np.stack([p[..., 0] / r, p[..., 1] / r, r], axis=-1)


def polar_jacobian(pp):
    """Jacobian ``d p / d (chi_x, chi_y, r)``; shape ``(..., 3, 3)``."""
    pp, root = _check_polar(pp)
    cx, cy, r = pp[..., 0], pp[..., 1], pp[..., 2]
    t = np.zeros(pp.shape[:-1] + (3, 3))
    t[..., 0, 0] = r
    t[..., 1, 1] = r
    t[..., 0, 2] = cx
    t[..., 1, 2] = cy
    t[..., 2, 0] = -r * cx / root
    t[..., 2, 1] = -r * cy / root
    t[..., 2, 2] = root
    return t


def project_feasible(pp, r_floor=1e-3, r_ceil=np.inf):
    """Pull polar points back inside the open half-space domain.

    Direction cosines are scaled radially onto ``chi_x^2 + chi_y^2 <= 1 - 1e-9``
    and ranges are clipped to ``[r_floor, r_ceil]``.
    """
    pp = np.array(pp, dtype=float, copy=True)
    s = pp[..., 0] ** 2 + pp[..., 1] ** 2
    limit = 1.0 - CHI_MARGIN
    over = s > limit
    if np.any(over):
        scale = np.sqrt(limit / s[over])
        pp[over, 0] *= scale
        pp[over, 1] *= scale
    pp[..., 2] = np.clip(pp[..., 2], r_floor, r_ceil)
    return pp


def rayleigh_distance(g):
    """Rayleigh distance ``2 D^2 / lambda`` with aperture ``D = d sqrt(n_x^2 + n_y^2)``."""
    aperture_sq = g.spacing_m ** 2 * (g.n_x ** 2 + g.n_y ** 2)
    return 2.0 * aperture_sq / g.wavelength_m
