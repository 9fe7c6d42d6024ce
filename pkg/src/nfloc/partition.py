"""Rectangular array partitioning and the subarray signal model.

The array is tiled into ``m x m`` subarrays indexed by ``(u, v)``; subarray
``(u, v)`` maps to the linear index ``s = (v - 1) * m + u``.  Each subarray
has a reference antenna near its centre.  A user's channel on subarray ``s``
factors as ``h_ref^(s) * D_s`` where ``D_s`` is the channel normalized by its
reference entry, and the reference coefficients factor in turn as
``h_ref^(c) * c`` with ``c`` the reference-channel vector relative to the
central subarray ``(c)``.

Internally everything is held in "partition layout": arrays indexed by
``(s, n)`` where ``n`` is the column-major antenna index inside subarray ``s``.
"""

from dataclasses import dataclass

import numpy as np

from .channel import array_response, default_gain
from .geometry import ArrayGeometry


@dataclass(frozen=True)
class PartitionSpec:
    geometry: ArrayGeometry
    m: int
    ns_x: int
    ns_y: int
    #: ``(m*m, 2)`` 1-based global ``(i, j)`` of every subarray reference antenna, in s order.
    reference_indices: np.ndarray
    #: 1-based ``(u, v)`` of the central subarray.
    central_subarray: tuple
    #: ``(m*m, ns_x*ns_y)`` global flat (column-major) antenna index, partition layout.
    antenna_index: np.ndarray
    #: flat index of the reference antenna inside a subarray.
    ref_local: int

    @property
    def n_sub(self):
        return self.m * self.m

    @property
    def n_per_sub(self):
        return self.ns_x * self.ns_y

    @property
    def central_index(self):
        """0-based linear index of the central subarray."""
        u, v = self.central_subarray
        return (v - 1) * self.m + (u - 1)

    def antenna_positions(self):
        """Antenna positions in partition layout, shape ``(m*m, ns_x*ns_y, 3)``."""
        return self.geometry.positions()[self.antenna_index]

    def reference_positions(self):
        """Reference antenna positions, shape ``(m*m, 3)``."""
        return self.antenna_positions()[:, self.ref_local]

    def to_partition_layout(self, x):
        """Reorder a trailing axis of length ``N_B`` (flat order) into ``(m*m, n_per_sub)``."""
        x = np.asarray(x)
        return x[..., self.antenna_index]

    def from_partition_layout(self, x):
        """Inverse of :meth:`to_partition_layout` for a ``(..., m*m, n_per_sub)`` array."""
        x = np.asarray(x)
        out = np.zeros(x.shape[:-2] + (self.geometry.n_antennas,), dtype=x.dtype)
        out[..., self.antenna_index] = x
        return out


def make_partition(g, m):
    """Split ``g`` evenly into ``m x m`` subarrays."""
    if int(m) != m or m < 1:
        raise ValueError(f"m must be a positive integer, got {m!r}")
    if g.n_x % m or g.n_y % m:
        raise ValueError(f"{m} subarrays per side do not evenly divide a {g.n_x}x{g.n_y} array")
    ns_x, ns_y = g.n_x // m, g.n_y // m
    ref_i = int(np.ceil(ns_x / 2))
    ref_j = int(np.ceil(ns_y / 2))
    index = np.empty((m * m, ns_x * ns_y), dtype=int)
    refs = np.empty((m * m, 2), dtype=int)
    li, lj = np.meshgrid(np.arange(1, ns_x + 1), np.arange(1, ns_y + 1), indexing="ij")
    li = li.ravel(order="F")
    lj = lj.ravel(order="F")
    for v in range(1, m + 1):
        for u in range(1, m + 1):
            s = (v - 1) * m + (u - 1)
            gi = (u - 1) * ns_x + li
            gj = (v - 1) * ns_y + lj
            index[s] = g.flat_index(gi, gj)
            refs[s] = ((u - 1) * ns_x + ref_i, (v - 1) * ns_y + ref_j)
    central = int(np.ceil(m / 2))
    return PartitionSpec(
        geometry=g, m=m, ns_x=ns_x, ns_y=ns_y,
        reference_indices=refs,
        central_subarray=(central, central),
        antenna_index=index,
        ref_local=(ref_j - 1) * ns_x + (ref_i - 1),
    )


def _response(p, spec, exact):
    """Array response of one user in partition layout."""
    q = spec.antenna_positions().reshape(-1, 3)
    a = array_response(p, q, spec.geometry.wavelength_m, exact=exact)
    return a.reshape(spec.n_sub, spec.n_per_sub)


def subarray_block(p, spec, u, v, gain=None, exact=True):
    """Reference coefficient and normalized block ``D`` of subarray ``(u, v)``.

    Returns ``(h_ref, D)`` with ``D`` of shape ``(ns_x, ns_y)``.
    """
    if not (1 <= u <= spec.m and 1 <= v <= spec.m):
        raise ValueError(f"subarray ({u}, {v}) outside 1..{spec.m}")
    if gain is None:
        gain = default_gain(spec.geometry.wavelength_m)
    s = (v - 1) * spec.m + (u - 1)
    q = spec.antenna_positions()[s]
    h = gain * array_response(p, q, spec.geometry.wavelength_m, exact=exact)
    h_ref = h[spec.ref_local]
    d = h / h_ref
    d[spec.ref_local] = 1.0
    return complex(h_ref), d.reshape(spec.ns_x, spec.ns_y, order="F")


def reference_vector(p, spec, exact=True):
    """Reference-channel vector ``c(p)`` of length ``m*m``; the central entry is 1."""
    q = spec.reference_positions()
    a = array_response(p, q, spec.geometry.wavelength_m, exact=exact)
    c = a / a[spec.central_index]
    c[spec.central_index] = 1.0
    return c


def normalized_blocks(p, spec, exact=True):
    """All ``D`` blocks of one user in partition layout ``(m*m, n_per_sub)``."""
    a = _response(p, spec, exact)
    d = a / a[:, spec.ref_local, None]
    d[:, spec.ref_local] = 1.0
    return d


def beamformer_layout(W, spec):
    """Reorder beamformer columns into ``(m*m, N_RF, n_per_sub)`` sub-blocks ``W_s``."""
    W = np.asarray(W)
    if W.ndim != 2 or W.shape[1] != spec.geometry.n_antennas:
        raise ValueError(f"beamformer must have {spec.geometry.n_antennas} columns, got shape {W.shape}")
    return np.transpose(W[:, spec.antenna_index], (1, 0, 2))


def build_B(positions, W, spec, exact=True):
    """Measurement matrix ``B = [B_1, ..., B_K]`` of shape ``(N_RF, K*m*m)``."""
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    Ws = beamformer_layout(W, spec)
    blocks = []
    for p in positions:
        d = normalized_blocks(p, spec, exact)
        blocks.append(np.einsum("srn,sn->rs", Ws, d))
    return np.concatenate(blocks, axis=1)


def reconstruct_channel(p_hat, h_ref_hat, spec, exact=True):
    """Assemble a full ``n_x x n_y`` channel from a position and central reference gain."""
    c = reference_vector(p_hat, spec, exact)
    d = normalized_blocks(p_hat, spec, exact)
    flat = spec.from_partition_layout(h_ref_hat * c[:, None] * d)
    g = spec.geometry
    return flat.reshape(g.n_x, g.n_y, order="F")
