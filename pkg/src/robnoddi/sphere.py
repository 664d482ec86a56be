"""Directions on the unit sphere and q-space sampling schemes.

Directions are plain ``(n, 3)`` float arrays. A direction ``g`` and its
antipode ``-g`` produce the same diffusion weighting, so separation
metrics and scheme construction treat them as the same point.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .exceptions import (
    EmptySchemeError,
    InsufficientInputError,
    InvalidDirectionError,
    SelectionSizeError,
)

UNIT_TOL = 1e-6

_GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


def as_directions(dirs, tol: float = UNIT_TOL) -> np.ndarray:
    """Validate and return ``dirs`` as a float64 array of shape (n, 3).

    Raises
    ------
    InvalidDirectionError
        If any vector's norm deviates from 1 by more than ``tol``.
    """
    d = np.asarray(dirs, dtype=np.float64)
    if d.ndim == 1:
        d = d[None, :]
    if d.ndim != 2 or d.shape[1] != 3:
        raise InvalidDirectionError(f"expected directions of shape (n, 3), got {d.shape}")
    norms = np.linalg.norm(d, axis=1)
    if not np.all(np.isfinite(norms)) or np.any(np.abs(norms - 1.0) > tol):
        worst = np.max(np.abs(norms - 1.0))
        raise InvalidDirectionError(f"direction norm deviates from 1 by {worst:.3g}")
    return d


def normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def cart_to_sph(d):
    """Convert unit vectors to (polar, azimuth) angles.

    Parameters
    ----------
    d : array_like, shape (3,) or (n, 3)

    Returns
    -------
    theta, phi : float or ndarray
        Polar angle in [0, pi] and azimuth in [0, 2*pi).
    """
    arr = np.asarray(d, dtype=np.float64)
    single = arr.ndim == 1
    d = as_directions(arr)
    theta = np.arccos(np.clip(d[:, 2], -1.0, 1.0))
    phi = np.mod(np.arctan2(d[:, 1], d[:, 0]), 2.0 * np.pi)
    # mod can round -tiny up to exactly 2*pi
    phi = np.where(phi >= 2.0 * np.pi, 0.0, phi)
    if single:
        return float(theta[0]), float(phi[0])
    return theta, phi


def sph_to_cart(theta, phi) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def random_directions(n: int, rng) -> np.ndarray:
    """Draw ``n`` directions uniformly on the sphere."""
    rng = np.random.default_rng(rng)
    return normalize(rng.standard_normal((n, 3)))


def random_rotation(rng) -> np.ndarray:
    """Uniformly distributed 3x3 rotation matrix (QR of a Gaussian matrix)."""
    rng = np.random.default_rng(rng)
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def fibonacci_hemisphere(n: int) -> np.ndarray:
    """Spherical Fibonacci points on the upper hemisphere."""
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (i + 0.5) / n
    r = np.sqrt(1.0 - z * z)
    phi = i * _GOLDEN_ANGLE
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def electrostatic_energy(dirs) -> float:
    """Antipodally symmetric Coulomb energy sum_{i<j} 1/|di-dj| + 1/|di+dj|."""
    d = np.asarray(dirs, dtype=np.float64)
    n = len(d)
    if n < 2:
        return 0.0
    iu = np.triu_indices(n, k=1)
    diff = d[:, None, :] - d[None, :, :]
    summ = d[:, None, :] + d[None, :, :]
    dm = np.linalg.norm(diff, axis=-1)[iu]
    dp = np.linalg.norm(summ, axis=-1)[iu]
    return float(np.sum(1.0 / dm) + np.sum(1.0 / dp))


def _energy_gradient(d: np.ndarray) -> np.ndarray:
    diff = d[:, None, :] - d[None, :, :]
    summ = d[:, None, :] + d[None, :, :]
    rm = np.linalg.norm(diff, axis=-1)
    rp = np.linalg.norm(summ, axis=-1)
    np.fill_diagonal(rm, np.inf)
    np.fill_diagonal(rp, np.inf)
    grad = -np.sum(diff / rm[..., None] ** 3, axis=1) - np.sum(summ / rp[..., None] ** 3, axis=1)
    return grad


def _canonical_hemisphere(d: np.ndarray) -> np.ndarray:
    flip = (d[:, 2] < 0) | ((d[:, 2] == 0) & (d[:, 1] < 0))
    d = d.copy()
    d[flip] = -d[flip]
    return d


def generate_uniform_directions(
    n: int, seed: int = 0, max_iter: int = 500, rtol: float = 1e-9
) -> np.ndarray:
    """Well-spread antipodally symmetric directions.

    Starts from a spherical Fibonacci set (randomly rotated by ``seed``) and
    runs projected gradient descent on :func:`electrostatic_energy`, stopping
    after ``max_iter`` iterations or when the relative energy change drops
    below ``rtol``. A step is only accepted when it lowers the energy, so the
    result never has higher energy than the starting configuration.

    Returns
    -------
    ndarray, shape (n, 3)
        Unit vectors on the upper hemisphere.
    """
    if n < 1:
        raise EmptySchemeError("cannot generate an empty direction scheme")
    rng = np.random.default_rng(seed)
    d = fibonacci_hemisphere(n) @ random_rotation(rng).T
    d = normalize(d)
    if n == 1:
        return _canonical_hemisphere(d)

    energy = electrostatic_energy(d)
    step = None
    for _ in range(max_iter):
        g = _energy_gradient(d)
        g -= np.sum(g * d, axis=1, keepdims=True) * d
        gmax = np.max(np.linalg.norm(g, axis=1))
        if gmax == 0.0:
            break
        if step is None:
            step = 0.05 / gmax
        while True:
            trial = normalize(d - step * g)
            e_trial = electrostatic_energy(trial)
            if e_trial < energy:
                break
            step *= 0.5
            if step * gmax < 1e-15:
                e_trial = energy
                trial = d
                break
        rel = abs(energy - e_trial) / energy
        d, energy = trial, e_trial
        step *= 1.2
        if rel < rtol:
            break
    return _canonical_hemisphere(d)


def min_angular_separation(dirs) -> float:
    """Smallest pairwise angle in radians, with g and -g identified."""
    d = as_directions(dirs)
    if len(d) < 2:
        raise InsufficientInputError("need at least two directions")
    cos = np.abs(d @ d.T)
    np.fill_diagonal(cos, -np.inf)
    return float(np.arccos(np.clip(cos.max(), 0.0, 1.0)))


def spread_subset(dirs, n: int) -> np.ndarray:
    """Greedy farthest-point selection of ``n`` well-spread directions.

    Starts at index 0 and repeatedly adds the direction whose smallest
    antipodal angle to the chosen set is largest. Returns sorted indices.
    """
    d = as_directions(dirs)
    if not 1 <= n <= len(d):
        raise SelectionSizeError(f"cannot select {n} of {len(d)} directions")
    chosen = [0]
    closeness = np.abs(d @ d[0])
    for _ in range(n - 1):
        closeness[chosen] = np.inf
        nxt = int(np.argmin(closeness))
        chosen.append(nxt)
        closeness = np.maximum(closeness, np.abs(d @ d[nxt]))
    return np.sort(np.asarray(chosen, dtype=np.intp))


@dataclass(frozen=True)
class Shell:
    """One b-value shell: nominal b (s/mm^2) and its (n, 3) directions."""

    bvalue: float
    directions: np.ndarray

    def __post_init__(self):
        d = as_directions(self.directions, tol=1e-3)
        if len(d) < 1:
            raise EmptySchemeError("a shell needs at least one direction")
        if not self.bvalue > 0:
            raise EmptySchemeError(f"shell b-value must be positive, got {self.bvalue}")
        d = d.copy()
        d.setflags(write=False)
        object.__setattr__(self, "directions", d)
        object.__setattr__(self, "bvalue", float(self.bvalue))

    def __len__(self):
        return len(self.directions)


@dataclass(frozen=True)
class GradientScheme:
    """Multi-shell acquisition description.

    The canonical channel layout used throughout the package is: all b0
    channels first, then each shell's directions in order.
    """

    shells: tuple
    b0_count: int = 0

    def __post_init__(self):
        shells = tuple(
            s if isinstance(s, Shell) else Shell(float(s[0]), np.asarray(s[1])) for s in self.shells
        )
        bvals = [s.bvalue for s in shells]
        if len(set(bvals)) != len(bvals):
            raise ValueError(f"shell b-values must be distinct, got {bvals}")
        if self.b0_count < 0:
            raise ValueError("b0_count must be nonnegative")
        object.__setattr__(self, "shells", shells)
        object.__setattr__(self, "b0_count", int(self.b0_count))

    @classmethod
    def uniform(cls, bvalues: Sequence[float], counts: Sequence[int], b0_count: int = 0, seed: int = 0):
        """Independently generated well-spread directions for every shell."""
        shells = [
            Shell(b, generate_uniform_directions(n, seed=seed * 1000 + 17 * i + 1))
            for i, (b, n) in enumerate(zip(bvalues, counts))
        ]
        return cls(tuple(shells), b0_count)

    @property
    def n_shells(self) -> int:
        return len(self.shells)

    @property
    def shell_sizes(self) -> tuple:
        return tuple(len(s) for s in self.shells)

    @property
    def n_diffusion(self) -> int:
        return sum(self.shell_sizes)

    @property
    def n_channels(self) -> int:
        return self.b0_count + self.n_diffusion

    def shell_slices(self, include_b0: bool = True) -> list:
        """Slices of each shell within the channel axis."""
        start = self.b0_count if include_b0 else 0
        out = []
        for n in self.shell_sizes:
            out.append(slice(start, start + n))
            start += n
        return out

    def bvals(self) -> np.ndarray:
        parts = [np.zeros(self.b0_count)] + [np.full(len(s), s.bvalue) for s in self.shells]
        return np.concatenate(parts)

    def bvecs(self) -> np.ndarray:
        """(3, n_channels) array; b0 columns are zero vectors."""
        parts = [np.zeros((self.b0_count, 3))] + [s.directions for s in self.shells]
        return np.concatenate(parts).T

    def subset(self, selections) -> "GradientScheme":
        """Scheme restricted to the given per-shell selections (b0 dropped)."""
        shells = []
        for sel in selections:
            sh = self.shells[sel.shell_index]
            shells.append(Shell(sh.bvalue, sh.directions[np.asarray(sel.indices)]))
        return GradientScheme(tuple(shells), 0)

    def diffusion_only(self) -> "GradientScheme":
        return GradientScheme(self.shells, 0)


@dataclass(frozen=True)
class SubsampleSelection:
    shell_index: int
    indices: tuple

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if len(set(idx)) != len(idx) or list(idx) != sorted(idx):
            raise SelectionSizeError("selection indices must be distinct and sorted")
        object.__setattr__(self, "indices", idx)

    def __len__(self):
        return len(self.indices)


def random_subsample(scheme: GradientScheme, shell_index: int, n: int, rng) -> SubsampleSelection:
    """Draw ``n`` distinct directions of one shell uniformly without replacement."""
    size = len(scheme.shells[shell_index])
    if not 1 <= n <= size:
        raise SelectionSizeError(f"cannot draw {n} directions from a shell of {size}")
    rng = np.random.default_rng(rng)
    idx = np.sort(rng.choice(size, size=n, replace=False))
    return SubsampleSelection(shell_index, tuple(idx.tolist()))


def spread_selection(scheme: GradientScheme, shell_index: int, n: int) -> SubsampleSelection:
    """Deterministic well-spread selection (see :func:`spread_subset`)."""
    idx = spread_subset(scheme.shells[shell_index].directions, n)
    return SubsampleSelection(shell_index, tuple(idx.tolist()))
