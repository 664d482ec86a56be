"""Real even-order spherical harmonics: basis, regularized fit, resampling.

Coefficient ordering is fixed: ``l = 0, 2, ..., L`` and, within each ``l``,
``m = -l, ..., l``. Column ``j`` of a basis matrix is

* ``sqrt(2) * Im(Y_l^|m|)`` for ``m < 0``
* ``Y_l^0`` for ``m = 0``
* ``sqrt(2) * Re(Y_l^m)`` for ``m > 0``

which is orthonormal on the sphere.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, special

from .exceptions import InvalidSignalError, RankDeficientError, UnsupportedOrderError
from .sphere import as_directions

DEFAULT_ORDER = 6
DEFAULT_LAMBDA = 6e-3
SUPPORTED_ORDERS = (0, 2, 4, 6, 8)


def _check_order(order) -> int:
    if int(order) != order or order < 0 or order % 2:
        raise UnsupportedOrderError(f"SH order must be a nonnegative even integer, got {order}")
    return int(order)


def num_coefficients(order: int) -> int:
    """Number of real even-order coefficients, ``(L+1)(L+2)/2``."""
    order = _check_order(order)
    return (order + 1) * (order + 2) // 2


def sh_degrees(order: int):
    """``(l, m)`` integer arrays in coefficient order."""
    order = _check_order(order)
    ls, ms = [], []
    for l in range(0, order + 1, 2):
        for m in range(-l, l + 1):
            ls.append(l)
            ms.append(m)
    return np.array(ls), np.array(ms)


def ordering_string(order: int) -> str:
    """Human-readable coefficient ordering, written into file headers."""
    ls, ms = sh_degrees(order)
    return ",".join(f"{l}:{m}" for l, m in zip(ls, ms))


def _complex_sh(m, l, theta, phi):
    if hasattr(special, "sph_harm_y"):
        return special.sph_harm_y(l, m, theta, phi)
    return special.sph_harm(m, l, phi, theta)  # pragma: no cover - scipy < 1.15


def real_sh(dirs, order: int) -> np.ndarray:
    """Evaluate the real basis at ``dirs``; returns (n_dirs, n_coeffs)."""
    d = as_directions(dirs)
    ls, ms = sh_degrees(order)
    theta = np.arccos(np.clip(d[:, 2], -1.0, 1.0))
    phi = np.arctan2(d[:, 1], d[:, 0])
    out = np.empty((len(d), len(ls)))
    for j, (l, m) in enumerate(zip(ls, ms)):
        y = _complex_sh(abs(m), l, theta, phi)
        if m < 0:
            out[:, j] = np.sqrt(2.0) * y.imag
        elif m == 0:
            out[:, j] = y.real
        else:
            out[:, j] = np.sqrt(2.0) * y.real
    return out


@dataclass(frozen=True)
class ShBasisMatrix:
    entries: np.ndarray
    order: int
    dirs: np.ndarray

    @property
    def n_dirs(self) -> int:
        return self.entries.shape[0]

    @property
    def n_coeffs(self) -> int:
        return self.entries.shape[1]


@dataclass(frozen=True)
class FitSettings:
    order: int = DEFAULT_ORDER
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self):
        if _check_order(self.order) not in SUPPORTED_ORDERS:
            raise UnsupportedOrderError(f"order must be one of {SUPPORTED_ORDERS}")
        if not self.lam >= 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")


@dataclass(frozen=True)
class ShCoefficients:
    """Coefficient vectors; ``values`` may carry leading batch axes."""

    values: np.ndarray
    order: int
    shell_bvalue: float = field(default=float("nan"))


def eval_basis(dirs, order: int) -> ShBasisMatrix:
    order = _check_order(order)
    d = as_directions(dirs)
    return ShBasisMatrix(real_sh(d, order), order, d)


def laplace_beltrami(order: int) -> np.ndarray:
    """Diagonal of the penalty matrix, ``l(l+1)`` per coefficient."""
    ls, _ = sh_degrees(order)
    return (ls * (ls + 1)).astype(np.float64)


class ShFitter:
    """Pre-factored regularized least-squares solver for one basis.

    Solves ``(B^T B + lam R^2) c = B^T s`` with a Cholesky factorization so
    the same direction set can be fit for many voxels cheaply.
    """

    def __init__(self, basis: ShBasisMatrix, lam: float = DEFAULT_LAMBDA):
        if lam < 0:
            raise ValueError("lambda must be nonnegative")
        B = basis.entries
        if lam == 0 and np.linalg.matrix_rank(B) < basis.n_coeffs:
            raise RankDeficientError(
                f"{basis.n_dirs} directions cannot determine {basis.n_coeffs} order-{basis.order} "
                "coefficients without regularization; set lambda > 0"
            )
        r = laplace_beltrami(basis.order)
        normal = B.T @ B + lam * np.diag(r * r)
        try:
            self._cho = linalg.cho_factor(normal, lower=True)
        except linalg.LinAlgError as exc:
            raise RankDeficientError("normal matrix is not positive definite; set lambda > 0") from exc
        self.basis = basis
        self.lam = float(lam)

    def fit(self, signals) -> np.ndarray:
        """Coefficients for ``signals`` of shape (..., n_dirs)."""
        s = np.asarray(signals, dtype=np.float64)
        if s.shape[-1] != self.basis.n_dirs:
            raise InvalidSignalError(
                f"signal has {s.shape[-1]} samples but basis has {self.basis.n_dirs} directions"
            )
        if not np.all(np.isfinite(s)):
            raise InvalidSignalError("signal contains non-finite values")
        lead = s.shape[:-1]
        rhs = s.reshape(-1, s.shape[-1]) @ self.basis.entries
        c = linalg.cho_solve(self._cho, rhs.T).T
        return c.reshape(lead + (self.basis.n_coeffs,))


def fit_sh(signals, basis: ShBasisMatrix, settings: FitSettings | None = None, shell_bvalue=float("nan")):
    """Regularized SH fit of one shell's signals.

    Parameters
    ----------
    signals : array_like, shape (..., n_dirs)
    basis : ShBasisMatrix
    settings : FitSettings, optional
        Only ``lam`` is used; the order comes from ``basis``.

    Returns
    -------
    ShCoefficients
    """
    lam = DEFAULT_LAMBDA if settings is None else settings.lam
    values = ShFitter(basis, lam).fit(signals)
    return ShCoefficients(values, basis.order, float(shell_bvalue))


def resample(coeffs, new_dirs, order: int | None = None) -> np.ndarray:
    """Evaluate the continuous representation at ``new_dirs``."""
    if isinstance(coeffs, ShCoefficients):
        values, order = coeffs.values, coeffs.order
    else:
        values = np.asarray(coeffs, dtype=np.float64)
        if order is None:
            order = int(round((np.sqrt(8 * values.shape[-1] + 1) - 3) / 2))
    B = real_sh(new_dirs, order)
    if values.shape[-1] != B.shape[1]:
        raise ValueError("coefficient length does not match order")
    return values @ B.T
