"""Synthetic NODDI phantoms with exact ground truth."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .exceptions import DimensionError, DomainError
from .noddi import TissueConstants, add_rician_noise, synthesize_batch
from .sphere import GradientScheme

MIN_DIM = 8
PARAM_NAMES = ("vic", "viso", "od")

VIC_RANGE = (0.1, 0.9)
OD_RANGE = (0.04, 0.9)
VISO_RANGE = (0.0, 0.9)
VISO_LOW_CAP = 0.2
VISO_LOW_QUANTILE = 0.8


@dataclass
class ParameterVolume:
    """Voxelwise NODDI parameters on a regular grid."""

    vic: np.ndarray
    viso: np.ndarray
    od: np.ndarray
    mu: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        dims = np.shape(self.vic)
        for name in ("viso", "od", "mask"):
            if np.shape(getattr(self, name)) != dims:
                raise DimensionError(f"{name} has shape {np.shape(getattr(self, name))}, expected {dims}")
        if np.shape(self.mu) != dims + (3,):
            raise DimensionError("mu must have shape dims + (3,)")
        self.mask = np.asarray(self.mask, dtype=bool)

    @property
    def dims(self) -> tuple:
        return tuple(self.vic.shape)

    def stack(self) -> np.ndarray:
        """(nx, ny, nz, 3) array of (vic, viso, od)."""
        return np.stack([self.vic, self.viso, self.od], axis=-1)

    @classmethod
    def from_stack(cls, params, mask, mu=None) -> "ParameterVolume":
        params = np.asarray(params)
        if mu is None:
            mu = np.zeros(params.shape[:3] + (3,))
            mu[..., 2] = 1.0
        return cls(params[..., 0], params[..., 1], params[..., 2], mu, mask)

    def crop(self, border: int) -> "ParameterVolume":
        b = slice(border, -border) if border else slice(None)
        sl = (b, b, b)
        return ParameterVolume(
            self.vic[sl], self.viso[sl], self.od[sl], self.mu[sl], self.mask[sl]
        )


@dataclass
class DwiVolume:
    """Diffusion-weighted data with channels laid out as ``scheme`` describes.

    ``data`` has shape (nx, ny, nz, n_channels): b0 channels first, then each
    shell's directions.
    """

    data: np.ndarray
    scheme: GradientScheme
    normalized: bool = False
    mask: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[3] != self.scheme.n_channels:
            raise DimensionError(
                f"data shape {self.data.shape} does not match {self.scheme.n_channels} scheme channels"
            )
        if self.mask is None:
            self.mask = np.ones(self.data.shape[:3], dtype=bool)

    @property
    def dims(self) -> tuple:
        return tuple(self.data.shape[:3])

    def diffusion_data(self) -> np.ndarray:
        return self.data[..., self.scheme.b0_count:]


def _smooth(field_, passes: int = 3) -> np.ndarray:
    for _ in range(passes):
        field_ = ndimage.uniform_filter(field_, size=3, mode="reflect")
    return field_


def _affine(field_, lo, hi) -> np.ndarray:
    fmin, fmax = field_.min(), field_.max()
    return lo + (hi - lo) * (field_ - fmin) / (fmax - fmin)


def _skewed(field_, lo, hi, cap, quantile) -> np.ndarray:
    """Piecewise-linear map sending the lower ``quantile`` of voxels to [lo, cap]."""
    fmin, fmax = field_.min(), field_.max()
    q = np.quantile(field_, quantile)
    low = lo + (cap - lo) * (field_ - fmin) / (q - fmin)
    high = cap + (hi - cap) * (field_ - q) / (fmax - q)
    return np.where(field_ <= q, low, high)


def ellipsoid_mask(dims) -> np.ndarray:
    """Foreground region: a rounded box that trims the volume corners."""
    grids = np.meshgrid(*[(np.arange(n) - (n - 1) / 2.0) / (n / 2.0) for n in dims], indexing="ij")
    return sum(g * g for g in grids) <= 1.2


def generate_parameter_volume(dims, seed: int = 0) -> ParameterVolume:
    """Spatially smooth random parameter maps.

    White noise is smoothed by three passes of a 3x3x3 box filter and mapped
    affinely onto ``vic`` in [0.1, 0.9] and ``od`` in [0.04, 0.9]; ``viso``
    spans [0, 0.9] but 80% of voxels land in [0, 0.2]. Fiber directions come
    from a smoothed random vector field.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < MIN_DIM:
        raise DomainError(f"phantom dims must be three values >= {MIN_DIM}, got {dims}")
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((6,) + dims)
    vic = _affine(_smooth(raw[0]), *VIC_RANGE)
    od = _affine(_smooth(raw[1]), *OD_RANGE)
    viso = _skewed(_smooth(raw[2]), *VISO_RANGE, VISO_LOW_CAP, VISO_LOW_QUANTILE)
    mu = np.stack([_smooth(raw[3 + i]) for i in range(3)], axis=-1)
    norm = np.linalg.norm(mu, axis=-1, keepdims=True)
    mu = np.where(norm > 0, mu / np.where(norm > 0, norm, 1.0), np.array([0.0, 0.0, 1.0]))
    # clip guards against one-ulp excursions from the affine maps
    return ParameterVolume(
        np.clip(vic, *VIC_RANGE),
        np.clip(viso, *VISO_RANGE),
        np.clip(od, *OD_RANGE),
        mu,
        ellipsoid_mask(dims),
    )


def generate_dwi(
    pv: ParameterVolume,
    scheme: GradientScheme,
    consts: TissueConstants | None = None,
    snr: float | None = 30.0,
    seed: int = 0,
    quad=None,
) -> DwiVolume:
    """Simulate a multi-shell acquisition of ``pv`` with unit b0 signal.

    Foreground voxels get b0 = 1 and NODDI signals on every shell; all
    channels then receive Rician noise (skipped when ``snr`` is None or
    infinite). Background voxels stay zero.
    """
    if scheme.n_shells < 1:
        raise DomainError("scheme needs at least one shell")
    consts = consts or TissueConstants()
    fg = pv.mask
    bvals = scheme.bvals()[scheme.b0_count:]
    dirs = scheme.bvecs().T[scheme.b0_count:]
    sig = synthesize_batch(pv.vic[fg], pv.viso[fg], pv.od[fg], pv.mu[fg], bvals, dirs, consts, quad)
    vox = np.concatenate([np.ones((sig.shape[0], scheme.b0_count)), sig], axis=1)
    if snr is not None and np.isfinite(snr):
        vox = add_rician_noise(vox, snr, np.random.default_rng(seed))
    data = np.zeros(pv.dims + (scheme.n_channels,))
    data[fg] = vox
    return DwiVolume(data, scheme, normalized=False, mask=fg.copy())
