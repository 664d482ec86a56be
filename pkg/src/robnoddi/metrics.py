"""MSE, PSNR and windowed 3D SSIM over masked parameter volumes."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .exceptions import DimensionError, DomainError, EmptyEvaluationError, WindowError
from .phantom import PARAM_NAMES, ParameterVolume

PSNR_CAP = 99.0
SSIM_WINDOW = 7
K1, K2 = 0.01, 0.03

CSV_COLUMNS = ("method", "sampling_mode", "n_dirs_shell1", "n_dirs_shell2", "mse", "psnr", "ssim")


def _as_arrays(pred, truth, mask):
    if isinstance(pred, ParameterVolume):
        pred = pred.stack()
    if isinstance(truth, ParameterVolume):
        if mask is None:
            mask = truth.mask
        truth = truth.stack()
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction shape {pred.shape} differs from truth shape {truth.shape}")
    if pred.ndim == 3:
        pred, truth = pred[..., None], truth[..., None]
    mask = np.ones(pred.shape[:3], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != pred.shape[:3]:
        raise DimensionError(f"mask shape {mask.shape} does not match volume {pred.shape[:3]}")
    if not mask.any():
        raise EmptyEvaluationError("mask selects no voxels")
    return pred, truth, mask


def mse(pred, truth, mask=None) -> float:
    """Mean squared error over masked voxels and all parameter channels."""
    p, t, m = _as_arrays(pred, truth, mask)
    return float(np.mean((p[m] - t[m]) ** 2))


def psnr(mse_value: float, peak: float = 1.0) -> float:
    """PSNR in dB; values (including the mse = 0 case) are capped at 99 dB."""
    if mse_value < 0:
        raise DomainError("mse must be nonnegative")
    if mse_value == 0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(peak * peak / mse_value), PSNR_CAP))


def ssim_map(x, y, win: int = SSIM_WINDOW, peak: float = 1.0) -> np.ndarray:
    """Local SSIM of two 3D arrays with a uniform ``win^3`` window.

    Local variances use the unbiased ``N/(N-1)`` correction and borders are
    handled by mirror reflection.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if min(x.shape) < win:
        raise WindowError(f"volume {x.shape} is smaller than the {win}^3 SSIM window")
    n = win ** 3
    cov = n / (n - 1.0)
    f = lambda a: ndimage.uniform_filter(a, size=win, mode="reflect")  # noqa: E731
    ux, uy = f(x), f(y)
    vx = cov * (f(x * x) - ux * ux)
    vy = cov * (f(y * y) - uy * uy)
    vxy = cov * (f(x * y) - ux * uy)
    c1 = (K1 * peak) ** 2
    c2 = (K2 * peak) ** 2
    return ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))


def ssim(pred, truth, mask=None, win: int = SSIM_WINDOW, peak: float = 1.0, per_channel: bool = False):
    """Mean local SSIM over masked voxels, averaged over parameter channels.

    Values outside the mask are zeroed in both volumes first, so the result
    does not depend on them.
    """
    p, t, m = _as_arrays(pred, truth, mask)
    vals = []
    for c in range(p.shape[3]):
        s = ssim_map(np.where(m, p[..., c], 0.0), np.where(m, t[..., c], 0.0), win, peak)
        vals.append(float(s[m].mean()))
    return vals if per_channel else float(np.mean(vals))


@dataclass
class MetricsReport:
    mse: dict = field(default_factory=dict)
    psnr: dict = field(default_factory=dict)
    ssim: dict = field(default_factory=dict)
    n_voxels: int = 0

    @property
    def mean_mse(self) -> float:
        return float(np.mean(list(self.mse.values())))

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(list(self.psnr.values())))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(list(self.ssim.values())))


def evaluate(pred, truth, mask=None) -> MetricsReport:
    """Per-parameter MSE, PSNR and SSIM of one predicted volume."""
    p, t, m = _as_arrays(pred, truth, mask)
    rep = MetricsReport(n_voxels=int(m.sum()))
    ss = ssim(p, t, m, per_channel=True)
    for c, name in enumerate(PARAM_NAMES[: p.shape[3]]):
        e = mse(p[..., c], t[..., c], m)
        rep.mse[name] = e
        rep.psnr[name] = psnr(e)
        rep.ssim[name] = ss[c]
    return rep


def average_reports(reports) -> dict:
    """Average volume-level means across volumes, plus the pooled MSE."""
    reports = list(reports)
    if not reports:
        raise EmptyEvaluationError("no reports to average")
    n = np.array([r.n_voxels for r in reports], dtype=float)
    m = np.array([r.mean_mse for r in reports])
    return {
        "mse": float(np.mean(m)),
        "psnr": float(np.mean([r.mean_psnr for r in reports])),
        "ssim": float(np.mean([r.mean_ssim for r in reports])),
        "pooled_mse": float(np.sum(m * n) / n.sum()),
    }


def format_row(row: dict, columns=CSV_COLUMNS) -> list:
    out = []
    for c in columns:
        v = row[c]
        out.append(f"{v:.8g}" if isinstance(v, float) else str(v))
    return out


def write_csv(path, rows, columns=CSV_COLUMNS) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow(format_row(row, columns))


def read_csv(path) -> list:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
