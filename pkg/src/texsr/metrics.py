"""Masked quality metrics on texture rasters: PSNR, SRE, SSIM.

All three are computed over the validity mask only and are invariant to the
values stored at invalid texels. Dynamic range is fixed at 1.0 (rasters live
in [0, 1]).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, StructuralError, UsageError

__all__ = ["MetricReport", "psnr", "sre", "ssim", "evaluate"]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _checked(x_hat, x, mask):
    x_hat = np.asarray(x_hat, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x_hat.shape != x.shape:
        raise StructuralError("rasters must have equal dimensions")
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise StructuralError("mask must match the rasters")
    if not mask.any():
        raise UsageError("metric undefined on an empty mask")
    return x_hat, x, mask


def psnr(x_hat, x, mask=None) -> float:
    """10*log10(1 / MSE) over valid texels; +inf for identical inputs."""
    x_hat, x, mask = _checked(x_hat, x, mask)
    mse = np.mean((x_hat[mask] - x[mask]) ** 2)
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def sre(x_hat, x, mask=None) -> float:
    """Signal-to-reconstruction-error: 10*log10(mean(x)^2 / MSE) in dB."""
    x_hat, x, mask = _checked(x_hat, x, mask)
    mu = np.mean(x[mask])
    if mu == 0.0:
        raise ParameterError("SRE undefined: reference mean is zero")
    mse = np.mean((x_hat[mask] - x[mask]) ** 2)
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(mu * mu / mse))


def _gaussian_window():
    r = SSIM_WINDOW // 2
    k = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(k**2) / (2.0 * SSIM_SIGMA**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(x_hat, x, mask=None) -> float:
    """Mean local SSIM over fully contained 11x11 windows.

    Windows use a sigma=1.5 Gaussian weighting renormalized over the valid
    texels they contain; windows with fewer than 50% valid texels are
    excluded, which keeps the score independent of invalid-texel values.
    """
    x_hat, x, mask = _checked(x_hat, x, mask)
    h, w = x.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise UsageError(f"SSIM needs rasters of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    win = _gaussian_window()
    r = SSIM_WINDOW // 2
    oh, ow = h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1
    m = mask.astype(np.float64)

    wsum = np.zeros((oh, ow))
    count = np.zeros((oh, ow))
    sx = np.zeros((oh, ow))
    sy = np.zeros((oh, ow))
    sxx = np.zeros((oh, ow))
    syy = np.zeros((oh, ow))
    sxy = np.zeros((oh, ow))
    xm = x_hat * m
    ym = x * m
    for dy in range(SSIM_WINDOW):
        for dx in range(SSIM_WINDOW):
            g = win[dy, dx]
            ms = m[dy:dy + oh, dx:dx + ow]
            xs = xm[dy:dy + oh, dx:dx + ow]
            ys = ym[dy:dy + oh, dx:dx + ow]
            wsum += g * ms
            count += ms
            sx += g * xs
            sy += g * ys
            sxx += g * xs * xs
            syy += g * ys * ys
            sxy += g * xs * ys

    include = count >= 0.5 * SSIM_WINDOW * SSIM_WINDOW
    if not include.any():
        raise UsageError("no SSIM window has 50% valid texels")
    denom = np.where(wsum > 0, wsum, 1.0)
    mx = sx / denom
    my = sy / denom
    vx = sxx / denom - mx * mx
    vy = syy / denom - my * my
    cxy = sxy / denom - mx * my
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    score = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
    return float(score[include].mean())


@dataclass(frozen=True)
class MetricReport:
    """One evaluation record; always masked to the validity raster."""

    psnr_db: float
    ssim: float
    sre_db: float
    n_valid: int

    def line(self, name: str) -> str:
        def fmt(v):
            return "inf" if np.isinf(v) else f"{v:.6f}"
        return f"{name} {fmt(self.psnr_db)} {fmt(self.ssim)} {fmt(self.sre_db)} {self.n_valid}"

    def to_json(self, name: str) -> str:
        def val(v):
            return "inf" if np.isinf(v) else round(float(v), 6)
        return json.dumps({"name": name, "psnr_db": val(self.psnr_db),
                           "ssim": val(self.ssim), "sre_db": val(self.sre_db),
                           "n_valid": self.n_valid, "masked": True}, sort_keys=True)


def evaluate(x_hat, x, mask=None) -> MetricReport:
    """All three metrics in one report."""
    x_hat, x, mask = _checked(x_hat, x, mask)
    return MetricReport(psnr_db=psnr(x_hat, x, mask), ssim=ssim(x_hat, x, mask),
                        sre_db=sre(x_hat, x, mask), n_valid=int(mask.sum()))
