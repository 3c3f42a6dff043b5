"""Reconstruction quality metrics and ROI regression analysis.

All metrics are pure functions computed in float64.  Where a mask is
accepted, voxels outside it never influence the result.
"""

import io
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from .errors import ConfigError, NumericError, ShapeError

HFEN_KERNEL_SIZE = 15
HFEN_SIGMA = 1.5
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class RoiLabelMap:
    """Integer label volume; 0 is background."""

    labels: np.ndarray
    legend: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.min() < 0:
            raise ConfigError("ROI labels must be non-negative")

    def name(self, label):
        return self.legend.get(int(label), str(int(label)))


@dataclass
class MetricsReport:
    nrmse_percent: float | None = None
    hfen_percent: float | None = None
    ssim: float | None = None
    rois: list = field(default_factory=list)  # (name, mean_ppm, std_ppm)
    regression: dict | None = None

    def to_text(self):
        lines = []
        if self.nrmse_percent is not None:
            lines.append(f"NRMSE: {self.nrmse_percent:.4f} %")
        if self.hfen_percent is not None:
            lines.append(f"HFEN:  {self.hfen_percent:.4f} %")
        if self.ssim is not None:
            lines.append(f"SSIM:  {self.ssim:.6f} ({100.0 * self.ssim:.2f} %)")
        for name, mean, std in self.rois:
            lines.append(f"ROI {name}: mean {mean:.6f} ppm, std {std:.6f} ppm")
        if self.regression is not None:
            r = self.regression
            lines.append(
                "regression: slope {slope:.6f}, intercept {intercept:.6f}, "
                "R^2 {r_squared:.6f}, MSE {mse:.6g}".format(**r)
            )
        return "\n".join(lines) + "\n"

    def to_csv_text(self):
        buf = io.StringIO()
        buf.write("name,value\n")
        for key in ("nrmse_percent", "hfen_percent", "ssim"):
            val = getattr(self, key)
            if val is not None:
                buf.write(f"{key},{val!r}\n")
        for name, mean, std in self.rois:
            buf.write(f"roi.{name}.mean_ppm,{mean!r}\n")
            buf.write(f"roi.{name}.std_ppm,{std!r}\n")
        if self.regression is not None:
            for key in ("slope", "intercept", "r_squared", "mse"):
                buf.write(f"regression.{key},{self.regression[key]!r}\n")
        return buf.getvalue()

    @classmethod
    def from_csv_text(cls, text):
        rep = cls()
        rois = {}
        for line in text.strip().splitlines()[1:]:
            name, value = line.split(",", 1)
            value = float(value)
            if name in ("nrmse_percent", "hfen_percent", "ssim"):
                setattr(rep, name, value)
            elif name.startswith("roi."):
                _, roi_name, which = name.split(".", 2)
                rois.setdefault(roi_name, {})[which] = value
            elif name.startswith("regression."):
                if rep.regression is None:
                    rep.regression = {}
                rep.regression[name.split(".", 1)[1]] = value
        rep.rois = [(k, v["mean_ppm"], v["std_ppm"]) for k, v in rois.items()]
        return rep


def _as_f64(vol):
    return np.asarray(vol.values if hasattr(vol, "values") else vol, dtype=np.float64)


def _check_pair(pred, gt):
    p, g = _as_f64(pred), _as_f64(gt)
    if p.shape != g.shape:
        raise ShapeError(f"metric inputs differ in shape: {p.shape} vs {g.shape}")
    return p, g


def _mask_of(mask, shape):
    if mask is None:
        return np.ones(shape, dtype=bool)
    m = np.asarray(mask.values if hasattr(mask, "values") else mask)
    if m.shape != shape:
        raise ShapeError(f"mask shape {m.shape} does not match volume shape {shape}")
    return m > 0


def nrmse(pred, gt, mask=None):
    """100 * ||pred - gt||_2 / ||gt||_2 over masked voxels."""
    p, g = _check_pair(pred, gt)
    m = _mask_of(mask, g.shape)
    denom = np.linalg.norm(g[m])
    if denom == 0.0:
        raise NumericError("NRMSE undefined: ground truth is zero within the mask")
    return float(100.0 * np.linalg.norm((p - g)[m]) / denom)


def log_kernel(size=HFEN_KERNEL_SIZE, sigma=HFEN_SIGMA):
    """Laplacian-of-gaussian filter, demeaned so it is exactly zero-sum."""
    half = (size - 1) / 2.0
    ax = np.arange(size, dtype=np.float64) - half
    x, y, z = np.meshgrid(ax, ax, ax, indexing="ij")
    r2 = x * x + y * y + z * z
    gauss = np.exp(-r2 / (2.0 * sigma**2))
    gauss /= gauss.sum()
    ker = gauss * (r2 - 3.0 * sigma**2) / sigma**4
    return ker - ker.mean()


def _log_filter(vol, ker):
    # symmetric edge padding keeps constants constant, so the zero-sum
    # kernel annihilates them exactly even at the boundary
    half = ker.shape[0] // 2
    padded = np.pad(vol, half, mode="symmetric")
    return fftconvolve(padded, ker, mode="valid")


def hfen(pred, gt, mask=None, size=HFEN_KERNEL_SIZE, sigma=HFEN_SIGMA):
    """High-frequency error norm: relative L2 error of LoG-filtered inputs.

    Inputs are zeroed outside the mask before filtering and the norm is
    taken over masked voxels, so outside voxels never contribute.
    """
    p, g = _check_pair(pred, gt)
    m = _mask_of(mask, g.shape)
    ker = log_kernel(size, sigma)
    pf = _log_filter(np.where(m, p, 0.0), ker)
    gf = _log_filter(np.where(m, g, 0.0), ker)
    denom = np.linalg.norm(gf[m])
    if denom == 0.0:
        raise NumericError("HFEN undefined: filtered ground truth is zero within the mask")
    return float(100.0 * np.linalg.norm((pf - gf)[m]) / denom)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    half = (size - 1) / 2.0
    ax = np.arange(size, dtype=np.float64) - half
    x, y, z = np.meshgrid(ax, ax, ax, indexing="ij")
    win = np.exp(-(x * x + y * y + z * z) / (2.0 * sigma**2))
    return win / win.sum()


def ssim(pred, gt, size=SSIM_WINDOW, sigma=SSIM_SIGMA, k1=SSIM_K1, k2=SSIM_K2,
         dynamic_range=None):
    """Mean local structural similarity with a 3D gaussian window.

    The dynamic range defaults to the joint peak-to-peak of both inputs,
    which keeps ssim(a, b) == ssim(b, a); pass the ground truth's range
    explicitly to reproduce a gt-anchored convention.  A zero range
    (constant inputs) falls back to 1 so the stabilizing constants keep
    the ratio defined.
    """
    p, g = _check_pair(pred, gt)
    if dynamic_range is None:
        dynamic_range = float(max(p.max(), g.max()) - min(p.min(), g.min()))
    if dynamic_range == 0.0:
        dynamic_range = 1.0
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    win = gaussian_window(size, sigma)

    def filt(v):
        return fftconvolve(v, win, mode="same")

    mu_p = filt(p)
    mu_g = filt(g)
    var_p = filt(p * p) - mu_p * mu_p
    var_g = filt(g * g) - mu_g * mu_g
    cov = filt(p * g) - mu_p * mu_g
    num = (2.0 * mu_p * mu_g + c1) * (2.0 * cov + c2)
    den = (mu_p * mu_p + mu_g * mu_g + c1) * (var_p + var_g + c2)
    return float(np.mean(num / den))


def roi_regression(pred, gt, rois, granularity="voxel"):
    """Per-ROI stats of the reconstruction plus an OLS fit of pred on gt.

    Regression points are (gt, pred) pairs per labeled voxel, or per-ROI
    means when ``granularity='roi_mean'``.  Returns a MetricsReport
    fragment: rois list and regression {slope, intercept, r_squared, mse}.
    """
    p, g = _check_pair(pred, gt)
    labels = rois.labels
    if labels.shape != p.shape:
        raise ShapeError(f"label map shape {labels.shape} does not match {p.shape}")
    present = sorted(int(v) for v in np.unique(labels) if v != 0)
    roi_rows = []
    xs, ys = [], []
    for lab in present:
        sel = labels == lab
        roi_rows.append((rois.name(lab), float(p[sel].mean()), float(p[sel].std())))
        if granularity == "roi_mean":
            xs.append(g[sel].mean())
            ys.append(p[sel].mean())
        elif granularity == "voxel":
            xs.extend(g[sel].ravel())
            ys.extend(p[sel].ravel())
        else:
            raise ConfigError(f"granularity must be 'voxel' or 'roi_mean', got {granularity!r}")
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.size < 2 or np.unique(x).size < 2:
        raise NumericError("regression needs at least 2 distinct ROI points")
    xm, ym = x.mean(), y.mean()
    sxx = float(((x - xm) ** 2).sum())
    if sxx == 0.0:
        raise NumericError("regression undefined: ground truth has zero variance")
    slope = float(((x - xm) * (y - ym)).sum() / sxx)
    intercept = float(ym - slope * xm)
    resid = y - (slope * x + intercept)
    sst = float(((y - ym) ** 2).sum())
    r_squared = 1.0 if sst == 0.0 else 1.0 - float((resid**2).sum()) / sst
    regression = {
        "slope": slope,
        "intercept": intercept,
        "r_squared": r_squared,
        "mse": float((resid**2).mean()),
    }
    return roi_rows, regression


def evaluate(pred, gt, mask=None, rois=None):
    """Full MetricsReport for one reconstruction-vs-truth pair."""
    rep = MetricsReport(
        nrmse_percent=nrmse(pred, gt, mask),
        hfen_percent=hfen(pred, gt, mask),
        ssim=ssim(pred, gt),
    )
    if rois is not None:
        rep.rois, rep.regression = roi_regression(pred, gt, rois)
    return rep
