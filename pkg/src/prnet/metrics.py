"""Shadow-removal evaluation: PSNR and SSIM in RGB, error in CIELAB, per region.

Images are (H, W, 3) float arrays in [0, 1] and masks are (H, W) arrays
where nonzero marks shadow. Tensors of shape (1, 3, H, W) / (1, 1, H, W) are
accepted too and converted with :func:`as_image` / :func:`as_mask`.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable, TextIO

import numpy as np
from scipy import ndimage

from .tensor import Tensor

REGIONS = ("shadow", "non_shadow", "all")
PSNR_CAP = 100.0

# sRGB primaries, D65 white (IEC 61966-2-1)
SRGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
D65_WHITE = SRGB_TO_XYZ.sum(axis=1)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class EmptyRegionError(ValueError):
    pass


def as_image(x) -> np.ndarray:
    a = x.data if isinstance(x, Tensor) else np.asarray(x)
    if a.ndim == 4:
        if a.shape[0] != 1:
            raise ValueError(f"expected a single image, got batch of {a.shape[0]}")
        a = a[0]
    if a.ndim == 3 and a.shape[0] == 3 and a.shape[-1] != 3:
        a = a.transpose(1, 2, 0)
    if a.ndim != 3 or a.shape[-1] != 3:
        raise ValueError(f"expected an RGB image, got shape {a.shape}")
    return a.astype(np.float64)


def as_mask(m) -> np.ndarray:
    a = m.data if isinstance(m, Tensor) else np.asarray(m)
    return a.reshape(a.shape[-2:]) > 0.5


def _region_pixels(mask: np.ndarray | None, region: str, shape) -> np.ndarray:
    if region not in REGIONS:
        raise ValueError(f"region must be one of {REGIONS}, got {region!r}")
    if region == "all":
        return np.ones(shape, dtype=bool)
    if mask is None:
        raise ValueError(f"region {region!r} needs a mask")
    sel = mask if region == "shadow" else ~mask
    if not sel.any():
        raise EmptyRegionError(f"region {region!r} is empty")
    return sel


def _pair(a, b):
    a, b = as_image(a), as_image(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


# ---------------------------------------------------------------------------
# PSNR
# ---------------------------------------------------------------------------


def psnr(a, b, mask=None, region: str = "all") -> float:
    """10 log10(1 / MSE) over the RGB values of the selected pixels, capped at 100 dB."""
    a, b = _pair(a, b)
    sel = _region_pixels(None if mask is None else as_mask(mask), region, a.shape[:2])
    mse = np.mean((a[sel] - b[sel]) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------


def luma(img: np.ndarray) -> np.ndarray:
    """ITU-R BT.601 luma."""
    return img @ np.array([0.299, 0.587, 0.114])


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Local SSIM of two grayscale images, one value per pixel.

    Window statistics use a separable Gaussian with symmetric border padding.
    """
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()

    def blur(z):
        return ndimage.correlate1d(ndimage.correlate1d(z, g, axis=0, mode="reflect"),
                                   g, axis=1, mode="reflect")

    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(a, b, mask=None, region: str = "all") -> float:
    """Mean local SSIM on luma over windows centred in the selected region."""
    a, b = _pair(a, b)
    sel = _region_pixels(None if mask is None else as_mask(mask), region, a.shape[:2])
    return float(ssim_map(luma(a), luma(b))[sel].mean())


# ---------------------------------------------------------------------------
# CIELAB
# ---------------------------------------------------------------------------


def srgb_to_linear(c: np.ndarray) -> np.ndarray:
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def srgb_to_lab(img: np.ndarray) -> np.ndarray:
    """(..., 3) sRGB in [0, 1] -> (..., 3) L*a*b* under D65."""
    xyz = srgb_to_linear(np.asarray(img, dtype=np.float64)) @ SRGB_TO_XYZ.T
    t = xyz / D65_WHITE
    delta = 6.0 / 29.0
    f = np.where(t > delta ** 3, np.cbrt(t), t / (3 * delta ** 2) + 4.0 / 29.0)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def rmse_lab(a, b, mask=None, region: str = "all", true_rmse: bool = False) -> float:
    """LAB-space error over the selected pixels, averaged over L*, a*, b*.

    The default is the mean absolute per-channel deviation used by the usual
    shadow-removal evaluation scripts; ``true_rmse`` takes the root of the mean
    squared deviation per channel instead.
    """
    a, b = _pair(a, b)
    sel = _region_pixels(None if mask is None else as_mask(mask), region, a.shape[:2])
    diff = srgb_to_lab(a[sel]) - srgb_to_lab(b[sel])
    if true_rmse:
        return float(np.sqrt((diff ** 2).mean(axis=0)).mean())
    return float(np.abs(diff).mean())


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    region: str
    psnr: float
    ssim: float
    rmse_lab: float


def evaluate(pred, gt, mask) -> dict[str, MetricReport]:
    """Per-region reports; a region with no pixels is omitted."""
    pred, gt = _pair(np.clip(as_image(pred), 0.0, 1.0), gt)
    m = as_mask(mask)
    smap = ssim_map(luma(pred), luma(gt))
    sq = ((pred - gt) ** 2).mean(axis=-1)
    lab = np.abs(srgb_to_lab(pred) - srgb_to_lab(gt))
    out = {}
    for region in REGIONS:
        try:
            sel = _region_pixels(m, region, m.shape)
        except EmptyRegionError:
            continue
        mse = sq[sel].mean()
        p = PSNR_CAP if mse == 0 else float(min(PSNR_CAP, 10 * np.log10(1 / mse)))
        out[region] = MetricReport(region, p, float(smap[sel].mean()), float(lab[sel].mean()))
    return out


def write_records(stream: TextIO, image_id: str, reports: dict[str, MetricReport], **extra) -> None:
    """One JSON line per region."""
    for r in reports.values():
        rec = {"id": image_id, **extra, "region": r.region, "psnr": r.psnr,
               "ssim": r.ssim, "rmse": r.rmse_lab}
        stream.write(json.dumps(rec) + "\n")


def summarize(reports: Iterable[dict[str, MetricReport]]) -> dict[str, MetricReport]:
    """Mean of each metric per region across images."""
    acc: dict[str, list[MetricReport]] = {}
    for rep in reports:
        for region, r in rep.items():
            acc.setdefault(region, []).append(r)
    return {region: MetricReport(region, *(float(np.mean([getattr(r, f) for r in rs]))
                                           for f in ("psnr", "ssim", "rmse_lab")))
            for region, rs in acc.items() if rs}


def format_table(summary: dict[str, MetricReport]) -> str:
    lines = [f"{'region':<11} {'PSNR':>8} {'SSIM':>7} {'RMSE':>7}"]
    for region in REGIONS:
        if region in summary:
            r = summary[region]
            lines.append(f"{region:<11} {r.psnr:8.2f} {r.ssim:7.4f} {r.rmse_lab:7.3f}")
    return "\n".join(lines)


def report_dict(r: MetricReport) -> dict:
    return asdict(r)
