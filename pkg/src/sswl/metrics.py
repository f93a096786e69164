"""Image quality metrics (PSNR, SSIM, MSE, NRMSE) and Welch's two-sample t-test."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Literal, Sequence

import numpy as np
from scipy import stats
from scipy.ndimage import correlate, uniform_filter

SsimWindow = Literal["uniform7", "gaussian11"]


def _as_pair(pred: np.ndarray, ref: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs ref {ref.shape}")
    return pred, ref


def mse(pred: np.ndarray, ref: np.ndarray) -> float:
    pred, ref = _as_pair(pred, ref)
    return float(np.mean((pred - ref) ** 2))


def psnr(pred: np.ndarray, ref: np.ndarray, data_range: float = 1.0) -> float:
    """10*log10(range^2 / mse); +inf for identical images."""
    err = mse(pred, ref)
    if err == 0.0:
        return math.inf
    return float(10.0 * math.log10(data_range * data_range / err))


def nrmse(pred: np.ndarray, ref: np.ndarray) -> float:
    """RMSE normalized by the Euclidean magnitude of the reference."""
    pred, ref = _as_pair(pred, ref)
    denom = float(np.mean(ref**2))
    if denom == 0.0:
        raise ValueError("nrmse undefined for an all-zero reference")
    return float(math.sqrt(mse(pred, ref) / denom))


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(coords**2) / (2.0 * sigma * sigma))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def ssim(
    pred: np.ndarray,
    ref: np.ndarray,
    data_range: float = 1.0,
    window: SsimWindow = "uniform7",
) -> float:
    """Mean local SSIM with C1=(0.01L)^2, C2=(0.03L)^2 over fully-interior windows.

    uniform7 uses a 7x7 uniform window with sample (N-1) variance/covariance;
    gaussian11 uses an 11x11 sigma-1.5 Gaussian window with weighted population
    statistics.
    """
    pred, ref = _as_pair(pred, ref)
    if pred.ndim != 2:
        raise ValueError(f"ssim expects 2D images, got shape {pred.shape}")
    if window == "uniform7":
        size, pad = 7, 3

        def local_mean(img: np.ndarray) -> np.ndarray:
            return uniform_filter(img, size=size)

        cov_norm = (size * size) / (size * size - 1.0)
    elif window == "gaussian11":
        size, pad = 11, 5
        kernel = _gaussian_kernel(size, 1.5)

        def local_mean(img: np.ndarray) -> np.ndarray:
            return correlate(img, kernel)

        cov_norm = 1.0
    else:
        raise ValueError(f"unknown ssim window {window!r}")
    if min(pred.shape) < size:
        raise ValueError(f"image {pred.shape} smaller than the {size}x{size} ssim window")

    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    ux = local_mean(pred)
    uy = local_mean(ref)
    uxx = local_mean(pred * pred)
    uyy = local_mean(ref * ref)
    uxy = local_mean(pred * ref)
    vx = cov_norm * (uxx - ux * ux)
    vy = cov_norm * (uyy - uy * uy)
    vxy = cov_norm * (uxy - ux * uy)
    smap = ((2.0 * ux * uy + c1) * (2.0 * vxy + c2)) / (
        (ux * ux + uy * uy + c1) * (vx + vy + c2)
    )
    return float(smap[pad:-pad, pad:-pad].mean())


@dataclass(frozen=True)
class MetricReport:
    psnr_db: float
    ssim: float
    mse: float
    nrmse: float
    n_images: int

    def __post_init__(self) -> None:
        if self.n_images < 1:
            raise ValueError(f"n_images must be >= 1, got {self.n_images}")


def evaluate_pair(
    pred: np.ndarray,
    ref: np.ndarray,
    data_range: float = 1.0,
    ssim_window: SsimWindow = "uniform7",
) -> MetricReport:
    """All four metrics for a single prediction/reference slice."""
    return MetricReport(
        psnr_db=psnr(pred, ref, data_range),
        ssim=ssim(pred, ref, data_range, ssim_window),
        mse=mse(pred, ref),
        nrmse=nrmse(pred, ref),
        n_images=1,
    )


def aggregate(reports: Sequence[MetricReport] | Iterable[MetricReport]) -> MetricReport:
    """Unweighted mean of each metric; n_images summed."""
    reports = list(reports)
    if not reports:
        raise ValueError("cannot aggregate an empty report list")
    n = len(reports)
    return MetricReport(
        psnr_db=sum(r.psnr_db for r in reports) / n,
        ssim=sum(r.ssim for r in reports) / n,
        mse=sum(r.mse for r in reports) / n,
        nrmse=sum(r.nrmse for r in reports) / n,
        n_images=sum(r.n_images for r in reports),
    )


@dataclass(frozen=True)
class TTestResult:
    t_statistic: float
    degrees_of_freedom: float
    p_value: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_value <= 1.0:
            raise ValueError(f"p_value must be in [0, 1], got {self.p_value}")
        if not self.degrees_of_freedom > 0:
            raise ValueError(f"df must be > 0, got {self.degrees_of_freedom}")


def welch_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Welch's unequal-variance t statistic, Welch-Satterthwaite df, two-sided p."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError(f"both samples need >= 2 values, got {a.size} and {b.size}")
    na, nb = a.size, b.size
    va, vb = float(a.var(ddof=1)), float(b.var(ddof=1))
    diff = float(a.mean() - b.mean())
    if va == 0.0 and vb == 0.0:
        # Degenerate samples: equal means -> p = 1 by convention.
        df = float(na + nb - 2)
        if diff == 0.0:
            return TTestResult(t_statistic=0.0, degrees_of_freedom=df, p_value=1.0)
        return TTestResult(
            t_statistic=math.copysign(math.inf, diff), degrees_of_freedom=df, p_value=0.0
        )
    sa, sb = va / na, vb / nb
    t = diff / math.sqrt(sa + sb)
    df = (sa + sb) ** 2 / (sa * sa / (na - 1) + sb * sb / (nb - 1))
    p = float(min(1.0, 2.0 * stats.t.sf(abs(t), df)))
    return TTestResult(t_statistic=float(t), degrees_of_freedom=float(df), p_value=p)
