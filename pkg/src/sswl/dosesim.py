"""Dose synthesis by scaling extracted zero-mean noise, plus the phantom corpus generator."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
from numpy.random import PCG64, Generator, SeedSequence
from scipy.ndimage import gaussian_filter

from .dataio import CTSlice, DoseLevel

NoiseModelKind = Literal["inverse_dose", "excess_quanta"]
NOISE_MODEL_KINDS = ("inverse_dose", "excess_quanta")

# Phantom defaults: HU plateaus over a -1000 HU background, and the
# zero-mean Gaussian noise scale at full dose.
ABDOMEN_PALETTE = (-900.0, -100.0, 0.0, 40.0, 60.0, 300.0)
CHEST_PALETTE = (-800.0, -650.0, -300.0, 20.0, 50.0, 400.0)
PHANTOM_BACKGROUND_HU = -1000.0
PHANTOM_SIGMA0_HU = 10.0


@dataclass
class NoiseField:
    """The additive noise n of a (low, full) pair: low = full + n."""

    values: np.ndarray  # float64, same shape as the originating slices
    source_dose: DoseLevel

    def __post_init__(self) -> None:
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise ValueError(f"noise field must be 2D, got shape {vals.shape}")
        if not np.isfinite(vals).all():
            raise ValueError("noise field contains non-finite values")
        self.values = vals


@dataclass(frozen=True)
class NoiseScaleModel:
    kind: NoiseModelKind = "excess_quanta"

    def __post_init__(self) -> None:
        if self.kind not in NOISE_MODEL_KINDS:
            raise ValueError(f"unknown noise model {self.kind!r}")


def extract_noise(low: CTSlice, full: CTSlice) -> NoiseField:
    """n = low - full (float64), requiring the two slices to be the same scan slice."""
    if low.pixels.shape != full.pixels.shape:
        raise ValueError(
            f"shape mismatch: low {low.pixels.shape} vs full {full.pixels.shape}"
        )
    if (low.scan_id, low.slice_index) != (full.scan_id, full.slice_index):
        raise ValueError(
            f"slice identity mismatch: {(low.scan_id, low.slice_index)} vs "
            f"{(full.scan_id, full.slice_index)}"
        )
    if not low.dose.fraction < 1.0:
        raise ValueError(f"low slice must have dose < 1, got {low.dose.fraction}")
    values = low.pixels.astype(np.float64) - full.pixels.astype(np.float64)
    return NoiseField(values=values, source_dose=low.dose)


def noise_scale_factor(model: NoiseScaleModel, d_src: DoseLevel, d_tgt: DoseLevel) -> float:
    """Multiplier k >= 1 taking noise at dose d_src to the level of dose d_tgt."""
    if d_tgt.fraction > d_src.fraction:
        raise ValueError(
            f"target dose {d_tgt.fraction} exceeds source dose {d_src.fraction}; "
            "dose upscaling is out of scope"
        )
    if d_tgt.fraction == d_src.fraction:
        return 1.0
    if model.kind == "inverse_dose":
        return math.sqrt(d_src.fraction / d_tgt.fraction)
    # excess_quanta: variance proportional to (1 - d) / d.
    src_excess = (1.0 - d_src.fraction) / d_src.fraction
    if src_excess == 0.0:
        raise ValueError("excess_quanta model has no noise to scale at full source dose")
    tgt_excess = (1.0 - d_tgt.fraction) / d_tgt.fraction
    return math.sqrt(tgt_excess / src_excess)


def synthesize_dose(
    full: CTSlice, noise: NoiseField, d_tgt: DoseLevel, model: NoiseScaleModel
) -> CTSlice:
    """full + k * noise at the target dose; k = 1 reproduces the source low-dose slice."""
    if noise.values.shape != full.pixels.shape:
        raise ValueError(
            f"noise shape {noise.values.shape} does not match slice {full.pixels.shape}"
        )
    k = noise_scale_factor(model, noise.source_dose, d_tgt)
    out = full.pixels.astype(np.float64) + k * noise.values
    return full.with_pixels(out.astype(np.float32), dose=d_tgt)


def phantom_noise_sigma(d_tgt: DoseLevel, sigma0: float = PHANTOM_SIGMA0_HU) -> float:
    """Std of the simulated low-dose noise in HU: sigma0 * sqrt(1/d - 1)."""
    return sigma0 * math.sqrt(1.0 / d_tgt.fraction - 1.0)


def generate_phantom_pair(
    seed: int,
    h: int,
    w: int,
    d_tgt: DoseLevel,
    *,
    palette: Sequence[float] = ABDOMEN_PALETTE,
    body_region: str = "phantom",
    scan_id: str | None = None,
) -> tuple[CTSlice, CTSlice]:
    """Deterministic (full, low) phantom pair: soft-edged ellipse plateaus plus scaled noise."""
    if h < 16 or w < 16:
        raise ValueError(f"phantom dims must be >= 16, got {h}x{w}")
    rng = Generator(PCG64(SeedSequence((int(seed), 0x9A17))))
    image = np.full((h, w), PHANTOM_BACKGROUND_HU, dtype=np.float64)
    yy, xx = np.mgrid[0:h, 0:w]
    n_ellipses = int(rng.integers(3, 9))
    soft = [p for p in palette if -150.0 <= p <= 150.0] or list(palette)
    for i in range(n_ellipses):
        cy = rng.uniform(0.2 * h, 0.8 * h)
        cx = rng.uniform(0.2 * w, 0.8 * w)
        # Semi-axis range tuned so the 5%-dose corpus lands at ~17-21 dB input
        # PSNR in the abdomen window (enough plateau area inside the window).
        ry = rng.uniform(0.18, 0.55) * h
        rx = rng.uniform(0.18, 0.55) * w
        theta = rng.uniform(0.0, math.pi)
        # The last-painted ellipse always carries a mid-range plateau, so every
        # phantom has soft-tissue content (a display window is never empty).
        pool = soft if i == n_ellipses - 1 else palette
        hu = float(rng.choice(np.asarray(pool, dtype=np.float64)))
        ct, st = math.cos(theta), math.sin(theta)
        u = (xx - cx) * ct + (yy - cy) * st
        v = -(xx - cx) * st + (yy - cy) * ct
        inside = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
        image[inside] = hu
    image = gaussian_filter(image, sigma=max(1.0, min(h, w) / 64.0))

    meta = dict(
        scan_id=scan_id if scan_id is not None else f"ph-{seed:08d}",
        slice_index=0,
        body_region=body_region,
    )
    full = CTSlice(pixels=image.astype(np.float32), dose=DoseLevel(1.0), **meta)
    sigma = phantom_noise_sigma(d_tgt)
    if sigma == 0.0:
        low_pixels = full.pixels.copy()
    else:
        noise = rng.normal(0.0, sigma, size=(h, w))
        low_pixels = (full.pixels.astype(np.float64) + noise).astype(np.float32)
    low = CTSlice(pixels=low_pixels, dose=d_tgt, **meta)
    return full, low
