"""Window-leveling: the affine HU -> grayscale map that generates pretext targets."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import CTSlice

# Named presets (center, width) in HU.
WINDOW_PRESETS = {"abdomen": (40.0, 300.0)}


@dataclass(frozen=True)
class WindowSpec:
    """Display window: center/width in HU, mapped onto [out_lo, out_hi]."""

    center: float
    width: float
    out_lo: float = 0.0
    out_hi: float = 1.0

    def __post_init__(self) -> None:
        if not self.width > 0:
            raise ValueError(f"window width must be > 0, got {self.width}")
        if not self.out_lo < self.out_hi:
            raise ValueError(f"output range must be increasing, got ({self.out_lo}, {self.out_hi})")

    @property
    def lower(self) -> float:
        return self.center - self.width / 2.0

    @property
    def upper(self) -> float:
        return self.center + self.width / 2.0


@dataclass(frozen=True)
class AffineWindow:
    """Coefficients of the in-window map z = a*x + b (a in 1/HU, b unitless)."""

    a: float
    b: float

    def __post_init__(self) -> None:
        if not self.a > 0:
            raise ValueError(f"affine slope must be > 0, got {self.a}")

    def apply(self, values: np.ndarray | float) -> np.ndarray | float:
        return self.a * np.asarray(values, dtype=np.float64) + self.b


def window_to_affine(spec: WindowSpec) -> AffineWindow:
    """a = (out_hi - out_lo)/width, b chosen so the lower window edge maps to out_lo."""
    a = (spec.out_hi - spec.out_lo) / spec.width
    b = spec.out_lo - a * spec.lower
    return AffineWindow(a=a, b=b)


def window_level_values(values: np.ndarray, spec: WindowSpec) -> np.ndarray:
    """Elementwise clamp(a*x + b, out_lo, out_hi) in float64."""
    affine = window_to_affine(spec)
    return np.clip(affine.apply(values), spec.out_lo, spec.out_hi)


def apply_window_level(slc: CTSlice, spec: WindowSpec) -> CTSlice:
    """Window-level a slice in HU; output range is [out_lo, out_hi], metadata preserved."""
    return slc.with_pixels(window_level_values(slc.pixels, spec).astype(np.float32))
