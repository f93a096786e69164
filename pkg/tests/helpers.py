"""Independent oracles and shared fixtures for the test suite.

Everything here deliberately avoids the package's fast paths: SSIM is computed
with explicit window loops, the t-distribution tail by numerical quadrature of
its density, and gradients by central finite differences, so the tests check the
implementation against routes that share no code with it.
"""
from __future__ import annotations

import math

import numpy as np
import torch
from scipy.integrate import quad

from sswl.model import RVAE, RVAEConfig


def ssim_oracle_uniform(x: np.ndarray, y: np.ndarray, data_range: float = 1.0, size: int = 7) -> float:
    """Brute-force mean local SSIM: 7x7 uniform window, sample (N-1) statistics."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    n = size * size
    values = []
    for i in range(x.shape[0] - size + 1):
        for j in range(x.shape[1] - size + 1):
            wx = x[i : i + size, j : j + size].ravel()
            wy = y[i : i + size, j : j + size].ravel()
            mx, my = wx.mean(), wy.mean()
            vx = ((wx - mx) ** 2).sum() / (n - 1)
            vy = ((wy - my) ** 2).sum() / (n - 1)
            cxy = ((wx - mx) * (wy - my)).sum() / (n - 1)
            values.append(
                ((2 * mx * my + c1) * (2 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2))
            )
    return float(np.mean(values))


def ssim_oracle_gaussian(x: np.ndarray, y: np.ndarray, data_range: float = 1.0) -> float:
    """Brute-force 11x11 sigma-1.5 Gaussian-weighted SSIM with population statistics."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    size, sigma = 11, 1.5
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(coords**2) / (2 * sigma * sigma))
    w = np.outer(g, g)
    w /= w.sum()
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    values = []
    for i in range(x.shape[0] - size + 1):
        for j in range(x.shape[1] - size + 1):
            wx = x[i : i + size, j : j + size]
            wy = y[i : i + size, j : j + size]
            mx = (w * wx).sum()
            my = (w * wy).sum()
            vx = (w * wx * wx).sum() - mx * mx
            vy = (w * wy * wy).sum() - my * my
            cxy = (w * wx * wy).sum() - mx * my
            values.append(
                ((2 * mx * my + c1) * (2 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2))
            )
    return float(np.mean(values))


def mse_oracle(pred: np.ndarray, ref: np.ndarray) -> float:
    """Plain-python elementwise mean of squared differences."""
    total = 0.0
    count = 0
    for a, b in zip(np.asarray(pred, np.float64).ravel(), np.asarray(ref, np.float64).ravel()):
        diff = float(a) - float(b)
        total += diff * diff
        count += 1
    return total / count


def psnr_oracle(pred: np.ndarray, ref: np.ndarray, data_range: float = 1.0) -> float:
    err = mse_oracle(pred, ref)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / err)


def nrmse_oracle(pred: np.ndarray, ref: np.ndarray) -> float:
    denom = 0.0
    count = 0
    for b in np.asarray(ref, np.float64).ravel():
        denom += float(b) * float(b)
        count += 1
    return math.sqrt(mse_oracle(pred, ref) / (denom / count))


def t_two_sided_p_oracle(t: float, df: float) -> float:
    """Two-sided p for Student's t by quadrature of the density (no scipy.stats)."""
    log_norm = math.lgamma((df + 1) / 2) - math.lgamma(df / 2) - 0.5 * math.log(df * math.pi)

    def density(u: float) -> float:
        return math.exp(log_norm - ((df + 1) / 2) * math.log1p(u * u / df))

    tail, _ = quad(density, abs(t), math.inf)
    return 2.0 * tail


def tiny_config(**overrides) -> RVAEConfig:
    """The spec's tiny gradient-check configuration: 2+2 layers, 4 filters, 16x16, latent 4."""
    defaults = dict(
        n_enc_layers=2,
        n_dec_layers=2,
        filters=4,
        kernel=5,
        latent_dim=4,
        bottleneck_hidden=4,
        bottleneck_enabled=True,
        input_h=16,
        input_w=16,
    )
    defaults.update(overrides)
    return RVAEConfig(**defaults)


def finite_difference_gradients(
    make_model, loss_of_model, rel_step: float = 3e-6
) -> dict[str, np.ndarray]:
    """Central finite differences of a scalar loss in float64.

    make_model() must build a fresh float64 model with identical parameters each
    call; loss_of_model(model) must be a deterministic scalar (fixed eps, fixed
    batch). The step must stay small enough that no rectifier state flips inside
    the +/- h window, or the secant stops being a derivative estimate.
    """
    model = make_model()
    grads: dict[str, np.ndarray] = {}
    for name, param in model.named_parameters():
        flat = param.detach().view(-1)
        grad = np.zeros(flat.numel(), dtype=np.float64)
        for idx in range(flat.numel()):
            original = float(flat[idx])
            h = rel_step * max(1.0, abs(original))
            with torch.no_grad():
                flat[idx] = original + h
            loss_plus = float(loss_of_model(model).detach())
            with torch.no_grad():
                flat[idx] = original - h
            loss_minus = float(loss_of_model(model).detach())
            with torch.no_grad():
                flat[idx] = original
            grad[idx] = (loss_plus - loss_minus) / (2.0 * h)
        grads[name] = grad.reshape(tuple(param.shape))
    return grads


def max_relative_gradient_error(
    analytic: dict[str, np.ndarray], oracle: dict[str, np.ndarray]
) -> float:
    """Max over coordinates of |a - o| / (|o| + 1e-3 * max|o|)."""
    scale = max(float(np.max(np.abs(g))) for g in oracle.values())
    floor = 1e-3 * max(scale, 1e-12)
    worst = 0.0
    for name, fd in oracle.items():
        an = np.asarray(analytic[name], dtype=np.float64)
        err = np.abs(an - fd) / (np.abs(fd) + floor)
        worst = max(worst, float(err.max()))
    return worst
