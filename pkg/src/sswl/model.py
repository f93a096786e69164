"""Residual VAE denoiser: symmetric conv encoder/decoder with additive cross skips
and a global-average-pool reparameterized bottleneck, plus the pluggable feature
extractor used by the perceptual loss."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal

import numpy as np
import torch
from numpy.random import Generator, Philox, SeedSequence
from torch import nn

from .checkpoint import Container, load_container, save_container


class NonFiniteActivationError(RuntimeError):
    """A forward stage produced NaN/inf; the message names the layer."""


def default_skip_pairs(n_layers: int) -> tuple[tuple[int, int], ...]:
    """Every-other-stage additive skips, outermost first: encoder map j feeds
    decoder stage n_layers - j (j = 0 is the raw input)."""
    return tuple((j, n_layers - j) for j in range(0, n_layers, 2))


@dataclass(frozen=True)
class RVAEConfig:
    n_enc_layers: int = 5
    n_dec_layers: int = 5
    filters: int = 96
    kernel: int = 5
    latent_dim: int = 96
    bottleneck_hidden: int = 96
    bottleneck_enabled: bool = True
    skip_pairs: tuple[tuple[int, int], ...] | None = None
    input_h: int = 256
    input_w: int = 256

    def __post_init__(self) -> None:
        if self.n_enc_layers != self.n_dec_layers:
            raise ValueError("encoder and decoder must have the same number of layers")
        if self.n_enc_layers < 1 or self.filters < 1 or self.kernel < 1:
            raise ValueError("layer count, filters, and kernel must be >= 1")
        if self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd, got {self.kernel}")
        if self.bottleneck_enabled and (self.latent_dim < 1 or self.bottleneck_hidden < 1):
            raise ValueError("latent_dim and bottleneck_hidden must be >= 1")
        shrink = (self.kernel - 1) * self.n_enc_layers
        if self.input_h - shrink < 1 or self.input_w - shrink < 1:
            raise ValueError(
                f"{self.input_h}x{self.input_w} input cannot survive "
                f"{self.n_enc_layers} valid {self.kernel}x{self.kernel} convolutions"
            )
        for enc_idx, dec_idx in self.skips:
            if enc_idx + dec_idx != self.n_dec_layers:
                raise ValueError(
                    f"skip pair ({enc_idx}, {dec_idx}) is not symmetric: indices must "
                    f"sum to {self.n_dec_layers}"
                )
            if not (0 <= enc_idx < self.n_enc_layers and 1 <= dec_idx <= self.n_dec_layers):
                raise ValueError(f"skip pair ({enc_idx}, {dec_idx}) out of range")

    @property
    def skips(self) -> tuple[tuple[int, int], ...]:
        if self.skip_pairs is not None:
            return tuple((int(a), int(b)) for a, b in self.skip_pairs)
        return default_skip_pairs(self.n_enc_layers)

    def to_dict(self) -> dict:
        return {
            "n_enc_layers": self.n_enc_layers,
            "n_dec_layers": self.n_dec_layers,
            "filters": self.filters,
            "kernel": self.kernel,
            "latent_dim": self.latent_dim,
            "bottleneck_hidden": self.bottleneck_hidden,
            "bottleneck_enabled": self.bottleneck_enabled,
            "skip_pairs": [list(p) for p in self.skips],
            "input_h": self.input_h,
            "input_w": self.input_w,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RVAEConfig":
        data = dict(data)
        pairs = data.get("skip_pairs")
        if pairs is not None:
            data["skip_pairs"] = tuple((int(a), int(b)) for a, b in pairs)
        return cls(**data)


def parameter_count(config: RVAEConfig) -> int:
    """Closed-form total parameter count for a config."""
    f, k2, n = config.filters, config.kernel**2, config.n_enc_layers
    enc = (1 * f * k2 + f) + (n - 1) * (f * f * k2 + f)
    dec = (n - 1) * (f * f * k2 + f) + (f * 1 * k2 + 1)
    total = enc + dec
    if config.bottleneck_enabled:
        h, z = config.bottleneck_hidden, config.latent_dim
        total += (f * h + h) + 2 * (h * z + z) + (z * f + f)
    return total


@dataclass
class LatentSample:
    """Reparameterized bottleneck sample: z = mu + exp(0.5 * log_var) * eps."""

    mu: torch.Tensor
    log_var: torch.Tensor
    eps: torch.Tensor
    z: torch.Tensor


class RVAE(nn.Module):
    """Valid (unpadded) stride-1 convolutions shrink by kernel-1 per encoder stage;
    transposed convolutions grow back symmetrically, so skip shapes line up exactly
    for symmetric pairs and output shape equals input shape. The final decoder
    stage is linear (no rectifier). With the bottleneck disabled the network is the
    plain residual encoder-decoder baseline."""

    def __init__(self, config: RVAEConfig):
        super().__init__()
        self.config = config
        f, k = config.filters, config.kernel
        self.enc = nn.ModuleList(
            [nn.Conv2d(1 if i == 0 else f, f, k) for i in range(config.n_enc_layers)]
        )
        self.dec = nn.ModuleList(
            [
                nn.ConvTranspose2d(f, f if i < config.n_dec_layers - 1 else 1, k)
                for i in range(config.n_dec_layers)
            ]
        )
        if config.bottleneck_enabled:
            self.bn_hidden = nn.Linear(f, config.bottleneck_hidden)
            self.bn_mu = nn.Linear(config.bottleneck_hidden, config.latent_dim)
            self.bn_log_var = nn.Linear(config.bottleneck_hidden, config.latent_dim)
            self.bn_bias = nn.Linear(config.latent_dim, f)
        self._skip_for_stage = {dec_idx: enc_idx for enc_idx, dec_idx in config.skips}

    def reset_parameters(self, seed: int) -> None:
        """Fan-in-scaled uniform weights, zero biases, drawn deterministically from seed."""
        rng = Generator(Philox(SeedSequence((int(seed), 0x1817))))
        for name, param in sorted(self.named_parameters(), key=lambda kv: kv[0]):
            with torch.no_grad():
                if name.endswith("bias"):
                    param.zero_()
                    continue
                if param.ndim == 4:
                    # Conv weight (out,in,k,k); transposed conv weight (in,out,k,k).
                    fan_in = param.shape[1 if "enc" in name else 0] * param.shape[2] * param.shape[3]
                else:
                    fan_in = param.shape[1]
                bound = 1.0 / float(np.sqrt(fan_in))
                draw = rng.uniform(-bound, bound, size=tuple(param.shape))
                param.copy_(torch.from_numpy(draw).to(param.dtype))

    def _check_finite(self, tensor: torch.Tensor, layer: str) -> None:
        if not torch.isfinite(tensor).all():
            raise NonFiniteActivationError(f"non-finite activation after layer {layer}")

    def forward(
        self, x: torch.Tensor, eps: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, LatentSample | None]:
        if x.ndim == 3:
            x = x.unsqueeze(1)
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected (B, 1, H, W) input, got {tuple(x.shape)}")
        if x.shape[2] != self.config.input_h or x.shape[3] != self.config.input_w:
            raise ValueError(
                f"input {x.shape[2]}x{x.shape[3]} does not match the configured "
                f"{self.config.input_h}x{self.config.input_w}"
            )
        if not torch.isfinite(x).all():
            raise ValueError("input contains non-finite values")

        feats = [x]
        h = x
        for i, conv in enumerate(self.enc):
            h = torch.relu(conv(h))
            self._check_finite(h, f"enc{i + 1}")
            feats.append(h)

        latent: LatentSample | None = None
        if self.config.bottleneck_enabled:
            pooled = h.mean(dim=(2, 3))
            hidden = torch.relu(self.bn_hidden(pooled))
            mu = self.bn_mu(hidden)
            log_var = self.bn_log_var(hidden)
            if eps is None:
                eps = torch.zeros_like(mu)
            else:
                eps = eps.to(dtype=mu.dtype)
                if eps.shape != mu.shape:
                    raise ValueError(f"eps shape {tuple(eps.shape)} != {tuple(mu.shape)}")
            z = mu + torch.exp(0.5 * log_var) * eps
            latent = LatentSample(mu=mu, log_var=log_var, eps=eps, z=z)
            h = h + self.bn_bias(z)[:, :, None, None]
            self._check_finite(h, "bottleneck")

        n = self.config.n_dec_layers
        for i, deconv in enumerate(self.dec):
            stage = i + 1
            h = deconv(h)
            enc_idx = self._skip_for_stage.get(stage)
            if enc_idx is not None:
                h = h + feats[enc_idx]
            if stage < n:
                h = torch.relu(h)
            self._check_finite(h, f"dec{stage}")
        return h, latent

    def denoise(self, x: torch.Tensor) -> torch.Tensor:
        """Deterministic inference path (eps = zeros)."""
        with torch.no_grad():
            out, _ = self.forward(x)
        return out


def init_params(config: RVAEConfig, seed: int) -> "OrderedDict[str, torch.Tensor]":
    """Deterministic parameter set for a config; same seed gives identical arrays."""
    model = RVAE(config)
    model.reset_parameters(seed)
    return model.state_dict()


def build_rvae(
    config: RVAEConfig,
    seed: int = 0,
    params: "OrderedDict[str, torch.Tensor] | None" = None,
    dtype: torch.dtype = torch.float32,
) -> RVAE:
    model = RVAE(config).to(dtype)
    if params is None:
        model.reset_parameters(seed)
    else:
        model.load_state_dict({k: v.to(dtype) for k, v in params.items()})
    return model


def gradients(model: nn.Module, loss: torch.Tensor) -> dict[str, torch.Tensor]:
    """Exact partial derivatives of a scalar loss for every named parameter."""
    named = list(model.named_parameters())
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    return {
        name: (g.detach().clone() if g is not None else torch.zeros_like(p))
        for (name, p), g in zip(named, grads)
    }


FeatureExtractorKind = Literal["fixed_random", "external_weights"]


@dataclass(frozen=True)
class FeatureExtractorSpec:
    kind: FeatureExtractorKind = "fixed_random"
    seed: int = 0
    path: str | None = None
    layers: tuple[int, ...] = (0, 1, 2, 3)

    def __post_init__(self) -> None:
        if self.kind not in ("fixed_random", "external_weights"):
            raise ValueError(f"unknown feature extractor kind {self.kind!r}")
        if self.kind == "external_weights" and not self.path:
            raise ValueError("external_weights extractor requires a weight-file path")
        if not self.layers:
            raise ValueError("at least one feature layer index is required")


class FeatureExtractor:
    """Frozen map from an image batch to feature maps at the declared depths.

    Weights are plain tensors (never parameters), so they receive no gradient
    updates; gradients still flow through to the input for the perceptual loss.
    """

    def __init__(
        self,
        spec: FeatureExtractorSpec,
        stages: list[tuple[torch.Tensor, torch.Tensor, int]] | None = None,
        fn: Callable[[torch.Tensor], list[torch.Tensor]] | None = None,
    ):
        self.spec = spec
        self._stages = stages
        self._fn = fn

    def __call__(self, x: torch.Tensor) -> list[torch.Tensor]:
        if self._fn is not None:
            return self._fn(x)
        assert self._stages is not None
        outputs = []
        h = x
        for weight, bias, stride in self._stages:
            w = weight.to(x.dtype)
            b = bias.to(x.dtype)
            h = torch.relu(torch.nn.functional.conv2d(h, w, b, stride=stride, padding=1))
            outputs.append(h)
        return [outputs[i] for i in self.spec.layers]


_FIXED_RANDOM_CHANNELS = (16, 32, 64, 96)
_FIXED_RANDOM_STRIDE = 2


def _draw_stages(seed: int) -> list[tuple[torch.Tensor, torch.Tensor, int]]:
    rng = Generator(Philox(SeedSequence((int(seed), 0xFEA7))))
    stages = []
    c_in = 1
    for c_out in _FIXED_RANDOM_CHANNELS:
        fan_in = c_in * 9
        bound = 1.0 / float(np.sqrt(fan_in))
        w = rng.uniform(-bound, bound, size=(c_out, c_in, 3, 3))
        stages.append(
            (torch.from_numpy(w).float(), torch.zeros(c_out), _FIXED_RANDOM_STRIDE)
        )
        c_in = c_out
    return stages


def make_feature_extractor(spec: FeatureExtractorSpec) -> FeatureExtractor:
    if max(spec.layers) >= len(_FIXED_RANDOM_CHANNELS) and spec.kind == "fixed_random":
        raise ValueError(f"fixed_random extractor has {len(_FIXED_RANDOM_CHANNELS)} stages")
    if spec.kind == "fixed_random":
        return FeatureExtractor(spec, stages=_draw_stages(spec.seed))
    container = load_container(spec.path)
    if container.kind != "feature_extractor":
        raise ValueError(f"{spec.path}: not a feature-extractor weight file")
    strides = container.meta["strides"]
    stages = []
    for i, stride in enumerate(strides):
        try:
            w = container.arrays[f"stage{i}.weight"]
            b = container.arrays[f"stage{i}.bias"]
        except KeyError as exc:
            raise ValueError(f"{spec.path}: missing array for stage {i}") from exc
        stages.append((torch.from_numpy(w).float(), torch.from_numpy(b).float(), int(stride)))
    if max(spec.layers) >= len(stages):
        raise ValueError(f"layer index {max(spec.layers)} out of range for {len(stages)} stages")
    return FeatureExtractor(spec, stages=stages)


def save_feature_extractor(extractor: FeatureExtractor, path: Path | str) -> None:
    """Write extractor weights as an external-weights file loadable by make_feature_extractor."""
    if extractor._stages is None:
        raise ValueError("only stage-based extractors can be saved")
    arrays = {}
    strides = []
    for i, (w, b, stride) in enumerate(extractor._stages):
        arrays[f"stage{i}.weight"] = w.numpy()
        arrays[f"stage{i}.bias"] = b.numpy()
        strides.append(int(stride))
    save_container(
        path,
        Container(
            kind="feature_extractor",
            config={},
            meta={"strides": strides, "layers": list(extractor.spec.layers)},
            arrays=arrays,
        ),
    )
