from __future__ import annotations

import math

import numpy as np
import pytest
import torch
from helpers import tiny_config

from sswl.losses import LossWeights, hybrid_loss, kl_loss, mse_loss, perceptual_loss
from sswl.model import (
    FeatureExtractor,
    FeatureExtractorSpec,
    LatentSample,
    build_rvae,
    make_feature_extractor,
)


def identity_extractor() -> FeatureExtractor:
    return FeatureExtractor(FeatureExtractorSpec(seed=0, layers=(0,)), fn=lambda x: [x])


class TestMseLoss:
    def test_identical(self):
        x = torch.rand(2, 1, 8, 8)
        assert float(mse_loss(x, x)) == 0.0

    def test_scalar_closed_form(self):
        pred = torch.tensor([[[[0.2]]]])
        target = torch.tensor([[[[0.5]]]])
        assert float(mse_loss(pred, target)) == pytest.approx(0.09, rel=1e-6)

    def test_batch_equals_mean_of_per_image(self):
        gen = torch.Generator().manual_seed(0)
        pred = torch.rand(4, 1, 8, 8, generator=gen, dtype=torch.float64)
        target = torch.rand(4, 1, 8, 8, generator=gen, dtype=torch.float64)
        per_image = [float(mse_loss(pred[i : i + 1], target[i : i + 1])) for i in range(4)]
        assert float(mse_loss(pred, target)) == pytest.approx(np.mean(per_image), rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            mse_loss(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 5, 5))


class TestPerceptualLoss:
    def test_identical_zero_for_any_extractor(self):
        x = torch.rand(3, 1, 32, 32)
        for extractor in (identity_extractor(), make_feature_extractor(FeatureExtractorSpec(seed=0))):
            assert float(perceptual_loss(x, x.clone(), extractor)) == 0.0

    def test_identity_extractor_reduces_to_elementwise_formula(self):
        gen = torch.Generator().manual_seed(1)
        pred = torch.rand(3, 1, 8, 8, generator=gen, dtype=torch.float64)
        target = torch.rand(3, 1, 8, 8, generator=gen, dtype=torch.float64)
        got = float(perceptual_loss(pred, target, identity_extractor()))
        # Oracle: per image, sum of squared pixel distance normalized by element
        # count, averaged over the batch; equals plain MSE for the identity map.
        per_image = ((pred - target) ** 2).flatten(1).sum(1) / 64.0
        assert got == pytest.approx(float(per_image.mean()), rel=1e-12)
        assert got == pytest.approx(float(mse_loss(pred, target)), rel=1e-12)

    def test_duplicating_batch_leaves_value_unchanged(self):
        gen = torch.Generator().manual_seed(2)
        pred = torch.rand(2, 1, 16, 16, generator=gen, dtype=torch.float64)
        target = torch.rand(2, 1, 16, 16, generator=gen, dtype=torch.float64)
        extractor = make_feature_extractor(FeatureExtractorSpec(seed=4))
        single = float(perceptual_loss(pred, target, extractor))
        doubled = float(
            perceptual_loss(torch.cat([pred, pred]), torch.cat([target, target]), extractor)
        )
        assert doubled == pytest.approx(single, rel=1e-6)


class TestKlLoss:
    def test_prior_is_zero(self):
        assert float(kl_loss(torch.zeros(2, 4), torch.zeros(2, 4))) == 0.0

    def test_unit_mean_shift(self):
        value = float(kl_loss(torch.ones(1, 1, dtype=torch.float64), torch.zeros(1, 1, dtype=torch.float64)))
        assert value == pytest.approx(0.5, rel=1e-12)

    def test_doubled_sigma(self):
        log_var = torch.full((1, 1), math.log(4.0), dtype=torch.float64)
        value = float(kl_loss(torch.zeros(1, 1, dtype=torch.float64), log_var))
        expected = -0.5 * (1.0 + math.log(4.0) - 0.0 - 4.0)
        assert value == pytest.approx(expected, rel=1e-12)
        assert value == pytest.approx(0.8068528194400547, rel=1e-12)

    def test_non_negative_random(self):
        gen = torch.Generator().manual_seed(3)
        for _ in range(20):
            mu = torch.randn(5, 8, generator=gen, dtype=torch.float64)
            log_var = torch.randn(5, 8, generator=gen, dtype=torch.float64)
            assert float(kl_loss(mu, log_var)) >= 0.0

    def test_gradient_zero_at_prior_finite_difference(self):
        h = 1e-6
        for direction in np.eye(3):
            plus = torch.from_numpy(np.array([direction * h]))
            minus = torch.from_numpy(np.array([-direction * h]))
            zeros = torch.zeros(1, 3, dtype=torch.float64)
            dmu = (float(kl_loss(plus, zeros)) - float(kl_loss(minus, zeros))) / (2 * h)
            dlv = (float(kl_loss(zeros, plus)) - float(kl_loss(zeros, minus))) / (2 * h)
            assert abs(dmu) < 1e-6
            assert abs(dlv) < 1e-6

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            kl_loss(torch.tensor([[math.nan]]), torch.tensor([[0.0]]))


class TestHybridLoss:
    def test_perfect_prediction_at_prior_is_zero(self):
        x = torch.rand(2, 1, 8, 8)
        latent = LatentSample(
            mu=torch.zeros(2, 4), log_var=torch.zeros(2, 4), eps=torch.zeros(2, 4), z=torch.zeros(2, 4)
        )
        out = hybrid_loss(x, x.clone(), latent, identity_extractor(), LossWeights(0.6, 1.0))
        assert float(out.total) == 0.0

    def test_zero_weights_reduce_to_mse_exactly(self):
        gen = torch.Generator().manual_seed(4)
        pred = torch.rand(2, 1, 8, 8, generator=gen)
        target = torch.rand(2, 1, 8, 8, generator=gen)
        out = hybrid_loss(pred, target, None, None, LossWeights(beta=0.0, alpha=0.0))
        assert torch.equal(out.total, mse_loss(pred, target))
        assert float(out.perceptual_term) == 0.0
        assert float(out.kl_term) == 0.0

    def test_extractor_not_invoked_when_beta_zero(self):
        calls = []

        def tracking(x):
            calls.append(1)
            return [x]

        extractor = FeatureExtractor(FeatureExtractorSpec(seed=0, layers=(0,)), fn=tracking)
        pred = torch.rand(1, 1, 8, 8)
        hybrid_loss(pred, pred.clone(), None, extractor, LossWeights(beta=0.0, alpha=0.0))
        assert not calls

    @pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
    def test_component_sum_within_4_ulps(self, dtype):
        gen = torch.Generator().manual_seed(5)
        model = build_rvae(tiny_config(), seed=5, dtype=dtype)
        x = torch.rand(2, 1, 16, 16, generator=gen).to(dtype)
        target = torch.rand(2, 1, 16, 16, generator=gen).to(dtype)
        eps = torch.randn(2, 4, generator=gen).to(dtype)
        pred, latent = model(x, eps)
        weights = LossWeights(beta=0.6, alpha=1.0)
        out = hybrid_loss(pred, target, latent, identity_extractor(), weights)
        total = float(out.total.detach())
        recomposed = (
            float(out.mse_term.detach())
            + weights.beta * float(out.perceptual_term.detach())
            + weights.alpha * float(out.kl_term.detach())
        )
        ulp = float(torch.finfo(dtype).eps)
        assert abs(total - recomposed) <= 4.0 * ulp * max(abs(total), 1e-30)

    def test_linear_in_beta(self):
        gen = torch.Generator().manual_seed(6)
        pred = torch.rand(2, 1, 8, 8, generator=gen, dtype=torch.float64)
        target = torch.rand(2, 1, 8, 8, generator=gen, dtype=torch.float64)
        extractor = identity_extractor()
        beta = 0.37
        with_beta = hybrid_loss(pred, target, None, extractor, LossWeights(beta=beta, alpha=0.0))
        without = hybrid_loss(pred, target, None, extractor, LossWeights(beta=0.0, alpha=0.0))
        delta = float(with_beta.total) - float(without.total)
        assert delta == pytest.approx(beta * float(with_beta.perceptual_term), rel=1e-12)

    def test_latent_none_means_zero_kl(self):
        pred = torch.rand(1, 1, 8, 8)
        out = hybrid_loss(pred, pred.clone(), None, identity_extractor(), LossWeights(0.6, 1.0))
        assert float(out.kl_term) == 0.0

    def test_beta_without_extractor_rejected(self):
        pred = torch.rand(1, 1, 8, 8)
        with pytest.raises(ValueError, match="extractor"):
            hybrid_loss(pred, pred.clone(), None, None, LossWeights(beta=0.5, alpha=0.0))

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(beta=-0.1, alpha=1.0)
