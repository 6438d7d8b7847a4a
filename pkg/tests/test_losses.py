import math

import numpy as np
import pytest
import torch
from torch import nn

from trackmend.data import Region, RegionMask
from trackmend.losses import (
    LossWeights,
    adversarial_losses,
    composite,
    guider_loss,
    reconstruction_loss,
    total_loss,
)


def band_mask(region, h, w):
    return torch.from_numpy(RegionMask.banded(region, h, w).mask.astype(np.float32))


class ConstantDisc(nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = value

    def forward(self, x):
        return torch.full((x.shape[0],), self.value, dtype=x.dtype)


class MeanDisc(nn.Module):
    """Deterministic probability from input content, for oracle checks."""

    def forward(self, x):
        return torch.sigmoid(3.0 * x.reshape(x.shape[0], -1).mean(dim=1))


class TestComposite:
    def test_empty_mask_returns_original(self):
        pred = torch.rand(3, 8, 8)
        orig = torch.rand(3, 8, 8)
        assert torch.equal(composite(pred, orig, torch.zeros(8, 8)), orig)

    def test_full_mask_returns_prediction(self):
        pred = torch.rand(3, 8, 8)
        orig = torch.rand(3, 8, 8)
        assert torch.equal(composite(pred, orig, torch.ones(8, 8)), pred)

    def test_band_mask_is_pixel_exact_on_both_sides(self):
        rng = np.random.default_rng(0)
        pred = torch.from_numpy(rng.random((3, 64, 32), dtype=np.float32))
        orig = torch.from_numpy(rng.random((3, 64, 32), dtype=np.float32))
        mask = band_mask(Region.MIDDLE, 64, 32)
        out = composite(pred, orig, mask)
        inside = mask.bool()
        assert torch.equal(out[:, inside], pred[:, inside])
        assert torch.equal(out[:, ~inside], orig[:, ~inside])

    def test_idempotent(self):
        pred = torch.rand(3, 12, 8)
        orig = torch.rand(3, 12, 8)
        mask = band_mask(Region.UPPER, 12, 8)
        once = composite(pred, orig, mask)
        assert torch.equal(composite(once, orig, mask), once)

    def test_rejects_non_binary_mask(self):
        with pytest.raises(ValueError):
            composite(torch.rand(3, 4, 4), torch.rand(3, 4, 4), torch.full((4, 4), 0.5))


class TestReconstructionLoss:
    def test_zero_for_perfect_predictions(self):
        x = torch.rand(3, 8, 8)
        assert reconstruction_loss(x, x.clone(), x.clone()).item() == 0.0

    def test_band_offset_closed_form_divisible_height(self):
        # middle band of a 48x32 frame is exactly 1/3 of pixels; an offset of
        # +0.5 there and a perfect second pass give 0.5/3
        x = torch.zeros(3, 48, 32)
        mask = band_mask(Region.MIDDLE, 48, 32)
        first = x + 0.5 * mask
        assert reconstruction_loss(x, first, x).item() == pytest.approx(0.5 / 3, abs=1e-7)

    def test_band_offset_closed_form_64x32(self):
        # H=64 bands are 21/21/22 rows; middle band = 21*32 = 672 of 2048 pixels
        x = torch.zeros(3, 64, 32)
        mask = band_mask(Region.MIDDLE, 64, 32)
        first = x + 0.5 * mask
        expected = 0.5 * 672 / 2048
        assert reconstruction_loss(x, first, x).item() == pytest.approx(expected, abs=1e-7)

    def test_composited_inputs_reduce_to_masked_l1(self):
        rng = np.random.default_rng(1)
        x = torch.from_numpy(rng.random((3, 64, 32), dtype=np.float32))
        p1 = torch.from_numpy(rng.random((3, 64, 32), dtype=np.float32))
        p2 = torch.from_numpy(rng.random((3, 64, 32), dtype=np.float32))
        mask = band_mask(Region.LOWER, 64, 32)
        loss = reconstruction_loss(x, composite(p1, x, mask), composite(p2, x, mask))
        masked_l1 = (((x - p1).abs() * mask).sum() + ((x - p2).abs() * mask).sum()) / x.numel()
        assert loss.item() == pytest.approx(masked_l1.item(), abs=1e-6)

    def test_invariant_to_prediction_outside_mask(self):
        rng = np.random.default_rng(2)
        x = torch.from_numpy(rng.random((3, 16, 8), dtype=np.float32))
        p = torch.from_numpy(rng.random((3, 16, 8), dtype=np.float32))
        mask = band_mask(Region.UPPER, 16, 8)
        base = reconstruction_loss(x, composite(p, x, mask), x)
        noisy = p + 10.0 * (1 - mask)
        assert reconstruction_loss(x, composite(noisy, x, mask), x).item() == base.item()

    def test_gradient_zero_outside_mask(self):
        x = torch.rand(3, 12, 8)
        pred = torch.rand(3, 12, 8, requires_grad=True)
        mask = band_mask(Region.MIDDLE, 12, 8)
        loss = reconstruction_loss(x, composite(pred, x, mask), x)
        loss.backward()
        outside = (1 - mask).bool()
        assert torch.all(pred.grad[:, outside] == 0)
        assert pred.grad[:, mask.bool()].abs().sum() > 0


class TestAdversarialLosses:
    def test_half_probability_closed_form(self):
        d_loss, g_loss = adversarial_losses(ConstantDisc(0.5), torch.rand(4, 3, 8, 8), torch.rand(4, 3, 8, 8))
        assert d_loss.item() == pytest.approx(2 * math.log(2), abs=1e-6)
        assert g_loss.item() == pytest.approx(math.log(2), abs=1e-6)

    def test_perfect_discriminator_limit(self):
        class Perfect(nn.Module):
            def forward(self, x):
                value = 1.0 - 1e-7 if x.mean() > 0.5 else 1e-7
                return torch.full((x.shape[0],), value, dtype=torch.float64)

        real = torch.ones(2, 3, 4, 4, dtype=torch.float64)
        fake = torch.zeros(2, 3, 4, 4, dtype=torch.float64)
        d_loss, _ = adversarial_losses(Perfect(), real, fake)
        assert d_loss.item() < 1e-5

    def test_random_probabilities_match_scalar_oracle(self):
        rng = np.random.default_rng(3)
        real = torch.from_numpy(rng.normal(size=(5, 3, 4, 4)))
        fake = torch.from_numpy(rng.normal(size=(5, 3, 4, 4)))
        d_loss, g_loss = adversarial_losses(MeanDisc(), real, fake)
        p_real = 1 / (1 + np.exp(-3 * real.reshape(5, -1).mean(axis=1).numpy()))
        p_fake = 1 / (1 + np.exp(-3 * fake.reshape(5, -1).mean(axis=1).numpy()))
        expected_d = -(np.log(p_real) + np.log(1 - p_fake)).mean()
        expected_g = -np.log(p_fake).mean()
        assert d_loss.item() == pytest.approx(expected_d, abs=1e-7)
        assert g_loss.item() == pytest.approx(expected_g, abs=1e-7)

    def test_rejects_non_probability_outputs(self):
        with pytest.raises(ValueError):
            adversarial_losses(ConstantDisc(1.5), torch.rand(2, 3, 4, 4), torch.rand(2, 3, 4, 4))

    def test_generator_gradient_flows_only_through_g_loss(self):
        disc = nn.Sequential(nn.Flatten(), nn.Linear(48, 1), nn.Sigmoid(), nn.Flatten(0))
        gen_param = torch.randn(2, 3, 4, 4, requires_grad=True)
        fake = gen_param * 2.0

        d_loss, g_loss = adversarial_losses(disc, torch.rand(2, 3, 4, 4), fake)
        d_loss.backward(retain_graph=True)
        assert gen_param.grad is None
        g_loss.backward()
        assert gen_param.grad is not None and gen_param.grad.abs().sum() > 0


class TestGuiderLoss:
    class TableGuider(nn.Module):
        def __init__(self, probs):
            super().__init__()
            self.probs = probs

        def forward(self, x):
            return self.probs

    def test_perfect_prediction_is_zero(self):
        probs = torch.zeros(1, 5)
        probs[0, 2] = 1.0
        loss = guider_loss(self.TableGuider(probs), torch.rand(1, 3, 4, 4), torch.tensor([2]))
        assert loss.item() == pytest.approx(0.0, abs=1e-6)

    def test_uniform_guider_closed_form(self):
        probs = torch.full((1, 10), 0.1)
        loss = guider_loss(self.TableGuider(probs), torch.rand(1, 3, 4, 4), torch.tensor([7]))
        assert loss.item() == pytest.approx(math.log(10), abs=1e-6)

    def test_random_distribution_matches_scalar_oracle(self):
        rng = np.random.default_rng(4)
        raw = rng.random((4, 6))
        probs = torch.from_numpy(raw / raw.sum(axis=1, keepdims=True))
        labels = torch.from_numpy(rng.integers(0, 6, size=4))
        loss = guider_loss(self.TableGuider(probs), torch.rand(4, 3, 4, 4), labels)
        expected = np.mean([-math.log(probs[i, labels[i]].item()) for i in range(4)])
        assert loss.item() == pytest.approx(expected, abs=1e-9)

    def test_invalid_label(self):
        probs = torch.full((1, 3), 1 / 3)
        with pytest.raises(ValueError):
            guider_loss(self.TableGuider(probs), torch.rand(1, 3, 4, 4), torch.tensor([3]))


class TestTotalLoss:
    @staticmethod
    def _t(value):
        return torch.tensor(value, dtype=torch.float64)

    def test_zero_weights_reduce_to_reconstruction(self):
        total = total_loss(self._t(1.7), self._t(9.0), self._t(9.0), self._t(9.0), LossWeights(0.0, 0.0))
        assert total.item() == pytest.approx(1.7, abs=1e-12)

    def test_default_weights_closed_form(self):
        # 1 + 0.001*(1+1) + 0.1*1 = 1.102 with the default weights
        total = total_loss(self._t(1.0), self._t(1.0), self._t(1.0), self._t(1.0), LossWeights())
        assert total.item() == pytest.approx(1.102, abs=1e-9)

    def test_random_terms_match_scalar_arithmetic(self):
        rng = np.random.default_rng(5)
        r, a1, a2, c = rng.random(4)
        w = LossWeights(adversarial=0.25, guider=1.5)
        total = total_loss(self._t(r), self._t(a1), self._t(a2), self._t(c), w)
        assert total.item() == pytest.approx(r + 0.25 * (a1 + a2) + 1.5 * c, abs=1e-12)

    def test_monotone_in_each_term(self):
        w = LossWeights()
        base = total_loss(self._t(1.0), self._t(1.0), self._t(1.0), self._t(1.0), w)
        for bump in range(4):
            terms = [self._t(1.0)] * 4
            terms[bump] = self._t(1.5)
            assert total_loss(*terms, w).item() >= base.item()

    def test_nan_term_raises(self):
        with pytest.raises(RuntimeError):
            total_loss(
                torch.tensor(float("nan")), torch.tensor(1.0), torch.tensor(1.0), torch.tensor(1.0), LossWeights()
            )

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(adversarial=-0.1)
