import math

import numpy as np
import pytest
import torch

from adamm.lgrm import (
    PresenceHead,
    dice_loss_per_class,
    gate_segmentation,
    lgrm_loss,
    presence_bce,
    presence_weights,
    weighted_dice_loss,
)

import oracles


class TestPresenceHead:
    def test_zero_parameters_half(self):
        head = PresenceHead(4)
        with torch.no_grad():
            for p in head.parameters():
                p.zero_()
        head.eval()
        out = head(torch.randn(2, 4, 4, 4, 4))
        assert torch.allclose(out, torch.full((2, 3), 0.5))

    def test_pooling_is_permutation_invariant(self):
        torch.manual_seed(0)
        head = PresenceHead(4)
        head.eval()
        u2 = torch.randn(1, 4, 3, 3, 3)
        with torch.no_grad():
            z = torch.relu(head.norm(head.conv(u2)))
            q = head.project(z)
            base = torch.sigmoid(q.mean(dim=(-3, -2, -1)))
            perm = torch.randperm(27)
            q_perm = q.reshape(1, 3, -1)[:, :, perm].reshape(q.shape)
            permuted = torch.sigmoid(q_perm.mean(dim=(-3, -2, -1)))
        assert torch.allclose(head(u2), base, atol=1e-7)
        assert torch.allclose(base, permuted, atol=1e-6)

    def test_open_interval(self):
        torch.manual_seed(1)
        head = PresenceHead(4)
        head.eval()
        out = head(torch.randn(1, 4, 4, 4, 4) * 20)
        assert ((out > 0) & (out < 1)).all()


class TestGating:
    def test_all_confident_identity(self, rng):
        seg = rng.random((3, 4, 4, 4)).astype(np.float32)
        out = gate_segmentation(seg, np.array([0.9, 0.9, 0.9]))
        assert np.array_equal(out, seg)

    def test_single_channel_zeroed(self, rng):
        seg = rng.random((3, 4, 4, 4)).astype(np.float32)
        out = gate_segmentation(seg, np.array([0.4, 0.9, 0.9]))
        assert np.abs(out[0]).sum() == 0
        assert np.array_equal(out[1:], seg[1:])

    def test_exact_half_is_gated(self, rng):
        seg = rng.random((3, 2, 2, 2)).astype(np.float32)
        out = gate_segmentation(seg, np.array([0.5, 0.5 + 1e-6, 0.5]))
        assert np.abs(out[0]).sum() == 0 and np.abs(out[2]).sum() == 0
        assert np.array_equal(out[1], seg[1])

    def test_torch_batched(self, rng):
        seg = torch.rand(2, 3, 2, 2, 2)
        presence = torch.tensor([[0.9, 0.1, 0.6], [0.2, 0.8, 0.9]])
        out = gate_segmentation(seg, presence)
        assert torch.equal(out[0, 0], seg[0, 0]) and out[0, 1].abs().sum() == 0
        assert out[1, 0].abs().sum() == 0 and torch.equal(out[1, 2], seg[1, 2])


class TestPresenceWeights:
    def test_limits(self):
        w = presence_weights(np.array([0.0, 1.0, 0.5]), np.array([0.0, 1.0, 1.0]))
        assert np.allclose(w, [1.0, 1.0, 1.5], atol=1e-12)

    def test_arithmetic(self):
        assert presence_weights(np.array([0.9]), np.array([0.0]))[0] == pytest.approx(1.9, abs=1e-12)

    def test_random_direct(self, rng):
        for _ in range(50):
            p = rng.uniform(0.001, 0.999, size=3)
            y = (rng.random(3) > 0.5).astype(float)
            got = presence_weights(p, y)
            assert np.allclose(got, np.abs(p - y) + 1.0, atol=1e-12)
            assert ((got > 1.0) & (got < 2.0)).all()

    def test_torch_path(self):
        w = presence_weights(torch.tensor([0.25, 0.75, 0.5]), torch.tensor([1.0, 0.0, 0.0]))
        assert torch.allclose(w, torch.tensor([1.75, 1.75, 1.5]), atol=1e-7)


class TestWeightedDice:
    def test_perfect_binary(self, rng):
        target = (torch.rand(3, 4, 4, 4) > 0.6).float()
        target[:, 0, 0, 0] = 1.0
        loss = weighted_dice_loss(target, target, torch.ones(3))
        assert loss.item() == pytest.approx(0.0, abs=1e-4)

    def test_disjoint(self):
        seg = torch.zeros(3, 2, 2, 2)
        seg[:, 0, 0, 0] = 1.0
        target = torch.zeros(3, 2, 2, 2)
        target[:, 1, 1, 1] = 1.0
        loss = weighted_dice_loss(seg, target, torch.ones(3))
        assert loss.item() == pytest.approx(3.0, abs=1e-3)

    def test_scalar_loop_oracle(self, rng):
        seg = torch.tensor(rng.random((3, 2, 2, 2)).astype(np.float64))
        target = torch.tensor((rng.random((3, 2, 2, 2)) > 0.5).astype(np.float64))
        w = torch.tensor([1.2, 1.8, 1.1], dtype=torch.float64)
        got = weighted_dice_loss(seg, target, w).item()
        want = float((w.numpy() * oracles.dice_loss_scalar(seg.numpy(), target.numpy())).sum())
        assert got == pytest.approx(want, rel=1e-10)

    def test_unit_weights_bitwise_equal_unweighted(self, rng):
        seg = torch.rand(3, 3, 3, 3)
        target = (torch.rand(3, 3, 3, 3) > 0.5).float()
        weighted = weighted_dice_loss(seg, target, torch.ones(3))
        unweighted = weighted_dice_loss(seg, target)
        assert weighted.item() == unweighted.item()

    def test_batched_mean(self, rng):
        seg = torch.rand(2, 3, 2, 2, 2, dtype=torch.float64)
        target = (torch.rand(2, 3, 2, 2, 2) > 0.5).double()
        per_class = dice_loss_per_class(seg, target)
        manual = (dice_loss_per_class(seg[0], target[0]) + dice_loss_per_class(seg[1], target[1])) / 2
        assert torch.allclose(per_class, manual, atol=1e-12)


class TestPresenceBce:
    def test_half_is_log_two(self):
        loss = presence_bce(torch.tensor([0.5, 0.5, 0.5], dtype=torch.float64), torch.tensor([1.0, 0.0, 1.0]))
        assert loss.item() == pytest.approx(math.log(2), abs=1e-9)

    def test_limits(self):
        p = torch.tensor([0.999999, 1e-6, 0.999999], dtype=torch.float64)
        y = torch.tensor([1.0, 0.0, 1.0])
        assert presence_bce(p, y).item() < 1e-5

    def test_random_direct(self, rng):
        for _ in range(20):
            p = torch.tensor(rng.uniform(0.01, 0.99, size=3))
            y = torch.tensor((rng.random(3) > 0.5).astype(np.float64))
            want = -np.mean(
                y.numpy() * np.log(p.numpy()) + (1 - y.numpy()) * np.log(1 - p.numpy())
            )
            assert presence_bce(p, y).item() == pytest.approx(want, rel=1e-9)


class TestLgrmLoss:
    def _instance(self, rng, perfect=False):
        target = (torch.rand(1, 3, 4, 4, 4) > 0.6).float()
        target[:, :, 0, 0, 0] = 1.0
        y = torch.tensor([[1.0, 1.0, 1.0]])
        if perfect:
            seg_full = seg_miss = target.clone()
            p = torch.tensor([[0.999999, 0.999999, 0.999999]])
        else:
            seg_full = torch.rand(1, 3, 4, 4, 4)
            seg_miss = torch.rand(1, 3, 4, 4, 4)
            p = torch.rand(1, 3) * 0.98 + 0.01
        return seg_full, seg_miss, target, y, p

    def test_perfect_near_zero(self, rng):
        seg_full, seg_miss, target, y, p = self._instance(rng, perfect=True)
        total, _ = lgrm_loss(seg_full, p, seg_miss, p, target, y)
        assert total.item() < 1e-3

    def test_ablation_drops_two_terms(self, rng):
        seg_full, seg_miss, target, y, p = self._instance(rng)
        total, parts = lgrm_loss(seg_full, p, seg_miss, p, target, y)
        only_full, parts_full = lgrm_loss(seg_full, p, seg_miss, p, target, y, include_miss=False)
        assert set(parts_full) == {"dice_full", "cls_full"}
        assert only_full.item() == pytest.approx(
            parts["dice_full"].item() + parts["cls_full"].item(), rel=1e-6
        )

    def test_sum_of_four_parts(self, rng):
        seg_full, seg_miss, target, y, p = self._instance(rng)
        p2 = torch.rand(1, 3) * 0.98 + 0.01
        total, parts = lgrm_loss(seg_full, p, seg_miss, p2, target, y)
        assert total.item() == pytest.approx(sum(v.item() for v in parts.values()), rel=1e-6)
        assert total.item() >= 0

    def test_branch_weights_differ(self, rng):
        seg_full, seg_miss, target, y, _ = self._instance(rng)
        p_good = torch.tensor([[0.95, 0.95, 0.95]])
        p_bad = torch.tensor([[0.05, 0.05, 0.05]])
        _, parts = lgrm_loss(seg_full, p_good, seg_full, p_bad, target, y)
        # same segmentation, worse presence -> larger weight -> larger dice term
        assert parts["dice_miss"].item() > parts["dice_full"].item()
