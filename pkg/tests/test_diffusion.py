import math

import numpy as np
import pytest
import torch

from evtrack.anchors import kmeans_anchors
from evtrack.core import N_W, SeededRng, recompute_headings
from evtrack.diffusion import (DENOISER_BASE, DENOISER_SMALL, DenoiserConfig,
                               DenoiserModel, DiffusionSchedule, LossConfig,
                               NoisedAnchors, TrainConfig, ddim_sample,
                               ddim_substeps, lr_at, make_schedule, perturb,
                               select_top1, timestep_embedding, total_loss,
                               track_loss)


def small_anchor_set(m=8, seed=21):
    rng = SeededRng(seed)
    trajs = []
    for _ in range(40 * m):
        ang = rng.uniform(-math.pi, math.pi)
        t = np.linspace(0.3, 3.0, N_W)
        xy = np.stack([t * math.cos(ang), t * math.sin(ang)], axis=1)
        xy += rng.normal(0, 0.2, (N_W, 2))
        trajs.append(recompute_headings(xy))
    return kmeans_anchors(trajs, m=m, rng=SeededRng(1))


class TestSchedule:
    def test_beta_endpoints(self):
        s = make_schedule()
        assert s.betas[0] == pytest.approx(1e-4)
        assert s.betas[-1] == pytest.approx(0.02)
        assert len(s.betas) == 1000

    def test_alpha_bars_cumprod_oracle(self):
        s = make_schedule()
        assert s.alpha_bars[0] == 1.0
        # independent recomputation
        prod = 1.0
        for i, beta in enumerate(s.betas[:60]):
            prod *= 1.0 - beta
            assert s.alpha_bars[i + 1] == pytest.approx(prod, rel=1e-12)

    def test_alpha_bars_strictly_decreasing(self):
        s = make_schedule()
        assert np.all(np.diff(s.alpha_bars) < 0)

    def test_truncation_keeps_signal_dominant(self):
        # at the training cutoff most of the signal must survive
        s = make_schedule()
        assert s.alpha_bars[s.t_train] > 0.9
        assert s.alpha_bars[s.t_infer] > 0.99

    def test_invalid_sizes(self):
        with pytest.raises(ValueError):
            make_schedule(t_total=100, t_train=200)
        with pytest.raises(ValueError):
            make_schedule(t_train=5, t_infer=10)


class TestPerturb:
    def test_shapes_and_determinism(self):
        anchors = small_anchor_set()
        s = make_schedule()
        a = perturb(anchors, 10, SeededRng(3), s)
        b = perturb(anchors, 10, SeededRng(3), s)
        assert a.noised.shape == (anchors.m, 2 * N_W)
        assert np.array_equal(a.noised, b.noised)

    def test_forward_formula_oracle(self):
        anchors = small_anchor_set()
        s = make_schedule()
        out = perturb(anchors, 25, SeededRng(4), s)
        x0 = anchors.normalized_xy()
        expect = (math.sqrt(s.alpha_bars[25]) * x0
                  + math.sqrt(1 - s.alpha_bars[25]) * out.eps)
        assert np.allclose(out.noised, expect)

    def test_t_bounds_enforced(self):
        anchors = small_anchor_set()
        s = make_schedule()
        for t in (0, 51):
            with pytest.raises(ValueError):
                perturb(anchors, t, SeededRng(0), s)


class TestTimestepEmbedding:
    def test_shape_and_t0(self):
        e = timestep_embedding(torch.tensor([0.0, 3.0]), 64)
        assert e.shape == (2, 64)
        assert torch.allclose(e[0, :32], torch.ones(32))
        assert torch.allclose(e[0, 32:], torch.zeros(32))

    def test_distinct_timesteps_distinct(self):
        e = timestep_embedding(torch.tensor([1.0, 2.0]), 64)
        assert not torch.allclose(e[0], e[1])


class TestDenoiserModel:
    cfg = DenoiserConfig(depth=2, dim=64, heads=2, cond_dim=16)

    def test_preset_sizes(self):
        assert (DENOISER_SMALL.depth, DENOISER_SMALL.dim, DENOISER_SMALL.heads) == (6, 384, 4)
        assert (DENOISER_BASE.depth, DENOISER_BASE.dim, DENOISER_BASE.heads) == (12, 768, 12)

    def test_output_shapes(self):
        torch.manual_seed(0)
        model = DenoiserModel(self.cfg)
        tau, scores = model(torch.randn(3, 8, 2 * N_W), torch.randn(3, 16),
                            torch.tensor([1.0, 5.0, 10.0]))
        assert tau.shape == (3, 8, 2 * N_W)
        assert scores.shape == (3, 8)

    def test_zero_init_ignores_condition(self):
        """adaLN gates start at zero, so the initial model output cannot
        depend on the condition vector."""
        torch.manual_seed(1)
        model = DenoiserModel(self.cfg)
        x = torch.randn(2, 8, 2 * N_W)
        t = torch.tensor([3.0, 3.0])
        a, sa = model(x, torch.randn(2, 16), t)
        b, sb = model(x, torch.randn(2, 16) * 5, t)
        assert torch.allclose(a, b, atol=1e-6)
        assert torch.allclose(sa, sb, atol=1e-6)

    def test_tokens_carry_anchor_identity(self):
        """Identical coordinates in different anchor slots give different
        outputs: identity comes from the index embedding, not the values."""
        torch.manual_seed(2)
        model = DenoiserModel(self.cfg)
        for p in model.parameters():
            p.data.add_(torch.randn_like(p) * 0.02)
        x = torch.randn(1, 1, 2 * N_W).expand(1, 8, 2 * N_W)
        cond = torch.randn(1, 16)
        tau, s = model(x, cond, torch.tensor([4.0]))
        assert not torch.allclose(s[0, 0], s[0, 1], atol=1e-6)
        assert not torch.allclose(tau[0, 0], tau[0, 1], atol=1e-6)

    def test_too_many_anchors_rejected(self):
        model = DenoiserModel(self.cfg)
        x = torch.randn(1, self.cfg.max_anchors + 1, 2 * N_W)
        with pytest.raises(ValueError):
            model(x, torch.randn(1, 16), torch.tensor([4.0]))

    def test_json_round_trip(self):
        assert DenoiserConfig.from_json(self.cfg.to_json()) == self.cfg


class TestTrackLoss:
    def test_hand_computed_oracle(self):
        tau_hat = torch.tensor([[[1.0, 0.0], [0.5, 0.5]]]).repeat(1, 1, N_W)
        tau_gt = torch.tensor([[2.0, 1.0]]).repeat(1, N_W)
        logits = torch.tensor([[2.0, -1.0]])
        pos = torch.tensor([0])
        cfg = LossConfig(lam=100.0)
        got = track_loss(tau_hat, logits, tau_gt, pos, cfg)
        mse = ((1.0 - 2.0) ** 2 + (0.0 - 1.0) ** 2) / 2
        bce = (math.log(1 + math.exp(-2.0)) + math.log(1 + math.exp(-1.0)))
        assert got.shape == (1,)
        assert got.item() == pytest.approx(mse + 100.0 * bce, rel=1e-5)

    def test_perfect_prediction_near_zero(self):
        gt = torch.randn(2, 2 * N_W)
        tau_hat = torch.stack([gt, torch.zeros_like(gt)], dim=1)
        logits = torch.tensor([[15.0, -15.0], [15.0, -15.0]])
        pos = torch.tensor([0, 0])
        assert track_loss(tau_hat, logits, gt, pos).max().item() < 0.1

    def test_logit_clamp_keeps_loss_finite(self):
        gt = torch.zeros(1, 2 * N_W)
        tau_hat = torch.zeros(1, 2, 2 * N_W)
        logits = torch.tensor([[-1e9, 1e9]])
        pos = torch.tensor([0])
        assert torch.isfinite(track_loss(tau_hat, logits, gt, pos)).all()


class TestTotalLoss:
    def test_both_branches(self):
        t = torch.tensor([2.0, 4.0])
        r = torch.tensor([1.0])
        got = total_loss(t, r, LossConfig(alpha=1.0))
        assert got.item() == pytest.approx(3.0 + 1.0)

    def test_alpha_weighting(self):
        got = total_loss(torch.tensor([1.0]), torch.tensor([2.0]),
                         LossConfig(alpha=0.5))
        assert got.item() == pytest.approx(2.0)

    def test_single_branch(self):
        assert total_loss(torch.tensor([3.0]), None).item() == 3.0
        assert total_loss(None, torch.tensor([3.0])).item() == 3.0

    def test_no_branches_raises(self):
        with pytest.raises(ValueError):
            total_loss(None, None)

    def test_invalid_weights(self):
        with pytest.raises(ValueError):
            LossConfig(lam=0.0)


class _OracleModel:
    """Fake denoiser that returns the clean anchors (perfect x0 estimate)."""

    def __init__(self, anchors_norm, scores):
        self.x0 = torch.as_tensor(anchors_norm, dtype=torch.float64)
        self.scores = torch.as_tensor(scores, dtype=torch.float64)

    def __call__(self, x, cond, t):
        b = x.shape[0]
        return self.x0.expand(b, -1, -1), self.scores.expand(b, -1)


class TestDdim:
    def test_substeps_default(self):
        assert ddim_substeps(make_schedule()) == [10, 5, 0]

    def test_substep_count_matches_n_step(self):
        s = make_schedule(n_step=5)
        steps = ddim_substeps(s)
        assert len(steps) == 6
        assert steps[0] == 10 and steps[-1] == 0

    def test_perfect_model_recovers_anchors_exactly(self):
        """With an exact x0 prediction, the final DDIM step (alpha_bar = 1 at
        t = 0) must return the clean anchors."""
        anchors = small_anchor_set()
        s = make_schedule()
        scores = np.arange(anchors.m, dtype=float)
        model = _OracleModel(anchors.normalized_xy(), scores)
        trajs, got_scores = ddim_sample(model, anchors, torch.zeros(16), s,
                                        SeededRng(8))
        assert len(trajs) == anchors.m
        for got, ref in zip(trajs, anchors.anchors):
            assert np.allclose(got.xy, ref.xy, atol=1e-9)
        assert np.allclose(got_scores, scores)

    def test_deterministic_given_rng(self):
        anchors = small_anchor_set()
        s = make_schedule()
        torch.manual_seed(3)
        model = DenoiserModel(DenoiserConfig(depth=1, dim=32, heads=2, cond_dim=8))
        cond = torch.zeros(8)
        a, _ = ddim_sample(model, anchors, cond, s, SeededRng(9))
        b, _ = ddim_sample(model, anchors, cond, s, SeededRng(9))
        for x, y in zip(a, b):
            assert np.array_equal(x.waypoints, y.waypoints)


class TestSelectTop1:
    def test_argmax_selected(self):
        trajs = ["a", "b", "c"]
        assert select_top1(trajs, [0.1, 2.0, -1.0]) == "b"

    def test_tie_breaks_low_index(self):
        assert select_top1(["a", "b"], [1.0, 1.0]) == "a"

    def test_mismatch_raises(self):
        with pytest.raises(ValueError):
            select_top1(["a"], [1.0, 2.0])


class TestLrSchedule:
    cfg = TrainConfig(lr=1e-3, warmup_frac=0.1)

    def test_warmup_linear(self):
        total = 100
        assert lr_at(0, total, self.cfg) == pytest.approx(1e-3 / 10)
        assert lr_at(9, total, self.cfg) == pytest.approx(1e-3)

    def test_cosine_decays_to_zero(self):
        total = 100
        vals = [lr_at(s, total, self.cfg) for s in range(10, 100)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))
        assert lr_at(99, 100, self.cfg) < 1e-5 * 10

    def test_config_json_round_trip(self):
        cfg = TrainConfig(lr=2e-4, epochs=3, loss=LossConfig(lam=50.0, alpha=2.0))
        assert TrainConfig.from_json(cfg.to_json()) == cfg
