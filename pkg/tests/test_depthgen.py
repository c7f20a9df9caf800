"""Stage-1 generator and loss contracts against independent oracles."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import assert_grad_close, numeric_grad
from rgbdface.depthgen import (
    DepthGenerator,
    IdentityBackbone,
    dynamic_weights,
    depth_identity_loss,
    depthgen_total_loss,
    generate_depth,
    mfs_loss,
    ps_loss,
    shallow_features,
)
from rgbdface.profiles import DESK


class TestGenerateDepth:
    def test_shape_and_range(self):
        gen = DepthGenerator(base=8)
        out = generate_depth(torch.rand(2, 3, 64, 64), gen)
        assert out.shape == (2, 1, 64, 64)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_purity_on_duplicated_inputs(self):
        gen = DepthGenerator(base=8)
        x = torch.rand(1, 3, 64, 64)
        batch = torch.cat([x, x], dim=0)
        with torch.no_grad():
            out = generate_depth(batch, gen)
            again = generate_depth(batch, gen)
        assert torch.equal(out[0], out[1])
        assert torch.equal(out, again)

    @pytest.mark.parametrize("shape", [(1, 3, 60, 64), (1, 3, 64, 60), (1, 1, 64, 64)])
    def test_rejects_bad_shapes(self, shape):
        gen = DepthGenerator(base=8)
        with pytest.raises(ValueError):
            generate_depth(torch.rand(*shape), gen)

    def test_finite_difference_on_parameters(self):
        # d(mean output)/d(theta) for sampled parameters vs central differences;
        # step 1e-5 keeps the secant on one side of the relu/pool kinks
        torch.manual_seed(3)
        gen = DepthGenerator(base=4).double()
        x = torch.rand(1, 3, 32, 32, dtype=torch.float64)
        out = generate_depth(x, gen).mean()
        out.backward()

        eps = 1e-5
        rng = np.random.default_rng(3)
        for name, param in gen.named_parameters():
            flat = param.detach().view(-1)
            idx = int(rng.integers(0, flat.numel()))
            analytic = float(param.grad.view(-1)[idx])
            with torch.no_grad():
                orig = float(flat[idx])
                flat[idx] = orig + eps
                f_plus = float(generate_depth(x, gen).mean())
                flat[idx] = orig - eps
                f_minus = float(generate_depth(x, gen).mean())
                flat[idx] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            assert abs(analytic - numeric) <= 1e-6 + 1e-3 * abs(numeric), \
                f"{name}[{idx}]: analytic {analytic:.3e} vs numeric {numeric:.3e}"


class TestPsLoss:
    def test_zero_at_identity(self):
        y = torch.rand(2, 1, 8, 8)
        assert float(ps_loss(y, y)) == 0.0

    def test_constant_offset(self):
        y = torch.full((2, 1, 8, 8), 0.3)
        assert float(ps_loss(y + 0.1, y)) == pytest.approx(0.1, abs=1e-7)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(11)
        a = rng.random((1, 1, 4, 4))
        b = rng.random((1, 1, 4, 4))
        total = 0.0
        for i in range(4):
            for j in range(4):
                total += abs(a[0, 0, i, j] - b[0, 0, i, j])
        expected = total / 16.0
        got = float(ps_loss(torch.from_numpy(a), torch.from_numpy(b)))
        assert got == pytest.approx(expected, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ps_loss(torch.rand(1, 1, 4, 4), torch.rand(1, 1, 4, 8))

    def test_gradient(self):
        torch.manual_seed(5)
        a0 = torch.rand(2, 1, 4, 4, dtype=torch.float64)
        b = torch.rand(2, 1, 4, 4, dtype=torch.float64)
        a = a0.clone().requires_grad_(True)
        ps_loss(a, b).backward()
        assert_grad_close(a.grad, numeric_grad(lambda t: ps_loss(t, b), a0))


class TestShallowFeatures:
    def test_spatial_dims(self):
        backbone = IdentityBackbone(DESK, identity_count=3)
        feats = shallow_features(torch.rand(2, 1, 64, 64), backbone, 3)
        assert [f.shape[-1] for f in feats] == [32, 16, 8]
        feats4 = shallow_features(torch.rand(2, 1, 64, 64), backbone, 4)
        assert feats4[3].shape[-1] == 4

    def test_branches_share_weights(self):
        backbone = IdentityBackbone(DESK, identity_count=3)
        assert backbone.classification_trunk is backbone.feature_trunk
        x = torch.rand(1, 1, 64, 64)
        with torch.no_grad():
            via_c = backbone.classification_trunk.taps(x, 3)
            via_e = backbone.feature_trunk.taps(x, 3)
        for a, b in zip(via_c, via_e):
            assert torch.equal(a, b)

    def test_zero_input_zero_maps(self):
        # convs carry no bias and norm offsets init to zero
        backbone = IdentityBackbone(DESK, identity_count=3)
        with torch.no_grad():
            feats = shallow_features(torch.zeros(1, 1, 64, 64), backbone, 3)
        for f in feats:
            assert float(f.abs().max()) == 0.0

    @pytest.mark.parametrize("n", [0, 5])
    def test_level_count_bounds(self, n):
        backbone = IdentityBackbone(DESK, identity_count=3)
        with pytest.raises(ValueError):
            shallow_features(torch.rand(1, 1, 64, 64), backbone, n)


class TestMfsLoss:
    def test_zero_at_identity(self):
        feats = [torch.rand(1, 4, 6, 6) for _ in range(3)]
        assert float(mfs_loss(feats, [f.clone() for f in feats])) == 0.0

    def test_single_level_collapses_to_mean_abs(self):
        a, b = torch.rand(2, 3, 5, 5), torch.rand(2, 3, 5, 5)
        assert float(mfs_loss([a], [b])) == pytest.approx(
            float((a - b).abs().mean()), abs=1e-7)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(13)
        gen_maps = [rng.random((1, 2, 3, 3)) for _ in range(3)]
        gt_maps = [rng.random((1, 2, 3, 3)) for _ in range(3)]
        level_means = []
        for a, b in zip(gen_maps, gt_maps):
            total, count = 0.0, 0
            for c in range(2):
                for i in range(3):
                    for j in range(3):
                        total += abs(a[0, c, i, j] - b[0, c, i, j])
                        count += 1
            level_means.append(total / count)
        expected = sum(level_means) / 3.0
        got = float(mfs_loss([torch.from_numpy(a) for a in gen_maps],
                             [torch.from_numpy(b) for b in gt_maps]))
        assert got == pytest.approx(expected, abs=1e-12)

    def test_mismatch_errors(self):
        a = torch.rand(1, 2, 3, 3)
        with pytest.raises(ValueError):
            mfs_loss([a], [a, a])
        with pytest.raises(ValueError):
            mfs_loss([a], [torch.rand(1, 2, 3, 4)])

    def test_gradients_reach_generator_and_shared_trunk(self):
        backbone = IdentityBackbone(DESK, identity_count=2)
        gen_depth = torch.rand(1, 1, 64, 64, requires_grad=True)
        gt_depth = torch.rand(1, 1, 64, 64)
        loss = mfs_loss(shallow_features(gen_depth, backbone, 2),
                        shallow_features(gt_depth, backbone, 2))
        loss.backward()
        assert gen_depth.grad is not None and gen_depth.grad.abs().sum() > 0
        stem_w = backbone.trunk.stem[0].weight
        # both branches contribute into the single shared storage
        assert stem_w.grad is not None and stem_w.grad.abs().sum() > 0

    def test_gradient(self):
        torch.manual_seed(7)
        a0 = torch.rand(2, 2, 2, 2, dtype=torch.float64)
        b = torch.rand(2, 2, 2, 2, dtype=torch.float64)
        c = torch.rand(2, 2, 2, 2, dtype=torch.float64)
        a = a0.clone().requires_grad_(True)
        mfs_loss([a, c], [b, c + 0.1]).backward()
        assert_grad_close(a.grad, numeric_grad(
            lambda t: mfs_loss([t, c], [b, c + 0.1]), a0))


class TestIdentityLoss:
    def test_single_class_is_zero(self):
        logits = torch.randn(3, 1)
        assert float(depth_identity_loss(logits, torch.zeros(3, dtype=torch.long))) == 0.0

    def test_uniform_logits_give_log_k(self):
        logits = torch.zeros(2, 4)
        labels = torch.tensor([0, 3])
        assert float(depth_identity_loss(logits, labels)) == pytest.approx(
            math.log(4.0), abs=1e-6)

    def test_matches_logsumexp_oracle(self):
        rng = np.random.default_rng(17)
        logits = rng.standard_normal((3, 5))
        labels = rng.integers(0, 5, size=3)
        per_sample = []
        for i in range(3):
            lse = math.log(sum(math.exp(v) for v in logits[i]))
            per_sample.append(lse - logits[i, labels[i]])
        expected = sum(per_sample) / 3.0
        got = float(depth_identity_loss(torch.from_numpy(logits),
                                       torch.from_numpy(labels)))
        assert got == pytest.approx(expected, abs=1e-9)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            depth_identity_loss(torch.randn(2, 3), torch.tensor([0, 3]))
        with pytest.raises(ValueError):
            depth_identity_loss(torch.randn(2, 3), torch.tensor([-1, 0]))

    def test_gradient(self):
        torch.manual_seed(9)
        logits0 = torch.randn(2, 5, dtype=torch.float64)
        labels = torch.tensor([1, 4])
        logits = logits0.clone().requires_grad_(True)
        depth_identity_loss(logits, labels).backward()
        assert_grad_close(logits.grad, numeric_grad(
            lambda t: depth_identity_loss(t, labels), logits0))


class TestDynamicWeights:
    def test_symmetry(self):
        assert dynamic_weights(1.0, 1.0, 1.0) == (pytest.approx(1 / 3), pytest.approx(1 / 3))

    def test_stated_arithmetic(self):
        assert dynamic_weights(2.0, 1.0, 1.0) == (pytest.approx(0.5), pytest.approx(0.25))

    def test_degenerate_fallback(self):
        assert dynamic_weights(0.0, 0.0, 0.0) == (pytest.approx(1 / 3), pytest.approx(1 / 3))

    def test_rejects_negative_and_nonfinite(self):
        with pytest.raises(ValueError):
            dynamic_weights(-1.0, 1.0, 1.0)
        with pytest.raises(ValueError):
            dynamic_weights(float("nan"), 1.0, 1.0)
        with pytest.raises(ValueError):
            dynamic_weights(1.0, float("inf"), 1.0)

    def test_accepts_tensors_detached(self):
        l1, l2 = dynamic_weights(torch.tensor(2.0, requires_grad=True),
                                 torch.tensor(1.0), 1.0)
        assert isinstance(l1, float) and isinstance(l2, float)
        assert (l1, l2) == (pytest.approx(0.5), pytest.approx(0.25))

    @given(st.floats(min_value=1e-3, max_value=1e3),
           st.floats(min_value=0, max_value=10),
           st.floats(min_value=0, max_value=10),
           st.floats(min_value=1e-6, max_value=10))
    @settings(max_examples=100, deadline=None)
    def test_scale_invariance_and_simplex(self, c, a, b, d):
        base = dynamic_weights(a, b, d)
        scaled = dynamic_weights(c * a, c * b, c * d)
        assert scaled[0] == pytest.approx(base[0], rel=1e-9, abs=1e-12)
        assert scaled[1] == pytest.approx(base[1], rel=1e-9, abs=1e-12)
        assert base[0] + base[1] <= 1.0 + 1e-12


class TestTotalLoss:
    def test_dis_only(self):
        br = depthgen_total_loss(0.0, 0.0, 0.7)
        assert br.l_total == pytest.approx(0.7)
        assert br.lambda1 + br.lambda2 <= 1.0

    def test_symmetric_case(self):
        assert depthgen_total_loss(1.0, 1.0, 1.0).l_total == pytest.approx(5 / 3)

    def test_stated_arithmetic(self):
        br = depthgen_total_loss(2.0, 1.0, 1.0)
        assert br.l_total == pytest.approx(2.25)
        assert (br.lambda1, br.lambda2) == (pytest.approx(0.5), pytest.approx(0.25))

    def test_breakdown_identity_holds(self):
        br = depthgen_total_loss(torch.tensor(0.4), torch.tensor(0.2), torch.tensor(1.1))
        recomputed = br.lambda1 * br.l_ps + br.lambda2 * br.l_mfs + br.l_dis
        assert float(br.l_total) == pytest.approx(float(recomputed), abs=1e-12)


class TestWeightSharingAndComposition:
    def _micro_batch(self):
        torch.manual_seed(21)
        rgb = torch.rand(2, 3, 32, 32)
        gt = torch.rand(2, 1, 32, 32)
        labels = torch.tensor([0, 1])
        return rgb, gt, labels

    def test_shared_trunk_after_optimizer_step(self):
        rgb, gt, labels = self._micro_batch()
        gen = DepthGenerator(base=4)
        backbone = IdentityBackbone(DESK, identity_count=2)
        opt = torch.optim.SGD(list(gen.parameters()) + list(backbone.parameters()),
                              lr=0.05, momentum=0.9)
        for _ in range(2):
            opt.zero_grad()
            gen_depth = generate_depth(rgb, gen)
            br = depthgen_total_loss(
                ps_loss(gen_depth, gt),
                mfs_loss(shallow_features(gen_depth, backbone, 2),
                         shallow_features(gt, backbone, 2)),
                depth_identity_loss(backbone.classify(gen_depth), labels))
            br.l_total.backward()
            opt.step()
        via_c = backbone.classification_trunk.stage1[0].conv1.weight
        via_e = backbone.feature_trunk.stage1[0].conv1.weight
        assert via_c is via_e
        assert via_c.detach().numpy().tobytes() == via_e.detach().numpy().tobytes()

    def test_total_gradient_is_weighted_sum_of_component_gradients(self):
        rgb, gt, labels = self._micro_batch()
        rgb, gt = rgb.double(), gt.double()

        def build():
            torch.manual_seed(33)
            return (DepthGenerator(base=4).double(),
                    IdentityBackbone(DESK, identity_count=2).double())

        def component_grads(which):
            gen, backbone = build()
            gen_depth = generate_depth(rgb, gen)
            l_ps = ps_loss(gen_depth, gt)
            l_mfs = mfs_loss(shallow_features(gen_depth, backbone, 2),
                             shallow_features(gt, backbone, 2))
            l_dis = depth_identity_loss(backbone.classify(gen_depth), labels)
            losses = {"ps": l_ps, "mfs": l_mfs, "dis": l_dis}
            lam1, lam2 = dynamic_weights(l_ps, l_mfs, l_dis)
            target = (depthgen_total_loss(l_ps, l_mfs, l_dis).l_total
                      if which == "total" else losses[which])
            grads = torch.autograd.grad(target, list(gen.parameters()),
                                        retain_graph=False, allow_unused=True)
            return [g if g is not None else torch.zeros(1) for g in grads], (lam1, lam2)

        g_total, (lam1, lam2) = component_grads("total")
        g_ps, _ = component_grads("ps")
        g_mfs, _ = component_grads("mfs")
        g_dis, _ = component_grads("dis")
        for gt_, gp, gm, gd in zip(g_total, g_ps, g_mfs, g_dis):
            combined = lam1 * gp + lam2 * gm + gd
            assert torch.allclose(gt_, combined, rtol=1e-6, atol=1e-10)
