"""Sampling pipeline and contrastive losses against scalar loop oracles."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from harmonize_lab.contrastive import (
    ContrastiveConfig,
    PatchEmbedder,
    build_sampling_map,
    contrastive_pair_loss,
    crop_patches,
    embed_patches,
    harmonization_contrastive_loss,
    moco_infonce,
    region_query,
    sample_patch_locations,
)
from harmonize_lab.errors import (
    ConfigError,
    DegenerateQueryError,
    EmptyRegionError,
    NumericError,
    ShapeError,
)

CFG = ContrastiveConfig()
TOY = ContrastiveConfig(K=16, patch_size=4, downsample_factor=2, embed_dim=32, hidden_dim=32)


def _unit(rng, d):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def _embed_with_dots(dots, dim=8):
    """Unit query plus unit vectors realizing the requested dot products."""
    q = np.zeros(dim)
    q[0] = 1.0
    vecs = []
    for i, d in enumerate(dots):
        v = np.zeros(dim)
        v[0] = d
        v[1 + i] = math.sqrt(max(0.0, 1.0 - d * d))
        vecs.append(v)
    return torch.from_numpy(q), torch.from_numpy(np.stack(vecs))


class TestConfig:
    def test_defaults(self):
        assert CFG.K == 256 and CFG.tau == 0.07 and CFG.patch_dim == 192

    @pytest.mark.parametrize("bad", [dict(K=0), dict(tau=0.0), dict(tau=-1.0), dict(patch_size=0)])
    def test_invalid_rejected(self, bad):
        with pytest.raises(ConfigError):
            ContrastiveConfig(**bad)


class TestSamplingMap:
    def test_full_scale_map_size(self):
        image, mask = torch.rand(3, 256, 256), torch.ones(1, 256, 256)
        smap = build_sampling_map(image, mask, CFG)
        assert smap.map.shape == (3, 64, 64)
        assert smap.region_mask.shape == (1, 64, 64)

    def test_zero_mask_gives_zero_map(self):
        smap = build_sampling_map(torch.rand(3, 16, 16), torch.zeros(1, 16, 16), TOY)
        assert torch.equal(smap.map, torch.zeros(3, 8, 8))
        assert torch.equal(smap.region_mask, torch.zeros(1, 8, 8))

    def test_constant_image_full_mask(self):
        image = torch.full((3, 16, 16), 0.625)
        smap = build_sampling_map(image, torch.ones(1, 16, 16), TOY)
        assert torch.allclose(smap.map, torch.full((3, 8, 8), 0.625))

    def test_indivisible_size_rejected(self):
        with pytest.raises(ValueError):
            build_sampling_map(torch.rand(3, 18, 18), torch.ones(1, 18, 18), CFG)


class TestPatchLocations:
    def test_full_mask_all_in_bounds(self):
        smap = build_sampling_map(torch.rand(3, 256, 256), torch.ones(1, 256, 256), CFG)
        locs = sample_patch_locations(smap, CFG, np.random.default_rng(0))
        assert locs.shape == (256, 2)
        assert (locs[:, 0] <= 64 - 8).all() and (locs[:, 1] <= 64 - 8).all()
        assert (locs >= 0).all()

    def test_single_active_pixel_replacement(self):
        cfg = ContrastiveConfig(K=4, patch_size=4, downsample_factor=1)
        mask = torch.zeros(1, 16, 16)
        mask[0, 15, 15] = 1.0
        smap = build_sampling_map(torch.rand(3, 16, 16), mask, cfg)
        locs = sample_patch_locations(smap, cfg, np.random.default_rng(0))
        assert locs.shape == (4, 2)
        assert (locs == (12, 12)).all()  # clamped so the window fits

    def test_seed_determinism(self):
        smap = build_sampling_map(torch.rand(3, 64, 64), torch.ones(1, 64, 64), TOY)
        a = sample_patch_locations(smap, TOY, np.random.default_rng(7))
        b = sample_patch_locations(smap, TOY, np.random.default_rng(7))
        assert (a == b).all()

    def test_empty_region_raises(self):
        smap = build_sampling_map(torch.rand(3, 16, 16), torch.zeros(1, 16, 16), TOY)
        with pytest.raises(EmptyRegionError):
            sample_patch_locations(smap, TOY, np.random.default_rng(0))

    def test_distinct_when_enough_pixels(self):
        cfg = ContrastiveConfig(K=32, patch_size=2, downsample_factor=1)
        smap = build_sampling_map(torch.rand(3, 16, 16), torch.ones(1, 16, 16), cfg)
        locs = sample_patch_locations(smap, cfg, np.random.default_rng(1))
        ids = {(int(r), int(c)) for r, c in locs}
        # clamping can merge a few border draws, but most stay distinct
        assert len(ids) > 16


class TestCropPatches:
    def test_corner_patch(self):
        smap = build_sampling_map(torch.rand(3, 64, 64), torch.ones(1, 64, 64), CFG)
        patch = crop_patches(smap, np.array([[0, 0]]), 8)
        assert torch.equal(patch[0], smap.map[:, :8, :8])

    def test_constant_map_constant_patches(self):
        smap = build_sampling_map(torch.full((3, 16, 16), 0.5), torch.ones(1, 16, 16), TOY)
        patches = crop_patches(smap, np.array([[0, 0], [2, 2], [4, 4]]), 4)
        assert torch.allclose(patches, torch.full((3, 3, 4, 4), 0.5))

    def test_window_copy_oracle(self):
        rng = np.random.default_rng(2)
        smap = build_sampling_map(torch.from_numpy(rng.random((3, 16, 16)).astype(np.float32)),
                                  torch.ones(1, 16, 16), TOY)
        locs = np.array([[0, 1], [3, 2], [4, 4]])
        patches = crop_patches(smap, locs, 4)
        for k, (r, c) in enumerate(locs):
            for ch in range(3):
                for i in range(4):
                    for j in range(4):
                        assert float(patches[k, ch, i, j]) == float(smap.map[ch, r + i, c + j])


class TestEmbedPatches:
    def test_unit_norms(self):
        torch.manual_seed(0)
        head = PatchEmbedder(TOY)
        patches = torch.rand(16, 3, 4, 4)
        emb = embed_patches(head, patches)
        assert emb.vectors.shape == (16, 32)
        assert float((emb.vectors.detach().norm(dim=1) - 1).abs().max()) < 1e-5

    def test_identical_patches_identical_embeddings(self):
        torch.manual_seed(0)
        head = PatchEmbedder(TOY)
        patch = torch.rand(1, 3, 4, 4)
        emb = head(patch.repeat(4, 1, 1, 1))
        assert torch.equal(emb[0], emb[3])

    def test_toy_head_matrix_oracle(self):
        cfg = ContrastiveConfig(K=1, patch_size=1, downsample_factor=1, embed_dim=2, hidden_dim=2)
        head = PatchEmbedder(cfg).double()
        rng = np.random.default_rng(3)
        with torch.no_grad():
            for p in head.parameters():
                p.copy_(torch.from_numpy(rng.uniform(-1, 1, size=p.shape)))
        patch = torch.from_numpy(rng.random((1, 3, 1, 1)))
        out = head(patch).detach().numpy()[0]

        w1, b1 = head.mlp[0].weight.detach().numpy(), head.mlp[0].bias.detach().numpy()
        w2, b2 = head.mlp[2].weight.detach().numpy(), head.mlp[2].bias.detach().numpy()
        hidden = np.maximum(w1 @ patch.numpy().reshape(3) + b1, 0.0)
        raw = w2 @ hidden + b2
        np.testing.assert_allclose(out, raw / np.linalg.norm(raw), atol=1e-12)

    def test_wrong_patch_dim_raises(self):
        head = PatchEmbedder(TOY)
        with pytest.raises(ShapeError):
            head(torch.rand(4, 3, 8, 8))


class TestRegionQuery:
    def test_identical_embeddings(self):
        e = torch.tensor([0.6, 0.8], dtype=torch.float64)
        q = region_query(e.repeat(5, 1))
        assert torch.allclose(q, e, atol=1e-12)

    def test_antipodal_degenerate(self):
        vecs = torch.tensor([[1.0, 0.0], [-1.0, 0.0]])
        with pytest.raises(DegenerateQueryError):
            region_query(vecs)

    def test_mean_normalize_oracle(self):
        rng = np.random.default_rng(4)
        vecs = torch.from_numpy(np.stack([_unit(rng, 6) for _ in range(4)]))
        q = region_query(vecs).numpy()
        mean = vecs.numpy().mean(axis=0)
        np.testing.assert_allclose(q, mean / np.linalg.norm(mean), atol=1e-12)


class TestPairLoss:
    def test_uniform_logits_closed_form(self):
        q, pos = _embed_with_dots([0.0] * 256, dim=260)
        _, neg = _embed_with_dots([0.0] * 256, dim=260)
        loss = float(contrastive_pair_loss(q, q, pos, neg, 1.0))
        assert loss == pytest.approx(math.log(257.0), abs=1e-12)

    def test_saturated_positive(self):
        dim = 260
        q = torch.zeros(dim, dtype=torch.float64)
        q[0] = 1.0
        pos = q.repeat(256, 1)  # dot 1 with q
        neg = (-q).repeat(256, 1)  # dot -1 with q
        loss = float(contrastive_pair_loss(q, q, pos, neg, 0.07))
        assert 0.0 < loss < 1e-6

    def test_scalar_oracle_k2(self):
        q_bg, pos = _embed_with_dots([0.5, 0.2])
        q_fg, neg = _embed_with_dots([0.1, -0.3])
        loss = float(contrastive_pair_loss(q_bg, q_fg, pos, neg, 1.0))
        neg_sum = math.exp(0.1) + math.exp(-0.3)
        expected = -0.5 * (
            math.log(math.exp(0.5) / (math.exp(0.5) + neg_sum))
            + math.log(math.exp(0.2) / (math.exp(0.2) + neg_sum))
        )
        assert loss == pytest.approx(expected, rel=1e-12)

    def test_monotonic_in_positive_dot(self):
        q_bg, pos = _embed_with_dots([0.5, 0.2])
        q_fg, neg = _embed_with_dots([0.1, -0.3])
        base = float(contrastive_pair_loss(q_bg, q_fg, pos, neg, 1.0))
        _, pos_up = _embed_with_dots([0.6, 0.2])
        assert float(contrastive_pair_loss(q_bg, q_fg, pos_up, neg, 1.0)) < base
        _, neg_up = _embed_with_dots([0.2, -0.3])
        assert float(contrastive_pair_loss(q_bg, q_fg, pos, neg_up, 1.0)) > base

    def test_temperature_limit_uniformizes(self):
        rng = np.random.default_rng(5)
        q_bg = torch.from_numpy(_unit(rng, 8))
        q_fg = torch.from_numpy(_unit(rng, 8))
        pos = torch.from_numpy(np.stack([_unit(rng, 8) for _ in range(6)]))
        neg = torch.from_numpy(np.stack([_unit(rng, 8) for _ in range(6)]))
        loss = float(contrastive_pair_loss(q_bg, q_fg, pos, neg, 1e4))
        assert abs(loss - math.log(7.0)) < 1e-3

    def test_extreme_logits_stay_finite(self):
        q, pos = _embed_with_dots([1.0, 1.0])
        _, neg = _embed_with_dots([-1.0, -1.0])
        for tau in (0.07, 0.01):
            assert math.isfinite(float(contrastive_pair_loss(q, q, pos, neg, tau)))
            assert math.isfinite(float(contrastive_pair_loss(q, q, neg, pos, tau)))

    def test_positive_lower_bound(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            k = int(rng.integers(1, 8))
            q_bg, pos = _embed_with_dots(rng.uniform(-1, 1, k))
            q_fg, neg = _embed_with_dots(rng.uniform(-1, 1, k))
            loss = float(contrastive_pair_loss(q_bg, q_fg, pos, neg, 0.5))
            assert loss > 0.0

    def test_rejects_bad_temperature_and_nonfinite(self):
        q, pos = _embed_with_dots([0.1])
        with pytest.raises(ConfigError):
            contrastive_pair_loss(q, q, pos, pos, -1.0)
        bad = pos.clone()
        bad[0, 0] = float("nan")
        with pytest.raises(NumericError):
            contrastive_pair_loss(q, q, bad, pos, 1.0)

    def test_gradient_matches_central_differences(self):
        from harmonize_lab.selftest import max_relative_grad_error

        rng = np.random.default_rng(7)
        q_bg = torch.from_numpy(_unit(rng, 5))
        q_fg = torch.from_numpy(_unit(rng, 5))
        pos = torch.from_numpy(np.stack([_unit(rng, 5) for _ in range(4)]))
        neg = torch.from_numpy(np.stack([_unit(rng, 5) for _ in range(4)]))
        for target, fn in [
            (neg, lambda x: contrastive_pair_loss(q_bg, q_fg, pos, x, 0.3)),
            (pos, lambda x: contrastive_pair_loss(q_bg, q_fg, x, neg, 0.3)),
            (q_bg, lambda x: contrastive_pair_loss(x, q_fg, pos, neg, 0.3)),
            (q_fg, lambda x: contrastive_pair_loss(q_bg, x, pos, neg, 0.3)),
        ]:
            assert max_relative_grad_error(fn, target) < 1e-4


class TestMocoLoss:
    def test_equal_dots_closed_form(self):
        for k in (1, 4, 16):
            q, negs = _embed_with_dots([0.3] * k, dim=k + 4)
            k_pos = negs[0]
            assert float(moco_infonce(q, k_pos, negs, 0.07)) == pytest.approx(
                math.log(k + 1.0), abs=1e-12
            )

    def test_no_negatives_zero_loss(self):
        q = torch.tensor([1.0, 0.0], dtype=torch.float64)
        assert float(moco_infonce(q, q, torch.zeros(0, 2, dtype=torch.float64), 0.07)) == 0.0

    def test_scalar_oracle(self):
        q, negs = _embed_with_dots([0.1, -0.3])
        _, pos = _embed_with_dots([0.5])
        loss = float(moco_infonce(q, pos[0], negs, 1.0))
        den = math.exp(0.5) + math.exp(0.1) + math.exp(-0.3)
        assert loss == pytest.approx(-math.log(math.exp(0.5) / den), rel=1e-12)

    def test_denominator_composition_differential(self):
        """With a shared query the two losses agree; with distinct region
        queries only the pair loss keeps its positive/negative split."""
        q, pos = _embed_with_dots([0.4])
        _, neg = _embed_with_dots([-0.2])
        ours = float(contrastive_pair_loss(q, q, pos, neg, 1.0))
        moco = float(moco_infonce(q, pos[0], neg, 1.0))
        assert ours == pytest.approx(moco, rel=1e-12)

        q_fg, _ = _embed_with_dots([0.0])
        q_fg = torch.roll(q_fg, 1)  # orthogonal foreground query
        ours_split = float(contrastive_pair_loss(q, q_fg, pos, neg, 1.0))
        neg_dot = float(neg[0] @ q_fg)
        expected = -math.log(math.exp(0.4) / (math.exp(0.4) + math.exp(neg_dot)))
        assert ours_split == pytest.approx(expected, rel=1e-12)
        assert ours_split != pytest.approx(moco, rel=1e-6)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), k=st.integers(1, 8))
    def test_loop_oracle_property(self, seed, k):
        rng = np.random.default_rng(seed)
        q = torch.from_numpy(_unit(rng, 4))
        k_pos = torch.from_numpy(_unit(rng, 4))
        negs = torch.from_numpy(np.stack([_unit(rng, 4) for _ in range(k)]))
        ours = float(moco_infonce(q, k_pos, negs, 0.5))
        num = math.exp(float(q @ k_pos) / 0.5)
        den = num + sum(math.exp(float(q @ n) / 0.5) for n in negs)
        assert ours == pytest.approx(-math.log(num / den), rel=1e-10)


class TestHarmonizationLoss:
    def _batch(self, rng, b=2, size=16):
        h = torch.from_numpy(rng.random((b, 3, size, size)).astype(np.float32))
        gt = torch.from_numpy(rng.random((b, 3, size, size)).astype(np.float32))
        mask = torch.zeros(b, 1, size, size)
        mask[:, :, 4:12, 4:12] = 1.0
        return h, gt, mask

    def test_empty_batch_rejected(self):
        head = PatchEmbedder(TOY)
        with pytest.raises(ValueError):
            harmonization_contrastive_loss(
                torch.zeros(0, 3, 16, 16), torch.zeros(0, 3, 16, 16),
                torch.zeros(0, 1, 16, 16), head, TOY, np.random.default_rng(0)
            )

    def test_all_background_batch_skips_everything(self):
        torch.manual_seed(0)
        cfg = ContrastiveConfig(K=4, patch_size=2, downsample_factor=2, embed_dim=8, hidden_dim=8)
        head = PatchEmbedder(cfg)
        rng = np.random.default_rng(1)
        h = torch.rand(2, 3, 16, 16)
        gt = torch.rand(2, 3, 16, 16)
        loss, skipped = harmonization_contrastive_loss(
            h, gt, torch.zeros(2, 1, 16, 16), head, cfg, rng
        )
        assert float(loss) == 0.0 and skipped == 2

    def test_seeded_determinism_bitwise(self):
        torch.manual_seed(2)
        cfg = ContrastiveConfig(K=8, patch_size=2, downsample_factor=2, embed_dim=8, hidden_dim=8)
        head = PatchEmbedder(cfg).double()
        rng = np.random.default_rng(3)
        h, gt, mask = self._batch(rng)
        h, gt = h.double(), gt.double()
        a, _ = harmonization_contrastive_loss(h, gt, mask.double(), head, cfg, np.random.default_rng(42))
        b, _ = harmonization_contrastive_loss(h, gt, mask.double(), head, cfg, np.random.default_rng(42))
        assert float(a) == float(b)

    def test_end_to_end_scalar_oracle(self):
        """Recompute the pipeline loss from the realized patch sets."""
        torch.manual_seed(4)
        cfg = ContrastiveConfig(K=4, patch_size=2, downsample_factor=2, embed_dim=8, hidden_dim=8)
        head = PatchEmbedder(cfg).double()
        rng = np.random.default_rng(5)
        h, gt, mask = self._batch(rng, b=2)
        h, gt, mask = h.double(), gt.double(), mask.double()
        loss, skipped = harmonization_contrastive_loss(
            h, gt, mask, head, cfg, np.random.default_rng(99)
        )
        assert skipped == 0

        replay = np.random.default_rng(99)
        per_sample = []
        for b in range(2):
            s_fg = build_sampling_map(h[b], mask[b], cfg)
            s_bg = build_sampling_map(gt[b], 1.0 - mask[b], cfg)
            neg_locs = sample_patch_locations(s_fg, cfg, replay)
            pos_locs = sample_patch_locations(s_bg, cfg, replay)
            with torch.no_grad():
                negs = head(crop_patches(s_fg, neg_locs, 2)).numpy()
                poss = head(crop_patches(s_bg, pos_locs, 2)).numpy()
            v_fg = negs.mean(axis=0)
            v_fg = v_fg / np.linalg.norm(v_fg)
            v_bg = poss.mean(axis=0)
            v_bg = v_bg / np.linalg.norm(v_bg)
            neg_sum = sum(math.exp(float(v_fg @ n) / cfg.tau) for n in negs)
            total = 0.0
            for p in poss:
                pe = math.exp(float(v_bg @ p) / cfg.tau)
                total += -math.log(pe / (pe + neg_sum))
            per_sample.append(total / cfg.K)
        assert float(loss) == pytest.approx(float(np.mean(per_sample)), rel=1e-9)

    def test_gradients_reach_generator_and_head(self):
        torch.manual_seed(6)
        cfg = ContrastiveConfig(K=4, patch_size=2, downsample_factor=2, embed_dim=8, hidden_dim=8)
        head = PatchEmbedder(cfg)
        rng = np.random.default_rng(7)
        h, gt, mask = self._batch(rng)
        h = h.requires_grad_(True)  # stands in for the generator output
        loss, _ = harmonization_contrastive_loss(h, gt, mask, head, cfg, np.random.default_rng(0))
        loss.backward()
        assert h.grad is not None and float(h.grad.abs().sum()) > 0
        assert float(head.mlp[0].weight.grad.abs().sum()) > 0
        # the ground-truth branch is plain data and requires no gradient
        assert not gt.requires_grad
