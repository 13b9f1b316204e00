"""Token selection: rollout products, top-k determinism, mask algebra."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trireid.errors import ConfigError, ContractError, DimensionError
from trireid.selection import (
    SelectionConfig,
    attention_rollout,
    final_union,
    frequency_saliency,
    head_union,
    mask_to_bits,
    modality_union,
    patch_scores,
    select_frequency,
    select_spatial_per_head,
    select_tokens_batch,
    top_k_mask,
    write_mask_dump,
)
from util import random_stochastic


def stochastic_stack(rng, k, heads, t):
    return np.stack([
        np.stack([random_stochastic(rng, t) for _ in range(heads)]) for _ in range(k)
    ])


class TestRollout:
    def test_single_layer_is_class_row(self):
        rng = np.random.default_rng(0)
        stack = stochastic_stack(rng, 1, 3, 6)
        scores = attention_rollout(stack)
        np.testing.assert_array_equal(scores, stack[0][:, 0, 1:])

    def test_uniform_first_layer_washes_out(self):
        rng = np.random.default_rng(1)
        t = 5
        a1 = np.full((1, t, t), 1.0 / t)
        a2 = random_stochastic(rng, t)[None]
        product_rows = attention_rollout(np.stack([a1, a2]))
        np.testing.assert_allclose(product_rows, 1.0 / t, atol=1e-12)

    def test_row_zero_sums_to_one_before_drop(self):
        rng = np.random.default_rng(2)
        stack = stochastic_stack(rng, 4, 2, 7)
        product = stack[0]
        for layer in stack[1:]:
            product = layer @ product
        np.testing.assert_allclose(product[:, 0, :].sum(axis=-1), 1.0, atol=1e-9)

    def test_later_layer_applied_on_left(self):
        rng = np.random.default_rng(3)
        a1 = random_stochastic(rng, 4)[None]
        a2 = random_stochastic(rng, 4)[None]
        scores = attention_rollout(np.stack([a1, a2]))
        expected = (a2[0] @ a1[0])[0, 1:]
        np.testing.assert_allclose(scores[0], expected, atol=1e-15)

    def test_empty_stack_rejected(self):
        with pytest.raises(ContractError):
            attention_rollout(np.zeros((0, 2, 4, 4)))

    def test_layers_subset_uses_most_recent(self):
        rng = np.random.default_rng(4)
        stack = stochastic_stack(rng, 3, 1, 4)
        subset = attention_rollout(stack, layers=2)
        expected = attention_rollout(stack[1:])
        np.testing.assert_allclose(subset, expected, atol=1e-15)

    def test_batched_matches_per_sample(self):
        rng = np.random.default_rng(5)
        k, b, h, t = 3, 4, 2, 6
        stack = np.stack([stochastic_stack(rng, k, h, t) for _ in range(b)], axis=1)
        batched = attention_rollout(stack)
        for i in range(b):
            np.testing.assert_allclose(batched[i], attention_rollout(stack[:, i]), atol=1e-15)


class TestTopK:
    def test_sorted_example(self):
        mask = top_k_mask(np.array([0.1, 0.4, 0.3, 0.2]), 2)
        np.testing.assert_array_equal(mask, [False, True, True, False])

    def test_keep_all(self):
        assert top_k_mask(np.array([0.5, 0.1, 0.9]), 3).all()

    def test_tie_break_lowest_index(self):
        mask = top_k_mask(np.array([0.25, 0.25, 0.25, 0.25]), 2)
        np.testing.assert_array_equal(mask, [True, True, False, False])

    def test_out_of_range(self):
        with pytest.raises(ConfigError):
            top_k_mask(np.zeros(4), 0)
        with pytest.raises(ConfigError):
            top_k_mask(np.zeros(4), 5)

    def test_per_head_popcount(self):
        rng = np.random.default_rng(6)
        scores = rng.random((4, 10))
        masks = select_spatial_per_head(scores, 3)
        np.testing.assert_array_equal(masks.sum(axis=1), 3)


class TestUnions:
    def test_idempotent(self):
        m = np.array([True, False, True, False])
        np.testing.assert_array_equal(head_union(np.stack([m, m, m])), m)

    def test_disjoint_popcount(self):
        a = np.array([True, False, False, False])
        b = np.array([False, True, False, False])
        assert head_union(np.stack([a, b])).sum() == 2

    def test_set_union(self):
        a = np.zeros(5, dtype=bool); a[[1, 2]] = True
        b = np.zeros(5, dtype=bool); b[[2, 3]] = True
        got = head_union(np.stack([a, b]))
        expect = np.zeros(5, dtype=bool); expect[[1, 2, 3]] = True
        np.testing.assert_array_equal(got, expect)

    def test_modality_union_identity_and_sum(self):
        m = np.array([True, False, True])
        np.testing.assert_array_equal(modality_union(m, m, m), m)
        a = np.array([True, False, False])
        b = np.array([False, True, False])
        c = np.array([False, False, True])
        assert modality_union(a, b, c).sum() == 3

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            modality_union(np.zeros(3, bool), np.zeros(4, bool), np.zeros(3, bool))

    def test_final_union_absorption_and_complement(self):
        spatial = np.array([True, True, False, False])
        frequency = np.array([True, False, False, False])  # subset of spatial
        union, background = final_union(spatial, frequency)
        np.testing.assert_array_equal(union, spatial)
        assert not (union & background).any()
        assert (union | background).all()
        assert union.sum() + background.sum() == 4


class TestFrequencySelection:
    def test_constant_images_all_tie(self):
        imgs = [np.full((1, 16, 16), 0.5)] * 3
        sal = frequency_saliency(imgs, levels=2)
        np.testing.assert_allclose(sal, sal.flat[0])
        mask = select_frequency(sal, patch=8, keep=2)
        np.testing.assert_array_equal(mask, [True, True, False, False])

    def test_linearity_matches_pixel_sum(self):
        rng = np.random.default_rng(7)
        imgs = [rng.normal(size=(3, 16, 16)) for _ in range(3)]
        sal = frequency_saliency(imgs, levels=2)
        direct = np.abs(sum(img.mean(axis=0) for img in imgs))
        np.testing.assert_allclose(sal, direct, atol=1e-9)

    def test_single_bright_patch(self):
        imgs = [np.zeros((1, 16, 16)) for _ in range(3)]
        for img in imgs:
            img[0, 8:16, 0:8] = 1.0  # grid index 2 of a 2x2 patch grid
        sal = frequency_saliency(imgs, levels=2)
        mask = select_frequency(sal, patch=8, keep=1)
        np.testing.assert_array_equal(mask, [False, False, True, False])

    def test_patch_score_sort_oracle(self):
        sal = np.zeros((4, 4))
        sal[0:2, 0:2] = 4 / 4
        sal[0:2, 2:4] = 1 / 4
        sal[2:4, 0:2] = 3 / 4
        sal[2:4, 2:4] = 2 / 4
        np.testing.assert_allclose(patch_scores(sal, 2), [4, 1, 3, 2])
        mask = select_frequency(sal, patch=2, keep=2)
        np.testing.assert_array_equal(mask, [True, False, True, False])

    def test_scale_covariance(self):
        rng = np.random.default_rng(8)
        imgs = [rng.normal(size=(3, 16, 16)) for _ in range(3)]
        base = frequency_saliency(imgs, levels=2)
        scaled = frequency_saliency([2.0 * im for im in imgs], levels=2)
        np.testing.assert_allclose(scaled, 2.0 * base, rtol=1e-12)
        m1 = select_frequency(base, 8, 2)
        m2 = select_frequency(scaled, 8, 2)
        np.testing.assert_array_equal(m1, m2)

    def test_padding_path_for_odd_extents(self):
        rng = np.random.default_rng(9)
        imgs = [rng.normal(size=(1, 10, 6)) for _ in range(3)]
        sal = frequency_saliency(imgs, levels=3)
        assert sal.shape == (10, 6)
        direct = np.abs(sum(img.mean(axis=0) for img in imgs))
        np.testing.assert_allclose(sal, direct, atol=1e-9)


class TestBatchSelection:
    def _inputs(self, rng, b=3, heads=2, k=2, hw=(16, 16), patch=8):
        t = (hw[0] // patch) * (hw[1] // patch) + 1
        stacks = {
            m: np.stack([stochastic_stack(rng, k, heads, t) for _ in range(b)], axis=1)
            for m in ("rgb", "nir", "tir")
        }
        imgs = {m: rng.normal(size=(b, 3, *hw)) for m in ("rgb", "nir", "tir")}
        return stacks, imgs

    def test_shapes_and_bounds(self):
        rng = np.random.default_rng(10)
        stacks, imgs = self._inputs(rng)
        cfg = SelectionConfig(spatial_keep=1, freq_keep=2, levels=2)
        masks = select_tokens_batch(stacks, imgs, patch=8, cfg=cfg)
        n_p = 4
        assert masks.union.shape == (3, n_p)
        counts = masks.reserved_counts
        assert (counts >= max(cfg.spatial_keep, cfg.freq_keep)).all()
        cap = min(n_p, 3 * cfg.spatial_keep * 2 + cfg.freq_keep)
        assert (counts <= cap).all()
        np.testing.assert_array_equal(masks.union, masks.spatial | masks.frequency)
        np.testing.assert_array_equal(masks.background, ~masks.union)

    def test_determinism(self):
        rng = np.random.default_rng(11)
        stacks, imgs = self._inputs(rng)
        cfg = SelectionConfig(spatial_keep=1, freq_keep=1, levels=2)
        a = select_tokens_batch(stacks, imgs, 8, cfg)
        b = select_tokens_batch(stacks, imgs, 8, cfg)
        np.testing.assert_array_equal(a.union, b.union)

    def test_monotone_in_keep_counts(self):
        rng = np.random.default_rng(12)
        stacks, imgs = self._inputs(rng)
        small = select_tokens_batch(stacks, imgs, 8, SelectionConfig(1, 1, 2))
        large = select_tokens_batch(stacks, imgs, 8, SelectionConfig(2, 3, 2))
        assert (large.union | small.union == large.union).all()


@settings(max_examples=80, deadline=None)
@given(
    n=st.integers(min_value=4, max_value=24),
    s=st.integers(min_value=1, max_value=4),
    ds=st.integers(min_value=0, max_value=3),
    seed=st.integers(min_value=0, max_value=2**31 - 1),
)
def test_top_k_nesting_property(n, s, ds, seed):
    rng = np.random.default_rng(seed)
    scores = rng.random(n)
    small = top_k_mask(scores, min(s, n))
    large = top_k_mask(scores, min(s + ds, n))
    assert (small | large == large).all()  # small is a subset of large


def test_mask_dump_format(tmp_path):
    masks_s = np.array([[True, False, True]])
    masks_f = np.array([[False, True, False]])
    union, background = final_union(masks_s[0], masks_f[0])
    from trireid.selection import SelectionMasks
    bundle = SelectionMasks(masks_s, masks_f, union[None], background[None])
    out = tmp_path / "masks.txt"
    write_mask_dump(out, ["id007_s001"], bundle)
    assert out.read_text() == "id007_s001 101 010 111\n"
    assert mask_to_bits(np.array([True, False])) == "10"
