import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from defend.patching import (
    SOBEL_MAX_MAGNITUDE, Patch, PatchGridError, SamplerConfig, adaptive_sample, grid_neighbors,
    num_patches, patchify, reassemble, saliency_score, sample_image, score_image,
)


@pytest.mark.parametrize("h,w,s,n", [(224, 224, 16, 196), (32, 32, 16, 4), (64, 64, 8, 64),
                                     (48, 32, 8, 24), (16, 16, 4, 16)])
def test_patch_counts(h, w, s, n):
    assert num_patches(h, w, s) == n
    assert len(patchify(np.zeros((h, w, 3)), s)) == n


def test_non_divisible_image_is_rejected():
    with pytest.raises(PatchGridError):
        patchify(np.zeros((30, 30, 3)), 16)


def test_patchify_reassemble_roundtrip(rng):
    img = rng.random((24, 16, 3))
    patches = patchify(img, 8)
    assert patches[4].grid_index == (2, 0) and patches[4].flat_index == 4
    np.testing.assert_array_equal(reassemble(patches, 24, 16), img)


def sobel_loop_oracle(gray):
    """Direct 3x3 convolution with edge replication, one pixel at a time."""
    kx = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]
    ky = [[-1, -2, -1], [0, 0, 0], [1, 2, 1]]
    h, w = gray.shape
    mags, gys = [], []
    for r in range(h):
        for c in range(w):
            gx = gy = 0.0
            for i in range(3):
                for j in range(3):
                    v = gray[min(max(r + i - 1, 0), h - 1), min(max(c + j - 1, 0), w - 1)]
                    gx += kx[i][j] * v
                    gy += ky[i][j] * v
            mags.append(math.hypot(gx, gy))
            gys.append(abs(gy))
    return np.mean(mags) / (4 * math.sqrt(2)), np.array(gys)


def test_two_band_patch_edge_matches_sobel_oracle():
    pix = np.zeros((16, 16, 3))
    pix[:, 8:] = 1.0
    score = saliency_score(Patch(pix, (0, 0), 0), [], SamplerConfig())
    edge, _ = sobel_loop_oracle(pix @ np.array([0.299, 0.587, 0.114]))
    assert score.edge == pytest.approx(edge, abs=1e-12)
    # two columns either side of the step respond with |G| = 4 out of 4*sqrt(2)
    assert edge == pytest.approx(2 / 16 * 4 / SOBEL_MAX_MAGNITUDE)
    assert score.text == 0.0          # vertical edge only: no horizontal strokes
    assert score.contrast == 0.0      # no neighbours


def test_text_proxy_matches_oracle(rng):
    pix = rng.random((8, 8, 3))
    gray = pix @ np.array([0.299, 0.587, 0.114])
    _, gys = sobel_loop_oracle(gray)
    expected = np.mean(gys > 0.5 * gys.max())
    assert saliency_score(Patch(pix, (0, 0), 0), [], SamplerConfig()).text == pytest.approx(expected)


def test_constant_patch_scores_zero():
    p = Patch(np.full((8, 8, 3), 0.3), (1, 1), 5)
    n = [Patch(np.full((8, 8, 3), 0.3), (0, 0), 0)]
    s = saliency_score(p, n, SamplerConfig())
    assert (s.edge, s.text, s.contrast, s.total) == (0.0, 0.0, 0.0, 0.0)


def test_black_patch_among_white_neighbours_has_full_contrast():
    black = Patch(np.zeros((8, 8, 3)), (1, 1), 4)
    whites = [Patch(np.ones((8, 8, 3)), (0, i), i) for i in range(3)]
    assert saliency_score(black, whites, SamplerConfig()).contrast == pytest.approx(1.0)


def test_total_is_weighted_sum(rng):
    cfg = SamplerConfig(alpha=0.5, beta=0.3, gamma=0.2)
    s = saliency_score(Patch(rng.random((8, 8, 3)), (0, 0), 0), [Patch(rng.random((8, 8, 3)), (0, 1), 1)], cfg)
    assert s.total == pytest.approx(0.5 * s.edge + 0.3 * s.text + 0.2 * s.contrast)
    for v in (s.edge, s.text, s.contrast):
        assert 0.0 <= v <= 1.0


def test_vectorised_scores_agree_with_per_patch_scores(rng):
    img = rng.random((24, 32, 3))
    cfg = SamplerConfig()
    vec = score_image(img, 8, cfg)
    patches = patchify(img, 8)
    for p in patches:
        nb = [patches[i] for i in grid_neighbors(p.flat_index, 3, 4)]
        s = saliency_score(p, nb, cfg)
        np.testing.assert_allclose(vec[p.flat_index], [s.edge, s.text, s.contrast, s.total], atol=1e-12)


def test_grid_neighbors():
    assert grid_neighbors(0, 3, 3) == [1, 3, 4]
    assert len(grid_neighbors(4, 3, 3)) == 8


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(alpha=0.5, beta=0.5, gamma=0.5)
    with pytest.raises(ValueError):
        SamplerConfig(lambda_threshold=1.5)


def test_threshold_is_strict():
    cfg = SamplerConfig(min_retention_fraction=1e-9)
    assert adaptive_sample([0.5, 0.2, 0.4], cfg).tolist() == [0, 2]
    assert adaptive_sample([0.3, 0.31], cfg).tolist() == [1]


def test_lambda_zero_keeps_all_positive_scores():
    cfg = SamplerConfig(lambda_threshold=0.0)
    assert adaptive_sample([0.1, 0.01, 0.7], cfg).tolist() == [0, 1, 2]


def test_fallback_keeps_lowest_indices_on_ties():
    kept = adaptive_sample(np.zeros(196), SamplerConfig())
    assert len(kept) == math.ceil(0.25 * 196) == 49
    assert kept.tolist() == list(range(49))


def test_fallback_prefers_top_scores():
    totals = np.zeros(8)
    totals[[6, 3]] = [0.2, 0.1]
    assert adaptive_sample(totals, SamplerConfig()).tolist() == [3, 6]


def test_at_least_one_patch_survives():
    assert len(adaptive_sample([0.0], SamplerConfig(min_retention_fraction=0.01))) == 1


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=4, max_size=64), st.floats(0, 1), st.floats(0, 1))
def test_lambda_monotonicity(scores, l1, l2):
    lo, hi = sorted((l1, l2))
    tiny = 1e-9
    a = set(adaptive_sample(scores, SamplerConfig(lambda_threshold=lo, min_retention_fraction=tiny)).tolist())
    b = set(adaptive_sample(scores, SamplerConfig(lambda_threshold=hi, min_retention_fraction=tiny)).tolist())
    if max(scores) > hi:  # the one-patch floor is not in play
        assert b <= a


def test_sampling_is_deterministic(rng):
    img = rng.random((32, 32, 3))
    a, ta = sample_image(img, 8, SamplerConfig())
    b, tb = sample_image(img.copy(), 8, SamplerConfig())
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(ta, tb)
