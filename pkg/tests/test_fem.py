import pytest
import torch

from defend.encoders import FeatureBundle, tiny_config
from defend.fem import FeatureEnhancement, FemConfig
from defend.objectives import contrastive_loss, patch_coherence_loss


def make_bundle(cfg, b=2, n_t=3, n_p=4):
    return FeatureBundle(
        f_G=torch.randn(b, 1, cfg.model_dim),
        f_T=torch.randn(b, n_t, cfg.model_dim),
        text_valid=torch.ones(b, n_t, dtype=torch.bool),
        f_P=torch.randn(b, n_p, cfg.model_dim),
        patch_valid=torch.ones(b, n_p, dtype=torch.bool),
    )


def test_config_validation():
    with pytest.raises(ValueError):
        FemConfig(text_attends_to="patch")


def test_single_row_self_attention_is_value_projection(float64):
    torch.manual_seed(0)
    cfg = tiny_config()
    fem = FeatureEnhancement(cfg.attention)
    x = torch.randn(1, cfg.model_dim)
    attn = fem.self_G.attn
    torch.testing.assert_close(attn(x, x), attn.out_proj(attn.v_proj(x)), rtol=0, atol=1e-12)


def test_single_visual_key_gives_every_text_row_the_same_value(float64):
    torch.manual_seed(0)
    cfg = tiny_config()
    fem = FeatureEnhancement(cfg.attention, FemConfig(residual=False))
    h_T, h_G = torch.randn(4, cfg.model_dim), torch.randn(1, cfg.model_dim)
    out = fem.cross_TV(h_T, h_G)
    torch.testing.assert_close(out, out[:1].expand_as(out), rtol=0, atol=1e-12)


def test_single_text_row_gives_every_visual_row_the_same_value(float64):
    torch.manual_seed(0)
    cfg = tiny_config()
    fem = FeatureEnhancement(cfg.attention, FemConfig(residual=False))
    out = fem.cross_VT(torch.randn(5, cfg.model_dim), torch.randn(1, cfg.model_dim))
    torch.testing.assert_close(out, out[:1].expand_as(out), rtol=0, atol=1e-12)


def test_forward_fills_enhanced_fields_without_touching_raw(float64):
    torch.manual_seed(1)
    cfg = tiny_config()
    fem = FeatureEnhancement(cfg.attention)
    bundle = make_bundle(cfg)
    raw = [t.clone() for t in (bundle.f_G, bundle.f_T, bundle.f_P)]
    out = fem(bundle)
    assert out.f_G_star.shape == (2, 1, cfg.model_dim)
    assert out.f_T_star.shape == (2, 3, cfg.model_dim)
    assert out.f_P_star.shape == (2, 4, cfg.model_dim)
    for before, after in zip(raw, (out.f_G, out.f_T, out.f_P)):
        assert torch.equal(before, after)
    assert bundle.f_G_star is None  # the input bundle is not mutated


def test_missing_field_is_an_error():
    cfg = tiny_config()
    fem = FeatureEnhancement(cfg.attention)
    with pytest.raises(ValueError):
        fem(FeatureBundle(f_G=None, f_T=torch.randn(1, 2, cfg.model_dim), text_valid=None))


def test_zero_weights_without_residuals_give_zero_features(float64):
    cfg = tiny_config()
    fem = FeatureEnhancement(cfg.attention, FemConfig(residual=False))
    with torch.no_grad():
        for p in fem.parameters():
            p.zero_()
    out = fem(make_bundle(cfg))
    for t in (out.f_G_star, out.f_T_star, out.f_P_star):
        assert torch.count_nonzero(t) == 0


def test_text_enhancement_ignores_patch_sampling(float64):
    torch.manual_seed(2)
    cfg = tiny_config()
    fem = FeatureEnhancement(cfg.attention)
    a = make_bundle(cfg)
    b = FeatureBundle(f_G=a.f_G, f_T=a.f_T, text_valid=a.text_valid,
                      f_P=torch.randn(2, 7, cfg.model_dim), patch_valid=torch.ones(2, 7, dtype=torch.bool))
    torch.testing.assert_close(fem(a).f_T_star, fem(b).f_T_star, rtol=0, atol=0)


def test_concat_mode_sees_patches(float64):
    torch.manual_seed(2)
    cfg = tiny_config()
    fem = FeatureEnhancement(cfg.attention, FemConfig(text_attends_to="concat"))
    a = make_bundle(cfg)
    b = FeatureBundle(f_G=a.f_G, f_T=a.f_T, text_valid=a.text_valid,
                      f_P=torch.randn(2, 4, cfg.model_dim), patch_valid=a.patch_valid)
    assert not torch.allclose(fem(a).f_T_star, fem(b).f_T_star)


def test_every_parameter_receives_gradient(float64):
    torch.manual_seed(3)
    cfg = tiny_config()
    fem = FeatureEnhancement(cfg.attention)
    out = fem(make_bundle(cfg, b=3))
    loss = contrastive_loss(out.f_T_star[:, 0], out.f_G_star[:, 0]) \
        + patch_coherence_loss(out.f_G_star, out.f_P_star) + out.f_T_star.pow(2).mean()
    loss.backward()
    dead = {n for n, p in fem.named_parameters() if p.grad is None or torch.count_nonzero(p.grad) == 0}
    # Attention over a single key has softmax weight 1 whatever the logits, so the
    # query/key side of the one-row global stream cannot receive gradient.
    single_key = {f"{stage}.attn.{proj}.{kind}" for stage in ("self_G", "cross_TV")
                  for proj in ("q_proj", "k_proj") for kind in ("weight", "bias")}
    single_key |= {"cross_TV.norm_q.gain", "cross_TV.norm_q.bias"}
    assert dead == single_key


def test_concat_mode_revives_text_query_gradients(float64):
    torch.manual_seed(3)
    cfg = tiny_config()
    fem = FeatureEnhancement(cfg.attention, FemConfig(text_attends_to="concat"))
    out = fem(make_bundle(cfg, b=3))
    out.f_T_star.pow(2).mean().backward()
    assert torch.count_nonzero(fem.cross_TV.attn.q_proj.weight.grad) > 0
