import dataclasses

import pytest
import torch

from ovcos import decoder as dec
from ovcos.backbone import ClassEmbeddingSet, InvalidInputError, NumericalFaultError, StubBackbone
from ovcos.decoder import (
    DecoderConfig,
    SemanticGuidanceAttention,
    StructureEnhancementAttention,
    build_decoder,
    build_topdown_guidance,
    guidance_weight,
)
from ovcos.losses import total_loss
from ovcos.prompts import CAMO_PROMPTS, class_embeddings

from gradcheck_util import fd_relative_error

TOL = 1e-4


def _text(backbone, names=("moth", "frog", "octopus")):
    return class_embeddings(backbone, CAMO_PROMPTS, list(names))


def test_guidance_weight_bounds():
    q, g = torch.randn(2, 10, 8), torch.randn(5, 8)
    w = guidance_weight(q, g, "max")
    assert w.shape == (2, 10)
    assert (w >= 1 / 5 - 1e-7).all() and (w <= 1).all()
    torch.testing.assert_close(guidance_weight(q, g, "mean"), torch.full((2, 10), 0.2))


def test_sga_unguided_is_plain_self_attention():
    torch.manual_seed(0)
    m = SemanticGuidanceAttention(8, 2, 6, guided=False)
    x = torch.randn(1, 5, 8)
    out, base = m(x, torch.randn(3, 6))
    assert base is None
    mha = torch.nn.MultiheadAttention(8, 2, batch_first=True, bias=True)
    with torch.no_grad():
        mha.in_proj_weight.copy_(torch.cat([m.q.weight, m.k.weight, m.v.weight]))
        mha.in_proj_bias.copy_(torch.cat([m.q.bias, m.k.bias, m.v.bias]))
        mha.out_proj.weight.copy_(m.out.weight)
        mha.out_proj.bias.copy_(m.out.bias)
    h = m.norm(x)
    ref = x + mha(h, h, h, need_weights=False)[0]
    torch.testing.assert_close(out, ref, atol=1e-6, rtol=1e-5)


def test_sga_unit_remod_is_bit_exact():
    torch.manual_seed(1)
    m = SemanticGuidanceAttention(16, 4, 6)
    x, t = torch.randn(2, 9, 16), torch.randn(3, 6)
    a, base_a = m(x, t, None)
    b, base_b = m(x, t, torch.ones(2, 9))
    assert torch.equal(a, b) and torch.equal(base_a, base_b)
    c, _ = m(x, t, torch.full((2, 9), 0.5))
    assert not torch.equal(a, c)


def test_sga_errors():
    m = SemanticGuidanceAttention(8, 2, 4)
    with pytest.raises(InvalidInputError):
        m(torch.randn(1, 3, 8), torch.zeros(0, 4))
    bad = torch.full((2, 4), float("nan"))
    with pytest.raises(NumericalFaultError, match="stage 3"):
        m(torch.randn(1, 3, 8), bad, context="at stage 3")


def test_sea_alpha_init_and_equal_sources():
    torch.manual_seed(2)
    m = StructureEnhancementAttention(8, 2)
    torch.testing.assert_close(m.alpha, torch.full((2,), 0.5))
    x, f = torch.randn(1, 6, 8), torch.randn(1, 6, 8)
    a = m(x, f, f)
    with torch.no_grad():
        m.alpha_logit.copy_(torch.tensor([3.0, -2.0]))
    torch.testing.assert_close(m(x, f, f), a, atol=1e-6, rtol=0)
    # alpha -> 1 recovers the edge-only branch
    with torch.no_grad():
        m.alpha_logit.fill_(60.0)
    e, d = torch.randn(1, 6, 8), torch.randn(1, 6, 8)
    torch.testing.assert_close(m(x, e, d), m(x, e, None), atol=1e-6, rtol=0)
    assert torch.equal(m(x, None, None), x)
    with pytest.raises(InvalidInputError):
        m(x, torch.randn(1, 5, 8), None)


def test_decoder_outputs(backbone):
    cfg = DecoderConfig(width=16, heads=2, iterations=3)
    d = build_decoder(cfg, backbone.spec)
    pyr = backbone.encode_image(torch.rand(2, 3, 64, 64))
    states = d(pyr, _text(backbone), backbone.project_visual, (64, 64))
    assert [s.iteration for s in states] == [1, 2, 3]
    for s in states:
        assert s.seg_prob.shape == (2, 1, 64, 64)
        assert set(s.edge_logits) == set(s.depth_logits) == {1, 2, 3}
        assert s.edge_logits[1].shape[-2:] == (32, 32) and s.edge_logits[3].shape[-2:] == (8, 8)
    assert states[0].correlation is None and states[1].correlation.shape == (2, 3)
    assert set(states[1].remod_weights) == {1, 2, 3}
    assert set(d.alphas()) == {1, 2, 3}


def test_iteration_entry_reuses_deep_features(backbone):
    d = build_decoder(DecoderConfig(width=16, heads=2, iterations=2), backbone.spec)
    pyr = backbone.encode_image(torch.rand(1, 3, 64, 64))
    s1, s2 = d(pyr, _text(backbone), backbone.project_visual)
    for lvl in (4, 5):
        assert s2.stage_features[lvl] is s1.stage_features[lvl]
    assert not torch.equal(s2.stage_features[3], s1.stage_features[3])


def test_unit_remod_reproduces_remod_free_decode(backbone, monkeypatch):
    d = build_decoder(DecoderConfig(width=16, heads=2, iterations=2), backbone.spec)
    pyr = backbone.encode_image(torch.rand(1, 3, 64, 64))
    text = _text(backbone)

    monkeypatch.setattr(dec.TopDownGuidance, "remod_weight", lambda self, tok: torch.ones(tok.shape[:2]))
    ones = d(pyr, text, backbone.project_visual)[1].seg_logits
    real_build = dec.build_topdown_guidance
    monkeypatch.setattr(
        dec, "build_topdown_guidance", lambda *a, **k: dataclasses.replace(real_build(*a, **k), cue=None)
    )
    free = d(pyr, text, backbone.project_visual)
    assert free[1].remod_weights == {}
    assert torch.equal(ones, free[1].seg_logits)


def test_ablation_switches(backbone):
    pyr = backbone.encode_image(torch.rand(1, 3, 32, 32))
    text = _text(backbone)
    d = build_decoder(DecoderConfig(width=8, heads=2, iterations=1, semantic_guidance=False, edge_aux=False, depth_aux=False), backbone.spec)
    (s,) = d(pyr, text, backbone.project_visual)
    assert s.base_weights == {} and s.edge_logits == {} and d.alphas() == {}
    d = build_decoder(DecoderConfig(width=8, heads=2, se_fusion="addition"), backbone.spec)
    s = d(pyr, text, backbone.project_visual)
    assert d.alphas() == {} and set(s[0].edge_logits) == {1, 2, 3}
    d = build_decoder(DecoderConfig(width=8, heads=2, depth_aux=False), backbone.spec)
    s = d(pyr, text, backbone.project_visual)[0]
    assert set(s.edge_logits) == {1, 2, 3} and s.depth_logits == {}
    d = build_decoder(DecoderConfig(width=8, heads=2, use_correlation=False, use_object_repr=False), backbone.spec)
    assert d.cue is None
    assert d(pyr, text, backbone.project_visual)[1].remod_weights == {}


def test_config_validation():
    for bad in (dict(width=10, heads=4), dict(iterations=0), dict(se_stages=(6,)), dict(agg="sum"), dict(se_fusion="x")):
        with pytest.raises(InvalidInputError):
            DecoderConfig(**bad)


def test_build_is_seeded_and_leaves_global_rng():
    spec = StubBackbone().spec
    torch.manual_seed(5)
    before = torch.rand(1)
    torch.manual_seed(5)
    a = build_decoder(DecoderConfig(width=8, heads=2), spec, seed=3)
    after = torch.rand(1)
    b = build_decoder(DecoderConfig(width=8, heads=2), spec, seed=3)
    assert torch.equal(before, after)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_empty_previous_mask_falls_back_to_gap(backbone):
    f5 = torch.rand(2, 192, 2, 2)
    seg = torch.zeros(2, 1, 64, 64)
    seg[1] = 0.7
    g = build_topdown_guidance(seg, f5, _text(backbone), backbone.project_visual, None)
    assert g.degenerate.tolist() == [True, False]
    torch.testing.assert_close(g.object_repr[0], f5[0].mean(dim=(1, 2)))
    torch.testing.assert_close(g.object_repr[1], f5[1].mean(dim=(1, 2)))
    assert g.cue is None


def test_missing_pyramid_level(backbone):
    d = build_decoder(DecoderConfig(width=8, heads=2), backbone.spec)
    pyr = backbone.encode_image(torch.rand(1, 3, 32, 32))
    del pyr.levels[4]
    with pytest.raises(InvalidInputError, match="level 4"):
        d(pyr, _text(backbone), backbone.project_visual)


# -- gradient checks (float64, central differences) ---------------------------


def test_sga_gradients():
    torch.manual_seed(0)
    m = SemanticGuidanceAttention(8, 2, 6).double()
    x = torch.randn(2, 5, 8, dtype=torch.float64, requires_grad=True)
    t = torch.randn(3, 6, dtype=torch.float64, requires_grad=True)
    r = torch.rand(2, 5, dtype=torch.float64, requires_grad=True)
    w = torch.randn(2, 5, 8, dtype=torch.float64)
    fn = lambda: (m(x, t, r)[0] * w).sum()
    assert fd_relative_error(fn, [x, t, r, *m.parameters()]) < TOL


def test_sea_gradients():
    torch.manual_seed(0)
    m = StructureEnhancementAttention(8, 2).double()
    with torch.no_grad():
        m.alpha_logit.copy_(torch.tensor([0.3, -0.7]))
    x, e, d = (torch.randn(2, 6, 8, dtype=torch.float64, requires_grad=True) for _ in range(3))
    w = torch.randn(2, 6, 8, dtype=torch.float64)
    fn = lambda: (m(x, e, d) * w).sum()
    assert fd_relative_error(fn, [x, e, d, *m.parameters()]) < TOL


def test_loss_gradients():
    from ovcos.losses import depth_loss, edge_loss, seg_loss

    g = torch.Generator().manual_seed(0)
    gt = (torch.rand(2, 1, 12, 12, generator=g) > 0.5).double()
    p = (0.05 + 0.9 * torch.rand(2, 1, 12, 12, generator=g, dtype=torch.float64)).requires_grad_()
    logits = torch.randn(2, 1, 12, 12, generator=g, dtype=torch.float64, requires_grad=True)
    depth = torch.rand(2, 1, 12, 12, generator=g, dtype=torch.float64)
    assert fd_relative_error(lambda: seg_loss(p, gt), [p]) < TOL
    assert fd_relative_error(lambda: seg_loss(p, gt, "bce_iou"), [p]) < TOL
    assert fd_relative_error(lambda: edge_loss(logits, gt), [logits]) < TOL
    assert fd_relative_error(lambda: depth_loss(logits, depth), [logits]) < TOL


def test_end_to_end_decode_gradients():
    bb = StubBackbone(seed=4).double()
    d = build_decoder(DecoderConfig(width=8, heads=2, iterations=2), bb.spec, seed=1).double()
    pyr = bb.encode_image(torch.rand(1, 3, 32, 32, dtype=torch.float64))
    text = _text(bb).to(torch.float64)
    g = torch.Generator().manual_seed(1)
    gs = (torch.rand(1, 1, 32, 32, generator=g) > 0.6).double()
    ge = (torch.rand(1, 1, 32, 32, generator=g) > 0.8).double()
    gd = torch.rand(1, 1, 32, 32, generator=g, dtype=torch.float64)

    def fn():
        states = d(pyr, text, bb.project_visual, (32, 32))
        return total_loss(states, (gs, ge, gd)).total

    params = [p for p in d.parameters()]
    assert fd_relative_error(fn, params, max_entries=3) < TOL
