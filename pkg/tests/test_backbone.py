import warnings

import pytest
import torch

from ovcos.backbone import (
    CONVNEXT_L_SPEC,
    STUB_SPEC,
    BackboneSpec,
    ClassEmbeddingSet,
    FeaturePyramid,
    InvalidInputError,
    StubBackbone,
    TOKEN_LIMIT,
    build_backbone,
    trainable_fraction,
)
from ovcos.decoder import DecoderConfig, build_decoder, count_parameters


def test_pyramid_shapes(backbone):
    pyr = backbone.encode_image(torch.rand(2, 3, 64, 64))
    assert pyr.shapes() == {
        1: (24, 32, 32),
        2: (24, 16, 16),
        3: (48, 8, 8),
        4: (96, 4, 4),
        5: (192, 2, 2),
    }


def test_level_one_is_upsampled_level_two(backbone):
    pyr = backbone.encode_image(torch.rand(3, 32, 32))
    ref = torch.nn.functional.interpolate(pyr[2], scale_factor=2, mode="bilinear", align_corners=False)
    assert torch.equal(pyr[1], ref)


def test_missing_level_raises():
    with pytest.raises(InvalidInputError, match="level 3"):
        FeaturePyramid({1: torch.zeros(1)})[3]


def test_image_size_must_match_stride(backbone):
    with pytest.raises(InvalidInputError, match="multiple of 32"):
        backbone.encode_image(torch.rand(1, 3, 48, 64))
    with pytest.raises(InvalidInputError):
        backbone.encode_image(torch.rand(1, 4, 64, 64))


def test_seeded_determinism():
    img = torch.rand(1, 3, 32, 32)
    a, b, c = StubBackbone(seed=1), StubBackbone(seed=1), StubBackbone(seed=2)
    assert a.parameter_digest() == b.parameter_digest() != c.parameter_digest()
    assert torch.equal(a.encode_image(img)[5], b.encode_image(img)[5])
    assert torch.equal(a.encode_text(["a frog"]), b.encode_text(["a frog"]))


def test_text_embeddings_unit_norm(backbone):
    t = backbone.encode_text(["a moth", "the frog is hiding", "x"])
    torch.testing.assert_close(t.norm(dim=1), torch.ones(3))


def test_text_truncation_warns(backbone):
    long = " ".join(f"w{i}" for i in range(TOKEN_LIMIT + 10))
    with pytest.warns(UserWarning, match="truncated"):
        t = backbone.encode_text([long])
    clipped = " ".join(f"w{i}" for i in range(TOKEN_LIMIT))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert torch.equal(t, backbone.encode_text([clipped]))


def test_empty_prompt_rejected(backbone):
    with pytest.raises(InvalidInputError):
        backbone.encode_text(["   "])
    with pytest.raises(InvalidInputError):
        backbone.encode_text([])


def test_frozen(backbone):
    assert all(not p.requires_grad for p in backbone.parameters())
    backbone.train()
    assert not backbone.training


def test_zero_projection_flagged(backbone):
    f_v, deg = backbone.project_visual(torch.zeros(2, 192))
    assert deg.all() and torch.count_nonzero(f_v) == 0
    f_v, deg = backbone.project_visual(torch.rand(192))
    assert not deg and abs(float(f_v.norm()) - 1) < 1e-6
    with pytest.raises(InvalidInputError):
        backbone.project_visual(torch.rand(3, 100))


def test_plant_maps_features_onto_targets():
    bb = StubBackbone(seed=3)
    x = torch.randn(10, 192, dtype=torch.float64)
    y = torch.nn.functional.normalize(torch.randn(10, 64, dtype=torch.float64), dim=1)
    bb.plant(x, y, ridge=1e-9)
    f_v, _ = bb.project_visual(x.float())
    torch.testing.assert_close(f_v, y.float(), atol=1e-3, rtol=0)


def test_class_embedding_set_validation():
    with pytest.raises(InvalidInputError, match="unit-norm"):
        ClassEmbeddingSet(["a"], torch.full((1, 4), 1.0))
    with pytest.raises(InvalidInputError):
        ClassEmbeddingSet(["a", "b"], torch.eye(4)[:1])
    s = ClassEmbeddingSet(["a", "b"], torch.eye(4)[:2])
    assert s.index("b") == 1 and s.to(torch.float64).embeddings.dtype == torch.float64


def test_spec_validation():
    with pytest.raises(InvalidInputError):
        BackboneSpec(64, (1, 2, 3))
    with pytest.raises(InvalidInputError):
        BackboneSpec(64, (1, 2, 3, 4), stage_strides=(4, 4, 8, 16))
    with pytest.raises(InvalidInputError, match="frozen"):
        BackboneSpec(64, (1, 2, 3, 4), frozen=False)


def test_registry():
    assert isinstance(build_backbone("stub", seed=1), StubBackbone)
    with pytest.raises(InvalidInputError, match="unknown backbone"):
        build_backbone("clip-nonexistent")


def test_trainable_ratio_below_two_percent():
    # Recipe-scale decoder on the large real-encoder layout.
    dec = build_decoder(DecoderConfig(width=128, heads=8), CONVNEXT_L_SPEC)
    n = count_parameters(dec)
    assert trainable_fraction(n, CONVNEXT_L_SPEC) < 0.02
    with pytest.raises(InvalidInputError):
        trainable_fraction(n, STUB_SPEC)
