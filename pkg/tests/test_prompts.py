import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy.spatial.distance import directed_hausdorff as scipy_directed

from ovcos.backbone import InvalidInputError
from ovcos.prompts import (
    BARE_PROMPTS,
    CAMO_PROMPTS,
    EmbeddingCache,
    PromptTemplateSet,
    class_embeddings,
    directed_hausdorff,
    expand,
    get_template_set,
    hausdorff_distance,
)

CAMO_EXPECTED = [
    "A photo of the camouflaged frog.",
    "A photo of the concealed frog.",
    "A photo of the frog camouflaged in the background.",
    "A photo of the frog concealed in the background.",
    "A photo of the frog camouflaged to blend in with its surroundings.",
    "A photo of the frog concealed to blend in with its surroundings.",
]


def test_camo_expansion_verbatim():
    assert expand(CAMO_PROMPTS, "frog") == CAMO_EXPECTED
    assert expand(BARE_PROMPTS, "sea horse") == ["sea horse"]


def test_placeholder_required_once():
    with pytest.raises(InvalidInputError):
        PromptTemplateSet("x", ("no placeholder",))
    with pytest.raises(InvalidInputError):
        PromptTemplateSet("x", ("<class> and <class>",))
    with pytest.raises(InvalidInputError):
        PromptTemplateSet("x", ())


def test_template_file_roundtrip(tmp_path):
    f = tmp_path / "mine.txt"
    f.write_text("# comment\n\na <class> here.\n  the <class>.  \n")
    ts = get_template_set(str(f))
    assert ts.name == "mine" and ts.templates == ("a <class> here.", "the <class>.")
    with pytest.raises(InvalidInputError, match="unknown template set"):
        get_template_set("nope")


def test_class_embedding_is_normalized_mean(backbone):
    classes = ["moth", "frog", "sea horse"]
    emb = class_embeddings(backbone, CAMO_PROMPTS, classes)
    for i, c in enumerate(classes):
        raw = backbone.encode_text(expand(CAMO_PROMPTS, c)).double()
        m = raw.mean(0)
        torch.testing.assert_close(emb.embeddings[i].double(), m / m.norm(), atol=1e-6, rtol=0)
    torch.testing.assert_close(emb.embeddings.norm(dim=1), torch.ones(3))


def test_duplicate_classes_rejected(backbone):
    with pytest.raises(InvalidInputError, match="duplicate"):
        class_embeddings(backbone, CAMO_PROMPTS, ["frog", "moth", "frog"])


def test_cache_encodes_once(backbone):
    cache = EmbeddingCache(backbone)
    a = cache.get(CAMO_PROMPTS, ["frog", "moth"])
    b = cache.get(CAMO_PROMPTS, ["frog", "moth"])
    assert a is b and cache.encode_count == 1
    cache.get(BARE_PROMPTS, ["frog", "moth"])
    assert cache.encode_count == 2


def test_hausdorff_known_values():
    assert hausdorff_distance([[0.0, 0.0]], [[3.0, 4.0]]) == 5.0
    a = np.random.default_rng(0).normal(size=(5, 3))
    assert hausdorff_distance(a, a) == 0.0
    # Directed distances differ; the symmetric one is their max.
    big, small = [[0.0], [10.0]], [[0.0]]
    assert directed_hausdorff(small, big) == 0.0
    assert directed_hausdorff(big, small) == 10.0
    assert hausdorff_distance(small, big) == 10.0


def test_hausdorff_errors():
    with pytest.raises(InvalidInputError):
        hausdorff_distance(np.zeros((0, 2)), [[1.0, 1.0]])
    with pytest.raises(InvalidInputError, match="dimension"):
        hausdorff_distance([[1.0, 2.0]], [[1.0, 2.0, 3.0]])


@settings(max_examples=50, deadline=None)
@given(
    st.integers(1, 6),
    st.integers(1, 6),
    st.integers(1, 4),
    st.integers(0, 2**31 - 1),
)
def test_hausdorff_matches_scipy(n, m, d, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, d)), rng.normal(size=(m, d))
    ref = max(scipy_directed(a, b)[0], scipy_directed(b, a)[0])
    assert abs(hausdorff_distance(a, b) - ref) < 1e-12
    assert abs(hausdorff_distance(a, b) - hausdorff_distance(b, a)) < 1e-12
