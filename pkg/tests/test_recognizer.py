import numpy as np
import pytest
import torch

from ovcos.backbone import ClassEmbeddingSet, InvalidInputError
from ovcos.recognizer import classify, masked_average_pool, recognize


def test_pool_matches_weighted_mean():
    g = torch.Generator().manual_seed(0)
    f = torch.rand(5, 4, 4, generator=g, dtype=torch.float64)
    m = torch.rand(4, 4, generator=g, dtype=torch.float64)
    pooled, deg = masked_average_pool(f, m)
    ref = (f * m).sum((1, 2)) / m.sum()
    torch.testing.assert_close(pooled, ref)
    assert not deg
    full, _ = masked_average_pool(f, torch.ones(4, 4, dtype=torch.float64))
    torch.testing.assert_close(full, f.mean((1, 2)))


def test_pool_downsamples_small_objects():
    # An object covering one 8x8 cell of a 32x32 mask still reaches a 2x2 grid.
    f = torch.zeros(1, 3, 2, 2)
    f[0, :, 1, 1] = torch.tensor([1.0, 2.0, 3.0])
    m = torch.zeros(1, 32, 32)
    m[0, 20:28, 20:28] = 1
    pooled, deg = masked_average_pool(f, m)
    assert not deg[0] and pooled[0, 2] > 0


def test_empty_mask_degenerate():
    pooled, deg = masked_average_pool(torch.rand(2, 3, 2, 2), torch.zeros(2, 8, 8))
    assert deg.all() and torch.count_nonzero(pooled) == 0


def _emb(rows):
    t = torch.nn.functional.normalize(torch.tensor(rows, dtype=torch.float32), dim=1)
    return ClassEmbeddingSet([f"c{i}" for i in range(len(rows))], t)


def test_classify_argmax_and_ties():
    text = _emb([[1, 0], [0, 1], [1, 0]])
    idx, scores, corr = classify(torch.tensor([[1.0, 0.0], [0.0, 1.0]]), text)
    assert idx.tolist() == [0, 1]  # class 0 and 2 tie: lowest index wins
    torch.testing.assert_close(scores, torch.softmax(corr / 0.01, -1))
    with pytest.raises(InvalidInputError):
        classify(torch.rand(1, 3), text)


def test_recognize_batch():
    text = _emb([[1, 0], [0, 1]])
    f5 = torch.zeros(2, 2, 1, 1)
    f5[0, 0] = 1
    f5[1, 1] = 1
    project = lambda x: (torch.nn.functional.normalize(x, dim=-1), x.norm(dim=-1) == 0)
    seg = torch.ones(2, 8, 8)
    seg[1] = 0
    preds = recognize(f5, seg, text, project, ["a", "b"])
    assert [p.image_id for p in preds] == ["a", "b"]
    assert preds[0].class_index == 0 and not preds[0].degenerate
    assert preds[1].degenerate  # empty segmentation
    assert preds[0].seg_prob.dtype == np.float64 and preds[0].seg_prob.shape == (8, 8)
