import json

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from PIL import Image
from torch import nn

from oracles import softmax_reference
from subjectgen.attention import (
    AttentionCapture,
    AttentionRecord,
    SubjectMap,
    SubjectMask,
    aggregate_subject_map,
    compute_subject_mask,
    cross_attention,
    save_map_png,
    save_mask_png,
    threshold_mask,
)
from subjectgen.captioner import tokenize_caption
from subjectgen.data import image_to_tensor, render_sample
from subjectgen.schedule import make_linear_schedule


def _proj(d_in, d_out, seed):
    g = torch.Generator().manual_seed(seed)
    lin = nn.Linear(d_in, d_out)
    with torch.no_grad():
        lin.weight.copy_(torch.randn(d_out, d_in, generator=g) * 0.3)
        lin.bias.copy_(torch.randn(d_out, generator=g) * 0.1)
    return lin


def test_cross_attention_matches_mpmath_softmax():
    heads, C, D, N, L = 2, 4, 6, 3, 5
    to_q, to_k, to_v = _proj(C, C, 1), _proj(D, C, 2), _proj(D, C, 3)
    g = torch.Generator().manual_seed(4)
    feats = torch.randn(1, N, C, generator=g)
    txt = torch.randn(1, L, D, generator=g)
    out, maps = cross_attention(feats, txt, to_q, to_k, to_v, heads)
    assert out.shape == (1, N, C) and maps.shape == (1, heads, N, L)

    dim_head = C // heads
    q = to_q(feats).view(1, N, heads, dim_head).transpose(1, 2)
    k = to_k(txt).view(1, L, heads, dim_head).transpose(1, 2)
    logits = (q @ k.transpose(-1, -2) / dim_head ** 0.5).detach()
    for h in range(heads):
        for n in range(N):
            ref = softmax_reference(logits[0, h, n].tolist())
            assert torch.allclose(maps[0, h, n].double(), ref, atol=1e-6)


def test_cross_attention_validation():
    to_q, to_k, to_v = _proj(4, 4, 1), _proj(6, 4, 2), _proj(6, 4, 3)
    with pytest.raises(ValueError):
        cross_attention(torch.randn(2, 3), torch.randn(1, 5, 6),
                        to_q, to_k, to_v, 2)
    with pytest.raises(ValueError):
        cross_attention(torch.randn(1, 3, 4), torch.randn(2, 5, 6),
                        to_q, to_k, to_v, 2)
    with pytest.raises(ValueError):
        cross_attention(torch.randn(1, 3, 4), torch.randn(1, 5, 6),
                        to_q, to_k, to_v, 3)


def _record(grid, layer="enc0", head=0, tokens=4, col=2):
    """Record whose subject column `col` reshapes to `grid`; rows stochastic."""
    grid = torch.as_tensor(grid, dtype=torch.float32)
    h, w = grid.shape
    flat = grid.reshape(-1, 1)
    weights = torch.zeros(h * w, tokens)
    weights[:, col] = flat[:, 0]
    rest = (1.0 - flat[:, 0]) / (tokens - 1)
    for c in range(tokens):
        if c != col:
            weights[:, c] = rest
    return AttentionRecord(layer=layer, head=head, height=h, width=w,
                           weights=weights)


def test_aggregate_bilinear_upsample_oracle():
    # 2x2 grid [[0,1],[2,3]] scaled into [0,1]; bilinear to 4x4 with
    # half-pixel centers gives value(y, x) = (wx1 + 2*wy1) / 3 where the
    # fractional weights run over {0, 1/4, 3/4, 1}; worked out by hand
    cap = AttentionCapture(records=[_record([[0.0, 1 / 3], [2 / 3, 1.0]])])
    smap = aggregate_subject_map(cap, (2,), (4, 4))
    w = [0.0, 0.25, 0.75, 1.0]
    want = torch.tensor([[(wx + 2 * wy) / 3 for wx in w] for wy in w])
    assert torch.allclose(smap.values, want, atol=1e-6)


def test_aggregate_averages_multiple_subject_columns():
    grid_a = [[0.2, 0.4], [0.6, 0.8]]
    rec = _record(grid_a, tokens=6, col=1)
    # put a second subject column with doubled-and-clipped values
    rec.weights[:, 4] = rec.weights[:, 1] * 0.5
    cap = AttentionCapture(records=[rec])
    forward = aggregate_subject_map(cap, (1, 4), (2, 2))
    reordered = aggregate_subject_map(cap, (4, 1), (2, 2))
    assert torch.equal(forward.values, reordered.values)
    # mean of columns 1 and 4 is 0.75 * column 1, min-max invariant
    alone = aggregate_subject_map(AttentionCapture(records=[_record(grid_a, tokens=6, col=1)]),
                                  (1,), (2, 2))
    assert torch.allclose(forward.values, alone.values, atol=1e-6)


def test_aggregate_validation_and_constant_map():
    cap = AttentionCapture(records=[_record([[0.5, 0.5], [0.5, 0.5]])])
    with pytest.raises(ValueError):
        aggregate_subject_map(AttentionCapture(), (1,), (2, 2))
    with pytest.raises(ValueError):
        aggregate_subject_map(cap, (), (2, 2))
    with pytest.raises(ValueError):
        aggregate_subject_map(cap, (9,), (2, 2))
    flat = aggregate_subject_map(cap, (1,), (2, 2))
    assert (flat.values == 0).all()


def test_threshold_is_strict():
    smap = SubjectMap(values=torch.tensor([[0.2, 0.2000001], [0.9, 0.0]]))
    mask = threshold_mask(smap, 0.2)
    assert mask.mask.tolist() == [[0.0, 1.0], [1.0, 0.0]]
    assert mask.area == 2
    with pytest.raises(ValueError):
        threshold_mask(smap, 1.5)


@given(st.lists(st.floats(min_value=0.0, max_value=1.0), min_size=4, max_size=64),
       st.floats(min_value=0.0, max_value=1.0),
       st.floats(min_value=0.0, max_value=1.0))
def test_mask_area_antitone_in_threshold(vals, p1, p2):
    n = int(len(vals) ** 0.5)
    smap = SubjectMap(values=torch.tensor(vals[: n * n]).reshape(n, n))
    lo, hi = sorted((p1, p2))
    assert threshold_mask(smap, lo).area >= threshold_mask(smap, hi).area


def _mask_fixture(pretrained):
    model, sched, _ = pretrained
    arr, _ = render_sample("circle", "red", "striped", "white", 16, 16, 8, 32)
    img = image_to_tensor(arr)
    caption = tokenize_caption("a sks subject on a white background",
                               "sks subject")
    return img, caption, model, sched


def test_compute_subject_mask_deterministic(pretrained):
    img, caption, model, sched = _mask_fixture(pretrained)
    m1, k1 = compute_subject_mask(img, caption, model, sched, seed=5)
    m2, k2 = compute_subject_mask(img, caption, model, sched, seed=5)
    m3, _ = compute_subject_mask(img, caption, model, sched, seed=6)
    assert torch.equal(m1.values, m2.values)
    assert torch.equal(k1.mask, k2.mask)
    assert not torch.equal(m1.values, m3.values)
    assert m1.t_extract == sched.num_timesteps // 10
    assert m1.values.min() >= 0 and m1.values.max() <= 1


def test_compute_subject_mask_localizes(pretrained):
    img, caption, model, sched = _mask_fixture(pretrained)
    _, mask = compute_subject_mask(img, caption, model, sched, seed=0)
    ys, xs = np.nonzero(mask.mask.numpy())
    assert mask.area > 0
    # center of mass lands inside the rendered subject
    assert abs(ys.mean() - 16) < 6 and abs(xs.mean() - 16) < 6


def test_compute_subject_mask_errors(pretrained):
    img, caption, model, sched = _mask_fixture(pretrained)
    from subjectgen.text import prompt_from_words
    plain = prompt_from_words(["a", "red", "circle"])
    with pytest.raises(ValueError):
        compute_subject_mask(img, plain, model, sched)
    with pytest.raises(ValueError):
        compute_subject_mask(img, caption, model, sched, n_draws=0)


def test_save_map_and_mask_png(tmp_path):
    smap = SubjectMap(values=torch.tensor([[0.0, 0.5], [1.0, 0.25]]),
                      t_extract=100)
    save_map_png(smap, tmp_path / "map.png", sidecar={"caption": "x"})
    with Image.open(tmp_path / "map.png") as im:
        arr = np.array(im)
    assert arr.dtype == np.uint8 and arr.shape == (2, 2)
    assert arr.tolist() == [[0, 128], [255, 64]]
    meta = json.loads((tmp_path / "map.png.json").read_text())
    assert meta == {"caption": "x", "t_extract": 100}

    mask = threshold_mask(smap, 0.3)
    save_mask_png(mask, tmp_path / "mask.png", sidecar={})
    with Image.open(tmp_path / "mask.png") as im:
        arr = np.array(im)
    assert arr.tolist() == [[0, 255], [255, 0]]
    assert json.loads((tmp_path / "mask.png.json").read_text()) == {"p_t": 0.3}
