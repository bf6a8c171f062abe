import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mpdf.heads import (
    ClassificationHead,
    LocalizationHead,
    PyramidOutputs,
    assign_targets,
    decode_offsets,
    decode_proposals,
    pyramid_lengths,
)


def test_classification_head_shape():
    head = ClassificationHead(16, 8, 3, 64)
    assert head.flat_len == 4
    assert head([torch.randn(5, 64, 16) for _ in range(3)]).shape == (5,)


def test_classification_head_checks():
    head = ClassificationHead(16, 8, 2, 64)
    with pytest.raises(ValueError, match="levels"):
        head([torch.randn(1, 64, 16)])
    with pytest.raises(ValueError, match="pooled"):
        head([torch.randn(1, 32, 16)] * 2)
    with pytest.raises(ValueError, match="too short"):
        ClassificationHead(16, 8, 2, 8)
    with pytest.raises(ValueError, match="divisible"):
        ClassificationHead(16, 6, 2, 64)


def test_pooled_head_accepts_any_length():
    head = ClassificationHead(4, 8, 1, 0, pooled=True)
    for T in (3, 17, 64):
        assert head([torch.randn(2, T, 4)]).shape == (2,)


def test_pyramid_lengths():
    assert pyramid_lengths(64) == [64, 32, 16, 8, 4]
    assert pyramid_lengths(50) == [50, 25, 13, 7, 4]


def test_localization_head_outputs():
    head = LocalizationHead(12, n_heads=4)
    out = head(torch.randn(2, 64, 12))
    assert out.level_lengths == [64, 32, 16, 8, 4]
    assert all(r.shape == (2, n, 2) for r, n in zip(out.reg_offsets, out.level_lengths))
    assert all((r >= 0).all() for r in out.reg_offsets)
    assert out.video_logit.shape == (2,)
    assert out.reconstructed.shape == out.features.shape == (2, 64, 12)


def test_classification_prior():
    head = LocalizationHead(8, n_heads=2)
    assert float(head.cls_out.bias.detach()) == pytest.approx(-math.log(99))


def test_localization_head_min_length():
    with pytest.raises(ValueError, match="too short"):
        LocalizationHead(8, n_heads=2)(torch.randn(1, 31, 8))


def test_assign_targets_hand_case():
    t = assign_targets([(3, 9)], 32, n_levels=2)
    # level 0 centres 0.5, 1.5, ...; inside (3, 9) are positions 3..8
    assert np.flatnonzero(t[0].cls).tolist() == [3, 4, 5, 6, 7, 8]
    assert t[0].reg[3].tolist() == [0.5, 5.5]
    # level 1 centres 1, 3, 5, 7, 9: strictly inside are 5 and 7
    assert np.flatnonzero(t[1].cls).tolist() == [2, 3]
    assert t[1].reg[2].tolist() == [1.0, 2.0]


def test_overlapping_targets_rejected():
    with pytest.raises(ValueError, match="overlapping"):
        assign_targets([(0, 10), (5, 12)], 32)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 50), st.integers(1, 14))
def test_decode_inverts_assign(start, length):
    T = 64
    seg = (start, min(start + length, T))
    for level, lt in enumerate(assign_targets([seg], T)):
        for i in np.flatnonzero(lt.mask):
            s, e = decode_offsets(level, i, lt.reg[i, 0], lt.reg[i, 1])
            assert (float(s), float(e)) == pytest.approx(seg)


def _outputs_from_targets(targets, T, hit=6.0):
    cls = [torch.where(torch.as_tensor(t.cls) > 0, hit, -hit)[None].double() for t in targets]
    reg = [torch.as_tensor(t.reg)[None].double() for t in targets]
    feats = torch.zeros(1, T, 2, dtype=torch.float64)
    return PyramidOutputs(cls, reg, torch.zeros(1, dtype=torch.float64), feats, feats)


def test_decode_proposals_recovers_segments():
    segs = [(4, 12), (30, 40)]
    out = _outputs_from_targets(assign_targets(segs, 64), 64)
    got = {(p.start, p.end) for p in decode_proposals(out, 0.5)}
    assert got == {(4.0, 12.0), (30.0, 40.0)}


def test_decode_threshold_and_validation():
    out = _outputs_from_targets(assign_targets([], 64), 64)
    assert decode_proposals(out, 0.1) == []
    with pytest.raises(ValueError):
        decode_proposals(out, 1.5)


def test_decode_clips_to_sequence():
    targets = assign_targets([(0, 8)], 64)
    out = _outputs_from_targets(targets, 64)
    out.reg_offsets[0] = out.reg_offsets[0] + 100.0
    props = decode_proposals(out, 0.5)
    assert all(0.0 <= p.start < p.end <= 64.0 for p in props)
