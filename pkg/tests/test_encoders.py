import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mpdf.encoders import AudioEncoder, CrossModalFusion, VisualEncoder


def test_output_shapes():
    torch.manual_seed(0)
    v = VisualEncoder(48, 32)(torch.randn(2, 64, 48))
    a = AudioEncoder(64, 32, 4)(torch.randn(2, 256, 64))
    c = CrossModalFusion(32)(v, a)
    assert v.shape == a.shape == (2, 64, 32)
    assert c.shape == (2, 64, 64)


def test_audio_length_must_divide():
    with pytest.raises(ValueError, match="divisible"):
        AudioEncoder(8, 4, 4)(torch.randn(1, 10, 8))


def test_wrong_feature_dim():
    with pytest.raises(ValueError, match="feature dimension"):
        VisualEncoder(48, 32)(torch.randn(1, 4, 47))


def test_fusion_shape_mismatch():
    with pytest.raises(ValueError, match="shapes differ"):
        CrossModalFusion(4)(torch.randn(1, 3, 4), torch.randn(1, 2, 4))


def test_audio_pools_its_own_window():
    # perturbing audio steps of frame t only changes output frame t
    torch.manual_seed(1)
    enc = AudioEncoder(6, 4, 3).double()
    x = torch.randn(1, 15, 6, dtype=torch.float64)
    base = enc(x)
    x2 = x.clone()
    x2[0, 6:9] += 1.0
    diff = (enc(x2) - base).abs().sum(-1)[0]
    assert torch.equal(diff != 0, torch.tensor([False, False, True, False, False]))


def test_fusion_matches_manual_formula():
    torch.manual_seed(2)
    fusion = CrossModalFusion(3).double()
    v = torch.randn(2, 5, 3, dtype=torch.float64)
    a = torch.randn(2, 5, 3, dtype=torch.float64)
    c_prime = torch.cat([v, a], -1)
    m = c_prime @ fusion.mix.weight.T + fusion.mix.bias
    w = fusion.combine.weight[0]
    expected = w[0] * m + w[1] * c_prime + fusion.combine.bias[0]
    torch.testing.assert_close(fusion(v, a), expected, rtol=0, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 12), st.integers(0, 11))
def test_visual_encoder_is_framewise(T, t):
    t = t % T
    torch.manual_seed(3)
    enc = VisualEncoder(5, 4).double()
    x = torch.randn(1, T, 5, dtype=torch.float64)
    x2 = x.clone()
    x2[0, t] += 3.0
    changed = (enc(x2) - enc(x)).abs().sum(-1)[0] != 0
    assert changed.nonzero().flatten().tolist() in ([t], [])
