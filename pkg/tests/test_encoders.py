import math

import pytest
import torch
import torch.nn.functional as F

from genplugin.model.encoders import (
    PAD,
    IdEncoder,
    LanguageEncoder,
    SequenceEncoder,
    info_nce,
    item_id_representation,
    loss_item_alignment,
    loss_user_alignment,
    masked_mean,
    pad_histories,
)
from genplugin.textembed import TextProjector


def test_info_nce_single_row_is_zero():
    a = torch.randn(1, 4, requires_grad=True)
    loss = info_nce(a, torch.randn(1, 4), 0.07)
    assert loss.item() == 0.0
    loss.backward()
    assert a.grad is not None


def test_info_nce_matches_hand_computation():
    eye = torch.eye(2)
    assert info_nce(eye, eye, 1.0).item() == pytest.approx(2 * math.log(1 + math.exp(-1)), rel=1e-6)


def test_info_nce_rejects_non_positive_temperature():
    with pytest.raises(ValueError):
        info_nce(torch.eye(2), torch.eye(2), 0.0)


def test_user_alignment_is_symmetric():
    torch.manual_seed(0)
    p, q = torch.randn(5, 8), torch.randn(5, 8)
    assert loss_user_alignment(p, q, 0.5).item() == pytest.approx(loss_user_alignment(q, p, 0.5).item(), rel=1e-6)


def test_item_alignment_averages_repeated_items():
    torch.manual_seed(0)
    h, g = torch.randn(3, 4), torch.randn(3, 4)
    items = torch.tensor([2, 2, 5])
    expected = info_nce(torch.stack([h[:2].mean(0), h[2]]), torch.stack([g[:2].mean(0), g[2]]), 0.1)
    assert loss_item_alignment(h, g, items, 0.1).item() == pytest.approx(expected.item(), rel=1e-6)


def test_masked_mean_ignores_padding():
    states = torch.tensor([[[1.0], [3.0], [100.0]]])
    pad = torch.tensor([[False, False, True]])
    assert masked_mean(states, pad).item() == pytest.approx(2.0)


def test_pad_histories_keeps_most_recent_items():
    batch = pad_histories([[1, 2, 3, 4], [7]], max_len=3)
    assert batch.tolist() == [[2, 3, 4], [7, PAD, PAD]]


def test_item_id_representation_sums_levels():
    c = torch.arange(12, dtype=torch.float32).reshape(1, 6, 2)
    g = item_id_representation(c, levels=3)
    assert g.shape == (1, 2, 2)
    assert g[0, 0].tolist() == [0 + 2 + 4, 1 + 3 + 5]


def _id_encoder():
    torch.manual_seed(0)
    enc = SequenceEncoder(8, 2, 1, 16, max_positions=12, dropout=0.0)
    return IdEncoder([3, 4], token_dim=4, d_model=8, encoder=enc).eval()


def test_id_encoder_zeroes_padding_and_is_padding_invariant():
    model = _id_encoder()
    codes = torch.tensor([[0, 1], [2, 3], [1, 0]])
    short = model(codes, torch.tensor([[0, 2]]))
    long = model(codes, torch.tensor([[0, 2, PAD, PAD]]))
    assert long.pad.shape == (1, 8)
    assert torch.all(long.states[0, 4:] == 0)
    torch.testing.assert_close(long.states[:, :4], short.states, atol=1e-5, rtol=1e-5)
    torch.testing.assert_close(long.pooled, short.pooled, atol=1e-5, rtol=1e-5)


def test_sequence_encoder_rejects_overlong_input():
    model = _id_encoder()
    codes = torch.zeros(1, 2, dtype=torch.long)
    with pytest.raises(ValueError, match="exceeds encoder limit"):
        model(codes, torch.zeros(1, 7, dtype=torch.long))


def _language_encoder():
    torch.manual_seed(0)
    enc = SequenceEncoder(8, 2, 1, 16, max_positions=12, dropout=0.0)
    return LanguageEncoder(TextProjector(6, 8), enc).eval()


def test_single_item_history_pools_to_its_own_state():
    model = _language_encoder()
    text = torch.randn(4, 6)
    out = model(text, torch.tensor([[2]]))
    assert out.states.shape == (1, 1, 8)
    torch.testing.assert_close(out.pooled, out.states[:, 0])


def test_padding_content_does_not_reach_real_positions():
    torch.manual_seed(1)
    enc = SequenceEncoder(8, 2, 1, 16, max_positions=12, dropout=0.0).eval()
    x = torch.randn(1, 5, 8)
    pad = torch.tensor([[False, False, True, True, True]])
    shuffled = x.clone()
    shuffled[:, 2:] = x[:, [4, 2, 3]] * 7.0
    a, b = enc(x, pad), enc(shuffled, pad)
    assert (a[:, :2] - b[:, :2]).abs().max().item() < 1e-6
    torch.testing.assert_close(masked_mean(a, pad), masked_mean(b, pad), atol=1e-6, rtol=0.0)


def test_zero_weights_reduce_encoder_to_layer_norm_of_inputs():
    enc = SequenceEncoder(8, 2, 2, 16, max_positions=12, dropout=0.0).eval()
    with torch.no_grad():
        for name, p in enc.named_parameters():
            # residual branches and positions vanish; LayerNorms keep their identity affine
            if "norm" not in name:
                p.zero_()
    x = torch.randn(2, 4, 8)
    out = enc(x, torch.zeros(2, 4, dtype=torch.bool))
    torch.testing.assert_close(out, F.layer_norm(x, (8,)), atol=1e-5, rtol=1e-5)
