import pytest
import torch

from srplr.encoders import (
    EncoderConfig,
    GRUEncoder,
    ItemEmbeddingTable,
    SelfAttentionEncoder,
    build_encoder,
    embed_sequence,
    encode,
)

KINDS = ["gru", "self_attention"]


def make(kind, d=8, layers=2, max_len=12, dropout=0.0):
    enc = build_encoder(EncoderConfig(kind, d, layers, 2, dropout, max_len))
    return enc.eval()


def padded(rows, L):
    return torch.tensor([[0] * (L - len(r)) + r for r in rows])


@pytest.mark.parametrize("kind", KINDS)
def test_shapes(kind):
    table = ItemEmbeddingTable(20, 8)
    hist = padded([[1, 2, 3], [4], [5, 6, 7, 8, 9]], 6)
    H = encode(table(hist), hist != 0, make(kind))
    assert H.shape == (3, 8)
    assert torch.isfinite(H).all()


@pytest.mark.parametrize("kind", KINDS)
def test_left_padding_invariance(kind):
    torch.manual_seed(1)
    table = ItemEmbeddingTable(20, 8, init_std=1.0)
    enc = make(kind)
    short, long = padded([[3, 1, 4, 1, 5]], 5), padded([[3, 1, 4, 1, 5]], 12)
    a = encode(table(short), short != 0, enc)
    b = encode(table(long), long != 0, enc)
    torch.testing.assert_close(a, b, atol=1e-5, rtol=0)


@pytest.mark.parametrize("kind", KINDS)
def test_eval_deterministic(kind):
    table = ItemEmbeddingTable(20, 8)
    enc = make(kind, dropout=0.5)
    hist = padded([[1, 2, 3], [7, 8]], 5)
    with torch.no_grad():
        a = encode(table(hist), hist != 0, enc)
        b = encode(table(hist), hist != 0, enc)
    assert torch.equal(a, b)


def test_dropout_active_in_training_mode():
    table = ItemEmbeddingTable(20, 8, init_std=1.0)
    enc = make("self_attention", dropout=0.5).train()
    hist = padded([[1, 2, 3]], 5)
    assert not torch.equal(encode(table(hist), hist != 0, enc), encode(table(hist), hist != 0, enc))


def test_self_attention_is_causal():
    torch.manual_seed(2)
    enc = make("self_attention")
    x = torch.randn(1, 6, 8)
    mask = torch.ones(1, 6, dtype=torch.bool)
    base = enc.forward_all(x, mask)
    y = x.clone()
    y[0, 4:] += torch.randn(2, 8)
    changed = enc.forward_all(y, mask)
    torch.testing.assert_close(base[:, :4], changed[:, :4], atol=1e-6, rtol=0)
    assert not torch.allclose(base[:, 4:], changed[:, 4:])


@pytest.mark.parametrize("kind", KINDS)
def test_last_item_matters(kind):
    torch.manual_seed(3)
    table = ItemEmbeddingTable(20, 8, init_std=1.0)
    enc = make(kind)
    a, b = padded([[1, 2, 3]], 5), padded([[1, 2, 4]], 5)
    assert not torch.allclose(encode(table(a), a != 0, enc), encode(table(b), b != 0, enc))


@pytest.mark.parametrize("kind", KINDS)
def test_gradcheck_small(kind):
    torch.manual_seed(4)
    enc = make(kind, d=4, layers=2).double()
    x = torch.randn(2, 5, 4, dtype=torch.float64, requires_grad=True)
    mask = torch.tensor([[0, 0, 1, 1, 1], [1, 1, 1, 1, 1]], dtype=torch.bool)
    x_masked = lambda t: t * mask[..., None]
    assert torch.autograd.gradcheck(lambda t: enc(x_masked(t), mask), (x,), eps=1e-6, atol=1e-5)


def test_padding_row_gets_no_gradient():
    table = ItemEmbeddingTable(10, 4)
    hist = padded([[1, 2]], 4)
    enc = make("gru", d=4)
    encode(table(hist), hist != 0, enc).sum().backward()
    assert torch.all(table.weight.grad[0] == 0)
    assert torch.all(table.weight[0] == 0)
    assert torch.all(table.weight.grad[5] == 0)
    assert table.weight.grad[1].abs().sum() > 0


def test_embed_out_of_range():
    table = ItemEmbeddingTable(10, 4)
    with pytest.raises(IndexError):
        embed_sequence(torch.tensor([[0, 11]]), table)
    with pytest.raises(IndexError):
        embed_sequence(torch.tensor([[-1, 2]]), table)


def test_encode_shape_errors():
    enc = make("gru")
    with pytest.raises(ValueError):
        encode(torch.zeros(2, 5, 7), torch.ones(2, 5, dtype=torch.bool), enc)
    with pytest.raises(ValueError):
        encode(torch.zeros(2, 5, 8), torch.zeros(2, 5, dtype=torch.bool), enc)


def test_history_longer_than_positions():
    enc = make("self_attention", max_len=4)
    with pytest.raises(ValueError):
        enc(torch.zeros(1, 6, 8), torch.ones(1, 6, dtype=torch.bool))


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig("lstm")
    with pytest.raises(ValueError):
        EncoderConfig(hidden_size=63, heads=2)
    assert isinstance(build_encoder(EncoderConfig("gru")), GRUEncoder)
    assert isinstance(build_encoder(EncoderConfig()), SelfAttentionEncoder)
