import pytest
import torch

from gradcheck_util import max_rel_error, sample_indices
from lungrisk.encoder import Encoder, EncoderConfig, encoder_forward
from lungrisk.tokenizer import PatchEmbed


def small_encoder(dtype=torch.float32, depth=2):
    enc = Encoder(EncoderConfig(embed_dim=24, depth=depth, num_heads=2))
    return enc.to(dtype)


def coords_for(grid=(2, 2, 2)):
    return PatchEmbed(grid, (1, 1, 1), 6).token_coords()


def test_config_defaults():
    p = EncoderConfig.full_scale()
    assert (p.embed_dim, p.depth, p.num_heads, p.head_dim) == (792, 12, 12, 66)
    d = EncoderConfig.desk_scale()
    assert (d.embed_dim, d.depth, d.num_heads) == (96, 4, 4)
    with pytest.raises(ValueError):
        EncoderConfig(embed_dim=10, num_heads=3)


def test_shape_and_determinism():
    enc = small_encoder()
    x = torch.rand(9, 24) * 2 - 1
    a = encoder_forward(x, coords_for(), enc, train_mode=False)
    b = encoder_forward(x, coords_for(), enc, train_mode=False)
    assert a.shape == x.shape and torch.equal(a, b)


def test_shape_mismatch():
    enc = small_encoder()
    with pytest.raises(ValueError):
        enc(torch.zeros(1, 9, 16), coords_for())
    with pytest.raises(ValueError):
        enc(torch.zeros(1, 7, 24), coords_for())


def test_explicit_and_fused_attention_agree():
    enc = small_encoder(torch.float64).eval()
    x = torch.randn(2, 9, 24, dtype=torch.float64)
    fused = enc(x, coords_for())
    explicit, maps = enc(x, coords_for(), return_attn=True)
    assert torch.allclose(fused, explicit, atol=1e-12)
    for w in maps:
        assert torch.max((w.sum(-1) - 1).abs()) < 1e-6 and (w >= 0).all()


def test_finite_for_many_seeds():
    x = torch.rand(1, 9, 24) * 2 - 1
    for seed in range(100):
        torch.manual_seed(seed)
        enc = small_encoder(depth=1)
        assert torch.isfinite(enc(x, coords_for())).all()


def test_input_gradient_matches_finite_differences():
    enc = small_encoder(torch.float64).eval()
    x = torch.rand(1, 9, 24, dtype=torch.float64) * 2 - 1
    readout = torch.randn(9, 24, dtype=torch.float64)
    fn = lambda t: (enc(t, coords_for()) * readout).sum()
    assert max_rel_error(fn, x, sample_indices(x, 20)) < 1e-4


def test_every_parameter_gets_gradient():
    enc = small_encoder()
    x = torch.rand(2, 9, 24) * 2 - 1
    (enc(x, coords_for()) * torch.randn(2, 9, 24)).sum().backward()
    for name, p in enc.named_parameters():
        assert p.grad is not None and p.grad.abs().sum() > 0, name
