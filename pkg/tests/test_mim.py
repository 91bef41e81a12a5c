import numpy as np
import pytest
import torch

from lungrisk.encoder import EncoderConfig
from lungrisk.mim import DecoderConfig, MaskedAutoencoder, mae_forward, mae_loss, random_mask
from lungrisk.tokenizer import patchify


def tiny_mae(dtype=torch.float32):
    m = MaskedAutoencoder((2, 2, 2), (4, 4, 4), EncoderConfig(24, 1, 2), DecoderConfig(12, 1, 2))
    return m.to(dtype).eval()


def test_decoder_defaults():
    p = DecoderConfig.full_scale()
    assert (p.embed_dim, p.depth, p.num_heads) == (396, 4, 6)
    assert (DecoderConfig().embed_dim, DecoderConfig().depth, DecoderConfig().num_heads) == (48, 2, 2)


def test_mask_counts_and_partition(rng):
    plan = random_mask(512, 0.75, rng)
    assert len(plan.masked_indices) == 384 and len(plan.visible_indices) == 128
    both = np.concatenate([plan.masked_indices, plan.visible_indices])
    assert np.array_equal(np.sort(both), np.arange(512))


@pytest.mark.parametrize("n,ratio", [(2, 0.1), (10, 0.99), (10, 0.0), (1, 0.5)])
def test_mask_degenerate(n, ratio, rng):
    with pytest.raises(ValueError):
        random_mask(n, ratio, rng)


def test_mask_deterministic():
    a = random_mask(64, 0.5, np.random.default_rng(3))
    b = random_mask(64, 0.5, np.random.default_rng(3))
    assert np.array_equal(a.masked_indices, b.masked_indices)


def test_mask_uniformity():
    rng = np.random.default_rng(5)
    counts = np.zeros(100)
    for _ in range(10_000):
        counts[random_mask(100, 0.5, rng).masked_indices] += 1
    assert np.max(np.abs(counts / 10_000 - 0.5)) <= 0.02


def test_forward_shape_and_encoder_length(rng):
    m = tiny_mae()
    g = patchify(rng.uniform(-1, 1, (8, 8, 8)).astype(np.float32), (4, 4, 4))
    plan = random_mask(8, 0.75, rng)
    seen = []
    h = m.encoder.register_forward_hook(lambda mod, inp, out: seen.append(inp[0].shape[1]))
    out = mae_forward(g, plan, m)
    h.remove()
    assert out.shape == (8, 64)
    assert seen == [len(plan.visible_indices) + 1]


def test_masked_content_does_not_reach_encoder(rng):
    m = tiny_mae()
    g = patchify(rng.uniform(-1, 1, (8, 8, 8)).astype(np.float32), (4, 4, 4))
    plan = random_mask(8, 0.5, rng)
    t = torch.as_tensor(g.tokens)[None]
    swapped = t.clone()
    swapped[0, plan.masked_indices] = torch.as_tensor(rng.uniform(-1, 1, (len(plan.masked_indices), 64)),
                                                      dtype=torch.float32)
    vis, _ = m.plan_tensors([plan])
    with torch.no_grad():
        assert torch.equal(m.forward_encoder(t, vis), m.forward_encoder(swapped, vis))


def test_loss_values(rng):
    target = torch.tensor(rng.normal(size=(8, 64)))
    plan = random_mask(8, 0.5, rng)
    assert float(mae_loss(target.clone(), target, plan)) == 0.0
    assert float(mae_loss(target + 1, target, plan)) == pytest.approx(1.0, abs=1e-12)
    bumped = target.clone()
    bumped[plan.visible_indices] += 123.0
    assert float(mae_loss(bumped, target, plan)) == 0.0
    assert float(mae_loss(target + 1, target, plan, masked_only=False)) == pytest.approx(1.0)


def test_loss_gradient_closed_form(rng):
    target = torch.tensor(rng.normal(size=(8, 64)))
    recon = torch.tensor(rng.normal(size=(8, 64)), requires_grad=True)
    plan = random_mask(8, 0.75, rng)
    mae_loss(recon, target, plan).backward()
    g = recon.grad
    assert torch.count_nonzero(g[plan.visible_indices]) == 0
    expected = 2 * (recon.detach() - target)[plan.masked_indices] / (len(plan.masked_indices) * 64)
    assert torch.max((g[plan.masked_indices] - expected).abs()) < 1e-8


def test_loss_errors():
    with pytest.raises(ValueError):
        mae_loss(torch.zeros(4, 3), torch.zeros(4, 3), torch.zeros(4, dtype=torch.bool))
    with pytest.raises(ValueError):
        mae_loss(torch.zeros(4, 3), torch.zeros(4, 2), torch.ones(4, dtype=torch.bool))
