import numpy as np
import pytest
import torch

import oracles
from oryx import posembed
from oryx.encoder import EncoderConfig, OryxViT, encode_packed, patch_embed, patchify
from oryx.errors import IntegrityError, ShapeError
from oryx.geometry import TooSmallError
from oryx.packing import pack
from oryx.structures import VisualInput


def image(h, w, c=3, seed=0):
    return VisualInput(torch.rand(h, w, c, generator=torch.Generator().manual_seed(seed)))


def test_gray_image_four_tokens():
    enc = OryxViT(EncoderConfig(in_chans=1))
    assert patch_embed(image(32, 32, 1), enc).shape == (4, 32)


def test_zero_image_zero_bias_gives_zero_tokens():
    enc = OryxViT(EncoderConfig())
    assert torch.count_nonzero(enc.patch_embed.bias) == 0
    assert torch.count_nonzero(patch_embed(VisualInput(torch.zeros(32, 48, 3)), enc)) == 0


def test_patch_embed_matches_scalar_oracle():
    enc = OryxViT(EncoderConfig(channels=8, heads=2, in_chans=2, patch_size=4)).double()
    with torch.no_grad():
        enc.patch_embed.bias.normal_()
    pixels = np.random.default_rng(0).random((12, 8, 2))  # 48x32 at p=16 scaled down to p=4
    out = patch_embed(VisualInput(torch.from_numpy(pixels)), enc).detach().numpy()
    w = enc.patch_embed.weight.detach().numpy()
    b = enc.patch_embed.bias.detach().numpy()
    np.testing.assert_allclose(out, oracles.patch_embed(pixels, w, b, 4), rtol=0, atol=1e-10)


def test_patch_embed_matches_oracle_at_p16():
    enc = OryxViT(EncoderConfig(channels=4, heads=2, in_chans=1)).double()
    pixels = np.random.default_rng(1).random((48, 32, 1))
    out = patch_embed(VisualInput(torch.from_numpy(pixels)), enc).detach().numpy()
    ref = oracles.patch_embed(pixels, enc.patch_embed.weight.detach().numpy(),
                              enc.patch_embed.bias.detach().numpy(), 16)
    assert out.shape == (6, 4)
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-10)


def test_patchify_drops_partial_patches():
    x = torch.arange(20 * 35 * 1, dtype=torch.float32).reshape(20, 35, 1)
    assert patchify(x, 16).shape == (2, 256)


def test_too_small_input():
    with pytest.raises(TooSmallError):
        patch_embed(image(8, 64), OryxViT())


def test_different_resolutions_get_their_own_grids():
    enc = OryxViT()
    maps = enc([image(48, 64), image(32, 80, seed=1)])
    assert [(m.rows, m.cols) for m in maps] == [(3, 4), (2, 5)]
    assert all(m.channels == 32 for m in maps)


def test_batch_invariance():
    enc = OryxViT()
    imgs = [image(48, 64), image(32, 80, seed=1), image(64, 64, seed=2)]
    with torch.no_grad():
        together = enc(imgs)
        alone = [enc([im])[0] for im in imgs]
    for a, b in zip(together, alone):
        assert torch.allclose(a.values, b.values, rtol=0, atol=1e-6)


def test_masked_strategy_matches_loop():
    enc = OryxViT()
    embedded = [enc.embed(im) for im in (image(48, 64), image(32, 32, seed=3))]
    batch = pack([t for t, _ in embedded])
    grids = [g for _, g in embedded]
    with torch.no_grad():
        a = encode_packed(batch, grids, enc, "loop")
        b = encode_packed(batch, grids, enc, "masked")
    for x, y in zip(a, b):
        assert torch.allclose(x.values, y.values, atol=1e-6)


def test_depth_zero_is_identity():
    enc = OryxViT(EncoderConfig(depth=0))
    tokens, grid = enc.embed(image(48, 32))
    fm = encode_packed(pack([tokens]), [grid], enc)[0]
    assert torch.equal(fm.values, tokens.reshape(3, 2, 32))


def test_embed_adds_interpolated_table():
    enc = OryxViT()
    im = image(48, 32)
    tokens, grid = enc.embed(im)
    pos = posembed.interpolate(enc.table, grid).reshape(-1, 32)
    assert torch.allclose(tokens, patch_embed(im, enc) + pos)


def test_grid_mismatch_rejected():
    enc = OryxViT()
    tokens, grid = enc.embed(image(48, 32))
    with pytest.raises(IntegrityError):
        encode_packed(pack([tokens, tokens]), [grid], enc)
    other = enc.grid_for(image(32, 32))
    with pytest.raises(IntegrityError):
        encode_packed(pack([tokens]), [other], enc)


def test_deterministic_per_seed_and_finite():
    a, b = OryxViT(EncoderConfig(seed=4)), OryxViT(EncoderConfig(seed=4))
    im = image(64, 48)
    with torch.no_grad():
        fa, fb = a([im])[0], b([im])[0]
    assert torch.equal(fa.values, fb.values)
    assert torch.isfinite(fa.values).all()


def test_config_validation():
    with pytest.raises(ShapeError):
        EncoderConfig(channels=30, heads=4)
    with pytest.raises(ValueError):
        EncoderConfig.from_dict({"channels": 32, "bogus": 1})
    assert EncoderConfig.from_dict(EncoderConfig(depth=3).to_dict()).depth == 3


def test_channel_mismatch():
    with pytest.raises(ShapeError):
        patch_embed(image(32, 32, c=1), OryxViT())
