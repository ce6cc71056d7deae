"""Unit tests for patchify/masking/encoder/decoder and pre-training."""

import numpy as np
import pytest

from microforge import mmae
from microforge.autodiff import Tensor
from microforge.checkpoint import load_checkpoint


def random_image(size, seed=0):
    return (np.random.default_rng(seed).integers(0, 2, (size, size)) * 255).astype(np.uint8)


# -- patchify ------------------------------------------------------------


def test_patchify_geometry_224():
    tokens = mmae.patchify(random_image(224, 1), 16)
    assert tokens.shape == (196, 256)


def test_patchify_constant_image():
    img = np.full((64, 64), 51, dtype=np.uint8)
    tokens = mmae.patchify(img, 8)
    np.testing.assert_allclose(tokens, 0.2, atol=1e-15)


def test_unpatchify_inverse():
    img = random_image(64, 2)
    tokens = mmae.patchify(img, 8)
    back = mmae.unpatchify(tokens, 8)
    np.testing.assert_array_equal((back * 255).astype(np.uint8), img)


# -- masking -------------------------------------------------------------


def test_mask_pin_196_at_085():
    plan = mmae.sample_mask(196, 0.85, seed=0)
    assert len(plan.visible_indices) == 29
    assert len(plan.masked_indices) == 167


def test_visible_count_floor_rule():
    assert mmae.visible_count(64, 0.75) == 16


def test_mask_partition_is_exact():
    plan = mmae.sample_mask(64, 0.75, seed=3)
    both = sorted(plan.visible_indices) + sorted(plan.masked_indices)
    assert sorted(both) == list(range(64))


def test_mask_frequencies_unbiased():
    rng = np.random.default_rng(0)
    n_draws, n_patches, ratio = 10_000, 64, 0.75
    counts = np.zeros(n_patches)
    for _ in range(n_draws // 100):
        _, masked = mmae.sample_mask_batch(rng, 100, n_patches, ratio)
        for row in masked:
            counts[row] += 1
    freq = counts / n_draws
    sigma = np.sqrt(ratio * (1 - ratio) / n_draws)
    assert np.all(np.abs(freq - ratio) < 4 * sigma)


def test_degenerate_mask_ratio_rejected():
    with pytest.raises(ValueError):
        mmae.sample_mask(4, 0.99, seed=0)  # nothing left visible


# -- encoder -------------------------------------------------------------


def test_encoder_output_shape_full_scale():
    cfg = mmae.FULL_SCALE_CONFIG
    small = mmae.MmaeConfig(image_size=224, patch_size=16, embed_dim=32,
                            encoder_depth=1, encoder_heads=2, decoder_dim=16,
                            decoder_depth=1, decoder_heads=2, mask_ratio=0.85)
    model = mmae.MmaeModel(small, seed=0)
    plan = mmae.sample_mask(cfg.n_patches, 0.85, seed=1)
    vis = np.array(plan.visible_indices)[None]
    tokens = np.random.default_rng(0).random((1, 29, 256))
    out = model.encode(tokens, vis)
    assert out.shape == (1, 30, 32)


def test_encoder_permutation_equivariance(tiny_cfg, tiny_model):
    rng = np.random.default_rng(4)
    plan = mmae.sample_mask(tiny_cfg.n_patches, tiny_cfg.mask_ratio, seed=9)
    vis = np.array(plan.visible_indices)
    tokens = rng.random((1, len(vis), tiny_cfg.patch_dim))
    base = tiny_model.encode(tokens, vis[None]).data[0, 0]
    perm = rng.permutation(len(vis))
    swapped = tiny_model.encode(tokens[:, perm], vis[perm][None]).data[0, 0]
    np.testing.assert_allclose(base, swapped, atol=1e-10)


def test_encoder_zero_weights_degenerate(tiny_cfg):
    model = mmae.MmaeModel(tiny_cfg, seed=0)
    for name, p in model.params.items():
        if name.startswith(("enc.", "patch_embed")) and not name.startswith("enc.norm"):
            p.data[...] = 0.0
        if name.endswith("ln1.g") or name.endswith("ln2.g"):
            p.data[...] = 1.0
    plan = mmae.sample_mask(tiny_cfg.n_patches, tiny_cfg.mask_ratio, seed=2)
    vis = np.array(plan.visible_indices)[None]
    for seed in (1, 2):
        tokens = np.random.default_rng(seed).random((1, vis.shape[1], tiny_cfg.patch_dim))
        cls = model.encode(tokens, vis).data[0, 0]
        if seed == 1:
            first = cls
    np.testing.assert_allclose(first, cls, atol=1e-12)


# -- decoder -------------------------------------------------------------


def test_decoder_output_shape(tiny_cfg, tiny_model):
    plan = mmae.sample_mask(tiny_cfg.n_patches, tiny_cfg.mask_ratio, seed=5)
    vis = np.array(plan.visible_indices)[None]
    msk = np.array(plan.masked_indices)[None]
    tokens = np.random.default_rng(1).random((1, vis.shape[1], tiny_cfg.patch_dim))
    latents = tiny_model.encode(tokens, vis)
    recon = tiny_model.decode(latents, vis, msk)
    assert recon.shape == (1, tiny_cfg.n_patches, tiny_cfg.patch_dim)


def test_decoder_masked_positions_differ(tiny_cfg, tiny_model):
    plan = mmae.sample_mask(tiny_cfg.n_patches, tiny_cfg.mask_ratio, seed=6)
    vis = np.array(plan.visible_indices)[None]
    msk = np.array(plan.masked_indices)[None]
    tokens = np.random.default_rng(2).random((1, vis.shape[1], tiny_cfg.patch_dim))
    recon = tiny_model.decode(tiny_model.encode(tokens, vis), vis, msk).data
    m0, m1 = plan.masked_indices[0], plan.masked_indices[1]
    assert not np.allclose(recon[0, m0], recon[0, m1])


def test_decoder_depth_zero_short_circuit():
    cfg = mmae.MmaeConfig(image_size=32, patch_size=8, embed_dim=16,
                          encoder_depth=1, encoder_heads=2, decoder_dim=16,
                          decoder_depth=0, decoder_heads=2, mask_ratio=0.75)
    model = mmae.MmaeModel(cfg, seed=3)
    plan = mmae.sample_mask(cfg.n_patches, cfg.mask_ratio, seed=7)
    vis = np.array(plan.visible_indices)[None]
    msk = np.array(plan.masked_indices)[None]
    tokens = np.random.default_rng(3).random((1, vis.shape[1], cfg.patch_dim))
    recon = model.decode(model.encode(tokens, vis), vis, msk).data

    p = {k: v.data for k, v in model.params.items()}
    g, b = p["dec.norm.g"], p["dec.norm.b"]
    for pos in plan.masked_indices:
        row = p["mask_token"].ravel() + model.dec_pos[pos]
        mu, var = row.mean(), row.var()
        normed = (row - mu) / np.sqrt(var + 1e-10) * g + b
        expected = normed @ p["dec.head.w"] + p["dec.head.b"]
        np.testing.assert_allclose(recon[0, pos], expected, atol=1e-10)


# -- loss ----------------------------------------------------------------


def test_masked_mse_zero_for_perfect_recon(tiny_cfg):
    tokens = np.random.default_rng(4).random((2, tiny_cfg.n_patches, tiny_cfg.patch_dim))
    _, msk = mmae.sample_mask_batch(np.random.default_rng(1), 2,
                                    tiny_cfg.n_patches, tiny_cfg.mask_ratio)
    loss = mmae.masked_mse(Tensor(tokens), tokens, msk)
    assert float(loss.data) == 0.0


def test_masked_mse_ignores_visible_positions(tiny_cfg):
    rng = np.random.default_rng(5)
    tokens = rng.random((1, tiny_cfg.n_patches, tiny_cfg.patch_dim))
    vis, msk = mmae.sample_mask_batch(rng, 1, tiny_cfg.n_patches, tiny_cfg.mask_ratio)
    recon = tokens.copy()
    base = float(mmae.masked_mse(Tensor(recon), tokens, msk).data)
    recon2 = recon.copy()
    recon2[0, vis[0, 0]] += 123.0
    bumped = float(mmae.masked_mse(Tensor(recon2), tokens, msk).data)
    assert base == bumped == 0.0


def test_masked_mse_counts_ones_of_binary_tokens(tiny_cfg):
    rng = np.random.default_rng(6)
    tokens = (rng.random((1, tiny_cfg.n_patches, tiny_cfg.patch_dim)) < 0.4).astype(float)
    _, msk = mmae.sample_mask_batch(rng, 1, tiny_cfg.n_patches, tiny_cfg.mask_ratio)
    loss = float(mmae.masked_mse(Tensor(np.zeros_like(tokens)), tokens, msk).data)
    frac_ones = tokens[0, msk[0]].mean()
    assert loss == pytest.approx(frac_ones, abs=1e-12)


# -- positional embeddings ----------------------------------------------


def test_sincos_rows_distinct_and_bounded():
    pos = mmae.sincos_2d(16, 4)
    assert pos.shape == (16, 16)
    assert np.max(np.abs(pos)) <= 1.0 + 1e-12
    assert len({tuple(np.round(r, 12)) for r in pos}) == 16


# -- pre-training -------------------------------------------------------


def test_pretrain_descends_and_checkpoints(fiber_dataset, tiny_cfg, tmp_path):
    manifest, _ = fiber_dataset
    curve = tmp_path / "curve.csv"
    model = mmae.pretrain(manifest, tiny_cfg,
                          mmae.TrainConfig(epochs=2, batch_size=20, learning_rate=2e-3),
                          seed=1, out_path=tmp_path / "m.ckpt", curve_path=curve)
    lines = curve.read_text().strip().splitlines()
    assert lines[0] == "epoch,masked_mse"
    losses = [float(line.split(",")[1]) for line in lines[1:]]
    assert len(losses) == 2 and losses[-1] < losses[0]

    ckpt = load_checkpoint(tmp_path / "m.ckpt")
    again = mmae.MmaeModel.from_checkpoint(ckpt)
    for name, p in model.params.items():
        np.testing.assert_array_equal(p.data, again.params[name].data)


def test_pretrain_deterministic_checkpoint_bytes(fiber_dataset, tiny_cfg, tmp_path):
    manifest, _ = fiber_dataset
    tc = mmae.TrainConfig(epochs=1, batch_size=20, learning_rate=2e-3)
    mmae.pretrain(manifest, tiny_cfg, tc, seed=9, out_path=tmp_path / "a.ckpt")
    mmae.pretrain(manifest, tiny_cfg, tc, seed=9, out_path=tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_trained_beats_random_on_masked_mse(fiber_dataset, tiny_cfg, pretrained_tiny):
    manifest, _ = fiber_dataset
    model, _ = pretrained_tiny
    tokens = mmae.load_tokens(manifest, tiny_cfg)
    trained = mmae.evaluate_masked_mse(model, tokens, seed=11)
    random_init = mmae.evaluate_masked_mse(mmae.MmaeModel(tiny_cfg, seed=77), tokens, seed=11)
    assert trained < random_init


# -- reconstruction views -----------------------------------------------


def test_reconstruct_views(fiber_dataset, tiny_cfg, pretrained_tiny):
    from microforge.imageio import read_pgm
    manifest, _ = fiber_dataset
    model, _ = pretrained_tiny
    img = read_pgm(manifest.resolve(manifest.records[0]))
    trip = mmae.reconstruct(model, img, tiny_cfg.mask_ratio, seed=4)
    for key in ("original", "masked", "composite"):
        assert trip[key].shape == img.shape
    plan = trip["plan"]
    comp = trip["composite"]
    for pos in plan.visible_indices:
        g = tiny_cfg.grid_size
        r, c = divmod(pos, g)
        ps = tiny_cfg.patch_size
        np.testing.assert_array_equal(
            comp[r * ps:(r + 1) * ps, c * ps:(c + 1) * ps],
            img[r * ps:(r + 1) * ps, c * ps:(c + 1) * ps])
