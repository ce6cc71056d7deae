"""Masked autoencoder over microstructure images.

Patchification, uniform random masking, a pre-norm ViT encoder with a
[cls] token, a lightweight transformer decoder with a shared mask token,
and the masked-only MSE objective. Positional embeddings are fixed 2D
sine-cosine, keyed to original patch indices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import Checkpoint, save_checkpoint, load_checkpoint
from .imageio import read_pgm
from .manifest import DatasetManifest


@dataclass(frozen=True)
class MmaeConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    encoder_depth: int = 4
    encoder_heads: int = 4
    decoder_dim: int = 48
    decoder_depth: int = 2
    decoder_heads: int = 4
    mask_ratio: float = 0.85

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError("image size must be divisible by patch size")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError("mask ratio must lie in (0, 1)")
        for dim, heads, what in ((self.embed_dim, self.encoder_heads, "encoder"),
                                 (self.decoder_dim, self.decoder_heads, "decoder")):
            if dim % heads != 0:
                raise ValueError(f"{what} dim {dim} not divisible by {heads} heads")
            if dim % 4 != 0:
                raise ValueError(f"{what} dim {dim} must be divisible by 4 (sincos embedding)")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid_size ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2


DESK_CONFIG = MmaeConfig()
FULL_SCALE_CONFIG = MmaeConfig(image_size=224, patch_size=16, embed_dim=768,
                          encoder_depth=12, encoder_heads=12, decoder_dim=512,
                          decoder_depth=8, decoder_heads=16, mask_ratio=0.85)


@dataclass(frozen=True)
class MaskPlan:
    n_patches: int
    visible_indices: tuple
    masked_indices: tuple
    seed: int | None = None


def visible_count(n_patches: int, mask_ratio: float) -> int:
    return int(math.floor((1.0 - mask_ratio) * n_patches))


def sample_mask(n_patches: int, mask_ratio: float, seed: int) -> MaskPlan:
    """Uniformly random patch subset; visible count follows the floor rule."""
    if not 0.0 < mask_ratio < 1.0:
        raise ValueError("mask ratio must lie in (0, 1)")
    v = visible_count(n_patches, mask_ratio)
    if v == 0 or v == n_patches:
        raise ValueError(f"mask ratio {mask_ratio} leaves no visible or no masked patches")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    perm = rng.permutation(n_patches)
    return MaskPlan(
        n_patches=n_patches,
        visible_indices=tuple(int(i) for i in np.sort(perm[:v])),
        masked_indices=tuple(int(i) for i in np.sort(perm[v:])),
        seed=seed,
    )


def sample_mask_batch(rng: np.random.Generator, batch: int, n_patches: int,
                      mask_ratio: float) -> tuple[np.ndarray, np.ndarray]:
    """(visible, masked) index arrays of shape (batch, V) and (batch, M)."""
    v = visible_count(n_patches, mask_ratio)
    if v == 0 or v == n_patches:
        raise ValueError(f"mask ratio {mask_ratio} leaves no visible or no masked patches")
    noise = rng.random((batch, n_patches))
    order = np.argsort(noise, axis=1)
    return np.sort(order[:, :v], axis=1), np.sort(order[:, v:], axis=1)


# -- patch geometry -----------------------------------------------------


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """(H, W) image -> (n_patches, patch_size^2) tokens in [0, 1].

    Patches and the pixels within each patch are ordered row-major.
    """
    image = np.asarray(image)
    h, w = image.shape
    if h != w or h % patch_size != 0:
        raise ValueError(f"image {image.shape} incompatible with patch size {patch_size}")
    g = h // patch_size
    tokens = image.reshape(g, patch_size, g, patch_size).transpose(0, 2, 1, 3)
    return tokens.reshape(g * g, patch_size * patch_size).astype(np.float64) / 255.0


def unpatchify(tokens: np.ndarray, patch_size: int) -> np.ndarray:
    """Inverse of patchify, returning the [0, 1] float image."""
    tokens = np.asarray(tokens)
    g = int(round(math.sqrt(tokens.shape[0])))
    if g * g != tokens.shape[0] or tokens.shape[1] != patch_size * patch_size:
        raise ValueError(f"token matrix {tokens.shape} is not a square patch grid")
    img = tokens.reshape(g, g, patch_size, patch_size).transpose(0, 2, 1, 3)
    return img.reshape(g * patch_size, g * patch_size)


def _sincos_1d(dim: int, positions: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000.0 ** (np.arange(dim // 2) / (dim / 2.0))
    angles = np.outer(positions, omega)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def sincos_2d(dim: int, grid: int) -> np.ndarray:
    """Fixed 2D sine-cosine positional table, one row per patch (row-major)."""
    ys, xs = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    return np.concatenate(
        [_sincos_1d(dim // 2, ys.ravel()), _sincos_1d(dim // 2, xs.ravel())], axis=1
    )


# -- model --------------------------------------------------------------


def _linear(x, w, b):
    return ad.matmul(x, w) + b


def _attention(x: Tensor, p: dict, prefix: str, heads: int) -> Tensor:
    batch, seq, dim = x.shape
    dh = dim // heads
    q = _linear(x, p[f"{prefix}.wq"], p[f"{prefix}.bq"])
    k = _linear(x, p[f"{prefix}.wk"], p[f"{prefix}.bk"])
    v = _linear(x, p[f"{prefix}.wv"], p[f"{prefix}.bv"])

    def split(t):
        return ad.transpose(ad.reshape(t, (batch, seq, heads, dh)), (0, 2, 1, 3))

    q, k, v = split(q), split(k), split(v)
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    ctx = ad.matmul(ad.softmax(scores), v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (batch, seq, dim))
    return _linear(ctx, p[f"{prefix}.wo"], p[f"{prefix}.bo"])


def _mlp(x: Tensor, p: dict, prefix: str) -> Tensor:
    return _linear(ad.gelu(_linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"])),
                   p[f"{prefix}.w2"], p[f"{prefix}.b2"])


def _block(x: Tensor, p: dict, prefix: str, heads: int) -> Tensor:
    x = x + _attention(ad.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"]),
                       p, f"{prefix}.attn", heads)
    return x + _mlp(ad.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"]),
                    p, f"{prefix}.mlp")


class MmaeModel:
    """Parameter store plus the encoder/decoder forward graphs."""

    def __init__(self, cfg: MmaeConfig, seed: int = 0,
                 params: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        self.enc_pos = sincos_2d(cfg.embed_dim, cfg.grid_size)
        self.dec_pos = sincos_2d(cfg.decoder_dim, cfg.grid_size)
        if params is None:
            params = _init_params(cfg, seed)
        self.params = {name: Tensor(np.array(v, dtype=np.float64), requires_grad=True)
                       for name, v in params.items()}

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "MmaeModel":
        cfg = MmaeConfig(**ckpt.config)
        return cls(cfg, params=ckpt.params)

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    # -- forward pieces -------------------------------------------------

    def encode(self, tokens, visible_idx: np.ndarray) -> Tensor:
        """Visible tokens (B, V, patch_dim) -> latents (B, 1+V, embed_dim).

        ``visible_idx`` carries the original patch indices so positional
        embeddings stay keyed to image positions. Row 0 is [cls].
        """
        tokens = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
        p = self.params
        batch = tokens.shape[0]
        x = _linear(tokens, p["patch_embed.w"], p["patch_embed.b"])
        x = x + Tensor(self.enc_pos[visible_idx])
        cls = Tensor(np.zeros((batch, 1, self.cfg.embed_dim))) + p["cls_token"]
        x = ad.concat([cls, x], axis=1)
        for i in range(self.cfg.encoder_depth):
            x = _block(x, p, f"enc.blocks.{i}", self.cfg.encoder_heads)
        return ad.layer_norm(x, p["enc.norm.g"], p["enc.norm.b"])

    def encode_all(self, tokens) -> Tensor:
        """Encode with every patch visible (transfer-time path)."""
        tokens = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
        batch = tokens.shape[0]
        idx = np.broadcast_to(np.arange(self.cfg.n_patches), (batch, self.cfg.n_patches))
        return self.encode(tokens, idx)

    def decode(self, latents: Tensor, visible_idx: np.ndarray,
               masked_idx: np.ndarray) -> Tensor:
        """Latents -> reconstructed patch matrix (B, n_patches, patch_dim)."""
        cfg = self.cfg
        p = self.params
        batch, n_vis = visible_idx.shape
        if latents.shape[1] != 1 + n_vis:
            raise ad.ShapeError(
                f"decode: latents {latents.shape} do not match plan with {n_vis} visible")
        n_mask = masked_idx.shape[1]
        x = _linear(latents, p["dec.embed.w"], p["dec.embed.b"])
        mask_tokens = Tensor(np.zeros((batch, n_mask, cfg.decoder_dim))) + p["mask_token"]
        x = ad.concat([x, mask_tokens], axis=1)  # (B, 1+V+M, D)

        # reorder so row 1+p holds patch p; row 0 stays [cls]
        full = np.concatenate([visible_idx, masked_idx], axis=1)
        inv = np.argsort(full, axis=1)
        order = np.concatenate([np.zeros((batch, 1), dtype=np.int64), 1 + inv], axis=1)
        x = ad.gather_rows(x, order)

        pos = np.concatenate([np.zeros((1, cfg.decoder_dim)), self.dec_pos], axis=0)
        x = x + Tensor(pos)
        for i in range(cfg.decoder_depth):
            x = _block(x, p, f"dec.blocks.{i}", cfg.decoder_heads)
        x = ad.layer_norm(x, p["dec.norm.g"], p["dec.norm.b"])
        x = _linear(x, p["dec.head.w"], p["dec.head.b"])
        return ad.slice_axis(x, 1, 1, 1 + cfg.n_patches)

    def forward_loss(self, tokens_np: np.ndarray, visible_idx: np.ndarray,
                     masked_idx: np.ndarray) -> Tensor:
        vis_tokens = np.take_along_axis(tokens_np, visible_idx[:, :, None], axis=1)
        latents = self.encode(vis_tokens, visible_idx)
        recon = self.decode(latents, visible_idx, masked_idx)
        return masked_mse(recon, tokens_np, masked_idx)


def masked_mse(recon: Tensor, original_tokens: np.ndarray,
               masked_idx: np.ndarray) -> Tensor:
    """Mean squared pixel error over masked patches only."""
    if masked_idx.size == 0:
        raise ValueError("masked index set is empty")
    if recon.shape[:2] != original_tokens.shape[:2]:
        raise ad.ShapeError(
            f"masked_mse: reconstruction {recon.shape} vs targets {original_tokens.shape}")
    rm = ad.gather_rows(recon, masked_idx)
    tm = np.take_along_axis(np.asarray(original_tokens), masked_idx[:, :, None], axis=1)
    diff = rm - Tensor(tm)
    return ad.mean(diff * diff)


def _init_params(cfg: MmaeConfig, seed: int) -> dict[str, np.ndarray]:
    """Truncated-normal (std 0.02) projections, zero biases, unit LN scales."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xA11])))
    params: dict[str, np.ndarray] = {}

    def tn(shape):
        return ad.truncated_normal(rng, shape)

    def block(prefix, dim):
        params[f"{prefix}.ln1.g"] = np.ones(dim)
        params[f"{prefix}.ln1.b"] = np.zeros(dim)
        for w in ("wq", "wk", "wv", "wo"):
            params[f"{prefix}.attn.{w}"] = tn((dim, dim))
        for b in ("bq", "bk", "bv", "bo"):
            params[f"{prefix}.attn.{b}"] = np.zeros(dim)
        params[f"{prefix}.ln2.g"] = np.ones(dim)
        params[f"{prefix}.ln2.b"] = np.zeros(dim)
        params[f"{prefix}.mlp.w1"] = tn((dim, 4 * dim))
        params[f"{prefix}.mlp.b1"] = np.zeros(4 * dim)
        params[f"{prefix}.mlp.w2"] = tn((4 * dim, dim))
        params[f"{prefix}.mlp.b2"] = np.zeros(dim)

    params["patch_embed.w"] = tn((cfg.patch_dim, cfg.embed_dim))
    params["patch_embed.b"] = np.zeros(cfg.embed_dim)
    params["cls_token"] = tn((1, 1, cfg.embed_dim))
    for i in range(cfg.encoder_depth):
        block(f"enc.blocks.{i}", cfg.embed_dim)
    params["enc.norm.g"] = np.ones(cfg.embed_dim)
    params["enc.norm.b"] = np.zeros(cfg.embed_dim)

    params["dec.embed.w"] = tn((cfg.embed_dim, cfg.decoder_dim))
    params["dec.embed.b"] = np.zeros(cfg.decoder_dim)
    params["mask_token"] = tn((1, 1, cfg.decoder_dim))
    for i in range(cfg.decoder_depth):
        block(f"dec.blocks.{i}", cfg.decoder_dim)
    params["dec.norm.g"] = np.ones(cfg.decoder_dim)
    params["dec.norm.b"] = np.zeros(cfg.decoder_dim)
    params["dec.head.w"] = tn((cfg.decoder_dim, cfg.patch_dim))
    params["dec.head.b"] = np.zeros(cfg.patch_dim)
    return params


# -- training -----------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1.5e-3


def load_tokens(manifest: DatasetManifest, cfg: MmaeConfig) -> np.ndarray:
    """All manifest images as a (N, n_patches, patch_dim) token stack."""
    tokens = []
    for record in manifest.records:
        image = read_pgm(manifest.resolve(record))
        if image.shape != (cfg.image_size, cfg.image_size):
            raise ValueError(
                f"image {record.id} has shape {image.shape}, expected {cfg.image_size}")
        tokens.append(patchify(image, cfg.patch_size))
    return np.stack(tokens)


def pretrain(manifest: DatasetManifest, cfg: MmaeConfig, train_cfg: TrainConfig,
             seed: int, out_path, curve_path=None) -> MmaeModel:
    """Adam pre-training on the masked-only MSE; deterministic under the seed.

    Writes the checkpoint to ``out_path`` and, optionally, a per-epoch
    (epoch, masked_mse) training curve CSV.
    """
    tokens_all = load_tokens(manifest, cfg)
    model = MmaeModel(cfg, seed=seed)
    opt = ad.Adam(model.params, lr=train_cfg.learning_rate)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x7121])))
    n = tokens_all.shape[0]
    curve: list[tuple[int, float]] = []
    steps = 0
    epoch_loss = math.nan
    for epoch in range(train_cfg.epochs):
        perm = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, train_cfg.batch_size):
            batch_idx = perm[start:start + train_cfg.batch_size]
            batch = tokens_all[batch_idx]
            vis, masked = sample_mask_batch(rng, len(batch_idx), cfg.n_patches, cfg.mask_ratio)
            loss = model.forward_loss(batch, vis, masked)
            if not loss.is_finite():
                raise ad.NonFiniteError(
                    f"non-finite loss at epoch {epoch}, step {steps}")
            loss.backward()
            opt.step()
            total += loss.item() * len(batch_idx)
            count += len(batch_idx)
            steps += 1
        epoch_loss = total / count
        curve.append((epoch, epoch_loss))
    if curve_path is not None:
        with open(curve_path, "w", encoding="utf-8") as f:
            f.write("epoch,masked_mse\n")
            for epoch, value in curve:
                f.write(f"{epoch},{value!r}\n")
    save_checkpoint(out_path, asdict(cfg), model.state(), metadata={
        "steps": steps,
        "seed": seed,
        "final_loss": epoch_loss,
        "mask_ratio": cfg.mask_ratio,
        "weight_init": "trunc_normal(0.02), zero biases, unit layer-norm scales",
        "train": asdict(train_cfg),
    })
    return model


def evaluate_masked_mse(model: MmaeModel, tokens_all: np.ndarray, seed: int,
                        batch_size: int = 64) -> float:
    """Masked MSE of the model over a seeded evaluation mask pass."""
    cfg = model.cfg
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xE7A1])))
    total, count = 0.0, 0
    for start in range(0, tokens_all.shape[0], batch_size):
        batch = tokens_all[start:start + batch_size]
        vis, masked = sample_mask_batch(rng, batch.shape[0], cfg.n_patches, cfg.mask_ratio)
        loss = model.forward_loss(batch, vis, masked)
        total += loss.item() * batch.shape[0]
        count += batch.shape[0]
    return total / count


def constant_baseline_masked_mse(tokens_all: np.ndarray, value: float, mask_ratio: float,
                                 seed: int, batch_size: int = 64) -> float:
    """Masked MSE of the constant predictor, same mask draws as the model pass."""
    n_patches = tokens_all.shape[1]
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xE7A1])))
    total, count = 0.0, 0
    for start in range(0, tokens_all.shape[0], batch_size):
        batch = tokens_all[start:start + batch_size]
        _, masked = sample_mask_batch(rng, batch.shape[0], n_patches, mask_ratio)
        tm = np.take_along_axis(batch, masked[:, :, None], axis=1)
        total += float(np.mean((tm - value) ** 2)) * batch.shape[0]
        count += batch.shape[0]
    return total / count


# -- reconstruction triptychs -------------------------------------------


def reconstruct(model: MmaeModel, image: np.ndarray, mask_ratio: float,
                seed: int) -> dict[str, np.ndarray]:
    """Original / masked-view / composited-reconstruction triptych.

    The composite pastes the original visible patches over the model's
    output; the raw model output is returned alongside.
    """
    cfg = model.cfg
    tokens = patchify(image, cfg.patch_size)[None]
    plan = sample_mask(cfg.n_patches, mask_ratio, seed)
    vis = np.array(plan.visible_indices)[None]
    masked = np.array(plan.masked_indices)[None]
    vis_tokens = np.take_along_axis(tokens, vis[:, :, None], axis=1)
    latents = model.encode(vis_tokens, vis)
    recon = model.decode(latents, vis, masked).data[0]

    masked_view = tokens[0].copy()
    masked_view[masked[0]] = 128.0 / 255.0
    composite = recon.copy()
    composite[vis[0]] = tokens[0][vis[0]]

    def to_img(t):
        return np.clip(np.rint(unpatchify(t, cfg.patch_size) * 255.0), 0, 255).astype(np.uint8)

    return {
        "original": to_img(tokens[0]),
        "masked": to_img(masked_view),
        "composite": to_img(composite),
        "raw": unpatchify(recon, cfg.patch_size),
        "plan": plan,
    }


def masked_region_mse(model: MmaeModel, image: np.ndarray, mask_ratio: float,
                      seed: int) -> float:
    """Reconstruction MSE over the masked patches of a single image."""
    cfg = model.cfg
    tokens = patchify(image, cfg.patch_size)[None]
    plan = sample_mask(cfg.n_patches, mask_ratio, seed)
    vis = np.array(plan.visible_indices)[None]
    masked = np.array(plan.masked_indices)[None]
    vis_tokens = np.take_along_axis(tokens, vis[:, :, None], axis=1)
    latents = model.encode(vis_tokens, vis)
    recon = model.decode(latents, vis, masked)
    return masked_mse(recon, tokens, masked).item()
