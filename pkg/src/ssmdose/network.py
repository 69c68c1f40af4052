"""Mamba-block U-Net noise predictor with an additive structure encoder.

Images enter as non-overlapping ``p x p`` patches flattened to a row-major
token sequence ``(B, L, C)``. Each encoder stage is one Mamba block; stages
are linked by 2x2 patch merging (channels double) and the decoder mirrors
them with 2x2 patch expansion (channels halve), concatenating the encoder
output of the same stage before a projection and a block. The structure
encoder repeats the encoder on the anatomy stack, and its stage outputs are
added to the denoiser's encoder stage outputs.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import MLP, CausalConv1d, LayerNorm, Linear, Module, count_parameters
from .ssm import SsmParams, selective_ssm

__all__ = [
    "UNetConfig",
    "MambaBlock",
    "MambaUNet",
    "StructureEncoder",
    "DoseDenoiser",
    "time_embedding",
    "patchify",
    "unpatchify",
    "patch_embed",
    "count_parameters",
]


@dataclass
class UNetConfig:
    image_size: int = 64
    patch_size: int = 4
    base_channels: int = 16
    depth: int = 4
    expansion: int = 2
    n_state: int = 8
    conv_kernel: int = 4
    time_embed_dim: int = 32
    in_channels: int = 1
    cond_channels: int = 5
    num_steps: int = 1000

    def validate(self) -> None:
        unit = self.patch_size * 2**self.depth
        if self.image_size % unit:
            raise ValueError(
                f"image_size {self.image_size} must be divisible by patch_size * 2**depth = {unit}"
            )
        if self.depth < 1 or self.base_channels < 1 or self.expansion < 1:
            raise ValueError("depth, base_channels and expansion must be positive")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if self.cond_channels < 3:
            raise ValueError("cond_channels must be 2 + number of organs at risk (>= 3)")
        smallest = (self.image_size // self.patch_size // 2 ** (self.depth - 1)) ** 2
        if self.conv_kernel > smallest:
            raise ValueError(f"conv_kernel {self.conv_kernel} exceeds the {smallest} tokens of the deepest stage")

    def stage_channels(self, s: int) -> int:
        return self.base_channels * 2**s

    def stage_grid(self, s: int) -> int:
        return self.image_size // self.patch_size // 2**s

    def to_dict(self) -> dict:
        return asdict(self)


def time_embedding(t, dim: int, num_steps: int) -> np.ndarray:
    """Sinusoidal embedding, ``[sin(t w_i)..., cos(t w_i)...]`` with ``w_i = 10000^(-i/(dim/2))``.

    ``t`` may be an int or an integer array of shape (B,); returns ``(dim,)``
    or ``(B, dim)``.
    """
    arr = np.asarray(t)
    if np.any(arr < 0) or np.any(arr >= num_steps) or np.any(arr != np.floor(arr)):
        raise ValueError(f"time_embedding: step {t} outside [0, {num_steps})")
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = arr.astype(np.float64)[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def patchify(image: Tensor, p: int) -> Tensor:
    """(B, C, H, W) -> (B, (H/p)(W/p), C p p), patches in row-major order."""
    image = ad.as_tensor(image)
    if image.ndim != 4:
        raise ValueError(f"patchify: expected (B, C, H, W), got {image.shape}")
    b, c, h, w = image.shape
    if h % p or w % p:
        raise ValueError(f"patchify: spatial extent {h}x{w} not divisible by patch size {p}")
    x = ad.reshape(image, (b, c, h // p, p, w // p, p))
    x = ad.transpose(x, (0, 2, 4, 1, 3, 5))
    return ad.reshape(x, (b, (h // p) * (w // p), c * p * p))


def unpatchify(tokens: Tensor, p: int, channels: int, h: int, w: int) -> Tensor:
    """Inverse of :func:`patchify`."""
    b = tokens.shape[0]
    x = ad.reshape(tokens, (b, h // p, w // p, channels, p, p))
    x = ad.transpose(x, (0, 3, 1, 4, 2, 5))
    return ad.reshape(x, (b, channels, h, w))


def patch_embed(image: Tensor, weight: Tensor, bias: Tensor | None, p: int) -> Tensor:
    """Linear map of every ``p x p x C`` patch to a token: (B, C, H, W) -> (B, L, C_out)."""
    return ad.linear(patchify(image, p), weight, bias)


class MambaBlock(Module):
    """LayerNorm, two expanded branches merged by a Hadamard product, residual.

    Branch one: linear expansion, causal depthwise conv, SiLU, selective SSM.
    Branch two: linear expansion, SiLU. The product is projected back to C
    channels, the block's time MLP output is added to every token, and the
    input is added back.
    """

    def __init__(self, dim: int, cfg: UNetConfig, rng: np.random.Generator, timed: bool = True):
        inner = cfg.expansion * dim
        self.norm = LayerNorm(dim)
        self.in_proj_a = Linear(dim, inner, rng)
        self.in_proj_b = Linear(dim, inner, rng)
        self.conv = CausalConv1d(inner, cfg.conv_kernel, rng)
        self.ssm = SsmParams(inner, cfg.n_state, rng)
        self.out_proj = Linear(inner, dim, rng)
        self.time_mlp = MLP(cfg.time_embed_dim, dim, dim, rng) if timed else None
        self.dim = dim

    def __call__(self, x: Tensor, t_emb: Tensor | None = None) -> Tensor:
        if x.ndim != 3 or x.shape[-1] != self.dim:
            raise ValueError(f"mamba_block: expected (B, L, {self.dim}) tokens, got {x.shape}")
        h = self.norm(x)
        a = selective_ssm(ad.silu(self.conv(self.in_proj_a(h))), self.ssm)
        g = ad.silu(self.in_proj_b(h))
        out = self.out_proj(ad.mul(a, g))
        if self.time_mlp is not None and t_emb is not None:
            out = ad.add(out, ad.broadcast_tokens(self.time_mlp(t_emb), x.shape[1]))
        return ad.add(x, out)


class PatchMerge(Module):
    """2x2 neighbouring tokens concatenated then projected: (h*w, C) -> (h/2*w/2, 2C)."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.proj = Linear(4 * dim, 2 * dim, rng)

    def __call__(self, x: Tensor, grid: int) -> Tensor:
        b, _, c = x.shape
        y = ad.reshape(x, (b, grid // 2, 2, grid // 2, 2, c))
        y = ad.transpose(y, (0, 1, 3, 2, 4, 5))
        y = ad.reshape(y, (b, (grid // 2) ** 2, 4 * c))
        return self.proj(y)


class PatchExpand(Module):
    """Linear expansion then 2x2 un-merge: (h*w, C) -> (2h*2w, C/2)."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.proj = Linear(dim, 2 * dim, rng)
        self.out_dim = dim // 2

    def __call__(self, x: Tensor, grid: int) -> Tensor:
        b = x.shape[0]
        c = self.out_dim
        y = ad.reshape(self.proj(x), (b, grid, grid, 2, 2, c))
        y = ad.transpose(y, (0, 1, 3, 2, 4, 5))
        return ad.reshape(y, (b, 4 * grid * grid, c))


class StructureEncoder(Module):
    """Encoder half of the U-Net applied to the (2+O)-channel anatomy stack."""

    def __init__(self, cfg: UNetConfig, rng: np.random.Generator):
        self.cfg = cfg
        p = cfg.patch_size
        self.embed = Linear(cfg.cond_channels * p * p, cfg.base_channels, rng)
        self.blocks = [MambaBlock(cfg.stage_channels(s), cfg, rng, timed=False) for s in range(cfg.depth)]
        self.merges = [PatchMerge(cfg.stage_channels(s), rng) for s in range(cfg.depth - 1)]

    def __call__(self, cond) -> list[Tensor]:
        cond = ad.as_tensor(cond)
        cfg = self.cfg
        if cond.ndim != 4 or cond.shape[1] != cfg.cond_channels:
            raise ValueError(
                f"structure_encoder: expected {cfg.cond_channels} channels (2 + {cfg.cond_channels - 2} organs), "
                f"got shape {cond.shape}"
            )
        x = patch_embed(cond, self.embed.weight, self.embed.bias, cfg.patch_size)
        feats = []
        for s in range(cfg.depth):
            if s > 0:
                x = self.merges[s - 1](x, cfg.stage_grid(s - 1))
            x = self.blocks[s](x)
            feats.append(x)
        return feats


class MambaUNet(Module):
    """Noise predictor: (B, in_ch, H, W) noisy dose + step -> (B, in_ch, H, W)."""

    def __init__(self, cfg: UNetConfig, rng: np.random.Generator):
        self.cfg = cfg
        p, c0 = cfg.patch_size, cfg.base_channels
        self.embed = Linear(cfg.in_channels * p * p, c0, rng)
        self.enc_blocks = [MambaBlock(cfg.stage_channels(s), cfg, rng) for s in range(cfg.depth)]
        self.merges = [PatchMerge(cfg.stage_channels(s), rng) for s in range(cfg.depth - 1)]
        self.expands = [PatchExpand(cfg.stage_channels(s + 1), rng) for s in range(cfg.depth - 1)]
        self.fuses = [Linear(2 * cfg.stage_channels(s), cfg.stage_channels(s), rng) for s in range(cfg.depth - 1)]
        self.dec_blocks = [MambaBlock(cfg.stage_channels(s), cfg, rng) for s in range(cfg.depth - 1)]
        self.head = Linear(c0, cfg.in_channels * p * p, rng)

    def __call__(self, x_t, t, struct_feats: list[Tensor] | None = None) -> Tensor:
        cfg = self.cfg
        x_t = ad.as_tensor(x_t)
        if x_t.ndim != 4 or x_t.shape[1] != cfg.in_channels or x_t.shape[2:] != (cfg.image_size,) * 2:
            raise ValueError(
                f"mamba_unet: expected (B, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}), got {x_t.shape}"
            )
        b = x_t.shape[0]
        t = np.broadcast_to(np.asarray(t), (b,))
        emb = Tensor(time_embedding(t, cfg.time_embed_dim, cfg.num_steps))
        if struct_feats is not None and len(struct_feats) != cfg.depth:
            raise ValueError(f"mamba_unet: got {len(struct_feats)} structure stages, expected {cfg.depth}")

        h = patch_embed(x_t, self.embed.weight, self.embed.bias, cfg.patch_size)
        skips = []
        for s in range(cfg.depth):
            if s > 0:
                h = self.merges[s - 1](h, cfg.stage_grid(s - 1))
            h = self.enc_blocks[s](h, emb)
            if struct_feats is not None:
                f = struct_feats[s]
                if f.shape != h.shape:
                    raise ValueError(f"mamba_unet: structure stage {s} has shape {f.shape}, expected {h.shape}")
                h = ad.add(h, f)
            skips.append(h)
        for s in range(cfg.depth - 2, -1, -1):
            h = self.expands[s](h, cfg.stage_grid(s + 1))
            h = self.fuses[s](ad.concat([h, skips[s]], axis=-1))
            h = self.dec_blocks[s](h, emb)
        out = self.head(h)
        n = cfg.image_size
        return unpatchify(out, cfg.patch_size, cfg.in_channels, n, n)


class DoseDenoiser(Module):
    """Structure encoder plus U-Net; predicts the noise in a noisy dose map."""

    def __init__(self, cfg: UNetConfig, seed: int = 0):
        cfg.validate()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.unet = MambaUNet(cfg, rng)
        self.encoder = StructureEncoder(cfg, rng)

    def encode(self, cond) -> list[Tensor]:
        return self.encoder(cond)

    def __call__(self, x_t, t, cond=None, feats: list[Tensor] | None = None) -> Tensor:
        if feats is None and cond is not None:
            feats = self.encode(cond)
        return self.unet(x_t, t, feats)
