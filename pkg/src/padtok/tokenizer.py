"""Hybrid 1D tokenizer: CNN patch embedding, Q-Former encoder, ViT decoder, CNN pixel head.

The encoder turns a grid of patch embeddings into an ordered sequence of
query latents. Any prefix of the quantized sequence can be decoded: the
decoder sees the retained tokens followed by one mask token per grid cell
and reads the image back off the mask positions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ExperimentConfig
from .errors import NumericError, RangeError, ShapeError
from .quantizer import VectorQuantizer


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, context=None, mask=None, return_weights=False):
        context = x if context is None else context
        b, t, d = x.shape
        h = self.heads

        def split(y):
            return y.reshape(b, y.shape[1], h, d // h).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(context)), split(self.v(context))
        scores = q @ k.transpose(-2, -1) / math.sqrt(d // h)
        if mask is not None:
            scores = scores.masked_fill(~mask, float("-inf"))
        weights = scores.softmax(-1)
        y = (weights @ v).transpose(1, 2).reshape(b, t, d)
        y = self.out(y)
        return (y, weights) if return_weights else y


class MLP(nn.Sequential):
    def __init__(self, dim: int, hidden: int, out: int | None = None):
        super().__init__(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, out or dim))


class EncoderBlock(nn.Module):
    """Causal self-attention over queries, cross-attention into patches, MLP; all pre-norm.

    The causal mask makes query i independent of every later query, so the
    first N latents are the same whether or not padding queries are appended.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm_self = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, heads)
        self.norm_cross = nn.LayerNorm(dim)
        self.norm_ctx = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, heads)
        self.norm_mlp = nn.LayerNorm(dim)
        self.mlp = MLP(dim, 4 * dim)

    def forward(self, queries, patches):
        t = queries.shape[1]
        causal = torch.ones(t, t, dtype=torch.bool).tril()
        queries = queries + self.self_attn(self.norm_self(queries), mask=causal)
        queries = queries + self.cross_attn(self.norm_cross(queries), self.norm_ctx(patches))
        return queries + self.mlp(self.norm_mlp(queries))


class DecoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm_attn = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm_mlp = nn.LayerNorm(dim)
        self.mlp = MLP(dim, 4 * dim)

    def forward(self, x):
        x = x + self.attn(self.norm_attn(x))
        return x + self.mlp(self.norm_mlp(x))


def _init_convs(net: nn.Module):
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            nn.init.zeros_(m.bias)


class PatchEmbed(nn.Module):
    """Stack of stride-2 convolutions, one per factor of two in ``downsample_f``."""

    def __init__(self, channels: int, dim: int, downsample_f: int):
        super().__init__()
        stages = int(math.log2(downsample_f))
        widths = [min(dim, 32 * 2**i) for i in range(stages + 1)]
        layers = [nn.Conv2d(channels, widths[0], 3, padding=1)]
        for i in range(stages):
            layers += [nn.GELU(), nn.Conv2d(widths[i], widths[i + 1], 4, stride=2, padding=1)]
        layers += [nn.GELU(), nn.Conv2d(widths[-1], dim, 1)]
        self.net = nn.Sequential(*layers)
        _init_convs(self.net)
        self.norm = nn.LayerNorm(dim)

    def forward(self, images):
        # (B, C, H, W) in [0, 1] -> (B, s, s, D)
        return self.norm(self.net(images * 2 - 1).permute(0, 2, 3, 1))


class PixelHead(nn.Module):
    """Transposed-convolution upsampler from the token grid to pixels in [0, 1]."""

    def __init__(self, dim: int, channels: int, downsample_f: int):
        super().__init__()
        stages = int(math.log2(downsample_f))
        widths = [max(32, dim // 2**i) for i in range(stages + 1)]
        layers = []
        for i in range(stages):
            layers += [nn.ConvTranspose2d(widths[i] if i else dim, widths[i + 1], 4, stride=2, padding=1),
                       nn.GELU()]
        layers += [nn.Conv2d(widths[-1] if stages else dim, channels, 3, padding=1)]
        self.net = nn.Sequential(*layers)
        _init_convs(self.net)

    def forward(self, grid):
        return (torch.tanh(self.net(grid)) + 1) / 2


def pyramid_pool(grid: torch.Tensor) -> torch.Tensor:
    """Coarse-to-fine average pools of a (B, s, s, D) grid: 1x1, 2x2, 4x4, ... then the full grid.

    Returns (B, cells, D) with each level flattened in raster order.
    """
    b, s, _, d = grid.shape
    chw = grid.permute(0, 3, 1, 2)
    levels, side = [], 1
    while side < s:
        levels.append(F.adaptive_avg_pool2d(chw, side))
        side *= 2
    levels.append(chw)
    return torch.cat([lvl.flatten(2).transpose(1, 2) for lvl in levels], dim=1)


def build_queries(patch_grid: torch.Tensor, n: int, m_pad: int = 0) -> torch.Tensor:
    """First ``n`` pyramid cells as queries, then ``m_pad`` copies cycling over the last min(m_pad, n)."""
    pooled = pyramid_pool(patch_grid)
    if not 1 <= n <= pooled.shape[1]:
        raise RangeError(f"n={n} outside pooling pyramid capacity {pooled.shape[1]}")
    if m_pad < 0:
        raise RangeError("m_pad must be >= 0")
    queries = pooled[:, :n]
    if m_pad == 0:
        return queries
    tail = min(m_pad, n)
    index = torch.tensor([n - tail + j % tail for j in range(m_pad)])
    return torch.cat([queries, queries[:, index]], dim=1)


@dataclass
class DecoderInput:
    """Decoder sequence before positional embeddings: k token rows then L mask rows."""

    tokens: torch.Tensor  # (B, k, D)
    mask: torch.Tensor  # (B, L, D)

    @property
    def k(self) -> int:
        return self.tokens.shape[1]


def _check_finite(x: torch.Tensor, where: str):
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite activations after {where}")


class FlexTokenizer(nn.Module):
    def __init__(self, config: ExperimentConfig):
        super().__init__()
        c = config
        d = c.embed_dim
        self.image_size = c.image_size
        self.channels = c.channels
        self.downsample_f = c.downsample_f
        self.grid_side = c.grid_side
        self.grid_length = c.grid_length
        self.num_tokens = c.num_tokens_n
        self.pad_tokens = c.pad_tokens_m
        self.capacity = c.total_tokens

        self.patch_embed_net = PatchEmbed(c.channels, d, c.downsample_f)
        self.patch_pos = nn.Parameter(torch.randn(self.grid_length, d) * 0.02)
        self.query_pos = nn.Parameter(torch.randn(self.capacity, d) * 0.02)
        self.encoder_blocks = nn.ModuleList(EncoderBlock(d, c.heads) for _ in range(c.encoder_depth))
        self.encoder_norm = nn.LayerNorm(d)
        self.latent_head = nn.Linear(d, c.latent_dim)
        self.quantizer = VectorQuantizer(c.codebook_size, c.latent_dim, c.commitment_beta, c.codebook_l2_norm)

        self.token_proj = MLP(c.latent_dim, d, d)
        self.token_pos = nn.Parameter(torch.randn(self.capacity, d) * 0.02)
        self.mask_pos = nn.Parameter(torch.randn(self.grid_length, d) * 0.02)
        self.decoder_blocks = nn.ModuleList(DecoderBlock(d, c.heads) for _ in range(c.decoder_depth))
        self.decoder_norm = nn.LayerNorm(d)
        self.pixel_head = PixelHead(d, c.channels, c.downsample_f)

    # parameter groups frozen during decoder fine-tuning
    def encoder_modules(self):
        return [self.patch_embed_net, self.encoder_blocks, self.encoder_norm, self.latent_head,
                self.quantizer]

    def encoder_parameters(self):
        yield self.patch_pos
        yield self.query_pos
        for m in self.encoder_modules():
            yield from m.parameters()

    def decoder_parameters(self):
        frozen = {id(p) for p in self.encoder_parameters()}
        return [p for p in self.parameters() if id(p) not in frozen]

    def patch_embed(self, images: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) -> (B, H/f, W/f, D)."""
        expected = (self.channels, self.image_size, self.image_size)
        if images.ndim != 4 or tuple(images.shape[1:]) != expected:
            raise ShapeError(f"expected images of shape (B, {expected}), got {tuple(images.shape)}")
        return self.patch_embed_net(images)

    def encode(self, patches: torch.Tensor, queries: torch.Tensor, patch_ids=None) -> torch.Tensor:
        """Query latents of shape (B, T, latent_dim); patches are (B, L, D) or a (B, s, s, D) grid."""
        if patches.ndim == 4:
            patches = patches.flatten(1, 2)
        if queries.shape[1] > self.capacity:
            raise RangeError(f"{queries.shape[1]} queries exceed capacity {self.capacity}")
        pos = self.patch_pos if patch_ids is None else self.patch_pos[patch_ids]
        patches = patches + pos
        x = queries + self.query_pos[: queries.shape[1]]
        for i, block in enumerate(self.encoder_blocks):
            x = block(x, patches)
            _check_finite(x, f"encoder block {i}")
        return self.latent_head(self.encoder_norm(x))

    def encode_images(self, images: torch.Tensor, padded: bool = True) -> torch.Tensor:
        grid = self.patch_embed(images)
        queries = build_queries(grid, self.num_tokens, self.pad_tokens if padded else 0)
        return self.encode(grid, queries)

    def build_decoder_input(self, quantized: torch.Tensor, k: int) -> DecoderInput:
        if not 1 <= k <= quantized.shape[1]:
            raise RangeError(f"k={k} outside [1, {quantized.shape[1]}]")
        tokens = self.token_proj(quantized[:, :k])
        mask = tokens[:, :1].expand(-1, self.grid_length, -1)
        return DecoderInput(tokens, mask)

    def _decoder_stack(self, inp: DecoderInput, layer: int | None):
        k = inp.k
        if k > self.capacity:
            raise RangeError(f"k={k} exceeds capacity {self.capacity}")
        x = torch.cat([inp.tokens + self.token_pos[:k], inp.mask + self.mask_pos], dim=1)
        feats = None
        for i, block in enumerate(self.decoder_blocks, start=1):
            x = block(x)
            _check_finite(x, f"decoder block {i}")
            if i == layer:
                feats = x[:, k:]
        return x, feats

    def _check_layer(self, layer: int):
        if not 1 <= layer <= len(self.decoder_blocks):
            raise RangeError(f"layer {layer} outside [1, {len(self.decoder_blocks)}]")

    def decode_with_features(self, inp: DecoderInput, layer: int):
        """Reconstruction plus the mask-position outputs of decoder block ``layer`` (1-based)."""
        self._check_layer(layer)
        x, feats = self._decoder_stack(inp, layer)
        return self._to_pixels(x[:, inp.k:]), feats

    def decode(self, inp: DecoderInput) -> torch.Tensor:
        x, _ = self._decoder_stack(inp, None)
        return self._to_pixels(x[:, inp.k:])

    def decoder_features(self, inp: DecoderInput, layer: int) -> torch.Tensor:
        self._check_layer(layer)
        return self._decoder_stack(inp, layer)[1]

    def _to_pixels(self, mask_out: torch.Tensor) -> torch.Tensor:
        grid = self.decoder_norm(mask_out)
        b, _, d = grid.shape
        grid = grid.transpose(1, 2).reshape(b, d, self.grid_side, self.grid_side)
        return self.pixel_head(grid)

    # convenience paths on discrete codes

    @torch.no_grad()
    def tokenize(self, images: torch.Tensor, padded: bool = True) -> torch.Tensor:
        """Codes for the full (optionally padded) sequence, without touching usage counts."""
        return self.quantizer.codes_for(self.quantizer.project(self.encode_images(images, padded)))

    def decode_codes(self, codes: torch.Tensor, k: int | None = None) -> torch.Tensor:
        k = codes.shape[1] if k is None else k
        emb = self.quantizer.lookup(codes)
        return self.decode(self.build_decoder_input(emb, k))


def build_tokenizer(config: ExperimentConfig) -> FlexTokenizer:
    """Construct with parameters drawn from a generator seeded by ``config.seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        return FlexTokenizer(config)
