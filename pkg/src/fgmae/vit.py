"""Vision transformer encoder, MAE decoder and class-token attention readout."""
from __future__ import annotations

from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import AttentionStack, ImageSample, ModelConfig
from .errors import InvalidShape
from .patching import PatchGridSpec, gather_tokens, keep_indices, patchify, restore_order_batch

LN_EPS = 1e-6


def init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise InvalidShape(f"{num_heads} heads do not divide width {dim}")
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b, m, d = x.shape
        qkv = self.qkv(x).reshape(b, m, 3, self.num_heads, d // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, m, d)
        return self.proj(out), attn


class Block(nn.Module):
    """Pre-norm transformer block: ``F' = F + MHSA(LN F)``, ``F_next = F' + FFN(LN F')``."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.dim = dim
        self.norm1 = nn.LayerNorm(dim, eps=LN_EPS)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, eps=LN_EPS)
        hidden = int(dim * mlp_ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if x.shape[-1] != self.dim:
            raise InvalidShape(f"block width {self.dim} got input width {x.shape[-1]}")
        a, attn = self.attn(self.norm1(x))
        x = x + a
        x = x + self.fc2(F.gelu(self.fc1(self.norm2(x))))
        return x, attn


def transformer_block(features: torch.Tensor, block: Block) -> tuple[torch.Tensor, torch.Tensor]:
    """Run one block on an unbatched ``(M, d)`` or batched ``(B, M, d)`` input."""
    squeeze = features.dim() == 2
    x = features.unsqueeze(0) if squeeze else features
    out, attn = block(x)
    return (out[0], attn[0]) if squeeze else (out, attn)


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.spec = PatchGridSpec.square(cfg.image_size, cfg.patch_size)
        n, d = self.spec.N, cfg.embed_dim
        self.patch_embed = nn.Linear(cfg.patch_size ** 2 * 3, d)
        self.pos_embed = nn.Parameter(torch.zeros(1, n + 1, d))
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.blocks = nn.ModuleList(Block(d, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        self.apply(init_weights)

    @property
    def num_patches(self) -> int:
        return self.spec.N

    def forward(self, patches: torch.Tensor, mask: Optional[torch.Tensor] = None):
        """``patches`` is ``(B, N, P*P*3)``; with ``mask`` only unmasked tokens are encoded.

        Returns the final tokens (class token first) and one post-softmax
        attention tensor ``(B, heads, M, M)`` per block.
        """
        if patches.shape[1] != self.spec.N:
            raise InvalidShape(f"expected {self.spec.N} patches, got {patches.shape[1]}")
        x = self.patch_embed(patches) + self.pos_embed[:, 1:]
        if mask is not None:
            x = gather_tokens(x, keep_indices(mask))
        cls = (self.cls_token + self.pos_embed[:, :1]).expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1)
        attns = []
        for blk in self.blocks:
            x, a = blk(x)
            attns.append(a)
        return x, attns

    def class_attention(self, images: torch.Tensor) -> torch.Tensor:
        """``(B, L, N)`` class-token attention for all-token encoding of ``(B, H, W, 3)`` images."""
        _, attns = self(patchify(images, self.spec))
        return class_attention(attns, self.spec.N)


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        n = (cfg.image_size // cfg.patch_size) ** 2
        dd = cfg.decoder_embed_dim
        self.embed = nn.Linear(cfg.embed_dim, dd)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, dd))
        self.pos_embed = nn.Parameter(torch.zeros(1, n + 1, dd))
        self.block = Block(dd, cfg.decoder_num_heads, cfg.mlp_ratio)
        self.pred = nn.Linear(dd, cfg.patch_size ** 2 * 3)
        nn.init.trunc_normal_(self.mask_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.apply(init_weights)

    def forward(self, latent: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """``latent`` ``(B, 1+M, d_e)`` with class token first -> ``(B, N, P*P*3)``."""
        n_keep = int((mask[0] == 0).sum())
        if latent.shape[1] != n_keep + 1:
            raise InvalidShape(f"latent has {latent.shape[1]} tokens, expected {n_keep + 1}")
        x = self.embed(latent)
        body = restore_order_batch(x[:, 1:], self.mask_token, mask)
        x = torch.cat([x[:, :1], body], dim=1) + self.pos_embed
        x, _ = self.block(x)
        return self.pred(x)[:, 1:]


def class_attention(attns, num_patches: Optional[int] = None) -> torch.Tensor:
    """Head-averaged class-token attention over patch tokens, class slot excluded.

    ``attns`` is a sequence of ``(B, heads, M, M)`` tensors; returns ``(B, L, M-1)``.
    """
    rows = []
    for a in attns:
        if a.dim() == 3:
            a = a.unsqueeze(0)
        if num_patches is not None and a.shape[-1] != num_patches + 1:
            raise InvalidShape(f"attention over {a.shape[-1]} tokens, expected {num_patches + 1}")
        rows.append(a[:, :, 0, 1:].mean(dim=1))
    return torch.stack(rows, dim=1)


def to_tensor(pixels: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(pixels), dtype=dtype)


@torch.no_grad()
def encode(sample: ImageSample, encoder: Encoder, binary_mask: Optional[np.ndarray] = None):
    """Encode one sample; returns ``(tokens (M, d), AttentionStack)``.

    Without a mask every patch is encoded and the stack is ``L x N``. With a
    mask the stack rows cover only the kept patches.
    """
    dtype = next(encoder.parameters()).dtype
    x = patchify(to_tensor(sample.pixels, dtype), encoder.spec).unsqueeze(0)
    m = None if binary_mask is None else torch.as_tensor(np.asarray(binary_mask)).long().unsqueeze(0)
    tokens, attns = encoder(x, m)
    stack = class_attention(attns)[0]
    return tokens[0].numpy(), AttentionStack(rows=stack.numpy())


@torch.no_grad()
def decode(latent: np.ndarray, binary_mask: np.ndarray, decoder: Decoder) -> np.ndarray:
    dtype = next(decoder.parameters()).dtype
    out = decoder(torch.as_tensor(latent, dtype=dtype).unsqueeze(0),
                  torch.as_tensor(np.asarray(binary_mask)).long().unsqueeze(0))
    return out[0].numpy()

