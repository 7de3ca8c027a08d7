"""Domain-generic transformer encoder/decoder for masked-autoencoder training.

The encoder consumes only visible tokens (class token prepended, factorized
positional embeddings tied to each token's (slice, t, h, w) grid index). The
decoder scatters encoded tokens back into the full-length sequence, fills
hidden positions with a learnable mask token, and scores every position.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .tokenizer import PatchSequence, token_index_grid


@dataclass
class EncoderConfig:
    dim: int = 64
    depth: int = 2
    dec_depth: int = 1
    heads: int = 4
    mlp_ratio: float = 4.0
    patch_dim: int = 512
    grid: tuple[int, int, int, int] = (3, 4, 8, 8)  # (S, t-blocks, h-blocks, w-blocks)

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError("dim must be divisible by heads")
        if self.depth < 0 or self.dec_depth < 1:
            raise ValueError("depth must be >= 0 (0 = embedder-only ablation), dec_depth >= 1")


@dataclass
class LatentEmbedding:
    """Encoder output: class token plus per-token embeddings in visible order."""

    class_token: torch.Tensor  # (dim,)
    tokens: torch.Tensor  # (n_visible, dim)
    index: torch.Tensor  # (n_visible, 4)
    visible_idx: np.ndarray
    layers: list[torch.Tensor] = field(default_factory=list)


class FactorizedPositionalEmbedding(nn.Module):
    """Sum of learned slice-, t-, h- and w-index embeddings."""

    def __init__(self, grid: tuple[int, int, int, int], dim: int):
        super().__init__()
        self.tables = nn.ModuleList([nn.Embedding(n, dim) for n in grid])

    def forward(self, index: torch.Tensor) -> torch.Tensor:
        return sum(table(index[..., i]) for i, table in enumerate(self.tables))


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, key_real: torch.Tensor | None = None) -> torch.Tensor:
        B, L, D = x.shape
        qkv = self.qkv(x).reshape(B, L, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn_mask = None
        if key_real is not None:
            attn_mask = key_real[:, None, None, :]  # True = may be attended to
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask)
        return self.proj(out.transpose(1, 2).reshape(B, L, D))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor, key_real: torch.Tensor | None = None) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), key_real)
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class TokenDecoder(nn.Module):
    """Scatters encoded visible tokens into the full grid (mask token at hidden
    positions), runs decoder blocks and projects every position to out_dim."""

    def __init__(self, config: EncoderConfig, out_dim: int):
        super().__init__()
        self.mask_token = nn.Parameter(torch.zeros(config.dim))
        self.pos = FactorizedPositionalEmbedding(config.grid, config.dim)
        self.blocks = nn.ModuleList(
            Block(config.dim, config.heads, config.mlp_ratio) for _ in range(config.dec_depth)
        )
        self.norm = nn.LayerNorm(config.dim)
        self.head = nn.Linear(config.dim, out_dim)

    def forward(
        self,
        cls: torch.Tensor,  # (B, dim)
        tokens: torch.Tensor,  # (B, Lv, dim)
        positions: torch.Tensor,  # (B, Lv) flat token positions of each row
        real: torch.Tensor,  # (B, Lv) bool, False for padding rows
        full_index: torch.Tensor,  # (L, 4) grid indices of all positions
    ) -> torch.Tensor:
        B = cls.shape[0]
        L = full_index.shape[0]
        full = self.mask_token.expand(B, L, -1).clone()
        b_idx = torch.arange(B, device=cls.device)[:, None].expand_as(positions)
        full[b_idx[real], positions[real]] = tokens[real]
        full = full + self.pos(full_index)[None]
        seq = torch.cat([cls[:, None, :], full], dim=1)
        for blk in self.blocks:
            seq = blk(seq)
        return self.head(self.norm(seq))[:, 1:]


class MaskedAutoencoder(nn.Module):
    """One per domain: token embedder, encoder stack, MAE decoder."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.embed = nn.Linear(config.patch_dim, config.dim)
        self.pos = FactorizedPositionalEmbedding(config.grid, config.dim)
        self.cls_token = nn.Parameter(torch.zeros(config.dim))
        self.blocks = nn.ModuleList(
            Block(config.dim, config.heads, config.mlp_ratio) for _ in range(config.depth)
        )
        self.enc_norm = nn.LayerNorm(config.dim)
        self.decoder = TokenDecoder(config, out_dim=config.patch_dim)
        self.apply(self._init_module)
        # identity-preserving residual branches at init
        for blk in list(self.blocks) + list(self.decoder.blocks):
            nn.init.zeros_(blk.attn.proj.weight)
            nn.init.zeros_(blk.attn.proj.bias)
            nn.init.zeros_(blk.fc2.weight)
            nn.init.zeros_(blk.fc2.bias)

    @staticmethod
    def _init_module(m: nn.Module) -> None:
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Embedding):
            nn.init.trunc_normal_(m.weight, std=0.02)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)

    def forward_encoder(
        self,
        tokens: torch.Tensor,  # (B, Lv, patch_dim)
        index: torch.Tensor,  # (B, Lv, 4)
        real: torch.Tensor | None = None,  # (B, Lv) bool, False for padding
        return_layers: tuple[int, ...] = (),
    ) -> tuple[torch.Tensor, torch.Tensor, list[torch.Tensor]]:
        B, Lv, _ = tokens.shape
        x = self.embed(tokens) + self.pos(index)
        if self.config.depth == 0:
            return x.new_zeros(B, self.config.dim), x, []
        cls = self.cls_token.expand(B, 1, -1)
        seq = torch.cat([cls, x], dim=1)
        key_real = None
        if real is not None:
            key_real = torch.cat([real.new_ones(B, 1), real], dim=1)
        captured: list[torch.Tensor] = []
        for i, blk in enumerate(self.blocks, start=1):
            seq = blk(seq, key_real)
            if i in return_layers and i < len(self.blocks):
                captured.append(seq[:, 1:])
        seq = self.enc_norm(seq)
        if len(self.blocks) in return_layers:
            captured.append(seq[:, 1:])
        return seq[:, 0], seq[:, 1:], captured

    def decode_full(
        self,
        cls: torch.Tensor,
        tokens: torch.Tensor,
        positions: torch.Tensor,
        real: torch.Tensor,
        full_index: torch.Tensor,
    ) -> torch.Tensor:
        return self.decoder(cls, tokens, positions, real, full_index)


def encode(p: PatchSequence, model: MaskedAutoencoder,
           return_layers: tuple[int, ...] = ()) -> LatentEmbedding:
    """Encode the visible tokens of one sequence (inference-friendly wrapper)."""
    vis = np.asarray(p.visible_idx, dtype=np.int64)
    device = next(model.parameters()).device
    dtype = next(model.parameters()).dtype
    tokens = torch.as_tensor(p.patches[vis], dtype=dtype, device=device)[None]
    index = torch.as_tensor(p.index[vis], dtype=torch.long, device=device)[None]
    cls, tok, layers = model.forward_encoder(tokens, index, return_layers=return_layers)
    return LatentEmbedding(
        class_token=cls[0],
        tokens=tok[0],
        index=index[0],
        visible_idx=vis,
        layers=[layer[0] for layer in layers],
    )


def mae_decode(latent: LatentEmbedding, hidden_idx: np.ndarray,
               model: MaskedAutoencoder) -> torch.Tensor:
    """Predict patch vectors for all L positions from one encoded sequence."""
    vis = latent.visible_idx
    hidden = np.asarray(hidden_idx, dtype=np.int64)
    if np.intersect1d(vis, hidden).size:
        raise ValueError("visible and hidden index sets overlap")
    L = vis.size + hidden.size
    device = latent.tokens.device
    full_index = torch.as_tensor(
        token_index_grid_from_flat(L, model.config.grid), dtype=torch.long, device=device
    )
    positions = torch.as_tensor(vis, device=device)[None]
    real = torch.ones_like(positions, dtype=torch.bool)
    pred = model.decode_full(
        latent.class_token[None], latent.tokens[None], positions, real, full_index
    )
    return pred[0]


def token_index_grid_from_flat(L: int, grid: tuple[int, int, int, int]) -> np.ndarray:
    S, Tb, Hb, Wb = grid
    if S * Tb * Hb * Wb != L:
        raise ValueError(f"sequence length {L} does not match grid {grid}")
    grids = np.indices((S, Tb, Hb, Wb), dtype=np.int64)
    return grids.reshape(4, -1).T.copy()


def mae_loss(pred: torch.Tensor, target: torch.Tensor,
             hidden_idx: np.ndarray | list, positions: str = "hidden") -> torch.Tensor:
    """MSE over hidden-position patch vectors (or all positions with positions="all").

    Accepts (L, patch_dim) or batched (B, L, patch_dim) with a per-subject list
    of hidden index arrays. An empty hidden set yields exactly 0.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    if positions == "all":
        return F.mse_loss(pred, target)
    if pred.dim() == 2:
        pred, target, hidden_idx = pred[None], target[None], [hidden_idx]
    rows_p, rows_t = [], []
    for b, hid in enumerate(hidden_idx):
        hid = np.asarray(hid, dtype=np.int64)
        if hid.size:
            idx = torch.as_tensor(hid, device=pred.device)
            rows_p.append(pred[b, idx])
            rows_t.append(target[b, idx])
    if not rows_p:
        return pred.sum() * 0.0
    return F.mse_loss(torch.cat(rows_p), torch.cat(rows_t))


def grad_check(fn, tensors: list[torch.Tensor], epsilon: float = 1e-5) -> float:
    """Max relative error between autograd and central finite differences.

    fn(*tensors) must return a scalar; tensors should be float64 leaves with
    requires_grad=True. Raises on non-finite analytic gradients.
    """
    out = fn(*tensors)
    grads = torch.autograd.grad(out, tensors, allow_unused=False)
    for g in grads:
        if not torch.isfinite(g).all():
            raise FloatingPointError("non-finite analytic gradient")
    g_scale = max(float(g.abs().max()) for g in grads)
    g_scale = max(g_scale, 1e-8)
    worst = 0.0
    with torch.no_grad():
        for tensor, grad in zip(tensors, grads):
            flat = tensor.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + epsilon
                f_plus = float(fn(*tensors))
                flat[i] = orig - epsilon
                f_minus = float(fn(*tensors))
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * epsilon)
                analytic = float(grad.reshape(-1)[i])
                denom = max(abs(analytic), abs(numeric), 1e-2 * g_scale)
                worst = max(worst, abs(analytic - numeric) / denom)
    return worst
