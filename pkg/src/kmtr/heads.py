"""Task-specific decoders attached to the pretrained k-space encoder.

All heads consume encoder outputs only: class tokens for regression and
classification, full scattered token grids for segmentation and direct image
reconstruction. Nothing here ever sees an image-domain input at evaluation.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import (
    EncoderConfig,
    LatentEmbedding,
    MaskedAutoencoder,
    TokenDecoder,
    encode,
    token_index_grid_from_flat,
)
from .phantom import PhenotypeVector
from .tokenizer import PatchSequence, real_patches_to_volume


class RegressionHead(nn.Module):
    """class token -> hidden MLP -> one value per phenotype (z-scored targets)."""

    def __init__(self, dim: int, n_phenotypes: int = 4, hidden: int = 64,
                 norm_mean: np.ndarray | None = None, norm_std: np.ndarray | None = None):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, n_phenotypes)
        mean = np.zeros(n_phenotypes) if norm_mean is None else np.asarray(norm_mean, dtype=np.float64)
        std = np.ones(n_phenotypes) if norm_std is None else np.asarray(norm_std, dtype=np.float64)
        if np.any(std <= 0):
            raise ValueError("target std must be positive")
        self.register_buffer("norm_mean", torch.as_tensor(mean))
        self.register_buffer("norm_std", torch.as_tensor(std))

    def forward(self, cls: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(cls)))

    def denormalize(self, y_norm: torch.Tensor) -> torch.Tensor:
        return y_norm * self.norm_std.to(y_norm.dtype) + self.norm_mean.to(y_norm.dtype)

    def normalize(self, y: torch.Tensor) -> torch.Tensor:
        return (y - self.norm_mean.to(y.dtype)) / self.norm_std.to(y.dtype)


class ClassificationHead(nn.Module):
    """class token -> hidden MLP -> one logit per disease."""

    def __init__(self, dim: int, n_diseases: int = 2, hidden: int = 64):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, n_diseases)

    def forward(self, cls: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(cls)))


def _upsample_factors(patch_size: tuple[int, int, int]) -> list[tuple[int, int, int]]:
    rem = list(patch_size)
    factors = []
    while any(r > 1 for r in rem):
        f = tuple(2 if r % 2 == 0 and r > 1 else 1 for r in rem)
        if all(x == 1 for x in f):
            break  # odd remainder, finished by exact interpolation
        rem = [r // x for r, x in zip(rem, f)]
        factors.append(f)
    return factors


class SegmentationHead(nn.Module):
    """Token-grid decoder: staged transposed-conv upsampling with skip
    projections from an intermediate encoder layer, per slice."""

    def __init__(self, config: EncoderConfig, patch_size: tuple[int, int, int],
                 n_classes: int = 4, base_channels: int = 48):
        super().__init__()
        self.grid = config.grid
        self.patch_size = patch_size
        self.n_classes = n_classes
        factors = _upsample_factors(patch_size)
        if not factors:
            factors = [(1, 1, 1)]
        chans = [max(base_channels // (2**i), 16) for i in range(len(factors))]
        self.skip_proj = nn.Conv3d(config.dim, chans[0], kernel_size=1)
        self.skip_factor = factors[0]
        ups, fuses = [], []
        in_ch = config.dim
        for i, f in enumerate(factors):
            ups.append(nn.ConvTranspose3d(in_ch, chans[i], kernel_size=f, stride=f))
            fuse_in = chans[i] * 2 if i == 0 else chans[i]
            fuses.append(nn.Conv3d(fuse_in, chans[i], kernel_size=3, padding=1))
            in_ch = chans[i]
        self.ups = nn.ModuleList(ups)
        self.fuses = nn.ModuleList(fuses)
        self.out_conv = nn.Conv3d(in_ch, n_classes, kernel_size=1)

    def _to_grid(self, tokens: torch.Tensor) -> torch.Tensor:
        # (B, L, dim) -> (B*S, dim, Tb, Hb, Wb)
        B = tokens.shape[0]
        S, Tb, Hb, Wb = self.grid
        x = tokens.reshape(B, S, Tb, Hb, Wb, -1)
        return x.permute(0, 1, 5, 2, 3, 4).reshape(B * S, -1, Tb, Hb, Wb)

    def forward(self, final_tokens: torch.Tensor, mid_tokens: torch.Tensor,
                out_shape: tuple[int, int, int, int]) -> torch.Tensor:
        """(B, L, dim) token maps -> per-pixel logits (B, S, T, H, W, n_classes)."""
        B = final_tokens.shape[0]
        S, T, H, W = out_shape
        x = self._to_grid(final_tokens)
        skip = self.skip_proj(self._to_grid(mid_tokens))
        for i, (up, fuse) in enumerate(zip(self.ups, self.fuses)):
            x = up(x)
            if i == 0:
                skip_up = F.interpolate(skip, scale_factor=self.skip_factor, mode="nearest")
                x = torch.cat([x, skip_up], dim=1)
            x = F.gelu(fuse(x))
        if x.shape[-3:] != (T, H, W):
            x = F.interpolate(x, size=(T, H, W), mode="trilinear", align_corners=False)
        logits = self.out_conv(x)  # (B*S, C, T, H, W)
        return logits.reshape(B, S, self.n_classes, T, H, W).permute(0, 1, 3, 4, 5, 2)


class ReconstructionHead(nn.Module):
    """Transformer decoder mirroring the pretraining decoder but emitting
    single-channel image-domain patches (no inverse Fourier transform)."""

    def __init__(self, config: EncoderConfig, patch_size: tuple[int, int, int]):
        super().__init__()
        t_p, h_p, w_p = patch_size
        self.patch_size = patch_size
        self.decoder = TokenDecoder(config, out_dim=t_p * h_p * w_p)
        self.apply(MaskedAutoencoder._init_module)
        for blk in self.decoder.blocks:
            nn.init.zeros_(blk.attn.proj.weight)
            nn.init.zeros_(blk.attn.proj.bias)
            nn.init.zeros_(blk.fc2.weight)
            nn.init.zeros_(blk.fc2.bias)

    def forward(self, cls, tokens, positions, real, full_index) -> torch.Tensor:
        return self.decoder(cls, tokens, positions, real, full_index)


def regress(latent: LatentEmbedding, head: RegressionHead) -> PhenotypeVector:
    """De-normalized phenotype prediction for one subject."""
    if latent.class_token.shape[-1] != head.fc1.in_features:
        raise ValueError("class token dim does not match regression head")
    with torch.no_grad():
        y = head.denormalize(head(latent.class_token[None]))[0]
    vals = y.double().cpu().numpy()
    return PhenotypeVector(lveda=float(vals[0]), lvesa=float(vals[1]),
                           lvef=float(vals[2]), myoa=float(vals[3]))


def classify(latent: LatentEmbedding, head: ClassificationHead,
             disease_names: tuple[str, ...] = ("reduced_ef", "hypertrophy")) -> dict[str, float]:
    """Per-disease sigmoid probabilities for one subject."""
    with torch.no_grad():
        probs = torch.sigmoid(head(latent.class_token[None]))[0]
    return {name: float(p) for name, p in zip(disease_names, probs)}


def _full_token_layers(model: MaskedAutoencoder, p: PatchSequence,
                       layers: tuple[int, int]) -> tuple[torch.Tensor, list[torch.Tensor], torch.Tensor]:
    """Encode one sequence and scatter the requested layer outputs to full
    length, hidden positions filled with the decoder mask token + position."""
    latent = encode(p, model, return_layers=layers)
    L = len(p)
    device = latent.tokens.device
    full_index = torch.as_tensor(
        token_index_grid_from_flat(L, model.config.grid), dtype=torch.long, device=device
    )
    fills = model.decoder.mask_token + model.decoder.pos(full_index)
    scattered = []
    vis = torch.as_tensor(latent.visible_idx, device=device)
    for layer in latent.layers:
        full = fills.clone()
        full[vis] = layer
        scattered.append(full[None])
    return latent.class_token[None], scattered, full_index


def segment(model: MaskedAutoencoder, p: PatchSequence, head: SegmentationHead) -> np.ndarray:
    """Per-pixel 4-class logits (S, T, H, W, 4) from undersampled k-space tokens."""
    depth = max(model.config.depth, 1)
    layers = ((depth + 1) // 2, depth)
    _, scattered, _ = _full_token_layers(model, p, layers)
    with torch.no_grad():
        logits = head(scattered[-1], scattered[0], p.volume_shape)
    return logits[0].cpu().numpy()


def reconstruct(model: MaskedAutoencoder, p: PatchSequence, head: ReconstructionHead) -> np.ndarray:
    """Real image volume (S, T, H, W) decoded directly from k-space tokens."""
    latent = encode(p, model)
    device = latent.tokens.device
    full_index = torch.as_tensor(
        token_index_grid_from_flat(len(p), model.config.grid), dtype=torch.long, device=device
    )
    positions = torch.as_tensor(latent.visible_idx, device=device)[None]
    real = torch.ones_like(positions, dtype=torch.bool)
    with torch.no_grad():
        patches = head(latent.class_token[None], latent.tokens[None], positions, real, full_index)[0]
    vol = real_patches_to_volume(patches.cpu().numpy(), _spec_of(head.patch_size), p.volume_shape)
    return np.clip(vol, 0.0, 1.0)


def _spec_of(patch_size: tuple[int, int, int]):
    from .tokenizer import PatchGridSpec

    return PatchGridSpec(patch_size=patch_size)


def soft_dice_loss(logits: torch.Tensor, labels: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """Mean soft-Dice loss over classes; exactly 0 for a one-hot match."""
    n_classes = logits.shape[-1]
    probs = torch.softmax(logits, dim=-1).reshape(-1, n_classes)
    onehot = F.one_hot(labels.reshape(-1).long(), n_classes).to(probs.dtype)
    inter = (probs * onehot).sum(dim=0)
    denom = probs.sum(dim=0) + onehot.sum(dim=0)
    dice = (2.0 * inter + eps) / (denom + eps)
    return 1.0 - dice.mean()


def segmentation_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean of cross-entropy and soft-Dice."""
    n_classes = logits.shape[-1]
    ce = F.cross_entropy(logits.reshape(-1, n_classes), labels.reshape(-1).long())
    return 0.5 * ce + 0.5 * soft_dice_loss(logits, labels)


def classification_loss(logits: torch.Tensor, targets: torch.Tensor,
                        pos_weight: torch.Tensor) -> torch.Tensor:
    """Class-weighted binary cross-entropy (weights = inverse class frequency)."""
    return F.binary_cross_entropy_with_logits(logits, targets, pos_weight=pos_weight)


def regression_loss(pred_norm: torch.Tensor, target_norm: torch.Tensor) -> torch.Tensor:
    """Smooth-L1 on normalized targets."""
    return F.smooth_l1_loss(pred_norm, target_norm)
