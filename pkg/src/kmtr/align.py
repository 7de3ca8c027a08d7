"""Cross-modal alignment of image and undersampled k-space class tokens.

The symmetric contrastive loss is implemented verbatim: for each anchor the
denominator sums over the other subjects only (the positive pair is excluded),
so the loss can be negative. The standard variant that keeps the positive in
the denominator sits behind ``include_positive_in_denominator``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .backbone import LatentEmbedding


class Projector(nn.Module):
    """Two-layer MLP mapping class tokens into the shared alignment space."""

    def __init__(self, dim: int, proj_dim: int = 32):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, proj_dim)
        for layer in (self.fc1, self.fc2):
            nn.init.trunc_normal_(layer.weight, std=0.02)
            # non-zero bias keeps the output L2-normalizable even for zero input
            nn.init.trunc_normal_(layer.bias, std=0.02)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.nn.functional.relu(self.fc1(x)))


@dataclass
class AlignmentBatch:
    """Row-aligned projected embeddings of one subject batch."""

    z_i: torch.Tensor  # (N, proj_dim), fully-sampled image branch
    z_k: torch.Tensor  # (N, proj_dim), undersampled k-space branch
    subject_ids: list[str] | None = None

    def __post_init__(self):
        if self.z_i.shape != self.z_k.shape:
            raise ValueError("z_i and z_k must have identical shapes")
        if self.z_i.shape[0] < 2:
            raise ValueError("alignment needs a batch of at least 2 subjects")


def project(latent: LatentEmbedding, proj: Projector) -> torch.Tensor:
    """Project one class token; normalization happens inside the cosine."""
    cls = latent.class_token
    if cls.shape[-1] != proj.fc1.in_features:
        raise ValueError(f"class token dim {cls.shape[-1]} != projector input {proj.fc1.in_features}")
    return proj(cls)


def _normalize_rows(z: torch.Tensor, name: str) -> torch.Tensor:
    norms = z.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise ValueError(f"{name} contains a zero-norm embedding")
    return z / norms


def contrastive_loss(
    batch: AlignmentBatch,
    tau: float = 0.1,
    lam: float = 0.5,
    include_positive_in_denominator: bool = False,
) -> torch.Tensor:
    """Symmetric cosine contrastive loss over a subject batch.

    l_ik anchors image rows against k-space candidates, l_ki swaps the roles;
    the result is lam * l_ik + (1 - lam) * l_ki.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    if not (0.0 <= lam <= 1.0):
        raise ValueError("lambda must lie in [0, 1]")
    zi = _normalize_rows(batch.z_i, "z_i")
    zk = _normalize_rows(batch.z_k, "z_k")
    sim = zi @ zk.T / tau  # sim[m, n] = cos(z_i[m], z_k[n]) / tau
    pos = sim.diagonal()
    if include_positive_in_denominator:
        denom_rows = torch.logsumexp(sim, dim=1)
        denom_cols = torch.logsumexp(sim, dim=0)
    else:
        off = sim.masked_fill(torch.eye(sim.shape[0], dtype=torch.bool, device=sim.device),
                              float("-inf"))
        denom_rows = torch.logsumexp(off, dim=1)
        denom_cols = torch.logsumexp(off, dim=0)
    l_ik = -(pos - denom_rows).sum()
    l_ki = -(pos - denom_cols).sum()
    return lam * l_ik + (1.0 - lam) * l_ki


def align_step(
    image_model,
    kspace_model,
    proj_i: Projector,
    proj_k: Projector,
    image_inputs: dict,
    kspace_inputs: dict,
    optimizer: torch.optim.Optimizer,
    tau: float = 0.1,
    lam: float = 0.5,
    include_positive_in_denominator: bool = False,
    freeze_image: bool = False,
) -> tuple[float, float, float]:
    """One gradient step on the alignment loss for a prepared subject batch.

    image_inputs / kspace_inputs hold padded (tokens, index, real) tensors as
    produced by the pipeline's batch assembly; rows of the two batches refer to
    the same subjects. Returns (loss, pos_cos_mean, neg_cos_mean).
    """
    if freeze_image:
        with torch.no_grad():
            cls_i, _, _ = image_model.forward_encoder(**image_inputs)
    else:
        cls_i, _, _ = image_model.forward_encoder(**image_inputs)
    cls_k, _, _ = kspace_model.forward_encoder(**kspace_inputs)
    batch = AlignmentBatch(z_i=proj_i(cls_i), z_k=proj_k(cls_k))
    loss = contrastive_loss(batch, tau=tau, lam=lam,
                            include_positive_in_denominator=include_positive_in_denominator)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    with torch.no_grad():
        pos, neg = cosine_separation(batch.z_i.detach(), batch.z_k.detach())
    return float(loss.detach()), pos, neg


def cosine_separation(z_i: torch.Tensor, z_k: torch.Tensor) -> tuple[float, float]:
    """Mean positive-pair cosine and mean negative-pair cosine of a batch."""
    zi = _normalize_rows(z_i, "z_i")
    zk = _normalize_rows(z_k, "z_k")
    sim = zi @ zk.T
    n = sim.shape[0]
    pos = sim.diagonal().mean()
    off_mask = ~torch.eye(n, dtype=torch.bool, device=sim.device)
    neg = sim[off_mask].mean()
    return float(pos), float(neg)
