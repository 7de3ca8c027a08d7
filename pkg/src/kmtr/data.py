"""Cohort loading, acquisition simulation and batch assembly for training."""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import kspace
from .arrayio import load_array
from .config import ExperimentConfig
from .phantom import PhenotypeVector, load_manifest
from .tokenizer import PatchGridSpec, mask_visible_partition, tokenize

DISEASES = ("reduced_ef", "hypertrophy")


def mix_seed(*parts) -> int:
    """Stable 63-bit seed derived from heterogeneous parts (process-independent)."""
    key = tuple(zlib.crc32(p.encode()) if isinstance(p, str) else int(p) for p in parts)
    return int(np.random.SeedSequence(key).generate_state(1, np.uint64)[0] >> 1)


@dataclass
class SubjectData:
    subject_id: str
    seed: int
    phenotypes: np.ndarray  # (4,) in PhenotypeVector.NAMES order
    labels: np.ndarray  # (n_diseases,) float 0/1
    image: np.ndarray  # float32 (S, T, H, W) in [0, 1]
    seg: np.ndarray  # uint8 (S, T, H, W)


class CohortData:
    """In-memory cohort with train/val/test splits by manifest order."""

    def __init__(self, subjects: list[SubjectData], splits: dict[str, list[int]]):
        self.subjects = subjects
        self.splits = splits
        ids = [frozenset(self.subjects[i].subject_id for i in idx) for idx in splits.values()]
        for a in range(len(ids)):
            for b in range(a + 1, len(ids)):
                if ids[a] & ids[b]:
                    raise ValueError(f"split contamination: shared subjects {sorted(ids[a] & ids[b])}")

    @staticmethod
    def load(cohort_dir: str | Path, config: ExperimentConfig) -> "CohortData":
        cohort_dir = Path(cohort_dir)
        manifest = load_manifest(cohort_dir)
        entries = manifest["subjects"]
        if len(entries) < config.n_total:
            raise ValueError(
                f"cohort has {len(entries)} subjects, config needs {config.n_total}")
        subjects = []
        for e in entries[: config.n_total]:
            phen = np.array([e["phenotypes"][k] for k in PhenotypeVector.NAMES], dtype=np.float64)
            lab = np.array([float(e["labels"][d]) for d in DISEASES], dtype=np.float32)
            subjects.append(
                SubjectData(
                    subject_id=e["subject_id"],
                    seed=e["seed"],
                    phenotypes=phen,
                    labels=lab,
                    image=load_array(cohort_dir / e["files"]["image"]),
                    seg=load_array(cohort_dir / e["files"]["segmentation"]),
                )
            )
        n1, n2 = config.n_train, config.n_train + config.n_val
        splits = {
            "train": list(range(0, n1)),
            "val": list(range(n1, n2)),
            "test": list(range(n2, config.n_total)),
        }
        return CohortData(subjects, splits)

    def split_subjects(self, split: str) -> list[SubjectData]:
        return [self.subjects[i] for i in self.splits[split]]


@dataclass
class Acquisition:
    """Tokenized k-space views of one subject under one acceleration factor."""

    k_input: np.ndarray  # (L, patch_dim) float32, undersampled + normalized
    k_target: np.ndarray  # (L, patch_dim) float32, fully sampled + normalized
    visible: np.ndarray
    hidden: np.ndarray
    kscale: float
    mask: kspace.AccelerationMask
    phase_seed: int
    mask_seed: int


def acquire(subject: SubjectData, R: int, config: ExperimentConfig,
            spec: PatchGridSpec, mask_epoch: int = 0) -> Acquisition:
    """Simulate the acquisition of one subject: phase, FFT, mask, undersampling."""
    S, T, H, W = subject.image.shape
    phase_seed = mix_seed(config.seed, subject.seed, "phase")
    mask_seed = mix_seed(config.seed, subject.seed, R, mask_epoch, "mask")
    phase = kspace.simulate_phase(S, H, W, config.phase_sigma, config.phase_amplitude, phase_seed)
    xc = kspace.apply_phase(subject.image.astype(np.float64) + 0j, phase)
    xk = kspace.fft2c(xc)
    mask = kspace.make_mask(S, T, W, R, config.center_lines, mask_seed)
    xku = kspace.undersample(xk, mask)
    kscale = float(np.max(np.abs(xk)))
    if kscale == 0:
        kscale = 1.0
    seq_u = tokenize(xku / kscale, spec)
    seq_full = tokenize(xk / kscale, spec)
    visible, hidden = mask_visible_partition(mask, spec, subject.image.shape)
    return Acquisition(
        k_input=seq_u.patches.astype(np.float32),
        k_target=seq_full.patches.astype(np.float32),
        visible=visible,
        hidden=hidden,
        kscale=kscale,
        mask=mask,
        phase_seed=phase_seed,
        mask_seed=mask_seed,
    )


def image_token_array(subject: SubjectData, spec: PatchGridSpec) -> np.ndarray:
    """(L, patch_dim) float32 image tokens (imaginary halves zero)."""
    return tokenize(subject.image.astype(np.float32), spec).patches


def pad_token_batch(
    rows: list[tuple[np.ndarray, np.ndarray]], device=None, dtype=torch.float32
) -> dict[str, torch.Tensor]:
    """Pad variable-length (visible tokens, grid index) rows into batch tensors.

    Returns the forward_encoder kwargs: tokens (B, Lv, pd), index (B, Lv, 4)
    and real (B, Lv) with False marking padding.
    """
    B = len(rows)
    lv = max(r[0].shape[0] for r in rows)
    pd = rows[0][0].shape[1]
    tokens = torch.zeros(B, lv, pd, dtype=dtype, device=device)
    index = torch.zeros(B, lv, 4, dtype=torch.long, device=device)
    real = torch.zeros(B, lv, dtype=torch.bool, device=device)
    for b, (tok, idx) in enumerate(rows):
        n = tok.shape[0]
        tokens[b, :n] = torch.as_tensor(tok, dtype=dtype)
        index[b, :n] = torch.as_tensor(np.ascontiguousarray(idx), dtype=torch.long)
        real[b, :n] = True
    return {"tokens": tokens, "index": index, "real": real}


def batch_positions(visibles: list[np.ndarray], device=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Padded flat positions of each subject's visible tokens plus the real mask."""
    B = len(visibles)
    lv = max(v.size for v in visibles)
    positions = torch.zeros(B, lv, dtype=torch.long, device=device)
    real = torch.zeros(B, lv, dtype=torch.bool, device=device)
    for b, v in enumerate(visibles):
        positions[b, : v.size] = torch.as_tensor(v)
        real[b, : v.size] = True
    return positions, real
