"""Experiment configuration: cohort, acquisition, model and training settings."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .phantom import PhantomConfig

TASKS = ("regression", "classification", "segmentation", "reconstruction")


@dataclass
class ExperimentConfig:
    seed: int = 7
    out_dir: str = "runs/desk"

    # cohort
    phantom: PhantomConfig = field(default_factory=lambda: PhantomConfig(
        reduced_ef_ratio=0.25, hypertrophy_ratio=0.3))
    n_train: int = 64
    n_val: int = 16
    n_test: int = 32

    # acquisition
    center_lines: int = 4
    phase_sigma: float = 4.0
    phase_amplitude: float = math.pi / 4
    task_R: dict[str, int] = field(default_factory=lambda: {
        "regression": 4, "classification": 4, "segmentation": 8, "reconstruction": 4})
    sweep_R: tuple[int, ...] = (2, 4, 8, 16)
    # pretraining acquisitions use R=8: at R=4 the interleaved mask reaches every
    # token footprint and the k-space hidden set collapses to nothing
    pretrain_R: int = 8
    resample_mask_per_epoch: bool = False

    # tokenization
    patch_size: tuple[int, int, int] = (4, 8, 8)
    image_mask_ratio: float = 0.70

    # model
    dim: int = 64
    depth: int = 2
    dec_depth: int = 1
    heads: int = 4
    mlp_ratio: float = 4.0
    proj_dim: int = 32
    head_hidden: int = 64

    # training
    stage1_steps: int = 500
    stage1_lr: float = 1e-3
    stage1_batch: int = 16
    stage2_steps: int = 400
    stage2_lr: float = 1e-3
    stage2_batch: int = 16
    tau: float = 0.1
    lam: float = 0.5
    include_positive_in_denominator: bool = False
    freeze_image_encoder: bool = False
    stage3_lr: float = 3e-4
    stage3_steps: dict[str, int] = field(default_factory=lambda: {
        "regression": 300, "classification": 300, "segmentation": 700, "reconstruction": 500})
    stage3_batch: dict[str, int] = field(default_factory=lambda: {
        "regression": 16, "classification": 16, "segmentation": 4, "reconstruction": 8})
    weight_decay: float = 1e-4
    use_alignment: bool = True
    linear_probe: bool = False
    loss_positions: str = "hidden"

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValueError("all split sizes must be >= 1")
        if self.depth < 1 or self.dec_depth < 1:
            raise ValueError("encoder depth and decoder depth must be >= 1")
        if self.dim % self.heads != 0:
            raise ValueError("dim must be divisible by heads")
        if not (0.0 <= self.image_mask_ratio < 1.0):
            raise ValueError("image_mask_ratio must lie in [0, 1)")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if not (0.0 <= self.lam <= 1.0):
            raise ValueError("lambda must lie in [0, 1]")
        if self.loss_positions not in ("hidden", "all"):
            raise ValueError("loss_positions must be 'hidden' or 'all'")
        for task in TASKS:
            if self.task_R.get(task, 0) < 1:
                raise ValueError(f"task_R[{task!r}] must be >= 1")
        t_p, h_p, w_p = self.patch_size
        ph = self.phantom
        for name, dim_, p in (("T", ph.T, t_p), ("H", ph.H, h_p), ("W", ph.W, w_p)):
            if dim_ % p != 0:
                raise ValueError(f"phantom {name}={dim_} not divisible by patch size {p}")

    @property
    def n_total(self) -> int:
        return self.n_train + self.n_val + self.n_test

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["phantom"]["intensity_levels"] = {
            str(k): v for k, v in self.phantom.intensity_levels.items()
        }
        return d

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        d = dict(d)
        ph = dict(d.pop("phantom", {}))
        if "intensity_levels" in ph:
            ph["intensity_levels"] = {int(k): v for k, v in ph["intensity_levels"].items()}
        for key in ("lv_semi_axis_a", "lv_semi_axis_b", "wall_thickness", "contraction_fraction"):
            if key in ph:
                ph[key] = tuple(ph[key])
        d["phantom"] = PhantomConfig(**ph)
        for key in ("patch_size", "sweep_R"):
            if key in d:
                d[key] = tuple(d[key])
        return ExperimentConfig(**d)

    @staticmethod
    def from_json(path: str | Path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return ExperimentConfig.from_dict(json.load(fh))

    def save_json(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]
