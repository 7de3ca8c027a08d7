"""Patch tokenization of complex 2D+t volumes and visible/hidden partitions.

A volume (S, T, H, W) is cut into non-overlapping (t_p, h_p, w_p) blocks per
slice and flattened in (slice, t-block, h-block, w-block) lexicographic order.
Each token carries real and imaginary parts as two channel halves, so the
patch vector has width 2 * t_p * h_p * w_p. Tokenization is a lossless
rearrangement; detokenize inverts it bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kspace import AccelerationMask


@dataclass(frozen=True)
class PatchGridSpec:
    patch_size: tuple[int, int, int] = (4, 8, 8)

    @property
    def patch_dim(self) -> int:
        t_p, h_p, w_p = self.patch_size
        return 2 * t_p * h_p * w_p

    def grid(self, shape: tuple[int, int, int, int]) -> tuple[int, int, int, int]:
        """Token grid (S, T/t_p, H/h_p, W/w_p); raises naming the offending axis."""
        S, T, H, W = shape
        t_p, h_p, w_p = self.patch_size
        for name, dim, p in (("T", T, t_p), ("H", H, h_p), ("W", W, w_p)):
            if dim % p != 0:
                raise ValueError(f"axis {name}={dim} not divisible by patch size {p}")
        return S, T // t_p, H // h_p, W // w_p

    def num_tokens(self, shape: tuple[int, int, int, int]) -> int:
        S, Tb, Hb, Wb = self.grid(shape)
        return S * Tb * Hb * Wb


@dataclass
class PatchSequence:
    patches: np.ndarray  # (L, patch_dim) real-valued
    index: np.ndarray  # (L, 4) int32: slice, t-block, h-block, w-block
    volume_shape: tuple[int, int, int, int]
    visible_idx: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    hidden_idx: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __len__(self) -> int:
        return self.patches.shape[0]

    def with_partition(self, visible: np.ndarray, hidden: np.ndarray) -> "PatchSequence":
        check_partition(len(self), visible, hidden)
        return PatchSequence(self.patches, self.index, self.volume_shape, visible, hidden)


def check_partition(L: int, visible: np.ndarray, hidden: np.ndarray) -> None:
    combined = np.concatenate([visible, hidden])
    if combined.size != L or not np.array_equal(np.sort(combined), np.arange(L)):
        raise ValueError("visible and hidden must partition [0, L) disjointly")


def token_index_grid(spec: PatchGridSpec, shape: tuple[int, int, int, int]) -> np.ndarray:
    S, Tb, Hb, Wb = spec.grid(shape)
    grids = np.indices((S, Tb, Hb, Wb), dtype=np.int32)
    return grids.reshape(4, -1).T.copy()


def _volume_to_blocks(x: np.ndarray, spec: PatchGridSpec) -> np.ndarray:
    S, Tb, Hb, Wb = spec.grid(x.shape)
    t_p, h_p, w_p = spec.patch_size
    r = x.reshape(S, Tb, t_p, Hb, h_p, Wb, w_p)
    r = r.transpose(0, 1, 3, 5, 2, 4, 6)
    return r.reshape(S * Tb * Hb * Wb, t_p * h_p * w_p)


def _blocks_to_volume(blocks: np.ndarray, spec: PatchGridSpec,
                      shape: tuple[int, int, int, int]) -> np.ndarray:
    S, Tb, Hb, Wb = spec.grid(shape)
    t_p, h_p, w_p = spec.patch_size
    r = blocks.reshape(S, Tb, Hb, Wb, t_p, h_p, w_p)
    r = r.transpose(0, 1, 4, 2, 5, 3, 6)
    return r.reshape(shape)


def tokenize(x: np.ndarray, spec: PatchGridSpec) -> PatchSequence:
    """Volume -> token sequence; real halves first, imaginary halves second."""
    x = np.asarray(x)
    blocks_re = _volume_to_blocks(np.ascontiguousarray(x.real), spec)
    blocks_im = _volume_to_blocks(np.ascontiguousarray(x.imag) if np.iscomplexobj(x)
                                  else np.zeros_like(x, dtype=x.real.dtype), spec)
    patches = np.concatenate([blocks_re, blocks_im], axis=1)
    return PatchSequence(
        patches=patches,
        index=token_index_grid(spec, x.shape),
        volume_shape=tuple(x.shape),
    )


def detokenize(p: PatchSequence, spec: PatchGridSpec) -> np.ndarray:
    """Exact inverse of :func:`tokenize`; returns a complex volume."""
    expected = spec.num_tokens(p.volume_shape)
    if len(p) != expected:
        raise ValueError(f"sequence length {len(p)} inconsistent with grid ({expected} tokens)")
    half = spec.patch_dim // 2
    real = _blocks_to_volume(p.patches[:, :half], spec, p.volume_shape)
    imag = _blocks_to_volume(p.patches[:, half:], spec, p.volume_shape)
    return real + 1j * imag


def real_patches_to_volume(patches: np.ndarray, spec: PatchGridSpec,
                           shape: tuple[int, int, int, int]) -> np.ndarray:
    """Assemble single-channel (real) patches of width t_p*h_p*w_p into a volume."""
    expected = spec.num_tokens(shape)
    if patches.shape[0] != expected:
        raise ValueError(f"got {patches.shape[0]} patches, grid needs {expected}")
    return _blocks_to_volume(patches, spec, shape)


def random_visible_partition(L: int, mask_ratio: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Uniform partition with |hidden| = round(mask_ratio * L); sorted index sets."""
    if not (0.0 <= mask_ratio < 1.0):
        raise ValueError("mask_ratio must lie in [0, 1)")
    n_hidden = int(round(mask_ratio * L))
    rng = np.random.default_rng(np.random.SeedSequence((seed, L)))
    perm = rng.permutation(L)
    hidden = np.sort(perm[:n_hidden]).astype(np.int64)
    visible = np.sort(perm[n_hidden:]).astype(np.int64)
    return visible, hidden


def mask_visible_partition(mask: AccelerationMask, spec: PatchGridSpec,
                           shape: tuple[int, int, int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Acquisition-driven partition for k-space tokens over the full sequence.

    A token is visible iff its (t-block, w-block) footprint contains at least
    one sampled column in at least one of its frames; the h-block axis is
    irrelevant because the mask broadcasts along H.
    """
    S, Tb, Hb, Wb = spec.grid(shape)
    t_p, _, w_p = spec.patch_size
    Sm, Tm, Wm = mask.pattern.shape
    if (Sm, Tm, Wm) != (S, shape[1], shape[3]):
        raise ValueError(f"mask shape {(Sm, Tm, Wm)} inconsistent with volume {shape}")
    block_any = (
        mask.pattern.reshape(S, Tb, t_p, Wb, w_p).any(axis=(2, 4))
    )  # (S, Tb, Wb)
    vis_grid = np.broadcast_to(block_any[:, :, None, :], (S, Tb, Hb, Wb))
    flat = vis_grid.reshape(-1)
    visible = np.flatnonzero(flat).astype(np.int64)
    hidden = np.flatnonzero(~flat).astype(np.int64)
    return visible, hidden
