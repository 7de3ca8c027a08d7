"""Synthetic dynamic cardiac phantom cohort with exact ground truth.

Each subject is a multi-slice 2D+t stack of concentric-ellipse anatomy: an LV
cavity inside a myocardial ring with an adjacent RV crescent. Semi-axes follow
a raised-cosine cardiac cycle (end-diastole at t=0, end-systole at t=T/2), so
areas, ejection fraction and disease labels are analytic functions of the
sampled parameters. Slice 0 is the reference slice that defines phenotypes;
further slices reuse the same parameters under a fixed scale profile with
independent center jitter.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .arrayio import save_array

LABEL_BACKGROUND = 0
LABEL_LV_CAVITY = 1
LABEL_MYOCARDIUM = 2
LABEL_RV_CAVITY = 3

MANIFEST_NAME = "manifest.json"

# RV crescent geometry relative to the epicardial (outer) ellipse.
_RV_A_FRAC = 0.55
_RV_B_FRAC = 0.85
_RV_OFFSET_FRAC = 1.02
# Fixed per-slice scale profile; slice 0 is the phenotype reference.
_SLICE_SCALE_STEP = 0.1
_SLICE_SCALE_MIN = 0.7
_FOV_MARGIN = 1.0


class GeometryOverflowError(RuntimeError):
    """Sampled anatomy does not fit the field of view after bounded retries."""


@dataclass
class PhantomConfig:
    """Cohort-level generation parameters (pixel units, intensities in [0, 1])."""

    S: int = 3
    T: int = 16
    H: int = 64
    W: int = 64
    seed: int = 0
    center_jitter: float = 3.0
    lv_semi_axis_a: tuple[float, float] = (7.0, 11.5)
    lv_semi_axis_b: tuple[float, float] = (6.0, 10.0)
    wall_thickness: tuple[float, float] = (2.5, 5.5)
    contraction_fraction: tuple[float, float] = (0.4, 0.85)
    intensity_levels: dict[int, float] = field(
        default_factory=lambda: {
            LABEL_BACKGROUND: 0.05,
            LABEL_LV_CAVITY: 0.90,
            LABEL_MYOCARDIUM: 0.45,
            LABEL_RV_CAVITY: 0.75,
        }
    )
    noise_std: float = 0.02
    rv_enabled: bool = True
    reduced_ef_cutoff: float = 50.0
    hypertrophy_cutoff: float = 4.5
    reduced_ef_ratio: float | None = None
    hypertrophy_ratio: float | None = None
    max_retries: int = 25

    def __post_init__(self):
        if min(self.S, self.T, self.H, self.W) < 1:
            raise ValueError("S, T, H, W must all be >= 1")
        for name in ("lv_semi_axis_a", "lv_semi_axis_b", "wall_thickness", "contraction_fraction"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: lower bound {lo} > upper bound {hi}")
        clo, chi = self.contraction_fraction
        if not (0.0 < clo and chi < 1.0):
            raise ValueError("contraction fraction range must lie inside (0, 1)")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        for ratio in (self.reduced_ef_ratio, self.hypertrophy_ratio):
            if ratio is not None and not (0.0 <= ratio <= 1.0):
                raise ValueError("target positive ratios must lie in [0, 1]")

    def slice_scale(self, s: int) -> float:
        return max(_SLICE_SCALE_MIN, 1.0 - _SLICE_SCALE_STEP * s)


@dataclass
class PhenotypeVector:
    """Ground-truth phenotypes of one subject (areas in px^2, LVEF in %)."""

    lveda: float
    lvesa: float
    lvef: float
    myoa: float

    NAMES = ("LVEDA", "LVESA", "LVEF", "MYOA")

    def as_array(self) -> np.ndarray:
        return np.array([self.lveda, self.lvesa, self.lvef, self.myoa], dtype=np.float64)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.NAMES, self.as_array().tolist()))


@dataclass
class SubjectRecord:
    subject_id: str
    seed: int
    params: dict[str, float]
    phenotypes: PhenotypeVector
    labels: dict[str, bool]
    image_path: str | None = None
    segmentation_path: str | None = None


def motion_scale(t: np.ndarray | float, T: int, c: float) -> np.ndarray | float:
    """Raised-cosine contraction factor: 1 at t=0 (ED), c at t=T/2 (ES)."""
    return 1.0 - (1.0 - c) * (1.0 - np.cos(2.0 * np.pi * np.asarray(t, dtype=np.float64) / T)) / 2.0


def compute_phenotypes(params: dict[str, float]) -> PhenotypeVector:
    """Analytic phenotypes from sampled parameters; no pixel counting involved.

    LVEDA = pi*a*b, LVESA = pi*(c*a)*(c*b), LVEF = 100*(1 - c^2),
    MYOA = pi*((a+w)*(b+w) - a*b) for wall thickness w at end-diastole.
    """
    a, b = params["lv_a"], params["lv_b"]
    c, w = params["contraction"], params["wall"]
    if a <= 0 or b <= 0:
        raise ValueError(f"semi-axes must be positive, got a={a}, b={b}")
    lveda = math.pi * a * b
    lvesa = math.pi * (c * a) * (c * b)
    lvef = 100.0 * (1.0 - c * c)
    myoa = math.pi * ((a + w) * (b + w) - a * b)
    return PhenotypeVector(lveda=lveda, lvesa=lvesa, lvef=lvef, myoa=myoa)


def assign_labels(
    phenotypes: PhenotypeVector, thresholds: dict[str, float], wall_thickness: float
) -> dict[str, bool]:
    """Rule-based disease labels: reduced_ef (LVEF below cutoff) and hypertrophy
    (wall thickness above cutoff)."""
    for key in ("reduced_ef", "hypertrophy"):
        if key not in thresholds:
            raise KeyError(f"missing threshold {key!r}")
    return {
        "reduced_ef": bool(phenotypes.lvef < thresholds["reduced_ef"]),
        "hypertrophy": bool(wall_thickness > thresholds["hypertrophy"]),
    }


def _sample_stratified(rng: np.random.Generator, lo: float, hi: float, cutoff: float,
                       positive_above: bool, ratio: float | None) -> float:
    """Uniform draw from [lo, hi]; with a target ratio, stratified around the cutoff."""
    if ratio is None or not (lo < cutoff < hi):
        return float(rng.uniform(lo, hi))
    positive = rng.random() < ratio
    if positive == positive_above:
        return float(rng.uniform(cutoff, hi))
    return float(rng.uniform(lo, cutoff))


def sample_params(config: PhantomConfig, subject_seed: int) -> dict[str, float]:
    """Draw one subject's parameters, deterministic in (config.seed, subject_seed)."""
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, subject_seed)))
    # reduced EF means LVEF < cutoff, i.e. contraction above sqrt(1 - cutoff/100)
    c_cut = math.sqrt(max(0.0, 1.0 - config.reduced_ef_cutoff / 100.0))
    params: dict[str, float] = {
        "lv_a": float(rng.uniform(*config.lv_semi_axis_a)),
        "lv_b": float(rng.uniform(*config.lv_semi_axis_b)),
        "wall": _sample_stratified(
            rng, *config.wall_thickness, config.hypertrophy_cutoff, True, config.hypertrophy_ratio
        ),
        "contraction": _sample_stratified(
            rng, *config.contraction_fraction, c_cut, True, config.reduced_ef_ratio
        ),
    }
    for s in range(config.S):
        params[f"jitter_x_{s}"] = float(rng.uniform(-config.center_jitter, config.center_jitter))
        params[f"jitter_y_{s}"] = float(rng.uniform(-config.center_jitter, config.center_jitter))
        params[f"slice_scale_{s}"] = config.slice_scale(s)
    return params


def _slice_geometry(config: PhantomConfig, params: dict[str, float], s: int, t: int):
    """Centers and semi-axes of the three ellipses of slice s at frame t."""
    scale = params[f"slice_scale_{s}"]
    m = float(motion_scale(t, config.T, params["contraction"]))
    cx = config.W / 2.0 + params[f"jitter_x_{s}"]
    cy = config.H / 2.0 + params[f"jitter_y_{s}"]
    cav_a = scale * params["lv_a"] * m
    cav_b = scale * params["lv_b"] * m
    out_a = cav_a + params["wall"]
    out_b = cav_b + params["wall"]
    rv_a = _RV_A_FRAC * out_a
    rv_b = _RV_B_FRAC * out_b
    rv_cx = cx - _RV_OFFSET_FRAC * out_a
    return {
        "cavity": (cx, cy, cav_a, cav_b),
        "outer": (cx, cy, out_a, out_b),
        "rv": (rv_cx, cy, rv_a, rv_b),
    }


def _geometry_fits(config: PhantomConfig, params: dict[str, float]) -> bool:
    for s in range(config.S):
        geo = _slice_geometry(config, params, s, 0)
        shapes = [geo["outer"]] + ([geo["rv"]] if config.rv_enabled else [])
        for cx, cy, a, b in shapes:
            if cx - a < _FOV_MARGIN or cx + a > config.W - _FOV_MARGIN:
                return False
            if cy - b < _FOV_MARGIN or cy + b > config.H - _FOV_MARGIN:
                return False
    return True


def _inside(X, Y, ellipse) -> np.ndarray:
    cx, cy, a, b = ellipse
    return ((X - cx) / a) ** 2 + ((Y - cy) / b) ** 2 <= 1.0


def _frame_labels(config: PhantomConfig, params: dict[str, float], s: int, t: int,
                  X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    geo = _slice_geometry(config, params, s, t)
    labels = np.zeros(X.shape, dtype=np.uint8)
    if config.rv_enabled:
        labels[_inside(X, Y, geo["rv"])] = LABEL_RV_CAVITY
    labels[_inside(X, Y, geo["outer"])] = LABEL_MYOCARDIUM
    labels[_inside(X, Y, geo["cavity"])] = LABEL_LV_CAVITY
    return labels


def generate_subject(
    config: PhantomConfig, subject_seed: int
) -> tuple[SubjectRecord, np.ndarray, np.ndarray]:
    """Render one subject.

    Returns (record, image, segmentation): image is float32 (S, T, H, W) in
    [0, 1] with anti-aliased edges (2x supersampling); segmentation is uint8
    (S, T, H, W) sampled at pixel centers. Bit-identical for identical seeds.
    """
    params = None
    for attempt in range(config.max_retries):
        candidate = sample_params(config, subject_seed + attempt * 0x9E3779B1)
        if _geometry_fits(config, candidate):
            params = candidate
            break
    if params is None:
        raise GeometryOverflowError(
            f"no in-bounds geometry after {config.max_retries} retries (seed {subject_seed})"
        )

    levels = np.zeros(4, dtype=np.float64)
    for lab, level in config.intensity_levels.items():
        levels[lab] = level

    # pixel centers and 2x supersampled offsets
    xs = np.arange(config.W, dtype=np.float64) + 0.5
    ys = np.arange(config.H, dtype=np.float64) + 0.5
    Xc, Yc = np.meshgrid(xs, ys)
    sub_offsets = [(-0.25, -0.25), (-0.25, 0.25), (0.25, -0.25), (0.25, 0.25)]

    image = np.zeros((config.S, config.T, config.H, config.W), dtype=np.float64)
    seg = np.zeros((config.S, config.T, config.H, config.W), dtype=np.uint8)
    for s in range(config.S):
        for t in range(config.T):
            seg[s, t] = _frame_labels(config, params, s, t, Xc, Yc)
            acc = np.zeros((config.H, config.W), dtype=np.float64)
            for dx, dy in sub_offsets:
                sub = _frame_labels(config, params, s, t, Xc + dx, Yc + dy)
                acc += levels[sub]
            image[s, t] = acc / len(sub_offsets)

    if config.noise_std > 0:
        noise_rng = np.random.default_rng(
            np.random.SeedSequence((config.seed, subject_seed, 0xA05E))
        )
        image = image + noise_rng.normal(0.0, config.noise_std, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    phenotypes = compute_phenotypes(params)
    labels = assign_labels(
        phenotypes,
        {"reduced_ef": config.reduced_ef_cutoff, "hypertrophy": config.hypertrophy_cutoff},
        params["wall"],
    )
    record = SubjectRecord(
        subject_id=f"subj_{subject_seed:05d}",
        seed=subject_seed,
        params=params,
        phenotypes=phenotypes,
        labels=labels,
    )
    return record, image, seg


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def generate_cohort(config: PhantomConfig, n: int, out_dir: str | Path) -> dict:
    """Write n subjects (image + segmentation arrays) plus a JSON manifest.

    Deterministic in (config.seed, n). On failure, files written by this call
    are removed before the error propagates.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    subjects = []
    try:
        for i in range(n):
            record, image, seg = generate_subject(config, i)
            img_path = out / f"{record.subject_id}_image.kmtr"
            seg_path = out / f"{record.subject_id}_seg.kmtr"
            save_array(img_path, image)
            written.append(img_path)
            save_array(seg_path, seg)
            written.append(seg_path)
            record.image_path = img_path.name
            record.segmentation_path = seg_path.name
            subjects.append(
                {
                    "subject_id": record.subject_id,
                    "seed": record.seed,
                    "params": record.params,
                    "phenotypes": record.phenotypes.as_dict(),
                    "labels": record.labels,
                    "files": {"image": img_path.name, "segmentation": seg_path.name},
                    "sha256": {"image": _sha256(img_path), "segmentation": _sha256(seg_path)},
                }
            )
        manifest = {
            "format_version": 1,
            "n": n,
            "config": _config_as_dict(config),
            "phenotype_names": list(PhenotypeVector.NAMES),
            "disease_names": ["reduced_ef", "hypertrophy"],
            "phenotype_units": "areas in px^2 (2D analogue of volumes), LVEF in %",
            "subjects": subjects,
        }
        manifest_path = out / MANIFEST_NAME
        with open(manifest_path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, sort_keys=True, indent=2)
            fh.write("\n")
    except Exception:
        for path in written:
            path.unlink(missing_ok=True)
        raise
    return manifest


def _config_as_dict(config: PhantomConfig) -> dict:
    from dataclasses import asdict

    d = asdict(config)
    d["intensity_levels"] = {str(k): v for k, v in config.intensity_levels.items()}
    return d


def load_manifest(cohort_dir: str | Path) -> dict:
    with open(Path(cohort_dir) / MANIFEST_NAME, encoding="utf-8") as fh:
        return json.load(fh)
