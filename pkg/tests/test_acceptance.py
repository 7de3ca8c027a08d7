"""Acceptance gate: one test per criterion, each printing a pass/fail line.

Criteria 7-12 consume a session-scoped desk experiment (full three-stage
pipeline on the default 64/16/32 cohort); expect the fixture to take tens of
minutes of CPU on first use.
"""

import dataclasses
import math
import time

import numpy as np
import pytest
import torch

from test_pipeline import tiny_experiment_config

from kmtr import cli, pipeline
from kmtr.align import AlignmentBatch, contrastive_loss
from kmtr.backbone import EncoderConfig, MaskedAutoencoder, grad_check, mae_loss, token_index_grid_from_flat
from kmtr.config import ExperimentConfig
from kmtr.kspace import fft2c, make_mask, undersample
from kmtr.metrics import MetricReport
from kmtr.phantom import PhenotypeVector
from kmtr.tokenizer import PatchGridSpec, detokenize, random_visible_partition, tokenize
from test_align import loop_contrastive
from test_kspace import naive_centered_dft2
from test_metrics import pair_counting_auc


def _report(criterion: int, description: str, ok: bool, detail: str) -> None:
    status = "PASS" if ok else "FAIL"
    print(f"[{status}] criterion {criterion:2d}: {description} ({detail})")
    assert ok, f"criterion {criterion}: {description}: {detail}"


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk_acceptance")
    config = ExperimentConfig(seed=7, out_dir=str(out))
    timings: dict[str, float] = {}
    t = time.time()
    pipeline.gen_data(config)
    pipeline.stage1_pretrain("image", config)
    pipeline.stage1_pretrain("kspace", config)
    timings["stage1"] = time.time() - t

    t = time.time()
    pipeline.stage2_align(config)
    timings["stage2"] = time.time() - t

    t = time.time()
    reports: dict[int, MetricReport] = {}
    for R in config.sweep_R:
        pipeline.stage3_finetune("regression", config, R=R)
        reports[R] = pipeline.evaluate("regression", config, R=R, split="test")
    unaligned = dataclasses.replace(config, use_alignment=False)
    pipeline.stage3_finetune("regression", unaligned, R=4)
    unaligned_report = pipeline.evaluate("regression", unaligned, R=4, split="test")
    timings["regression"] = time.time() - t

    pipeline.stage3_finetune("classification", config)
    classification = pipeline.evaluate("classification", config, split="test")
    pipeline.stage3_finetune("segmentation", config)
    segmentation = pipeline.evaluate("segmentation", config, split="test")
    pipeline.stage3_finetune("reconstruction", config)
    reconstruction = pipeline.evaluate("reconstruction", config, split="test")
    return {
        "config": config,
        "unaligned_config": unaligned,
        "out": out,
        "timings": timings,
        "regression": reports,
        "regression_unaligned": unaligned_report,
        "classification": classification,
        "segmentation": segmentation,
        "reconstruction": reconstruction,
    }


def test_criterion_01_fft_oracle():
    rng = np.random.default_rng(1)
    t0 = time.time()
    worst = 0.0
    for _ in range(3):
        frame = rng.standard_normal((8, 8)) + 1j * rng.standard_normal((8, 8))
        fast = fft2c(frame[None, None])[0, 0]
        worst = max(worst, float(np.max(np.abs(fast - naive_centered_dft2(frame)))))
    vol = rng.standard_normal((2, 3, 8, 8)) + 1j * rng.standard_normal((2, 3, 8, 8))
    parseval = abs(np.linalg.norm(fft2c(vol)) - np.linalg.norm(vol))
    elapsed = time.time() - t0
    ok = worst < 1e-10 and parseval < 1e-10 and elapsed < 1.0
    _report(1, "fft2c matches the naive double-sum DFT and Parseval",
            ok, f"max|diff|={worst:.2e}, parseval={parseval:.2e}, {elapsed:.2f}s")


def test_criterion_02_mask_budget():
    t0 = time.time()
    ok = True
    details = []
    for R in (2, 4, 8, 16):
        mask = make_mask(S=3, T=12, W=128, R=R, center_lines=4, seed=11)
        counts = mask.pattern.sum(axis=2)
        central = np.arange(62, 66)
        exact = bool(np.all(counts == 128 // R))
        centered = bool(np.all(mask.pattern[:, :, central] == 1))
        again = make_mask(S=3, T=12, W=128, R=R, center_lines=4, seed=11)
        reproducible = bool(np.array_equal(mask.pattern, again.pattern))
        ok = ok and exact and centered and reproducible
        details.append(f"R={R}:{counts.min()}=={128 // R}")
    elapsed = time.time() - t0
    ok = ok and elapsed < 1.0
    _report(2, "exact per-frame budget with guaranteed center lines",
            ok, ", ".join(details) + f", {elapsed:.2f}s")


def test_criterion_03_undersampling_identity():
    rng = np.random.default_rng(2)
    ok = True
    for trial in range(100):
        x = rng.standard_normal((1, 3, 8, 16)) + 1j * rng.standard_normal((1, 3, 8, 16))
        mask = make_mask(1, 3, 16, R=int(rng.choice([2, 4, 8])), center_lines=2, seed=trial)
        y = undersample(x, mask)
        keep = np.broadcast_to(mask.pattern.astype(bool)[:, :, None, :], x.shape)
        ok = ok and bool(np.array_equal(y[keep], x[keep])) and bool(np.all(y[~keep] == 0))
    _report(3, "undersample is exact element-wise masking on 100 random volumes",
            ok, "sampled entries bit-identical, rest exactly zero")


def test_criterion_04_contrastive_oracle():
    rng = np.random.default_rng(3)
    worst = 0.0
    for trial in range(100):
        n = int(rng.choice([2, 4, 8, 16]))
        z_i = rng.standard_normal((n, 8))
        z_k = rng.standard_normal((n, 8))
        lam = float(rng.uniform(0, 1))
        got = float(contrastive_loss(AlignmentBatch(torch.as_tensor(z_i), torch.as_tensor(z_k)),
                                     tau=0.1, lam=lam))
        want = loop_contrastive(z_i, z_k, tau=0.1, lam=lam)
        worst = max(worst, abs(got - want))
    z = torch.eye(2, dtype=torch.float64)
    hand = float(contrastive_loss(AlignmentBatch(z, z.clone()), tau=0.1, lam=0.5))
    ok = worst < 1e-6 and abs(hand - (-20.0)) < 1e-9
    _report(4, "vectorized symmetric contrastive loss matches the double-loop form",
            ok, f"max|diff|={worst:.2e} over 100 batches, hand case={hand:.12f}")


def test_criterion_05_gradient_checks():
    t0 = time.time()
    spec = PatchGridSpec((1, 2, 2))
    shape = (1, 2, 4, 6)  # 12 tokens, dim 8
    cfg = EncoderConfig(dim=8, depth=1, dec_depth=1, heads=2, mlp_ratio=2.0,
                        patch_dim=spec.patch_dim, grid=spec.grid(shape))
    torch.manual_seed(9)
    model = MaskedAutoencoder(cfg).double()
    with torch.no_grad():
        for p in model.parameters():
            if p.abs().sum() == 0:
                p.add_(torch.randn_like(p) * 0.05)
    rng = np.random.default_rng(4)
    seq = tokenize(rng.standard_normal(shape) + 1j * rng.standard_normal(shape), spec)
    vis, hid = random_visible_partition(len(seq), 0.5, seed=5)
    target = torch.as_tensor(seq.patches, dtype=torch.float64)[None]
    tokens = torch.as_tensor(seq.patches[vis], dtype=torch.float64)[None].requires_grad_(True)
    index = torch.as_tensor(seq.index[vis], dtype=torch.long)[None]
    full_index = torch.as_tensor(token_index_grid_from_flat(len(seq), cfg.grid))
    positions = torch.as_tensor(vis)[None]
    real = torch.ones_like(positions, dtype=torch.bool)
    mae_params = [tokens, model.embed.weight, model.blocks[0].attn.qkv.weight,
                  model.blocks[0].fc1.weight, model.decoder.mask_token, model.decoder.head.bias]
    for p in mae_params:
        p.requires_grad_(True)

    def mae_fn(tok_in, *_):
        cls, tok, _layers = model.forward_encoder(tok_in, index)
        pred = model.decode_full(cls, tok, positions, real, full_index)
        return mae_loss(pred, target, [hid])

    err_mae = grad_check(mae_fn, mae_params, epsilon=1e-5)

    from kmtr.align import Projector

    torch.manual_seed(10)
    proj_i, proj_k = Projector(6, 4).double(), Projector(6, 4).double()
    cls_i = torch.randn(4, 6, dtype=torch.float64, requires_grad=True)
    cls_k = torch.randn(4, 6, dtype=torch.float64, requires_grad=True)
    con_params = [cls_i, cls_k, proj_i.fc1.weight, proj_i.fc2.bias, proj_k.fc2.weight]

    def con_fn(ci, ck, *_):
        return contrastive_loss(AlignmentBatch(proj_i(ci), proj_k(ck)), tau=0.1, lam=0.5)

    err_con = grad_check(con_fn, con_params, epsilon=1e-5)
    elapsed = time.time() - t0
    ok = err_mae < 1e-4 and err_con < 1e-4 and elapsed < 120.0
    _report(5, "autograd matches central finite differences",
            ok, f"mae={err_mae:.2e}, contrastive={err_con:.2e}, {elapsed:.1f}s")


def test_criterion_06_tokenizer_roundtrip():
    rng = np.random.default_rng(6)
    exact = True
    for _ in range(10):
        t_p, h_p, w_p = (int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(1, 5)))
        spec = PatchGridSpec((t_p, h_p, w_p))
        shape = (int(rng.integers(1, 4)), t_p * int(rng.integers(1, 5)),
                 h_p * int(rng.integers(1, 5)), w_p * int(rng.integers(1, 5)))
        x = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        exact = exact and bool(np.array_equal(detokenize(tokenize(x, spec), spec), x))
    counts_ok = True
    for L in (10, 768, 1001):
        vis, hid = random_visible_partition(L, 0.70, seed=L)
        counts_ok = counts_ok and hid.size == int(round(0.70 * L)) and vis.size == L - hid.size
    ok = exact and counts_ok
    _report(6, "detokenize∘tokenize bit-exact; 70% partitions count exactly",
            ok, f"roundtrip={exact}, counts={counts_ok}")


@pytest.mark.slow
def test_criterion_07_alignment_separation(desk):
    config = desk["config"]
    pos, neg = pipeline.alignment_separation(config, "val")
    sep = pos - neg
    ck1 = desk["out"] / "checkpoints" / "stage1_kspace.pt"
    pos_u, neg_u = pipeline.alignment_separation(config, "val", ckpt_path=ck1)
    sep_u = pos_u - neg_u
    elapsed = desk["timings"]["stage2"]
    ok = sep >= 0.2 and sep > sep_u and elapsed < 1800.0
    _report(7, "Stage II separates positives from negatives on held-out subjects",
            ok, f"aligned sep={sep:.3f}, unaligned sep={sep_u:.3f}, stage2 {elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_08_downstream_ordering(desk):
    aligned = desk["regression"][4].values
    unaligned = desk["regression_unaligned"].values
    wins = sum(
        aligned[f"mae_{name}"] <= unaligned[f"mae_{name}"] for name in PhenotypeVector.NAMES)
    lvef_ok = (aligned["mae_LVEF"] < aligned["baseline_mae_LVEF"]
               and unaligned["mae_LVEF"] < unaligned["baseline_mae_LVEF"])
    elapsed = desk["timings"]["regression"]
    ok = wins >= 3 and lvef_ok and elapsed < 2700.0
    detail = (f"aligned<=unaligned on {wins}/4 phenotypes, "
              f"LVEF {aligned['mae_LVEF']:.2f}/{unaligned['mae_LVEF']:.2f} "
              f"vs baseline {aligned['baseline_mae_LVEF']:.2f}, {elapsed:.0f}s")
    _report(8, "alignment helps phenotype regression at R=4", ok, detail)


@pytest.mark.slow
def test_criterion_09_segmentation_dice(desk):
    values = desk["segmentation"].values
    score = values["dice_foreground_mean"]
    ok = score >= 0.7 and desk["segmentation"].R == 8
    _report(9, "mean foreground Dice at R=8 on held-out phantoms",
            ok, f"dice={score:.3f} (lv={values['dice_lv_cavity']:.3f}, "
                f"myo={values['dice_myocardium']:.3f}, rv={values['dice_rv_cavity']:.3f})")


@pytest.mark.slow
def test_criterion_10_reconstruction_gain(desk):
    values = desk["reconstruction"].values
    gain = values["psnr_gain_db"]
    ok = gain >= 3.0 and desk["reconstruction"].R == 4
    _report(10, "learned reconstruction beats zero-filled baseline by >= 3 dB",
            ok, f"psnr={values['psnr_mean']:.2f} dB vs zf={values['psnr_zero_filled_mean']:.2f} dB")


@pytest.mark.slow
def test_criterion_11_r_sweep_monotone(desk):
    means = [desk["regression"][R].values["mae_mean"] for R in (2, 4, 8, 16)]
    ok = all(means[i] <= means[i + 1] + 1e-12 for i in range(3))
    _report(11, "mean regression MAE non-decreasing across R=2,4,8,16",
            ok, " -> ".join(f"{m:.3f}" for m in means))


@pytest.mark.slow
def test_criterion_12_classification_auc(desk):
    values = desk["classification"].values
    auc = values["auc_roc_reduced_ef"]
    rng = np.random.default_rng(12)
    scores = np.round(rng.random(50), 1)
    labels = rng.random(50) < 0.4
    from kmtr.metrics import auc_roc

    oracle_gap = abs(auc_roc(scores, labels) - pair_counting_auc(scores, labels))
    ok = auc is not None and auc > 0.6 and oracle_gap < 1e-9
    _report(12, "reduced_EF AUC beats chance at R=4; AUC matches pair counting",
            ok, f"auc={auc:.3f}, oracle gap={oracle_gap:.1e}")


def test_criterion_13_cli_reproducibility(tmp_path):
    config = tiny_experiment_config(str(tmp_path / "exp"))
    cfg_path = tmp_path / "config.json"
    config.save_json(cfg_path)
    argv = ["--config", str(cfg_path)]
    verbs = [
        ["gen-data"],
        ["pretrain", "--domain", "image"],
        ["pretrain", "--domain", "kspace"],
        ["align"],
        ["finetune", "--task", "regression"],
        ["finetune", "--task", "classification"],
        ["finetune", "--task", "segmentation"],
        ["finetune", "--task", "reconstruction"],
        ["evaluate"],
        ["sweep-r"],
        ["export-embeddings", "--split", "val"],
        ["plot", "--split", "val"],
    ]
    for verb in verbs:
        assert cli.main(verb + argv) == 0
    out = tmp_path / "exp"
    tracked = sorted(
        [out / "cohort" / "manifest.json"]
        + list((out / "logs").glob("*.csv"))
        + [p for p in (out / "reports").rglob("*") if p.is_file()]
        + [out / "embeddings" / "val.csv"]
    )
    before = {p: p.read_bytes() for p in tracked}
    for verb in verbs:
        assert cli.main(verb + argv) == 0
    changed = [str(p) for p in tracked if p.read_bytes() != before[p]]
    ok = not changed
    _report(13, "every CLI verb rerun yields identical manifests, logs and reports",
            ok, f"{len(tracked)} files compared" + (f"; changed: {changed}" if changed else ""))
