"""Experiment orchestration: the three training stages, evaluation, the R
sweep, embedding export and persistence.

One experiment directory is owned by one process at a time (lock file). Every
stage is deterministic given (config, seed): reruns produce identical
manifests, loss logs and metric reports.
"""

from __future__ import annotations

import contextlib
import csv
import logging
import math
import os
from pathlib import Path

import numpy as np
import torch

from . import heads as heads_mod
from .align import Projector, align_step, cosine_separation
from .backbone import EncoderConfig, MaskedAutoencoder, encode, mae_loss, token_index_grid_from_flat
from .config import TASKS, ExperimentConfig
from .data import (
    DISEASES,
    Acquisition,
    CohortData,
    SubjectData,
    acquire,
    batch_positions,
    image_token_array,
    mix_seed,
    pad_token_batch,
)
from .arrayio import save_array
from .kspace import zero_filled
from .metrics import MetricReport, binary_metrics, dice, mean_abs_error, psnr
from .phantom import PhenotypeVector, generate_cohort
from .tokenizer import PatchGridSpec, random_visible_partition, tokenize

log = logging.getLogger("kmtr")

STAGE1_IMAGE = "stage1_image"
STAGE1_KSPACE = "stage1_kspace"
STAGE2 = "stage2_aligned"


class ExperimentLockedError(RuntimeError):
    pass


@contextlib.contextmanager
def experiment_lock(out_dir: str | Path):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ExperimentLockedError(
            f"experiment directory {out} is locked (stale? remove {lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _dirs(config: ExperimentConfig) -> dict[str, Path]:
    out = Path(config.out_dir)
    d = {
        "out": out,
        "cohort": out / "cohort",
        "checkpoints": out / "checkpoints",
        "logs": out / "logs",
        "reports": out / "reports",
        "embeddings": out / "embeddings",
    }
    for p in d.values():
        p.mkdir(parents=True, exist_ok=True)
    return d


def build_spec(config: ExperimentConfig) -> PatchGridSpec:
    return PatchGridSpec(patch_size=config.patch_size)


def build_encoder_config(config: ExperimentConfig) -> EncoderConfig:
    spec = build_spec(config)
    ph = config.phantom
    grid = spec.grid((ph.S, ph.T, ph.H, ph.W))
    return EncoderConfig(
        dim=config.dim,
        depth=config.depth,
        dec_depth=config.dec_depth,
        heads=config.heads,
        mlp_ratio=config.mlp_ratio,
        patch_dim=spec.patch_dim,
        grid=grid,
    )


def save_checkpoint(path: Path, stage: str, config: ExperimentConfig, payload: dict) -> None:
    torch.save(
        {
            "stage": stage,
            "config_hash": config.config_hash(),
            "config": config.to_dict(),
            "rng_state": torch.get_rng_state(),
            **payload,
        },
        path,
    )


def load_checkpoint(path: str | Path) -> dict:
    if not Path(path).exists():
        raise FileNotFoundError(f"missing checkpoint {path}")
    return torch.load(path, map_location="cpu", weights_only=False)


def _write_log(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _write_acquisition_manifest(path: Path, subjects: list[SubjectData],
                                acqs: list[Acquisition], R: int) -> None:
    """Audit record of the acquisition simulation: seeds, R and k-space scales."""
    import json

    payload = {
        "R": R,
        "subjects": [
            {
                "subject_id": s.subject_id,
                "mask_seed": a.mask_seed,
                "phase_seed": a.phase_seed,
                "kscale": a.kscale,
                "n_visible": int(a.visible.size),
                "n_hidden": int(a.hidden.size),
            }
            for s, a in zip(subjects, acqs)
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _batch_indices(n: int, batch: int, steps: int, rng: np.random.Generator):
    pool: list[int] = []
    for _ in range(steps):
        while len(pool) < batch:
            pool.extend(rng.permutation(n).tolist())
        yield pool[:batch]
        pool = pool[batch:]


def _cosine_lr(optimizer, base_lr: float, step: int, total: int) -> None:
    lr = base_lr * 0.5 * (1.0 + math.cos(math.pi * step / max(total, 1)))
    for group in optimizer.param_groups:
        group["lr"] = lr


def gen_data(config: ExperimentConfig) -> dict:
    """CLI verb gen-data: write the cohort and the resolved experiment config."""
    d = _dirs(config)
    with experiment_lock(d["out"]):
        config.save_json(d["out"] / "experiment.json")
        manifest = generate_cohort(config.phantom, config.n_total, d["cohort"])
    log.info("gen-data: %d subjects in %s", config.n_total, d["cohort"])
    return manifest


def _full_index_tensor(enc_cfg: EncoderConfig) -> torch.Tensor:
    S, Tb, Hb, Wb = enc_cfg.grid
    L = S * Tb * Hb * Wb
    return torch.as_tensor(token_index_grid_from_flat(L, enc_cfg.grid), dtype=torch.long)


def stage1_pretrain(domain: str, config: ExperimentConfig) -> Path:
    """Masked-autoencoder pretraining for one domain on the train split."""
    if domain not in ("image", "kspace"):
        raise ValueError("domain must be 'image' or 'kspace'")
    d = _dirs(config)
    spec = build_spec(config)
    enc_cfg = build_encoder_config(config)
    with experiment_lock(d["out"]):
        cohort = CohortData.load(d["cohort"], config)
        train = cohort.split_subjects("train")
        torch.manual_seed(mix_seed(config.seed, "stage1", domain, "init"))
        model = MaskedAutoencoder(enc_cfg)
        full_index = _full_index_tensor(enc_cfg)
        L = full_index.shape[0]
        index_grid = np.ascontiguousarray(full_index.numpy())

        if domain == "image":
            inputs = [image_token_array(s, spec) for s in train]
            targets = inputs
            fixed_parts = None
        else:
            acqs = [acquire(s, config.pretrain_R, config, spec) for s in train]
            inputs = [a.k_input for a in acqs]
            targets = [a.k_target for a in acqs]
            fixed_parts = [(a.visible, a.hidden) for a in acqs]
            _write_acquisition_manifest(
                d["logs"] / "acquisition_stage1_kspace.json", train, acqs, config.pretrain_R)

        opt = torch.optim.AdamW(model.parameters(), lr=config.stage1_lr,
                                weight_decay=config.weight_decay)
        rng = np.random.default_rng(mix_seed(config.seed, "stage1", domain, "batches"))
        rows: list[list] = []
        warned_empty = False
        for step, batch_ids in enumerate(
            _batch_indices(len(train), config.stage1_batch, config.stage1_steps, rng)
        ):
            vis_list, hid_list, enc_rows, tgt = [], [], [], []
            for i in batch_ids:
                if fixed_parts is None:
                    vis, hid = random_visible_partition(
                        L, config.image_mask_ratio, mix_seed(config.seed, "s1mask", step, i))
                else:
                    vis, hid = fixed_parts[i]
                vis_list.append(vis)
                hid_list.append(hid)
                enc_rows.append((inputs[i][vis], index_grid[vis]))
                tgt.append(torch.as_tensor(targets[i], dtype=torch.float32))
            batch = pad_token_batch(enc_rows)
            positions, real = batch_positions(vis_list)
            cls, tok, _ = model.forward_encoder(**batch)
            pred = model.decode_full(cls, tok, positions, real, full_index)
            loss = mae_loss(pred, torch.stack(tgt), hid_list, config.loss_positions)
            if not torch.isfinite(loss):
                raise RuntimeError(f"stage1 {domain} diverged at step {step}: loss={loss}")
            degenerate = config.loss_positions == "hidden" and all(h.size == 0 for h in hid_list)
            if degenerate:
                if not warned_empty:
                    log.warning("stage1 %s: every hidden set is empty; loss is constant 0", domain)
                    warned_empty = True
            else:
                opt.zero_grad(set_to_none=True)
                loss.backward()
                _cosine_lr(opt, config.stage1_lr, step, config.stage1_steps)
                opt.step()
            rows.append([step, float(loss.detach())])

        stage = STAGE1_IMAGE if domain == "image" else STAGE1_KSPACE
        _write_log(d["logs"] / f"{stage}.csv", ["step", "loss"], rows)
        ckpt = d["checkpoints"] / f"{stage}.pt"
        save_checkpoint(ckpt, stage, config, {
            "model": model.state_dict(),
            "final_loss": rows[-1][1] if rows else 0.0,
        })
    log.info("stage1 %s: %d steps, final loss %.6f", domain, len(rows), rows[-1][1])
    return ckpt


def stage2_align(config: ExperimentConfig) -> Path:
    """Contrastive alignment of the two Stage I encoders on the train split."""
    d = _dirs(config)
    spec = build_spec(config)
    enc_cfg = build_encoder_config(config)
    with experiment_lock(d["out"]):
        ck_i = load_checkpoint(d["checkpoints"] / f"{STAGE1_IMAGE}.pt")
        ck_k = load_checkpoint(d["checkpoints"] / f"{STAGE1_KSPACE}.pt")
        image_model = MaskedAutoencoder(enc_cfg)
        image_model.load_state_dict(ck_i["model"])
        kspace_model = MaskedAutoencoder(enc_cfg)
        kspace_model.load_state_dict(ck_k["model"])
        torch.manual_seed(mix_seed(config.seed, "stage2", "proj"))
        proj_i = Projector(config.dim, config.proj_dim)
        proj_k = Projector(config.dim, config.proj_dim)

        cohort = CohortData.load(d["cohort"], config)
        train = cohort.split_subjects("train")
        img_tokens = [image_token_array(s, spec) for s in train]
        acqs = [acquire(s, config.pretrain_R, config, spec) for s in train]
        full_index = _full_index_tensor(enc_cfg)
        index_grid = np.ascontiguousarray(full_index.numpy())

        params = list(kspace_model.parameters()) + list(proj_i.parameters()) + list(proj_k.parameters())
        if not config.freeze_image_encoder:
            params += list(image_model.parameters())
        opt = torch.optim.AdamW(params, lr=config.stage2_lr, weight_decay=config.weight_decay)
        rng = np.random.default_rng(mix_seed(config.seed, "stage2", "batches"))
        rows: list[list] = []
        for step, batch_ids in enumerate(
            _batch_indices(len(train), config.stage2_batch, config.stage2_steps, rng)
        ):
            image_inputs = pad_token_batch([(img_tokens[i], index_grid) for i in batch_ids])
            kspace_inputs = pad_token_batch(
                [(acqs[i].k_input[acqs[i].visible], index_grid[acqs[i].visible]) for i in batch_ids]
            )
            _cosine_lr(opt, config.stage2_lr, step, config.stage2_steps)
            loss, pos, neg = align_step(
                image_model, kspace_model, proj_i, proj_k, image_inputs, kspace_inputs, opt,
                tau=config.tau, lam=config.lam,
                include_positive_in_denominator=config.include_positive_in_denominator,
                freeze_image=config.freeze_image_encoder,
            )
            if not math.isfinite(loss):
                raise RuntimeError(f"stage2 diverged at step {step}: loss={loss}")
            rows.append([step, loss, pos, neg])
        _write_log(d["logs"] / "stage2.csv", ["step", "loss", "pos_cos_mean", "neg_cos_mean"], rows)
        ckpt = d["checkpoints"] / f"{STAGE2}.pt"
        save_checkpoint(ckpt, STAGE2, config, {
            "model": kspace_model.state_dict(),
            "image_model": image_model.state_dict(),
            "proj_i": proj_i.state_dict(),
            "proj_k": proj_k.state_dict(),
        })
    log.info("stage2: %d steps, final separation %.4f", len(rows), rows[-1][2] - rows[-1][3])
    return ckpt


def _variant(config: ExperimentConfig) -> str:
    return "k-MTR" if config.use_alignment else "MAE_k_u"


def _variant_tag(config: ExperimentConfig) -> str:
    return "aligned" if config.use_alignment else "unaligned"


def _load_encoder(config: ExperimentConfig, enc_cfg: EncoderConfig, d: dict) -> MaskedAutoencoder:
    name = STAGE2 if config.use_alignment else STAGE1_KSPACE
    ck = load_checkpoint(d["checkpoints"] / f"{name}.pt")
    model = MaskedAutoencoder(enc_cfg)
    model.load_state_dict(ck["model"])
    return model


def _train_stats(train: list[SubjectData]) -> tuple[np.ndarray, np.ndarray]:
    phen = np.stack([s.phenotypes for s in train])
    mean = phen.mean(axis=0)
    std = phen.std(axis=0)
    std[std == 0] = 1.0
    return mean, std


def _pos_weight(train: list[SubjectData]) -> torch.Tensor:
    labels = np.stack([s.labels for s in train])
    n = labels.shape[0]
    n_pos = labels.sum(axis=0)
    weight = np.where((n_pos > 0) & (n_pos < n), (n - n_pos) / np.maximum(n_pos, 1), 1.0)
    return torch.as_tensor(weight, dtype=torch.float32)


def _scatter_layers(model: MaskedAutoencoder, layers: list[torch.Tensor],
                    positions: torch.Tensor, real: torch.Tensor,
                    full_index: torch.Tensor) -> list[torch.Tensor]:
    B = positions.shape[0]
    L = full_index.shape[0]
    fills = model.decoder.mask_token + model.decoder.pos(full_index)
    b_idx = torch.arange(B)[:, None].expand_as(positions)
    outs = []
    for layer in layers:
        full = fills[None].expand(B, L, -1).clone()
        full[b_idx[real], positions[real]] = layer[real]
        outs.append(full)
    return outs


def _seg_layers(depth: int) -> tuple[int, int]:
    return ((depth + 1) // 2, depth)


def stage3_finetune(task: str, config: ExperimentConfig, R: int | None = None) -> tuple[Path, MetricReport]:
    """Fine-tune the pretrained k-space encoder with one task head."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    R = int(R if R is not None else config.task_R[task])
    d = _dirs(config)
    spec = build_spec(config)
    enc_cfg = build_encoder_config(config)
    t_p, h_p, w_p = config.patch_size
    with experiment_lock(d["out"]):
        cohort = CohortData.load(d["cohort"], config)
        train = cohort.split_subjects("train")
        model = _load_encoder(config, enc_cfg, d)
        torch.manual_seed(mix_seed(config.seed, "stage3", task, R, _variant_tag(config)))

        if task == "regression":
            mean, std = _train_stats(train)
            head = heads_mod.RegressionHead(config.dim, 4, config.head_hidden, mean, std)
        elif task == "classification":
            head = heads_mod.ClassificationHead(config.dim, len(DISEASES), config.head_hidden)
            pos_weight = _pos_weight(train)
        elif task == "segmentation":
            head = heads_mod.SegmentationHead(enc_cfg, config.patch_size)
        else:
            head = heads_mod.ReconstructionHead(enc_cfg, config.patch_size)

        acqs = [acquire(s, R, config, spec) for s in train]
        _write_acquisition_manifest(
            d["logs"] / f"acquisition_{task}_R{R}_{_variant_tag(config)}.json", train, acqs, R)
        full_index = _full_index_tensor(enc_cfg)
        index_grid = np.ascontiguousarray(full_index.numpy())
        vol_shape = train[0].image.shape
        if task == "regression":
            target_all = torch.as_tensor(
                np.stack([s.phenotypes for s in train]), dtype=torch.float32)
            target_all = head.normalize(target_all).float()
        elif task == "classification":
            target_all = torch.as_tensor(np.stack([s.labels for s in train]), dtype=torch.float32)
        elif task == "segmentation":
            seg_all = [torch.as_tensor(s.seg.astype(np.int64)) for s in train]
        else:
            recon_dim = t_p * h_p * w_p
            recon_targets = [
                torch.as_tensor(image_token_array(s, spec)[:, :recon_dim]) for s in train
            ]

        head_params = list(head.parameters())
        params = head_params if config.linear_probe else head_params + list(model.parameters())
        opt = torch.optim.AdamW(params, lr=config.stage3_lr, weight_decay=config.weight_decay)
        rng = np.random.default_rng(mix_seed(config.seed, "stage3", task, R, "batches"))
        steps = config.stage3_steps[task]
        batch = config.stage3_batch[task]
        return_layers = _seg_layers(config.depth) if task == "segmentation" else ()
        rows: list[list] = []
        for step, batch_ids in enumerate(_batch_indices(len(train), batch, steps, rng)):
            if config.resample_mask_per_epoch:
                epoch = (step * batch) // max(len(train), 1)
                acq_batch = [acquire(train[i], R, config, spec, mask_epoch=epoch) for i in batch_ids]
            else:
                acq_batch = [acqs[i] for i in batch_ids]
            enc_rows = [(a.k_input[a.visible], index_grid[a.visible]) for a in acq_batch]
            inputs = pad_token_batch(enc_rows)
            positions, real = batch_positions([a.visible for a in acq_batch])
            cls, tok, layers = model.forward_encoder(**inputs, return_layers=return_layers)

            if task == "regression":
                pred = head(cls)
                loss = heads_mod.regression_loss(pred, target_all[batch_ids])
            elif task == "classification":
                logits = head(cls)
                loss = heads_mod.classification_loss(logits, target_all[batch_ids], pos_weight)
            elif task == "segmentation":
                scattered = _scatter_layers(model, layers, positions, real, full_index)
                logits = head(scattered[-1], scattered[0], vol_shape)
                labels = torch.stack([seg_all[i] for i in batch_ids])
                loss = heads_mod.segmentation_loss(logits, labels)
            else:
                pred = head(cls, tok, positions, real, full_index)
                target = torch.stack([recon_targets[i] for i in batch_ids])
                loss = torch.nn.functional.mse_loss(pred, target)

            if not torch.isfinite(loss):
                raise RuntimeError(f"stage3 {task} diverged at step {step}: loss={loss}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            _cosine_lr(opt, config.stage3_lr, step, steps)
            opt.step()
            rows.append([step, float(loss.detach())])

        tag = f"{task}_R{R}_{_variant_tag(config)}"
        _write_log(d["logs"] / f"finetune_{tag}.csv", ["step", "loss"], rows)
        ckpt = d["checkpoints"] / f"finetune_{tag}.pt"
        mean_, std_ = (_train_stats(train)) if task == "regression" else (None, None)
        save_checkpoint(ckpt, f"stage3_{tag}", config, {
            "model": model.state_dict(),
            "head": head.state_dict(),
            "task": task,
            "R": R,
            "variant": _variant(config),
            "train_phenotype_mean": None if mean_ is None else mean_.tolist(),
            "train_phenotype_std": None if std_ is None else std_.tolist(),
        })
    log.info("stage3 %s (R=%d, %s): %d steps, final loss %.6f",
             task, R, _variant(config), steps, rows[-1][1])
    report = evaluate(task, config, R=R, split="val", ckpt_path=ckpt)
    return ckpt, report


def _assert_undersampled(acq: Acquisition) -> None:
    # instrumentation: heads may only ever consume undersampled k-space tokens
    if acq.hidden.size and not np.all(acq.k_input[acq.hidden] == 0.0):
        raise AssertionError("evaluation input contains data at unacquired positions")


def evaluate(task: str, config: ExperimentConfig, R: int | None = None, split: str = "test",
             ckpt_path: str | Path | None = None) -> MetricReport:
    """Evaluate one task checkpoint on a held-out split; includes baselines."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    R = int(R if R is not None else config.task_R[task])
    d = _dirs(config)
    spec = build_spec(config)
    enc_cfg = build_encoder_config(config)
    if ckpt_path is None:
        ckpt_path = d["checkpoints"] / f"finetune_{task}_R{R}_{_variant_tag(config)}.pt"
    ck = load_checkpoint(ckpt_path)
    if ck.get("task") != task:
        raise ValueError(f"checkpoint {ckpt_path} holds task {ck.get('task')!r}, not {task!r}")

    cohort = CohortData.load(d["cohort"], config)
    train_ids = {s.subject_id for s in cohort.split_subjects("train")}
    subjects = cohort.split_subjects(split)
    if split != "train" and train_ids & {s.subject_id for s in subjects}:
        raise RuntimeError("split contamination: evaluation subjects appear in train")

    model = MaskedAutoencoder(enc_cfg)
    model.load_state_dict(ck["model"])
    model.eval()
    if task == "regression":
        head = heads_mod.RegressionHead(config.dim, 4, config.head_hidden)
    elif task == "classification":
        head = heads_mod.ClassificationHead(config.dim, len(DISEASES), config.head_hidden)
    elif task == "segmentation":
        head = heads_mod.SegmentationHead(enc_cfg, config.patch_size)
    else:
        head = heads_mod.ReconstructionHead(enc_cfg, config.patch_size)
    head.load_state_dict(ck["head"])
    head.eval()

    values: dict[str, float | None] = {}
    tag = f"{task}_R{R}_{_variant_tag(config)}_{split}"
    if task == "regression":
        preds, truths = [], []
        for s in subjects:
            acq = acquire(s, R, config, spec)
            _assert_undersampled(acq)
            seq = tokenize_from_acq(acq, spec, s.image.shape)
            vec = heads_mod.regress(encode(seq, model), head)
            preds.append(vec.as_array())
            truths.append(s.phenotypes)
        preds_a = np.stack(preds)
        truths_a = np.stack(truths)
        _export_rows(
            d["reports"] / f"predictions_{tag}.csv",
            ["subject_id", *[f"pred_{n}" for n in PhenotypeVector.NAMES],
             *[f"truth_{n}" for n in PhenotypeVector.NAMES]],
            [[s.subject_id, *p.tolist(), *t.tolist()]
             for s, p, t in zip(subjects, preds, truths)])
        train_mean = np.asarray(ck["train_phenotype_mean"], dtype=np.float64)
        for j, name in enumerate(PhenotypeVector.NAMES):
            values[f"mae_{name}"] = mean_abs_error(preds_a[:, j], truths_a[:, j])
            values[f"baseline_mae_{name}"] = mean_abs_error(
                np.full(len(subjects), train_mean[j]), truths_a[:, j])
        values["mae_mean"] = float(np.mean([values[f"mae_{n}"] for n in PhenotypeVector.NAMES]))
        values["baseline_mae_mean"] = float(
            np.mean([values[f"baseline_mae_{n}"] for n in PhenotypeVector.NAMES]))
    elif task == "classification":
        scores, labels = [], []
        for s in subjects:
            acq = acquire(s, R, config, spec)
            _assert_undersampled(acq)
            seq = tokenize_from_acq(acq, spec, s.image.shape)
            probs = heads_mod.classify(encode(seq, model), head, DISEASES)
            scores.append([probs[dz] for dz in DISEASES])
            labels.append(s.labels)
        scores_a = np.asarray(scores)
        labels_a = np.asarray(labels) > 0.5
        _export_rows(
            d["reports"] / f"predictions_{tag}.csv",
            ["subject_id", *[f"prob_{dz}" for dz in DISEASES],
             *[f"label_{dz}" for dz in DISEASES]],
            [[s.subject_id, *row, *lab.astype(int).tolist()]
             for s, row, lab in zip(subjects, scores, labels_a)])
        for j, dz in enumerate(DISEASES):
            m = binary_metrics(scores_a[:, j], labels_a[:, j])
            for key, val in m.items():
                values[f"{key}_{dz}"] = val
            values[f"positive_ratio_{dz}"] = float(labels_a[:, j].mean())
    elif task == "segmentation":
        class_names = {1: "lv_cavity", 2: "myocardium", 3: "rv_cavity"}
        per_class: dict[int, list[float]] = {c: [] for c in class_names}
        for s in subjects:
            acq = acquire(s, R, config, spec)
            _assert_undersampled(acq)
            seq = tokenize_from_acq(acq, spec, s.image.shape)
            logits = heads_mod.segment(model, seq, head)
            pred_labels = logits.argmax(axis=-1).astype(np.uint8)
            pred_dir = d["reports"] / f"predictions_{tag}"
            pred_dir.mkdir(exist_ok=True)
            save_array(pred_dir / f"{s.subject_id}_seg.kmtr", pred_labels)
            for c in class_names:
                per_class[c].append(dice(pred_labels, s.seg, c))
        for c, name in class_names.items():
            values[f"dice_{name}"] = float(np.mean(per_class[c]))
        values["dice_foreground_mean"] = float(
            np.mean([values[f"dice_{n}"] for n in class_names.values()]))
    else:
        psnrs, zf_psnrs = [], []
        for s in subjects:
            acq = acquire(s, R, config, spec)
            _assert_undersampled(acq)
            seq = tokenize_from_acq(acq, spec, s.image.shape)
            recon = heads_mod.reconstruct(model, seq, head)
            pred_dir = d["reports"] / f"predictions_{tag}"
            pred_dir.mkdir(exist_ok=True)
            save_array(pred_dir / f"{s.subject_id}_recon.kmtr", recon.astype(np.float32))
            truth = s.image.astype(np.float64)
            psnrs.append(psnr(recon, truth))
            zf = np.abs(zero_filled(unscaled_kspace(acq, spec, s.image.shape)))
            zf_psnrs.append(psnr(zf, truth))
        values["psnr_mean"] = float(np.mean(psnrs))
        values["psnr_zero_filled_mean"] = float(np.mean(zf_psnrs))
        values["psnr_gain_db"] = values["psnr_mean"] - values["psnr_zero_filled_mean"]

    report = MetricReport(
        task=task, split=split, n_subjects=len(subjects), R=R, seed=config.seed,
        variant=ck.get("variant", _variant(config)), values=values,
    )
    report.to_json(d["reports"] / f"{tag}.json")
    report.to_csv(d["reports"] / f"{tag}.csv")
    log.info("evaluate %s (R=%d, %s): %s", task, R, split,
             {k: v for k, v in list(values.items())[:4]})
    return report


def _export_rows(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def tokenize_from_acq(acq: Acquisition, spec: PatchGridSpec,
                      vol_shape: tuple[int, int, int, int]):
    """PatchSequence view of an acquisition's undersampled k-space tokens."""
    from .tokenizer import PatchSequence, token_index_grid

    return PatchSequence(
        patches=acq.k_input,
        index=token_index_grid(spec, vol_shape),
        volume_shape=vol_shape,
        visible_idx=acq.visible,
        hidden_idx=acq.hidden,
    )


def unscaled_kspace(acq: Acquisition, spec: PatchGridSpec,
                    vol_shape: tuple[int, int, int, int]) -> np.ndarray:
    """Undo token normalization and rebuild the undersampled k-space volume."""
    from .tokenizer import PatchSequence, detokenize, token_index_grid

    seq = PatchSequence(
        patches=acq.k_input.astype(np.float64) * acq.kscale,
        index=token_index_grid(spec, vol_shape),
        volume_shape=vol_shape,
    )
    return detokenize(seq, spec)


def sweep_r(config: ExperimentConfig) -> dict[int, MetricReport]:
    """Fine-tune and evaluate regression at every sweep acceleration factor."""
    d = _dirs(config)
    reports: dict[int, MetricReport] = {}
    for R in config.sweep_R:
        stage3_finetune("regression", config, R=R)
        reports[R] = evaluate("regression", config, R=R, split="test")
    rows = []
    for R, rep in sorted(reports.items()):
        row = {"R": R, **{k: v for k, v in sorted(rep.values.items())}}
        rows.append(row)
    sweep_path = d["reports"] / "sweep_regression.csv"
    with open(sweep_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    log.info("sweep-r: wrote %s", sweep_path)
    return reports


def export_embeddings(config: ExperimentConfig, split: str = "val",
                      ckpt_path: str | Path | None = None) -> Path:
    """Write per-subject embeddings plus a deterministic 2-component projection."""
    d = _dirs(config)
    spec = build_spec(config)
    enc_cfg = build_encoder_config(config)
    if ckpt_path is None:
        name = STAGE2 if config.use_alignment else STAGE1_KSPACE
        ckpt_path = d["checkpoints"] / f"{name}.pt"
    ck = load_checkpoint(ckpt_path)
    model = MaskedAutoencoder(enc_cfg)
    model.load_state_dict(ck["model"])
    model.eval()
    proj = None
    if "proj_k" in ck:
        proj = Projector(config.dim, config.proj_dim)
        proj.load_state_dict(ck["proj_k"])
        proj.eval()

    cohort = CohortData.load(d["cohort"], config)
    subjects = cohort.split_subjects(split)
    zs, ids, phens = [], [], []
    R = config.pretrain_R
    with torch.no_grad():
        for s in subjects:
            acq = acquire(s, R, config, spec)
            seq = tokenize_from_acq(acq, spec, s.image.shape)
            latent = encode(seq, model)
            z = proj(latent.class_token) if proj is not None else latent.class_token
            zs.append(z.numpy().astype(np.float64))
            ids.append(s.subject_id)
            phens.append(s.phenotypes)
    Z = np.stack(zs)
    pc = principal_projection(Z, 2)
    path = d["embeddings"] / f"{split}.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        dim = Z.shape[1]
        writer.writerow(
            ["subject_id", *[f"phen_{n}" for n in PhenotypeVector.NAMES],
             *[f"z_{j}" for j in range(dim)], "pc1", "pc2"])
        for i, sid in enumerate(ids):
            writer.writerow([
                sid,
                *[repr(float(v)) for v in phens[i]],
                *[repr(float(v)) for v in Z[i]],
                repr(float(pc[i, 0])), repr(float(pc[i, 1])),
            ])
    log.info("export-embeddings: %s (%d rows)", path, len(ids))
    return path


def principal_projection(Z: np.ndarray, k: int = 2) -> np.ndarray:
    """Project rows of Z onto the top-k principal directions.

    Deterministic up to sign; each component's sign is fixed so that its
    largest-magnitude coordinate is positive.
    """
    centered = Z - Z.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:k]
    for j in range(comps.shape[0]):
        lead = np.argmax(np.abs(comps[j]))
        if comps[j, lead] < 0:
            comps[j] = -comps[j]
    return centered @ comps.T


def plot_embeddings(config: ExperimentConfig, split: str = "val") -> Path:
    """Scatter of the 2-component projection colored by LVEDA quantile."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    d = _dirs(config)
    csv_path = d["embeddings"] / f"{split}.csv"
    if not csv_path.exists():
        raise FileNotFoundError(f"run export-embeddings first: missing {csv_path}")
    with open(csv_path, encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    x = np.array([float(r["pc1"]) for r in rows])
    y = np.array([float(r["pc2"]) for r in rows])
    lveda = np.array([float(r["phen_LVEDA"]) for r in rows])
    quantile = np.searchsorted(np.quantile(lveda, [0.25, 0.5, 0.75]), lveda)
    fig, ax = plt.subplots(figsize=(5, 4))
    sc = ax.scatter(x, y, c=quantile, cmap="viridis", s=24)
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    ax.set_title(f"k-space embeddings ({split}) by LVEDA quartile")
    fig.colorbar(sc, ax=ax, label="LVEDA quartile")
    out_path = d["embeddings"] / f"{split}_scatter.png"
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    log.info("plot: %s", out_path)
    return out_path


def alignment_separation(config: ExperimentConfig, split: str = "val",
                         ckpt_path: str | Path | None = None) -> tuple[float, float]:
    """Mean positive minus mean negative cosine on a held-out split.

    Positive pairs are (image, k-space) projections of the same subject;
    negatives pair different subjects. With a Stage I k-space checkpoint the
    statistic uses the Stage I image encoder and stage-start projectors, i.e.
    the unaligned state Stage II would begin from.
    """
    d = _dirs(config)
    spec = build_spec(config)
    enc_cfg = build_encoder_config(config)
    if ckpt_path is None:
        ckpt_path = d["checkpoints"] / f"{STAGE2}.pt"
    ck = load_checkpoint(ckpt_path)
    kspace_model = MaskedAutoencoder(enc_cfg)
    kspace_model.load_state_dict(ck["model"])
    kspace_model.eval()
    image_model = MaskedAutoencoder(enc_cfg)
    if "image_model" in ck:
        image_model.load_state_dict(ck["image_model"])
    else:
        ck_img = load_checkpoint(d["checkpoints"] / f"{STAGE1_IMAGE}.pt")
        image_model.load_state_dict(ck_img["model"])
    image_model.eval()
    if "proj_i" in ck:
        proj_i = Projector(config.dim, config.proj_dim)
        proj_i.load_state_dict(ck["proj_i"])
        proj_k = Projector(config.dim, config.proj_dim)
        proj_k.load_state_dict(ck["proj_k"])
    else:
        torch.manual_seed(mix_seed(config.seed, "stage2", "proj"))
        proj_i = Projector(config.dim, config.proj_dim)
        proj_k = Projector(config.dim, config.proj_dim)
    proj_i.eval()
    proj_k.eval()

    cohort = CohortData.load(d["cohort"], config)
    subjects = cohort.split_subjects(split)
    zi_rows, zk_rows = [], []
    with torch.no_grad():
        for s in subjects:
            img_seq = tokenize(s.image.astype(np.float32), spec)
            img_seq = img_seq.with_partition(
                np.arange(len(img_seq), dtype=np.int64), np.empty(0, dtype=np.int64))
            zi_rows.append(proj_i(encode(img_seq, image_model).class_token))
            acq = acquire(s, config.pretrain_R, config, spec)
            k_seq = tokenize_from_acq(acq, spec, s.image.shape)
            zk_rows.append(proj_k(encode(k_seq, kspace_model).class_token))
        pos, neg = cosine_separation(torch.stack(zi_rows), torch.stack(zk_rows))
    return pos, neg
