import dataclasses
import json
import os

import numpy as np
import pytest
import torch

from kmtr import cli, pipeline
from kmtr.backbone import MaskedAutoencoder, encode
from kmtr.config import ExperimentConfig
from kmtr.data import CohortData, SubjectData, acquire
from kmtr.metrics import MetricReport
from kmtr.phantom import PhantomConfig


def tiny_experiment_config(out_dir: str) -> ExperimentConfig:
    return ExperimentConfig(
        seed=23,
        out_dir=out_dir,
        phantom=PhantomConfig(S=2, T=8, H=32, W=32, seed=23, noise_std=0.01,
                              lv_semi_axis_a=(4.5, 6.0), lv_semi_axis_b=(4.0, 5.0),
                              wall_thickness=(1.8, 2.6), center_jitter=1.0,
                              reduced_ef_ratio=0.4),
        n_train=4, n_val=3, n_test=3,
        patch_size=(2, 4, 4),
        dim=16, depth=2, dec_depth=1, heads=2, proj_dim=8, head_hidden=8,
        pretrain_R=2,
        task_R={"regression": 2, "classification": 2, "segmentation": 2, "reconstruction": 2},
        sweep_R=(2, 4),
        stage1_steps=12, stage1_batch=4,
        stage2_steps=12, stage2_batch=4,
        stage3_steps={"regression": 8, "classification": 8, "segmentation": 8, "reconstruction": 8},
        stage3_batch={"regression": 4, "classification": 4, "segmentation": 2, "reconstruction": 2},
    )


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_exp")
    config = tiny_experiment_config(str(out))
    cfg_path = out / "config.json"
    config.save_json(cfg_path)
    argv = ["--config", str(cfg_path)]
    assert cli.main(["gen-data", *argv]) == 0
    assert cli.main(["pretrain", "--domain", "image", *argv]) == 0
    assert cli.main(["pretrain", "--domain", "kspace", *argv]) == 0
    assert cli.main(["align", *argv]) == 0
    for task in ("regression", "classification", "segmentation", "reconstruction"):
        assert cli.main(["finetune", "--task", task, *argv]) == 0
    assert cli.main(["evaluate", *argv]) == 0
    assert cli.main(["export-embeddings", "--split", "val", *argv]) == 0
    assert cli.main(["plot", "--split", "val", *argv]) == 0
    return config, out


def test_artifacts_exist(tiny_run):
    config, out = tiny_run
    assert (out / "cohort" / "manifest.json").exists()
    for name in ("stage1_image", "stage1_kspace", "stage2_aligned"):
        assert (out / "checkpoints" / f"{name}.pt").exists()
        base = "stage2" if name == "stage2_aligned" else name
        assert (out / "logs" / f"{base}.csv").exists()
    for task in ("regression", "classification", "segmentation", "reconstruction"):
        assert (out / "checkpoints" / f"finetune_{task}_R2_aligned.pt").exists()
        assert (out / "reports" / f"{task}_R2_aligned_test.json").exists()
    assert (out / "embeddings" / "val.csv").exists()
    assert (out / "embeddings" / "val_scatter.png").exists()


def test_stage2_log_schema(tiny_run):
    _, out = tiny_run
    header = (out / "logs" / "stage2.csv").read_text().splitlines()[0]
    assert header == "step,loss,pos_cos_mean,neg_cos_mean"


def test_gen_data_rerun_identical_manifest(tiny_run, tmp_path):
    config, out = tiny_run
    other = dataclasses.replace(config, out_dir=str(tmp_path / "again"))
    pipeline.gen_data(other)
    a = (out / "cohort" / "manifest.json").read_bytes()
    b = (tmp_path / "again" / "cohort" / "manifest.json").read_bytes()
    assert a == b


def test_pretrain_rerun_identical_loss_log(tiny_run):
    config, out = tiny_run
    first = (out / "logs" / "stage1_image.csv").read_bytes()
    pipeline.stage1_pretrain("image", config)
    assert (out / "logs" / "stage1_image.csv").read_bytes() == first


def test_checkpoint_roundtrip_bit_exact(tiny_run):
    config, out = tiny_run
    ck = pipeline.load_checkpoint(out / "checkpoints" / "stage1_kspace.pt")
    enc_cfg = pipeline.build_encoder_config(config)
    spec = pipeline.build_spec(config)
    model = MaskedAutoencoder(enc_cfg)
    model.load_state_dict(ck["model"])
    model.eval()
    cohort = CohortData.load(out / "cohort", config)
    subject = cohort.split_subjects("val")[0]
    acq = acquire(subject, config.pretrain_R, config, spec)
    seq = pipeline.tokenize_from_acq(acq, spec, subject.image.shape)
    with torch.no_grad():
        before = encode(seq, model).class_token.clone()
    reloaded = MaskedAutoencoder(enc_cfg)
    reloaded.load_state_dict(pipeline.load_checkpoint(out / "checkpoints" / "stage1_kspace.pt")["model"])
    reloaded.eval()
    with torch.no_grad():
        after = encode(seq, reloaded).class_token
    assert torch.equal(before, after)
    assert ck["stage"] == "stage1_kspace"
    assert ck["config_hash"] == config.config_hash()


def test_evaluate_deterministic(tiny_run):
    config, out = tiny_run
    report_path = out / "reports" / "regression_R2_aligned_test.json"
    first = report_path.read_bytes()
    pipeline.evaluate("regression", config, split="test")
    assert report_path.read_bytes() == first
    rep = MetricReport.from_json(report_path)
    assert rep.R == 2 and rep.n_subjects == 3 and rep.seed == config.seed
    assert all(v is None or np.isfinite(v) for v in rep.values.values())


def test_split_discipline(tiny_run):
    config, out = tiny_run
    cohort = CohortData.load(out / "cohort", config)
    ids = [s.subject_id for s in cohort.subjects]
    assert len(set(ids)) == len(ids)
    bad_splits = {"train": [0, 1], "val": [1, 2], "test": [3]}
    with pytest.raises(ValueError, match="contamination"):
        CohortData(cohort.subjects, bad_splits)


def test_unaligned_variant_tagging(tiny_run):
    config, out = tiny_run
    unaligned = dataclasses.replace(config, use_alignment=False)
    pipeline.stage3_finetune("regression", unaligned)
    report = MetricReport.from_json(out / "reports" / "regression_R2_unaligned_val.json")
    assert report.variant == "MAE_k_u"
    ck = pipeline.load_checkpoint(out / "checkpoints" / "finetune_regression_R2_unaligned.pt")
    assert ck["variant"] == "MAE_k_u"


def test_export_embeddings_schema(tiny_run):
    config, out = tiny_run
    lines = (out / "embeddings" / "val.csv").read_text().splitlines()
    assert len(lines) == 1 + config.n_val
    header = lines[0].split(",")
    assert header[0] == "subject_id"
    assert header[-2:] == ["pc1", "pc2"]
    again = pipeline.export_embeddings(config, split="val")
    assert again.read_text().splitlines() == lines


def test_principal_projection_sign_convention():
    rng = np.random.default_rng(0)
    Z = rng.standard_normal((20, 6)) * np.array([5, 1, 0.3, 0.2, 0.1, 0.05])
    proj = pipeline.principal_projection(Z, 2)
    assert proj.shape == (20, 2)
    centered = Z - Z.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    for j in range(2):
        comp = vt[j]
        if comp[np.argmax(np.abs(comp))] < 0:
            comp = -comp
        assert np.allclose(proj[:, j], centered @ comp, atol=1e-10)


def test_lock_prevents_concurrent_use(tmp_path):
    with pipeline.experiment_lock(tmp_path):
        with pytest.raises(pipeline.ExperimentLockedError):
            with pipeline.experiment_lock(tmp_path):
                pass
    # released afterwards
    with pipeline.experiment_lock(tmp_path):
        pass


def test_config_json_roundtrip(tmp_path):
    config = tiny_experiment_config(str(tmp_path))
    path = tmp_path / "c.json"
    config.save_json(path)
    back = ExperimentConfig.from_json(path)
    assert back == config
    assert back.config_hash() == config.config_hash()


def test_config_validation_rejects_bad_values(tmp_path):
    with pytest.raises(ValueError):
        dataclasses.replace(tiny_experiment_config(str(tmp_path)), tau=0.0)
    with pytest.raises(ValueError):
        dataclasses.replace(tiny_experiment_config(str(tmp_path)), lam=1.2)
    with pytest.raises(ValueError):
        dataclasses.replace(tiny_experiment_config(str(tmp_path)), patch_size=(3, 4, 4))


def test_missing_checkpoint_raises(tmp_path):
    config = tiny_experiment_config(str(tmp_path / "empty"))
    with pytest.raises(FileNotFoundError):
        pipeline.stage2_align(config)


def test_thread_cap_env(monkeypatch, tmp_path):
    before = torch.get_num_threads()
    monkeypatch.setenv("KMTR_NUM_THREADS", "1")
    cli._apply_thread_cap()
    assert torch.get_num_threads() == 1
    torch.set_num_threads(before)


def test_evaluate_guard_rejects_fully_sampled(tiny_run):
    config, out = tiny_run
    spec = pipeline.build_spec(config)
    cohort = CohortData.load(out / "cohort", config)
    subject = cohort.split_subjects("test")[0]
    acq = acquire(subject, config.task_R["regression"], config, spec)
    tampered = dataclasses.replace(acq, k_input=acq.k_target)
    if tampered.hidden.size:
        with pytest.raises(AssertionError):
            pipeline._assert_undersampled(tampered)
    pipeline._assert_undersampled(acq)
