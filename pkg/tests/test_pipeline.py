"""Training-loop tests: hygiene invariants, determinism, resume, modes."""

import json

import numpy as np
import pytest

from dsreid.clustering import NOISE, DbscanConfig
from dsreid.data import (
    BatchSpec,
    DatasetError,
    SynthConfig,
    generate_synthetic,
    load_dataset,
    make_heldout_styles,
)
from dsreid.model import Backbone, ClassifierBank, ModelConfig, load_checkpoint
from dsreid.pipeline import (
    PipelineError,
    TrainConfig,
    TrainingDiverged,
    extract_features,
    relabel,
    run,
)

pytestmark = pytest.mark.filterwarnings("ignore::RuntimeWarning")


def _tiny_dataset(tmp_path, num_domains=2, seed=0, **kw):
    base = dict(
        num_domains=num_domains,
        identities_per_domain=8,
        eval_identities=3,
        images_per_identity=4,
        image_size=(3, 8, 8),
        intra_class_jitter=0.3,
        seed=seed,
    )
    base.update(kw)
    cfg = SynthConfig(**base)
    out = tmp_path / f"ds{seed}_{num_domains}"
    if not out.exists():
        generate_synthetic(cfg, out)
    return load_dataset(out)


def _tiny_model_cfg(norm_kind="dsan", **kw):
    return ModelConfig.small(norm_kind=norm_kind, channels=(8, 16), input_hw=(8, 8), embedding_dim=16, **kw)


def _tiny_train_cfg(**kw):
    base = dict(
        epochs=2,
        iters_per_domain=2,
        batch=BatchSpec(p=2, k=2),
        dbscan=DbscanConfig(min_points=2),
        dbscan_eps_quantile=0.05,
        seed=0,
    )
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# extract_features


def test_extract_features_row_count_and_norms(tmp_path):
    ds = _tiny_dataset(tmp_path)
    model = Backbone(_tiny_model_cfg(num_domains=2))
    feats = extract_features(ds, 0, model, 0)
    assert feats.shape == (len(ds.select(0, "train")), 16)
    np.testing.assert_allclose(np.linalg.norm(feats, axis=1), 1.0, atol=1e-5)


def test_extract_features_identical_images_identical_rows(tmp_path):
    ds = _tiny_dataset(tmp_path)
    model = Backbone(_tiny_model_cfg(num_domains=2))
    feats = extract_features(ds, 0, model, 0)
    # duplicate image payloads produce duplicate feature rows
    recs = ds.select(0, "train")
    img = ds.image(recs[0].sample_id)
    ds._images[recs[1].sample_id] = img.copy()
    feats2 = extract_features(ds, 0, model, 0)
    np.testing.assert_allclose(feats2[0], feats2[1], atol=1e-6)
    assert feats.shape == feats2.shape


def test_extract_features_matches_per_sample_recomputation(tmp_path):
    ds = _tiny_dataset(tmp_path)
    model = Backbone(_tiny_model_cfg(num_domains=2))
    feats = extract_features(ds, 1, model, 1, batch=3)  # force chunking
    recs = ds.select(1, "train")
    rows = []
    from dsreid import autodiff as ad

    with ad.no_grad():
        for r in recs:
            rows.append(model.forward_embed(ds.image(r.sample_id)[None], 1, "eval").data[0])
    raw = np.stack(rows)
    centered = raw - raw.mean(axis=0, keepdims=True)
    expected = centered / np.sqrt((centered * centered).sum(axis=1, keepdims=True) + 1e-12)
    np.testing.assert_allclose(feats, expected, atol=1e-5)


def test_extract_features_is_stateless(tmp_path):
    ds = _tiny_dataset(tmp_path)
    model = Backbone(_tiny_model_cfg(num_domains=2))
    before = model.state_hash()
    extract_features(ds, 0, model, 0)
    extract_features(ds, 1, model, 1)
    assert model.state_hash() == before


# ---------------------------------------------------------------------------
# relabel


def test_relabel_one_hot_features_reproduce_identities():
    rng = np.random.default_rng(0)
    n_ids = 5
    features = np.repeat(np.eye(n_ids), 4, axis=0)
    heads = ClassifierBank(n_ids)
    assignments = relabel({0: features}, DbscanConfig(epsilon=0.1, min_points=2), heads, rng)
    a = assignments[0]
    assert a.num_clusters == n_ids
    assert a.num_noise == 0
    from dsreid.clustering import adjusted_mutual_info

    truth = np.repeat(np.arange(n_ids), 4)
    assert adjusted_mutual_info(a.labels, truth) == 1.0
    assert heads.num_classes(0) == n_ids


def test_relabel_identical_features_single_cluster():
    rng = np.random.default_rng(1)
    features = np.ones((10, 4))
    heads = ClassifierBank(4)
    assignments = relabel({0: features}, DbscanConfig(epsilon=0.5, min_points=2), heads, rng)
    assert assignments[0].num_clusters == 1
    assert heads.num_classes(0) == 1


def test_relabel_collapse_drops_head():
    rng = np.random.default_rng(2)
    # all points isolated at min_points=3: zero clusters
    features = np.eye(4)
    heads = ClassifierBank(4)
    heads.rebuild(0, 3, rng)
    assignments = relabel({0: features}, DbscanConfig(epsilon=0.01, min_points=3), heads, rng)
    assert assignments[0].num_clusters == 0
    assert heads.num_classes(0) == 0


# ---------------------------------------------------------------------------
# run(): hygiene invariants


def test_zero_lr_epoch_keeps_parameters_bit_identical(tmp_path):
    ds = _tiny_dataset(tmp_path)
    cfg = _tiny_train_cfg(learning_rate=0.0, epochs=1)
    result = run(cfg, _tiny_model_cfg(), ds, tmp_path / "run0")
    backbone, _, _, _, _ = load_checkpoint(result.final_checkpoint)
    fresh = Backbone(backbone.config)
    for name, p in fresh.named_parameters().items():
        np.testing.assert_array_equal(p.data, backbone.named_parameters()[name].data, err_msg=name)


def test_noise_samples_never_trained_on(tmp_path):
    ds = _tiny_dataset(tmp_path, seed=3)
    cfg = _tiny_train_cfg(epochs=3, audit_batches=True, dbscan_eps_quantile=0.02)
    result = run(cfg, _tiny_model_cfg(), ds, tmp_path / "run_audit")
    log_lines = (tmp_path / "run_audit" / "run_log.jsonl").read_text().splitlines()
    audited = 0
    for line, log in zip(log_lines, result.epoch_logs):
        rec = json.loads(line)
        # recompute that epoch's assignment is impossible post-hoc; instead assert
        # the audited batch labels never contain the noise marker
        for batch in rec.get("batch_audit", []):
            assert NOISE not in batch["labels"]
            audited += 1
    assert audited > 0


def test_domain_isolation_through_training(tmp_path):
    ds = _tiny_dataset(tmp_path)
    cfg = _tiny_train_cfg(epochs=1, train_domains=(0, 1))
    model_cfg = _tiny_model_cfg(norm_kind="dsan", num_domains=2)
    from dsreid.optim import Adam
    from dsreid.pipeline import train_epoch

    backbone = Backbone(model_cfg)
    heads = ClassifierBank(model_cfg.embedding_dim)
    rng = np.random.default_rng(0)
    heads.rebuild(0, 3, rng)
    opt = Adam(lambda: {**backbone.named_parameters(), **heads.named_parameters()}, lr=1e-3)

    states_before = {
        name: (st.running_mean.copy(), st.running_var.copy(), st.batch_count.copy())
        for name, st in backbone.norm_states().items()
    }
    train = ds.select(0, "train")
    labels0 = np.arange(len(train)) % 3
    assignments = {0: labels0, 1: np.full(len(ds.select(1, "train")), NOISE, dtype=np.int64)}
    train_epoch(backbone, heads, opt, ds, [0, 1], assignments, cfg, rng, epoch=0)
    for name, st in backbone.norm_states().items():
        mean_b, var_b, count_b = states_before[name]
        if st.num_domains > 1:
            np.testing.assert_array_equal(st.running_mean[1], mean_b[1], err_msg=name)
            np.testing.assert_array_equal(st.running_var[1], var_b[1], err_msg=name)
            assert st.batch_count[1] == count_b[1]
            assert st.batch_count[0] > count_b[0]  # domain 0 was trained


def test_resume_reproduces_uninterrupted_run(tmp_path):
    ds = _tiny_dataset(tmp_path, seed=4)
    model_cfg = _tiny_model_cfg()

    full = run(_tiny_train_cfg(epochs=4), model_cfg, ds, tmp_path / "full")
    part = run(_tiny_train_cfg(epochs=2), model_cfg, ds, tmp_path / "partial")
    resumed = run(_tiny_train_cfg(epochs=4), model_cfg, ds, tmp_path / "partial", resume=True)

    a = full.final_checkpoint.read_bytes()
    b = resumed.final_checkpoint.read_bytes()
    assert a == b
    log_a = (tmp_path / "full" / "run_log.jsonl").read_text()
    log_b = (tmp_path / "partial" / "run_log.jsonl").read_text()

    def strip_wall(text):
        out = []
        for line in text.splitlines():
            rec = json.loads(line)
            rec.pop("wall_time")
            out.append(json.dumps(rec, sort_keys=True))
        return out

    assert strip_wall(log_a) == strip_wall(log_b)


def test_resume_without_checkpoints_is_an_error(tmp_path):
    ds = _tiny_dataset(tmp_path)
    with pytest.raises(PipelineError, match="resume"):
        run(_tiny_train_cfg(), _tiny_model_cfg(), ds, tmp_path / "nothing", resume=True)


def test_run_emits_checkpoints_logs_summary(tmp_path):
    ds = _tiny_dataset(tmp_path)
    result = run(_tiny_train_cfg(epochs=3), _tiny_model_cfg(), ds, tmp_path / "artifacts")
    ckpts = sorted((tmp_path / "artifacts" / "checkpoints").glob("epoch_*.ckpt"))
    assert len(ckpts) == 3
    log_lines = (tmp_path / "artifacts" / "run_log.jsonl").read_text().splitlines()
    assert len(log_lines) == 3
    assert json.loads(log_lines[0])["epoch"] == 0
    summary = json.loads((tmp_path / "artifacts" / "summary.json").read_text())
    assert summary["epochs"] == 3
    assert len(result.epoch_logs) == 3


def test_divergence_aborts_with_diagnostic_dump(tmp_path):
    ds = _tiny_dataset(tmp_path)
    cfg = _tiny_train_cfg(epochs=2, learning_rate=1e12)
    with pytest.raises(TrainingDiverged):
        run(cfg, _tiny_model_cfg(), ds, tmp_path / "diverge")
    dump = json.loads((tmp_path / "diverge" / "failure_dump.json").read_text())
    assert "sample_ids" in dump and "norm_states" in dump


# ---------------------------------------------------------------------------
# modes


def test_supervised_mode_requires_identities(tmp_path):
    ds = _tiny_dataset(tmp_path)
    for r in ds.records:
        if r.split == "train" and r.domain_id == 0:
            object.__setattr__(r, "identity", -1)
    with pytest.raises(DatasetError, match="identities required"):
        run(_tiny_train_cfg(mode="supervisedDG"), _tiny_model_cfg(), ds, tmp_path / "sup_err")


def test_supervised_mode_fixed_heads_and_unit_ami(tmp_path):
    ds = _tiny_dataset(tmp_path, seed=5)
    result = run(_tiny_train_cfg(mode="supervisedDG", epochs=3), _tiny_model_cfg(), ds, tmp_path / "sup")
    n_ids = len(set(ds.identities(0, "train").tolist()))
    for log in result.epoch_logs:
        for d in (0, 1):
            assert log.per_domain[d]["num_clusters"] == n_ids
            assert log.per_domain[d]["ami"] == 1.0
            assert log.per_domain[d]["num_noise"] == 0


def test_udawosl_mode_enables_random_erasing():
    assert TrainConfig(mode="UDAwoSL").random_erasing
    assert not TrainConfig(mode="unDG").random_erasing


def test_udawosl_run_scores_source_query_gallery(tmp_path):
    ds = _tiny_dataset(tmp_path, seed=7)
    result = run(_tiny_train_cfg(mode="UDAwoSL", epochs=2), _tiny_model_cfg(), ds, tmp_path / "uda")
    assert set(result.summary["source_eval"]) == {"0", "1"}
    for entry in result.summary["source_eval"].values():
        assert 0.0 <= entry["map"] <= 1.0
        assert set(entry["cmc"]) == {"1", "5", "10"}


def test_train_config_validation():
    with pytest.raises(PipelineError):
        TrainConfig(epochs=0)
    with pytest.raises(PipelineError):
        TrainConfig(mode="bogus")
    with pytest.raises(PipelineError):
        TrainConfig(dbscan_eps_quantile=1.5)
    with pytest.raises(PipelineError):
        TrainConfig.from_dict({"no_such_field": 1})


def test_mode_equivalence_single_domain_bn_is_plain_trainer(tmp_path):
    # supervisedDG with D=1 and all-BN: fixed label space, no clustering,
    # losses behave like a plain classification+triplet trainer
    ds = _tiny_dataset(tmp_path, num_domains=1, seed=6)
    cfg = _tiny_train_cfg(mode="supervisedDG", epochs=4, train_domains=(0,), learning_rate=2e-3)
    result = run(cfg, _tiny_model_cfg(norm_kind="bn"), ds, tmp_path / "plain")
    losses = [log.mean_cls + log.mean_tri for log in result.epoch_logs]
    assert all(np.isfinite(losses))
    assert losses[-1] < losses[0]
    for log in result.epoch_logs:
        assert log.per_domain[0]["ami"] == 1.0


# ---------------------------------------------------------------------------
# mid-scale behavioral fixtures (calibrated once, frozen)


def _behavior_dataset(tmp_path, jitter, noise, style, seed=0):
    styles = make_heldout_styles(style, 3, noise_sigma=noise, seed=seed)
    cfg = SynthConfig(
        num_domains=3,
        identities_per_domain=45,
        eval_identities=15,
        images_per_identity=8,
        image_size=(3, 32, 16),
        domain_style=styles,
        intra_class_jitter=jitter,
        shared_identities=False,
        seed=seed,
    )
    out = tmp_path / f"behave_{jitter}_{style}"
    if not out.exists():
        generate_synthetic(cfg, out)
    return load_dataset(out)


_MID_MODEL = dict(channels=(16, 32, 64, 64), embedding_dim=32, input_hw=(32, 16))


def test_training_loss_decreases_on_separable_data(tmp_path):
    ds = _behavior_dataset(tmp_path, jitter=0.4, noise=0.05, style=2.0)
    cfg = TrainConfig(
        epochs=6, iters_per_domain=12, batch=BatchSpec(16, 4), mode="supervisedDG",
        seed=0, train_domains=(0,),
    )
    result = run(cfg, ModelConfig.small(norm_kind="dsan", **_MID_MODEL), ds, tmp_path / "trend")
    losses = [log.mean_cls + log.mean_tri for log in result.epoch_logs]
    violations = sum(1 for a, b in zip(losses, losses[1:]) if b >= a)
    assert violations <= 1, f"loss not decreasing: {losses}"


def test_supervised_run_reaches_rank1_on_heldout_domain(tmp_path):
    # separable fixture frozen at Rank-1 0.967 after 30 epochs
    ds = _behavior_dataset(tmp_path, jitter=0.2, noise=0.02, style=1.0)
    cfg = TrainConfig(
        epochs=30, iters_per_domain=12, batch=BatchSpec(16, 4), mode="supervisedDG",
        seed=0, train_domains=(0, 1),
    )
    result = run(cfg, ModelConfig.small(norm_kind="dsan", **_MID_MODEL), ds, tmp_path / "sup30")
    backbone, _, _, _, _ = load_checkpoint(result.final_checkpoint)
    from dsreid.evaluation import evaluate

    report = evaluate(backbone, ds, 2, feature_modes=("fused",))
    assert report.modes["fused"].cmc[1] >= 0.9


def test_undg_with_clean_clusters_tracks_supervised(tmp_path):
    # pre-separated features: pseudo-labels align with identities and the
    # run ends close to the supervised run (head-init randomness aside)
    ds = _behavior_dataset(tmp_path, jitter=0.2, noise=0.02, style=1.0)
    model_cfg = ModelConfig.small(norm_kind="dsan", **_MID_MODEL)
    undg = TrainConfig(
        epochs=15, iters_per_domain=12, batch=BatchSpec(16, 4), mode="unDG",
        dbscan=DbscanConfig(min_points=4), dbscan_eps_quantile=0.03,
        seed=0, train_domains=(0, 1),
    )
    sup = TrainConfig(
        epochs=15, iters_per_domain=12, batch=BatchSpec(16, 4), mode="supervisedDG",
        seed=0, train_domains=(0, 1),
    )
    res_u = run(undg, model_cfg, ds, tmp_path / "pair_u")
    res_s = run(sup, model_cfg, ds, tmp_path / "pair_s")
    late_amis = [log.per_domain[d]["ami"] for log in res_u.epoch_logs[5:] for d in (0, 1)]
    assert min(late_amis) >= 0.8

    from dsreid.evaluation import evaluate

    bb_u, _, _, _, _ = load_checkpoint(res_u.final_checkpoint)
    bb_s, _, _, _, _ = load_checkpoint(res_s.final_checkpoint)
    map_u = evaluate(bb_u, ds, 2, feature_modes=("fused",)).modes["fused"].map
    map_s = evaluate(bb_s, ds, 2, feature_modes=("fused",)).modes["fused"].map
    assert abs(map_u - map_s) <= 0.05
