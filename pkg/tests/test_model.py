"""Backbone tests: degeneracy equivalences, parameter accounting, checkpoint
round-trips, and a sampled full-model gradient check."""

import numpy as np
import pytest

from dsreid import autodiff as ad
from dsreid.autodiff import Tensor
from dsreid.model import (
    Backbone,
    BlockSpec,
    CheckpointError,
    ClassifierBank,
    ModelConfig,
    ModelError,
    load_checkpoint,
    save_checkpoint,
)

from oracles import naive_matmul, plain_cnn_forward


def _small_cfg(norm_kind="bn", num_domains=1, **kw):
    return ModelConfig.small(num_domains=num_domains, norm_kind=norm_kind, channels=(8, 16), input_hw=(8, 8), **kw)


def _images(rng, n=4, cfg=None):
    cfg = cfg or _small_cfg()
    c = cfg.input_channels
    h, w = cfg.input_hw
    return rng.normal(size=(n, c, h, w)).astype(np.float32)


# ---------------------------------------------------------------------------
# forward semantics


def test_forward_embed_shape_and_domain_validation():
    cfg = _small_cfg(num_domains=2, norm_kind="dsan")
    model = Backbone(cfg)
    imgs = _images(np.random.default_rng(0), 3, cfg)
    emb = model.forward_embed(imgs, 0, "eval")
    assert emb.shape == (3, cfg.embedding_dim)
    with pytest.raises(ModelError):
        model.forward_embed(imgs, 2, "eval")
    with pytest.raises(ModelError):
        model.forward_embed(imgs[:, :, :4], 0, "eval")


def test_all_bn_single_domain_equals_plain_cnn_oracle():
    cfg = _small_cfg(norm_kind="bn")
    model = Backbone(cfg)
    rng = np.random.default_rng(1)
    # push nontrivial running stats, then evaluate
    for _ in range(3):
        model.forward_embed(_images(rng, 6, cfg), 0, "train")
    imgs = _images(rng, 4, cfg)
    got = model.forward_embed(imgs, 0, "eval").data

    blocks = []
    stats = []
    for i, block in enumerate(model.blocks):
        norm = block.norm
        blocks.append(
            (
                block.conv_w.data,
                block.conv_b.data,
                norm.affine.gamma.data,
                norm.affine.beta.data,
                cfg.blocks[i].stride,
            )
        )
        stats.append((norm.state.running_mean[0], norm.state.running_var[0]))
    ref = plain_cnn_forward(imgs, blocks, model.embed_w.data, model.embed_b.data, stats, cfg.norm_eps)
    np.testing.assert_allclose(got, ref, rtol=1e-4, atol=1e-4)


def test_eval_forward_is_permutation_equivariant():
    cfg = _small_cfg(norm_kind="dsan", num_domains=2)
    model = Backbone(cfg)
    rng = np.random.default_rng(2)
    imgs = _images(rng, 5, cfg)
    base = model.forward_embed(imgs, 1, "eval").data
    perm = rng.permutation(5)
    out = model.forward_embed(imgs[perm], 1, "eval").data
    np.testing.assert_array_equal(out, base[perm])


def test_divergent_training_separates_domain_paths():
    cfg = _small_cfg(norm_kind="dsbn", num_domains=2)
    model = Backbone(cfg)
    rng = np.random.default_rng(3)
    # feed domain 0 shifted data so its BN stats diverge from domain 1's
    for _ in range(5):
        model.forward_embed(_images(rng, 6, cfg) + 3.0, 0, "train")
        model.forward_embed(_images(rng, 6, cfg), 1, "train")
    imgs = _images(rng, 4, cfg)
    e0 = model.forward_embed(imgs, 0, "eval").data
    e1 = model.forward_embed(imgs, 1, "eval").data
    assert np.linalg.norm(e0 - e1) > 1e-3


# ---------------------------------------------------------------------------
# degeneracy equivalences


def test_degeneracy_d1_dsbn_equals_bn():
    rng = np.random.default_rng(4)
    cfg_bn = _small_cfg(norm_kind="bn", seed=7)
    cfg_dsbn = _small_cfg(norm_kind="dsbn", seed=7)
    m_bn = Backbone(cfg_bn)
    m_dsbn = Backbone(cfg_dsbn)
    for mode in ("train", "eval"):
        imgs = _images(rng, 5, cfg_bn)
        a = m_bn.forward_embed(imgs, 0, mode).data
        b = m_dsbn.forward_embed(imgs, 0, mode).data
        np.testing.assert_array_equal(a, b)


def test_degeneracy_d1_dsan_equals_ibn():
    rng = np.random.default_rng(5)
    cfg_ibn = _small_cfg(norm_kind="ibn", seed=9)
    cfg_dsan = _small_cfg(norm_kind="dsan", seed=9)
    m_ibn = Backbone(cfg_ibn)
    m_dsan = Backbone(cfg_dsan)
    for mode in ("train", "eval"):
        imgs = _images(rng, 5, cfg_ibn)
        a = m_ibn.forward_embed(imgs, 0, mode).data
        b = m_dsan.forward_embed(imgs, 0, mode).data
        np.testing.assert_array_equal(a, b)


def test_fused_equals_single_path_when_d1():
    cfg = _small_cfg(norm_kind="dsan")
    model = Backbone(cfg)
    imgs = _images(np.random.default_rng(6), 4, cfg)
    fused = model.forward_fused(imgs).data
    single = model.forward_embed(imgs, 0, "eval").data
    np.testing.assert_array_equal(fused, single)


def test_fused_equals_single_path_with_identical_untrained_paths():
    cfg = _small_cfg(norm_kind="dsan", num_domains=3)
    model = Backbone(cfg)
    imgs = _images(np.random.default_rng(7), 4, cfg)
    fused = model.forward_fused(imgs).data
    single = model.forward_embed(imgs, 0, "eval").data
    np.testing.assert_allclose(fused, single, atol=1e-6)


def test_fused_is_mean_of_paths():
    cfg = _small_cfg(norm_kind="dsbn", num_domains=2)
    model = Backbone(cfg)
    rng = np.random.default_rng(8)
    for _ in range(3):  # make the paths diverge
        model.forward_embed(_images(rng, 6, cfg) + 2.0, 0, "train")
        model.forward_embed(_images(rng, 6, cfg) - 2.0, 1, "train")
    imgs = _images(rng, 4, cfg)
    fused = model.forward_fused(imgs).data
    e0 = model.forward_embed(imgs, 0, "eval").data
    e1 = model.forward_embed(imgs, 1, "eval").data
    np.testing.assert_allclose(fused, (e0 + e1) / 2.0, atol=1e-6)


def test_forward_fused_rejects_train_mode():
    model = Backbone(_small_cfg())
    with pytest.raises(ModelError):
        model.forward_fused(_images(np.random.default_rng(9)), mode="train")


# ---------------------------------------------------------------------------
# parameter accounting


@pytest.mark.parametrize("norm_kind", ["dsan", "dsbn", "dson"])
def test_parameter_delta_matches_per_domain_affines(norm_kind):
    cfg1 = _small_cfg(norm_kind=norm_kind, num_domains=1)
    cfg3 = _small_cfg(norm_kind=norm_kind, num_domains=3)
    m1 = Backbone(cfg1)
    m3 = Backbone(cfg3)
    delta = m3.parameter_count() - m1.parameter_count()
    expected = 2 * (3 - 1) * m1.per_domain_affine_channels()
    assert delta == expected


def test_parameter_delta_unshared_in_affine():
    cfg1 = _small_cfg(norm_kind="dsan", num_domains=1, share_in_affine=False)
    cfg3 = _small_cfg(norm_kind="dsan", num_domains=3, share_in_affine=False)
    delta = Backbone(cfg3).parameter_count() - Backbone(cfg1).parameter_count()
    assert delta == 2 * 2 * Backbone(cfg1).per_domain_affine_channels()


def test_shared_layers_independent_of_domain_count():
    m1 = Backbone(_small_cfg(norm_kind="dsan", num_domains=1, seed=3))
    m3 = Backbone(_small_cfg(norm_kind="dsan", num_domains=3, seed=3))
    np.testing.assert_array_equal(m1.blocks[0].conv_w.data, m3.blocks[0].conv_w.data)
    np.testing.assert_array_equal(m1.embed_w.data, m3.embed_w.data)


# ---------------------------------------------------------------------------
# classifier heads


def test_classify_identity_and_zero_heads():
    bank = ClassifierBank(4)
    rng = np.random.default_rng(10)
    bank.rebuild(0, 4, rng)
    bank.heads[0]["weight"].data = np.eye(4, dtype=np.float32)
    bank.heads[0]["bias"].data = np.zeros(4, dtype=np.float32)
    emb = Tensor(rng.normal(size=(3, 4)).astype(np.float32))
    np.testing.assert_allclose(bank.classify(emb, 0).data, emb.data, atol=1e-7)

    bank.rebuild(1, 5, rng)
    bank.heads[1]["weight"].data = np.zeros((5, 4), dtype=np.float32)
    np.testing.assert_array_equal(bank.classify(emb, 1).data, np.zeros((3, 5), dtype=np.float32))


def test_classify_matches_matmul_oracle():
    bank = ClassifierBank(6)
    rng = np.random.default_rng(11)
    bank.rebuild(0, 3, rng)
    emb = rng.normal(size=(4, 6)).astype(np.float32)
    got = bank.classify(Tensor(emb), 0).data
    ref = naive_matmul(emb, bank.heads[0]["weight"].data, bank.heads[0]["bias"].data)
    np.testing.assert_allclose(got, ref, atol=1e-6)


def test_classify_missing_head_is_error():
    bank = ClassifierBank(4)
    with pytest.raises(ModelError):
        bank.classify(Tensor(np.zeros((2, 4))), 0)


def test_dson_learnable_blend_weight_trains():
    cfg = _small_cfg(norm_kind="dson", num_domains=2, dson_mix_weight=0.5, dson_learnable=True)
    model = Backbone(cfg)
    params = model.named_parameters()
    rho_names = [n for n in params if n.endswith("mix_rho")]
    assert len(rho_names) == len(cfg.blocks)
    imgs = _images(np.random.default_rng(20), 4, cfg)
    with ad.recording() as tape:
        emb = model.forward_embed(imgs, 0, "train")
        loss = ad.reduce_sum(ad.mul(emb, emb))
    tape.backward(loss)
    for name in rho_names:
        assert params[name].grad is not None and np.isfinite(params[name].grad).all()


def test_dson_fixed_weight_has_no_blend_parameter():
    cfg = _small_cfg(norm_kind="dson", num_domains=2, dson_learnable=False)
    assert not any(n.endswith("mix_rho") for n in Backbone(cfg).named_parameters())


# ---------------------------------------------------------------------------
# checkpoints


def _trained_model(tmp_path, rng):
    cfg = _small_cfg(norm_kind="dsan", num_domains=2)
    model = Backbone(cfg)
    for d in range(2):
        model.forward_embed(_images(rng, 6, cfg), d, "train")
    heads = ClassifierBank(cfg.embedding_dim)
    heads.rebuild(0, 5, rng)
    heads.rebuild(1, 7, rng)
    return cfg, model, heads


def test_checkpoint_roundtrip_byte_identical(tmp_path):
    rng = np.random.default_rng(12)
    _, model, heads = _trained_model(tmp_path, rng)
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    save_checkpoint(p1, model, heads, None, epoch=3, extra={"note": 1})
    model2, heads2, _, epoch, extra = load_checkpoint(p1)
    assert epoch == 3 and extra == {"note": 1}
    save_checkpoint(p2, model2, heads2, None, epoch=3, extra={"note": 1})
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_restores_exact_embeddings(tmp_path):
    rng = np.random.default_rng(13)
    cfg, model, heads = _trained_model(tmp_path, rng)
    imgs = _images(rng, 4, cfg)
    before = model.forward_embed(imgs, 1, "eval").data
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, heads, None, epoch=0)
    loaded, _, _, _, _ = load_checkpoint(path)
    after = loaded.forward_embed(imgs, 1, "eval").data
    np.testing.assert_array_equal(before, after)


def test_checkpoint_truncation_detected(tmp_path):
    rng = np.random.default_rng(14)
    _, model, heads = _trained_model(tmp_path, rng)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, heads, None, epoch=0)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError, match="checksum|truncated"):
        load_checkpoint(path)


def test_checkpoint_corruption_detected(tmp_path):
    rng = np.random.default_rng(15)
    _, model, heads = _trained_model(tmp_path, rng)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, heads, None, epoch=0)
    raw = bytearray(path.read_bytes())
    raw[100] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)


def test_checkpoint_bad_magic_detected(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


# ---------------------------------------------------------------------------
# full-model gradient check (tiny config, sampled parameters)


def test_full_model_gradient_check_sampled():
    cfg = ModelConfig.small(
        num_domains=2, norm_kind="dsan", channels=(8, 8), input_hw=(8, 8), embedding_dim=6
    )
    model = Backbone(cfg)
    heads = ClassifierBank(cfg.embedding_dim)
    rng = np.random.default_rng(16)
    heads.rebuild(0, 3, rng)

    # promote everything to float64 for the check
    params = {**model.named_parameters(), **heads.named_parameters()}
    for p in params.values():
        p.data = p.data.astype(np.float64)

    imgs = rng.normal(size=(4, cfg.input_channels, 8, 8))
    labels = np.array([0, 1, 2, 0])

    def forward_loss():
        from dsreid.losses import TripletConfig, cross_entropy, total_loss, triplet_batch_hard

        emb = model.forward_embed(imgs, 0, "train")
        logits = heads.classify(emb, 0)
        return total_loss(cross_entropy(logits, labels), triplet_batch_hard(emb, labels, TripletConfig()))

    from gradcheck import sampled_model_gradcheck

    worst, checked, _ = sampled_model_gradcheck(forward_loss, params, rng)
    assert worst < 1e-2 and checked > 0
