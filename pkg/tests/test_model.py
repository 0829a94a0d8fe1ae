import numpy as np
import pytest

from model_oracle import forward_one
from sgnetpose import autodiff as ad
from sgnetpose.autodiff import RngState
from sgnetpose.data import Batch
from sgnetpose.errors import ConfigError, DataError, UsageError
from sgnetpose.gradcheck import check_nodes, model_gradcheck, random_batch
from sgnetpose.model import (LatentGaussian, ModelConfig, ModelParams, SGNetPose, StepwiseGoals,
                             load_checkpoint, param_shapes, save_checkpoint)

MODES = ["bbox", "bbox+pose", "bbox+angle"]
SMALL = dict(obs_len=4, pred_len=6, embed_dim=5, hidden_dim=7, latent_dim=3, k=3)


def build(features="bbox+pose", seed=0, **kw):
    cfg = ModelConfig(**{**SMALL, "features": features, **kw})
    return SGNetPose(ModelParams.initialize(cfg, RngState(seed)))


def zeroed(model):
    for node in model.params.nodes():
        node.value[...] = 0
    return model


def batch_for(model, n=3, seed=1):
    return random_batch(model.config, n, RngState(seed))


# -- config and params -----------------------------------------------------

@pytest.mark.parametrize("kw", [dict(features="pose"), dict(hidden_dim=0), dict(dropout=1.0),
                                dict(cell="lstm"), dict(k=0)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw).validate()


def test_pose_width_follows_mode():
    assert [ModelConfig(features=m).pose_width for m in MODES] == [0, 26, 12]


def test_bbox_mode_has_no_pose_parameters():
    names = param_shapes(ModelConfig(features="bbox"))
    assert not any(n.startswith(("pose_", "dec_init")) for n in names)
    assert "pose_gru.w_x" in param_shapes(ModelConfig(features="bbox+angle"))


def test_init_is_seeded_and_bounded():
    a = ModelParams.initialize(ModelConfig(), RngState(3))
    b = ModelParams.initialize(ModelConfig(), RngState(3))
    for name in a:
        np.testing.assert_array_equal(a[name].value, b[name].value)
        assert a[name].value.dtype == np.float32 and np.all(np.isfinite(a[name].value))
    w = a["enc_gru.w_x"].value
    assert np.abs(w).max() <= 1 / np.sqrt(w.shape[0])


def test_params_reject_wrong_shapes():
    p = ModelParams.initialize(ModelConfig(**SMALL), RngState(0))
    tensors = dict(p.tensors)
    tensors["regressor.w"] = ad.parameter(np.zeros((3, 4)))
    with pytest.raises(ConfigError):
        ModelParams(p.config, tensors)


# -- building blocks -------------------------------------------------------

def test_zero_weights_give_zero_bbox_embedding():
    m = zeroed(build())
    assert not m.embed_bbox(ad.tensor(np.random.default_rng(0).random((2, 4)))).value.any()


def test_embedding_is_deterministic():
    m = build()
    x = ad.tensor(np.random.default_rng(0).random((2, 4)))
    assert np.array_equal(m.embed_bbox(x).value, m.embed_bbox(x).value)


def test_first_encoder_step_with_zero_params_stays_zero():
    m = zeroed(build())
    state = m.initial_encoder_state(2)
    h = m.encoder_step(state, m.embed_bbox(ad.tensor(np.ones((2, 4)))))
    assert not h.value.any()


def test_first_encoder_step_equals_gru_of_zeros():
    m = build()
    state = m.initial_encoder_state(1)
    h = m.encoder_step(state, ad.tensor(np.zeros((1, 5))))
    ref = ad.gru_cell(ad.tensor(np.zeros((1, 10))), ad.tensor(np.zeros((1, 7))), m.params.gru("enc_gru"))
    np.testing.assert_array_equal(h.value, ref.value)


def test_pose_encoder_zero_fixed_point_and_mode_errors():
    m = zeroed(build())
    out = m.pose_encoder(ad.tensor(np.zeros((2, 4, 26))), None, training=False)
    assert out.shape == (2, 7) and not out.value.any()
    with pytest.raises(UsageError):
        build("bbox").pose_encoder(ad.tensor(np.zeros((2, 4, 26))), None, training=False)


def test_pose_encoder_dropout_only_when_training():
    m = build(dropout=0.5)
    poses = ad.tensor(np.random.default_rng(0).random((2, 4, 26)))
    a = m.pose_encoder(poses, RngState(1), training=False).value
    b = m.pose_encoder(poses, RngState(2), training=False).value
    assert np.array_equal(a, b)
    c = m.pose_encoder(poses, RngState(1), training=True).value
    assert not np.allclose(a, c)


def test_sge_goal_counts():
    m = build()
    h = ad.tensor(np.random.default_rng(0).random((2, 7)))
    assert m.sge_predict(h, 1).count == 1
    full = m.sge_predict(h)
    assert full.positions.shape == (2, 6, 4) and full.hidden.shape == (2, 6, 5)
    tail = m.sge_predict(h, 2)
    np.testing.assert_array_equal(tail.positions.value, full.positions.value[:, 4:])
    with pytest.raises(UsageError):
        m.sge_predict(h, 7)


def test_sge_zero_params_give_zero_goals():
    m = zeroed(build())
    assert not m.sge_predict(ad.tensor(np.ones((2, 7)))).positions.value.any()


def test_singleton_aggregation_returns_goal_hidden_exactly():
    m = build()
    g = ad.tensor(np.random.default_rng(0).random((3, 1, 5)))
    ctx, w = m.goal_aggregate(g, "dec")
    assert np.array_equal(w.value, np.ones((3, 1), dtype=np.float32))
    assert np.array_equal(ctx.value, g.value[:, 0])


def test_identical_goals_give_uniform_weights():
    m = build()
    row = np.random.default_rng(0).random(5)
    ctx, w = m.goal_aggregate(ad.tensor(np.tile(row, (2, 4, 1))), "enc")
    np.testing.assert_allclose(w.value, 0.25, atol=1e-7)
    np.testing.assert_allclose(ctx.value, np.tile(row, (2, 1)), atol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_aggregation_matches_hand_coded_attention(seed):
    m = build(seed=seed)
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(2, 5, 5))
    with ad.precision(np.float64):
        m64 = SGNetPose(m.params.astype(np.float64))
        ctx, _ = m64.goal_aggregate(ad.tensor(g), "enc")
    p = m.params.values()
    for b in range(2):
        scores = [float(np.tanh(gs) @ p["enc_attn.w"][:, 0] + p["enc_attn.b"][0]) for gs in g[b]]
        w = np.exp(scores) / np.sum(np.exp(scores))
        ref = sum(wi * gs for wi, gs in zip(w, g[b]))
        np.testing.assert_allclose(ctx.value[b], ref, atol=1e-6, rtol=0)


def test_cvae_heads_with_zero_params_are_standard_normal():
    m = zeroed(build(hidden_dim=11))
    h = ad.tensor(np.ones((2, 11)))
    for g in (m.cvae_prior(h), m.cvae_recognition(h, h)):
        assert g.mu.shape == (2, 3) and g.log_sigma.shape == (2, 3)
        assert not g.mu.value.any() and not g.log_sigma.value.any()


def test_log_sigma_is_clamped():
    m = build()
    m.params["prior.b"].value[3:] = 50.0
    g = m.cvae_prior(ad.tensor(np.zeros((1, 7))))
    assert np.all(g.log_sigma.value == 8.0)


def test_target_encoder_is_training_only():
    m = build()
    y = ad.tensor(np.random.default_rng(0).random((2, 6, 4)))
    assert m.target_encoder(y, training=True).shape == (2, 7)
    with pytest.raises(UsageError):
        m.target_encoder(y, training=False)


def test_target_encoder_zero_fixed_point():
    m = zeroed(build())
    assert not m.target_encoder(ad.tensor(np.zeros((2, 6, 4))), training=True).value.any()


def test_deterministic_latent_is_the_mean():
    mu = ad.tensor(np.random.default_rng(0).normal(size=(4, 3)))
    g = LatentGaussian(mu, ad.tensor(np.zeros((4, 3))))
    assert SGNetPose.sample_latent(g, None, deterministic=True) is mu


def test_tiny_sigma_latent_approaches_mean():
    mu = ad.tensor(np.ones((4, 3)))
    z = SGNetPose.sample_latent(LatentGaussian(mu, ad.tensor(np.full((4, 3), -8.0))), RngState(0))
    np.testing.assert_allclose(z.value, 1.0, atol=5 * np.exp(-8.0))


def test_latent_moments():
    n = 10_000
    g = LatentGaussian(ad.tensor(np.zeros((n, 1))), ad.tensor(np.zeros((n, 1))))
    z = SGNetPose.sample_latent(g, RngState(42)).value.astype(np.float64)
    assert abs(z.mean()) < 0.05 and abs(z.var() - 1) < 0.05


# -- full forward ----------------------------------------------------------

@pytest.mark.parametrize("mode", MODES)
def test_forward_shapes(mode):
    m = build(mode)
    b = batch_for(m, n=3)
    res = m.forward(b, "train", RngState(0), k=4)
    assert res.predictions.shape == (3, 4, 6, 4)
    assert len(res.encoder_goals) == 4 and res.encoder_goals[0].shape == (3, 6, 4)
    assert res.posterior is not None
    inf = m.forward(b, "infer", RngState(0))
    assert inf.predictions.shape == (3, 3, 6, 4) and inf.posterior is None


def test_default_config_shape():
    m = SGNetPose(ModelParams.initialize(ModelConfig(), RngState(0)))
    res = m.forward(batch_for(m, n=2), "infer", RngState(1))
    assert res.predictions.shape == (2, 20, 45, 4)


def test_train_without_targets_is_a_usage_error():
    m = build()
    b = batch_for(m)
    with pytest.raises(UsageError):
        m.forward(Batch(b.bbox, b.pose, None, b.frame_size), "train", RngState(0))


def test_forward_rejects_mismatched_batch():
    m = build()
    b = batch_for(m)
    with pytest.raises(ConfigError):
        m.forward(Batch(b.bbox[:, :3], b.pose, b.targets, b.frame_size), "infer", RngState(0))
    with pytest.raises(ConfigError):
        m.forward(Batch(b.bbox, None, b.targets, b.frame_size), "infer", RngState(0))


@pytest.mark.parametrize("mode", MODES)
def test_deterministic_inference_is_bit_identical(mode):
    m = build(mode)
    b = batch_for(m)
    a = m.forward(b, "infer", None, deterministic=True).predictions.value
    c = SGNetPose(m.params.copy()).forward(b, "infer", None, deterministic=True).predictions.value
    assert np.array_equal(a, c)


def test_seeded_sampling_is_reproducible():
    m = build()
    b = batch_for(m)
    a = m.forward(b, "infer", RngState(5)).predictions.value
    assert np.array_equal(a, m.forward(b, "infer", RngState(5)).predictions.value)
    assert not np.array_equal(a, m.forward(b, "infer", RngState(6)).predictions.value)


@pytest.mark.parametrize("mode", MODES)
@pytest.mark.parametrize("seed", range(3))
def test_forward_matches_numpy_oracle(mode, seed):
    m = build(mode, seed=seed)
    b = batch_for(m, n=2, seed=seed + 10)
    with ad.precision(np.float64):
        params = m.params.astype(np.float64)
        res = SGNetPose(params).forward(b, "infer", None, k=1, deterministic=True)
    p = {k: v.astype(np.float64) for k, v in m.params.values().items()}
    for i in range(2):
        poses = None if b.pose is None else b.pose[i].astype(np.float64)
        ref, weights = forward_one(p, m.config, b.bbox[i].astype(np.float64), poses)
        np.testing.assert_allclose(res.predictions.value[i, 0], ref, atol=1e-10, rtol=0)
        for step, w in enumerate(weights):
            np.testing.assert_allclose(res.decoder_attention[step][i], w, atol=1e-12)


def test_decoder_attention_sums_to_one_over_45_steps():
    m = SGNetPose(ModelParams.initialize(ModelConfig(), RngState(4)))
    res = m.forward(batch_for(m, n=3), "infer", RngState(2), k=2)
    assert len(res.decoder_attention) == 45
    for i, w in enumerate(res.decoder_attention):
        assert w.shape == (6, 45 - i)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)
    assert res.decoder_goal_counts == list(range(45, 0, -1))


def test_shifted_input_changes_predictions():
    m = build()
    b = batch_for(m)
    moved = Batch(b.bbox + np.float32(0.05), b.pose, b.targets, b.frame_size)
    a = m.forward(b, "infer", None, deterministic=True).predictions.value
    c = m.forward(moved, "infer", None, deterministic=True).predictions.value
    assert not np.allclose(a, c)


@pytest.mark.parametrize("mode", MODES)
def test_every_parameter_receives_gradient(mode):
    from sgnetpose.training import compute_loss

    m = build(mode)
    b = batch_for(m)
    res = m.forward(b, "train", RngState(0))
    loss = compute_loss(res.predictions, res.encoder_goals, b.targets, res.posterior, res.prior,
                        observed=b.bbox).total
    m.params.zero_grad()
    loss.backward()
    # attention biases shift every score equally, so softmax ignores them
    exempt = {"enc_attn.b", "dec_attn.b"}
    for name, g in m.params.grads().items():
        if name in exempt:
            assert np.abs(g).max() < 1e-6  # zero up to float32 rounding
        else:
            assert g.any(), name


# -- gradients -------------------------------------------------------------

@pytest.mark.parametrize("seed", range(3))
def test_building_block_gradients(seed):
    with ad.precision(np.float64):
        m = SGNetPose(build(seed=seed).params.astype(np.float64))
        rng = np.random.default_rng(seed)
        x = ad.tensor(rng.random((3, 4)), requires_grad=True)
        poses = ad.tensor(rng.random((2, 4, 26)), requires_grad=True)
        y = ad.tensor(rng.random((2, 6, 4)), requires_grad=True)
        h = ad.tensor(rng.normal(size=(2, 7)), requires_grad=True)
        probes = {
            "embed": (lambda: ad.sum(ad.tanh(m.embed_bbox(x))), {"x": x, "w": m.params["bbox_embed.w"]}),
            "pose": (lambda: ad.sum(ad.tanh(m.pose_encoder(poses, RngState(1), True))),
                     {"p": poses, "w": m.params["pose_gru.w_x"], "e": m.params["pose_embed.w"]}),
            "target": (lambda: ad.sum(ad.tanh(m.target_encoder(y, True))),
                       {"y": y, "w": m.params["target_gru.w_h"]}),
            "recognition": (lambda: ad.sum(ad.tanh(m.cvae_recognition(h, h).log_sigma)),
                            {"h": h, "w": m.params["recognition.w"]}),
            "prior": (lambda: ad.sum(ad.tanh(m.cvae_prior(h).mu)), {"h": h, "w": m.params["prior.w"]}),
        }
        for name, (fn, nodes) in probes.items():
            report = check_nodes(fn, nodes, RngState(seed))
            assert report.passed(1e-4), (name, report.max_rel_error)


@pytest.mark.parametrize("mode", MODES)
def test_full_model_gradcheck(mode):
    report = model_gradcheck(3, mode, max_entries=30)
    assert report.passed(1e-4), report.max_rel_error
    assert sum(t.checked for t in report.tensors) > 400


# -- checkpoints -----------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    m = build("bbox+angle", seed=4)
    json_path, bin_path = save_checkpoint(m.params, tmp_path / "ck")
    assert bin_path.stat().st_size == 4 * m.params.count()
    params, manifest = load_checkpoint(json_path)
    assert manifest["config_hash"] == m.config.config_hash()
    for name in m.params:
        assert np.array_equal(params[name].value, m.params[name].value)


def test_checkpoint_bytes_are_deterministic(tmp_path):
    for d in ("a", "b"):
        save_checkpoint(build(seed=2).params, tmp_path / d / "ck")
    for ext in (".json", ".bin"):
        assert (tmp_path / "a" / f"ck{ext}").read_bytes() == (tmp_path / "b" / f"ck{ext}").read_bytes()


def test_checkpoint_rejects_bad_version_and_shapes(tmp_path):
    import json

    json_path, _ = save_checkpoint(build().params, tmp_path / "ck")
    manifest = json.loads(json_path.read_text())
    manifest["format"] = "sgnetpose-checkpoint/99"
    json_path.write_text(json.dumps(manifest))
    with pytest.raises(DataError):
        load_checkpoint(json_path)
    manifest["format"] = "sgnetpose-checkpoint/1"
    manifest["config"]["hidden_dim"] = 9
    json_path.write_text(json.dumps(manifest))
    with pytest.raises(DataError):
        load_checkpoint(json_path)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing")


def test_stepwise_goals_count_property():
    g = StepwiseGoals(ad.tensor(np.zeros((1, 3, 4))), ad.tensor(np.zeros((1, 3, 2))))
    assert g.count == 3
