import json
import math

import numpy as np
import pytest

from qlae import numerics as nx
from qlae.autoencoder import (
    Mlp,
    OptimizerState,
    TrainConfig,
    TrainingDiverged,
    adamw_update,
    bce_loss,
    decode,
    embed,
    encode,
    init_state,
    latent_traversal,
    load_checkpoint,
    psnr,
    qlae_step,
    save_checkpoint,
    sigmoid,
    train,
)
from qlae.quantization import CodebookArray

from conftest import full_step_gradient_check, tiny_config, tiny_dataset


def _linear(w, b):
    return Mlp([np.asarray(w, np.float64)], [np.asarray(b, np.float64)])


# --- networks ---------------------------------------------------------------------


def test_zero_encoder_gives_zero_latents():
    p = Mlp([np.zeros((5, 4)), np.zeros((4, 3))], [np.zeros(4), np.zeros(3)])
    assert np.array_equal(encode(p, np.ones(5)), np.zeros(3))


def test_encode_deterministic(rng):
    p = Mlp([rng.normal(size=(5, 4)), rng.normal(size=(4, 3))], [rng.normal(size=4), rng.normal(size=3)])
    x = rng.uniform(size=(2, 5))
    assert np.array_equal(encode(p, x), encode(p, x))


def test_single_linear_layer_selects_weight_row():
    w = np.arange(12.0).reshape(4, 3)
    b = np.array([0.5, -1.0, 2.0])
    # the (in, out) layout means a one-hot input picks a row of W
    assert encode(_linear(w, b), np.eye(4)[2]).tolist() == (w[2] + b).tolist()


def test_encode_shape_mismatch():
    with pytest.raises(ValueError):
        encode(_linear(np.zeros((4, 2)), np.zeros(2)), np.zeros(5))


def test_zero_decoder_gives_half_gray():
    logits = decode(_linear(np.zeros((2, 6)), np.zeros(6)), np.array([0.3, -0.2]))
    assert np.array_equal(logits, np.zeros(6))
    assert np.array_equal(sigmoid(logits), np.full(6, 0.5))


def test_decode_hand_product():
    w = np.array([[1.0, -2.0, 0.5], [0.0, 3.0, 1.0]])
    b = np.array([0.1, 0.2, 0.3])
    z = np.array([2.0, -1.0])
    assert np.allclose(decode(_linear(w, b), z), [2.1, -6.8, 0.3], atol=1e-15)


def test_sigmoid_extremes():
    assert sigmoid(np.array([-1000.0, 0.0, 1000.0])).tolist() == [0.0, 0.5, 1.0]


# --- loss and PSNR -------------------------------------------------------------------


def test_bce_examples():
    assert bce_loss(np.zeros(4), np.array([0, 0.3, 1, 0.7])) == pytest.approx(math.log(2))
    assert bce_loss(np.array([60.0, -60.0]), np.array([1.0, 0.0])) < 1e-25
    assert bce_loss(np.array([0.5]), np.array([0.25])) == pytest.approx(0.8491, abs=1e-4)
    assert bce_loss(np.array([0.5]), np.array([0.25])) == pytest.approx(
        0.25 * math.log1p(math.exp(-0.5)) + 0.75 * math.log1p(math.exp(0.5)), rel=1e-14
    )


def test_bce_rejects_targets_outside_unit_interval():
    with pytest.raises(ValueError):
        bce_loss(np.zeros(2), np.array([0.5, 1.5]))


def test_bce_node_matches_reference(rng):
    logits = rng.normal(scale=3, size=(4, 5))
    x = rng.uniform(size=(4, 5))
    assert float(nx.bce_with_logits(nx.constant(logits), x).value) == pytest.approx(bce_loss(logits, x), rel=1e-14)


def test_psnr_examples():
    assert psnr(np.ones(3), np.ones(3)) == math.inf
    assert psnr(np.full(4, 0.1), np.zeros(4)) == pytest.approx(20.0)
    assert psnr(np.full(4, math.sqrt(2.5e-4)), np.zeros(4)) == pytest.approx(36.02, abs=0.01)


# --- optimizer ------------------------------------------------------------------------


def _opt(params, decayed, **hyper):
    return OptimizerState.zeros_like(params, decayed, **hyper)


def test_zero_gradient_no_decay_is_stationary():
    p = [np.array([1.0, -2.0])]
    st = _opt(p, [True], learning_rate=1e-3, weight_decay=0.0)
    adamw_update(p, [np.zeros(2)], st)
    assert p[0].tolist() == [1.0, -2.0]


def test_zero_gradient_applies_exact_decoupled_decay():
    theta = np.array([1.0, -2.0, 0.37])
    p = [theta.copy()]
    st = _opt(p, [True], learning_rate=1e-3, weight_decay=0.5)
    adamw_update(p, [np.zeros(3)], st)
    assert np.array_equal(p[0], theta * (1 - 1e-3 * 0.5))


def test_first_step_hand_computation():
    p = [np.array([1.0])]
    st = _opt(p, [False], learning_rate=1e-3, beta1=0.9, beta2=0.99, eps=1e-8)
    adamw_update(p, [np.array([1.0])], st)
    assert p[0][0] == pytest.approx(1 - 1e-3 / (1 + 1e-8), abs=1e-16)
    assert st.step == 1


def test_matches_reference_adamw_over_many_steps(rng):
    theta = rng.normal(size=5)
    p = [theta.copy()]
    st = _opt(p, [True], learning_rate=3e-2, beta1=0.8, beta2=0.95, eps=1e-6, weight_decay=0.3)
    m = np.zeros(5)
    v = np.zeros(5)
    for t in range(1, 26):
        g = rng.normal(size=5)
        adamw_update(p, [g], st)
        m = 0.8 * m + 0.2 * g
        v = 0.95 * v + 0.05 * g * g
        m_hat, v_hat = m / (1 - 0.8**t), v / (1 - 0.95**t)
        theta = theta - 3e-2 * (m_hat / (np.sqrt(v_hat) + 1e-6) + 0.3 * theta)
    assert np.allclose(p[0], theta, rtol=1e-12, atol=1e-14)


def test_weight_decay_never_touches_biases_or_codebook():
    data = tiny_dataset()
    state = init_state(tiny_config(weight_decay=100.0), 48, 2)
    before = [a.copy() for a in state.parameters()]
    state.optimizer.weight_decay = 5.0  # shrink factor 0.995 per step
    zeros = [np.zeros_like(a) for a in state.parameters()]
    for _ in range(3):
        adamw_update(state.parameters(), zeros, state.optimizer)
    for a, b, dec in zip(state.parameters(), before, state.optimizer.decayed):
        if dec:
            assert np.all(np.abs(a) < np.abs(b) + 1e-300) and np.abs(a).sum() < np.abs(b).sum()
        else:
            assert np.array_equal(a, b)
    assert state.optimizer.decayed[-1] is False
    del data


# --- training step ------------------------------------------------------------------


def test_zero_learning_rate_leaves_parameters_unchanged():
    data = tiny_dataset()
    state = init_state(tiny_config(learning_rate=0.0), 48, 2)
    before = [a.copy() for a in state.parameters()]
    qlae_step(state, data.flat_images())
    assert state.step == 1
    assert all(np.array_equal(a, b) for a, b in zip(state.parameters(), before))


def test_vanilla_autoencoder_keeps_codebook_bit_identical():
    data = tiny_dataset()
    state = init_state(tiny_config(quantize=False, lambda_quantize=5.0, lambda_commit=3.0), 48, 2)
    before = state.codebooks.values.copy()
    losses = qlae_step(state, data.flat_images())
    assert np.array_equal(state.codebooks.values, before)
    assert losses.quantize == 0 and losses.commit == 0


def test_ae_codebook_weights_are_irrelevant():
    data = tiny_dataset()
    a = train(tiny_config(quantize=False), data)
    b = train(tiny_config(quantize=False, lambda_quantize=0.0, lambda_commit=0.0), data)
    assert all(np.array_equal(x, y) for x, y in zip(a.parameters(), b.parameters()))


def test_tiny_fixture_matches_hand_unrolled_step():
    # 2-pixel images, 1 latent, 2 codes, single linear encoder and decoder
    x = np.array([[0.0, 1.0], [1.0, 0.25]])
    we, be = np.array([[0.8], [-0.3]]), np.array([0.05])
    wd_, bd = np.array([[1.5, -0.7]]), np.array([0.1, -0.2])
    v0 = np.array([[-0.5, 0.5]])
    lr, wdecay, lq, lc = 1e-2, 0.1, 0.2, 0.3
    cfg = TrainConfig(hidden=(), n_z=1, n_v=2, batch_size=2, dtype="float64", learning_rate=lr,
                      weight_decay=wdecay, lambda_quantize=lq, lambda_commit=lc)
    state = init_state(TrainConfig(hidden=(), n_z=2, n_v=2, dtype="float64"), 2, 2)
    state.config = cfg
    state.encoder = _linear(we.copy(), be.copy())
    state.decoder = _linear(wd_.copy(), bd.copy())
    state.codebooks = CodebookArray(v0.copy(), 1)
    params = state.parameters()
    state.optimizer = OptimizerState.zeros_like(params, [True, False, True, False, False],
                                                learning_rate=lr, weight_decay=wdecay)

    # stage 1: encode
    z_c = x @ we + be
    # stage 2: quantize (nearest of -0.5, 0.5)
    idx = (np.abs(z_c - v0[0, 1]) < np.abs(z_c - v0[0, 0])).astype(int)
    z = v0[0, idx]
    # stage 3: straight-through, decode
    logits = z @ wd_ + bd
    # stage 4: losses
    sig = 1 / (1 + np.exp(-logits))
    bce = np.mean(np.logaddexp(0, logits) - x * logits)
    quant = np.mean(((z_c - z) ** 2).sum(1))
    loss = bce + lq * quant + lc * quant
    # stage 5: gradients and one AdamW step
    d_logits = (sig - x) / x.size
    g_wd, g_bd = z.T @ d_logits, d_logits.sum(0)
    d_z = d_logits @ wd_.T
    d_zc = d_z + lc * 2 * (z_c - z) / len(x)
    g_we, g_be = x.T @ d_zc, d_zc.sum(0)
    g_v = np.zeros_like(v0)
    np.add.at(g_v, (0, idx[:, 0]), (lq * 2 * (z - z_c) / len(x))[:, 0])

    def step(theta, g, decayed):
        upd = lr * g / (np.abs(g) + 1e-8)  # m_hat = g, v_hat = g^2 on step one
        return theta * (1 - lr * wdecay) - upd if decayed else theta - upd

    out = qlae_step(state, x)
    assert out.total == pytest.approx(loss, rel=1e-14)
    expected = [step(we, g_we, True), step(be, g_be, False), step(wd_, g_wd, True), step(bd, g_bd, False),
                step(v0, g_v, False)]
    for got, want in zip(state.parameters(), expected):
        assert np.allclose(got, want, rtol=0, atol=1e-15)


@pytest.mark.parametrize("quantize", [True, False])
def test_full_step_gradient_check(quantize):
    errors = full_step_gradient_check(quantize=quantize)
    assert max(errors.values()) <= 1e-4, errors


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts_with_diagnostics():
    data = tiny_dataset()
    state = init_state(tiny_config(), 48, 2)
    state.decoder.weights[0][:] = np.inf
    with pytest.raises(TrainingDiverged) as info:
        qlae_step(state, data.flat_images())
    assert "loss_total" in info.value.diagnostics


def test_unknown_config_key_lists_valid_keys():
    with pytest.raises(KeyError, match="weight_decay"):
        TrainConfig.from_dict({"weight_decya": 0.1})


def test_default_config_values():
    c = TrainConfig()
    assert (c.lambda_reconstruct, c.lambda_quantize, c.lambda_commit) == (1.0, 1e-2, 1e-2)
    assert (c.batch_size, c.learning_rate, c.beta1, c.beta2, c.n_v) == (128, 1e-3, 0.9, 0.99, 10)
    assert c.resolved(4).n_z == 8


# --- training loop and checkpoints -------------------------------------------------------


def _same_state(a, b) -> bool:
    arrays = lambda s: s.parameters() + s.optimizer.m + s.optimizer.v  # noqa: E731
    return (
        all(np.array_equal(x, y) for x, y in zip(arrays(a), arrays(b)))
        and a.step == b.step
        and a.rng == b.rng
        and a.optimizer.step == b.optimizer.step
    )


def test_zero_updates_checkpoint_equals_initialisation(tmp_path):
    data = tiny_dataset()
    cfg = tiny_config(max_updates=0)
    state = train(cfg, data, tmp_path)
    assert _same_state(load_checkpoint(tmp_path / "checkpoint"), init_state(cfg, 48, 2))
    assert state.step == 0


def test_same_seed_gives_bit_identical_checkpoints(tmp_path):
    data = tiny_dataset()
    train(tiny_config(), data, tmp_path / "a")
    train(tiny_config(), data, tmp_path / "b")
    for name in ("params.bin", "meta.json"):
        assert (tmp_path / "a/checkpoint" / name).read_bytes() == (tmp_path / "b/checkpoint" / name).read_bytes()
    assert (tmp_path / "a/metrics.jsonl").read_bytes() == (tmp_path / "b/metrics.jsonl").read_bytes()


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    data = tiny_dataset()
    for dtype in ("float64", "float32"):
        state = train(tiny_config(dtype=dtype, global_codebook=True), data)
        save_checkpoint(state, tmp_path / dtype)
        back = load_checkpoint(tmp_path / dtype)
        assert _same_state(state, back) and back.config == state.config
        assert back.codebooks.mode == state.codebooks.mode


def test_resume_is_bit_identical_to_uninterrupted(tmp_path):
    data = tiny_dataset()
    full = train(tiny_config(), data)
    train(tiny_config(), data, tmp_path, stop_at=7)
    resumed = train(tiny_config(), data, state=load_checkpoint(tmp_path / "checkpoint"))
    assert _same_state(full, resumed)


def test_metric_log_records(tmp_path):
    train(tiny_config(), tiny_dataset(), tmp_path)
    records = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in records] == [5, 10, 15, 20]
    assert set(records[0]) == {"step", "loss_total", "loss_bce", "loss_quantize", "loss_commit", "psnr"}


def test_truncated_checkpoint_rejected(tmp_path):
    save_checkpoint(init_state(tiny_config(), 48, 2), tmp_path)
    blob = (tmp_path / "params.bin").read_bytes()
    (tmp_path / "params.bin").write_bytes(blob[:-8])
    with pytest.raises(ValueError, match="params.bin"):
        load_checkpoint(tmp_path)


def test_short_training_reduces_bce():
    data = tiny_dataset()
    cfg = tiny_config(max_updates=300)
    state = init_state(cfg, 48, 2)
    first = qlae_step(state, data.flat_images()).bce
    train(cfg, data, state=state)
    assert first == pytest.approx(math.log(2), abs=0.2)
    assert qlae_step(state, data.flat_images()).bce < first / 2


# --- traversal ---------------------------------------------------------------------------


def test_traversal_frame_count_and_degenerate_grid():
    data = tiny_dataset()
    state = train(tiny_config(max_updates=50), data)
    images = data.images
    frames, meta = latent_traversal(state, images[1], 0, 8, eval_images=images)
    assert frames.shape == (8,) + images.shape[1:]
    one, meta1 = latent_traversal(state, images[1], 0, 1, eval_images=images)
    assert one.shape[0] == 1 and meta1["steps"] == 1
    z_c = embed(state, images).z_c[:, 0]
    assert meta["min"] == z_c.min() and meta["max"] == z_c.max()


def test_traversal_of_constant_dim_is_flagged_and_static():
    data = tiny_dataset()
    state = train(tiny_config(max_updates=50, quantize=False), data)
    # make latent 2 constant by zeroing its encoder column and bias
    state.encoder.weights[-1][:, 2] = 0
    state.encoder.biases[-1][2] = 0
    frames, meta = latent_traversal(state, data.images[0], 2, 5, eval_images=data.images)
    assert meta["inactive"] is True
    assert all(np.array_equal(frames[0], f) for f in frames)


def test_traversal_rejects_bad_dim():
    data = tiny_dataset()
    state = init_state(tiny_config(), 48, 2)
    with pytest.raises(ValueError):
        latent_traversal(state, data.images[0], 3, 4)
