import numpy as np
import pytest

from forecast_peft import tensor as tn
from forecast_peft.backbone import (ReconPredictions, build_model, decoder_forward, encoder_forward,
                                    loss_reconstruction, pretrain_forward, pretrain_step, reconstruction_heads,
                                    sample_masks, transformer_layer)
from forecast_peft.config import LossWeights, desk_backbone
from forecast_peft.embed import FUTURE, HISTORY, LANE, PROMPT, ReconTargets, TokenBatch, build_pretrain_tokens
from forecast_peft.scene import collate, collate_plans, desk_profile, generate_synthetic
from forecast_peft.tensor import Tensor

from conftest import DOWNSTREAM, param_gradcheck


def tokens(B, L, C, seed=0, valid=None):
    rng = np.random.default_rng(seed)
    valid = np.ones((B, L), bool) if valid is None else valid
    return TokenBatch(Tensor(rng.normal(size=(B, L, C)).astype(np.float32)), np.zeros((B, L), int),
                      np.zeros((B, L), int), valid, np.zeros((B, L, 2), np.float32))


def test_zero_weights_make_identity_layers(desk_model):
    for name, p in desk_model.params.items():
        if name.startswith(("encoder.layers", "decoder.layers")) and ("attn." in name or "ffn." in name):
            p.data = np.zeros_like(p.data)
    x = tokens(2, 5, 32)
    out = transformer_layer(x.tokens, ~x.valid, desk_model.params, "encoder.layers.0", 2)
    assert np.array_equal(out.data, x.tokens.data)


def test_single_token_attention_is_value_path(desk_model):
    p = desk_model.params
    x = tokens(1, 1, 32).tokens
    h = tn.layer_norm(x, p["encoder.layers.0.norm1.weight"], p["encoder.layers.0.norm1.bias"])
    v = tn.linear(h, p["encoder.layers.0.attn.v.weight"], p["encoder.layers.0.attn.v.bias"])
    expect = x + tn.linear(v, p["encoder.layers.0.attn.out.weight"], p["encoder.layers.0.attn.out.bias"])
    h2 = tn.layer_norm(expect, p["encoder.layers.0.norm2.weight"], p["encoder.layers.0.norm2.bias"])
    ffn = tn.linear(tn.gelu(tn.linear(h2, p["encoder.layers.0.ffn.fc1.weight"], p["encoder.layers.0.ffn.fc1.bias"])),
                    p["encoder.layers.0.ffn.fc2.weight"], p["encoder.layers.0.ffn.fc2.bias"])
    out = transformer_layer(x, np.zeros((1, 1), bool), p, "encoder.layers.0", 2)
    assert np.allclose(out.data, (expect + ffn).data, atol=1e-6)


def test_encoder_preserves_length(desk_model):
    x = tokens(2, 7, 32)
    assert encoder_forward(x, desk_model).tokens.shape == (2, 7, 32)


def test_invalid_tokens_are_never_read(desk_model):
    valid = np.ones((1, 6), bool)
    valid[0, 3] = False
    x = tokens(1, 6, 32, valid=valid)
    a = encoder_forward(x, desk_model).tokens.data
    x.tokens.data[0, 3] += 50.0
    b = encoder_forward(x, desk_model).tokens.data
    assert np.array_equal(a[0, valid[0]], b[0, valid[0]])


def test_decoder_returns_queries(desk_model):
    out = decoder_forward(tokens(2, 5, 32), tokens(2, 3, 32, seed=1), desk_model)
    assert out.tokens.shape == (2, 3, 32)
    with pytest.raises(ValueError):
        decoder_forward(tokens(2, 5, 32), tokens(2, 0, 32), desk_model)


def test_head_shapes_and_unknown_kind(desk_model):
    t = tokens(1, 4, 32)
    t.kinds[:] = [HISTORY, FUTURE, LANE, LANE]
    pred = reconstruction_heads(t, desk_model)
    assert pred.history.shape == (1, 2, 10, 2)
    assert pred.lane.shape == (1, 2, 20, 2)
    t.kinds[0, 0] = PROMPT
    with pytest.raises(ValueError):
        reconstruction_heads(t, desk_model)


def test_identical_tokens_identical_predictions(desk_model):
    t = tokens(1, 4, 32)
    t.tokens.data[0, 1] = t.tokens.data[0, 0]
    t.kinds[:] = [HISTORY, HISTORY, LANE, LANE]
    pred = reconstruction_heads(t, desk_model)
    assert np.array_equal(pred.history.data[0, 0], pred.history.data[0, 1])


def _targets(B=1, A=1, M=1, H=10, T=12, P=20):
    z = lambda *s: np.zeros(s, np.float32)
    return ReconTargets(z(B, A, H, 2), z(B, A, H), z(B, A, T, 2), z(B, A, T), z(B, M, P, 2), z(B, M, P))


def test_lane_loss_hand_oracle():
    tg = _targets()
    tg.lane_weight[0, 0, 5] = 1
    lane = np.zeros((1, 1, 20, 2), np.float32)
    lane[0, 0, 5] = [3.0, 4.0]
    pred = ReconPredictions(Tensor(np.zeros((1, 1, 10, 2))), Tensor(np.zeros((1, 1, 12, 2))), Tensor(lane))
    total, terms = loss_reconstruction(pred, tg, LossWeights(lane=1.0))
    assert terms["lane"] == pytest.approx(25 / 2)
    assert terms["history"] == 0 and terms["future"] == 0
    total, _ = loss_reconstruction(pred, tg)
    assert total.item() == pytest.approx(0.35 * 12.5)


def test_perfect_prediction_zero_loss():
    tg = _targets()
    tg.history_weight[:] = 1
    tg.history[:] = 2.0
    pred = ReconPredictions(Tensor(tg.history.copy()), Tensor(tg.future.copy()), Tensor(tg.lane.copy()))
    assert loss_reconstruction(pred, tg)[0].item() == 0.0


def test_loss_permutation_invariant():
    rng = np.random.default_rng(0)
    tg = _targets(A=4)
    tg.history_weight[:] = rng.random((1, 4, 10)) < 0.7
    tg.history[:] = rng.normal(size=tg.history.shape)
    ph = rng.normal(size=(1, 4, 10, 2))
    perm = rng.permutation(4)
    mk = lambda h: ReconPredictions(Tensor(h), Tensor(np.zeros((1, 4, 12, 2))), Tensor(np.zeros((1, 1, 20, 2))))
    a = loss_reconstruction(mk(ph), tg)[0].item()
    tg2 = _targets(A=4)
    tg2.history[:] = tg.history[:, perm]
    tg2.history_weight[:] = tg.history_weight[:, perm]
    b = loss_reconstruction(mk(ph[:, perm]), tg2)[0].item()
    assert a == pytest.approx(b, rel=1e-12)


def test_pretrain_step_deterministic(desk_scenes):
    m1, m2 = build_model(desk_backbone(), 0), build_model(desk_backbone(), 0)
    l1 = pretrain_step(desk_scenes, m1, np.random.default_rng(3))
    l2 = pretrain_step(desk_scenes, m2, np.random.default_rng(3))
    assert l1.item() == l2.item() and np.isfinite(l1.item()) and l1.item() > 0
    assert all(m1.params[n].grad is not None for n in ("mask_token.lane", "head.history.weight", "embed.kind.weight"))


# the L1 terms are piecewise linear; a small step keeps differences off the kinks
@pytest.mark.parametrize("seed", range(10))
def test_gradcheck_reconstruction_loss(tiny_cfg, seed):
    scenes = generate_synthetic(seed, 3, desk_profile(n_agents_range=(2, 3), n_lanes_range=(2, 3)))
    model = build_model(tiny_cfg, seed).astype(np.float64)
    batch = collate(scenes)
    hm, lm = collate_plans(sample_masks(scenes, np.random.default_rng(seed)), batch)
    err = param_gradcheck(model, lambda: pretrain_forward(batch, hm, lm, model)[0],
                          [n for n in DOWNSTREAM if n in model.params], h=1e-6, seed=seed)
    assert err < 1e-4
