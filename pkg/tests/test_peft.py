import numpy as np
import pytest

from forecast_peft import tensor as tn
from forecast_peft.backbone import build_model, decoder_forward, encoder_forward, pretrain_forward, sample_masks
from forecast_peft.config import PeftConfig, desk_backbone, desk_peft, large_backbone, large_peft
from forecast_peft.embed import build_finetune_tokens
from forecast_peft.errors import CheckpointError, ConfigError
from forecast_peft.heads import init_md_head, peft_forecast
from forecast_peft.params import backbone_hash
from forecast_peft.peft import (add_adapters, add_prompts, adapter_forward, apply_cep, apply_mcp,
                                count_parameters, inject_lora_layers, lora_inject, make_plan, param_group,
                                plugin_file_param_count, plugin_load, plugin_save, read_plugin, strip_plugin,
                                trainable_groups, write_plugin)
from forecast_peft.scene import collate, collate_plans
from forecast_peft.tensor import Tensor, gradcheck
from forecast_peft.train import prepare_finetune_model

from conftest import projected


@pytest.fixture(scope="module")
def large_model():
    m = build_model(large_backbone(), 0)
    cfg = large_peft()
    add_prompts(m, cfg, np.random.default_rng(0))
    add_adapters(m, cfg.adapter_rank)
    return m


def test_large_scale_additive_counts(large_model):
    C, r, N_P, L_E, K = 128, 64, 50, 4, 6
    g = count_parameters(large_model)["groups"]
    assert g["cep"]["total"] == N_P * C * L_E == 25_600
    assert g["mcp"]["total"] == N_P * C * K == 38_400
    per_adapter = 2 * C * r + r + C
    assert per_adapter == 16_576
    assert g["adapters"]["total"] == 16 * per_adapter == 265_216
    assert count_parameters(large_model)["additive"] == 329_216


def test_group_sums_equal_total(large_model):
    c = count_parameters(large_model, make_plan(large_model, "peft", large_peft()))
    assert sum(g["total"] for g in c["groups"].values()) == c["total"]
    assert sum(g["trainable"] for g in c["groups"].values()) == c["trainable"]


def test_pretrain_mode_trains_everything(desk_model):
    c = count_parameters(desk_model, make_plan(desk_model, "pretrain"))
    assert c["trainable"] == c["total"]


def test_peft_a_trains_only_added_modules(large_model):
    plan = make_plan(large_model, "peft_a", large_peft())
    groups = {param_group(n) for n in plan.trainable}
    assert groups == {"cep", "mcp", "adapters", "confidence"}
    assert not any(param_group(n) in ("backbone", "bias", "layer_norm", "head", "embedders") for n in plan.trainable)


def test_peft_adds_selective_groups():
    assert trainable_groups("peft") == {"cep", "mcp", "adapters", "confidence", "bias", "layer_norm", "head"}
    assert trainable_groups("peft", PeftConfig(unfreeze_bias=False)) == {
        "cep", "mcp", "adapters", "confidence", "layer_norm", "head"}
    with pytest.raises(ConfigError):
        trainable_groups("bogus")


def test_future_head_is_the_only_unfrozen_head():
    assert param_group("head.future.weight") == "head"
    assert param_group("head.history.weight") == "recon_heads"


@pytest.mark.parametrize("rank,layers,expected", [(16, "encoder", 32_768), (64, "encoder", 131_072),
                                                  (16, "all", 65_536)])
def test_lora_counts(rank, layers, expected):
    m = build_model(large_backbone(), 0)
    inject_lora_layers(m, PeftConfig(lora_rank=rank, lora_layers=layers), np.random.default_rng(0))
    assert count_parameters(m)["groups"]["lora"]["total"] == expected
    n_layers = 4 if layers == "encoder" else 8
    assert expected == n_layers * 2 * (rank * 128 + 128 * rank)


def test_lora_identity_and_errors(desk_scenes, desk_model):
    batch = collate(desk_scenes[:4])
    enc, _ = build_finetune_tokens(batch, desk_model.params)
    before = encoder_forward(enc, desk_model).tokens.data
    lora_inject(desk_model, "encoder.layers.0.attn.q", 4, np.random.default_rng(0))
    assert np.array_equal(encoder_forward(enc, desk_model).tokens.data, before)
    with pytest.raises(ConfigError):
        lora_inject(desk_model, "encoder.layers.0.attn.v", 0)
    with pytest.raises(KeyError):
        lora_inject(desk_model, "encoder.layers.9.attn.q", 4)


def test_md_head_count_breakdown():
    m = build_model(large_backbone(), 0)
    init_md_head(m, np.random.default_rng(0))
    C, K, T = 128, 6, 60
    expected = (C * K * C + K * C) + (C * 2 * C + 2 * C) + (2 * C * T * 2 + T * 2) + (C * 2 * C + 2 * C) + (2 * C + 1)
    assert count_parameters(m)["groups"]["md_head"]["total"] == expected == 196_217


def test_apply_cep_prepends():
    cep = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)))
    x = Tensor(np.zeros((2, 5, 4)))
    out = apply_cep(1, x, cep)
    assert out.shape == (2, 8, 4)
    assert np.array_equal(out.data[1, :3], cep.data[1])
    with pytest.raises(ValueError):
        apply_cep(2, x, cep)


def test_cep_depth_zero_is_identity(desk_scenes, desk_model):
    batch = collate(desk_scenes[:4])
    enc, _ = build_finetune_tokens(batch, desk_model.params)
    base = encoder_forward(enc, desk_model).tokens.data
    add_prompts(desk_model, desk_peft(cep_depth=0), np.random.default_rng(0))
    assert desk_model.get("peft.cep") is None
    assert np.array_equal(encoder_forward(enc, desk_model, desk_model.get("peft.cep")).tokens.data, base)


def test_cep_changes_outputs(desk_scenes, desk_model):
    batch = collate(desk_scenes[:4])
    enc, _ = build_finetune_tokens(batch, desk_model.params)
    base = encoder_forward(enc, desk_model).tokens.data
    add_prompts(desk_model, desk_peft(), np.random.default_rng(0))
    out = encoder_forward(enc, desk_model, desk_model["peft.cep"]).tokens.data
    assert out.shape == base.shape and not np.allclose(out[enc.valid], base[enc.valid])


def test_cep_depth_beyond_encoder_rejected(desk_model):
    with pytest.raises(ConfigError):
        add_prompts(desk_model, desk_peft(cep_depth=3), np.random.default_rng(0))


def _peft_model(desk_model, **over):
    add_prompts(desk_model, desk_peft(**over), np.random.default_rng(1))
    return desk_model


def test_mcp_out_of_range(desk_scenes, desk_model):
    m = _peft_model(desk_model)
    batch = collate(desk_scenes[:2])
    enc, q = build_finetune_tokens(batch, m.params)
    lat = encoder_forward(enc, m)
    with pytest.raises(ValueError):
        apply_mcp(decoder_forward, lat, q, m, 3)


def test_equal_mcp_slices_equal_modes(desk_scenes, desk_model):
    m = _peft_model(desk_model)
    m["peft.mcp"].data[:] = m["peft.mcp"].data[0]
    out = peft_forecast(collate(desk_scenes[:3]), m)
    t = out.trajectories.data
    assert np.array_equal(t[:, :, 0], t[:, :, 1]) and np.array_equal(t[:, :, 0], t[:, :, 2])
    assert np.allclose(out.confidences.sum(-1), 1.0, atol=1e-5)


def test_mcp_permutation_equivariance(desk_scenes, desk_model):
    m = _peft_model(desk_model)
    batch = collate(desk_scenes[:3])
    a = peft_forecast(batch, m)
    perm = np.array([2, 0, 1])
    m["peft.mcp"].data = m["peft.mcp"].data[perm]
    b = peft_forecast(batch, m)
    assert np.array_equal(b.trajectories.data, a.trajectories.data[:, :, perm])
    assert np.array_equal(b.logits.data, a.logits.data[:, :, perm])


def test_zero_adapter_outputs_zero(desk_model):
    add_adapters(desk_model, 8)
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 32)).astype(np.float32))
    out = adapter_forward(x, desk_model.params, "encoder.layers.0.attn_adapter")
    assert np.array_equal(out.data, np.zeros_like(out.data))
    assert not np.signbit(out.data).any()


@pytest.mark.parametrize("seed", range(10))
def test_gradcheck_adapter(seed):
    rng = np.random.default_rng(seed)
    names = ["a.down.weight", "a.down.bias", "a.up.weight", "a.up.bias"]
    shapes = [(6, 3), (3,), (3, 6), (6,)]

    def fn(x, *leaves):
        return adapter_forward(x, dict(zip(names, leaves)), "a")

    inputs = [rng.normal(size=(2, 4, 6))] + [rng.normal(size=s) for s in shapes]
    assert gradcheck(projected(fn, seed), inputs) < 1e-4


def test_zero_init_identity(desk_scenes, desk_model):
    pre = desk_model
    m = prepare_finetune_model(pre, "peft_a", desk_peft(prompt_length=0), 0)
    batch = collate(desk_scenes)
    hm, lm = collate_plans(sample_masks(desk_scenes, np.random.default_rng(0)), batch)
    assert np.array_equal(pretrain_forward(batch, hm, lm, m)[0].data, pretrain_forward(batch, hm, lm, pre)[0].data)
    assert np.array_equal(peft_forecast(batch, m).trajectories.data, peft_forecast(batch, pre).trajectories.data)


def test_plugin_round_trip(tmp_path, desk_scenes, desk_model):
    pre = desk_model
    m = prepare_finetune_model(pre, "peft", desk_peft(), 0)
    for n in m.trainable_names():
        m[n].data = m[n].data + np.float32(0.01)
    plugin = plugin_save(m, pre)
    assert plugin.n_params == count_parameters(m)["trainable"]
    write_plugin(tmp_path / "p.fppl", plugin)
    assert plugin_file_param_count(tmp_path / "p.fppl") == plugin.n_params
    loaded = plugin_load(read_plugin(tmp_path / "p.fppl"), pre)
    batch = collate(desk_scenes[:4])
    assert np.array_equal(peft_forecast(batch, loaded).trajectories.data, peft_forecast(batch, m).trajectories.data)
    assert set(loaded.trainable_names()) == set(m.trainable_names())


def test_plugin_refuses_other_backbone(desk_model):
    m = prepare_finetune_model(desk_model, "peft_a", desk_peft(), 0)
    plugin = plugin_save(m, desk_model)
    other = build_model(desk_backbone(), seed=1)
    assert backbone_hash(other) != plugin.backbone_hash
    with pytest.raises(CheckpointError):
        plugin_load(plugin, other)


def test_plugin_save_detects_drift(desk_model):
    m = prepare_finetune_model(desk_model, "peft_a", desk_peft(), 0)
    m["encoder.layers.0.attn.q.weight"].data = m["encoder.layers.0.attn.q.weight"].data + 1
    with pytest.raises(CheckpointError):
        plugin_save(m, desk_model)


def test_strip_plugin_restores_backbone(desk_model):
    m = prepare_finetune_model(desk_model, "peft", desk_peft(), 0)
    m["head.future.bias"].data = m["head.future.bias"].data + 1
    stripped = strip_plugin(m, desk_model)
    assert set(stripped.params) == set(desk_model.params)
    for n, p in stripped.params.items():
        assert np.array_equal(p.data, desk_model[n].data)
    full = prepare_finetune_model(desk_model, "full_ft", desk_peft(), 0)
    full.set_trainable([])
    full["encoder.norm.weight"].data = full["encoder.norm.weight"].data * 2
    with pytest.raises(CheckpointError):
        strip_plugin(full, desk_model)


def test_full_ft_has_no_adapters(desk_model):
    m = prepare_finetune_model(desk_model, "full_ft", desk_peft(), 0)
    assert not any("adapter." in n for n in m.params)
    assert len(m.trainable_names()) == len(m.params)
