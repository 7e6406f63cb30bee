import json
import math

import numpy as np
import pytest

from forecast_peft.ablation import cell_config, run_ablation
from forecast_peft.backbone import build_model
from forecast_peft.config import desk_backbone, desk_peft
from forecast_peft.errors import CheckpointError, ConfigError, DataError
from forecast_peft.heads import peft_forecast
from forecast_peft.params import Model
from forecast_peft.peft import count_parameters, plugin_load
from forecast_peft.scene import collate, desk_profile, generate_synthetic
from forecast_peft.tensor import Tensor
from forecast_peft.train import (AdamW, FreezeAudit, FreezeViolation, TrainConfig, cosine_lr, load_checkpoint,
                                 prepare_finetune_model, run_eval, run_finetune, run_pretrain, save_checkpoint)

FAST = dict(epochs=2, n_train=24, n_eval=12, batch_size=8)


def scalar_model(value, grad, trainable=True):
    m = Model(desk_backbone(), {"w.weight": Tensor(np.array([[value]], np.float64), requires_grad=trainable)})
    m["w.weight"].grad = np.array([[grad]])
    return m


def test_adamw_matches_hand_reference():
    lr, wd, b1, b2, eps = 0.1, 0.01, 0.9, 0.999, 1e-8
    m = scalar_model(1.0, 0.5)
    opt = AdamW(m, wd)
    w, mom, vel = 1.0, 0.0, 0.0
    for t in range(1, 4):
        m["w.weight"].grad = np.array([[0.5]])
        opt.step(lr)
        mom = b1 * mom + (1 - b1) * 0.5
        vel = b2 * vel + (1 - b2) * 0.25
        w = w * (1 - lr * wd) - lr * (mom / (1 - b1 ** t)) / (math.sqrt(vel / (1 - b2 ** t)) + eps)
    assert m["w.weight"].data[0, 0] == pytest.approx(w, abs=1e-12)


def test_zero_grad_zero_decay_unchanged():
    m = scalar_model(1.0, 0.0)
    AdamW(m, 0.0).step(0.1)
    assert m["w.weight"].data[0, 0] == 1.0


def test_frozen_params_untouched_and_stateless():
    m = scalar_model(1.0, 0.5, trainable=False)
    opt = AdamW(m, 0.1)
    opt.step(0.1)
    assert opt.state == {} and m["w.weight"].data[0, 0] == 1.0


def test_nan_gradient_names_parameter():
    m = scalar_model(1.0, float("nan"))
    with pytest.raises(FloatingPointError, match="w.weight"):
        AdamW(m).step(0.1)


def test_cosine_endpoints():
    assert cosine_lr(0, 100, 1e-3) == 1e-3
    assert cosine_lr(100, 100, 1e-3) == 0.0
    assert cosine_lr(50, 100, 1e-3) == pytest.approx(5e-4)


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        TrainConfig(mode="nope")
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"bogus": 1})
    cfg = TrainConfig(mode="peft", peft=desk_peft(adapter_rank=4))
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    assert TrainConfig.load(tmp_path / "c.json") == cfg
    with pytest.raises(ConfigError):
        TrainConfig.load(tmp_path / "missing.json")


def test_missing_scene_file():
    with pytest.raises(DataError):
        run_pretrain(TrainConfig(train_data="/nonexistent.fpsc", **FAST))


def test_horizon_mismatch_rejected():
    scenes = generate_synthetic(0, 4, desk_profile(H=8, H_native=8))
    with pytest.raises(DataError):
        run_pretrain(TrainConfig(**FAST), scenes)


@pytest.fixture(scope="module")
def pretrained():
    return run_pretrain(TrainConfig(**FAST))


def test_pretrain_deterministic_and_checkpoint_round_trip(tmp_path, pretrained):
    again = run_pretrain(TrainConfig(**FAST))
    assert again.losses == pretrained.losses
    assert again.content_hash == pretrained.content_hash
    save_checkpoint(tmp_path / "c.npz", pretrained)
    back = load_checkpoint(tmp_path / "c.npz")
    assert back.content_hash == pretrained.content_hash
    assert back.rng_state == pretrained.rng_state and back.losses == pretrained.losses
    for n, st in pretrained.optimizer.items():
        assert np.array_equal(back.optimizer[n]["m"], st["m"]) and np.array_equal(back.optimizer[n]["v"], st["v"])
        assert back.optimizer[n]["step"] == st["step"]


def test_resume_gives_identical_losses(tmp_path):
    cfg = TrainConfig(**{**FAST, "epochs": 3})
    full = run_pretrain(cfg)
    first_two = _train_epochs(cfg, 2, tmp_path)
    assert load_checkpoint(first_two).epoch == 2
    resumed = run_pretrain(cfg, resume=load_checkpoint(first_two))
    assert resumed.losses == full.losses
    assert resumed.content_hash == full.content_hash


def _train_epochs(cfg, n, out_dir):
    """Stop a run after ``n`` epochs while keeping the full-run schedule."""
    class Stop(Exception):
        pass

    seen = []

    def log(msg):
        seen.append(msg)
        if len(seen) == n:
            raise Stop

    try:
        run_pretrain(cfg, out_dir=out_dir, log=log)
    except Stop:
        pass
    return out_dir / "checkpoint.npz"


def test_corrupt_checkpoint(tmp_path):
    (tmp_path / "bad.npz").write_bytes(b"not a zip")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.npz")
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "missing.npz")


def test_freeze_audit_detects_drift(pretrained):
    m = prepare_finetune_model(pretrained.model, "peft_a", desk_peft(), 0)
    audit = FreezeAudit(m)
    audit.check()
    m["embed.pos.0.weight"].data = m["embed.pos.0.weight"].data.copy()
    m["embed.pos.0.weight"].data[0, 0] += 1e-7
    with pytest.raises(FreezeViolation, match="embed.pos.0.weight"):
        audit.check()


def test_finetune_modes(pretrained):
    for mode in ("peft", "peft_a", "full_ft", "head_only", "lora"):
        cfg = TrainConfig(mode=mode, **{**FAST, "epochs": 1})
        res = run_finetune(cfg, pretrained)
        assert res.trainable == count_parameters(res.checkpoint.model)["trainable"]
        assert (res.plugin is None) == (mode == "full_ft")
        if res.plugin is not None:
            assert res.plugin.n_params == res.trainable
        if mode == "full_ft":
            assert not any("adapter." in n for n in res.checkpoint.model.params)


def test_finetune_rejects_incompatible_backbone(pretrained):
    with pytest.raises(ConfigError):
        run_finetune(TrainConfig(mode="peft", backbone=desk_backbone(C=16), **FAST), pretrained)
    with pytest.raises(ConfigError):
        run_finetune(TrainConfig(mode="pretrain", **FAST), pretrained)


def test_eval_outputs_and_prefix(tmp_path, pretrained):
    cfg = TrainConfig(mode="peft", **{**FAST, "epochs": 1})
    res = run_finetune(cfg, pretrained)
    scenes = generate_synthetic(9, 12, desk_profile())
    rep = run_eval(res.checkpoint.model, scenes, out_dir=tmp_path)
    assert np.isfinite(rep.minADE) and rep.minADE <= rep.minFDE
    assert json.loads((tmp_path / "metrics.json").read_text())["minADE"] == rep.minADE
    assert (tmp_path / "predictions.fppr").exists()
    half = run_eval(res.checkpoint.model, scenes, horizon=6)
    from forecast_peft.heads import metrics
    from forecast_peft.train import predict
    pred = predict(res.checkpoint.model, scenes)
    ref = metrics(pred.trajectories[:, :, :6], pred.confidences, pred.gt[:, :6], pred.valid[:, :6])
    assert half.minADE == ref.minADE and half.minFDE == ref.minFDE
    with pytest.raises(ConfigError):
        run_eval(res.checkpoint.model, scenes, horizon=13)
    swapped = plugin_load(res.plugin, pretrained.model)
    assert run_eval(swapped, scenes).to_dict() == run_eval(res.checkpoint.model, scenes).to_dict()


def test_cep_depth_counts_monotone(pretrained):
    counts = []
    for depth in range(0, 3):
        m = prepare_finetune_model(pretrained.model, "peft", cell_config(desk_peft(), "cep_depth", depth), 0)
        counts.append(count_parameters(m)["trainable"])
    assert counts == sorted(counts) and len(set(counts)) == 3
    assert counts[1] - counts[0] == 8 * 32


def test_prompt_length_zero_equals_no_prompts(pretrained, desk_scenes):
    a = prepare_finetune_model(pretrained.model, "peft", desk_peft(prompt_length=0), 0)
    b = prepare_finetune_model(pretrained.model, "peft", desk_peft(cep_depth=0, mcp_enabled=False), 0)
    batch = collate(desk_scenes[:4])
    assert np.array_equal(peft_forecast(batch, a).trajectories.data, peft_forecast(batch, b).trajectories.data)
    assert count_parameters(a)["additive"] == count_parameters(b)["additive"]


def test_ablation_table(tmp_path, pretrained):
    train = generate_synthetic(0, 16, desk_profile())
    ev = generate_synthetic(5, 8, desk_profile())
    base = TrainConfig(mode="peft", epochs=1, batch_size=8)
    sweep = {"cep_depth": [0, 1, 2], "components": ["pa", "cep+mcp+pa"]}
    rows = run_ablation(sweep, pretrained.model, train, ev, base, tmp_path)
    assert len(rows) == 5
    depth_counts = [r["trainable"] for r in rows if r["axis"] == "cep_depth"]
    assert depth_counts == sorted(depth_counts)
    assert (tmp_path / "ablation_cep_depth.svg").read_text().lstrip().startswith("<?xml")
    assert json.loads((tmp_path / "ablation.json").read_text()) == json.loads(json.dumps(rows))
    again = run_ablation({"cep_depth": [1]}, pretrained.model, train, ev, base)
    assert again[0] == rows[1]
    with pytest.raises(ConfigError):
        run_ablation({"depth": [1]}, pretrained.model, train, ev, base)
