"""AdamW, cosine schedule, checkpoints, and the pretrain / finetune / eval loops."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .backbone import build_model, pretrain_forward, pretrain_step, sample_masks
from .config import MODES, BackboneConfig, LossWeights, PeftConfig
from .errors import CheckpointError, ConfigError, DataError
from .heads import MetricsReport, forecast, init_md_head, loss_finetune, metrics
from .io import load_scenes, save_predictions
from .params import Model, content_hash
from .peft import (PluginCheckpoint, add_adapters, add_prompts, apply_plan, count_parameters,
                   inject_lora_layers, make_plan, plugin_save, write_plugin)
from .scene import PROFILES, Scene, SceneProfile, collate, collate_plans, generate_synthetic
from .tensor import Tensor, no_grad

BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class FreezeViolation(RuntimeError):
    pass


# -- configuration -----------------------------------------------------------------
@dataclass
class TrainConfig:
    """One training or evaluation run.

    Data comes from ``train_data``/``eval_data`` scene files when given,
    otherwise it is generated from ``profile`` with ``seed``.
    """

    mode: str = "pretrain"
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    train_data: str | None = None
    eval_data: str | None = None
    profile: str | dict = "desk"
    n_train: int = 512
    n_eval: int = 128
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    peft: PeftConfig = field(default_factory=PeftConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    mask_ratio_agents: float = 0.5
    mask_ratio_lanes: float = 0.5
    audit_every: int = 10
    horizon: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        for name in ("epochs", "batch_size", "n_train", "n_eval", "audit_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay non-negative")
        for name in ("mask_ratio_agents", "mask_ratio_lanes"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")

    def replace(self, **changes) -> "TrainConfig":
        data = {f: getattr(self, f) for f in self.__dataclass_fields__}
        data.update(changes)
        return TrainConfig(**data)

    def scene_profile(self) -> SceneProfile:
        if isinstance(self.profile, dict):
            return SceneProfile.from_dict(self.profile)
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}; expected one of {sorted(PROFILES)}")
        return PROFILES[self.profile]()

    def to_dict(self) -> dict:
        data = {f: getattr(self, f) for f in self.__dataclass_fields__}
        data["backbone"] = self.backbone.to_dict()
        data["peft"] = self.peft.to_dict()
        data["loss"] = asdict(self.loss)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {sorted(unknown)}")
        try:
            if "backbone" in data:
                data["backbone"] = BackboneConfig.from_dict(data["backbone"])
            if "peft" in data:
                data["peft"] = PeftConfig.from_dict(data["peft"])
            if "loss" in data:
                data["loss"] = LossWeights.from_dict(data["loss"])
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def load_dataset(cfg: TrainConfig, split: str = "train") -> list[Scene]:
    path = cfg.train_data if split == "train" else cfg.eval_data
    if path is not None:
        if not Path(path).exists():
            raise DataError(f"scene file not found: {path}")
        scenes = load_scenes(path)
    else:
        n = cfg.n_train if split == "train" else cfg.n_eval
        # eval scenes use a disjoint seed stream
        seed = cfg.seed if split == "train" else cfg.seed + 1_000_003
        scenes = generate_synthetic(seed, n, cfg.scene_profile())
    if not scenes:
        raise DataError(f"empty {split} dataset")
    check_horizons(scenes, cfg.backbone)
    return scenes


def check_horizons(scenes: list[Scene], cfg: BackboneConfig) -> None:
    s = scenes[0]
    H, T = s.agents[0].history.shape[0], s.agents[0].future.shape[0]
    P = s.lanes[0].points.shape[0]
    if (H, T, P) != (cfg.H, cfg.T, cfg.P):
        raise DataError(f"scene windows H={H}, T={T}, P={P} do not match model H={cfg.H}, T={cfg.T}, P={cfg.P}")


# -- optimizer ------------------------------------------------------------------------
def cosine_lr(step: int, total: int, lr: float) -> float:
    """``lr * 0.5 * (1 + cos(pi * step / total))``; exactly ``lr`` at 0 and 0 at ``total``."""
    if total <= 0:
        return lr
    return lr * 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))


def decays(name: str, shape) -> bool:
    """Weight decay applies to matrices and prompt tensors, not to biases or norm affines."""
    return len(shape) >= 2


class AdamW:
    """Decoupled-weight-decay Adam over the trainable parameters of a model.

    State is allocated only for trainable parameters; a parameter without a
    gradient is skipped entirely, including its step count.
    """

    def __init__(self, model: Model, weight_decay: float = 0.0, betas=BETAS, eps: float = ADAM_EPS):
        self.model = model
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state: dict[str, dict] = {}
        for name in model.trainable_names():
            p = model.params[name]
            self.state[name] = {"step": 0, "m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}

    def step(self, lr: float) -> None:
        b1, b2 = self.betas
        for name, st in self.state.items():
            p = self.model.params[name]
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in parameter {name}")
            st["step"] += 1
            t = st["step"]
            st["m"] = (b1 * st["m"] + (1.0 - b1) * g).astype(p.data.dtype)
            st["v"] = (b2 * st["v"] + (1.0 - b2) * g * g).astype(p.data.dtype)
            m_hat = st["m"] / (1.0 - b1 ** t)
            v_hat = st["v"] / (1.0 - b2 ** t)
            data = p.data
            if self.weight_decay and decays(name, data.shape):
                data = data * (1.0 - lr * self.weight_decay)
            p.data = (data - lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)


def optimizer_step(model: Model, opt: AdamW, lr_t: float) -> None:
    opt.step(lr_t)


# -- checkpoints ----------------------------------------------------------------------
@dataclass
class Checkpoint:
    model: Model
    config: TrainConfig
    optimizer: dict = field(default_factory=dict)
    rng_state: dict | None = None
    epoch: int = 0
    step: int = 0
    losses: list = field(default_factory=list)

    @property
    def content_hash(self) -> str:
        return content_hash(self.model.params).hex()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Single ``.npz`` with parameters, Adam moments, and JSON metadata."""
    arrays = {}
    for name, p in ckpt.model.params.items():
        arrays[f"param/{name}"] = p.data
    steps = {}
    for name, st in ckpt.optimizer.items():
        arrays[f"adam_m/{name}"] = st["m"]
        arrays[f"adam_v/{name}"] = st["v"]
        steps[name] = st["step"]
    meta = {
        "config": ckpt.config.to_dict(),
        "backbone": ckpt.model.config.to_dict(),
        "peft": ckpt.model.peft.to_dict() if ckpt.model.peft else None,
        "mode": ckpt.model.mode,
        "trainable": ckpt.model.trainable_names(),
        "order": list(ckpt.model.params),
        "adam_steps": steps,
        "rng_state": ckpt.rng_state,
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "losses": ckpt.losses,
        "content_hash": ckpt.content_hash,
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            trainable = set(meta["trainable"])
            params = {n: Tensor(z[f"param/{n}"].copy(), requires_grad=n in trainable) for n in meta["order"]}
            opt = {n: {"step": s, "m": z[f"adam_m/{n}"].copy(), "v": z[f"adam_v/{n}"].copy()}
                   for n, s in meta["adam_steps"].items()}
    except (KeyError, ValueError, OSError) as exc:
        raise CheckpointError(f"{path}: not a valid checkpoint ({exc})") from exc
    peft = PeftConfig.from_dict(meta["peft"]) if meta["peft"] else None
    model = Model(BackboneConfig.from_dict(meta["backbone"]), params, peft, meta["mode"])
    ckpt = Checkpoint(model, TrainConfig.from_dict(meta["config"]), opt, meta["rng_state"],
                      meta["epoch"], meta["step"], meta["losses"])
    if ckpt.content_hash != meta["content_hash"]:
        raise CheckpointError(f"{path}: content hash mismatch")
    return ckpt


# -- helpers ------------------------------------------------------------------------------
def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _rng_from(state: dict | None, seed: int) -> np.random.Generator:
    rng = np.random.default_rng(seed)
    if state is not None:
        rng.bit_generator.state = state
    return rng


class FreezeAudit:
    """Bit-level snapshot of frozen parameters, re-checked during training."""

    def __init__(self, model: Model):
        self.model = model
        self.snapshot = {n: p.data.copy() for n, p in model.params.items() if not p.requires_grad}

    def check(self) -> None:
        for name, ref in self.snapshot.items():
            if not np.array_equal(self.model.params[name].data, ref):
                raise FreezeViolation(f"frozen parameter {name} changed during training")


def _log_default(msg: str) -> None:
    pass


# -- pretraining ----------------------------------------------------------------------------
def run_pretrain(cfg: TrainConfig, scenes: list[Scene] | None = None, resume: Checkpoint | None = None,
                 out_dir=None, log: Callable[[str], None] = _log_default) -> Checkpoint:
    """Masked reconstruction training of every parameter; one checkpoint per epoch."""
    scenes = scenes if scenes is not None else load_dataset(cfg, "train")
    check_horizons(scenes, cfg.backbone)
    if resume is not None:
        model = resume.model
        if model.config != cfg.backbone:
            raise ConfigError("resume checkpoint has a different backbone config")
        ckpt = resume
    else:
        model = build_model(cfg.backbone, cfg.seed)
        model.mode = "pretrain"
        ckpt = Checkpoint(model, cfg)
    opt = AdamW(model, cfg.weight_decay)
    for name, st in ckpt.optimizer.items():
        opt.state[name] = {"step": st["step"], "m": st["m"].copy(), "v": st["v"].copy()}
    rng = _rng_from(ckpt.rng_state, cfg.seed)
    steps_per_epoch = math.ceil(len(scenes) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    step = ckpt.step
    losses = list(ckpt.losses)
    for epoch in range(ckpt.epoch, cfg.epochs):
        running = []
        for idx in _batches(len(scenes), cfg.batch_size, rng):
            loss = pretrain_step([scenes[i] for i in idx], model, rng, cfg.loss,
                                 cfg.mask_ratio_agents, cfg.mask_ratio_lanes)
            opt.step(cosine_lr(step, total, cfg.lr))
            step += 1
            running.append(loss.item())
        losses.append(float(np.mean(running)))
        ckpt = Checkpoint(model, cfg, opt.state, rng.bit_generator.state, epoch + 1, step, list(losses))
        if out_dir is not None:
            save_checkpoint(Path(out_dir) / "checkpoint.npz", ckpt)
        log(f"pretrain epoch {epoch + 1}/{cfg.epochs} L_RE {losses[-1]:.5f}")
    model.zero_grad()
    return ckpt


def reconstruction_error(model: Model, scenes: list[Scene], seed: int = 0, batch_size: int = 64,
                         weights: LossWeights | None = None, mask_ratio: float = 0.5) -> float:
    """Scene-weighted mean L_RE under masks drawn from a fixed seed."""
    rng = np.random.default_rng(seed)
    total = 0.0
    with no_grad():
        for start in range(0, len(scenes), batch_size):
            chunk = scenes[start:start + batch_size]
            batch = collate(chunk)
            hm, lm = collate_plans(sample_masks(chunk, rng, mask_ratio, mask_ratio), batch)
            loss, _ = pretrain_forward(batch, hm, lm, model, weights)
            total += loss.item() * len(chunk)
    return total / len(scenes)


# -- fine-tuning ---------------------------------------------------------------------------
def prepare_finetune_model(pretrained: Model, mode: str, peft_cfg: PeftConfig, seed: int = 0) -> Model:
    """Attach the modules ``mode`` needs to a copy of the pretrained model and set trainability.

    ``full_ft`` carries prompts but no adapters; ``head_only`` and ``lora``
    forecast with the MLP multi-modal decoder instead of the decoder path.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    model = pretrained.clone()
    rng = np.random.default_rng([seed, 7])
    if mode in ("full_ft", "peft_a", "peft"):
        add_prompts(model, peft_cfg, rng)
    if mode in ("peft_a", "peft") and peft_cfg.adapters_enabled:
        add_adapters(model, peft_cfg.adapter_rank, peft_cfg.adapter_msa, peft_cfg.adapter_ffn)
    if mode in ("head_only", "lora"):
        init_md_head(model, rng)
    if mode == "lora":
        inject_lora_layers(model, peft_cfg, rng)
    model.peft = peft_cfg
    apply_plan(model, make_plan(model, mode, peft_cfg))
    return model


def finetune_loss(scenes: list[Scene], model: Model, weights: LossWeights | None = None):
    batch = collate(scenes)
    out = forecast(batch, model)
    return loss_finetune(out, batch.future[:, 0], batch.future_valid[:, 0], weights)


def evaluate_finetune_loss(model: Model, scenes: list[Scene], batch_size: int = 64,
                           weights: LossWeights | None = None) -> float:
    total = 0.0
    with no_grad():
        for start in range(0, len(scenes), batch_size):
            chunk = scenes[start:start + batch_size]
            loss, _ = finetune_loss(chunk, model, weights)
            total += loss.item() * len(chunk)
    return total / len(scenes)


@dataclass
class FinetuneResult:
    checkpoint: Checkpoint
    plugin: PluginCheckpoint | None
    trainable: int
    losses: list


def run_finetune(cfg: TrainConfig, pretrained: Checkpoint | Model, scenes: list[Scene] | None = None,
                 out_dir=None, log: Callable[[str], None] = _log_default) -> FinetuneResult:
    """Fine-tune in ``cfg.mode``; PEFT modes also emit a plug-in checkpoint."""
    base = pretrained.model if isinstance(pretrained, Checkpoint) else pretrained
    if cfg.mode == "pretrain":
        raise ConfigError("run_finetune needs a fine-tuning mode, not 'pretrain'")
    if base.config != cfg.backbone:
        raise ConfigError(f"incompatible backbone: checkpoint has {base.config.to_dict()}, "
                          f"config asks for {cfg.backbone.to_dict()}")
    if any(n.startswith("peft.") or "adapter." in n for n in base.params):
        raise ConfigError("pretrained model already carries fine-tuning modules")
    scenes = scenes if scenes is not None else load_dataset(cfg, "train")
    check_horizons(scenes, cfg.backbone)
    model = prepare_finetune_model(base, cfg.mode, cfg.peft, cfg.seed)
    trainable = count_parameters(model)["trainable"]
    log(f"finetune mode {cfg.mode}: {trainable} trainable parameters")
    opt = AdamW(model, cfg.weight_decay)
    audit = FreezeAudit(model)
    rng = np.random.default_rng([cfg.seed, 11])
    total = cfg.epochs * math.ceil(len(scenes) / cfg.batch_size)
    step = 0
    losses = []
    for epoch in range(cfg.epochs):
        running = []
        for idx in _batches(len(scenes), cfg.batch_size, rng):
            model.zero_grad()
            loss, _ = finetune_loss([scenes[i] for i in idx], model, cfg.loss)
            loss.backward()
            opt.step(cosine_lr(step, total, cfg.lr))
            step += 1
            running.append(loss.item())
            if step % cfg.audit_every == 0:
                audit.check()
        losses.append(float(np.mean(running)))
        log(f"finetune epoch {epoch + 1}/{cfg.epochs} loss {losses[-1]:.5f}")
    audit.check()
    model.zero_grad()
    ckpt = Checkpoint(model, cfg, opt.state, rng.bit_generator.state, cfg.epochs, step, losses)
    plugin = plugin_save(model, base) if cfg.mode not in ("full_ft",) else None
    if out_dir is not None:
        out_dir = Path(out_dir)
        save_checkpoint(out_dir / "checkpoint.npz", ckpt)
        if plugin is not None:
            write_plugin(out_dir / "plugin.fppl", plugin)
    return FinetuneResult(ckpt, plugin, trainable, losses)


# -- evaluation ------------------------------------------------------------------------------
@dataclass
class Predictions:
    scene_ids: np.ndarray
    trajectories: np.ndarray  # (S, K, T, 2) target agent
    confidences: np.ndarray   # (S, K)
    gt: np.ndarray            # (S, T, 2)
    valid: np.ndarray         # (S, T)


def predict(model: Model, scenes: list[Scene], batch_size: int = 64) -> Predictions:
    ids, trajs, confs, gts, valids = [], [], [], [], []
    with no_grad():
        for start in range(0, len(scenes), batch_size):
            batch = collate(scenes[start:start + batch_size])
            out = forecast(batch, model)
            ids.append(batch.scene_ids)
            trajs.append(out.trajectories.data[:, 0])
            confs.append(out.confidences[:, 0])
            gts.append(batch.future[:, 0])
            valids.append(batch.future_valid[:, 0])
    return Predictions(np.concatenate(ids), np.concatenate(trajs), np.concatenate(confs),
                       np.concatenate(gts), np.concatenate(valids))


def run_eval(model: Model, scenes: list[Scene], horizon: int | None = None, out_dir=None,
             batch_size: int = 64) -> MetricsReport:
    """Forecast every scene, score the target agent, and optionally write a dump plus JSON."""
    if not scenes:
        raise DataError("empty evaluation set")
    check_horizons(scenes, model.config)
    if horizon is not None and not 0 < horizon <= model.config.T:
        raise ConfigError(f"horizon {horizon} is outside 1..{model.config.T}")
    pred = predict(model, scenes, batch_size)
    report = metrics(pred.trajectories, pred.confidences, pred.gt, pred.valid, horizon)
    counts = count_parameters(model)
    report.trainable_params = counts["trainable"]
    report.total_params = counts["total"]
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_predictions(out_dir / "predictions.fppr", pred.scene_ids, pred.trajectories, pred.confidences)
        (out_dir / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2))
    return report


__all__ = [
    "TrainConfig", "AdamW", "optimizer_step", "cosine_lr", "Checkpoint", "save_checkpoint",
    "load_checkpoint", "run_pretrain", "run_finetune", "run_eval", "prepare_finetune_model",
    "reconstruction_error", "evaluate_finetune_loss", "predict", "FreezeViolation", "FreezeAudit",
    "FinetuneResult", "Predictions", "load_dataset", "check_horizons",
]
