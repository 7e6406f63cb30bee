"""Forecasting heads, the winner-takes-all fine-tuning loss, and benchmark metrics."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tn
from .backbone import decoder_forward, encoder_forward
from .config import LossWeights
from .embed import build_finetune_tokens
from .params import Model, add_linear
from .peft import apply_mcp
from .scene import SceneBatch
from .tensor import Tensor

MISS_THRESHOLD = 2.0


@dataclass
class ForecastOutput:
    """``trajectories[B, N, K, T, 2]`` in scene meters and mode logits ``[B, N, K]``."""

    trajectories: Tensor
    logits: Tensor

    @property
    def confidences(self) -> np.ndarray:
        z = self.logits.data - self.logits.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)


def init_md_head(model: Model, rng: np.random.Generator) -> None:
    """MLP multi-modal decoder: a per-mode projection then trajectory and score MLPs."""
    C, K, T = model.config.C, model.config.K, model.config.T
    add_linear(model.params, "md.proj", C, K * C, rng)
    add_linear(model.params, "md.loc.0", C, 2 * C, rng)
    add_linear(model.params, "md.loc.1", 2 * C, T * 2, rng)
    add_linear(model.params, "md.pi.0", C, 2 * C, rng)
    add_linear(model.params, "md.pi.1", 2 * C, 1, rng)


def _lin(x: Tensor, p: dict, name: str) -> Tensor:
    return tn.linear(x, p[f"{name}.weight"], p[f"{name}.bias"])


def peft_forecast(batch: SceneBatch, model: Model) -> ForecastOutput:
    """Encoder with deep prompts, then one decoder pass per mode prompt set."""
    p, cfg = model.params, model.config
    encoder_in, queries = build_finetune_tokens(batch, p)
    latents = encoder_forward(encoder_in, model, model.get("peft.cep"))
    B, A = batch.agent_valid.shape
    trajs, logits = [], []
    for k in range(cfg.K):
        decoded = apply_mcp(decoder_forward, latents, queries, model, k)
        trajs.append(_lin(decoded.tokens, p, "head.future").reshape(B, A, 1, cfg.T, 2))
        if "peft.confidence.weight" in p:
            logits.append(_lin(decoded.tokens, p, "peft.confidence"))
        else:
            logits.append(Tensor(np.zeros((B, A, 1), dtype=decoded.tokens.dtype)))
    traj = tn.concat(trajs, axis=2) + batch.agent_ref[:, :, None, None, :]
    return ForecastOutput(traj, tn.concat(logits, axis=-1))


def baseline_forecast(batch: SceneBatch, model: Model) -> ForecastOutput:
    """Encoder over histories and lanes, MLP multi-modal decoder on each agent token."""
    p, cfg = model.params, model.config
    encoder_in, _ = build_finetune_tokens(batch, p)
    latents = encoder_forward(encoder_in, model)
    B, A = batch.agent_valid.shape
    agents = latents.tokens[:, :A]
    modes = _lin(agents, p, "md.proj").reshape(B, A, cfg.K, cfg.C)
    loc = _lin(tn.gelu(_lin(modes, p, "md.loc.0")), p, "md.loc.1").reshape(B, A, cfg.K, cfg.T, 2)
    pi = _lin(tn.gelu(_lin(modes, p, "md.pi.0")), p, "md.pi.1").reshape(B, A, cfg.K)
    return ForecastOutput(loc + batch.agent_ref[:, :, None, None, :], pi)


def forecast(batch: SceneBatch, model: Model) -> ForecastOutput:
    if "md.proj.weight" in model.params:
        return baseline_forecast(batch, model)
    return peft_forecast(batch, model)


def best_mode(traj: np.ndarray, gt: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Index of the mode with the lowest mean L2 over valid steps; ``traj[B, K, T, 2]``."""
    err = np.linalg.norm(traj - gt[:, None], axis=-1)
    w = valid[:, None, :].astype(np.float64)
    ade = (err * w).sum(-1) / np.maximum(w.sum(-1), 1.0)
    return ade.argmin(axis=1)


def loss_finetune(out: ForecastOutput, gt_future: np.ndarray, valid: np.ndarray,
                  weights: LossWeights | None = None) -> tuple[Tensor, dict]:
    """Target-agent WTA loss: Huber on the best mode plus cross-entropy on its score.

    ``gt_future[B, T, 2]`` and ``valid[B, T]`` belong to the target (agent 0).
    Samples with no valid step are skipped.
    """
    weights = weights or LossWeights()
    traj = out.trajectories[:, 0]
    logits = out.logits[:, 0]
    keep = np.flatnonzero(valid.any(axis=1))
    if keep.size == 0:
        zero = Tensor(np.zeros((), dtype=traj.dtype))
        return zero, {"regression": 0.0, "classification": 0.0}
    k_star = best_mode(traj.data[keep], gt_future[keep], valid[keep])
    best = traj[keep, k_star]
    w = valid[keep].astype(traj.dtype)
    per_sample = 1.0 / (2.0 * w.sum(axis=1))
    resid = tn.huber(best - gt_future[keep], weights.huber_delta)
    reg = (resid * w[..., None]).sum(axis=(1, 2)) * per_sample.astype(traj.dtype)
    reg = reg.mean()
    logp = tn.log_softmax(logits[keep], axis=-1)
    ce = -(logp[np.arange(keep.size), k_star]).mean()
    total = reg + ce * weights.classification
    return total, {"regression": reg.item(), "classification": ce.item()}


# -- metrics -------------------------------------------------------------------------------
@dataclass
class MetricsReport:
    minADE: float
    minFDE: float
    MR: float
    brier_minFDE: float
    n_scenes: int
    trainable_params: int | None = None
    total_params: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def metrics(trajectories, confidences, gt, valid=None, horizon: int | None = None,
            miss_threshold: float = MISS_THRESHOLD) -> MetricsReport:
    """minADE / minFDE / MR / b-minFDE of target-agent forecasts.

    ``trajectories[S, K, T, 2]``, ``confidences[S, K]``, ``gt[S, T, 2]``. With
    ``valid`` the displacement errors use valid steps and the last valid step
    is the endpoint. ``horizon`` evaluates only the first ``horizon`` steps.
    """
    traj = np.asarray(trajectories, dtype=np.float64)
    conf = np.asarray(confidences, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if traj.shape[0] == 0:
        raise ValueError("empty evaluation set")
    T = traj.shape[2]
    valid = np.ones(gt.shape[:2], bool) if valid is None else np.asarray(valid, bool)
    if horizon is not None:
        if horizon > T:
            raise ValueError(f"horizon {horizon} exceeds prediction length {T}")
        traj, gt, valid = traj[:, :, :horizon], gt[:, :horizon], valid[:, :horizon]
    if not valid.any(axis=1).all():
        raise ValueError("every evaluated scene needs at least one valid future step")
    err = np.linalg.norm(traj - gt[:, None], axis=-1)  # S, K, T
    w = valid[:, None, :].astype(np.float64)
    ade = (err * w).sum(-1) / w.sum(-1)
    last = valid.shape[1] - 1 - np.argmax(valid[:, ::-1], axis=1)
    fde = np.take_along_axis(err, last[:, None, None], axis=2)[..., 0]
    min_fde = fde.min(axis=1)
    k_end = fde.argmin(axis=1)
    p = conf[np.arange(len(conf)), k_end]
    brier = min_fde + (1.0 - p) ** 2
    return MetricsReport(
        minADE=float(ade.min(axis=1).mean()),
        minFDE=float(min_fde.mean()),
        MR=float((min_fde > miss_threshold).mean()),
        brier_minFDE=float(brier.mean()),
        n_scenes=int(traj.shape[0]),
    )
