"""Pre-norm transformer encoder/decoder, reconstruction heads, and L_RE.

The decoder is self-attention over ``concat(latents, queries)``; only the
query positions are returned. Layers pick up parallel adapters and LoRA
bypasses automatically when their parameters are present in the store.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .config import BackboneConfig, LossWeights
from .embed import (FUTURE, HISTORY, LANE, ReconTargets, TokenBatch, build_pretrain_tokens,
                    init_embedder_params)
from .params import Model, add_layer_norm, add_linear
from .peft import adapter_forward, apply_cep
from .scene import Scene, collate, collate_plans, complementary_mask
from .tensor import Tensor


def init_layer(params: dict, prefix: str, C: int, ffn_mult: int, rng: np.random.Generator) -> None:
    add_layer_norm(params, f"{prefix}.norm1", C)
    for proj in ("q", "k", "v", "out"):
        add_linear(params, f"{prefix}.attn.{proj}", C, C, rng)
    add_layer_norm(params, f"{prefix}.norm2", C)
    add_linear(params, f"{prefix}.ffn.fc1", C, ffn_mult * C, rng)
    add_linear(params, f"{prefix}.ffn.fc2", ffn_mult * C, C, rng)


def layer_names(cfg: BackboneConfig) -> list[str]:
    return ([f"encoder.layers.{i}" for i in range(cfg.enc_layers)]
            + [f"decoder.layers.{i}" for i in range(cfg.dec_layers)])


def build_model(cfg: BackboneConfig, seed: int = 0) -> Model:
    """Freshly initialized pretraining model with every parameter trainable."""
    rng = np.random.default_rng(seed)
    params = init_embedder_params(cfg, rng)
    for prefix in layer_names(cfg):
        init_layer(params, prefix, cfg.C, cfg.ffn_mult, rng)
    add_layer_norm(params, "encoder.norm", cfg.C)
    add_layer_norm(params, "decoder.norm", cfg.C)
    add_linear(params, "head.history", cfg.C, cfg.H * 2, rng)
    add_linear(params, "head.future", cfg.C, cfg.T * 2, rng)
    add_linear(params, "head.lane", cfg.C, cfg.P * 2, rng)
    return Model(cfg, params)


# -- layers ----------------------------------------------------------------------
def _proj(h: Tensor, p: dict, name: str) -> Tensor:
    out = tn.linear(h, p[f"{name}.weight"], p[f"{name}.bias"])
    lora_a = p.get(f"{name}.lora_a")
    if lora_a is not None:
        out = out + tn.matmul(tn.matmul(h, lora_a), p[f"{name}.lora_b"])
    return out


def self_attention(h: Tensor, p: dict, prefix: str, heads: int, key_padding_mask: np.ndarray | None) -> Tensor:
    q = _proj(h, p, f"{prefix}.q")
    k = _proj(h, p, f"{prefix}.k")
    v = _proj(h, p, f"{prefix}.v")
    ctx = tn.attention(q, k, v, heads, key_padding_mask)
    return _proj(ctx, p, f"{prefix}.out")


def transformer_layer(x: Tensor, key_padding_mask: np.ndarray | None, p: dict, prefix: str, heads: int) -> Tensor:
    """``x + MSA(LN(x)) [+ Adapter(LN(x))]`` then the same around the FFN."""
    h = tn.layer_norm(x, p[f"{prefix}.norm1.weight"], p[f"{prefix}.norm1.bias"])
    x = x + self_attention(h, p, f"{prefix}.attn", heads, key_padding_mask)
    if f"{prefix}.attn_adapter.down.weight" in p:
        x = x + adapter_forward(h, p, f"{prefix}.attn_adapter")
    h = tn.layer_norm(x, p[f"{prefix}.norm2.weight"], p[f"{prefix}.norm2.bias"])
    f = tn.linear(tn.gelu(tn.linear(h, p[f"{prefix}.ffn.fc1.weight"], p[f"{prefix}.ffn.fc1.bias"])),
                  p[f"{prefix}.ffn.fc2.weight"], p[f"{prefix}.ffn.fc2.bias"])
    x = x + f
    if f"{prefix}.ffn_adapter.down.weight" in p:
        x = x + adapter_forward(h, p, f"{prefix}.ffn_adapter")
    return x


def encoder_forward(tokens: TokenBatch, model: Model, cep: Tensor | None = None) -> TokenBatch:
    """Run the encoder stack; ``cep`` is ``(depth, N_P, C)`` deep prompts or None."""
    p, cfg = model.params, model.config
    x = tokens.tokens
    B = x.shape[0]
    depth = 0 if cep is None else cep.shape[0]
    n_prompt = 0
    for i in range(cfg.enc_layers):
        if i < depth and cep.shape[1] > 0:
            x = apply_cep(i, x[:, n_prompt:], cep)
            n_prompt = cep.shape[1]
        pad = np.concatenate([np.zeros((B, n_prompt), bool), ~tokens.valid], axis=1)
        x = transformer_layer(x, pad, p, f"encoder.layers.{i}", cfg.heads)
    if n_prompt:
        x = x[:, n_prompt:]
    x = tn.layer_norm(x, p["encoder.norm.weight"], p["encoder.norm.bias"])
    return TokenBatch(x, tokens.kinds, tokens.index, tokens.valid, tokens.positions)


def decoder_forward(latents: TokenBatch, queries: TokenBatch, model: Model,
                    prompts: Tensor | None = None) -> TokenBatch:
    """Self-attention over ``concat(prompts, latents, queries)``; returns the queries.

    ``prompts`` (``[N_P, C]`` or ``[B, N_P, C]``) enter at the first layer only
    and then travel through later layers as ordinary tokens.
    """
    if len(queries) == 0:
        raise ValueError("decoder needs at least one query")
    p, cfg = model.params, model.config
    B = latents.tokens.shape[0]
    parts = [latents.tokens, queries.tokens]
    valid = [latents.valid, queries.valid]
    if prompts is not None and prompts.shape[-2] > 0:
        C = prompts.shape[-1]
        n_p = prompts.shape[-2]
        parts.insert(0, tn.broadcast_to(prompts, (B, n_p, C)))
        valid.insert(0, np.ones((B, n_p), bool))
    x = tn.concat(parts, axis=1)
    pad = ~np.concatenate(valid, axis=1)
    for i in range(cfg.dec_layers):
        x = transformer_layer(x, pad, p, f"decoder.layers.{i}", cfg.heads)
    n_q = len(queries)
    x = x[:, x.shape[1] - n_q:]
    x = tn.layer_norm(x, p["decoder.norm.weight"], p["decoder.norm.bias"])
    return TokenBatch(x, queries.kinds, queries.index, queries.valid, queries.positions)


# -- heads and loss -----------------------------------------------------------------
@dataclass
class ReconPredictions:
    history: Tensor  # (B, A, H, 2)
    future: Tensor   # (B, A, T, 2)
    lane: Tensor     # (B, M, P, 2)


def reconstruction_heads(decoded: TokenBatch, model: Model) -> ReconPredictions:
    """Route decoded queries to the history, future, or lane head by kind.

    Agent slots come first, lane slots after them. Both trajectory heads are
    evaluated on agent slots; the loss weights select the right one.
    """
    kinds = decoded.kinds
    known = (kinds == HISTORY) | (kinds == FUTURE) | (kinds == LANE)
    if not known[decoded.valid].all():
        bad = sorted(set(kinds[decoded.valid & ~known].tolist()))
        raise ValueError(f"decoded tokens with unknown kind(s) {bad}")
    n_lane_cols = int((kinds[0] == LANE).sum())
    A = kinds.shape[1] - n_lane_cols
    p, cfg = model.params, model.config
    x = decoded.tokens
    B = x.shape[0]
    agents, lanes = x[:, :A], x[:, A:]
    hist = tn.linear(agents, p["head.history.weight"], p["head.history.bias"]).reshape(B, A, cfg.H, 2)
    fut = tn.linear(agents, p["head.future.weight"], p["head.future.bias"]).reshape(B, A, cfg.T, 2)
    lane = tn.linear(lanes, p["head.lane.weight"], p["head.lane.bias"]).reshape(B, n_lane_cols, cfg.P, 2)
    return ReconPredictions(hist, fut, lane)


def _masked_mean(diff: Tensor, weight: np.ndarray) -> Tensor:
    """Mean of ``diff`` over coordinates of weighted steps; zero when nothing is weighted."""
    total = float(weight.sum())
    if total == 0.0:
        return Tensor(np.zeros((), dtype=diff.dtype))
    w = np.asarray(weight, dtype=diff.dtype)[..., None]
    return (diff * w).sum() * (1.0 / (2.0 * total))


def loss_reconstruction(pred: ReconPredictions, targets: ReconTargets,
                        weights: LossWeights | None = None) -> tuple[Tensor, dict]:
    """L1 on masked trajectories, MSE on masked lanes, weighted sum."""
    weights = weights or LossWeights()
    l_h = _masked_mean(tn.tabs(pred.history - targets.history), targets.history_weight)
    l_f = _masked_mean(tn.tabs(pred.future - targets.future), targets.future_weight)
    d_l = pred.lane - targets.lane
    l_l = _masked_mean(d_l * d_l, targets.lane_weight)
    total = l_h * weights.history + l_f * weights.future + l_l * weights.lane
    return total, {"history": l_h.item(), "future": l_f.item(), "lane": l_l.item()}


def pretrain_forward(batch, history_masked: np.ndarray, lane_masked: np.ndarray, model: Model,
                     weights: LossWeights | None = None) -> tuple[Tensor, dict]:
    """Masked reconstruction loss for an already-collated batch."""
    visible, queries, targets = build_pretrain_tokens(batch, history_masked, lane_masked, model.params)
    latents = encoder_forward(visible, model)
    decoded = decoder_forward(latents, queries, model)
    return loss_reconstruction(reconstruction_heads(decoded, model), targets, weights)


def sample_masks(scenes: list[Scene], rng: np.random.Generator, mask_ratio_agents: float = 0.5,
                 mask_ratio_lanes: float = 0.5):
    return [complementary_mask(s, mask_ratio_agents, mask_ratio_lanes, rng) for s in scenes]


def pretrain_step(scenes: list[Scene], model: Model, rng: np.random.Generator,
                  weights: LossWeights | None = None, mask_ratio_agents: float = 0.5,
                  mask_ratio_lanes: float = 0.5) -> Tensor:
    """One masked-reconstruction pass; leaves gradients on trainable parameters."""
    batch = collate(scenes)
    plans = sample_masks(scenes, rng, mask_ratio_agents, mask_ratio_lanes)
    hm, lm = collate_plans(plans, batch)
    model.zero_grad()
    loss, _ = pretrain_forward(batch, hm, lm, model, weights)
    loss.backward()
    return loss


__all__ = [
    "build_model", "encoder_forward", "decoder_forward", "reconstruction_heads", "loss_reconstruction",
    "pretrain_forward", "pretrain_step", "transformer_layer", "self_attention", "ReconPredictions",
    "layer_names", "sample_masks",
]
