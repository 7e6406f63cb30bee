"""Scene -> token embeddings.

Trajectories go through a small feature-pyramid 1-D conv stack, lanes through
a PointNet-style shared MLP with masked max-pooling. Every scene token gets a
learned positional embedding of its 2-D reference point plus a per-kind
semantic embedding. Masked elements are represented by learned mask tokens.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .config import BackboneConfig
from .errors import DataError
from .params import add_linear
from .scene import SceneBatch
from .tensor import Tensor

HISTORY, FUTURE, LANE, PROMPT, MASK = 0, 1, 2, 3, 4
KIND_NAMES = {HISTORY: "history", FUTURE: "future", LANE: "lane", PROMPT: "prompt", MASK: "mask"}

FPN_STAGES = 3
FPN_KERNEL = 3


@dataclass
class TokenBatch:
    """Padded token sequences ``tokens[B, L, C]`` with per-token metadata."""

    tokens: Tensor
    kinds: np.ndarray      # (B, L) int
    index: np.ndarray      # (B, L) agent or lane index, -1 for prompts
    valid: np.ndarray      # (B, L) bool
    positions: np.ndarray  # (B, L, 2)

    def __len__(self) -> int:
        return self.tokens.shape[1]

    def count(self) -> np.ndarray:
        """Number of valid tokens per scene."""
        return self.valid.sum(axis=1)


@dataclass
class ReconTargets:
    """Normalized reconstruction targets with per-step loss weights.

    Trajectories are relative to the agent's last observed position, lanes to
    their centroid. A weight is 1 only for valid steps of masked elements.
    """

    history: np.ndarray
    history_weight: np.ndarray
    future: np.ndarray
    future_weight: np.ndarray
    lane: np.ndarray
    lane_weight: np.ndarray


def init_embedder_params(cfg: BackboneConfig, rng: np.random.Generator) -> dict:
    C = cfg.C
    params: dict = {}
    for seg in ("history", "future"):
        pre = f"embed.{seg}"
        add_linear(params, f"{pre}.input", 3, C, rng)
        for s in range(FPN_STAGES):
            add_linear(params, f"{pre}.stage{s}", FPN_KERNEL * C, C, rng)
            add_linear(params, f"{pre}.lateral{s}", C, C, rng)
        add_linear(params, f"{pre}.output", C, C, rng)
    add_linear(params, "embed.lane.point1", 3, C, rng)
    add_linear(params, "embed.lane.point2", C, C, rng)
    add_linear(params, "embed.lane.out1", C, C, rng)
    add_linear(params, "embed.lane.out2", C, C, rng)
    add_linear(params, "embed.pos.0", 2, C, rng)
    add_linear(params, "embed.pos.1", C, C, rng)
    params["embed.kind.weight"] = Tensor(rng.normal(0, 0.02, (3, C)).astype(np.float32), requires_grad=True)
    for kind in ("history", "future", "lane"):
        params[f"mask_token.{kind}"] = Tensor(rng.normal(0, 0.02, C).astype(np.float32), requires_grad=True)
    return params


def _lin(x: Tensor, p: dict, name: str) -> Tensor:
    return tn.linear(x, p[f"{name}.weight"], p[f"{name}.bias"])


# -- trajectory embedder ----------------------------------------------------------
def trajectory_features(positions: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Per-step ``(dx, dy, valid)`` where ``d`` is the offset from the previous valid step.

    The first valid step and all invalid steps get zero displacement.
    """
    positions = np.asarray(positions, dtype=np.float32)
    valid = np.asarray(valid, dtype=bool)
    S = valid.shape[-1]
    steps = np.broadcast_to(np.arange(S), valid.shape)
    last = np.maximum.accumulate(np.where(valid, steps, -1), axis=-1)
    prev = np.concatenate([np.full(valid.shape[:-1] + (1,), -1), last[..., :-1]], axis=-1)
    has_prev = valid & (prev >= 0)
    prev_pos = np.take_along_axis(positions, np.maximum(prev, 0)[..., None], axis=-2)
    delta = np.where(has_prev[..., None], positions - prev_pos, 0.0).astype(np.float32)
    return np.concatenate([delta, valid[..., None].astype(np.float32)], axis=-1)


def fpn_embed(features: Tensor, p: dict, prefix: str) -> Tensor:
    """``features[N, S, 3]`` -> ``[N, C]``: strided conv pyramid, lateral fusion, mean-pool."""
    h = tn.gelu(_lin(features, p, f"{prefix}.input"))
    fused = None
    for s in range(FPN_STAGES):
        h = tn.gelu(tn.conv1d(h, p[f"{prefix}.stage{s}.weight"], p[f"{prefix}.stage{s}.bias"],
                              kernel=FPN_KERNEL, stride=2, padding=1))
        lateral = _lin(h, p, f"{prefix}.lateral{s}").mean(axis=1)
        fused = lateral if fused is None else fused + lateral
    return _lin(fused, p, f"{prefix}.output")


def embed_trajectory(positions, valid, params: dict, segment: str = "history",
                     expected_len: int | None = None) -> Tensor:
    """Embed one ``S x 2`` trajectory segment into a C-vector."""
    positions = np.asarray(positions)
    if expected_len is not None and len(positions) != expected_len:
        raise DataError(f"{segment} segment has {len(positions)} steps, expected {expected_len}")
    feats = trajectory_features(positions[None], np.asarray(valid)[None])
    return fpn_embed(Tensor(feats), params, f"embed.{segment}").reshape(-1)


def embed_trajectories(positions: np.ndarray, valid: np.ndarray, params: dict, segment: str) -> Tensor:
    """Batched form: ``positions[B, A, S, 2]`` -> ``[B, A, C]``."""
    B, A, S, _ = positions.shape
    feats = trajectory_features(positions.reshape(B * A, S, 2), valid.reshape(B * A, S))
    out = fpn_embed(Tensor(feats), params, f"embed.{segment}")
    return out.reshape(B, A, -1)


# -- lane embedder ------------------------------------------------------------------
def lane_features(points: np.ndarray, valid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Centered points plus valid flag, and the centroid of the valid points."""
    points = np.asarray(points, dtype=np.float32)
    valid = np.asarray(valid, dtype=bool)
    w = valid[..., None].astype(np.float32)
    n = np.maximum(w.sum(axis=-2, keepdims=True), 1.0)
    centroid = (points * w).sum(axis=-2, keepdims=True) / n
    centered = np.where(valid[..., None], points - centroid, 0.0).astype(np.float32)
    return np.concatenate([centered, w], axis=-1), centroid[..., 0, :]


def pointnet_embed(features: Tensor, valid: np.ndarray, p: dict) -> Tensor:
    """``features[N, P, 3]`` -> ``[N, C]`` with max-pooling over valid points only."""
    h = _lin(tn.gelu(_lin(features, p, "embed.lane.point1")), p, "embed.lane.point2")
    h = tn.where(valid[..., None], h, np.asarray(tn.MASK_VALUE, dtype=h.dtype))
    pooled = h.max(axis=1)
    return _lin(tn.gelu(_lin(pooled, p, "embed.lane.out1")), p, "embed.lane.out2")


def embed_lane(points, valid, params: dict) -> Tensor:
    """Embed one ``P x 2`` polyline into a C-vector."""
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise DataError("lane has no valid points")
    feats, _ = lane_features(points, valid)
    return pointnet_embed(Tensor(feats[None]), valid[None], params).reshape(-1)


def embed_lanes(points: np.ndarray, point_valid: np.ndarray, lane_valid: np.ndarray, params: dict) -> Tensor:
    """Batched form: ``points[B, M, P, 2]`` -> ``[B, M, C]``; empty lanes give zeros."""
    B, M, P, _ = points.shape
    feats, _ = lane_features(points, point_valid)
    pv = point_valid.reshape(B * M, P) | ~lane_valid.reshape(B * M, 1)
    out = pointnet_embed(Tensor(feats.reshape(B * M, P, 3)), pv, params).reshape(B, M, -1)
    return tn.where(lane_valid[..., None], out, np.asarray(0.0, dtype=out.dtype))


# -- positional and semantic ----------------------------------------------------------
def positional_embedding(points, params: dict) -> Tensor:
    """Two-layer MLP of a 2-D reference point (meters); accepts ``[..., 2]``."""
    points = np.asarray(points, dtype=params["embed.pos.0.weight"].dtype)
    x = Tensor(points.reshape(-1, 2) if points.ndim == 1 else points)
    out = _lin(tn.gelu(_lin(x, params, "embed.pos.0")), params, "embed.pos.1")
    return out.reshape(-1) if points.ndim == 1 else out


def kind_embedding(kinds: np.ndarray, params: dict) -> Tensor:
    return params["embed.kind.weight"][np.asarray(kinds)]


def _zero_invalid(x: Tensor, valid: np.ndarray) -> Tensor:
    return tn.where(valid[..., None], x, np.asarray(0.0, dtype=x.dtype))


def _mask_token(params: dict, kind: str) -> Tensor:
    return params[f"mask_token.{kind}"]


# -- token builders ------------------------------------------------------------------------
def build_pretrain_tokens(batch: SceneBatch, history_masked: np.ndarray, lane_masked: np.ndarray,
                          params: dict) -> tuple[TokenBatch, TokenBatch, ReconTargets]:
    """Visible tokens, mask queries, and reconstruction targets for one batch.

    Token layout is fixed: ``A`` agent slots then ``M`` lane slots. Each agent
    slot of the visible batch holds whichever of history/future is unmasked;
    the same slot in the query batch holds the mask token for the other half.
    """
    B, A = batch.agent_valid.shape
    M = batch.lane_valid.shape[1]
    hm = history_masked & batch.agent_valid
    fm = ~history_masked & batch.agent_valid
    lm = lane_masked & batch.lane_valid

    emb_h = embed_trajectories(batch.history, batch.history_valid, params, "history")
    emb_f = embed_trajectories(batch.future, batch.future_valid, params, "future")
    emb_l = embed_lanes(batch.lanes, batch.lane_point_valid, batch.lane_valid, params)
    agent_tok = tn.where(history_masked[..., None], emb_f, emb_h)
    agent_kind = np.where(history_masked, FUTURE, HISTORY)

    positions = np.concatenate([batch.agent_ref, batch.lane_centroid], axis=1)
    pe = positional_embedding(positions, params)
    vis_kinds = np.concatenate([agent_kind, np.full((B, M), LANE)], axis=1)
    vis_valid = np.concatenate([batch.agent_valid, batch.lane_valid & ~lane_masked], axis=1)
    vis = tn.concat([agent_tok, emb_l], axis=1) + kind_embedding(vis_kinds, params) + pe
    index = np.concatenate([np.broadcast_to(np.arange(A), (B, A)), np.broadcast_to(np.arange(M), (B, M))], axis=1)
    visible = TokenBatch(_zero_invalid(vis, vis_valid), vis_kinds, index, vis_valid, positions)

    q_agent = tn.where(history_masked[..., None], _mask_token(params, "history"), _mask_token(params, "future"))
    q_lane = tn.broadcast_to(_mask_token(params, "lane"), (B, M, params["mask_token.lane"].shape[0]))
    q = tn.concat([tn.broadcast_to(q_agent, (B, A, q_agent.shape[-1])), q_lane], axis=1) + pe
    q_kinds = np.concatenate([np.where(history_masked, HISTORY, FUTURE), np.full((B, M), LANE)], axis=1)
    q_valid = np.concatenate([batch.agent_valid, lm], axis=1)
    queries = TokenBatch(_zero_invalid(q, q_valid), q_kinds, index, q_valid, positions)

    ref = batch.agent_ref[:, :, None, :]
    hist_w = (batch.history_valid & hm[..., None]).astype(np.float32)
    fut_w = (batch.future_valid & fm[..., None]).astype(np.float32)
    lane_feats, _ = lane_features(batch.lanes, batch.lane_point_valid)
    lane_w = (batch.lane_point_valid & lm[..., None]).astype(np.float32)
    targets = ReconTargets(
        history=np.where(batch.history_valid[..., None], batch.history - ref, 0.0).astype(np.float32),
        history_weight=hist_w,
        future=np.where(batch.future_valid[..., None], batch.future - ref, 0.0).astype(np.float32),
        future_weight=fut_w,
        lane=lane_feats[..., :2],
        lane_weight=lane_w,
    )
    return visible, queries, targets


def build_finetune_tokens(batch: SceneBatch, params: dict) -> tuple[TokenBatch, TokenBatch]:
    """Encoder input (all histories and lanes) and one future query per agent."""
    B, A = batch.agent_valid.shape
    M = batch.lane_valid.shape[1]
    emb_h = embed_trajectories(batch.history, batch.history_valid, params, "history")
    emb_l = embed_lanes(batch.lanes, batch.lane_point_valid, batch.lane_valid, params)
    positions = np.concatenate([batch.agent_ref, batch.lane_centroid], axis=1)
    kinds = np.concatenate([np.full((B, A), HISTORY), np.full((B, M), LANE)], axis=1)
    valid = np.concatenate([batch.agent_valid, batch.lane_valid], axis=1)
    x = tn.concat([emb_h, emb_l], axis=1) + kind_embedding(kinds, params) + positional_embedding(positions, params)
    index = np.concatenate([np.broadcast_to(np.arange(A), (B, A)), np.broadcast_to(np.arange(M), (B, M))], axis=1)
    encoder_in = TokenBatch(_zero_invalid(x, valid), kinds, index, valid, positions)

    C = params["mask_token.future"].shape[0]
    q = tn.broadcast_to(_mask_token(params, "future"), (B, A, C)) + positional_embedding(batch.agent_ref, params)
    queries = TokenBatch(_zero_invalid(q, batch.agent_valid), np.full((B, A), FUTURE),
                         np.broadcast_to(np.arange(A), (B, A)).copy(), batch.agent_valid.copy(),
                         batch.agent_ref.copy())
    return encoder_in, queries
