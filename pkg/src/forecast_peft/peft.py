"""Prompts, parallel adapters, LoRA, trainability plans, counting, and plug-ins.

Parameter naming is the contract everything else keys on:

* ``peft.cep``            deep encoder prompts, ``(depth, N_P, C)``
* ``peft.mcp``            decoder mode prompts, ``(K, N_P, C)``
* ``peft.confidence.*``   per-mode confidence logit head
* ``<layer>.attn_adapter.*`` / ``<layer>.ffn_adapter.*``  parallel adapters
* ``<linear>.lora_a`` / ``<linear>.lora_b``               low-rank bypasses
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .config import MODES, PeftConfig
from .errors import CheckpointError, ConfigError, DataError
from .io import read_container, write_container
from .params import Model, add_linear, backbone_hash, is_added, xavier_uniform
from .tensor import Tensor

PLUGIN_MAGIC = b"FPPL"
ADDITIVE_GROUPS = ("cep", "mcp", "adapters")


# -- forward pieces -----------------------------------------------------------------
def adapter_forward(x: Tensor, p: dict, prefix: str) -> Tensor:
    """``Up(GeLU(Down(x)))``; the host layer adds this next to its sublayer."""
    h = tn.gelu(tn.linear(x, p[f"{prefix}.down.weight"], p[f"{prefix}.down.bias"]))
    return tn.linear(h, p[f"{prefix}.up.weight"], p[f"{prefix}.up.bias"])


def apply_cep(layer_index: int, tokens: Tensor, cep: Tensor) -> Tensor:
    """Prepend this layer's prompts to ``tokens[B, L, C]`` (which must carry no prompts)."""
    if layer_index >= cep.shape[0]:
        raise ValueError(f"layer {layer_index} has no prompts (depth {cep.shape[0]})")
    B, _, C = tokens.shape
    prompts = tn.broadcast_to(cep[layer_index], (B, cep.shape[1], C))
    return tn.concat([prompts, tokens], axis=1)


def apply_mcp(decoder, latents, future_queries, model: Model, mode_k: int):
    """Decode the future queries with mode ``k``'s prompt set at the first decoder layer."""
    mcp = model.get("peft.mcp")
    K = model.config.K
    if not 0 <= mode_k < K:
        raise ValueError(f"mode {mode_k} out of range for K={K}")
    prompts = None if mcp is None else mcp[mode_k]
    return decoder(latents, future_queries, model, prompts)


# -- attaching modules ------------------------------------------------------------------
def _layer_prefixes(model: Model, which: str = "all") -> list[str]:
    cfg = model.config
    enc = [f"encoder.layers.{i}" for i in range(cfg.enc_layers)]
    dec = [f"decoder.layers.{i}" for i in range(cfg.dec_layers)]
    return {"encoder": enc, "decoder": dec, "all": enc + dec}[which]


def add_adapters(model: Model, rank: int, msa: bool = True, ffn: bool = True) -> None:
    """Zero-initialized bottleneck adapters next to each MSA and/or FFN sublayer."""
    C = model.config.C
    rng = np.random.default_rng(0)
    for prefix in _layer_prefixes(model):
        for site, on in (("attn_adapter", msa), ("ffn_adapter", ffn)):
            if on:
                add_linear(model.params, f"{prefix}.{site}.down", C, rank, rng, zero=True)
                add_linear(model.params, f"{prefix}.{site}.up", rank, C, rng, zero=True)


def remove_adapters(model: Model) -> None:
    for name in [n for n in model.params if "adapter." in n]:
        del model.params[name]


def add_prompts(model: Model, cfg: PeftConfig, rng: np.random.Generator) -> None:
    C, K = model.config.C, model.config.K
    n = cfg.prompt_length
    if cfg.cep_depth > model.config.enc_layers:
        raise ConfigError(f"cep_depth {cfg.cep_depth} exceeds encoder depth {model.config.enc_layers}")
    if cfg.cep_depth > 0:
        model.params["peft.cep"] = Tensor(xavier_uniform(rng, n, C, (cfg.cep_depth, n, C)), requires_grad=True)
    if cfg.mcp_enabled:
        model.params["peft.mcp"] = Tensor(xavier_uniform(rng, n, C, (K, n, C)), requires_grad=True)
    add_linear(model.params, "peft.confidence", C, 1, rng)


def lora_inject(model: Model, linear_name: str, rank: int, rng: np.random.Generator | None = None) -> None:
    """Add a low-rank bypass ``x @ A @ B`` to ``linear_name``; B starts at zero."""
    if rank < 1:
        raise ConfigError(f"LoRA rank must be >= 1, got {rank}")
    weight = model.params.get(f"{linear_name}.weight")
    if weight is None:
        raise KeyError(f"no linear layer named {linear_name!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    fan_in, fan_out = weight.shape
    a = rng.normal(0.0, 1.0 / rank, size=(fan_in, rank)).astype(np.float32)
    model.params[f"{linear_name}.lora_a"] = Tensor(a, requires_grad=True)
    model.params[f"{linear_name}.lora_b"] = Tensor(np.zeros((rank, fan_out), np.float32), requires_grad=True)


def inject_lora_layers(model: Model, cfg: PeftConfig, rng: np.random.Generator) -> None:
    for prefix in _layer_prefixes(model, cfg.lora_layers):
        for target in cfg.lora_targets:
            lora_inject(model, f"{prefix}.attn.{target}", cfg.lora_rank, rng)


# -- trainability -----------------------------------------------------------------------
def param_group(name: str) -> str:
    """Accounting group of a parameter name; every name maps to exactly one group."""
    if name.startswith("peft.cep"):
        return "cep"
    if name.startswith("peft.mcp"):
        return "mcp"
    if name.startswith("peft.confidence"):
        return "confidence"
    if "adapter." in name:
        return "adapters"
    if ".lora_" in name:
        return "lora"
    if name.startswith("md."):
        return "md_head"
    if name.startswith("head.future"):
        return "head"
    if name.startswith("head."):
        return "recon_heads"
    if "norm" in name:
        return "layer_norm"
    if name.endswith(".bias"):
        return "bias"
    if name.startswith("mask_token"):
        return "mask_tokens"
    if name.startswith("embed."):
        return "embedders"
    return "backbone"


@dataclass(frozen=True)
class TrainabilityPlan:
    mode: str
    trainable: frozenset = field(default_factory=frozenset)

    def is_trainable(self, name: str) -> bool:
        return name in self.trainable


def trainable_groups(mode: str, cfg: PeftConfig | None = None) -> set[str] | None:
    """Groups unfrozen in ``mode``; None means every parameter."""
    cfg = cfg or PeftConfig()
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode in ("pretrain", "full_ft"):
        return None
    if mode == "head_only":
        return {"md_head"}
    if mode == "lora":
        return {"lora", "md_head"}
    groups = {"cep", "mcp", "adapters", "confidence"}
    if mode == "peft":
        if cfg.unfreeze_bias:
            groups.add("bias")
        if cfg.unfreeze_layer_norm:
            groups.add("layer_norm")
        if cfg.unfreeze_head:
            groups.add("head")
    return groups


def make_plan(model: Model, mode: str, cfg: PeftConfig | None = None) -> TrainabilityPlan:
    groups = trainable_groups(mode, cfg)
    names = [n for n in model.params if groups is None or param_group(n) in groups]
    return TrainabilityPlan(mode, frozenset(names))


def apply_plan(model: Model, plan: TrainabilityPlan) -> None:
    model.set_trainable(plan.trainable)
    model.mode = plan.mode


def count_parameters(model: Model, plan: TrainabilityPlan | None = None) -> dict:
    """Exact parameter counts, total and trainable, with a per-group breakdown."""
    groups: dict[str, dict[str, int]] = {}
    total = trainable = 0
    for name, p in model.params.items():
        g = groups.setdefault(param_group(name), {"total": 0, "trainable": 0})
        n = int(p.data.size)
        on = plan.is_trainable(name) if plan is not None else p.requires_grad
        g["total"] += n
        total += n
        if on:
            g["trainable"] += n
            trainable += n
    additive = sum(groups.get(g, {"total": 0})["total"] for g in ADDITIVE_GROUPS)
    return {"total": total, "trainable": trainable, "additive": additive,
            "groups": dict(sorted(groups.items()))}


# -- plug-ins ----------------------------------------------------------------------------
@dataclass
class PluginCheckpoint:
    """Trainable-parameter diff that turns a pretrained backbone into a finetuned model."""

    backbone_hash: bytes
    mode: str
    peft: dict
    params: dict  # name -> float32 array

    @property
    def n_params(self) -> int:
        return int(sum(a.size for a in self.params.values()))


def plugin_save(finetuned: Model, pretrained: Model) -> PluginCheckpoint:
    """Collect every trainable parameter of ``finetuned`` after checking the frozen ones."""
    if finetuned.config != pretrained.config:
        raise CheckpointError("finetuned and pretrained models have different backbone configs")
    for name in pretrained.params:
        if name not in finetuned.params:
            raise CheckpointError(f"finetuned model lacks pretrained parameter {name}")
        if not finetuned.params[name].requires_grad and not np.array_equal(
                finetuned.params[name].data, pretrained.params[name].data):
            raise CheckpointError(f"frozen parameter {name} drifted from the pretrained value")
    params = {n: p.data.astype(np.float32).copy() for n, p in finetuned.params.items() if p.requires_grad}
    return PluginCheckpoint(backbone_hash(pretrained), finetuned.mode,
                            finetuned.peft.to_dict() if finetuned.peft else {}, params)


def plugin_load(plugin: PluginCheckpoint, pretrained: Model) -> Model:
    """Apply a plug-in to a pristine copy of the pretrained model."""
    if backbone_hash(pretrained) != plugin.backbone_hash:
        raise CheckpointError("plug-in was trained on a different backbone (content hash mismatch)")
    model = pretrained.clone()
    for name in model.params:
        model.params[name].requires_grad = False
    for name, arr in plugin.params.items():
        if name in model.params and model.params[name].shape != arr.shape:
            raise CheckpointError(f"shape mismatch for {name}: {model.params[name].shape} vs {arr.shape}")
        model.params[name] = Tensor(arr.copy(), requires_grad=True)
    model.mode = plugin.mode
    model.peft = PeftConfig.from_dict(plugin.peft) if plugin.peft else None
    return model


def strip_plugin(model: Model, pretrained: Model) -> Model:
    """Remove added modules and restore unfrozen pretrained parameters.

    Raises if any frozen pretrained parameter no longer matches, which is the
    case after full fine-tuning.
    """
    out = Model(model.config, {}, None, "pretrain")
    for name, p in model.params.items():
        if is_added(name):
            continue
        base = pretrained.params[name]
        if not p.requires_grad and not np.array_equal(p.data, base.data):
            raise CheckpointError(f"frozen parameter {name} was modified; no plug-in to strip")
        out.params[name] = Tensor(base.data.copy(), requires_grad=True)
    return out


def write_plugin(path, plugin: PluginCheckpoint) -> None:
    meta = json.dumps({"mode": plugin.mode, "peft": plugin.peft}).encode()
    header = plugin.backbone_hash + struct.pack("<I", len(meta)) + meta
    records = [header]
    for name, arr in plugin.params.items():
        key = name.encode()
        dims = struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape)
        records.append(struct.pack("<H", len(key)) + key + dims
                       + np.ascontiguousarray(arr, dtype="<f4").tobytes())
    write_container(path, PLUGIN_MAGIC, records)


def read_plugin(path) -> PluginCheckpoint:
    records = read_container(path, PLUGIN_MAGIC)
    if not records:
        raise DataError(f"{path}: empty plug-in file")
    head = records[0]
    digest = head[:32]
    (n_meta,) = struct.unpack("<I", head[32:36])
    meta = json.loads(head[36:36 + n_meta].decode())
    params = {}
    for rec in records[1:]:
        (n_key,) = struct.unpack("<H", rec[:2])
        name = rec[2:2 + n_key].decode()
        pos = 2 + n_key
        (ndim,) = struct.unpack("<B", rec[pos:pos + 1])
        shape = struct.unpack(f"<{ndim}I", rec[pos + 1:pos + 1 + 4 * ndim])
        pos += 1 + 4 * ndim
        params[name] = np.frombuffer(rec[pos:], dtype="<f4").reshape(shape).astype(np.float32)
    return PluginCheckpoint(digest, meta["mode"], meta["peft"], params)


def plugin_file_param_count(path) -> int:
    return read_plugin(path).n_params


__all__ = [
    "adapter_forward", "apply_cep", "apply_mcp", "add_adapters", "remove_adapters", "add_prompts",
    "lora_inject", "inject_lora_layers", "param_group", "TrainabilityPlan", "trainable_groups",
    "make_plan", "apply_plan", "count_parameters", "PluginCheckpoint", "plugin_save", "plugin_load",
    "strip_plugin", "write_plugin", "read_plugin", "plugin_file_param_count",
]
