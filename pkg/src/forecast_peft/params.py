"""Named parameter store shared by every model component."""
from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .config import BackboneConfig, PeftConfig
from .tensor import Tensor

# parameters that never exist in a pretrained model
ADDED_PREFIXES = ("peft.", "md.")
ADDED_MARKERS = ("adapter.", ".lora_")


def is_added(name: str) -> bool:
    return name.startswith(ADDED_PREFIXES) or any(m in name for m in ADDED_MARKERS)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def add_linear(params: dict, name: str, fan_in: int, fan_out: int, rng: np.random.Generator,
               zero: bool = False) -> None:
    """Register ``name.weight`` (in, out) and ``name.bias`` (out,)."""
    if zero:
        w = np.zeros((fan_in, fan_out), dtype=np.float32)
    else:
        w = xavier_uniform(rng, fan_in, fan_out, (fan_in, fan_out))
    params[f"{name}.weight"] = Tensor(w, requires_grad=True)
    params[f"{name}.bias"] = Tensor(np.zeros(fan_out, dtype=np.float32), requires_grad=True)


def add_layer_norm(params: dict, name: str, dim: int) -> None:
    params[f"{name}.weight"] = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
    params[f"{name}.bias"] = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)


@dataclass
class Model:
    """Architecture config plus an ordered name -> Tensor parameter store.

    A parameter's ``requires_grad`` flag is its trainability flag.
    """

    config: BackboneConfig
    params: dict = field(default_factory=dict)
    peft: PeftConfig | None = None
    mode: str = "pretrain"

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def get(self, name: str) -> Tensor | None:
        return self.params.get(name)

    def names(self) -> list[str]:
        return list(self.params)

    def trainable_names(self) -> list[str]:
        return [n for n, p in self.params.items() if p.requires_grad]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def clone(self) -> "Model":
        """Deep copy of values and flags; gradients are dropped."""
        params = {}
        for name, p in self.params.items():
            params[name] = Tensor(p.data.copy(), requires_grad=p.requires_grad)
        return Model(self.config, params, copy.deepcopy(self.peft), self.mode)

    def astype(self, dtype) -> "Model":
        out = self.clone()
        for p in out.params.values():
            p.data = p.data.astype(dtype)
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.params.items()}

    def set_trainable(self, names) -> None:
        names = set(names)
        for n, p in self.params.items():
            p.requires_grad = n in names

    def base_names(self) -> list[str]:
        """Names of parameters that belong to the pretrained model."""
        return [n for n in self.params if not is_added(n)]


def content_hash(params: dict, names=None) -> bytes:
    """SHA-256 over sorted names, shapes, and raw bytes."""
    h = hashlib.sha256()
    for name in sorted(names if names is not None else params):
        arr = np.ascontiguousarray(params[name].data, dtype=np.float32)
        h.update(name.encode())
        h.update(np.asarray(arr.shape, dtype=np.int64).tobytes())
        h.update(arr.tobytes())
    return h.digest()


def backbone_hash(model: Model) -> bytes:
    return content_hash(model.params, model.base_names())
