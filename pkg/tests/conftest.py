import numpy as np
import pytest

from forecast_peft.backbone import build_model
from forecast_peft.config import desk_backbone
from forecast_peft.scene import desk_profile, generate_synthetic


@pytest.fixture(scope="session")
def desk_scenes():
    return generate_synthetic(0, 16, desk_profile())


@pytest.fixture
def desk_model():
    return build_model(desk_backbone(), seed=0)


@pytest.fixture
def tiny_cfg():
    return desk_backbone(C=8, heads=2, enc_layers=2, dec_layers=1, K=2)


def projected(fn, seed=0):
    """Wrap ``fn`` so its output is contracted with fixed random weights.

    A plain sum would hide errors in ops whose outputs sum to a constant.
    """
    cache = {}

    def wrapped(*xs):
        out = fn(*xs)
        if "w" not in cache:
            cache["w"] = np.random.default_rng(seed).normal(size=out.shape)
        return out * cache["w"]

    return wrapped


def param_gradcheck(model, loss_fn, names, n_entries=6, h=1e-3, seed=0):
    """Norm-wise relative error between backprop and central differences.

    Checks ``n_entries`` random coordinates of each named parameter. The
    model should hold float64 parameters.
    """
    rng = np.random.default_rng(seed)
    model.zero_grad()
    loss_fn().backward()
    analytic, numeric = [], []
    for name in names:
        p = model.params[name]
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = rng.choice(p.data.size, size=min(n_entries, p.data.size), replace=False)
        for i in flat:
            idx = np.unravel_index(i, p.data.shape)
            old = p.data[idx]
            p.data[idx] = old + h
            up = loss_fn().item()
            p.data[idx] = old - h
            down = loss_fn().item()
            p.data[idx] = old
            analytic.append(grad[idx])
            numeric.append((up - down) / (2 * h))
    analytic, numeric = np.array(analytic), np.array(numeric)
    return float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12))


# parameters downstream of the lane max-pool, where finite differences are valid
DOWNSTREAM = [
    "mask_token.history", "mask_token.future", "mask_token.lane", "embed.kind.weight",
    "embed.pos.0.weight", "embed.history.stage0.weight", "embed.future.output.bias", "embed.lane.out1.weight",
    "encoder.layers.0.attn.q.weight", "encoder.layers.1.ffn.fc1.weight", "encoder.layers.0.norm1.weight",
    "encoder.norm.bias", "decoder.layers.0.attn.v.weight", "decoder.layers.0.ffn.fc2.bias",
    "decoder.norm.weight", "head.history.weight", "head.future.weight", "head.lane.bias",
]
