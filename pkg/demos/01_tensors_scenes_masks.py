# A quick tour: the autodiff core, a synthetic scene, and complementary masking.
import numpy as np

from forecast_peft import tensor as tn
from forecast_peft.tensor import Tensor, gradcheck
from forecast_peft.scene import collate, complementary_mask, desk_profile, generate_synthetic

# reverse-mode autodiff on numpy arrays
x = Tensor(np.array([[1.0, -2.0], [0.5, 3.0]]), requires_grad=True)
y = tn.tanh(x * x).sum()
y.backward()
print("loss", y.item())
print("grad", x.grad)  # 2x * (1 - tanh(x^2)^2)

# finite differences agree
print("gradcheck", gradcheck(lambda a: tn.gelu(a) * a, [np.random.default_rng(0).normal(size=(3, 4))]))

# one desk-sized scene: a few agents on a small road graph
scenes = generate_synthetic(seed=0, n_scenes=4, profile=desk_profile())
s = scenes[0]
print("agents", len(s.agents), "lanes", len(s.lanes))
print("target history shape", s.target.history.shape, "future shape", s.target.future.shape)

# every agent masks exactly one of history / future
plan = complementary_mask(s, 0.5, 0.5, np.random.default_rng(1))
print("history masked", plan.history_masked.astype(int))
print("future masked ", plan.future_masked.astype(int))
print("lanes masked  ", plan.lane_masked.astype(int))

batch = collate(scenes)
print("batch history", batch.history.shape, "lanes", batch.lanes.shape)
