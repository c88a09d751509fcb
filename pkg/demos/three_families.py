"""
ResNet, Neural-ODE and Neural-GODE side by side
===============================================

The three models share the downsampling stack and the classifier head and
differ in the core. Two exact relationships tie them together.
"""

import numpy as np

from gode import autodiff as ad
from gode.models import ModelSpec, build, set_parameters, state_dict
from gode.odeint import SolverConfig

x = np.random.default_rng(0).uniform(size=(4, 1, 28, 28))

# 1. a degree-0 spline with one control point is a Neural-ODE without the time channel
gode = build(ModelSpec(family="gode", width=8, k=0, n=1), seed=3)
node = build(ModelSpec(family="node", width=8, time_channel=False), seed=3)
with ad.no_grad():
    print("GODE(k=0, n=1) vs NODE max diff:", np.abs(gode(x).data - node(x).data).max())

# 2. with n=20 piecewise-constant kernels and 20 Euler steps of 0.05, step j uses
#    kernel j, which is a 20-block ResNet whose residuals are scaled by 0.05
gode = build(ModelSpec(family="gode", width=8, k=0, n=20, solver=SolverConfig("euler", 0, 1, 0.05)), seed=1)
rng = np.random.default_rng(1)
for p in gode.core.parameters():
    p.data = rng.normal(scale=0.3, size=p.shape)
resnet = build(ModelSpec(family="resnet", width=8, num_blocks=20, h_scale=0.05), seed=2)
src, dst = state_dict(gode), {}
for name in state_dict(resnet):
    if name.startswith("core."):
        _, block, stage, rest = name.split(".", 3)
        dst[name] = src[f"core.{stage}.conv.control_kernel.{block}" if rest == "conv.kernel" else f"core.{stage}.{rest}"]
    else:
        dst[name] = src[name]
set_parameters(resnet, dst)
with ad.no_grad():
    a, b = gode(x).data, resnet(x).data
print("GODE(k=0, n=20) vs 20-block ResNet relative diff:", np.linalg.norm(a - b) / np.linalg.norm(a))
