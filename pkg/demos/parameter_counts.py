"""
Parameter counts of the CIFAR-10 configurations
===============================================

Counting is analytic. Each extra control point adds one 64x64x3x3 kernel per
dynamics layer and nothing else, so the count is affine in n and does not
depend on the spline degree.
"""

from gode.models import ModelSpec, count_params

cifar = dict(width=64, in_channels=3)

print("resnet (20 blocks):", count_params(ModelSpec(family="resnet", num_blocks=20, **cifar)))
print("node:              ", count_params(ModelSpec(family="node", **cifar)))

print("\n n   k   params")
for n in (2, 4, 6, 8):
    print(f"{n:2d}  {1:2d}  {count_params(ModelSpec(family='gode', n=n, k=1, **cifar)):8,d}")
for k in (2, 3, 4, 5):
    print(f"{8:2d}  {k:2d}  {count_params(ModelSpec(family='gode', n=8, k=k, **cifar)):8,d}")

print("\nlayers  params (n=8)")
for L in (1, 2, 3, 4):
    print(f"{L:6d}  {count_params(ModelSpec(family='gode', n=8, dynamics_layers=L, **cifar)):8,d}")
