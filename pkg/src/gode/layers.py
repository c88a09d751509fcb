"""Network layers shared by the ResNet, Neural-ODE and Neural-GODE models.

Layers hold their parameters as ``Tensor`` leaves and expose them through
``named_parameters`` in a fixed order (checkpointing and gradient checks rely
on that order).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .bspline import BSplineBasis, eval_basis


def he_normal(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Layer:
    def named_parameters(self) -> list[tuple[str, ad.Tensor]]:
        return []

    def parameters(self) -> list[ad.Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Conv2d(Layer):
    def __init__(self, c_in, c_out, kernel_size, stride=1, padding=0, bias=True, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in, self.c_out = c_in, c_out
        self.stride, self.padding = stride, padding
        self.kernel = ad.parameter(he_normal(rng, (c_out, c_in, kernel_size, kernel_size)))
        self.bias = ad.parameter(np.zeros(c_out)) if bias else None

    def named_parameters(self):
        out = [("kernel", self.kernel)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel.shape[2:]
        return (
            (h + 2 * self.padding - kh) // self.stride + 1,
            (w + 2 * self.padding - kw) // self.stride + 1,
        )

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return conv2d_forward(self, x)


def conv2d_forward(layer: Conv2d, x: ad.Tensor) -> ad.Tensor:
    return ad.conv2d(x, layer.kernel, layer.bias, stride=layer.stride, padding=layer.padding)


class TimeVaryingConv(Layer):
    """3x3 convolution whose kernel is a B-spline curve over integration time.

    All control kernels start identical, so a freshly built layer is constant
    in ``t``. ``bias_mode="spline"`` gives the bias its own control points on
    the same basis.
    """

    def __init__(self, c_in, c_out, basis: BSplineBasis, bias_mode="constant", rng=None):
        if bias_mode not in ("constant", "spline"):
            raise ValueError(f"bias_mode must be 'constant' or 'spline', got {bias_mode!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in, self.c_out = c_in, c_out
        self.basis = basis
        self.bias_mode = bias_mode
        self.stride, self.padding = 1, 1
        init = he_normal(rng, (c_out, c_in, 3, 3))
        self.control_kernels = [ad.parameter(init.copy()) for _ in range(basis.n_control)]
        if bias_mode == "constant":
            self.bias = ad.parameter(np.zeros(c_out))
            self.control_biases = None
        else:
            self.bias = None
            self.control_biases = [ad.parameter(np.zeros(c_out)) for _ in range(basis.n_control)]

    def named_parameters(self):
        out = [(f"control_kernel.{i}", p) for i, p in enumerate(self.control_kernels)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        else:
            out += [(f"control_bias.{i}", p) for i, p in enumerate(self.control_biases)]
        return out

    def materialize(self, t: float) -> tuple[ad.Tensor, ad.Tensor]:
        weights = eval_basis(self.basis, t)
        kernel = ad.lincomb(weights, self.control_kernels)
        bias = self.bias if self.bias is not None else ad.lincomb(weights, self.control_biases)
        return kernel, bias

    def __call__(self, x: ad.Tensor, t: float) -> ad.Tensor:
        return convt_forward(self, x, t)


def convt_forward(layer: TimeVaryingConv, x: ad.Tensor, t: float) -> ad.Tensor:
    kernel, bias = layer.materialize(t)
    return ad.conv2d(x, kernel, bias, stride=1, padding=1)


def default_groups(channels: int) -> int:
    return min(32, channels)


class GroupNorm(Layer):
    def __init__(self, channels: int, num_groups: int | None = None, epsilon: float = 1e-5):
        num_groups = default_groups(channels) if num_groups is None else num_groups
        if num_groups < 1 or channels % num_groups:
            raise ValueError(f"{channels} channels cannot be split into {num_groups} groups")
        self.num_groups = num_groups
        self.epsilon = epsilon
        self.scale = ad.parameter(np.ones(channels))
        self.shift = ad.parameter(np.zeros(channels))

    def named_parameters(self):
        return [("scale", self.scale), ("shift", self.shift)]

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return groupnorm_forward(self, x)


def groupnorm_forward(layer: GroupNorm, x: ad.Tensor) -> ad.Tensor:
    return ad.group_norm(x, layer.num_groups, layer.scale, layer.shift, layer.epsilon)


class Linear(Layer):
    def __init__(self, d_in: int, d_out: int, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(d_in)
        self.weight = ad.parameter(rng.uniform(-bound, bound, (d_in, d_out)))
        self.bias = ad.parameter(np.zeros(d_out))

    def named_parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return linear(x, self.weight, self.bias)


def relu(x: ad.Tensor) -> ad.Tensor:
    return ad.relu(x)


def avgpool_global(x: ad.Tensor) -> ad.Tensor:
    """[N, C, H, W] -> [N, C]."""
    if x.ndim != 4:
        raise ad.ShapeError(f"avgpool_global expects [N,C,H,W], got {x.shape}")
    return ad.reduce_mean(x, axis=(2, 3))


def linear(x: ad.Tensor, weight: ad.Tensor, bias: ad.Tensor) -> ad.Tensor:
    return ad.add(ad.matmul(x, weight), bias)


def softmax_logits(x) -> np.ndarray:
    """Class probabilities for a batch of logits (inference only)."""
    data = x.data if isinstance(x, ad.Tensor) else np.asarray(x)
    z = data - data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
