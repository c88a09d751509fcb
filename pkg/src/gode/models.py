"""ResNet, Neural-ODE and Neural-GODE image classifiers.

All three share a downsampling stack (3x3 conv, then two 4x4 stride-2 convs,
each followed by group norm and ReLU) and a head (group norm, ReLU, global
average pool, linear). They differ in the core stage:

* ``resnet``: ``num_blocks`` residual blocks, ``z <- z + h_scale * block(z)``
* ``node``:   one ODE block whose convs see ``t`` as an extra input channel
* ``gode``:   one ODE block whose conv kernels are B-spline curves in ``t``

Every dynamics stage is conv -> group norm -> ReLU, repeated ``dynamics_layers``
times, for all three families.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .bspline import BSplineBasis, make_clamped_uniform
from .layers import Conv2d, GroupNorm, Layer, Linear, TimeVaryingConv, avgpool_global, relu
from .odeint import SolverConfig, solve

FAMILIES = ("resnet", "node", "gode")


class ModelConfigError(ValueError):
    pass


@dataclass
class ModelSpec:
    family: str = "gode"
    width: int = 64
    in_channels: int = 1
    num_classes: int = 10
    dynamics_layers: int = 2
    # resnet
    num_blocks: int = 6
    h_scale: float = 1.0
    # node / gode
    solver: SolverConfig = field(default_factory=SolverConfig)
    time_channel: bool = True
    # gode
    k: int = 1
    n: int = 4
    bias_mode: str = "constant"

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ModelConfigError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.width < 1 or self.in_channels < 1 or self.num_classes < 2:
            raise ModelConfigError("width, in_channels must be >= 1 and num_classes >= 2")
        if self.dynamics_layers < 1:
            raise ModelConfigError(f"dynamics_layers must be >= 1, got {self.dynamics_layers}")
        if self.family == "resnet":
            if self.num_blocks < 1:
                raise ModelConfigError(f"num_blocks must be >= 1, got {self.num_blocks}")
        else:
            self.solver.validate()
        if self.family == "gode":
            if self.k < 0:
                raise ModelConfigError(f"spline degree k must be >= 0, got {self.k}")
            if self.n < self.k + 1:
                raise ModelConfigError(f"need n >= k+1 control points, got n={self.n}, k={self.k}")
            if self.bias_mode not in ("constant", "spline"):
                raise ModelConfigError(f"bias_mode must be 'constant' or 'spline', got {self.bias_mode!r}")
            if self.solver.t0 != 0.0:
                raise ModelConfigError("the spline domain starts at 0, so the solver must start at t0=0")

    @property
    def T(self) -> float:
        return self.solver.t1

    def basis(self) -> BSplineBasis:
        return make_clamped_uniform(self.k, self.n, self.solver.t1)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ModelConfigError(f"unknown model keys: {sorted(unknown)}")
        solver = d.pop("solver", None)
        spec = cls(**d)
        if solver is not None:
            sknown = {f.name for f in dataclasses.fields(SolverConfig)}
            bad = set(solver) - sknown
            if bad:
                raise ModelConfigError(f"unknown solver keys: {sorted(bad)}")
            spec.solver = SolverConfig(**solver)
        return spec


class Stage(Layer):
    """conv -> group norm -> ReLU."""

    def __init__(self, conv, norm: GroupNorm):
        self.conv = conv
        self.norm = norm

    def named_parameters(self):
        return [(f"conv.{k}", v) for k, v in self.conv.named_parameters()] + [
            (f"norm.{k}", v) for k, v in self.norm.named_parameters()
        ]


class ResidualBlock(Layer):
    def __init__(self, stages: list[Stage]):
        self.stages = stages

    def named_parameters(self):
        return [(f"{i}.{k}", v) for i, s in enumerate(self.stages) for k, v in s.named_parameters()]

    def __call__(self, z: ad.Tensor) -> ad.Tensor:
        for s in self.stages:
            z = relu(s.norm(s.conv(z)))
        return z


class OdeFunc(Layer):
    """Dynamics ``f(z, t)`` of an ODE block."""

    def __init__(self, stages: list[Stage], family: str, time_channel: bool):
        self.stages = stages
        self.family = family
        self.time_channel = time_channel
        self.nfe = 0

    def named_parameters(self):
        return [(f"{i}.{k}", v) for i, s in enumerate(self.stages) for k, v in s.named_parameters()]

    def __call__(self, z: ad.Tensor, t: float) -> ad.Tensor:
        self.nfe += 1
        for s in self.stages:
            if self.family == "gode":
                z = s.conv(z, t)
            elif self.time_channel:
                n, _, h, w = z.shape
                tmap = ad.Tensor(np.full((n, 1, h, w), t))
                z = s.conv(ad.concat([tmap, z], axis=1))
            else:
                z = s.conv(z)
            z = relu(s.norm(z))
        return z


class Model(Layer):
    def __init__(self, spec: ModelSpec, down: list[Stage], core, head_norm: GroupNorm, fc: Linear):
        self.spec = spec
        self.down = down
        self.core = core
        self.head_norm = head_norm
        self.fc = fc

    def named_parameters(self):
        out = []
        for i, s in enumerate(self.down):
            out += [(f"down.{i}.{k}", v) for k, v in s.named_parameters()]
        if isinstance(self.core, list):
            for b, block in enumerate(self.core):
                out += [(f"core.{b}.{k}", v) for k, v in block.named_parameters()]
        else:
            out += [(f"core.{k}", v) for k, v in self.core.named_parameters()]
        out += [(f"head.norm.{k}", v) for k, v in self.head_norm.named_parameters()]
        out += [(f"head.fc.{k}", v) for k, v in self.fc.named_parameters()]
        return out

    def features(self, x: ad.Tensor) -> ad.Tensor:
        z = x
        for s in self.down:
            z = relu(s.norm(s.conv(z)))
        return z

    def core_forward(self, z: ad.Tensor, solver: SolverConfig | None = None) -> ad.Tensor:
        if self.spec.family == "resnet":
            h = self.spec.h_scale
            for block in self.core:
                z = ad.add(z, ad.scale(block(z), h))
            return z
        return solve(self.core, z, solver or self.spec.solver)

    def head(self, z: ad.Tensor) -> ad.Tensor:
        return self.fc(avgpool_global(relu(self.head_norm(z))))

    def __call__(self, x, solver: SolverConfig | None = None) -> ad.Tensor:
        return forward(self, x, solver)

    def stage_sizes(self) -> dict[str, int]:
        groups: dict[str, int] = {}
        for name, p in self.named_parameters():
            key = ".".join(name.split(".")[:2]) if name.startswith("head") else name.split(".")[0]
            groups[key] = groups.get(key, 0) + p.size
        return groups


def forward(model: Model, x, solver: SolverConfig | None = None) -> ad.Tensor:
    """Logits ``[N, num_classes]``; ``solver`` overrides the spec's ODE solver."""
    x = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
    if x.ndim != 4 or x.shape[1] != model.spec.in_channels:
        raise ad.ShapeError(
            f"expected input [N, {model.spec.in_channels}, H, W], got {x.shape}"
        )
    return model.head(model.core_forward(model.features(x), solver))


def _stage(conv, width) -> Stage:
    return Stage(conv, GroupNorm(width))


def build(spec: ModelSpec, seed: int = 0) -> Model:
    """Instantiate a model; parameters are a deterministic function of ``seed``."""
    spec.validate()
    rng = np.random.default_rng(seed)
    c = spec.width
    down = [
        _stage(Conv2d(spec.in_channels, c, 3, stride=1, padding=1, rng=rng), c),
        _stage(Conv2d(c, c, 4, stride=2, padding=1, rng=rng), c),
        _stage(Conv2d(c, c, 4, stride=2, padding=1, rng=rng), c),
    ]
    L = spec.dynamics_layers
    if spec.family == "resnet":
        core = [
            ResidualBlock([_stage(Conv2d(c, c, 3, padding=1, rng=rng), c) for _ in range(L)])
            for _ in range(spec.num_blocks)
        ]
    elif spec.family == "node":
        extra = 1 if spec.time_channel else 0
        core = OdeFunc(
            [_stage(Conv2d(c + extra, c, 3, padding=1, rng=rng), c) for _ in range(L)],
            "node",
            spec.time_channel,
        )
    else:
        basis = spec.basis()
        core = OdeFunc(
            [_stage(TimeVaryingConv(c, c, basis, spec.bias_mode, rng=rng), c) for _ in range(L)],
            "gode",
            False,
        )
    head_norm = GroupNorm(c)
    fc = Linear(c, spec.num_classes, rng=rng)
    return Model(spec, down, core, head_norm, fc)


def count_params(spec: ModelSpec) -> int:
    """Exact number of trainable scalars, computed from layer shapes."""
    spec.validate()
    c, cin, L = spec.width, spec.in_channels, spec.dynamics_layers
    norm = 2 * c
    down = (cin * c * 9 + c + norm) + 2 * (c * c * 16 + c + norm)
    head = norm + c * spec.num_classes + spec.num_classes
    if spec.family == "resnet":
        core = spec.num_blocks * L * (c * c * 9 + c + norm)
    elif spec.family == "node":
        extra = 1 if spec.time_channel else 0
        core = L * ((c + extra) * c * 9 + c + norm)
    else:
        bias = c if spec.bias_mode == "constant" else spec.n * c
        core = L * (spec.n * c * c * 9 + bias + norm)
    return down + core + head


def set_parameters(model: Model, values: dict[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    missing = set(params) - set(values)
    extra = set(values) - set(params)
    if missing or extra:
        raise KeyError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
    for name, p in params.items():
        v = np.asarray(values[name])
        if v.shape != p.shape:
            raise ValueError(f"{name}: expected shape {p.shape}, got {v.shape}")
        p.data = v.astype(p.data.dtype, copy=True)
        p.grad = None


def state_dict(model: Model) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in model.named_parameters()}


# ---------------------------------------------------------------------------
# trajectories


def _dynamics_conv(model: Model, layer_index: int):
    stages = model.core.stages if model.spec.family != "resnet" else model.core[0].stages
    if not 0 <= layer_index < len(stages):
        raise IndexError(f"layer index {layer_index} out of range for {len(stages)} dynamics layers")
    return stages[layer_index].conv


def export_weight_trajectory(model: Model, layer_index: int, t_grid) -> np.ndarray:
    """Kernel entries of a dynamics conv along ``t_grid``: array ``[len(t_grid), numel]``.

    For ``resnet`` models the grid values are block indices instead of times.
    For ``node`` models the time-channel slice is omitted: the remaining kernel
    is what the ODE block applies at every ``t``.
    """
    family = model.spec.family
    if family == "resnet":
        rows = []
        for idx in t_grid:
            b = int(idx)
            if not 0 <= b < len(model.core):
                raise IndexError(f"block index {b} out of range for {len(model.core)} blocks")
            conv = model.core[b].stages[_check_layer(model, layer_index)].conv
            rows.append(conv.kernel.data.reshape(-1))
        return np.stack(rows)
    conv = _dynamics_conv(model, layer_index)
    rows = []
    with ad.no_grad():
        for t in t_grid:
            if family == "gode":
                kernel = conv.materialize(float(t))[0].data
            else:
                if not model.spec.solver.t0 <= t <= model.spec.solver.t1:
                    raise ValueError(f"t={t} outside the integration interval")
                kernel = conv.kernel.data
                if model.spec.time_channel:
                    kernel = kernel[:, 1:]
            rows.append(np.array(kernel, copy=True).reshape(-1))
    return np.stack(rows)


def _check_layer(model: Model, layer_index: int) -> int:
    if not 0 <= layer_index < model.spec.dynamics_layers:
        raise IndexError(
            f"layer index {layer_index} out of range for {model.spec.dynamics_layers} dynamics layers"
        )
    return layer_index


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"GODE-CKPT-v1\n"


def save_checkpoint(model: Model, path, extra: dict | None = None) -> None:
    """Header line, little-endian u64 manifest length, JSON manifest, raw tensors.

    The manifest holds the model spec and, per tensor, its name, dtype, shape
    and byte offset into the data section. Tensor data is little-endian.
    """
    entries, chunks, offset = [], [], 0
    for name, p in model.named_parameters():
        arr = np.ascontiguousarray(p.data)
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"spec": model.spec.to_dict(), "tensors": entries}
    if extra:
        manifest["extra"] = extra
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in chunks:
            fh.write(raw)


class CheckpointFormatError(ValueError):
    pass


def read_checkpoint(path) -> tuple[ModelSpec, dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CKPT_MAGIC):
        raise CheckpointFormatError(f"{path}: missing {CKPT_MAGIC.strip().decode()} header")
    pos = len(CKPT_MAGIC)
    if len(data) < pos + 8:
        raise CheckpointFormatError(f"{path}: truncated at offset {pos}")
    (mlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    try:
        manifest = json.loads(data[pos : pos + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: bad manifest at offset {pos}: {exc}") from None
    base = pos + mlen
    values = {}
    for e in manifest["tensors"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(data):
            raise CheckpointFormatError(f"{path}: tensor {e['name']} truncated at offset {start}")
        dt = np.dtype("<" + e["dtype"])
        arr = np.frombuffer(data, dtype=dt, count=e["nbytes"] // dt.itemsize, offset=start)
        values[e["name"]] = arr.reshape(e["shape"]).astype(dt.newbyteorder("="))
    return ModelSpec.from_dict(manifest["spec"]), values, manifest.get("extra", {})


def load_checkpoint(path) -> Model:
    spec, values, _ = read_checkpoint(path)
    model = build(spec, seed=0)
    set_parameters(model, values)
    return model

