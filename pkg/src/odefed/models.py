"""ResNet, ODENet and dsODENet builders and forward passes.

All three families share one seven-block plan::

    conv1 -> stage1 -> down2 -> stage2 -> down3 -> stage3 -> fc

``stage*`` is where the families differ. A ResNet stacks ``C`` residual blocks
with separate weights; an ODENet holds one block and runs it ``C`` times as
explicit Euler steps; a dsODENet does the same with every 3x3 convolution of
the block split into a depthwise and a pointwise step. The ``down*`` blocks
are single stride-2 residual blocks with a 1x1 projection shortcut in every
family.

Because ODE-family parameter shapes never depend on ``C``, a parameter set
trained at one iteration count can be run (and averaged) at any other.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import functional as F
from .paramset import ParameterSet
from .tensor import Tensor

FAMILIES = ("resnet", "odenet", "dsodenet")
EULER_MODES = ("unit_step", "interval_step")
ODE_FAMILIES = ("odenet", "dsodenet")

BLOCK_PLAN = ("conv1", "stage1", "down2", "stage2", "down3", "stage3", "fc")

# nominal depths used throughout the experiments; depth_to_iterations gives C
NAMED_DEPTHS = (34, 50, 101)


class ConfigError(ValueError):
    """Invalid model configuration; the message names the offending field."""


class NotReiterableError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    family: str = "odenet"
    in_channels: int = 3
    stem_channels: int = 64
    stage_channels: tuple[int, int, int] = (64, 128, 256)
    iterations: int = 1
    kernel_size: int = 3
    num_classes: int = 10
    norm_groups: int = 8
    euler_mode: str = "interval_step"

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        self.validate()

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigError(f"family: expected one of {FAMILIES}, got {self.family!r}")
        if self.euler_mode not in EULER_MODES:
            raise ConfigError(f"euler_mode: expected one of {EULER_MODES}, got {self.euler_mode!r}")
        for name in ("in_channels", "stem_channels", "iterations", "kernel_size", "num_classes", "norm_groups"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name}: expected a positive integer, got {value!r}")
        if len(self.stage_channels) != 3 or any(c < 1 for c in self.stage_channels):
            raise ConfigError(f"stage_channels: expected three positive widths, got {self.stage_channels}")
        if self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size: must be odd for same-size padding, got {self.kernel_size}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes: need at least 2 classes, got {self.num_classes}")
        if self.stem_channels != self.stage_channels[0]:
            raise ConfigError(
                f"stem_channels: must equal stage_channels[0] ({self.stage_channels[0]}), got {self.stem_channels}"
            )
        for c in self.stage_channels:
            if c % self.norm_groups:
                raise ConfigError(f"norm_groups: {self.norm_groups} does not divide width {c}")

    @property
    def is_ode(self) -> bool:
        return self.family in ODE_FAMILIES

    def with_iterations(self, iterations: int) -> "ModelConfig":
        return dataclasses.replace(self, iterations=iterations)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def shape_key(self) -> dict:
        """Fields that determine parameter shapes. ``iterations`` only matters for ResNet."""
        d = self.to_dict()
        d.pop("euler_mode")
        if self.is_ode:
            d.pop("iterations")
        return d


def depth_to_iterations(depth: int) -> tuple[int, int]:
    """Map a nominal depth ``N`` to ``(C, effective_N)`` using ``N = 6C + 6``.

    ``C`` is ``(N - 6) / 6`` rounded half up, so 34/50/101 map to 5/7/16 with
    effective depths 36/48/102.
    """
    if depth < 12:
        raise ValueError(f"depth must be >= 12 (C >= 1), got {depth}")
    c = (depth - 3) // 6
    return c, 6 * c + 6


# ---------------------------------------------------------------------------
# parameter layout


def _conv_entries(prefix: str, cin: int, cout: int, k: int, separable: bool):
    if separable:
        return [
            (f"{prefix}.depthwise.weight", (cin, 1, k, k), "kaiming", k * k),
            (f"{prefix}.pointwise.weight", (cout, cin, 1, 1), "kaiming", cin),
        ]
    return [(f"{prefix}.weight", (cout, cin, k, k), "kaiming", cin * k * k)]


def _norm_entries(prefix: str, c: int):
    return [(f"{prefix}.weight", (c,), "ones", 0), (f"{prefix}.bias", (c,), "zeros", 0)]


def _block_entries(prefix: str, width: int, k: int, separable: bool):
    return (
        _conv_entries(f"{prefix}.conv1", width, width, k, separable)
        + _norm_entries(f"{prefix}.norm1", width)
        + _conv_entries(f"{prefix}.conv2", width, width, k, separable)
        + _norm_entries(f"{prefix}.norm2", width)
    )


def _down_entries(prefix: str, cin: int, cout: int, k: int):
    return (
        _conv_entries(f"{prefix}.conv1", cin, cout, k, False)
        + _norm_entries(f"{prefix}.norm1", cout)
        + _conv_entries(f"{prefix}.conv2", cout, cout, k, False)
        + _norm_entries(f"{prefix}.norm2", cout)
        + [(f"{prefix}.shortcut.weight", (cout, cin, 1, 1), "kaiming", cin)]
    )


def parameter_layout(config: ModelConfig) -> list[tuple[str, tuple[int, ...], str, int]]:
    """Ordered ``(name, shape, init, fan_in)`` for every parameter of ``config``."""
    k = config.kernel_size
    a, b, c = config.stage_channels
    separable = config.family == "dsodenet"
    layout = _conv_entries("conv1", config.in_channels, config.stem_channels, k, False)
    layout += _norm_entries("conv1.norm", config.stem_channels)
    for stage, width, down in (("stage1", a, None), ("stage2", b, ("down2", a)), ("stage3", c, ("down3", b))):
        if down is not None:
            layout += _down_entries(down[0], down[1], width, k)
        if config.family == "resnet":
            for i in range(config.iterations):
                layout += _block_entries(f"{stage}.{i}", width, k, False)
        else:
            layout += _block_entries(stage, width, k, separable)
    layout += [
        ("fc.weight", (config.num_classes, c), "kaiming", c),
        ("fc.bias", (config.num_classes,), "zeros", 0),
    ]
    return layout


def init_params(config: ModelConfig, seed: int) -> ParameterSet:
    rng = np.random.default_rng(seed)
    items = []
    for name, shape, kind, fan_in in parameter_layout(config):
        if kind == "kaiming":
            bound = math.sqrt(6.0 / fan_in)
            arr = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        elif kind == "ones":
            arr = np.ones(shape, dtype=np.float32)
        else:
            arr = np.zeros(shape, dtype=np.float32)
        items.append((name, arr))
    return ParameterSet.from_arrays(items)


def count_parameters(config: ModelConfig) -> tuple[int, list[tuple[str, int]]]:
    """Exact parameter count of ``config`` from layer formulas, without allocating.

    A standard convolution has ``N*M*K^2`` weights; its depthwise separable
    replacement has ``N*K^2 + N*M``. Group norms contribute ``2*C`` and the
    classifier ``F*classes + classes``.
    """
    k2 = config.kernel_size**2
    a, b, c = config.stage_channels
    rows: list[tuple[str, int]] = []

    def conv(prefix, n, m, separable=False):
        if separable:
            rows.append((f"{prefix}.depthwise.weight", n * k2))
            rows.append((f"{prefix}.pointwise.weight", n * m))
        else:
            rows.append((f"{prefix}.weight", n * m * k2))

    def norm(prefix, ch):
        rows.append((f"{prefix}.weight", ch))
        rows.append((f"{prefix}.bias", ch))

    def block(prefix, w, separable):
        conv(f"{prefix}.conv1", w, w, separable)
        norm(f"{prefix}.norm1", w)
        conv(f"{prefix}.conv2", w, w, separable)
        norm(f"{prefix}.norm2", w)

    conv("conv1", config.in_channels, config.stem_channels)
    norm("conv1.norm", config.stem_channels)
    for stage, w, prev in (("stage1", a, None), ("stage2", b, a), ("stage3", c, b)):
        if prev is not None:
            down = "down" + stage[-1]
            conv(f"{down}.conv1", prev, w)
            norm(f"{down}.norm1", w)
            conv(f"{down}.conv2", w, w)
            norm(f"{down}.norm2", w)
            rows.append((f"{down}.shortcut.weight", prev * w))
        if config.family == "resnet":
            for i in range(config.iterations):
                block(f"{stage}.{i}", w, False)
        else:
            block(stage, w, config.family == "dsodenet")
    rows.append(("fc.weight", c * config.num_classes))
    rows.append(("fc.bias", config.num_classes))
    return sum(n for _, n in rows), rows


# ---------------------------------------------------------------------------
# forward


@dataclass
class Model:
    config: ModelConfig
    params: ParameterSet
    plan: tuple[str, ...] = BLOCK_PLAN

    def __call__(self, x: Tensor, override_C: Optional[int] = None) -> Tensor:
        return forward(self, x, override_C)


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    config.validate()
    return Model(config, init_params(config, seed))


def _conv(x: Tensor, p: dict, name: str, stride: int = 1) -> Tensor:
    if f"{name}.depthwise.weight" in p:
        dw = p[f"{name}.depthwise.weight"]
        k = dw.shape[2]
        h = F.depthwise_conv2d(x, dw, stride=stride, padding=k // 2)
        return F.pointwise_conv2d(h, p[f"{name}.pointwise.weight"])
    w = p[f"{name}.weight"]
    k = w.shape[2]
    return F.conv2d(x, w, stride=stride, padding=k // 2)


def _norm(x: Tensor, p: dict, name: str, groups: int) -> Tensor:
    return F.group_norm(x, groups, p[f"{name}.weight"], p[f"{name}.bias"])


def residual_branch(x: Tensor, p: dict, groups: int = 8, stride: int = 1) -> Tensor:
    """``f(x)``: conv -> norm -> relu -> conv -> norm."""
    h = F.relu(_norm(_conv(x, p, "conv1", stride), p, "norm1", groups))
    return _norm(_conv(h, p, "conv2"), p, "norm2", groups)


def _check_channels(x: Tensor, p: dict) -> None:
    if "conv1.weight" in p:
        expected = p["conv1.weight"].shape[1]
    else:
        expected = p["conv1.depthwise.weight"].shape[0]
    if x.data.ndim != 4 or x.shape[1] != expected:
        raise F.ShapeError(f"block expects {expected} input channels, got input shape {x.shape}")


def res_block_forward(x: Tensor, p: dict, groups: int = 8) -> Tensor:
    """``relu(x + f(x))`` with a single set of block weights."""
    _check_channels(x, p)
    return F.relu(F.add(x, residual_branch(x, p, groups)))


def euler_iterate(
    x: Tensor,
    f: Callable[[Tensor], Tensor],
    iterations: int,
    euler_mode: str = "interval_step",
) -> Tensor:
    """Apply ``x <- relu(x + h * f(x))`` ``iterations`` times with one ``f``.

    ``h`` is 1 for ``unit_step`` and ``1/iterations`` for ``interval_step``
    (integrating over ``t in [0, 1]``). The trailing ReLU mirrors the
    post-addition activation of a residual block; on non-negative states it
    leaves the Euler update untouched.
    """
    if iterations < 1:
        raise ValueError(f"iteration count must be >= 1, got {iterations}")
    if euler_mode not in EULER_MODES:
        raise ValueError(f"unknown euler_mode {euler_mode!r}")
    h = 1.0 if euler_mode == "unit_step" else 1.0 / iterations
    for _ in range(iterations):
        step = f(x)
        if h != 1.0:
            step = F.scale(step, h)
        x = F.relu(F.add(x, step))
    return x


def ode_block_forward(
    x: Tensor,
    p: dict,
    iterations: int,
    euler_mode: str = "interval_step",
    groups: int = 8,
    branch: Optional[Callable[[Tensor], Tensor]] = None,
) -> Tensor:
    """Euler-iterate one shared residual branch ``iterations`` times.

    ``branch`` replaces the conv/norm branch built from ``p`` (useful for
    stubbing the vector field, e.g. ``f(x) = x``).
    """
    if iterations < 1:
        raise ValueError(f"iteration count must be >= 1, got {iterations}")
    if branch is None:
        _check_channels(x, p)
        branch = lambda z: residual_branch(z, p, groups)  # noqa: E731
    return euler_iterate(x, branch, iterations, euler_mode)


def ds_block_forward(
    x: Tensor, p: dict, iterations: int, euler_mode: str = "interval_step", groups: int = 8
) -> Tensor:
    if "conv1.depthwise.weight" not in p:
        raise F.ShapeError("ds_block_forward needs depthwise/pointwise block parameters")
    return ode_block_forward(x, p, iterations, euler_mode, groups)


def down_block_forward(x: Tensor, p: dict, groups: int = 8) -> Tensor:
    """Stride-2 residual block with a 1x1 stride-2 projection shortcut."""
    _check_channels(x, p)
    shortcut = F.conv2d(x, p["shortcut.weight"], stride=2)
    return F.relu(F.add(shortcut, residual_branch(x, p, groups, stride=2)))


def forward(model: Model, x: Tensor, override_C: Optional[int] = None) -> Tensor:
    cfg = model.config
    if override_C is not None and not cfg.is_ode:
        raise NotReiterableError("stacked blocks are not re-iterable: override_C is only valid for ODE families")
    iters = cfg.iterations if override_C is None else int(override_C)
    if iters < 1:
        raise ValueError(f"iteration count must be >= 1, got {iters}")
    if x.data.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise F.ShapeError(f"expected input [B,{cfg.in_channels},H,W], got {x.shape}")
    p = model.params
    g = cfg.norm_groups
    k = cfg.kernel_size

    h = F.conv2d(x, p["conv1.weight"], stride=1, padding=k // 2)
    h = F.relu(_norm(h, p.sub("conv1"), "norm", g))
    for stage, down in (("stage1", None), ("stage2", "down2"), ("stage3", "down3")):
        if down is not None:
            h = down_block_forward(h, p.sub(down), g)
        if cfg.family == "resnet":
            for i in range(cfg.iterations):
                h = res_block_forward(h, p.sub(f"{stage}.{i}"), g)
        elif cfg.family == "odenet":
            h = ode_block_forward(h, p.sub(stage), iters, cfg.euler_mode, g)
        else:
            h = ds_block_forward(h, p.sub(stage), iters, cfg.euler_mode, g)
    pooled = F.avg_pool_global(h)
    return F.linear(pooled, p["fc.weight"], p["fc.bias"])
