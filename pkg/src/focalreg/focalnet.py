"""3D focal modulation regression network and the plain-CNN baseline.

Both models take a two-channel 33^3 patch pair (reference volume + tracked
volume, intensities in [0, 1]) and regress one scalar: the mean registration
error of the pair in mm. Dropout lives only in the MLP head; `mode="mc"`
keeps it active at inference so repeated passes sample the predictive
distribution.

Channel widths, stage resolutions and focal kernels are configuration, not
architecture: defaults are sized so a full training run fits a single CPU
core.
"""

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor


@dataclass
class FocalModulationConfig:
    dim: int
    focal_levels: int = 2
    focal_kernels: tuple = (3, 3)
    use_global_level: bool = True

    def __post_init__(self):
        self.focal_kernels = tuple(self.focal_kernels)
        if self.dim < 1 or self.focal_levels < 1:
            raise ValueError("dim and focal_levels must be >= 1")
        if len(self.focal_kernels) != self.focal_levels:
            raise ValueError("need one kernel size per focal level")
        if any(k % 2 == 0 for k in self.focal_kernels):
            raise ValueError("focal kernels must be odd")
        if list(self.focal_kernels) != sorted(self.focal_kernels):
            raise ValueError("focal kernels must be non-decreasing")


@dataclass
class FocalErrorNetConfig:
    in_channels: int = 2
    patch_size: int = 33
    stem_dim: int = 16
    stem_kernel: int = 3
    stem_stride: int = 2
    stage_dims: tuple = (16, 32, 48)
    blocks_per_stage: tuple = (2, 2, 2)
    stage_strides: tuple = (2, 2, 2)
    focal_levels: int = 2
    focal_kernels: tuple = (3, 3)
    use_global_level: bool = True
    mlp_ratio: float = 2.0
    mlp_hidden: tuple = (128, 64)
    dropout_p: float = 0.2
    # output affine ~ (label std, label mean): the head regresses a
    # standardized target, which keeps its effective step size usable at
    # small learning rates
    output_scale: float = 4.0
    output_offset: float = 4.0

    def __post_init__(self):
        if self.output_scale <= 0:
            raise ValueError("output_scale must be positive")
        self.stage_dims = tuple(self.stage_dims)
        self.blocks_per_stage = tuple(self.blocks_per_stage)
        self.stage_strides = tuple(self.stage_strides)
        self.focal_kernels = tuple(self.focal_kernels)
        self.mlp_hidden = tuple(self.mlp_hidden)
        if len(self.stage_dims) != len(self.blocks_per_stage):
            raise ValueError("stage_dims and blocks_per_stage length mismatch")
        if len(self.stage_strides) != len(self.stage_dims):
            raise ValueError("stage_strides length mismatch")
        if len(self.mlp_hidden) != 2:
            raise ValueError("head uses exactly two hidden layers "
                             "(one dropout after each)")
        FocalModulationConfig(self.stage_dims[0], self.focal_levels,
                              self.focal_kernels, self.use_global_level)


@dataclass
class BaselineCnnConfig:
    in_channels: int = 2
    patch_size: int = 33
    channels: tuple = (8, 16, 32, 64)
    kernel: int = 3
    first_stride: int = 2
    fc_hidden: int = 256
    dropout_p: float = 0.2
    output_scale: float = 4.0
    output_offset: float = 4.0

    def __post_init__(self):
        if self.output_scale <= 0:
            raise ValueError("output_scale must be positive")
        self.channels = tuple(self.channels)
        if self.kernel % 2 == 0:
            raise ValueError("kernel must be odd")


def config_to_json(config) -> str:
    return json.dumps(asdict(config), indent=2, sort_keys=True)


def config_from_json(text, cls):
    return cls(**json.loads(text))


# ---------------------------------------------------------------------------
# parameter initialization
# ---------------------------------------------------------------------------

def _uniform_init(rng, shape, fan_in):
    a = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-a, a, shape), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape):
    return Tensor(np.ones(shape), requires_grad=True)


def _conv_init(params, rng, name, cin, cout, k, groups=1):
    fan_in = (cin // groups) * k ** 3
    params[f"{name}.w"] = _uniform_init(rng, (cout, cin // groups, k, k, k),
                                        fan_in)
    params[f"{name}.b"] = _zeros((cout,))


def _linear_init(params, rng, name, fin, fout):
    params[f"{name}.w"] = _uniform_init(rng, (fin, fout), fin)
    params[f"{name}.b"] = _zeros((fout,))


def _norm_init(params, name, dim):
    params[f"{name}.gamma"] = _ones((dim,))
    params[f"{name}.beta"] = _zeros((dim,))


# ---------------------------------------------------------------------------
# focal modulation
# ---------------------------------------------------------------------------

def init_focal_modulation(params, rng, name, cfg: FocalModulationConfig):
    d = cfg.dim
    _conv_init(params, rng, f"{name}.fq", d, d, 1)
    _conv_init(params, rng, f"{name}.fctx", d, d, 1)
    n_gates = cfg.focal_levels + (1 if cfg.use_global_level else 0)
    _conv_init(params, rng, f"{name}.fgate", d, n_gates, 1)
    for lvl, k in enumerate(cfg.focal_kernels):
        _conv_init(params, rng, f"{name}.dw{lvl}", d, d, k, groups=d)
    _conv_init(params, rng, f"{name}.h", d, d, 1)
    # residual-branch output starts at zero so every block begins as the
    # identity map; small-learning-rate training is far more stable that way
    params[f"{name}.proj.w"] = _zeros((d, d, 1, 1, 1))
    params[f"{name}.proj.b"] = _zeros((d,))


def focal_modulation(x, params, name, cfg: FocalModulationConfig):
    """Hierarchical depth-wise contexts, gated into a modulator, injected
    into a point-wise query projection."""
    if x.shape[1] != cfg.dim:
        raise ShapeError(f"focal modulation expects {cfg.dim} channels, "
                         f"got {x.shape[1]}")
    p = params
    q = ops.conv3d(x, p[f"{name}.fq.w"], p[f"{name}.fq.b"])
    ctx = ops.gelu(ops.conv3d(x, p[f"{name}.fctx.w"], p[f"{name}.fctx.b"]))
    gates = ops.conv3d(x, p[f"{name}.fgate.w"], p[f"{name}.fgate.b"])
    agg = None
    for lvl, k in enumerate(cfg.focal_kernels):
        ctx = ops.gelu(ops.conv3d(ctx, p[f"{name}.dw{lvl}.w"],
                                  p[f"{name}.dw{lvl}.b"],
                                  padding=(k - 1) // 2, groups=cfg.dim))
        gated = ops.mul(ctx, ops.narrow(gates, 1, lvl, 1))
        agg = gated if agg is None else ops.add(agg, gated)
    if cfg.use_global_level:
        gctx = ops.gelu(ops.global_avg_pool3d(ctx))
        agg = ops.add(agg, ops.mul(gctx,
                                   ops.narrow(gates, 1, cfg.focal_levels, 1)))
    m = ops.conv3d(agg, p[f"{name}.h.w"], p[f"{name}.h.b"])
    return ops.conv3d(ops.mul(q, m), p[f"{name}.proj.w"], p[f"{name}.proj.b"])


def init_focal_block(params, rng, name, cfg: FocalModulationConfig,
                     mlp_ratio=2.0):
    d = cfg.dim
    hidden = max(1, int(round(d * mlp_ratio)))
    _norm_init(params, f"{name}.norm1", d)
    init_focal_modulation(params, rng, f"{name}.mod", cfg)
    _norm_init(params, f"{name}.norm2", d)
    _conv_init(params, rng, f"{name}.mlp1", d, hidden, 1)
    params[f"{name}.mlp2.w"] = _zeros((d, hidden, 1, 1, 1))
    params[f"{name}.mlp2.b"] = _zeros((d,))


def focal_block(x, params, name, cfg: FocalModulationConfig):
    """Pre-norm residual block: modulation branch, then point-wise MLP."""
    p = params
    y = ops.add(x, focal_modulation(
        ops.layernorm_channels(x, p[f"{name}.norm1.gamma"],
                               p[f"{name}.norm1.beta"]),
        params, f"{name}.mod", cfg))
    h = ops.layernorm_channels(y, p[f"{name}.norm2.gamma"],
                               p[f"{name}.norm2.beta"])
    h = ops.conv3d(h, p[f"{name}.mlp1.w"], p[f"{name}.mlp1.b"])
    h = ops.gelu(h)
    h = ops.conv3d(h, p[f"{name}.mlp2.w"], p[f"{name}.mlp2.b"])
    return ops.add(y, h)


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

class _RegressionModel:
    """Shared surface: params dict, pooled features, dropout MLP head."""

    def __init__(self, config, params=None, rng=None):
        self.config = config
        if params is None:
            if rng is None:
                raise ValueError("need an rng to initialize parameters")
            params = self._init_params(rng)
        self.params = params

    def param_count(self):
        return sum(t.size for t in self.params.values())

    def parameters(self):
        return self.params

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def _dropout_active(self, mode):
        if mode == "train" or mode == "mc":
            return True
        if mode == "infer":
            return False
        raise ValueError(f"unknown mode {mode!r}")

    def forward(self, x, mode="infer", rng=None):
        feat = self.features(x)
        return self.head(feat, mode=mode, rng=rng)

    def predict_pair(self, mri_patch, us_patch, mode="infer", rng=None):
        """Single patch pair -> scalar predicted error (mm)."""
        s = self.config.patch_size
        mri = np.asarray(mri_patch).reshape(1, 1, s, s, s)
        us = np.asarray(us_patch).reshape(1, 1, s, s, s)
        x = Tensor(np.concatenate([mri, us], axis=1))
        return self.forward(x, mode=mode, rng=rng).item()

    def head(self, feat, mode="infer", rng=None):
        raise NotImplementedError


class FocalErrorNet(_RegressionModel):
    def __init__(self, config=None, params=None, rng=None):
        super().__init__(config or FocalErrorNetConfig(), params, rng)

    def _stage_cfg(self, i):
        c = self.config
        return FocalModulationConfig(c.stage_dims[i], c.focal_levels,
                                     c.focal_kernels, c.use_global_level)

    def _init_params(self, rng):
        c = self.config
        params = {}
        _conv_init(params, rng, "stem", c.in_channels, c.stem_dim,
                   c.stem_kernel)
        prev = c.stem_dim
        for i, dim in enumerate(c.stage_dims):
            _conv_init(params, rng, f"stage{i}.down", prev, dim, 1)
            for j in range(c.blocks_per_stage[i]):
                init_focal_block(params, rng, f"stage{i}.block{j}",
                                 self._stage_cfg(i), c.mlp_ratio)
            prev = dim
        h1, h2 = c.mlp_hidden
        _linear_init(params, rng, "head.fc1", prev, h1)
        _linear_init(params, rng, "head.fc2", h1, h2)
        _linear_init(params, rng, "head.out", h2, 1)
        # start at the output offset so early epochs refine around the
        # working range instead of climbing up from zero
        params["head.out.b"] = Tensor(
            np.full(1, c.output_offset / c.output_scale),
            requires_grad=True)
        return params

    def features(self, x):
        """Backbone up to global pooling; deterministic in every mode."""
        c, p = self.config, self.params
        if x.shape[1] != c.in_channels:
            raise ShapeError(f"expected {c.in_channels} input channels")
        if x.shape[2:] != (c.patch_size,) * 3:
            raise ShapeError(f"expected {c.patch_size}^3 patches, "
                             f"got {x.shape[2:]}")
        h = ops.conv3d(x, p["stem.w"], p["stem.b"], stride=c.stem_stride,
                       padding=(c.stem_kernel - 1) // 2)
        for i in range(len(c.stage_dims)):
            h = ops.conv3d(h, p[f"stage{i}.down.w"], p[f"stage{i}.down.b"],
                           stride=c.stage_strides[i])
            for j in range(c.blocks_per_stage[i]):
                h = focal_block(h, self.params, f"stage{i}.block{j}",
                                self._stage_cfg(i))
        return ops.flatten(ops.global_avg_pool3d(h))

    def head(self, feat, mode="infer", rng=None):
        c, p = self.config, self.params
        active = self._dropout_active(mode)
        if active and c.dropout_p > 0 and rng is None:
            raise ValueError(f"mode={mode!r} with dropout needs an rng")
        h = ops.relu(ops.linear(feat, p["head.fc1.w"], p["head.fc1.b"]))
        h = ops.dropout(h, c.dropout_p, rng.split(0) if rng else None, active)
        h = ops.relu(ops.linear(h, p["head.fc2.w"], p["head.fc2.b"]))
        h = ops.dropout(h, c.dropout_p, rng.split(1) if rng else None, active)
        return ops.scale(ops.linear(h, p["head.out.w"], p["head.out.b"]),
                         c.output_scale)


class BaselineCnn(_RegressionModel):
    """Conv/ReLU/max-pool stack with a single MC dropout in the head."""

    def __init__(self, config=None, params=None, rng=None):
        super().__init__(config or BaselineCnnConfig(), params, rng)

    def _init_params(self, rng):
        c = self.config
        params = {}
        prev = c.in_channels
        for i, ch in enumerate(c.channels):
            _conv_init(params, rng, f"conv{i}", prev, ch, c.kernel)
            prev = ch
        _linear_init(params, rng, "head.fc1", prev, c.fc_hidden)
        _linear_init(params, rng, "head.out", c.fc_hidden, 1)
        params["head.out.b"] = Tensor(
            np.full(1, c.output_offset / c.output_scale),
            requires_grad=True)
        return params

    def features(self, x):
        c, p = self.config, self.params
        if x.shape[1] != c.in_channels or x.shape[2:] != (c.patch_size,) * 3:
            raise ShapeError("baseline input must be "
                             f"[N,{c.in_channels},{c.patch_size}^3]")
        h = x
        pad = (c.kernel - 1) // 2
        for i in range(len(c.channels)):
            stride = c.first_stride if i == 0 else 1
            h = ops.relu(ops.conv3d(h, p[f"conv{i}.w"], p[f"conv{i}.b"],
                                    stride=stride, padding=pad))
            if min(h.shape[2:]) >= 2:
                h = ops.maxpool3d(h, 2)
        return ops.flatten(ops.global_avg_pool3d(h))

    def head(self, feat, mode="infer", rng=None):
        c, p = self.config, self.params
        active = self._dropout_active(mode)
        if active and c.dropout_p > 0 and rng is None:
            raise ValueError(f"mode={mode!r} with dropout needs an rng")
        h = ops.relu(ops.linear(feat, p["head.fc1.w"], p["head.fc1.b"]))
        h = ops.dropout(h, c.dropout_p, rng.split(0) if rng else None, active)
        return ops.scale(ops.linear(h, p["head.out.w"], p["head.out.b"]),
                         c.output_scale)


MODEL_TYPES = {"focalerrornet": (FocalErrorNet, FocalErrorNetConfig),
               "baseline": (BaselineCnn, BaselineCnnConfig)}


def build_model(kind, config=None, params=None, rng=None):
    if kind not in MODEL_TYPES:
        raise ValueError(f"unknown model kind {kind!r}")
    cls, _ = MODEL_TYPES[kind]
    return cls(config, params, rng)
