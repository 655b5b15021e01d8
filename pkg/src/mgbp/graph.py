"""MGBPv2 / MGBP-3D generator.

The multigrid recursion is written once (``_run`` / ``_bp``) against a small
backend interface. The numeric backend evaluates it, taped or untaped; the
symbolic backend propagates shapes only and is used for the dry run that
instantiates tagged modules, for shape traces and for operation counts.

Level indexing follows the recursion: level ``L`` is the full (output)
resolution and level 1 the coarsest. ``channels`` are listed from high to
low resolution, so level ``k`` carries ``channels[L - k]`` features.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ad
from .tensor import ConvSpec, DimensionError

KINDS = ("Analysis", "Synthesis", "Downscale", "Upscale")


class ConfigError(ValueError):
    pass


class ShapeError(DimensionError):
    pass


@dataclass(frozen=True)
class MgbpConfig:
    levels: int
    mu: int
    channels: tuple
    scale_factor: int = 4
    level_stride: int = 2
    image_channels: int = 3
    noise_amp: float = 0.0
    dims: int = 2
    # temporal kernel of each down/up stage, from the top stage (level L -> L-1)
    # downwards; None means 1 everywhere
    temporal_kernels: tuple | None = None
    temporal_padding: bool = False

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.temporal_kernels is not None:
            object.__setattr__(self, "temporal_kernels",
                               tuple(int(k) for k in self.temporal_kernels))
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if self.mu < 1:
            raise ConfigError(f"mu must be >= 1, got {self.mu}")
        if len(self.channels) != self.levels:
            raise ConfigError(
                f"channels has {len(self.channels)} entries, levels is {self.levels}")
        if min(self.channels) < 1:
            raise ConfigError("channel counts must be >= 1")
        if self.level_stride not in (2, 3):
            raise ConfigError(f"level_stride must be 2 or 3, got {self.level_stride}")
        if self.scale_factor not in (2, 3, 4, 8, 16):
            raise ConfigError(f"scale_factor must be one of 2,3,4,8,16, got {self.scale_factor}")
        if self.noise_amp < 0 or not math.isfinite(self.noise_amp):
            raise ConfigError(f"noise_amp must be finite and >= 0, got {self.noise_amp}")
        if self.dims not in (2, 3):
            raise ConfigError(f"dims must be 2 or 3, got {self.dims}")
        tk = self.temporal_kernels
        if tk is not None:
            if self.dims != 3:
                raise ConfigError("temporal_kernels only apply to 3D configs")
            if len(tk) != self.levels - 1:
                raise ConfigError(
                    f"temporal_kernels needs {self.levels - 1} entries, got {len(tk)}")
            if min(tk, default=1) < 1:
                raise ConfigError("temporal kernels must be >= 1")
            if self.temporal_padding and any(k % 2 == 0 for k in tk):
                raise ConfigError("temporal padding needs odd temporal kernels")

    def level_channels(self, k):
        return self.channels[self.levels - k]

    def stage_temporal_kernel(self, k):
        """Temporal kernel of the down/up pair between level k and k-1."""
        if self.dims == 2:
            return None
        if self.temporal_kernels is None:
            return 1
        return self.temporal_kernels[self.levels - k]

    def frame_loss(self, k):
        """Frames lost between the top level and level k (no padding)."""
        if self.dims == 2 or self.temporal_padding:
            return 0
        return sum(self.stage_temporal_kernel(j) - 1 for j in range(k + 1, self.levels + 1))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        if d.get("temporal_kernels") is not None:
            d["temporal_kernels"] = tuple(d["temporal_kernels"])
        return cls(**d)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()


# Network configurations from the published table (factor -> mu, channels).
MGBPV2_TABLE = {
    2: (32, (192, 128)),
    3: (32, (192, 128)),
    4: (4, (192, 128, 64, 32)),
    8: (2, (192, 128, 64, 32, 16)),
    16: (2, (256, 192, 128, 92, 48, 9)),
}
MGBP3D_TABLE = {
    4: (6, (192, 128, 64, 32)),
    16: (2, (256, 192, 128, 92, 48, 9)),
}


def paper_config(factor, dims=2, **overrides):
    """Published MGBPv2 (dims=2) or MGBP-3D (dims=3) configuration."""
    table = MGBPV2_TABLE if dims == 2 else MGBP3D_TABLE
    if factor not in table:
        raise ConfigError(f"no published {dims}D configuration for factor {factor}")
    mu, channels = table[factor]
    kw = dict(levels=len(channels), mu=mu, channels=channels, scale_factor=factor,
              dims=dims, level_stride=3 if factor == 3 else 2)
    if dims == 3:
        kw["temporal_kernels"] = video_temporal_kernels(len(channels))
    kw.update(overrides)
    return MgbpConfig(**kw)


def video_temporal_kernels(levels):
    """Temporal kernel 3 on the four top stages, 1 below.

    A reconstruction: it turns 37 input frames into 29 at the coarsest level
    when temporal padding is off. The published text does not say which
    stages carry temporal kernels.
    """
    stages = levels - 1
    return tuple(3 if i < 4 else 1 for i in range(stages))


@dataclass(frozen=True)
class ModuleTag:
    """Identifies one parameterized module of the unfolded graph.

    ``path`` holds the step indices chosen at each enclosing level from the
    top down, so every Upscale/Downscale instance is distinct. ``step`` is
    the innermost index.
    """

    kind: str
    level: int = 0
    path: tuple = ()

    @property
    def step(self):
        return self.path[-1] if self.path else 0

    def __str__(self):
        if self.kind == "Synthesis":
            return "Synthesis"
        if self.kind == "Analysis":
            return f"Analysis_{self.level}"
        return f"{self.kind}_{self.level}@" + ".".join(str(s) for s in self.path)

    @classmethod
    def parse(cls, s):
        if s == "Synthesis":
            return cls("Synthesis")
        if s.startswith("Analysis_"):
            return cls("Analysis", int(s.split("_", 1)[1]))
        head, path = s.split("@")
        kind, level = head.split("_")
        return cls(kind, int(level), tuple(int(p) for p in path.split(".")))


def module_spec(cfg: MgbpConfig, tag: ModuleTag) -> ConvSpec:
    """Kernel/stride/padding/channels of the module behind ``tag``."""
    ls, L = cfg.level_stride, cfg.levels
    if tag.kind == "Analysis":
        s = ls ** (L - tag.level)
        kernel, stride, pad = (s + 2, s + 2), (s, s), (1, 1)
        if cfg.dims == 3:
            kernel = (1 + cfg.frame_loss(tag.level),) + kernel
            stride, pad = (1,) + stride, (0,) + pad
        return ConvSpec(kernel, stride, pad, cfg.image_channels + 1,
                        cfg.level_channels(tag.level))
    if tag.kind == "Synthesis":
        kernel, stride, pad = (3, 3), (1, 1), (1, 1)
        if cfg.dims == 3:
            kernel, stride, pad = (1, 3, 3), (1, 1, 1), (0, 1, 1)
        return ConvSpec(kernel, stride, pad, cfg.level_channels(L), cfg.image_channels)
    k = tag.level
    ks = 4 if ls == 2 else 5
    kernel, stride, pad = (ks, ks), (ls, ls), (1, 1)
    if cfg.dims == 3:
        kt = cfg.stage_temporal_kernel(k)
        kernel = (kt,) + kernel
        stride = (1,) + stride
        pad = ((kt - 1) // 2 if cfg.temporal_padding else 0,) + pad
    hi, lo = cfg.level_channels(k), cfg.level_channels(k - 1)
    if tag.kind == "Downscale":
        return ConvSpec(kernel, stride, pad, hi, lo)
    if tag.kind == "Upscale":
        return ConvSpec(kernel, stride, pad, 2 * lo, hi)
    raise ConfigError(f"unknown module kind {tag.kind!r}")


def is_transposed(tag):
    return tag.kind == "Upscale"


# -- the recursion --------------------------------------------------------

def _run(ops, cfg, x):
    """MGBPv2 body on the network input ``x = [X, W*noise]``."""
    L = cfg.levels
    ys = [None] + [ops.module(ModuleTag("Analysis", k), x) for k in range(1, L + 1)]
    y = _bp(ops, cfg, ys[L], ys, L, ())
    return ops.module(ModuleTag("Synthesis"), y)


def _bp(ops, cfg, u, ys, k, path):
    ops.enter(k, path, u)
    out = u
    if k > 1:
        for s in range(1, cfg.mu + 1):
            p = path + (s,)
            lr = ops.module(ModuleTag("Downscale", k, p), out)
            c = _bp(ops, cfg, lr, ys, k - 1, p)
            out = ops.add(out, ops.module(ModuleTag("Upscale", k, p),
                                          ops.concat(ys[k - 1], c)))
    ops.exit(k, path, out)
    return out


class NumericOps:
    """Evaluates modules with arrays or taped values from ``params``."""

    def __init__(self, cfg, params, relu=ad.relu):
        self.cfg = cfg
        self.params = params
        self.relu = relu
        self.leaf_calls = 0

    def module(self, tag, x):
        name = str(tag)
        spec = module_spec(self.cfg, tag)
        w, b = self.params[name + ".weight"], self.params[name + ".bias"]
        if is_transposed(tag):
            return ad.conv_transposed(self.relu(x), w, b, spec)
        return ad.conv(x, w, b, spec)

    def add(self, a, b):
        return ad.add(a, b)

    def concat(self, a, b):
        return ad.concat_channels(a, b)

    def enter(self, k, path, u):
        if k == 1:
            self.leaf_calls += 1

    def exit(self, k, path, out):
        pass


# -- symbolic execution ---------------------------------------------------

class _Sym:
    """Shape-only stand-in for a tensor; tracks live bytes while referenced."""

    __slots__ = ("shape", "nbytes", "owner", "__weakref__")

    def __init__(self, shape, owner):
        self.shape = tuple(shape)
        self.owner = owner
        self.nbytes = 0
        if self.shape and owner is not None:
            self.nbytes = math.prod(self.shape) * owner.itemsize
            owner._alloc(self.nbytes)

    def __del__(self):
        if self.owner is not None and self.nbytes:
            self.owner.live -= self.nbytes


@dataclass
class TraceRow:
    tag: str
    kind: str
    level: int
    in_shape: tuple
    out_shape: tuple
    macs: int = 0


@dataclass
class ShapeTrace:
    rows: list = field(default_factory=list)
    level_frames: dict = field(default_factory=dict)
    level_shapes: dict = field(default_factory=dict)
    peak_bytes: int = 0
    leaf_calls: int = 0

    def bp_rows(self):
        return [r for r in self.rows if r.kind == "BP"]

    def module_rows(self):
        return [r for r in self.rows if r.kind in KINDS]

    def total_macs(self):
        return sum(r.macs for r in self.rows)

    def volume_saving(self):
        """Fraction of frames saved at the coarsest level vs the top level."""
        if not self.level_frames:
            return 0.0
        top = self.level_frames[max(self.level_frames)]
        low = self.level_frames[min(self.level_frames)]
        return (top - low) / top


def conv_macs(spec, in_shape, out_shape, transposed):
    """Multiply-accumulates of one (transposed) convolution."""
    if transposed:
        return math.prod(in_shape) * spec.out_channels * spec.kernel_volume
    return math.prod(out_shape) * spec.in_channels * spec.kernel_volume


class SymbolicOps:
    """Shape propagation with MAC counting and live-memory accounting.

    With ``shapes=False`` nothing is computed; only the tags are visited
    (the dry run).
    """

    def __init__(self, cfg, shapes=True, itemsize=8):
        self.cfg = cfg
        self.shapes = shapes
        self.itemsize = itemsize
        self.trace = ShapeTrace()
        self.tags = []
        self.live = 0

    def _alloc(self, n):
        self.live += n
        self.trace.peak_bytes = max(self.trace.peak_bytes, self.live)

    def new(self, shape):
        return _Sym(shape, self if self.shapes else None)

    def module(self, tag, x):
        self.tags.append(tag)
        if not self.shapes:
            return x
        spec = module_spec(self.cfg, tag)
        name = str(tag)
        if x.shape[1] != spec.in_channels:
            raise ShapeError(f"{name}: input has {x.shape[1]} channels, "
                             f"module expects {spec.in_channels}")
        try:
            if is_transposed(tag):
                ext = spec.transposed_extent(x.shape[2:])
            else:
                ext = spec.out_extent(x.shape[2:])
        except ValueError as e:
            raise ShapeError(f"{name}: input {x.shape}: {e}") from None
        out_shape = (x.shape[0], spec.out_channels) + ext
        if is_transposed(tag):
            # the relu before the transposed conv materializes a copy
            tmp = self.new(x.shape)  # noqa: F841
        out = self.new(out_shape)
        self.trace.rows.append(TraceRow(
            name, tag.kind, tag.level, x.shape, out_shape,
            conv_macs(spec, x.shape, out_shape, is_transposed(tag))))
        return out

    def add(self, a, b):
        if not self.shapes:
            return a
        if a.shape != b.shape:
            raise ShapeError(f"residual add of {a.shape} and {b.shape}")
        return self.new(a.shape)

    def concat(self, a, b):
        if not self.shapes:
            return a
        if a.shape[:1] != b.shape[:1] or a.shape[2:] != b.shape[2:]:
            raise ShapeError(f"cannot concatenate reference {a.shape} with {b.shape}")
        return self.new((a.shape[0], a.shape[1] + b.shape[1]) + a.shape[2:])

    def enter(self, k, path, u):
        if k == 1:
            self.trace.leaf_calls += 1
        if self.shapes:
            self.trace.level_shapes.setdefault(k, u.shape)
            if self.cfg.dims == 3:
                self.trace.level_frames.setdefault(k, u.shape[2])

    def exit(self, k, path, out):
        if self.shapes:
            entry = self.trace.level_shapes[k]
            tag = f"BP_{k}@" + ".".join(str(s) for s in path)
            self.trace.rows.append(TraceRow(tag, "BP", k, entry, out.shape))


def dry_run(cfg):
    """Visit Algorithm 1 without computing; returns tags in visit order."""
    ops = SymbolicOps(cfg, shapes=False)
    _run(ops, cfg, None)
    return ops.tags, ops.trace.leaf_calls


def input_multiple(cfg):
    return cfg.level_stride ** (cfg.levels - 1)


def trace_shapes(cfg, input_shape, itemsize=8):
    """Per-module shapes, per-level frame counts and peak live bytes.

    ``input_shape`` is the shape of the image/cube ``X`` (without the
    noise channel).
    """
    input_shape = tuple(int(n) for n in input_shape)
    if len(input_shape) != cfg.dims + 2:
        raise ShapeError(f"{cfg.dims}D config needs a {cfg.dims + 2}-axis input, "
                         f"got {input_shape}")
    if input_shape[1] != cfg.image_channels:
        raise ShapeError(f"input has {input_shape[1]} channels, config expects "
                         f"{cfg.image_channels}")
    m = input_multiple(cfg)
    for n, name in zip(input_shape[-2:], ("height", "width")):
        if n % m:
            raise ShapeError(f"{name} {n} is not a multiple of {m} "
                             f"(level stride {cfg.level_stride}, {cfg.levels} levels)")
    ops = SymbolicOps(cfg, itemsize=itemsize)
    X = ops.new(input_shape)
    noise = ops.new((input_shape[0], 1) + input_shape[2:])
    x = ops.concat(X, noise)
    del noise
    Y = _run(ops, cfg, x)
    if Y.shape != input_shape:
        raise ShapeError(f"output shape {Y.shape} differs from input {input_shape}")
    return ops.trace


# -- the network ----------------------------------------------------------

@dataclass
class NetworkGraph:
    """Unfolded module list (dry-run order) plus parameters keyed by tag."""

    config: MgbpConfig
    tags: list
    params: dict

    def spec(self, tag):
        if isinstance(tag, str):
            tag = ModuleTag.parse(tag)
        return module_spec(self.config, tag)

    def param_count(self):
        return sum(int(v.size) for v in self.params.values())

    def with_params(self, params):
        return NetworkGraph(self.config, self.tags, params)

    def zeros_like(self):
        return self.with_params({k: np.zeros_like(v) for k, v in self.params.items()})

    def leaf_count(self):
        return self.config.mu ** (self.config.levels - 1)


def build(cfg: MgbpConfig, init_seed=0, dtype=np.float64) -> NetworkGraph:
    """Instantiate every tagged module found by a dry run.

    Weights and biases are drawn uniformly in +-1/sqrt(fan_in), in dry-run
    order, from a generator seeded with ``init_seed``.
    """
    tags, _ = dry_run(cfg)
    rng = np.random.default_rng(init_seed)
    params = {}
    for tag in tags:
        spec = module_spec(cfg, tag)
        shape = spec.weight_shape(transposed=is_transposed(tag))
        bound = 1.0 / math.sqrt(spec.in_channels * spec.kernel_volume)
        params[f"{tag}.weight"] = rng.uniform(-bound, bound, shape).astype(dtype)
        params[f"{tag}.bias"] = rng.uniform(-bound, bound, spec.out_channels).astype(dtype)
    return NetworkGraph(cfg, tags, params)


def make_noise(shape, seed):
    """Single full-resolution N(0,1) noise channel for an input of ``shape``."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal((shape[0], 1) + tuple(shape[2:]))


def network_input(X, W, noise_seed=0, noise=None):
    """``[X, W*noise]``; exactly zero noise channel when ``W == 0``."""
    Xv = ad.value_of(X)
    if W == 0:
        field_ = np.zeros((Xv.shape[0], 1) + Xv.shape[2:], dtype=Xv.dtype)
    else:
        if noise is None:
            noise = make_noise(Xv.shape, noise_seed)
        field_ = (W * noise).astype(Xv.dtype, copy=False)
    return ad.concat_channels(X, field_)


def forward(graph, X, noise_seed=0, W=None, noise=None, params=None, relu=ad.relu):
    """Generator output for the bicubic-upscaled input ``X``.

    ``params`` overrides the graph parameters (e.g. taped leaves);
    ``noise`` supplies an explicit N(0,1) field instead of sampling one.
    """
    cfg = graph.config
    if W is None:
        W = cfg.noise_amp
    trace_shapes(cfg, ad.value_of(X).shape)
    x = network_input(X, W, noise_seed, noise)
    ops = NumericOps(cfg, graph.params if params is None else params, relu)
    return _run(ops, cfg, x)


def bp_block(u, refs, k, graph, mu=None, path=None, params=None):
    """One back-projection block ``BP_k(u | y_1..y_{k-1})``.

    ``path`` selects which tagged instance to use (default: the first one
    visited by the dry run at level ``k``).
    """
    cfg = graph.config
    if mu is not None and mu != cfg.mu:
        raise ad.ContractError(f"graph was built with mu={cfg.mu}, got {mu}")
    if len(refs) != k - 1:
        raise ad.ContractError(f"BP_{k} needs {k - 1} references, got {len(refs)}")
    if path is None:
        path = (1,) * (cfg.levels - k)
    ops = NumericOps(cfg, graph.params if params is None else params)
    return _bp(ops, cfg, u, [None] + list(refs), k, tuple(path))


def analysis_outputs(graph, X, noise_seed=0, W=0.0):
    """The references ``y_1..y_L`` computed from the network input."""
    cfg = graph.config
    x = network_input(X, W, noise_seed)
    ops = NumericOps(cfg, graph.params)
    return [ops.module(ModuleTag("Analysis", k), x) for k in range(1, cfg.levels + 1)]
