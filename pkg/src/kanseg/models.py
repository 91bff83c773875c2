"""
U-Net and U-KAN segmentation networks.

A ``Model`` is an ordered list of named layers. Each layer reads the outputs
of earlier layers by name (``"input"`` is the image batch) and writes its own
output under its name, so skip connections are plain references and every
intermediate map can be captured or overridden, which is what Grad-CAM needs.

Both architectures share the encoder/decoder stages. They differ only in the
bottleneck: ``tok_kan_depth`` residual blocks that are either two 3x3
conv-norm-relu layers (U-Net) or a Tok-KAN block (U-KAN):

    tokenize -> kan_linear -> depthwise 3x3 conv -> layer_norm -> detokenize

FLOPs are counted analytically, multiply-add = 2:

    ==========  ==============================================
    conv        2 * kh * kw * Cin * Cout * H' * W'
    dwconv      2 * kh * kw * C * H' * W'
    kan         per input scalar: 4 (silu) + 2*k*(G+k) (basis)
                + 2*m*(G+k+1) (weighted sums)
    norm        7 per element
    relu, add   1 per element
    maxpool     1 per input element
    upsample    7 per output element
    reshapes    0
    ==========  ==============================================
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nm
from .errors import ConfigurationError, DimensionError, LoadError
from .numerics import Tensor
from .splinekan import SplineGrid, kan_linear

__all__ = [
    "ModelConfig",
    "Layer",
    "Model",
    "build_unet",
    "build_ukan",
    "build_model",
    "tokenize",
    "detokenize",
    "count_flops",
    "flop_report",
    "save_checkpoint",
    "load_checkpoint",
    "read_checkpoint_header",
]

NORM_EPS = 1e-5
CHECKPOINT_MAGIC = b"KSEGCKPT"
CHECKPOINT_VERSION = 1

_CONFIG_KEYS = {
    "in_channels",
    "stage_channels",
    "bottleneck",
    "tok_kan_depth",
    "token_patch",
    "kan_grid",
    "input_size",
}


@dataclass
class ModelConfig:
    in_channels: int = 3
    stage_channels: tuple[int, ...] = (8, 16)
    bottleneck: str = "conv"
    tok_kan_depth: int = 1
    token_patch: int = 1
    kan_grid: SplineGrid = field(default_factory=SplineGrid)
    input_size: tuple[int, int] = (32, 32)

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.input_size = tuple(int(s) for s in self.input_size)
        if isinstance(self.kan_grid, dict):
            self.kan_grid = SplineGrid.from_dict(self.kan_grid)
        self.validate()

    def validate(self) -> None:
        if self.in_channels < 1:
            raise ConfigurationError("in_channels must be positive")
        if not self.stage_channels or min(self.stage_channels) < 1:
            raise ConfigurationError("stage_channels must be non-empty and strictly positive")
        if self.bottleneck not in ("conv", "tok_kan"):
            raise ConfigurationError(f"bottleneck must be 'conv' or 'tok_kan', got {self.bottleneck!r}")
        if self.tok_kan_depth < 1 or self.token_patch < 1:
            raise ConfigurationError("tok_kan_depth and token_patch must be >= 1")
        if len(self.input_size) != 2:
            raise ConfigurationError("input_size must be (H, W)")
        div = 2 ** len(self.stage_channels)
        for axis, n in zip("HW", self.input_size):
            if n % div:
                raise ConfigurationError(f"input {axis}={n} is not divisible by 2^{len(self.stage_channels)}")
            if (n // div) % self.token_patch:
                raise ConfigurationError(
                    f"bottleneck {axis}={n // div} is not divisible by token_patch={self.token_patch}"
                )

    @property
    def bottleneck_size(self) -> tuple[int, int]:
        div = 2 ** len(self.stage_channels)
        return self.input_size[0] // div, self.input_size[1] // div

    def with_bottleneck(self, kind: str) -> "ModelConfig":
        d = self.to_dict()
        d["bottleneck"] = kind
        return ModelConfig.from_dict(d)

    def to_dict(self) -> dict:
        return {
            "in_channels": int(self.in_channels),
            "stage_channels": list(self.stage_channels),
            "bottleneck": self.bottleneck,
            "tok_kan_depth": int(self.tok_kan_depth),
            "token_patch": int(self.token_patch),
            "kan_grid": self.kan_grid.to_dict(),
            "input_size": list(self.input_size),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - _CONFIG_KEYS
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        if "kan_grid" in d:
            grid = d["kan_grid"]
            if isinstance(grid, dict):
                extra = set(grid) - {"grid_min", "grid_max", "intervals", "order"}
                if extra:
                    raise ConfigurationError(f"unknown kan_grid keys: {sorted(extra)}")
                base = SplineGrid().to_dict()
                base.update(grid)
                d["kan_grid"] = SplineGrid.from_dict(base)
        return cls(**d)


@dataclass(frozen=True)
class Layer:
    name: str
    op: str
    inputs: tuple[str, ...]
    attrs: dict = field(default_factory=dict)
    params: tuple[str, ...] = ()


SPATIAL_OPS = {"conv", "dwconv", "norm", "relu", "maxpool", "upsample", "concat", "add", "token_grid", "detokenize"}


class Model:
    """Named layer graph plus its parameter registry."""

    def __init__(self, config: ModelConfig | None, layers: list[Layer], params: dict[str, np.ndarray],
                 grad_cam_layer: str | None = None):
        self.config = config
        self.layers = list(layers)
        self.params = dict(params)
        self.grad_cam_layer = grad_cam_layer
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ConfigurationError("layer names must be unique")

    @property
    def kind(self) -> str:
        if self.config is None:
            return "custom"
        return "ukan" if self.config.bottleneck == "tok_kan" else "unet"

    @property
    def output_name(self) -> str:
        return self.layers[-1].name if self.layers else "input"

    def layer(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise ValueError(f"unknown layer {name!r}")

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "Model":
        return Model(self.config, self.layers, {k: v.copy() for k, v in self.params.items()},
                     self.grad_cam_layer)

    def parameter_tensors(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def run(self, x, params: dict[str, Tensor] | None = None,
            intervene: dict[str, Callable[[Tensor], Tensor]] | None = None) -> dict[str, Tensor]:
        """Execute every layer and return all named activations."""
        x = nm.as_tensor(x)
        if x.ndim != 4:
            raise DimensionError(f"model input must be [B,C,H,W], got {x.shape}")
        if self.config is not None and x.shape[1] != self.config.in_channels:
            raise DimensionError(
                f"model expects {self.config.in_channels} input channels (axis 1), got {x.shape[1]}"
            )
        if params is None:
            params = self.parameter_tensors(requires_grad=False)
        intervene = intervene or {}
        acts: dict[str, Tensor] = {"input": x}
        for layer in self.layers:
            out = _apply(layer, [acts[i] for i in layer.inputs], params, self.config)
            if layer.name in intervene:
                out = intervene[layer.name](out)
            acts[layer.name] = out
        return acts

    def forward(self, x, params: dict[str, Tensor] | None = None) -> Tensor:
        return self.run(x, params)[self.output_name]

    __call__ = forward

    def predict_proba(self, images: np.ndarray) -> np.ndarray:
        logits = self.forward(Tensor(images)).data
        return nm._sigmoid(logits)


# ---------------------------------------------------------------------------
# tokens


def tokenize(fmap, patch: int) -> Tensor:
    """[B,C,H,W] -> [B, (H/p)*(W/p), C*p*p]; tokens row-major, features (c, dy, dx)."""
    fmap = nm.as_tensor(fmap)
    B, C, H, W = fmap.shape
    if H % patch or W % patch:
        raise DimensionError(f"tokenize: H={H}, W={W} (axes 2, 3) not divisible by patch {patch}")
    h, w = H // patch, W // patch
    t = nm.reshape(fmap, (B, C, h, patch, w, patch))
    t = nm.transpose(t, (0, 2, 4, 1, 3, 5))
    return nm.reshape(t, (B, h * w, C * patch * patch))


def detokenize(tokens, patch: int, channels: int, height: int, width: int) -> Tensor:
    tokens = nm.as_tensor(tokens)
    B, N, D = tokens.shape
    h, w = height // patch, width // patch
    if N != h * w or D != channels * patch * patch:
        raise DimensionError(f"detokenize: tokens {tokens.shape} do not match {channels}x{height}x{width}")
    t = nm.reshape(tokens, (B, h, w, channels, patch, patch))
    t = nm.transpose(t, (0, 3, 1, 4, 2, 5))
    return nm.reshape(t, (B, channels, height, width))


def _apply(layer: Layer, xs: list[Tensor], params: dict[str, Tensor], config) -> Tensor:
    a = layer.attrs
    p = [params[n] for n in layer.params]
    op = layer.op
    if op == "conv":
        return nm.conv2d(xs[0], p[0], p[1], stride=1, padding=a["padding"])
    if op == "dwconv":
        return nm.depthwise_conv2d(xs[0], p[0], p[1], padding=a["padding"])
    if op == "norm":
        return nm.channel_norm(xs[0], p[0], p[1], NORM_EPS)
    if op == "token_norm":
        return nm.layer_norm(xs[0], p[0], p[1], NORM_EPS)
    if op == "relu":
        return nm.relu(xs[0])
    if op == "maxpool":
        return nm.max_pool2d(xs[0], a["k"])
    if op == "upsample":
        return nm.upsample_bilinear(xs[0], a["factor"])
    if op == "concat":
        return nm.concat(xs, axis=1)
    if op == "add":
        return nm.add(xs[0], xs[1])
    if op == "tokenize":
        return tokenize(xs[0], a["patch"])
    if op == "kan":
        return kan_linear(xs[0], p[0], p[1], config.kan_grid)
    if op == "token_grid":
        B, N, D = xs[0].shape
        t = nm.reshape(xs[0], (B, a["h"], a["w"], D))
        return nm.transpose(t, (0, 3, 1, 2))
    if op == "grid_tokens":
        B, D, h, w = xs[0].shape
        return nm.reshape(nm.transpose(xs[0], (0, 2, 3, 1)), (B, h * w, D))
    if op == "detokenize":
        return detokenize(xs[0], a["patch"], a["channels"], a["height"], a["width"])
    raise ConfigurationError(f"unknown layer op {op!r}")


# ---------------------------------------------------------------------------
# builders


class _Builder:
    def __init__(self, rng):
        self.rng = rng
        self.layers: list[Layer] = []
        self.params: dict[str, np.ndarray] = {}

    def add(self, name, op, inputs, attrs=None, params=None):
        params = params or {}
        for pname, value in params.items():
            self.params[f"{name}.{pname}"] = value
        self.layers.append(Layer(name, op, tuple(inputs), dict(attrs or {}),
                                 tuple(f"{name}.{p}" for p in params)))
        return name

    def conv(self, name, src, cin, cout, k=3, zero=False):
        std = 0.0 if zero else np.sqrt(2.0 / (cin * k * k))
        return self.add(name, "conv", [src], {"padding": k // 2, "k": k, "cin": cin, "cout": cout}, {
            "weight": self.rng.normal(0.0, std, size=(cout, cin, k, k)),
            "bias": np.zeros(cout),
        })

    def norm(self, name, src, c):
        return self.add(name, "norm", [src], {"channels": c}, {"gamma": np.ones(c), "beta": np.zeros(c)})

    def cbr(self, prefix, src, cin, cout, idx):
        x = self.conv(f"{prefix}.conv{idx}", src, cin, cout)
        x = self.norm(f"{prefix}.norm{idx}", x, cout)
        return self.add(f"{prefix}.relu{idx}", "relu", [x])


def _conv_bottleneck(b: _Builder, src: str, c: int, depth: int) -> str:
    x = src
    for d in range(1, depth + 1):
        prefix = f"bneck{d}"
        y = b.cbr(prefix, x, c, c, 1)
        y = b.cbr(prefix, y, c, c, 2)
        x = b.add(f"{prefix}.add", "add", [x, y])
    return x


def _tok_kan_bottleneck(b: _Builder, src: str, c: int, cfg: ModelConfig) -> str:
    patch = cfg.token_patch
    H, W = cfg.bottleneck_size
    h, w = H // patch, W // patch
    dim = c * patch * patch
    grid = cfg.kan_grid
    x = src
    for d in range(1, cfg.tok_kan_depth + 1):
        prefix = f"bneck{d}"
        t = b.add(f"{prefix}.tokenize", "tokenize", [x], {"patch": patch})
        bound = 1.0 / np.sqrt(dim)
        t = b.add(f"{prefix}.kan", "kan", [t], {"in_dim": dim, "out_dim": dim}, {
            "base_weights": b.rng.uniform(-bound, bound, size=(dim, dim)),
            "spline_coeffs": b.rng.normal(0.0, 0.1 / np.sqrt(dim), size=(dim, dim, grid.num_basis)),
        })
        g = b.add(f"{prefix}.grid", "token_grid", [t], {"h": h, "w": w})
        g = b.add(f"{prefix}.dwconv", "dwconv", [g], {"padding": 1, "k": 3, "channels": dim}, {
            "weight": b.rng.normal(0.0, np.sqrt(2.0 / 9.0), size=(dim, 1, 3, 3)),
            "bias": np.zeros(dim),
        })
        t = b.add(f"{prefix}.tokens", "grid_tokens", [g])
        t = b.add(f"{prefix}.norm", "token_norm", [t], {"dim": dim},
                  {"gamma": np.ones(dim), "beta": np.zeros(dim)})
        y = b.add(f"{prefix}.detokenize", "detokenize", [t],
                  {"patch": patch, "channels": c, "height": H, "width": W})
        x = b.add(f"{prefix}.add", "add", [x, y])
    return x


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    config.validate()
    b = _Builder(np.random.default_rng(seed))
    stages = config.stage_channels
    x, cin, skips = "input", config.in_channels, []
    for i, c in enumerate(stages, start=1):
        y = b.cbr(f"enc{i}", x, cin, c, 1)
        y = b.cbr(f"enc{i}", y, c, c, 2)
        skips.append(y)
        x = b.add(f"enc{i}.pool", "maxpool", [y], {"k": 2})
        cin = c
    if config.bottleneck == "conv":
        x = _conv_bottleneck(b, x, cin, config.tok_kan_depth)
    else:
        x = _tok_kan_bottleneck(b, x, cin, config)
    for i in range(len(stages), 0, -1):
        c = stages[i - 1]
        u = b.add(f"dec{i}.up", "upsample", [x], {"factor": 2})
        u = b.cbr(f"dec{i}", u, cin, c, 0)
        u = b.add(f"dec{i}.cat", "concat", [u, skips[i - 1]])
        u = b.cbr(f"dec{i}", u, 2 * c, c, 1)
        x = b.cbr(f"dec{i}", u, c, c, 2)
        cin = c
    grad_cam_layer = x
    # zero head: logits start at 0 so every pixel begins at p = 0.5
    b.conv("head", x, cin, 1, k=1, zero=True)
    return Model(config, b.layers, b.params, grad_cam_layer=grad_cam_layer)


def build_unet(config: ModelConfig, seed: int = 0) -> Model:
    if config.bottleneck != "conv":
        raise ConfigurationError("build_unet needs bottleneck='conv'")
    return build_model(config, seed)


def build_ukan(config: ModelConfig, seed: int = 0) -> Model:
    if config.bottleneck != "tok_kan":
        raise ConfigurationError("build_ukan needs bottleneck='tok_kan'")
    return build_model(config, seed)


# ---------------------------------------------------------------------------
# FLOPs


def _infer_shapes(model: Model, input_shape) -> dict[str, tuple[int, ...]]:
    shape = tuple(int(s) for s in input_shape)
    if len(shape) == 3:
        shape = (1,) + shape
    shapes = {"input": shape}
    for layer in model.layers:
        ins = [shapes[i] for i in layer.inputs]
        a = layer.attrs
        s = ins[0]
        op = layer.op
        if op == "conv":
            out = (s[0], a["cout"], s[2], s[3])
        elif op == "maxpool":
            out = (s[0], s[1], s[2] // a["k"], s[3] // a["k"])
        elif op == "upsample":
            out = (s[0], s[1], s[2] * a["factor"], s[3] * a["factor"])
        elif op == "concat":
            out = (s[0], sum(i[1] for i in ins), s[2], s[3])
        elif op == "tokenize":
            p = a["patch"]
            out = (s[0], (s[2] // p) * (s[3] // p), s[1] * p * p)
        elif op == "kan":
            out = s[:-1] + (a["out_dim"],)
        elif op == "token_grid":
            out = (s[0], s[2], a["h"], a["w"])
        elif op == "grid_tokens":
            out = (s[0], s[2] * s[3], s[1])
        elif op == "detokenize":
            out = (s[0], a["channels"], a["height"], a["width"])
        else:
            out = s
        shapes[layer.name] = out
    return shapes


def flop_report(model: Model, input_shape) -> dict[str, int]:
    """Per-layer analytic FLOPs plus ``total`` for one forward pass."""
    shapes = _infer_shapes(model, input_shape)
    report: dict[str, int] = {}
    grid = model.config.kan_grid if model.config is not None else SplineGrid()
    for layer in model.layers:
        out = shapes[layer.name]
        s = shapes[layer.inputs[0]]
        a = layer.attrs
        n_out = int(np.prod(out))
        op = layer.op
        if op == "conv":
            k = a["k"]
            f = 2 * k * k * a["cin"] * a["cout"] * out[0] * out[2] * out[3]
        elif op == "dwconv":
            k = a["k"]
            f = 2 * k * k * out[1] * out[0] * out[2] * out[3]
        elif op == "kan":
            G, k = grid.intervals, grid.order
            per_scalar = 4 + 2 * k * (G + k) + 2 * a["out_dim"] * (G + k + 1)
            f = int(np.prod(s)) * per_scalar
        elif op in ("norm", "token_norm"):
            f = 7 * n_out
        elif op in ("relu", "add"):
            f = n_out
        elif op == "maxpool":
            f = int(np.prod(s))
        elif op == "upsample":
            f = 7 * n_out
        else:
            f = 0
        report[layer.name] = int(f)
    report["total"] = int(sum(report.values()))
    return report


def count_flops(model: Model, input_shape=None) -> int:
    if input_shape is None:
        if model.config is None:
            return 0
        input_shape = (model.config.in_channels, *model.config.input_size)
    return flop_report(model, input_shape)["total"]


# ---------------------------------------------------------------------------
# checkpoints


def _header_for(model: Model) -> tuple[dict, list[np.ndarray]]:
    manifest, blobs, offset = [], [], 0
    for name, value in model.params.items():
        arr = np.ascontiguousarray(value, dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
        blobs.append(arr)
    header = {
        "format": "kanseg-checkpoint",
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "config": model.config.to_dict() if model.config is not None else None,
        "grad_cam_layer": model.grad_cam_layer,
        "dtype": "float64-le",
        "params": manifest,
        "blob_nbytes": offset,
    }
    return header, blobs


def save_checkpoint(model: Model, path) -> None:
    """Layout: magic(8) | u32 version | u64 header length | JSON header | raw <f8 blob."""
    header, blobs = _header_for(model)
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(raw)))
        fh.write(raw)
        for arr in blobs:
            fh.write(arr.tobytes())


def _read(path) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        data = fh.read()
    prefix = len(CHECKPOINT_MAGIC) + 12
    if len(data) < prefix or data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise LoadError(f"{path}: not a kanseg checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", data[len(CHECKPOINT_MAGIC):prefix])
    if version != CHECKPOINT_VERSION:
        raise LoadError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if len(data) < prefix + hlen:
        raise LoadError(f"{path}: truncated header")
    try:
        header = json.loads(data[prefix : prefix + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise LoadError(f"{path}: unreadable header ({exc})") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise LoadError(f"{path}: header version {header.get('version')} mismatch")
    return header, data[prefix + hlen :]


def read_checkpoint_header(path) -> dict:
    return _read(path)[0]


def load_checkpoint(path) -> Model:
    header, blob = _read(path)
    expected = header.get("blob_nbytes")
    manifest = header.get("params", [])
    if sum(p["nbytes"] for p in manifest) != expected:
        raise LoadError(f"{path}: manifest sizes disagree with blob_nbytes")
    if len(blob) != expected:
        raise LoadError(f"{path}: blob holds {len(blob)} bytes, manifest says {expected}")
    if header.get("config") is None:
        raise LoadError(f"{path}: checkpoint has no model config")
    model = build_model(ModelConfig.from_dict(header["config"]))
    if [p["name"] for p in manifest] != list(model.params):
        raise LoadError(f"{path}: parameter names do not match the configured architecture")
    params = {}
    for entry in manifest:
        shape = tuple(entry["shape"])
        if shape != model.params[entry["name"]].shape or entry["nbytes"] != 8 * int(np.prod(shape)):
            raise LoadError(f"{path}: parameter {entry['name']} has inconsistent shape {shape}")
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f8", count=int(np.prod(shape)), offset=start)
        params[entry["name"]] = arr.astype(np.float64).reshape(shape)
    model.params = params
    model.grad_cam_layer = header.get("grad_cam_layer") or model.grad_cam_layer
    return model
