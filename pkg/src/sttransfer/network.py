"""CNN + Inception + LSTM sequence model.

Per frame: two strided convolutions (each followed by relu and a 2x2
max-pool), two inception modules, a spatial average-pool and a linear
projection. The per-frame vectors run through a two-layer LSTM; the top
layer's final hidden state feeds three fully connected layers. The last of
those emits either two class logits (softmax head) or one steering value.

Class index 0 is ``SAFE`` and 1 is ``COLLISION``.
"""
from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field, replace
from enum import IntEnum
from typing import Any, NamedTuple

import numpy as np

from . import tensor as T
from .container import read_container, sha256_arrays, write_container
from .tensor import Tensor

# regression head output is multiplied by this, so unit-scale weights span +/-30 degrees
STEERING_SCALE_DEG = 30.0
HIDDEN_NOISE_STD = 0.1

CNN_PREFIXES = ("conv", "inc", "bridge")
LSTM_PREFIXES = ("lstm", "fc")


class Label(IntEnum):
    SAFE = 0
    COLLISION = 1


class ConfigError(ValueError):
    """Invalid network configuration, or a head/label mismatch."""


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: int
    stride: int

    @property
    def padding(self) -> int:
        return self.kernel // 2


@dataclass(frozen=True)
class InceptionSpec:
    """Branch widths: 1x1; 1x1 -> 3x3; 1x1 -> 5x5; 3x3 max-pool -> 1x1."""

    b1: int
    b3_reduce: int
    b3: int
    b5_reduce: int
    b5: int
    pool_proj: int

    @property
    def out_channels(self) -> int:
        return self.b1 + self.b3 + self.b5 + self.pool_proj


@dataclass(frozen=True)
class NetworkConfig:
    input_channels: int = 3
    frame_height: int = 24
    frame_width: int = 32
    sequence_length: int = 15
    conv: tuple[ConvSpec, ConvSpec] = (ConvSpec(16, 5, 2), ConvSpec(32, 3, 2))
    inception: tuple[InceptionSpec, InceptionSpec] = (
        InceptionSpec(8, 8, 16, 4, 8, 8),
        InceptionSpec(16, 12, 24, 6, 12, 12),
    )
    bridge_features: int = 64
    lstm_layers: int = 2
    lstm_hidden: int = 32
    fc_widths: tuple[int, int] = (32, 16)
    head: str = "classification"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.input_channels not in (3, 6):
            raise ConfigError(f"input_channels must be 3 or 6, got {self.input_channels}")
        if self.sequence_length < 1 or self.lstm_hidden < 1:
            raise ConfigError("sequence_length and lstm_hidden must be >= 1")
        if len(self.conv) != 2 or len(self.inception) != 2 or self.lstm_layers != 2 or len(self.fc_widths) != 2:
            raise ConfigError("architecture is fixed at 2 conv, 2 inception, 2 LSTM and 3 FC layers")
        if self.head not in ("classification", "regression"):
            raise ConfigError(f"head must be 'classification' or 'regression', got {self.head!r}")
        if self.frame_height < 1 or self.frame_width < 1 or self.bridge_features < 1:
            raise ConfigError("frame size and bridge width must be positive")
        h, w = self.frame_height, self.frame_width
        for spec in self.conv:
            if spec.kernel > h + 2 * spec.padding or spec.kernel > w + 2 * spec.padding:
                raise ConfigError(f"conv kernel {spec.kernel} does not fit a {h}x{w} input")
            h = T.pool_output_size(T.conv_output_size(h, spec.kernel, spec.stride, spec.padding), 2, 2, 0, True)
            w = T.pool_output_size(T.conv_output_size(w, spec.kernel, spec.stride, spec.padding), 2, 2, 0, True)
            if h < 1 or w < 1:
                raise ConfigError("frames too small for the convolution stack")

    @property
    def output_dim(self) -> int:
        return 2 if self.head == "classification" else 1

    @property
    def inception_grid(self) -> tuple[int, int]:
        """Spatial size (h, w) of the inception feature maps."""
        h, w = self.frame_height, self.frame_width
        for spec in self.conv:
            h = T.pool_output_size(T.conv_output_size(h, spec.kernel, spec.stride, spec.padding), 2, 2, 0, True)
            w = T.pool_output_size(T.conv_output_size(w, spec.kernel, spec.stride, spec.padding), 2, 2, 0, True)
        return h, w

    @property
    def inception_feature_dim(self) -> int:
        h, w = self.inception_grid
        return self.inception[1].out_channels * h * w

    def with_channels(self, n: int) -> "NetworkConfig":
        return replace(self, input_channels=n)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["conv"] = tuple(ConvSpec(**c) for c in d["conv"])
        d["inception"] = tuple(InceptionSpec(**c) for c in d["inception"])
        d["fc_widths"] = tuple(d["fc_widths"])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def parameter_shapes(cfg: NetworkConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every learnable tensor, in a fixed order."""
    shapes: dict[str, tuple[int, ...]] = {}
    cin = cfg.input_channels
    for i, spec in enumerate(cfg.conv, start=1):
        shapes[f"conv{i}.weight"] = (spec.out_channels, cin, spec.kernel, spec.kernel)
        shapes[f"conv{i}.bias"] = (spec.out_channels,)
        cin = spec.out_channels
    for i, inc in enumerate(cfg.inception, start=1):
        for branch, cout, cin_b, k in (
            ("b1", inc.b1, cin, 1),
            ("b3r", inc.b3_reduce, cin, 1),
            ("b3", inc.b3, inc.b3_reduce, 3),
            ("b5r", inc.b5_reduce, cin, 1),
            ("b5", inc.b5, inc.b5_reduce, 5),
            ("pool", inc.pool_proj, cin, 1),
        ):
            shapes[f"inc{i}.{branch}.weight"] = (cout, cin_b, k, k)
            shapes[f"inc{i}.{branch}.bias"] = (cout,)
        cin = inc.out_channels
    shapes["bridge.weight"] = (cin, cfg.bridge_features)
    shapes["bridge.bias"] = (cfg.bridge_features,)
    hid = cfg.lstm_hidden
    nin = cfg.bridge_features
    for layer in range(1, cfg.lstm_layers + 1):
        shapes[f"lstm{layer}.wx"] = (nin, 4 * hid)
        shapes[f"lstm{layer}.wh"] = (hid, 4 * hid)
        shapes[f"lstm{layer}.bias"] = (4 * hid,)
        nin = hid
    widths = (hid, *cfg.fc_widths, cfg.output_dim)
    for i in range(3):
        shapes[f"fc{i + 1}.weight"] = (widths[i], widths[i + 1])
        shapes[f"fc{i + 1}.bias"] = (widths[i + 1],)
    return shapes


def _fans(name: str, shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 4:
        rf = shape[2] * shape[3]
        return shape[1] * rf, shape[0] * rf
    return shape[0], shape[1]


def param_group(name: str) -> str:
    """``"cnn"`` for the per-frame extractor, ``"lstm"`` for the recurrent part and head."""
    if name.startswith(CNN_PREFIXES):
        return "cnn"
    if name.startswith(LSTM_PREFIXES):
        return "lstm"
    raise KeyError(name)


@dataclass
class Parameters:
    config: NetworkConfig
    tensors: dict[str, Tensor]
    seed: int | None = None
    scheme: str = "xavier-uniform"

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def values(self) -> list[Tensor]:
        return list(self.tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def copy(self) -> "Parameters":
        return Parameters(
            self.config,
            {k: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=k) for k, t in self.tensors.items()},
            self.seed,
            self.scheme,
        )

    def detached(self) -> "Parameters":
        """Same data, no gradient tracking: forward passes through it never touch ``grad``."""
        return Parameters(self.config, {k: t.detach() for k, t in self.tensors.items()}, self.seed, self.scheme)

    def zero_grad(self) -> None:
        T.zero_grad(self.tensors.values())

    def checksum(self) -> str:
        return sha256_arrays(sorted(self.arrays().items()))[:16]


def _named_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def init_parameters(config: NetworkConfig, seed: int) -> Parameters:
    """Xavier-uniform weights, zero biases; each tensor drawn from its own seeded stream."""
    dtype = T.get_dtype()
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith("bias"):
            arr = np.zeros(shape, dtype=dtype)
        else:
            bound = T.xavier_bound(*_fans(name, shape))
            arr = _named_rng(seed, name).uniform(-bound, bound, size=shape).astype(dtype)
        tensors[name] = Tensor(arr, requires_grad=True, name=name)
    return Parameters(config, tensors, seed)


@dataclass
class HiddenState:
    """Per LSTM layer, the ``(h, c)`` pair of vectors of length ``lstm_hidden``."""

    layers: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    @property
    def top_h(self) -> np.ndarray:
        return self.layers[-1][0]

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (h, c) in enumerate(self.layers, start=1):
            out[f"hidden.l{i}.h"] = h
            out[f"hidden.l{i}.c"] = c
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], dtype=None) -> "HiddenState":
        n = sum(1 for k in arrays if k.startswith("hidden.") and k.endswith(".h"))
        dtype = dtype or T.get_dtype()
        return cls([(arrays[f"hidden.l{i}.h"].astype(dtype), arrays[f"hidden.l{i}.c"].astype(dtype)) for i in range(1, n + 1)])

    @classmethod
    def zeros(cls, config: NetworkConfig) -> "HiddenState":
        z = np.zeros(config.lstm_hidden, dtype=T.get_dtype())
        return cls([(z.copy(), z.copy()) for _ in range(config.lstm_layers)])

    def equals(self, other: "HiddenState") -> bool:
        return len(self.layers) == len(other.layers) and all(
            np.array_equal(a, b) for pa, pb in zip(self.layers, other.layers) for a, b in zip(pa, pb)
        )


def init_hidden_random(config: NetworkConfig, seed: int) -> HiddenState:
    rng = np.random.default_rng([seed, zlib.crc32(b"hidden-noise")])
    dtype = T.get_dtype()
    layers = []
    for _ in range(config.lstm_layers):
        h = rng.normal(0.0, HIDDEN_NOISE_STD, config.lstm_hidden).astype(dtype)
        c = rng.normal(0.0, HIDDEN_NOISE_STD, config.lstm_hidden).astype(dtype)
        layers.append((h, c))
    return HiddenState(layers)


@dataclass
class ImageSequence:
    """``frames`` is (T, C, H, W) float32 in [0, 1]; exactly one of label/steering_angle is set."""

    frames: np.ndarray
    label: int | None = None
    steering_angle: float | None = None
    domain_id: str = ""
    seq_id: str = ""
    scene: Any = None

    def __post_init__(self):
        if self.frames.ndim != 4:
            raise ValueError(f"frames must be (T, C, H, W), got {self.frames.shape}")

    @property
    def length(self) -> int:
        return self.frames.shape[0]


# --------------------------------------------------------------------------- forward


class Trace(NamedTuple):
    """Graph handles from one batched forward pass."""

    inputs: Tensor  # (N, T, C, H, W)
    inception: Tensor  # (N*T, C2, h, w), second inception module output
    final: list[tuple[Tensor, Tensor]]  # per layer (h, c), each (N, hidden)
    raw: Tensor  # (N, out): class logits, or steering in degrees


def _conv_relu(x: Tensor, p: Parameters, name: str, stride: int = 1, padding: int | None = None) -> Tensor:
    w = p[f"{name}.weight"]
    pad = w.shape[-1] // 2 if padding is None else padding
    return T.relu(T.conv2d(x, w, p[f"{name}.bias"], stride=stride, padding=pad))


def _inception(x: Tensor, p: Parameters, name: str) -> Tensor:
    b1 = _conv_relu(x, p, f"{name}.b1")
    b3 = _conv_relu(_conv_relu(x, p, f"{name}.b3r"), p, f"{name}.b3")
    b5 = _conv_relu(_conv_relu(x, p, f"{name}.b5r"), p, f"{name}.b5")
    bp = _conv_relu(T.max_pool2d(x, kernel=3, stride=1, padding=1), p, f"{name}.pool")
    return T.concat([b1, b3, b5, bp], axis=1)


def frame_features(params: Parameters, frames: Tensor) -> Tensor:
    """Second inception module output for a stack of frames (M, C, H, W)."""
    cfg = params.config
    x = frames
    for i, spec in enumerate(cfg.conv, start=1):
        x = _conv_relu(x, params, f"conv{i}", stride=spec.stride, padding=spec.padding)
        x = T.max_pool2d(x, kernel=2, stride=2, ceil_mode=True)
    T.check_finite(x, "conv")
    x = _inception(x, params, "inc1")
    T.check_finite(x, "inception1")
    x = _inception(x, params, "inc2")
    return T.check_finite(x, "inception2")


def _lstm_layer(xs: Tensor, p: Parameters, name: str, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Run one LSTM layer over xs (N, T, F); gate order [input, forget, cell, output]."""
    n, steps, feat = xs.shape
    hid = h.shape[1]
    proj = T.linear(T.reshape(xs, (n * steps, feat)), p[f"{name}.wx"], p[f"{name}.bias"])
    proj = T.reshape(proj, (n, steps, 4 * hid))
    wh = p[f"{name}.wh"]
    outs = []
    for t in range(steps):
        gates = T.add(T.select(proj, 1, t), T.matmul(h, wh))
        sig = T.sigmoid(T.slice_axis(gates, 1, 0, 2 * hid))
        i_gate = T.slice_axis(sig, 1, 0, hid)
        f_gate = T.slice_axis(sig, 1, hid, 2 * hid)
        g_gate = T.tanh(T.slice_axis(gates, 1, 2 * hid, 3 * hid))
        o_gate = T.sigmoid(T.slice_axis(gates, 1, 3 * hid, 4 * hid))
        c = T.add(T.mul(f_gate, c), T.mul(i_gate, g_gate))
        h = T.mul(o_gate, T.tanh(c))
        outs.append(h)
    return T.stack(outs, axis=1), h, c


def _tile(v: np.ndarray, n: int) -> Tensor:
    return T.Tensor(np.tile(v.astype(T.get_dtype()), (n, 1)))


def trace(params: Parameters, frames, h0: HiddenState | None = None, track_input: bool = False) -> Trace:
    """Batched forward over frames (N, T, C, H, W); builds the graph when grads are enabled."""
    cfg = params.config
    x = frames if isinstance(frames, Tensor) else Tensor(frames, requires_grad=track_input)
    if x.ndim != 5:
        raise T.ShapeError(f"expected frames (N, T, C, H, W), got {x.shape}")
    n, steps, ch, hgt, wid = x.shape
    if (ch, hgt, wid) != (cfg.input_channels, cfg.frame_height, cfg.frame_width):
        raise T.ShapeError(
            f"frames {ch}x{hgt}x{wid} do not match config "
            f"{cfg.input_channels}x{cfg.frame_height}x{cfg.frame_width}"
        )
    h0 = h0 if h0 is not None else HiddenState.zeros(cfg)
    if len(h0.layers) != cfg.lstm_layers or any(h.shape != (cfg.lstm_hidden,) for h, _ in h0.layers):
        raise T.ShapeError("initial hidden state does not match lstm_layers/lstm_hidden")

    inc = frame_features(params, T.reshape(x, (n * steps, ch, hgt, wid)))
    feats = T.linear(T.avg_pool_spatial(inc), params["bridge.weight"], params["bridge.bias"])
    seq = T.reshape(feats, (n, steps, cfg.bridge_features))
    final = []
    for layer, (h_init, c_init) in enumerate(h0.layers, start=1):
        seq, h, c = _lstm_layer(seq, params, f"lstm{layer}", _tile(h_init, n), _tile(c_init, n))
        final.append((h, c))
    T.check_finite(h, "lstm")
    z = T.relu(T.linear(h, params["fc1.weight"], params["fc1.bias"]))
    z = T.relu(T.linear(z, params["fc2.weight"], params["fc2.bias"]))
    raw = T.linear(z, params["fc3.weight"], params["fc3.bias"])
    if cfg.head == "regression":
        raw = T.mul(raw, STEERING_SCALE_DEG)
    T.check_finite(raw, "head")
    return Trace(x, inc, final, raw)


class BatchOutput(NamedTuple):
    output: np.ndarray  # (N, 2) probabilities or (N, 1) degrees
    hidden: list[tuple[np.ndarray, np.ndarray]]  # per layer (h, c), each (N, hidden)
    inception: np.ndarray  # (N, T, D) flattened second-inception output per frame


def forward_batch(params: Parameters, frames: np.ndarray, h0: HiddenState | None = None) -> BatchOutput:
    with T.no_grad():
        tr = trace(params, frames, h0)
    n, steps = frames.shape[:2]
    out = tr.raw.data
    if params.config.head == "classification":
        out = T._softmax(out)
    hidden = [(h.data, c.data) for h, c in tr.final]
    return BatchOutput(out, hidden, tr.inception.data.reshape(n, steps, -1))


class ForwardResult(NamedTuple):
    output: np.ndarray
    hidden: HiddenState
    inception_features: np.ndarray  # (T, D)


def forward(params: Parameters, seq: ImageSequence | np.ndarray, h0: HiddenState | None = None) -> ForwardResult:
    """Single-sequence forward: output, final hidden state, per-frame inception features."""
    frames = seq.frames if isinstance(seq, ImageSequence) else seq
    if frames.shape[0] != params.config.sequence_length:
        raise T.ShapeError(f"sequence has {frames.shape[0]} frames, config expects {params.config.sequence_length}")
    b = forward_batch(params, frames[None], h0)
    hidden = HiddenState([(h[0], c[0]) for h, c in b.hidden])
    return ForwardResult(b.output[0], hidden, b.inception[0])


def classify(params: Parameters, seq: ImageSequence | np.ndarray, h0: HiddenState | None = None) -> Label:
    if params.config.head != "classification":
        raise ConfigError("classify() needs a classification head")
    return decide(forward(params, seq, h0).output)


def decide(probs: np.ndarray) -> Label:
    """Argmax over (safe, collision); an exact tie goes to SAFE."""
    return Label.COLLISION if probs[Label.COLLISION] > probs[Label.SAFE] else Label.SAFE


# --------------------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    params: Parameters
    hidden: HiddenState  # start state used for every sequence
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, params: Parameters, hidden: HiddenState, meta: dict | None = None) -> None:
    """Config block plus named float32 blobs; see :mod:`sttransfer.container` for the layout."""
    blobs = {k: v.astype(np.float32) for k, v in params.arrays().items()}
    blobs.update({k: v.astype(np.float32) for k, v in hidden.arrays().items()})
    header = {
        "config": params.config.to_dict(),
        "config_digest": params.config.digest(),
        "init_seed": params.seed,
        "scheme": params.scheme,
        "extra": meta or {},
    }
    write_container(path, "checkpoint", header, blobs)


def load_checkpoint(path) -> Checkpoint:
    meta, blobs = read_container(path, expect_kind="checkpoint")
    cfg = NetworkConfig.from_dict(meta["config"])
    if cfg.digest() != meta["config_digest"]:
        raise ConfigError(f"{path}: config digest mismatch")
    dtype = T.get_dtype()
    tensors = {}
    for name, shape in parameter_shapes(cfg).items():
        arr = blobs[name]
        if tuple(arr.shape) != shape:
            raise ConfigError(f"{path}: tensor {name} has shape {arr.shape}, config expects {shape}")
        tensors[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    params = Parameters(cfg, tensors, meta.get("init_seed"), meta.get("scheme", "xavier-uniform"))
    return Checkpoint(params, HiddenState.from_arrays(blobs), meta.get("extra", {}))
