"""Two-phase training: source-domain training, bundle harvest, target-domain training.

Phase 1 trains from scratch (Xavier weights, noisy LSTM start state). The
trained weights and a mean LSTM state are packed into a :class:`TransferBundle`;
Phase 2 starts from that bundle and trains on the target domain, with
saliency, Grad-CAM and edge maps stacked as three extra input channels for
the sequences that have maps (zeros for the rest).
"""
from __future__ import annotations

import math
import time
import warnings
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .container import read_container, write_container
from .network import (
    STEERING_SCALE_DEG,
    ConfigError,
    HiddenState,
    ImageSequence,
    NetworkConfig,
    Parameters,
    forward_batch,
    init_hidden_random,
    init_parameters,
    param_group,
    trace,
)
from .salient import SalientMaps

EVAL_BATCH = 64
AUX_CHANNELS = 3


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    salient_subset_ratio: float = 0.10
    loss: str = "auto"  # "cross_entropy", "mse", or "auto" (picked from the head)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    stop_at_accuracy: float | None = None  # end early once train accuracy reaches this

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("epochs must be >= 0, batch_size >= 1 and learning_rate > 0")
        if not 0 <= self.salient_subset_ratio <= 1:
            raise ValueError("salient_subset_ratio must lie in [0, 1]")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in ("auto", "cross_entropy", "mse"):
            raise ValueError(f"unknown loss {self.loss!r}")

    def loss_for(self, cfg: NetworkConfig) -> str:
        expected = "cross_entropy" if cfg.head == "classification" else "mse"
        if self.loss not in ("auto", expected):
            raise ConfigError(f"loss {self.loss!r} does not fit a {cfg.head} head")
        return expected

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float  # mean minibatch loss during the epoch
    train_metric: float  # accuracy, or MAE in degrees, over the whole training set after the epoch
    val_metric: float | None
    seconds: float


@dataclass
class TrainingHistory:
    metric: str  # "accuracy" or "mae_deg"
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def train_metric(self) -> list[float]:
        return [r.train_metric for r in self.records]

    def epochs_to(self, accuracy: float) -> int | None:
        """First (1-based) epoch whose train accuracy reaches ``accuracy``; None if never."""
        for r in self.records:
            if r.train_metric >= accuracy:
                return r.epoch
        return None

    def to_dict(self, with_time: bool = True) -> dict:
        recs = [asdict(r) for r in self.records]
        if not with_time:
            for r in recs:
                r.pop("seconds")
        return {"metric": self.metric, "records": recs}


@dataclass(frozen=True)
class AblationFlags:
    transfer_cnn: bool = True
    transfer_lstm_weights: bool = True
    transfer_hidden: bool = True

    @classmethod
    def none(cls) -> "AblationFlags":
        return cls(False, False, False)


@dataclass
class TransferBundle:
    source_config: NetworkConfig
    cnn_and_inception_weights: dict[str, np.ndarray]
    lstm_weights: dict[str, np.ndarray]  # LSTM layers and the fully connected head
    harvested_hidden: HiddenState
    source_config_digest: str
    flags: AblationFlags = AblationFlags()


# --------------------------------------------------------------------------- data plumbing


def _check_labels(dataset: list[ImageSequence], cfg: NetworkConfig) -> None:
    if not dataset:
        raise ValueError("dataset is empty")
    for seq in dataset:
        if cfg.head == "classification" and seq.label is None:
            raise ConfigError(f"sequence {seq.seq_id!r} has no class label but the head is classification")
        if cfg.head == "regression" and seq.steering_angle is None:
            raise ConfigError(f"sequence {seq.seq_id!r} has no steering angle but the head is regression")


def targets_of(dataset: list[ImageSequence], cfg: NetworkConfig) -> np.ndarray:
    _check_labels(dataset, cfg)
    if cfg.head == "classification":
        return np.array([int(s.label) for s in dataset], dtype=np.int64)
    return np.array([[s.steering_angle] for s in dataset], dtype=np.float64)


def assemble_input(
    dataset: list[ImageSequence], maps: dict[str, SalientMaps] | None, channels: int
) -> np.ndarray:
    """(N, T, channels, H, W) block; aux channels hold maps where available, zeros elsewhere."""
    frames = np.stack([s.frames for s in dataset]).astype(T.get_dtype())
    base = frames.shape[2]
    if channels == base:
        return frames
    if channels != base + AUX_CHANNELS:
        raise ConfigError(f"cannot build {channels}-channel input from {base}-channel frames")
    n, steps, _, h, w = frames.shape
    aux = np.zeros((n, steps, AUX_CHANNELS, h, w), dtype=frames.dtype)
    for i, seq in enumerate(dataset):
        m = (maps or {}).get(seq.seq_id)
        if m is not None:
            m.check_against(seq)
            aux[i] = m.as_channels()
    return np.concatenate([frames, aux], axis=2)


# --------------------------------------------------------------------------- optimisers


class Adam:
    def __init__(self, params: Parameters, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.arrays().items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays().items()}
        self.t = 0

    def step(self, params: Parameters) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for name, p in params.tensors.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


class SGD:
    def __init__(self, params: Parameters, lr: float):
        self.lr = lr

    def step(self, params: Parameters) -> None:
        for p in params.values():
            if p.grad is not None:
                p.data -= (self.lr * p.grad).astype(p.data.dtype)


def make_optimizer(params: Parameters, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return SGD(params, cfg.learning_rate)


# --------------------------------------------------------------------------- loop


def _loss(raw: T.Tensor, y: np.ndarray, kind: str) -> T.Tensor:
    if kind == "cross_entropy":
        return T.cross_entropy(raw, y)
    # steering is regressed in units of the output scale so gradients stay O(1)
    return T.mse_loss(T.mul(raw, 1.0 / STEERING_SCALE_DEG), y / STEERING_SCALE_DEG)


def predict(params: Parameters, x: np.ndarray, h0: HiddenState | None) -> np.ndarray:
    """Model outputs for a prepared input block, in fixed-size chunks."""
    outs = [forward_batch(params, x[i : i + EVAL_BATCH], h0).output for i in range(0, len(x), EVAL_BATCH)]
    return np.concatenate(outs) if outs else np.zeros((0, params.config.output_dim))


@dataclass
class Metrics:
    kind: str  # "accuracy" or "mae_deg"
    value: float
    n: int
    confusion: list[list[int]] | None = None  # rows: true SAFE/COLLISION, cols: predicted

    def to_dict(self) -> dict:
        return asdict(self)


def score(params: Parameters, x: np.ndarray, y: np.ndarray, h0: HiddenState | None) -> Metrics:
    if len(x) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    out = predict(params, x, h0)
    if params.config.head == "classification":
        # ties go to SAFE (index 0)
        pred = (out[:, 1] > out[:, 0]).astype(np.int64)
        conf = np.zeros((2, 2), dtype=int)
        np.add.at(conf, (y, pred), 1)
        return Metrics("accuracy", float((pred == y).mean()), len(y), conf.tolist())
    return Metrics("mae_deg", float(np.abs(out[:, 0] - y[:, 0]).mean()), len(y))


def train_loop(
    params: Parameters,
    h0: HiddenState,
    x: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    val: tuple[np.ndarray, np.ndarray] | None = None,
) -> TrainingHistory:
    """Minibatch training in place on ``params``; returns per-epoch history."""
    kind = cfg.loss_for(params.config)
    history = TrainingHistory("accuracy" if kind == "cross_entropy" else "mae_deg")
    opt = make_optimizer(params, cfg)
    rng = np.random.default_rng([cfg.seed, zlib.crc32(b"minibatch-order")])
    n = len(x)
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(n)
        losses = []
        for step, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo : lo + cfg.batch_size]
            params.zero_grad()
            try:
                loss = _loss(trace(params, x[idx], h0).raw, y[idx], kind)
            except T.NumericalError as exc:
                raise T.NumericalError(f"epoch {epoch} step {step}: {exc}") from exc
            if not math.isfinite(loss.item()):
                raise T.NumericalError(f"non-finite loss at epoch {epoch} step {step}")
            T.backward(loss)
            opt.step(params)
            losses.append(loss.item())
        params.zero_grad()
        train_m = score(params, x, y, h0).value
        val_m = score(params, val[0], val[1], h0).value if val is not None else None
        history.records.append(
            EpochRecord(epoch, float(np.mean(losses)), train_m, val_m, time.perf_counter() - start)
        )
        if cfg.stop_at_accuracy is not None and kind == "cross_entropy" and train_m >= cfg.stop_at_accuracy:
            break
    return history


# --------------------------------------------------------------------------- phases


def train_phase1(
    dataset: list[ImageSequence],
    net_cfg: NetworkConfig,
    train_cfg: TrainConfig,
    val: list[ImageSequence] | None = None,
) -> tuple[Parameters, HiddenState, TrainingHistory]:
    """From-scratch training. Returns parameters, the (noisy) LSTM start state, and history."""
    y = targets_of(dataset, net_cfg)
    params = init_parameters(net_cfg, train_cfg.seed)
    h0 = init_hidden_random(net_cfg, train_cfg.seed)
    x = assemble_input(dataset, None, net_cfg.input_channels)
    v = (assemble_input(val, None, net_cfg.input_channels), targets_of(val, net_cfg)) if val else None
    history = train_loop(params, h0, x, y, train_cfg, v)
    return params, h0, history


def harvest_hidden(params: Parameters, dataset: list[ImageSequence]) -> HiddenState:
    """Mean final (h, c) per LSTM layer over zero-started rollouts of every sequence."""
    if not dataset:
        raise ValueError("cannot harvest from an empty dataset")
    x = assemble_input(dataset, None, params.config.input_channels)
    sums = None
    for i in range(0, len(x), EVAL_BATCH):
        hidden = forward_batch(params, x[i : i + EVAL_BATCH]).hidden
        part = [(h.astype(np.float64).sum(axis=0), c.astype(np.float64).sum(axis=0)) for h, c in hidden]
        sums = part if sums is None else [(a + h, b + c) for (a, b), (h, c) in zip(sums, part)]
    dtype = T.get_dtype()
    return HiddenState([((h / len(x)).astype(dtype), (c / len(x)).astype(dtype)) for h, c in sums])


def harvest_bundle(
    params: Parameters, dataset: list[ImageSequence], flags: AblationFlags = AblationFlags()
) -> TransferBundle:
    cnn, lstm = {}, {}
    for name, arr in params.arrays().items():
        (cnn if param_group(name) == "cnn" else lstm)[name] = arr.copy()
    return TransferBundle(
        source_config=params.config,
        cnn_and_inception_weights=cnn,
        lstm_weights=lstm,
        harvested_hidden=harvest_hidden(params, dataset),
        source_config_digest=params.config.digest(),
        flags=flags,
    )


def save_bundle(path, bundle: TransferBundle) -> None:
    """Bundle container: weights in their working precision, hidden block, flags."""
    blobs = {f"cnn/{k}": v for k, v in bundle.cnn_and_inception_weights.items()}
    blobs.update({f"lstm/{k}": v for k, v in bundle.lstm_weights.items()})
    blobs.update(bundle.harvested_hidden.arrays())
    meta = {
        "config": bundle.source_config.to_dict(),
        "config_digest": bundle.source_config_digest,
        "flags": asdict(bundle.flags),
    }
    write_container(path, "bundle", meta, blobs)


def load_bundle(path) -> TransferBundle:
    meta, blobs = read_container(path, expect_kind="bundle")
    cfg = NetworkConfig.from_dict(meta["config"])
    hidden_arrays = {k: v for k, v in blobs.items() if k.startswith("hidden.")}
    return TransferBundle(
        source_config=cfg,
        cnn_and_inception_weights={k[4:]: v for k, v in blobs.items() if k.startswith("cnn/")},
        lstm_weights={k[5:]: v for k, v in blobs.items() if k.startswith("lstm/")},
        harvested_hidden=HiddenState([(hidden_arrays[f"hidden.l{i}.h"], hidden_arrays[f"hidden.l{i}.c"])
                                      for i in range(1, len(hidden_arrays) // 2 + 1)]),
        source_config_digest=meta["config_digest"],
        flags=AblationFlags(**meta["flags"]),
    )


def init_phase2(
    bundle: TransferBundle, target_cfg: NetworkConfig, seed: int, flags: AblationFlags | None = None
) -> tuple[Parameters, HiddenState]:
    """Phase-2 start point. Non-transferred parts come from ``init_parameters(target_cfg, seed)``.

    When the target adds the three auxiliary channels and CNN weights are
    transferred, the first-layer kernels for those channels start at zero, so
    the initial model ignores them.
    """
    flags = flags or bundle.flags
    src = bundle.source_config
    if bundle.source_config_digest != src.digest():
        warnings.warn("bundle config digest does not match its stored config (config drift)", stacklevel=2)
    if target_cfg.with_channels(src.input_channels) != src:
        raise ConfigError("target network config differs from the bundle's beyond input_channels")
    if target_cfg.input_channels < src.input_channels:
        raise ConfigError("target config cannot have fewer input channels than the source")
    params = init_parameters(target_cfg, seed)
    weights = {**bundle.cnn_and_inception_weights, **bundle.lstm_weights}
    for name, t in params.tensors.items():
        take = flags.transfer_cnn if param_group(name) == "cnn" else flags.transfer_lstm_weights
        if not take:
            continue
        w = weights[name].astype(t.data.dtype)
        if w.shape != t.shape:
            if name != "conv1.weight":
                raise ConfigError(f"bundle tensor {name} has shape {w.shape}, target expects {t.shape}")
            grown = np.zeros(t.shape, dtype=t.data.dtype)
            grown[:, : w.shape[1]] = w
            w = grown
        t.data = w.copy()
    if flags.transfer_hidden:
        dtype = T.get_dtype()
        hidden = HiddenState([(h.astype(dtype).copy(), c.astype(dtype).copy()) for h, c in bundle.harvested_hidden.layers])
    else:
        hidden = init_hidden_random(target_cfg, seed)
    return params, hidden


def phase2_config(source: NetworkConfig, augmented: bool) -> NetworkConfig:
    return source.with_channels(source.input_channels + AUX_CHANNELS if augmented else source.input_channels)


def train_phase2(
    params: Parameters,
    h0: HiddenState,
    dataset: list[ImageSequence],
    maps: dict[str, SalientMaps] | None,
    train_cfg: TrainConfig,
    val: list[ImageSequence] | None = None,
    val_maps: dict[str, SalientMaps] | None = None,
) -> tuple[Parameters, TrainingHistory]:
    """Target-domain training from an :func:`init_phase2` start; ``params`` is trained in place."""
    cfg = params.config
    y = targets_of(dataset, cfg)
    x = assemble_input(dataset, maps, cfg.input_channels)
    v = (assemble_input(val, val_maps, cfg.input_channels), targets_of(val, cfg)) if val else None
    history = train_loop(params, h0, x, y, train_cfg, v)
    return params, history


def evaluate(
    params: Parameters, h0: HiddenState, dataset: list[ImageSequence], maps: dict[str, SalientMaps] | None = None
) -> Metrics:
    """Accuracy with confusion counts, or steering MAE in degrees."""
    if not dataset:
        raise ValueError("cannot evaluate on an empty dataset")
    cfg = params.config
    return score(params, assemble_input(dataset, maps, cfg.input_channels), targets_of(dataset, cfg), h0)
