"""Saliency, Grad-CAM and Canny edge maps used as auxiliary input channels.

Maps come from a trained checkpoint (by default the source-phase model; any
checkpoint with a compatible frame size can be plugged in) and are computed
for a random subset of a dataset. All three maps are grayscale, one channel
per frame: saliency and Grad-CAM in [0, 1], edges in {0, 1}.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import kernels
from . import tensor as T
from .network import HiddenState, ImageSequence, Parameters, trace

LUMA = np.array([0.299, 0.587, 0.114])
_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


@dataclass(frozen=True)
class CannyConfig:
    gaussian_sigma: float = 1.4
    kernel_size: int = 5
    low_threshold: float = 0.1  # fractions of the maximum gradient magnitude
    high_threshold: float = 0.3

    def __post_init__(self):
        if not 0 <= self.low_threshold < self.high_threshold <= 1:
            raise ValueError("need 0 <= low_threshold < high_threshold <= 1")
        if self.kernel_size % 2 != 1 or self.gaussian_sigma <= 0:
            raise ValueError("kernel_size must be odd and sigma positive")


@dataclass
class SalientMaps:
    saliency: np.ndarray  # (T, 1, H, W) float32, vanilla-gradient magnitude
    gradient_map: np.ndarray  # (T, 1, H, W) float32, Grad-CAM
    edges: np.ndarray  # (T, 1, H, W) uint8, Canny
    source_sequence_id: str = ""
    provenance: dict = field(default_factory=dict)

    def as_channels(self) -> np.ndarray:
        """(T, 3, H, W) float32 block in channel order saliency, gradient, edges."""
        return np.concatenate(
            [self.saliency, self.gradient_map, self.edges.astype(np.float32)], axis=1
        ).astype(np.float32)

    def check_against(self, seq: ImageSequence) -> None:
        t, _, h, w = seq.frames.shape
        for name in ("saliency", "gradient_map", "edges"):
            arr = getattr(self, name)
            if arr.shape != (t, 1, h, w):
                raise ValueError(f"{name} map shape {arr.shape} does not match sequence {seq.seq_id} ({t}, 1, {h}, {w})")


# --------------------------------------------------------------------------- Canny


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    r = size // 2
    y, x = np.mgrid[-r : r + 1, -r : r + 1]
    g = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    return g / g.sum()


def to_grayscale(frame: np.ndarray) -> np.ndarray:
    """(3, H, W) -> (H, W) with 0.299/0.587/0.114 luminance weights."""
    return np.tensordot(LUMA, frame[:3].astype(np.float64), axes=1)


def canny(frame: np.ndarray, cfg: CannyConfig = CannyConfig()) -> np.ndarray:
    """Binary (uint8) edge map of a grayscale frame with pixels in [0, 1].

    Gaussian blur, Sobel gradients, non-maximum suppression over four
    direction bins, a double threshold relative to the strongest gradient,
    then hysteresis through 8-connected weak pixels. Image borders are
    replicated. A frame without any gradient yields all zeros.
    """
    img = np.asarray(frame, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"canny expects a 2-D grayscale frame, got shape {img.shape}")
    blurred = ndimage.correlate(img, gaussian_kernel(cfg.kernel_size, cfg.gaussian_sigma), mode="nearest")
    gx = ndimage.correlate(blurred, _SOBEL_X, mode="nearest")
    gy = ndimage.correlate(blurred, _SOBEL_X.T, mode="nearest")
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 1e-12:
        return np.zeros(img.shape, dtype=np.uint8)
    thin = kernels.canny_nms(mag, gx, gy, 1e-9 * peak)
    strong = thin >= cfg.high_threshold * peak
    weak = (thin >= cfg.low_threshold * peak) & ~strong
    return kernels.hysteresis(strong.astype(np.uint8), weak.astype(np.uint8))


# --------------------------------------------------------------------------- gradient maps


def _normalize_frames(maps: np.ndarray) -> np.ndarray:
    """Min-max each (H, W) map in a (..., H, W) stack to [0, 1]; flat maps become 0."""
    lo = maps.min(axis=(-2, -1), keepdims=True)
    hi = maps.max(axis=(-2, -1), keepdims=True)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (maps - lo) / safe, 0.0)


def _resize_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Bilinear interpolation weights with half-pixel centres (no corner alignment)."""
    m = np.zeros((n_out, n_in))
    src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m[np.arange(n_out), i0] += 1 - frac
    m[np.arange(n_out), i1] += frac
    return m


def upsample_bilinear(maps: np.ndarray, height: int, width: int) -> np.ndarray:
    """(..., h, w) -> (..., height, width)."""
    rows = _resize_matrix(height, maps.shape[-2])
    cols = _resize_matrix(width, maps.shape[-1])
    return np.einsum("Hh,...hw,Ww->...HW", rows, maps, cols)


def _score_gradients(params: Parameters, frames: np.ndarray, target: np.ndarray, h0: HiddenState | None):
    """Backprop the target score of each sequence to the input and to the second inception output.

    Classification scores are pre-softmax logits; a regression head's score is
    its steering output. Runs on a detached copy so parameter grads stay untouched.
    """
    p = params.detached()
    x = T.Tensor(frames, requires_grad=True)
    tr = trace(p, x, h0)
    raw = tr.raw
    pick = np.zeros(raw.shape, dtype=raw.data.dtype)
    if params.config.head == "classification":
        pick[np.arange(raw.shape[0]), target] = 1
    else:
        pick[:] = 1
    score = T.sum(T.mul(raw, T.Tensor(pick)))
    T.backward(score)
    for name, g in (("input", x.grad), ("inception", tr.inception.grad)):
        if not np.isfinite(g).all():
            raise T.NumericalError(f"non-finite gradient at {name}")
    return x.grad, tr.inception.data, tr.inception.grad


def _as_batch(seq) -> np.ndarray:
    frames = seq.frames if isinstance(seq, ImageSequence) else np.asarray(seq)
    return frames[None] if frames.ndim == 4 else frames


def _saliency_from_grad(grad: np.ndarray) -> np.ndarray:
    # grad (N, T, C, H, W); colour channels only
    return _normalize_frames(np.abs(grad[:, :, :3]).max(axis=2))


def _gradcam_raw(act: np.ndarray, grad: np.ndarray) -> np.ndarray:
    weights = grad.mean(axis=(2, 3))
    return np.maximum(np.einsum("mc,mchw->mhw", weights, act), 0.0)


def vanilla_saliency(params: Parameters, seq, target_class: int, h0: HiddenState | None = None) -> np.ndarray:
    """(T, 1, H, W): per pixel, max over colour channels of |d score / d pixel|, min-max per frame."""
    frames = _as_batch(seq)
    grad, _, _ = _score_gradients(params, frames, np.full(frames.shape[0], target_class), h0)
    return _saliency_from_grad(grad)[0][:, None].astype(np.float32)


def score_input_gradient(params: Parameters, seq, target_class: int, h0: HiddenState | None = None) -> np.ndarray:
    """Raw d score / d input for one sequence, (T, C, H, W)."""
    frames = _as_batch(seq)
    grad, _, _ = _score_gradients(params, frames, np.full(frames.shape[0], target_class), h0)
    return grad[0]


def grad_cam(
    params: Parameters, seq, target_class: int, h0: HiddenState | None = None, upsample: bool = True
) -> np.ndarray:
    """Grad-CAM on the second inception module, one map per frame.

    With ``upsample=False`` the rectified map is returned at the inception
    grid size (T, h, w), before resizing and normalisation.
    """
    frames = _as_batch(seq)
    n, steps, _, height, width = frames.shape
    _, act, grad = _score_gradients(params, frames, np.full(n, target_class), h0)
    cam = _gradcam_raw(act, grad)
    if not upsample:
        return cam.reshape(n, steps, *cam.shape[1:])[0]
    up = _normalize_frames(upsample_bilinear(cam, height, width))
    return up.reshape(n, steps, 1, height, width)[0].astype(np.float32)


def edge_maps(frames: np.ndarray, cfg: CannyConfig = CannyConfig()) -> np.ndarray:
    """(T, C, H, W) colour frames -> (T, 1, H, W) uint8 Canny maps."""
    return np.stack([canny(to_grayscale(f), cfg) for f in frames])[:, None]


def subset_size(ratio: float, n: int) -> int:
    if not 0 <= ratio <= 1:
        raise ValueError(f"ratio must lie in [0, 1], got {ratio}")
    # the epsilon absorbs binary rounding such as 0.29 * 100 = 28.999...
    return min(n, math.floor(ratio * n + 1e-9))


def select_subset(n: int, ratio: float, seed: int) -> np.ndarray:
    """Sorted indices of floor(ratio * n) items drawn uniformly without replacement."""
    k = subset_size(ratio, n)
    rng = np.random.default_rng([seed, zlib.crc32(b"salient-subset")])
    return np.sort(rng.choice(n, size=k, replace=False)) if k else np.zeros(0, dtype=np.int64)


def compute_maps(
    params: Parameters,
    sequences: list[ImageSequence],
    h0: HiddenState | None = None,
    canny_cfg: CannyConfig = CannyConfig(),
    batch_size: int = 16,
) -> dict[str, SalientMaps]:
    """All three maps for every given sequence; Grad-CAM/saliency target the predicted class."""
    provenance = {
        "model_checksum": params.checksum(),
        "model_config_digest": params.config.digest(),
        "canny": {
            "sigma": canny_cfg.gaussian_sigma,
            "kernel": canny_cfg.kernel_size,
            "low": canny_cfg.low_threshold,
            "high": canny_cfg.high_threshold,
        },
        "target": "predicted-class",
    }
    out: dict[str, SalientMaps] = {}
    dtype = T.get_dtype()
    for start in range(0, len(sequences), batch_size):
        chunk = sequences[start : start + batch_size]
        frames = np.stack([s.frames for s in chunk]).astype(dtype)
        n, steps, _, height, width = frames.shape
        model_in = frames
        if params.config.input_channels > frames.shape[2]:
            pad = np.zeros((n, steps, params.config.input_channels - frames.shape[2], height, width), dtype=dtype)
            model_in = np.concatenate([frames, pad], axis=2)
        with T.no_grad():
            raw = trace(params, model_in, h0).raw.data
        # argmax returns the first index on ties, i.e. SAFE
        target = raw.argmax(axis=1) if params.config.head == "classification" else np.zeros(n, dtype=int)
        grad, act, agrad = _score_gradients(params, model_in, target, h0)
        sal = _saliency_from_grad(grad)
        cam = _normalize_frames(upsample_bilinear(_gradcam_raw(act, agrad), height, width))
        cam = cam.reshape(n, steps, height, width)
        for i, seq in enumerate(chunk):
            out[seq.seq_id] = SalientMaps(
                saliency=sal[i][:, None].astype(np.float32),
                gradient_map=cam[i][:, None].astype(np.float32),
                edges=edge_maps(seq.frames, canny_cfg),
                source_sequence_id=seq.seq_id,
                provenance=dict(provenance),
            )
    return out


def generate_salient_subset(
    params: Parameters,
    dataset: list[ImageSequence],
    ratio: float,
    seed: int,
    h0: HiddenState | None = None,
    canny_cfg: CannyConfig = CannyConfig(),
) -> dict[str, SalientMaps]:
    """Maps for a seeded random floor(ratio * n) subset, keyed by sequence id."""
    idx = select_subset(len(dataset), ratio, seed)
    return compute_maps(params, [dataset[i] for i in idx], h0, canny_cfg)
