"""Similarity between datasets and between sequences.

* cosine similarity of flattened second-inception features of single frames,
  averaged over random frame pairs (the cross-domain similarity score);
* Frechet distance between Gaussian fits of those features;
* SSIM between grayscale frames;
* a hidden-state study comparing each probe sequence's final top-layer LSTM
  state with that of its reference sequence.

Reports print as an aligned table and serialise to JSON (schema in README).
"""
from __future__ import annotations

import json
import math
import warnings
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .network import HiddenState, ImageSequence, Parameters, forward_batch, frame_features
from .salient import to_grayscale

FID_EPS = 1e-6
SSIM_K1, SSIM_K2 = 0.01, 0.03


class ZeroNormError(ValueError):
    """Cosine similarity is undefined for a zero vector."""


@dataclass
class FeatureVector:
    values: np.ndarray
    provenance: str = "inception"  # or "hidden_state"
    model_checksum: str = ""


def _values(v) -> np.ndarray:
    return np.asarray(v.values if isinstance(v, FeatureVector) else v, dtype=np.float64).ravel()


def cosine(a, b) -> float:
    """a.b / (|a| |b|), clamped to [-1, 1]."""
    x, y = _values(a), _values(b)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.size} vs {y.size}")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ValueError("feature vectors must be finite")
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        raise ZeroNormError("cosine similarity of a zero-norm vector")
    return float(np.clip(np.dot(x, y) / (nx * ny), -1.0, 1.0))


def normalized_std(values) -> float:
    """sigma / mu of a sample (population std); NaN when the mean is 0."""
    v = np.asarray(values, dtype=np.float64)
    mu = v.mean()
    return float(v.std() / mu) if mu != 0 else float("nan")


# --------------------------------------------------------------------------- features


def _model_frames(params: Parameters, frames: np.ndarray) -> np.ndarray:
    """Pad 3-channel frames with zero aux channels for an augmented model."""
    need = params.config.input_channels - frames.shape[1]
    if need > 0:
        frames = np.concatenate([frames, np.zeros((frames.shape[0], need, *frames.shape[2:]), frames.dtype)], axis=1)
    return frames


def inception_features(params: Parameters, frames: np.ndarray, batch: int = 256) -> np.ndarray:
    """(M, C, H, W) frames -> (M, D) flattened second-inception outputs."""
    frames = _model_frames(params, np.asarray(frames, dtype=T.get_dtype()))
    out = []
    with T.no_grad():
        for i in range(0, len(frames), batch):
            out.append(frame_features(params, T.Tensor(frames[i : i + batch])).data.reshape(len(frames[i : i + batch]), -1))
    return np.concatenate(out).astype(np.float64)


def _frame_pool(ds: list[ImageSequence]) -> list[tuple[int, int]]:
    return [(i, t) for i, s in enumerate(ds) for t in range(s.length)]


def _sample_pairs(ds_a, ds_b, n_pairs: int, seed: int, same_frames: bool):
    rng = np.random.default_rng([seed, zlib.crc32(b"frame-pairs")])
    pool_a, pool_b = _frame_pool(ds_a), _frame_pool(ds_b)
    ia = rng.integers(len(pool_a), size=n_pairs)
    ib = ia if same_frames else rng.integers(len(pool_b), size=n_pairs)
    return [pool_a[k] for k in ia], [pool_b[k] for k in ib]


def _features_for(params: Parameters, ds: list[ImageSequence], picks: list[tuple[int, int]]) -> np.ndarray:
    keys = sorted(set(picks))
    feats = inception_features(params, np.stack([ds[i].frames[t] for i, t in keys]))
    row = {k: j for j, k in enumerate(keys)}
    return feats[[row[k] for k in picks]]


def pair_cosines(
    params: Parameters, ds_a: list[ImageSequence], ds_b: list[ImageSequence],
    n_pairs: int = 500, seed: int = 0, same_frames: bool = False,
) -> tuple[np.ndarray, int]:
    """Cosines of ``n_pairs`` frame pairs drawn uniformly with replacement; also returns the skip count.

    Pairs where either feature vector is all zeros are skipped.
    ``same_frames`` pairs every frame with itself (both datasets must then be the same).
    """
    if not ds_a or not ds_b:
        raise ValueError("both datasets must be non-empty")
    pa, pb = _sample_pairs(ds_a, ds_b, n_pairs, seed, same_frames)
    fa, fb = _features_for(params, ds_a, pa), _features_for(params, ds_b, pb)
    na, nb = np.linalg.norm(fa, axis=1), np.linalg.norm(fb, axis=1)
    ok = (na > 0) & (nb > 0)
    cos = np.clip((fa[ok] * fb[ok]).sum(axis=1) / (na[ok] * nb[ok]), -1.0, 1.0)
    return cos, int((~ok).sum())


def dataset_similarity(
    params: Parameters, ds_a: list[ImageSequence], ds_b: list[ImageSequence],
    n_pairs: int = 500, seed: int = 0, same_frames: bool = False,
) -> float:
    """Mean inception-feature cosine over random frame pairs."""
    cos, skipped = pair_cosines(params, ds_a, ds_b, n_pairs, seed, same_frames)
    if skipped:
        warnings.warn(f"skipped {skipped} of {n_pairs} frame pairs with zero-norm features", stacklevel=2)
    if cos.size == 0:
        raise ZeroNormError("every sampled frame pair had a zero-norm feature vector")
    return float(cos.mean())


# --------------------------------------------------------------------------- SSIM / FID


def ssim(x: np.ndarray, y: np.ndarray, window: int = 8, data_range: float = 1.0) -> float:
    """Mean SSIM over all ``window`` x ``window`` windows (uniform weights, sample covariance)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2:
        raise ValueError(f"ssim needs two equal-shape 2-D frames, got {x.shape} and {y.shape}")
    if min(x.shape) < window:
        raise ValueError(f"frame {x.shape} smaller than the {window}x{window} window")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    wx = sliding_window_view(x, (window, window)).reshape(-1, window * window)
    wy = sliding_window_view(y, (window, window)).reshape(-1, window * window)
    mx, my = wx.mean(axis=1), wy.mean(axis=1)
    dx, dy = wx - mx[:, None], wy - my[:, None]
    n = window * window - 1
    vx, vy = (dx * dx).sum(axis=1) / n, (dy * dy).sum(axis=1) / n
    cxy = (dx * dy).sum(axis=1) / n
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(s.mean())


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(m)
    if w.min() < -1e-8 * max(1.0, abs(w).max()):
        raise np.linalg.LinAlgError("covariance is not positive semi-definite after regularisation")
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def fid(feats_a, feats_b, eps: float = FID_EPS) -> float:
    """|mu_a - mu_b|^2 + tr(Ca + Cb - 2 (Ca Cb)^(1/2)), with eps added to both diagonals.

    The cross term is evaluated as tr((sqrt(Ca) Cb sqrt(Ca))^(1/2)), which has the
    same eigenvalues as (Ca Cb)^(1/2) but is symmetric. The result is floored at 0.
    """
    a = np.stack([_values(f) for f in feats_a]) if not isinstance(feats_a, np.ndarray) else np.asarray(feats_a, float)
    b = np.stack([_values(f) for f in feats_b]) if not isinstance(feats_b, np.ndarray) else np.asarray(feats_b, float)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"feature sets must be (n, D) with equal D, got {a.shape} and {b.shape}")
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each feature set needs at least 2 vectors")
    d = a.shape[1]
    ca = np.cov(a, rowvar=False).reshape(d, d) + eps * np.eye(d)
    cb = np.cov(b, rowvar=False).reshape(d, d) + eps * np.eye(d)
    diff = a.mean(axis=0) - b.mean(axis=0)
    sa = _sqrt_psd(ca)
    cross = np.linalg.eigvalsh(sa @ cb @ sa)
    tr_sqrt = np.sqrt(np.clip(cross, 0, None)).sum()
    return max(0.0, float(diff @ diff + np.trace(ca) + np.trace(cb) - 2 * tr_sqrt))


# --------------------------------------------------------------------------- reports


@dataclass
class PairRow:
    domain_a: str
    domain_b: str
    mean_cosine: float
    cosine_norm_std: float
    fid: float
    ssim_mean: float
    ssim_norm_std: float
    n_pairs: int
    skipped: int


@dataclass
class ScenarioRow:
    scenario: str
    n: int
    mean_cosine: float
    cosine_norm_std: float
    mean_collision_confidence: float


@dataclass
class SimilarityReport:
    pairs: list[PairRow] = field(default_factory=list)
    scenarios: list[ScenarioRow] = field(default_factory=list)
    model_checksum: str = ""

    def to_dict(self) -> dict:
        return {
            "schema": "sttransfer.similarity/1",
            "model_checksum": self.model_checksum,
            "pairs": [asdict(p) for p in self.pairs],
            "scenarios": [asdict(s) for s in self.scenarios],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        parts = []
        if self.pairs:
            parts.append(format_table(
                ["domain A", "domain B", "cosine", "cos s/m", "FID", "SSIM", "SSIM s/m", "pairs"],
                [[p.domain_a, p.domain_b, p.mean_cosine, p.cosine_norm_std, p.fid, p.ssim_mean,
                  p.ssim_norm_std, p.n_pairs - p.skipped] for p in self.pairs],
            ))
        if self.scenarios:
            parts.append(format_table(
                ["scenario", "n", "cosine", "cos s/m", "P(collision)"],
                [[s.scenario, s.n, s.mean_cosine, s.cosine_norm_std, s.mean_collision_confidence]
                 for s in self.scenarios],
            ))
        return "\n\n".join(parts)


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.4f}"
    return str(v)


def format_table(header: list[str], rows: list[list]) -> str:
    cells = [header] + [[_fmt(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _gray_frames(ds: list[ImageSequence], picks: list[tuple[int, int]]) -> list[np.ndarray]:
    return [to_grayscale(ds[i].frames[t]) for i, t in picks]


def compare_datasets(
    params: Parameters, ds_a: list[ImageSequence], ds_b: list[ImageSequence],
    n_pairs: int = 500, seed: int = 0, fid_frames: int = 500,
) -> PairRow:
    """Cosine, FID and SSIM between two datasets, each from seeded random frames."""
    cos, skipped = pair_cosines(params, ds_a, ds_b, n_pairs, seed)
    pa, pb = _sample_pairs(ds_a, ds_b, n_pairs, seed, False)
    ga, gb = _gray_frames(ds_a, pa), _gray_frames(ds_b, pb)
    ss = np.array([ssim(x, y) for x, y in zip(ga, gb)])
    rng = np.random.default_rng([seed, zlib.crc32(b"fid-frames")])
    pool_a, pool_b = _frame_pool(ds_a), _frame_pool(ds_b)
    fa = _features_for(params, ds_a, [pool_a[k] for k in rng.choice(len(pool_a), min(fid_frames, len(pool_a)), replace=False)])
    fb = _features_for(params, ds_b, [pool_b[k] for k in rng.choice(len(pool_b), min(fid_frames, len(pool_b)), replace=False)])
    return PairRow(
        domain_a=ds_a[0].domain_id, domain_b=ds_b[0].domain_id,
        mean_cosine=float(cos.mean()) if cos.size else float("nan"),
        cosine_norm_std=normalized_std(cos) if cos.size else float("nan"),
        fid=fid(fa, fb), ssim_mean=float(ss.mean()), ssim_norm_std=normalized_std(ss),
        n_pairs=n_pairs, skipped=skipped,
    )


def final_hidden(params: Parameters, seqs: list[ImageSequence], h0: HiddenState | None = None, batch: int = 64):
    """Top-layer final h (N, hidden) and collision probabilities (N,) for a list of sequences."""
    hs, probs = [], []
    for i in range(0, len(seqs), batch):
        x = np.stack([s.frames for s in seqs[i : i + batch]]).astype(T.get_dtype())
        n, steps = x.shape[:2]
        x = _model_frames(params, x.reshape(n * steps, *x.shape[2:])).reshape(n, steps, -1, *x.shape[3:])
        out = forward_batch(params, x, h0)
        hs.append(out.hidden[-1][0])
        probs.append(out.output[:, 1] if params.config.head == "classification" else np.full(n, np.nan))
    return np.concatenate(hs).astype(np.float64), np.concatenate(probs)


def scenario_cosine_study(
    params: Parameters, references: list[ImageSequence], probes: list[ImageSequence],
    h0: HiddenState | None = None,
) -> list[ScenarioRow]:
    """Per scenario, mean cosine between each probe's final hidden state and its reference's.

    ``references[i]`` is the reference for ``probes[i]``; the scenario name of a
    probe is ``probe.scene.kind`` (or its domain id when it has no scene).
    """
    if len(references) != len(probes):
        raise ValueError("need exactly one reference per probe")
    h_ref, _ = final_hidden(params, references, h0)
    h_probe, conf = final_hidden(params, probes, h0)
    groups: dict[str, list[int]] = {}
    for i, p in enumerate(probes):
        name = getattr(p.scene, "kind", "") or p.domain_id
        groups.setdefault(name, []).append(i)
    rows = []
    for name in sorted(groups):
        idx = groups[name]
        cos = np.array([cosine(h_ref[i], h_probe[i]) for i in idx])
        rows.append(ScenarioRow(name, len(idx), float(cos.mean()), normalized_std(cos), float(conf[idx].mean())))
    return rows
