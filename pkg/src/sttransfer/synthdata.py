"""Procedural driving-like sequences in several visual domains.

Each frame is a flat-shaded road scene: sky above a horizon, ground, a road
whose two lane lines converge towards a vanishing point, and optionally one
obstacle on the road. The obstacle sits at distance ``d`` ahead and is drawn
with projected height ``s = 1 / d`` (as a fraction of frame height); ``d``
changes linearly over the sequence. A sequence is labelled COLLISION exactly
when the obstacle's projected height in the last frame exceeds 40% of the
frame height.

Pixels are quantised to multiples of 1/255 so datasets store losslessly as
bytes. Sequence ``i`` of a dataset draws from its own generator seeded with
``[seed, crc32(domain_id), i]``, so sequences are independent of ``n``.
"""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .container import read_container, write_container
from .network import STEERING_SCALE_DEG, ImageSequence, Label
from .salient import SalientMaps

COLLISION_THRESHOLD = 0.4  # projected obstacle height / frame height
MAX_SCALE = 0.9
ROAD_HALF_WIDTH = 0.45  # at the bottom row, as a fraction of frame width
CURVE_SHIFT = 0.6  # lateral road shift at the horizon for unit curvature, fraction of width

RGB = tuple[float, float, float]


@dataclass(frozen=True)
class DomainSpec:
    domain_id: str
    sky: RGB
    ground: RGB
    road: RGB
    lane: RGB
    obstacle: RGB
    texture_noise: float = 0.02
    obstacle_speed: tuple[float, float] = (0.10, 0.25)  # distance units per frame
    camera_jitter: float = 0.3  # std of horizon jitter, pixels
    frame_height: int = 24
    frame_width: int = 32
    horizon: float = 0.4  # horizon row as a fraction of frame height
    sway: float = 0.04  # amplitude of ego heading oscillation, fraction of width
    max_curvature: float = 1.0
    lane_wander: float = 0.1  # ego lateral offset std, fraction of road half-width

    def __post_init__(self):
        for name in ("sky", "ground", "road", "lane", "obstacle"):
            c = getattr(self, name)
            if len(c) != 3 or not all(0.0 <= v <= 1.0 for v in c):
                raise ValueError(f"{self.domain_id}: colour {name} must be 3 values in [0, 1]")
        lo, hi = self.obstacle_speed
        if not 0 < lo <= hi:
            raise ValueError(f"{self.domain_id}: obstacle speeds must be positive with lo <= hi")
        if self.frame_height < 8 or self.frame_width < 8:
            raise ValueError("frames must be at least 8x8")
        if self.texture_noise < 0 or self.camera_jitter < 0 or self.max_curvature <= 0:
            raise ValueError("noise and jitter must be >= 0, max_curvature > 0")

    def with_size(self, height: int, width: int) -> "DomainSpec":
        return replace(self, frame_height=height, frame_width=width)


DOMAINS: dict[str, DomainSpec] = {
    # daylight: bright red obstacle on a mid-grey road
    "townA": DomainSpec(
        "townA", sky=(0.55, 0.75, 0.95), ground=(0.30, 0.55, 0.25), road=(0.40, 0.40, 0.42),
        lane=(0.95, 0.95, 0.90), obstacle=(0.85, 0.15, 0.10),
        texture_noise=0.02, obstacle_speed=(0.10, 0.25),
    ),
    # dusk: dark obstacle on a pale road, so the obstacle/road contrast flips sign
    "townB": DomainSpec(
        "townB", sky=(0.95, 0.70, 0.45), ground=(0.60, 0.50, 0.35), road=(0.62, 0.58, 0.52),
        lane=(0.95, 0.85, 0.20), obstacle=(0.10, 0.12, 0.35),
        texture_noise=0.03, obstacle_speed=(0.12, 0.28), camera_jitter=0.4,
    ),
    # overcast and wet: layout and obstacle colour close to townA, darker road, heavier sensor noise
    "townC": DomainSpec(
        "townC", sky=(0.50, 0.55, 0.65), ground=(0.35, 0.45, 0.35), road=(0.33, 0.33, 0.36),
        lane=(0.85, 0.85, 0.85), obstacle=(0.75, 0.20, 0.20),
        texture_noise=0.05, obstacle_speed=(0.10, 0.28), camera_jitter=0.5,
    ),
}


def get_domain(name: str, height: int | None = None, width: int | None = None) -> DomainSpec:
    if name not in DOMAINS:
        raise KeyError(f"unknown domain {name!r}; built-in domains: {', '.join(sorted(DOMAINS))}")
    spec = DOMAINS[name]
    if height is not None or width is not None:
        spec = spec.with_size(height or spec.frame_height, width or spec.frame_width)
    return spec


@dataclass
class SceneState:
    """Per-frame scene parameters; rendering is a pure function of this plus the noise stream."""

    obstacle_scale: list[float] | None  # projected height / frame height, per frame
    obstacle_lateral: float  # position across the lane, fraction of road half-width
    lane_offset: list[float]  # ego offset from lane centre, fraction of road half-width
    heading: list[float]  # vanishing-point shift, fraction of frame width
    horizon: list[float]  # horizon row, fraction of frame height
    curvature: float = 0.0  # in [-max_curvature, max_curvature]
    brightness: float = 1.0
    kind: str = ""  # collision / safe-far / safe-receding / clear / steering / scenario name

    def label(self) -> Label:
        if self.obstacle_scale is not None and self.obstacle_scale[-1] > COLLISION_THRESHOLD:
            return Label.COLLISION
        return Label.SAFE

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneState":
        return cls(**d)


def steering_angle(curvature: float, max_curvature: float) -> float:
    """Degrees; linear in curvature, +/-30 at the curvature limits."""
    return STEERING_SCALE_DEG * curvature / max_curvature


# --------------------------------------------------------------------------- rendering


def _coverage(lo: np.ndarray, hi: np.ndarray, n: int) -> np.ndarray:
    """Fraction of each unit pixel interval [k, k+1) covered by [lo, hi]; broadcasts."""
    k = np.arange(n)
    return np.clip(np.minimum(k + 1, hi) - np.maximum(k, lo), 0.0, 1.0)


def render_frame(spec: DomainSpec, scene: SceneState, t: int, noise: np.ndarray) -> np.ndarray:
    """(3, H, W) float frame before quantisation; ``noise`` is (3, H, W) standard normal."""
    h, w = spec.frame_height, spec.frame_width
    hz = scene.horizon[t] * h
    ys = np.arange(h) + 0.5
    xs = np.arange(w) + 0.5
    u = np.clip((ys - hz) / (h - hz), 0.0, 1.0)  # 0 at the horizon, 1 at the bottom row
    ground_cov = np.clip(ys + 0.5 - hz, 0.0, 1.0)[:, None]

    hw_bottom = ROAD_HALF_WIDTH * w
    centre = (
        w / 2
        + scene.heading[t] * w * (1 - u)
        + scene.lane_offset[t] * hw_bottom * u
        + scene.curvature * CURVE_SHIFT * w * (1 - u) ** 2
    )
    half = hw_bottom * u
    dist = np.abs(xs[None, :] - centre[:, None])
    road_cov = np.clip(half[:, None] - dist + 0.5, 0.0, 1.0) * ground_cov
    line_w = np.maximum(0.5, 1.2 * u)[:, None]
    lane_cov = np.clip(line_w / 2 - np.abs(dist - half[:, None]) + 0.5, 0.0, 1.0) * ground_cov * (u[:, None] > 0)

    sky = np.asarray(spec.sky)[:, None, None] * (0.85 + 0.15 * np.clip(ys / max(hz, 1.0), 0, 1))[None, :, None]
    img = sky * (1 - ground_cov)[None] + np.asarray(spec.ground)[:, None, None] * ground_cov[None]
    img = img * (1 - road_cov)[None] + np.asarray(spec.road)[:, None, None] * road_cov[None]
    img = img * (1 - lane_cov)[None] + np.asarray(spec.lane)[:, None, None] * lane_cov[None]

    if scene.obstacle_scale is not None:
        s = scene.obstacle_scale[t]
        height = s * h
        depth = min(1.0, s / 0.5)  # bottom edge on the ground plane, at the frame bottom once s >= 0.5
        bottom = hz + (h - hz) * depth
        top = bottom - height
        c_row = w / 2 + scene.heading[t] * w * (1 - depth) + scene.lane_offset[t] * hw_bottom * depth
        c_row += scene.curvature * CURVE_SHIFT * w * (1 - depth) ** 2
        cx = c_row + scene.obstacle_lateral * hw_bottom * depth
        half_w = 0.7 * height
        cov = _coverage(top, bottom, h)[:, None] * _coverage(cx - half_w, cx + half_w, w)[None, :]
        body = np.asarray(spec.obstacle)[:, None, None] * np.ones((1, h, 1))
        # darker band along the bottom fifth reads as wheels/shadow
        wheels = _coverage(bottom - 0.2 * height, bottom, h)[None, :, None]
        body = body * (1 - 0.5 * wheels)
        img = img * (1 - cov)[None] + body * cov[None]

    img = img * scene.brightness + spec.texture_noise * noise
    return np.clip(img, 0.0, 1.0)


def quantize(frames: np.ndarray) -> np.ndarray:
    return (np.round(frames * 255.0).astype(np.uint8)).astype(np.float32) / np.float32(255.0)


def render_sequence(spec: DomainSpec, scene: SceneState, rng: np.random.Generator) -> np.ndarray:
    steps = len(scene.heading)
    noise = rng.standard_normal((steps, 3, spec.frame_height, spec.frame_width))
    return quantize(np.stack([render_frame(spec, scene, t, noise[t]) for t in range(steps)]))


# --------------------------------------------------------------------------- scene sampling


def _ego_motion(spec: DomainSpec, steps: int, rng: np.random.Generator) -> dict:
    amp = rng.uniform(0, spec.sway)
    omega = rng.uniform(0.2, 0.6)
    phase = rng.uniform(0, 2 * np.pi)
    t = np.arange(steps)
    offset = rng.normal(0, spec.lane_wander) + 0.02 * np.cumsum(rng.normal(0, 1, steps))
    horizon = spec.horizon + rng.normal(0, spec.camera_jitter, steps) / spec.frame_height
    return {
        "heading": (amp * np.sin(omega * t + phase)).tolist(),
        "lane_offset": offset.tolist(),
        "horizon": horizon.tolist(),
        "brightness": float(rng.uniform(0.9, 1.1)),
    }


def _scales(d_final: float, v: float, steps: int) -> list[float]:
    d = d_final + v * (steps - 1 - np.arange(steps))
    return (1.0 / d).tolist()


def sample_scene(spec: DomainSpec, kind: str, steps: int, rng: np.random.Generator) -> SceneState:
    """Scene of the given kind: ``collision``, ``safe-far``, ``safe-receding`` or ``clear``."""
    lo, hi = spec.obstacle_speed
    motion = _ego_motion(spec, steps, rng)
    lateral = float(rng.uniform(-0.3, 0.3))
    if kind == "collision":
        d_final = 1.0 / rng.uniform(0.45, 0.75)
        v = rng.uniform(lo, hi)
        if steps > 3:
            # keep the first three frames under the threshold so the label needs the sequence
            need = (1.0 / COLLISION_THRESHOLD - d_final) / (steps - 3) + 1e-3
            v = min(max(v, need), hi)
        scales = _scales(d_final, v, steps)
    elif kind == "safe-far":
        scales = _scales(1.0 / rng.uniform(0.08, 0.34), rng.uniform(0, lo), steps)
    elif kind == "safe-receding":
        d_final = 1.0 / rng.uniform(0.08, 0.34)
        v = min(rng.uniform(lo, hi), max(0.0, (d_final - 1.0 / MAX_SCALE) / max(steps - 1, 1)))
        scales = _scales(d_final, -v, steps)
    elif kind == "clear":
        scales = None
    else:
        raise ValueError(f"unknown scene kind {kind!r}")
    return SceneState(scales, lateral, kind=kind, **motion)


_SAFE_KINDS = ("safe-far", "safe-receding", "clear")


def _seq_rng(seed: int, domain_id: str, i: int, tag: str = "") -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32((domain_id + tag).encode()), i])


def generate_dataset(spec: DomainSpec, n: int, collision_ratio: float, steps: int, seed: int) -> list[ImageSequence]:
    """Collision/safe sequences with exactly round(n * collision_ratio) collisions."""
    if n <= 0:
        raise ValueError("n must be positive")
    if not 0 <= collision_ratio <= 1:
        raise ValueError("collision_ratio must lie in [0, 1]")
    if steps < 2:
        raise ValueError("sequences need at least 2 frames")
    n_col = round(n * collision_ratio)
    order = np.random.default_rng([seed, zlib.crc32(f"{spec.domain_id}/labels".encode())]).permutation(n)
    is_col = np.zeros(n, dtype=bool)
    is_col[order[:n_col]] = True
    out = []
    for i in range(n):
        rng = _seq_rng(seed, spec.domain_id, i)
        kind = "collision" if is_col[i] else _SAFE_KINDS[int(rng.integers(len(_SAFE_KINDS)))]
        scene = sample_scene(spec, kind, steps, rng)
        frames = render_sequence(spec, scene, rng)
        out.append(ImageSequence(frames, label=int(scene.label()), domain_id=spec.domain_id,
                                 seq_id=f"{spec.domain_id}-{seed}-{i:05d}", scene=scene))
    return out


def generate_steering_dataset(spec: DomainSpec, n: int, steps: int, seed: int) -> list[ImageSequence]:
    """Curved-road sequences without obstacles, labelled with a steering angle in degrees."""
    if n <= 0 or steps < 2:
        raise ValueError("need n > 0 and at least 2 frames")
    out = []
    for i in range(n):
        rng = _seq_rng(seed, spec.domain_id, i, "/steer")
        curvature = float(rng.uniform(-spec.max_curvature, spec.max_curvature))
        scene = SceneState(None, 0.0, curvature=curvature, kind="steering", **_ego_motion(spec, steps, rng))
        out.append(ImageSequence(render_sequence(spec, scene, rng),
                                 steering_angle=steering_angle(curvature, spec.max_curvature),
                                 domain_id=spec.domain_id, seq_id=f"{spec.domain_id}-steer-{seed}-{i:05d}",
                                 scene=scene))
    return out


SEVERITY_FINAL_SCALE = {"level1": 0.12, "level2": 0.25, "level3": 0.45, "level4": 0.7}
REFERENCE_SCALE = 0.08


def generate_approach_scenarios(
    spec: DomainSpec, n_per_level: int, steps: int, seed: int
) -> tuple[list[ImageSequence], list[ImageSequence]]:
    """Paired (reference, probe) sequences for the hidden-state scenario study.

    Every pair shares its ego motion and noise. The reference holds the
    obstacle still and far away; the probe drives it from that distance to a
    level-specific final size, so higher levels mean a larger change in
    projected distance.
    """
    refs, probes = [], []
    for li, (level, final) in enumerate(SEVERITY_FINAL_SCALE.items()):
        for j in range(n_per_level):
            rng = _seq_rng(seed, spec.domain_id, li * 100000 + j, "/scenario")
            motion = _ego_motion(spec, steps, rng)
            lateral = float(rng.uniform(-0.2, 0.2))
            start = REFERENCE_SCALE * rng.uniform(0.9, 1.1)
            noise_seed = int(rng.integers(2**32))
            d0, d1 = 1.0 / start, 1.0 / final
            probe_scales = (1.0 / np.linspace(d0, d1, steps)).tolist()
            for scales, kind, bucket in (([start] * steps, f"{level}-reference", refs), (probe_scales, level, probes)):
                scene = SceneState(scales, lateral, kind=kind, **motion)
                frames = render_sequence(spec, scene, np.random.default_rng(noise_seed))
                bucket.append(ImageSequence(frames, label=int(scene.label()), domain_id=spec.domain_id,
                                            seq_id=f"{spec.domain_id}-{kind}-{seed}-{j:04d}", scene=scene))
    return refs, probes


def generate_noise_dataset(n: int, steps: int, height: int, width: int, seed: int) -> list[ImageSequence]:
    """Uniform-noise frames, the dissimilar end of the similarity scale."""
    rng = np.random.default_rng([seed, zlib.crc32(b"noise")])
    return [
        ImageSequence(quantize(rng.uniform(0, 1, (steps, 3, height, width))), label=int(Label.SAFE),
                      domain_id="noise", seq_id=f"noise-{seed}-{i:05d}")
        for i in range(n)
    ]


# --------------------------------------------------------------------------- dataset files


class DatasetFile(NamedTuple):
    sequences: list[ImageSequence]
    maps: dict[str, SalientMaps]
    meta: dict


def _as_bytes(frames: np.ndarray) -> np.ndarray | None:
    """Byte codes if every pixel is exactly k/255 in float32, else None."""
    q = np.round(frames.astype(np.float64) * 255.0)
    if not ((q >= 0) & (q <= 255)).all():
        return None
    codes = q.astype(np.uint8)
    return codes if np.array_equal(codes.astype(np.float32) / np.float32(255.0), frames) else None


def save_dataset(path, sequences: list[ImageSequence], maps: dict[str, SalientMaps] | None = None,
                 meta: dict | None = None) -> None:
    """Write sequences (and any attached maps) to one dataset container.

    Frames are stored as bytes when every pixel is an exact k/255 float32,
    otherwise as float32; both load back bit-identical.
    """
    if not sequences:
        raise ValueError("cannot save an empty dataset")
    frames = np.stack([s.frames for s in sequences]).astype(np.float32)
    codes = _as_bytes(frames)
    byte_exact = codes is not None
    blobs: dict[str, np.ndarray] = {"frames": codes if byte_exact else frames}
    records = [
        {
            "id": s.seq_id,
            "domain": s.domain_id,
            "label": s.label,
            "steering_angle": s.steering_angle,
            "scene": s.scene.to_dict() if isinstance(s.scene, SceneState) else None,
        }
        for s in sequences
    ]
    map_ids = [s.seq_id for s in sequences if maps and s.seq_id in maps]
    map_meta = []
    if map_ids:
        chosen = [maps[k] for k in map_ids]
        blobs["maps/saliency"] = np.stack([m.saliency for m in chosen]).astype(np.float32)
        blobs["maps/gradient"] = np.stack([m.gradient_map for m in chosen]).astype(np.float32)
        blobs["maps/edges"] = np.stack([m.edges for m in chosen]).astype(np.uint8)
        map_meta = [{"id": k, "provenance": maps[k].provenance} for k in map_ids]
    header = {
        "frame_encoding": "u8/255" if byte_exact else "f32",
        "sequences": records,
        "maps": map_meta,
        "user": meta or {},
    }
    write_container(path, "dataset", header, blobs)


def load_dataset(path) -> DatasetFile:
    meta, blobs = read_container(path, expect_kind="dataset")
    raw = blobs["frames"]
    frames = raw.astype(np.float32) / np.float32(255.0) if meta["frame_encoding"] == "u8/255" else raw
    seqs = []
    for i, rec in enumerate(meta["sequences"]):
        scene = SceneState.from_dict(rec["scene"]) if rec["scene"] is not None else None
        seqs.append(ImageSequence(frames[i], label=rec["label"], steering_angle=rec["steering_angle"],
                                  domain_id=rec["domain"], seq_id=rec["id"], scene=scene))
    maps = {}
    for j, rec in enumerate(meta["maps"]):
        maps[rec["id"]] = SalientMaps(blobs["maps/saliency"][j], blobs["maps/gradient"][j],
                                      blobs["maps/edges"][j], rec["id"], rec["provenance"])
    return DatasetFile(seqs, maps, meta["user"])


def export_frames(seq: ImageSequence, directory, prefix: str | None = None) -> list[Path]:
    """Write each frame as a binary PPM (3 channels) or PGM (1 channel) for inspection."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    prefix = prefix or seq.seq_id or "frame"
    paths = []
    for t, frame in enumerate(seq.frames):
        img = np.round(np.clip(frame, 0, 1) * 255).astype(np.uint8)
        c, h, w = img.shape
        magic, ext = (b"P6", "ppm") if c >= 3 else (b"P5", "pgm")
        pixels = img[:3].transpose(1, 2, 0) if c >= 3 else img[0]
        p = directory / f"{prefix}_{t:02d}.{ext}"
        p.write_bytes(magic + f"\n{w} {h}\n255\n".encode() + pixels.tobytes())
        paths.append(p)
    return paths
