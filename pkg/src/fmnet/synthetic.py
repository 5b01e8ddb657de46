"""Layered toy videos with exact depth, backward optical flow, and visibility.

A static background (vertical depth ramp, checker texture) is overlaid by a few
flat foreground rectangles or disks, each at constant depth and moving at a
constant half-integer velocity.  Because velocities are multiples of 0.5 px per
frame, bilinear warping along the ground-truth flow reproduces depth exactly on
every pixel whose sampling support stays inside one layer; the visibility map
marks exactly those pixels.
"""

from __future__ import annotations

import json
import shutil
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import archive
from .errors import ConfigError, DataError


@dataclass(frozen=True)
class LayerSpec:
    shape: str                      # "rect" or "disk"
    center: tuple[float, float]     # (y, x) at frame 0, multiples of 0.5
    size: tuple[float, float]       # (height, width) for rect, (radius, radius) for disk
    velocity: tuple[float, float]   # (vy, vx) pixels per frame, multiples of 0.5
    depth: float
    color: tuple[float, float, float]

    def half_extent(self) -> tuple[float, float]:
        if self.shape == "disk":
            return self.size[0], self.size[0]
        return self.size[0] / 2.0, self.size[1] / 2.0

    def center_at(self, t: int) -> tuple[float, float]:
        return self.center[0] + self.velocity[0] * t, self.center[1] + self.velocity[1] * t

    def coverage(self, t: int, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
        cy, cx = self.center_at(t)
        if self.shape == "disk":
            return (ys - cy) ** 2 + (xs - cx) ** 2 <= self.size[0] ** 2
        hy, hx = self.half_extent()
        return (ys >= cy - hy) & (ys < cy + hy) & (xs >= cx - hx) & (xs < cx + hx)


@dataclass(frozen=True)
class SceneSpec:
    height: int
    width: int
    length: int
    layers: tuple[LayerSpec, ...]   # foreground, nearest first
    background_depth: tuple[float, float] = (8.0, 6.0)   # top row, bottom row
    background_color: tuple[float, float, float] = (0.6, 0.7, 0.8)
    drift: float = 0.0              # relative brightness change over the clip
    fog: float = 0.12               # intensity *= exp(-fog * depth)
    noise: float = 0.0              # per-pixel gaussian sensor noise (std)
    seed: int = 0

    def validate(self) -> None:
        if self.height < 4 or self.width < 4 or self.length < 1:
            raise ConfigError("scene too small", height=self.height, width=self.width, length=self.length)
        if abs(self.drift) > 0.05:
            raise ConfigError("brightness drift limited to +-5% per clip", drift=self.drift)
        bg_near = min(self.background_depth)
        if bg_near <= 0:
            raise ConfigError("background depth must be positive")
        depths = [layer.depth for layer in self.layers]
        if any(d <= 0 for d in depths) or any(b <= a for a, b in zip(depths, depths[1:])):
            raise ConfigError("foreground depths must be positive and ordered near-to-far", depths=depths)
        if depths and depths[-1] >= bg_near:
            raise ConfigError("foreground must be nearer than the background", depths=depths, background=bg_near)
        for layer in self.layers:
            if layer.shape not in ("rect", "disk"):
                raise ConfigError("layer shape must be rect or disk", shape=layer.shape)
            for v in layer.velocity + layer.center:
                if (2 * v) != round(2 * v):
                    raise ConfigError("centres and velocities must be multiples of 0.5", layer=layer)
            hy, hx = layer.half_extent()
            for t in (0, self.length - 1):
                cy, cx = layer.center_at(t)
                if cy - hy < 1 or cy + hy > self.height - 1 or cx - hx < 1 or cx + hx > self.width - 1:
                    raise ConfigError("layer leaves the 1-pixel border margin", layer=layer, frame=t)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        layers = tuple(LayerSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in ly.items()})
                       for ly in d["layers"])
        rest = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k != "layers"}
        return cls(layers=layers, **rest)


@dataclass
class FrameSample:
    image: np.ndarray               # [3, H, W] in [0, 1]
    depth: np.ndarray               # [1, H, W] > 0
    flow_back: np.ndarray | None    # [2, H, W], (dx, dy) from this frame to the previous one
    visibility: np.ndarray | None   # [H, W] bool: true correspondent exists in the previous frame


def _ownership(spec: SceneSpec, t: int, ys, xs) -> np.ndarray:
    owner = np.zeros((spec.height, spec.width), dtype=np.int64)
    for idx in range(len(spec.layers), 0, -1):       # paint far to near
        owner[spec.layers[idx - 1].coverage(t, ys, xs)] = idx
    return owner


def _visibility(spec: SceneSpec, owner_prev: np.ndarray, owner: np.ndarray, ys, xs) -> tuple[np.ndarray, np.ndarray]:
    H, W = owner.shape
    vel = np.zeros((len(spec.layers) + 1, 2))
    for i, layer in enumerate(spec.layers, start=1):
        vel[i] = layer.velocity
    vy, vx = vel[owner, 0], vel[owner, 1]
    flow = np.stack([-vx, -vy])
    sy, sx = ys - vy, xs - vx
    y0, x0 = np.floor(sy).astype(np.int64), np.floor(sx).astype(np.int64)
    y1 = np.where(sy > y0, y0 + 1, y0)
    x1 = np.where(sx > x0, x0 + 1, x0)
    inside = (y0 >= 0) & (x0 >= 0) & (y1 <= H - 1) & (x1 <= W - 1)
    vis = inside.copy()
    for yy, xx in ((y0, x0), (y0, x1), (y1, x0), (y1, x1)):
        src = owner_prev[np.clip(yy, 0, H - 1), np.clip(xx, 0, W - 1)]
        vis &= src == owner
    return flow, vis


def generate_clip(spec: SceneSpec) -> list[FrameSample]:
    """Render ``spec.length`` frames; flow and visibility come from layer ownership."""
    spec.validate()
    H, W, T = spec.height, spec.width, spec.length
    ys, xs = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    top, bottom = spec.background_depth
    bg_depth = top + (bottom - top) * ys / (H - 1)
    checker = ((ys // 4 + xs // 4) % 2).astype(np.float64)
    bg_albedo = np.asarray(spec.background_color)[:, None, None] * (0.8 + 0.2 * checker)
    colors = np.array([spec.background_color] + [ly.color for ly in spec.layers])
    layer_depth = np.array([0.0] + [ly.depth for ly in spec.layers])
    noise_rng = np.random.default_rng([spec.seed, 99])

    samples: list[FrameSample] = []
    prev_owner = None
    for t in range(T):
        owner = _ownership(spec, t, ys, xs)
        depth = np.where(owner == 0, bg_depth, layer_depth[owner])
        albedo = np.where(owner == 0, bg_albedo, colors[owner].transpose(2, 0, 1))
        gain = 1.0 + (spec.drift * t / (T - 1) if T > 1 else 0.0)
        image = albedo * np.exp(-spec.fog * depth) * gain
        if spec.noise > 0:
            image = image + noise_rng.normal(0.0, spec.noise, size=image.shape)
        image = np.clip(image, 0.0, 1.0)
        flow = vis = None
        if prev_owner is not None:
            flow, vis = _visibility(spec, prev_owner, owner, ys, xs)
        samples.append(FrameSample(image, depth[None].copy(), flow, vis))
        prev_owner = owner
    return samples


# ---------------------------------------------------------------------------
# random scene distribution


@dataclass(frozen=True)
class SceneDistribution:
    height: int = 32
    width: int = 32
    length: int = 24
    min_layers: int = 1
    max_layers: int = 3
    foreground_depth: tuple[float, float] = (1.5, 4.5)
    background_top: tuple[float, float] = (7.0, 9.0)
    background_bottom: tuple[float, float] = (5.0, 6.5)
    speeds: tuple[float, ...] = (-1.0, -0.5, 0.0, 0.5, 1.0)
    max_drift: float = 0.05
    fog: float = 0.12
    noise: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def _place(rng, half: float, v: float, length: int, T: int) -> tuple[float, float] | None:
    travel = v * (T - 1)
    lo = 1 + half - min(0.0, travel)
    hi = length - 1 - half - max(0.0, travel)
    lo, hi = np.ceil(2 * lo) / 2, np.floor(2 * hi) / 2
    if lo > hi:
        return None
    steps = int(round(2 * (hi - lo)))
    return lo + 0.5 * int(rng.integers(0, steps + 1)), v


def sample_scene(dist: SceneDistribution, seed: int) -> SceneSpec:
    rng = np.random.default_rng(seed)
    H, W, T = dist.height, dist.width, dist.length
    n = int(rng.integers(dist.min_layers, dist.max_layers + 1))
    lo, hi = dist.foreground_depth
    depths = np.sort(rng.uniform(lo, hi, size=n))
    for i in range(1, n):                       # keep strict near-to-far ordering
        depths[i] = max(depths[i], depths[i - 1] + 0.05)
    layers = []
    scale = min(H, W) / 32.0
    for d in depths:
        shape = "rect" if rng.random() < 0.5 else "disk"
        # nearer layers are drawn larger
        extent = float(np.clip(np.round(2 * scale * 14.0 / d) / 2, 2.0, min(H, W) / 3))
        if shape == "rect":
            size = (extent * 2, float(np.round(2 * extent * rng.uniform(0.7, 1.3))))
        else:
            size = (extent, extent)
        probe = LayerSpec(shape, (0.0, 0.0), size, (0.0, 0.0), float(d), (0, 0, 0))
        hy, hx = probe.half_extent()
        vy, vx = (float(rng.choice(dist.speeds)) for _ in range(2))
        placed_y = placed_x = None
        while placed_y is None:
            placed_y = _place(rng, hy, vy, H, T)
            vy = vy - np.sign(vy) * 0.5 if placed_y is None else vy
        while placed_x is None:
            placed_x = _place(rng, hx, vx, W, T)
            vx = vx - np.sign(vx) * 0.5 if placed_x is None else vx
        color = tuple(float(c) for c in rng.uniform(0.35, 1.0, size=3))
        layers.append(LayerSpec(shape, (placed_y[0], placed_x[0]), size, (placed_y[1], placed_x[1]),
                                float(d), color))
    spec = SceneSpec(
        height=H, width=W, length=T, layers=tuple(layers),
        background_depth=(float(rng.uniform(*dist.background_top)), float(rng.uniform(*dist.background_bottom))),
        background_color=tuple(float(c) for c in rng.uniform(0.4, 0.9, size=3)),
        drift=float(rng.uniform(-dist.max_drift, dist.max_drift)),
        fog=dist.fog, noise=dist.noise, seed=int(seed),
    )
    spec.validate()
    return spec


# ---------------------------------------------------------------------------
# clips on disk


@dataclass
class Clip:
    clip_id: str
    frames: np.ndarray      # [T, 3, H, W]
    depth: np.ndarray       # [T, 1, H, W]
    flow: np.ndarray        # [T-1, 2, H, W]
    vis: np.ndarray         # [T-1, 1, H, W] as 0/1 floats

    @classmethod
    def from_samples(cls, clip_id: str, samples: list[FrameSample]) -> "Clip":
        H, W = samples[0].depth.shape[-2:]
        rest = samples[1:]
        return cls(
            clip_id,
            np.stack([s.image for s in samples]),
            np.stack([s.depth for s in samples]),
            np.stack([s.flow_back for s in rest]) if rest else np.zeros((0, 2, H, W)),
            np.stack([s.visibility[None].astype(np.float64) for s in rest]) if rest else np.zeros((0, 1, H, W)),
        )

    def entries(self) -> dict[str, np.ndarray]:
        return {"frames": self.frames, "depth": self.depth, "flow": self.flow, "vis": self.vis}

    def __len__(self) -> int:
        return self.frames.shape[0]


def stream_seed(seed: int, name: str, *extra: int) -> list[int]:
    """Seed material for a named, independent random sub-stream."""
    return [int(seed), zlib.crc32(name.encode("utf-8")), *[int(e) for e in extra]]


def clip_seed(seed: int, index: int) -> int:
    return int(np.random.default_rng(stream_seed(seed, "clip", index)).integers(0, 2**31 - 1))


def build_dataset(out_dir, n_train: int = 60, n_test: int = 10, seed: int = 7,
                  dist: SceneDistribution = SceneDistribution(), overwrite: bool = False) -> Path:
    """Write ``manifest.json`` and ``clips/clip_<id>.fmta``; deterministic per seed."""
    out = Path(out_dir)
    if n_train + n_test < 1 or n_train < 0 or n_test < 0:
        raise ConfigError("need at least one clip", n_train=n_train, n_test=n_test)
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise DataError("target directory is not empty (use overwrite)", path=str(out))
        shutil.rmtree(out)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    clips_meta = []
    ids = []
    for i in range(n_train + n_test):
        clip_id = f"{i:04d}"
        spec = sample_scene(dist, clip_seed(seed, i))
        clip = Clip.from_samples(clip_id, generate_clip(spec))
        archive.save(out / "clips" / f"clip_{clip_id}.fmta", clip.entries())
        clips_meta.append({"id": clip_id, "seed": spec.seed, "spec": spec.to_dict()})
        ids.append(clip_id)
    manifest = {
        "format": "fmnet-synthetic/1",
        "seed": int(seed),
        "distribution": dist.to_dict(),
        "splits": {"train": ids[:n_train], "test": ids[n_train:]},
        "clips": clips_meta,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


@dataclass
class Dataset:
    root: Path
    manifest: dict
    _cache: dict = field(default_factory=dict, repr=False)

    def split(self, name: str) -> list[Clip]:
        if name not in self.manifest["splits"]:
            raise DataError(f"unknown split {name!r}", splits=sorted(self.manifest["splits"]))
        return [self.clip(i) for i in self.manifest["splits"][name]]

    def clip(self, clip_id: str) -> Clip:
        if clip_id not in self._cache:
            path = self.root / "clips" / f"clip_{clip_id}.fmta"
            if not path.exists():
                raise DataError("missing clip archive", path=str(path))
            e = archive.load(path)
            self._cache[clip_id] = Clip(clip_id, e["frames"], e["depth"], e["flow"], e["vis"])
        return self._cache[clip_id]

    def spec(self, clip_id: str) -> SceneSpec:
        for c in self.manifest["clips"]:
            if c["id"] == clip_id:
                return SceneSpec.from_dict(c["spec"])
        raise DataError("unknown clip id", clip_id=clip_id)


def load_dataset(root) -> Dataset:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise DataError("dataset manifest not found", path=str(path))
    return Dataset(root, json.loads(path.read_text()))


def make_clips(n: int, seed: int, dist: SceneDistribution = SceneDistribution()) -> list[Clip]:
    """In-memory clips (same generator as :func:`build_dataset`, no disk)."""
    return [Clip.from_samples(f"{i:04d}", generate_clip(sample_scene(dist, clip_seed(seed, i)))) for i in range(n)]
