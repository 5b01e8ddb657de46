"""Spatial extractor, temporal encoder/decoder with frame masking, and depth predictor."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import archive
from . import autograd as ag
from .autograd import Tensor
from .conv_transformer import ConvTransformer, decode, encode
from .errors import ConfigError, ShapeError
from .masking import MaskPlan, MaskToken, apply_mask, complete_sequence, identity_plan
from .nn import HE_GAIN, Conv2d, Module
from .posenc import FeatureSequence, add_positional
from .synthetic import stream_seed

VARIANTS = ("baseline", "transformer", "fmnet")


@dataclass
class FMNetConfig:
    variant: str = "fmnet"
    n_frames: int = 12
    n_retain: int = 2
    channels: int = 16
    enc_depth: int = 6
    dec_depth: int = 1
    height: int = 32
    width: int = 32
    # stride-1 stem followed by stride-2 stages; the last stage emits `channels`
    extractor_channels: tuple[int, ...] = (8, 16)
    # the depth head starts at this constant output (softplus of its bias)
    depth_init: float = 4.0
    loss_lambda: float = 0.85
    loss_alpha: float = 10.0
    lr: float = 1e-4
    lr_decay: float = 0.1
    lr_decay_every: int = 0
    # global-norm gradient clipping, 0 disables it
    grad_clip: float = 0.0
    batch_size: int = 1
    train_mask: str = "random"
    seed: int = 0

    def __post_init__(self):
        self.extractor_channels = tuple(int(c) for c in self.extractor_channels)
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}", variant=self.variant)
        if self.channels % 2:
            raise ConfigError("channels must be even", channels=self.channels)
        if self.enc_depth < 1 or self.dec_depth < 1:
            raise ConfigError("encoder and decoder depth must be >= 1")
        if self.depth_init <= 0:
            raise ConfigError("depth_init must be positive", depth_init=self.depth_init)
        if not 1 <= self.n_retain <= self.n_frames:
            raise ConfigError("n_retain must lie in [1, n_frames]", n_retain=self.n_retain)
        if self.grad_clip < 0:
            raise ConfigError("grad_clip must be non-negative", grad_clip=self.grad_clip)
        if self.train_mask not in ("random", "uniform"):
            raise ConfigError("train_mask must be 'random' or 'uniform'", train_mask=self.train_mask)
        f = self.downsample
        if self.height <= 0 or self.width <= 0 or self.height % f or self.width % f:
            raise ConfigError(f"image size must be positive and divisible by {f}",
                              height=self.height, width=self.width)

    @property
    def n_scales(self) -> int:
        return len(self.extractor_channels)

    @property
    def downsample(self) -> int:
        return 2 ** self.n_scales

    @property
    def feature_hw(self) -> tuple[int, int]:
        return self.height // self.downsample, self.width // self.downsample

    @property
    def masked(self) -> bool:
        return self.variant == "fmnet"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["extractor_channels"] = list(self.extractor_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FMNetConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError("unknown config keys", keys=unknown)
        return cls(**d)


@dataclass
class FrameSequence:
    """N RGB frames ``[N, 3, H, W]`` in [0, 1] at clip positions 0..N-1."""

    frames: np.ndarray
    positions: tuple[int, ...] = field(default=())

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4 or self.frames.shape[1] != 3 or self.frames.shape[0] < 1:
            raise ShapeError("frames must be [N, 3, H, W] with N >= 1", shape=self.frames.shape)
        if not self.positions:
            self.positions = tuple(range(self.frames.shape[0]))

    def __len__(self) -> int:
        return self.frames.shape[0]


# ---------------------------------------------------------------------------
# spatial extractor and depth predictor


class SpatialExtractor(Module):
    """Per-frame CNN: stride-1 stem, then stride-2 stages down to ``channels``.

    Skip features are the outputs of every stage except the last, so the
    predictor can fuse one skip at each resolution it passes through.
    """

    def __init__(self, cfg: FMNetConfig, rng: np.random.Generator):
        super().__init__()
        plan = list(cfg.extractor_channels) + [cfg.channels]
        c_in = 3
        self.stages = []
        for i, c_out in enumerate(plan):
            conv = Conv2d(c_in, c_out, rng, stride=1 if i == 0 else 2, gain=HE_GAIN)
            self.stages.append(self.add_module(f"S{i}", conv))
            c_in = c_out

    def __call__(self, frames: Tensor) -> tuple[Tensor, list[Tensor]]:
        if frames.ndim != 4 or min(frames.shape) <= 0:
            raise ShapeError("extractor input must be a non-empty [N, 3, H, W] stack", shape=frames.shape)
        skips = []
        x = frames
        for conv in self.stages:
            x = ag.relu(conv(x))
            skips.append(x)
        return x, skips[:-1]


class UpProjection(Module):
    """Nearest 2x upsample, then conv-relu-conv with a conv shortcut, then relu."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        super().__init__()
        self.conv_a = Conv2d(c_in, c_out, rng, gain=HE_GAIN)
        self.conv_b = Conv2d(c_out, c_out, rng, gain=HE_GAIN)
        self.shortcut = Conv2d(c_in, c_out, rng, gain=HE_GAIN)

    def __call__(self, x: Tensor) -> Tensor:
        u = ag.upsample2x(x)
        return ag.relu(ag.add(self.conv_b(ag.relu(self.conv_a(u))), self.shortcut(u)))


class FeatureFusion(Module):
    """concat(decoder state, skip) -> 3x3 conv -> relu."""

    def __init__(self, c_state: int, c_skip: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(c_state + c_skip, c_state, rng, gain=HE_GAIN)

    def __call__(self, state: Tensor, skip: Tensor) -> Tensor:
        if state.shape[-2:] != skip.shape[-2:] or state.shape[0] != skip.shape[0]:
            raise ShapeError("skip and decoder state differ in scale", state=state.shape, skip=skip.shape)
        return ag.relu(self.conv(ag.concat([state, skip], axis=1)))


class DepthPredictor(Module):
    def __init__(self, cfg: FMNetConfig, rng: np.random.Generator):
        super().__init__()
        skip_channels = list(cfg.extractor_channels)[::-1]
        c = cfg.channels
        self.ups, self.fuse = [], []
        for s, c_skip in enumerate(skip_channels):
            c_out = max(c // 2, 1)
            self.ups.append(self.add_module(f"up{s}", UpProjection(c, c_out, rng)))
            self.fuse.append(self.add_module(f"ffm{s}", FeatureFusion(c_out, c_skip, rng)))
            c = c_out
        self.head = Conv2d(c, 1, rng, kernel=1)
        # inverse softplus, so an all-zero head input predicts depth_init
        self.head.b.data[:] = np.log(np.expm1(cfg.depth_init))

    def __call__(self, temporal: Tensor, skips: list[Tensor]) -> Tensor:
        if len(skips) != len(self.ups):
            raise ShapeError("wrong number of skip features", expected=len(self.ups), got=len(skips))
        x = temporal
        for up, fuse, skip in zip(self.ups, self.fuse, reversed(skips)):
            x = fuse(up(x), skip)
        return ag.softplus(self.head(x))


# ---------------------------------------------------------------------------
# full model


class FMNet(Module):
    """Video depth model; ``variant`` selects baseline / unmasked transformer / masked."""

    def __init__(self, cfg: FMNetConfig, rng: np.random.Generator | None = None):
        super().__init__()
        object.__setattr__(self, "cfg", cfg)
        rng = np.random.default_rng(stream_seed(cfg.seed, "init")) if rng is None else rng
        self.extractor = SpatialExtractor(cfg, rng)
        self.predictor = DepthPredictor(cfg, rng)
        self.enc = self.dec = self.token = None
        if cfg.variant != "baseline":
            h, w = cfg.feature_hw
            self.enc = ConvTransformer(cfg.channels, cfg.enc_depth, rng)
            self.dec = ConvTransformer(cfg.channels, cfg.dec_depth, rng)
            self.token = MaskToken(cfg.channels, h, w, rng)

    def spatial_features(self, clip) -> tuple[FeatureSequence, list[Tensor]]:
        frames = _frames_tensor(clip)
        f, skips = self.extractor(frames)
        return FeatureSequence(f, tuple(range(frames.shape[0]))), skips

    def temporal_features(self, f: FeatureSequence, plan: MaskPlan) -> FeatureSequence:
        p = add_positional(f)
        t_um = encode(apply_mask(p, plan), self.enc)
        t_f = complete_sequence(t_um, plan, self.token)
        return decode(t_f, self.dec)

    def forward(self, clip, plan: MaskPlan | None = None) -> Tensor:
        """Depth ``[N, 1, H, W]`` for every frame of the clip."""
        f, skips = self.spatial_features(clip)
        n = len(f)
        if self.cfg.variant == "baseline":
            return self.predictor(f.maps, skips)
        if self.cfg.variant == "transformer" or plan is None:
            plan = identity_plan(n)
        if plan.n_frames != n:
            raise ShapeError("clip length differs from mask plan", clip=n, plan=plan.n_frames)
        t_r = self.temporal_features(f, plan)
        return self.predictor(t_r.maps, skips)

    __call__ = forward

    def baseline_forward(self, clip) -> Tensor:
        """Frame-independent path: extractor straight into the predictor."""
        f, skips = self.spatial_features(clip)
        return self.predictor(f.maps, skips)


def _frames_tensor(clip) -> Tensor:
    if isinstance(clip, FrameSequence):
        return Tensor(clip.frames)
    if isinstance(clip, Tensor):
        return clip
    return Tensor(FrameSequence(clip).frames)


def build_model(cfg: FMNetConfig) -> FMNet:
    return FMNet(cfg, np.random.default_rng(stream_seed(cfg.seed, "init")))


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_paths(path) -> tuple[Path, Path]:
    path = Path(path)
    base = path.with_suffix("") if path.suffix == ".fmta" else path
    return base.with_suffix(".fmta"), base.with_suffix(".json")


def save_checkpoint(model: FMNet, path, step: int = 0) -> Path:
    blob_path, meta_path = checkpoint_paths(path)
    blob_path.parent.mkdir(parents=True, exist_ok=True)
    archive.save(blob_path, model.state_dict())
    meta = {"config": model.cfg.to_dict(), "step": int(step)}
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return blob_path


def load_checkpoint(path) -> tuple[FMNet, int]:
    blob_path, meta_path = checkpoint_paths(path)
    meta = json.loads(meta_path.read_text())
    model = build_model(FMNetConfig.from_dict(meta["config"]))
    model.load_state_dict(archive.load(blob_path))
    return model, int(meta["step"])
