"""LaConvNet: a per-pixel linear stem followed by pool-separated stages of LaConv blocks."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .layer import FULL, LANGUAGE_ONLY, LaConvBlock
from .nn import Module, param, zeros
from .tensor import ShapeError, Tensor
from .text import TextEncoder, TextFeatures

ANSWERS = ("yes", "no", "0", "1", "2", "3", "4", "5")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StageConfig:
    out_channels: int
    kernel: int
    groups: int
    packing: int
    blocks: int


@dataclass(frozen=True)
class NetConfig:
    name: str
    resolution: int
    stem_dim: int
    stages: tuple[StageConfig, ...]
    head: str = "locate"
    text_dim: int = 64
    embed_dim: int = 64
    text_heads: int = 2
    heads: int = 2
    mode: str = FULL
    max_len: int = 16

    @property
    def total_blocks(self) -> int:
        return sum(s.blocks for s in self.stages)

    @property
    def channels(self) -> list[int]:
        return [s.out_channels for s in self.stages]

    @property
    def packing(self) -> list[int]:
        return [s.packing for s in self.stages]

    def stage_resolutions(self, resolution: int | None = None) -> list[int]:
        r = self.resolution if resolution is None else resolution
        out = []
        for _ in self.stages:
            r //= 2
            out.append(r)
        return out

    @property
    def grid(self) -> int:
        return self.stage_resolutions()[-1]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        d["stages"] = tuple(StageConfig(**s) for s in d["stages"])
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "NetConfig":
        return cls.from_dict(json.loads(text))


def _stages(channels, kernels, packing, blocks, groups):
    return tuple(StageConfig(c, k, g, s, b) for c, k, g, s, b in zip(channels, kernels, groups, packing, blocks))


def build(name: str) -> NetConfig:
    """Named configurations: ``paper-S``, ``paper-B`` (224 input) and the 64x64 ``toy``."""
    if name in ("paper-S", "paper-B"):
        channels = [16, 64, 128, 256, 512]
        blocks = [2, 1, 2, 4, 1] if name == "paper-S" else [3, 3, 4, 6, 3]
        return NetConfig(name, 224, 16, _stages(channels, [3, 7, 7, 7, 7], [8, 4, 2, 1, 1], blocks,
                                                [min(16, c) for c in channels]))
    if name == "toy":
        channels = [16, 32, 64]
        return NetConfig("toy", 64, 16, _stages(channels, [3, 5, 5], [4, 2, 1], [1, 2, 2],
                                                [c // 4 for c in channels]))
    raise ConfigError(f"unknown config {name!r}; expected paper-S, paper-B or toy")


def ablate(cfg: NetConfig, *, groups: int | None = None, kernel: int | None = None,
           no_packing: bool = False, language_only: bool = False) -> NetConfig:
    """Apply the group / kernel / packing / language-only switches."""
    stages = []
    for st in cfg.stages:
        if groups is not None:
            st = replace(st, groups=groups)
        if kernel is not None:
            st = replace(st, kernel=kernel)
        if no_packing:
            st = replace(st, packing=1)
        stages.append(st)
    return replace(cfg, stages=tuple(stages), mode=LANGUAGE_ONLY if language_only else cfg.mode)


def shape_audit(cfg: NetConfig, resolution: int | None = None) -> list[tuple[int, int]]:
    """Dry-run the stage geometry without allocating; returns (resolution, channels) per stage."""
    r = cfg.resolution if resolution is None else resolution
    out = []
    prev_s = None
    for i, st in enumerate(cfg.stages):
        if r % 2:
            raise ConfigError(f"stage {i}: resolution {r} does not halve exactly")
        r //= 2
        if st.packing < 1 or r % st.packing:
            raise ConfigError(f"stage {i}: packing {st.packing} does not divide resolution {r}")
        if prev_s is not None and st.packing > prev_s:
            raise ConfigError(f"stage {i}: packing sizes must be nonincreasing")
        if st.out_channels % st.groups:
            raise ConfigError(f"stage {i}: {st.out_channels} channels not divisible by {st.groups} groups")
        if st.kernel % 2 == 0:
            raise ConfigError(f"stage {i}: kernel {st.kernel} must be odd")
        if st.out_channels % cfg.heads:
            raise ConfigError(f"stage {i}: channels not divisible by {cfg.heads} heads")
        prev_s = st.packing
        out.append((r, st.out_channels))
    return out


class Stage(Module):
    def __init__(self, in_dim: int, st: StageConfig, cfg: NetConfig, rng, dtype):
        if in_dim != st.out_channels:
            self.proj_w = param(rng, (in_dim, st.out_channels), dtype=dtype)
            self.proj_b = zeros(st.out_channels, dtype)
        self.blocks = [LaConvBlock(st.out_channels, cfg.text_dim, st.kernel, st.groups, st.packing,
                                   cfg.heads, cfg.mode, rng, dtype) for _ in range(st.blocks)]

    def __call__(self, x: Tensor, y: TextFeatures) -> Tensor:
        x = T.max_pool2x2(x)
        if hasattr(self, "proj_w"):
            x = T.linear(x, self.proj_w, self.proj_b)
        for block in self.blocks:
            x = block(x, y)
        return x


class LocateHead(Module):
    def __init__(self, dim: int, rng, dtype):
        self.w = param(rng, (dim, 1), dtype=dtype)
        self.b = zeros(1, dtype)

    def __call__(self, final: Tensor) -> Tensor:
        return locate_head(final, self.w, self.b)


class AnswerHead(Module):
    def __init__(self, dim: int, text_dim: int, rng, dtype, hidden: int | None = None):
        hidden = hidden or 2 * dim
        self.score_w = param(rng, (dim, 1), dtype=dtype)
        if text_dim != dim:
            self.text_w = param(rng, (text_dim, dim), dtype=dtype)
        self.w1 = param(rng, (dim, hidden), dtype=dtype)
        self.b1 = zeros(hidden, dtype)
        self.w2 = param(rng, (hidden, len(ANSWERS)), dtype=dtype)
        self.b2 = zeros(len(ANSWERS), dtype)

    def __call__(self, final: Tensor, y: TextFeatures, use_vision: bool = True) -> Tensor:
        return answer_head(final, y, self, use_vision)


def locate_head(final: Tensor, w: Tensor, b: Tensor, grid: int | None = None) -> Tensor:
    """Per-position d -> 1 projection, flattened to (B, hf*wf) cell logits."""
    B, hf, wf, d = final.shape
    if grid is not None and (hf, wf) != (grid, grid):
        raise ConfigError(f"feature map {hf}x{wf} does not match the {grid}x{grid} grid")
    return T.reshape(T.linear(final, w, b), (B, hf * wf))


def attentive_pool(final: Tensor, score_w: Tensor) -> Tensor:
    B, hf, wf, d = final.shape
    flat = T.reshape(final, (B, hf * wf, d))
    alpha = T.softmax(T.reshape(T.linear(flat, score_w), (B, 1, hf * wf)))
    return T.reshape(alpha @ flat, (B, d))


def answer_head(final: Tensor, y: TextFeatures, head: AnswerHead, use_vision: bool = True) -> Tensor:
    """Attentively pooled vision + pooled language, then a 2-layer MLP over the answer set."""
    text = y.pooled
    if hasattr(head, "text_w"):
        text = T.linear(text, head.text_w)
    fused = text
    if use_vision:
        fused = attentive_pool(final, head.score_w) + text
    h = T.relu(T.linear(fused, head.w1, head.b1))
    return T.linear(h, head.w2, head.b2)


class LaConvNet(Module):
    def __init__(self, cfg: NetConfig, vocab_size: int, seed: int = 0, dtype=np.float32):
        shape_audit(cfg)
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.text = TextEncoder(vocab_size, cfg.embed_dim, cfg.text_dim, cfg.text_heads, cfg.max_len, rng, dtype)
        self.stem_w = param(rng, (3, cfg.stem_dim), dtype=dtype)
        self.stem_b = zeros(cfg.stem_dim, dtype)
        stages = []
        prev = cfg.stem_dim
        for st in cfg.stages:
            stages.append(Stage(prev, st, cfg, rng, dtype))
            prev = st.out_channels
        self.stages = stages
        final = cfg.stages[-1].out_channels
        if cfg.head == "locate":
            self.head = LocateHead(final, rng, dtype)
        elif cfg.head == "answer":
            self.head = AnswerHead(final, cfg.text_dim, rng, dtype)
        else:
            raise ConfigError(f"unknown head {cfg.head!r}")

    def encode(self, ids) -> TextFeatures:
        return self.text(ids)

    def backbone(self, image: Tensor, y: TextFeatures) -> list[Tensor]:
        return forward_backbone(image, y, self.cfg, self)

    def __call__(self, image: Tensor, ids) -> Tensor:
        y = self.encode(ids)
        final = self.backbone(image, y)[-1]
        if self.cfg.head == "locate":
            return locate_head(final, self.head.w, self.head.b, self.cfg.grid)
        return self.head(final, y)


def forward_backbone(image: Tensor, y: TextFeatures, cfg: NetConfig, net: LaConvNet) -> list[Tensor]:
    """Stem then every stage; returns the output feature map of each stage."""
    if image.ndim == 3:
        image = T.reshape(image, (1, *image.shape))
    if image.shape[1:3] != (cfg.resolution, cfg.resolution):
        raise ShapeError(f"image {image.shape[1]}x{image.shape[2]} does not match config resolution {cfg.resolution}")
    if image.dtype != net.stem_w.dtype and not image.requires_grad:
        image = T.Tensor(image.data.astype(net.stem_w.dtype))
    x = T.linear(image, net.stem_w, net.stem_b)
    outs = []
    for stage in net.stages:
        x = stage(x, y)
        outs.append(x)
    return outs
