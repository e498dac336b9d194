"""Attention UNet with sinusoidal time embedding.

The same network serves as the noise predictor during pretraining and, after
:meth:`UNetModel.swap_to_segmentation_head`, as the segmentation network
evaluated at ``t = 0``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError, UsageError
from .gradcore import (Tensor, concat, conv2d, group_norm, linear, matmul_attention, max_pool,
                       silu, upsample_nearest)

PRETRAIN = "pretrain"
SEGMENTATION = "segmentation"


@dataclass
class UNetConfig:
    levels: int = 3
    channels: tuple[int, ...] = (16, 32, 64)
    in_channels: int = 3
    num_classes: int = 3
    attention_levels: tuple[int, ...] | None = None
    time_emb_dim: int = 32
    groups: int = 8
    head_scope: str = "projection"

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.attention_levels is None:
            self.attention_levels = (self.levels - 1,)
        self.attention_levels = tuple(sorted(int(a) for a in self.attention_levels))
        if not 3 <= self.levels <= 5:
            raise ConfigError(f"levels must be in [3, 5], got {self.levels}")
        if len(self.channels) != self.levels:
            raise ConfigError(f"{self.levels} levels but {len(self.channels)} channel entries")
        if min(self.channels) < 1 or self.in_channels < 1 or self.time_emb_dim < 2:
            raise ConfigError("all extents must be positive")
        if self.time_emb_dim % 2:
            raise ConfigError(f"time_emb_dim must be even, got {self.time_emb_dim}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if any(a < 0 or a >= self.levels for a in self.attention_levels):
            raise ConfigError(f"attention level out of range: {self.attention_levels}")
        for c in self.channels:
            if c % self.groups or (2 * c) % self.groups:
                raise ConfigError(f"channel count {c} not divisible by groups={self.groups}")
        if self.head_scope not in ("projection", "last_block"):
            raise ConfigError(f"head_scope must be 'projection' or 'last_block'")

    @property
    def out_channels_pretrain(self) -> int:
        return self.in_channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["attention_levels"] = list(self.attention_levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> UNetConfig:
        return cls(**d)


PRESETS = {
    "paper": dict(levels=4, channels=(64, 128, 256, 512), time_emb_dim=128, groups=8),
    "small": dict(levels=3, channels=(16, 32, 64), time_emb_dim=32, groups=8),
    "tiny": dict(levels=3, channels=(4, 8, 12), time_emb_dim=8, groups=4),
}


def preset_config(name: str, **overrides) -> UNetConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}")
    return UNetConfig(**{**PRESETS[name], **overrides})


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding ``[sin(t w_i) ..., cos(t w_i) ...]`` with ``w_i = 10000^(-2i/dim)``.

    Scalar ``t`` gives a ``(dim,)`` vector, an array of steps gives ``(len(t), dim)``.
    """
    if dim % 2:
        raise ConfigError(f"embedding dimension must be even, got {dim}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0):
        raise ConfigError("time steps must be non-negative")
    freqs = 10000.0 ** (-2.0 * np.arange(dim // 2) / dim)
    angles = t_arr[..., None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


# -- layers ---------------------------------------------------------------

class Module:
    """Parameter container; children are discovered from instance attributes."""

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Conv(Module):
    def __init__(self, cin, cout, k, rng):
        self.padding = k // 2
        self.weight = _uniform(rng, (cout, cin, k, k), cin * k * k)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias, padding=self.padding)


class Dense(Module):
    def __init__(self, cin, cout, rng):
        self.weight = _uniform(rng, (cout, cin), cin)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x):
        return linear(x, self.weight, self.bias)


class GroupNorm(Module):
    def __init__(self, channels, groups):
        self.groups = groups
        self.scale = Tensor(np.ones(channels), requires_grad=True)
        self.shift = Tensor(np.zeros(channels), requires_grad=True)

    def __call__(self, x):
        return group_norm(x, self.groups, self.scale, self.shift, eps=1e-5)


class ResBlock(Module):
    """norm -> silu -> conv3x3 (+ time) -> norm -> silu -> conv3x3, plus skip."""

    def __init__(self, cin, cout, temb_dim, groups, rng):
        self.norm1 = GroupNorm(cin, groups)
        self.conv1 = Conv(cin, cout, 3, rng)
        self.temb = Dense(temb_dim, cout, rng)
        self.norm2 = GroupNorm(cout, groups)
        self.conv2 = Conv(cout, cout, 3, rng)
        self.skip = Conv(cin, cout, 1, rng) if cin != cout else None

    def __call__(self, x, temb):
        h = self.conv1(silu(self.norm1(x)))
        t = self.temb(temb)
        h = h + t.reshape(t.shape[0], t.shape[1], 1, 1)
        h = self.conv2(silu(self.norm2(h)))
        return h + (x if self.skip is None else self.skip(x))


class AttentionBlock(Module):
    """Single-head self-attention over the spatial positions of one resolution."""

    def __init__(self, channels, groups, rng):
        self.norm = GroupNorm(channels, groups)
        self.q = Conv(channels, channels, 1, rng)
        self.k = Conv(channels, channels, 1, rng)
        self.v = Conv(channels, channels, 1, rng)
        self.proj = Conv(channels, channels, 1, rng)

    def __call__(self, x):
        n, c, h, w = x.shape
        hn = self.norm(x)

        def tokens(conv):
            return conv(hn).reshape(n, c, h * w).transpose(0, 2, 1)

        out = matmul_attention(tokens(self.q), tokens(self.k), tokens(self.v))
        out = out.transpose(0, 2, 1).reshape(n, c, h, w)
        return x + self.proj(out)


class UNetModel(Module):
    def __init__(self, config: UNetConfig, rng: np.random.Generator):
        self.config = config
        self.mode = PRETRAIN
        ch, temb = config.channels, config.time_emb_dim
        g = config.groups
        self.time_mlp1 = Dense(temb, temb, rng)
        self.time_mlp2 = Dense(temb, temb, rng)
        self.conv_in = Conv(config.in_channels, ch[0], 3, rng)
        self.enc = [ResBlock(ch[max(i - 1, 0)], ch[i], temb, g, rng) for i in range(config.levels)]
        self.enc_attn = [AttentionBlock(ch[i], g, rng) if i in config.attention_levels else None
                         for i in range(config.levels)]
        self.up = [Conv(ch[i + 1], ch[i], 3, rng) for i in range(config.levels - 1)]
        self.dec = [ResBlock(2 * ch[i], ch[i], temb, g, rng) for i in range(config.levels - 1)]
        self.dec_attn = [AttentionBlock(ch[i], g, rng) if i in config.attention_levels else None
                         for i in range(config.levels - 1)]
        self.norm_out = GroupNorm(ch[0], g)
        self.head = Conv(ch[0], config.in_channels, 3, rng)

    @property
    def out_channels(self) -> int:
        return self.head.weight.shape[0]

    def head_parameter_names(self) -> list[str]:
        names = ["head.weight", "head.bias"]
        if self.config.head_scope == "last_block":
            names += [n for n, _ in self.named_parameters() if n.startswith(("dec.0.", "norm_out."))]
        return names

    def __call__(self, x, t=None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        n, _, h, w = x.shape
        factor = 2 ** (self.config.levels - 1)
        if h % factor or w % factor:
            need_h, need_w = -h % factor, -w % factor
            raise ShapeError(f"spatial extents must be divisible by {factor}; pad by "
                             f"({need_h}, {need_w}) pixels", x.shape)
        if self.mode == SEGMENTATION:
            if t is not None and np.any(np.asarray(t) != 0):
                warnings.warn("segmentation forward ignores t and uses t=0", stacklevel=2)
            t = np.zeros(n)
        elif t is None:
            raise UsageError("pretrain forward needs per-sample time steps")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))

        temb = self.time_mlp2(silu(self.time_mlp1(Tensor(time_embedding(t, self.config.time_emb_dim)))))
        hcur = self.conv_in(x)
        skips = []
        last = self.config.levels - 1
        for i in range(self.config.levels):
            hcur = self.enc[i](hcur, temb)
            if self.enc_attn[i] is not None:
                hcur = self.enc_attn[i](hcur)
            if i < last:
                skips.append(hcur)
                hcur = max_pool(hcur, 2)
        for i in reversed(range(last)):
            hcur = self.up[i](upsample_nearest(hcur, 2))
            hcur = self.dec[i](concat([hcur, skips[i]], axis=1), temb)
            if self.dec_attn[i] is not None:
                hcur = self.dec_attn[i](hcur)
        return self.head(silu(self.norm_out(hcur)))

    # -- head swap ------------------------------------------------------------
    def swap_to_segmentation_head(self, num_classes: int | None = None,
                                  rng: np.random.Generator | None = None) -> None:
        """Replace the output projection with a fresh ``num_classes`` projection."""
        if self.mode != PRETRAIN:
            raise UsageError("model already carries a segmentation head")
        num_classes = self.config.num_classes if num_classes is None else num_classes
        if num_classes < 2:
            raise ConfigError("segmentation needs at least 2 classes")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config.num_classes = num_classes
        if self.config.head_scope == "last_block":
            ch, g = self.config.channels, self.config.groups
            self.dec[0] = ResBlock(2 * ch[0], ch[0], self.config.time_emb_dim, g, rng)
            self.norm_out = GroupNorm(ch[0], g)
        self.head = Conv(self.config.channels[0], num_classes, 3, rng)
        self.mode = SEGMENTATION

    # -- state ----------------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True,
                        skip: tuple[str, ...] = ()) -> None:
        params = dict(self.named_parameters())
        missing = [n for n in params if n not in state and n not in skip]
        if strict and missing:
            raise ConfigError(f"checkpoint lacks parameters: {missing[:5]}")
        for name, p in params.items():
            if name in skip or name not in state:
                continue
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {name} has wrong shape", p.shape, arr.shape)
            p.data = arr.copy()
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())
