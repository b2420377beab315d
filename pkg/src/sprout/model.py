"""UDiT: a pixel-space diffusion transformer without patchify/unpatchify.

Images enter through a stack of stride-2 convolutions (the stem), the token
grid is processed by adaLN-conditioned transformer blocks (the trunk), and a
mirrored stack of transposed convolutions (the head) returns to pixel
resolution. Token channels are never reshaped into pixel blocks.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import torch
import torch.nn as nn
import torch.nn.functional as F

from sprout.errors import ArgumentError, ConfigurationError, ShapeError


@dataclass(frozen=True)
class UDiTConfig:
    in_channels: int = 3
    down_factor: int = 8
    stem_channels: tuple[int, ...] = (16, 32, 64)
    trunk_depth: int = 4
    trunk_width: int = 96
    heads: int = 4
    time_embed_dim: int = 64
    mlp_ratio: float = 4.0
    feature_tap_layer: int | None = None
    head_zero_init: bool = True

    def __post_init__(self):
        object.__setattr__(self, "stem_channels", tuple(int(c) for c in self.stem_channels))
        if self.feature_tap_layer is None:
            object.__setattr__(self, "feature_tap_layer", self.trunk_depth // 2)
        self.validate()

    def validate(self):
        if not self.stem_channels:
            raise ConfigurationError("stem_channels must list at least one stage")
        if self.down_factor != 2 ** len(self.stem_channels):
            raise ConfigurationError(
                f"down_factor {self.down_factor} != 2**len(stem_channels) = {2 ** len(self.stem_channels)}"
            )
        if self.trunk_depth < 1 or self.trunk_width < 1 or self.heads < 1:
            raise ConfigurationError("trunk_depth, trunk_width and heads must be positive")
        if self.trunk_width % self.heads:
            raise ConfigurationError(f"trunk_width {self.trunk_width} not divisible by heads {self.heads}")
        if self.trunk_width % 4:
            raise ConfigurationError("trunk_width must be a multiple of 4 for 2-D positional embeddings")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ConfigurationError("time_embed_dim must be an even integer >= 2")
        if not 0 <= self.feature_tap_layer < self.trunk_depth:
            raise ConfigurationError(
                f"feature_tap_layer {self.feature_tap_layer} outside [0, {self.trunk_depth})"
            )


PRESETS = {
    "udit-nano": UDiTConfig(),
    # dimensioned to land within 5% of the published 51M / 112M / 361M counts
    "udit-s": UDiTConfig(stem_channels=(64, 128, 256), trunk_depth=10, trunk_width=512, heads=8, time_embed_dim=256),
    "udit-b": UDiTConfig(stem_channels=(64, 128, 256), trunk_depth=10, trunk_width=768, heads=12, time_embed_dim=256),
    "udit-l": UDiTConfig(stem_channels=(128, 256, 512), trunk_depth=18, trunk_width=1024, heads=16, time_embed_dim=256),
}


def resolve_config(source) -> UDiTConfig:
    """Accept a preset name, a UDiTConfig, or a mapping of config fields."""
    if isinstance(source, UDiTConfig):
        return source
    if isinstance(source, str):
        try:
            return PRESETS[source]
        except KeyError:
            raise ConfigurationError(f"unknown model preset {source!r}; expected one of {sorted(PRESETS)}") from None
    if isinstance(source, dict):
        base = PRESETS[source["preset"]] if "preset" in source else UDiTConfig()
        overrides = {k: v for k, v in source.items() if k != "preset"}
        unknown = set(overrides) - {f.name for f in fields(UDiTConfig)}
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        if "trunk_depth" in overrides and "feature_tap_layer" not in overrides:
            overrides["feature_tap_layer"] = None
        return replace(base, **overrides)
    raise ConfigurationError(f"cannot build a model config from {type(source).__name__}")


def config_to_text(cfg: UDiTConfig) -> str:
    lines = []
    for key, value in asdict(cfg).items():
        if isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def _parse_field(name: str, raw: str):
    if name == "stem_channels":
        return tuple(int(v) for v in raw.split(",") if v.strip())
    if name == "head_zero_init":
        if raw.lower() not in ("true", "false"):
            raise ConfigurationError(f"head_zero_init must be true/false, got {raw!r}")
        return raw.lower() == "true"
    if name == "mlp_ratio":
        return float(raw)
    if name == "feature_tap_layer" and raw == "None":
        return None
    return int(raw)


def config_from_text(text: str) -> UDiTConfig:
    values = {}
    known = {f.name for f in fields(UDiTConfig)}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or key not in known:
            raise ConfigurationError(f"bad model config line {line!r}")
        try:
            values[key] = _parse_field(key, raw)
        except ValueError as exc:
            raise ConfigurationError(f"bad value for {key}: {raw!r}") from exc
    return UDiTConfig(**values)


def _groups(channels: int) -> int:
    return 8 if channels % 8 == 0 else 1


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal features of ``1000 * t`` (t in [0, 1])."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = (t * 1000.0)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def sincos_2d(h: int, w: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed (h*w, dim) positional table; half the channels encode rows, half columns."""
    quarter = dim // 4
    omega = 1.0 / 10000 ** (torch.arange(quarter, dtype=torch.float64) / quarter)
    ys, xs = torch.meshgrid(torch.arange(h, dtype=torch.float64), torch.arange(w, dtype=torch.float64), indexing="ij")
    out_y = ys.reshape(-1, 1) * omega[None]
    out_x = xs.reshape(-1, 1) * omega[None]
    emb = torch.cat([torch.sin(out_y), torch.cos(out_y), torch.sin(out_x), torch.cos(out_x)], dim=1)
    return emb.to(dtype)


def modulate(x, shift, scale):
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class TimestepEmbedder(nn.Module):
    def __init__(self, width: int, freq_dim: int):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, width), nn.SiLU(), nn.Linear(width, width))

    def forward(self, t):
        return self.mlp(timestep_embedding(t, self.freq_dim).to(self.mlp[0].weight.dtype))


class Attention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(qkv[0], qkv[1], qkv[2])
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class TrunkBlock(nn.Module):
    """Pre-norm transformer block with adaLN-Zero timestep modulation."""

    def __init__(self, width: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(width * mlp_ratio)
        self.norm1 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(width, heads)
        self.norm2 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(nn.Linear(width, hidden), nn.GELU(approximate="tanh"), nn.Linear(hidden, width))
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(width, 6 * width))

    def forward(self, x, c):
        shift1, scale1, gate1, shift2, scale2, gate2 = self.modulation(c).chunk(6, dim=1)
        x = x + gate1.unsqueeze(1) * self.attn(modulate(self.norm1(x), shift1, scale1))
        x = x + gate2.unsqueeze(1) * self.mlp(modulate(self.norm2(x), shift2, scale2))
        return x


def _conv_block(conv: nn.Module, channels: int) -> nn.Sequential:
    return nn.Sequential(conv, nn.GroupNorm(_groups(channels), channels), nn.SiLU())


class UDiTModel(nn.Module):
    def __init__(self, config: UDiTConfig):
        super().__init__()
        config.validate()
        self.config = config
        ch = config.stem_channels
        width = config.trunk_width

        stages, prev = [], config.in_channels
        for c in ch:
            stages.append(_conv_block(nn.Conv2d(prev, c, kernel_size=3, stride=2, padding=1), c))
            prev = c
        self.stem = nn.Sequential(*stages)
        self.stem_proj = nn.Conv2d(ch[-1], width, kernel_size=1)

        self.time_embed = TimestepEmbedder(width, config.time_embed_dim)
        self.blocks = nn.ModuleList(TrunkBlock(width, config.heads, config.mlp_ratio) for _ in range(config.trunk_depth))
        self.final_norm = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.final_modulation = nn.Sequential(nn.SiLU(), nn.Linear(width, 2 * width))

        self.head_proj = nn.Conv2d(width, ch[-1], kernel_size=1)
        ups, prev = [], ch[-1]
        for c in list(ch[-2::-1]) + [ch[0]]:
            ups.append(_conv_block(nn.ConvTranspose2d(prev, c, kernel_size=4, stride=2, padding=1), c))
            prev = c
        self.head = nn.Sequential(*ups)
        self.head_out = nn.Conv2d(ch[0], config.in_channels, kernel_size=3, padding=1)
        self._pos_cache: dict = {}
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)
        for lin in (self.time_embed.mlp[0], self.time_embed.mlp[2]):
            nn.init.normal_(lin.weight, std=0.02)
        for mod in [b.modulation[-1] for b in self.blocks] + [self.final_modulation[-1]]:
            nn.init.zeros_(mod.weight)
            nn.init.zeros_(mod.bias)
        if self.config.head_zero_init:
            nn.init.zeros_(self.head_out.weight)
            nn.init.zeros_(self.head_out.bias)

    # -- shape helpers -----------------------------------------------------
    def _check_input(self, xt: torch.Tensor, t) -> torch.Tensor:
        f = self.config.down_factor
        if xt.dim() != 4 or xt.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected B x {self.config.in_channels} x H x W input, got {tuple(xt.shape)}")
        h, w = xt.shape[-2:]
        if h % f or w % f:
            raise ShapeError(f"spatial size {h}x{w} must be a multiple of the down factor {f}")
        t = torch.as_tensor(t, dtype=xt.dtype, device=xt.device)
        if t.dim() == 0:
            t = t.expand(xt.shape[0])
        if t.shape != (xt.shape[0],):
            raise ShapeError(f"expected {xt.shape[0]} timesteps, got shape {tuple(t.shape)}")
        if (t < 0).any() or (t > 1).any():
            raise ArgumentError("timesteps must lie in [0, 1]")
        return t

    def _pos(self, h: int, w: int, like: torch.Tensor) -> torch.Tensor:
        key = (h, w, like.dtype)
        if key not in self._pos_cache:
            self._pos_cache[key] = sincos_2d(h, w, self.config.trunk_width, like.dtype)
        return self._pos_cache[key]

    def embed(self, xt: torch.Tensor) -> torch.Tensor:
        """Stem output as a B x h x w x D token grid (before positions)."""
        return self.stem_proj(self.stem(xt)).permute(0, 2, 3, 1)

    def _trunk(self, xt, t, stop: int | None):
        grid = self.embed(xt)
        b, h, w, d = grid.shape
        x = grid.reshape(b, h * w, d) + self._pos(h, w, grid)
        c = self.time_embed(t)
        for i, block in enumerate(self.blocks):
            x = block(x, c)
            if i == stop:
                break
        return x, c, (b, h, w, d)

    def forward(self, xt: torch.Tensor, t) -> torch.Tensor:
        t = self._check_input(xt, t)
        x, c, (b, h, w, d) = self._trunk(xt, t, None)
        shift, scale = self.final_modulation(c).chunk(2, dim=1)
        x = modulate(self.final_norm(x), shift, scale)
        # token grid -> feature map at token resolution; pixels come from the transposed convs
        fmap = x.transpose(1, 2).reshape(b, d, h, w)
        return self.head_out(self.head(self.head_proj(fmap)))

    def extract_features(self, xt: torch.Tensor, t, layer=None) -> torch.Tensor:
        """Token activations after trunk block ``layer`` as B x h x w x D.

        ``layer="head"`` returns the pixel-space output as B x H x W x C.
        """
        t = self._check_input(xt, t)
        if layer == "head":
            return self.forward(xt, t).permute(0, 2, 3, 1)
        layer = self.config.feature_tap_layer if layer is None else layer
        if not isinstance(layer, int) or not 0 <= layer < self.config.trunk_depth:
            raise ArgumentError(f"feature tap {layer!r} outside [0, {self.config.trunk_depth})")
        x, _, (b, h, w, d) = self._trunk(xt, t, layer)
        return x.reshape(b, h, w, d)


def build_model(config=None, seed: int = 0) -> UDiTModel:
    """Deterministically initialised model; the global RNG is left untouched."""
    cfg = resolve_config(config if config is not None else "udit-nano")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = UDiTModel(cfg)
    return model.eval()


def forward(model: UDiTModel, xt, t) -> torch.Tensor:
    return model(xt, t)


def extract_features(model, xt, t, layer=None) -> torch.Tensor:
    return model.extract_features(xt, t, layer=layer)


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def preset_param_count(name: str) -> int:
    """Parameter count of a preset without allocating its weights."""
    with torch.device("meta"):
        return param_count(UDiTModel(resolve_config(name)))
