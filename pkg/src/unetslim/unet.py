"""Miniature latent-diffusion UNet with block / layer / unit tiers.

A :class:`UNetSpec` is a declarative description; :func:`build_unet` turns it
into a :class:`UNetModel` whose parameters are initialized deterministically
from a seed. Block ids are ``dn0..dn{D-1}``, ``mid`` and ``up0..up{D-1}``;
``up{k}`` mirrors ``dn{D-1-k}`` and receives that block's output as a skip
tensor, concatenated in front of its first layer.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from . import diffkit as dk
from .diffkit import ConfigError, ContractError, DimensionError, Tensor

NULL_TOKEN = 0


# ------------------------------------------------------------------- specs


@dataclass(frozen=True)
class CondConvSpec:
    n_experts: int = 2


@dataclass(frozen=True)
class TransformerUnitSpec:
    heads: int
    head_dim: int
    ff_mult: int = 2

    @property
    def inner(self) -> int:
        return self.heads * self.head_dim


@dataclass(frozen=True)
class ResNetUnitSpec:
    in_channels: int
    out_channels: int
    condconv: CondConvSpec | None = None


@dataclass(frozen=True)
class LayerSpec:
    resnet: ResNetUnitSpec
    transformer: TransformerUnitSpec | None = None
    index: int = 0  # position in the unpruned block; stable under pruning


@dataclass(frozen=True)
class BlockSpec:
    layers: tuple[LayerSpec, ...]
    resample: str = "none"  # "down" | "up" | "none"


@dataclass(frozen=True)
class UNetSpec:
    down_blocks: tuple[BlockSpec, ...]
    mid_block: BlockSpec
    up_blocks: tuple[BlockSpec, ...]
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 4, 4)
    latent_channels: int = 4
    latent_size: int = 16
    cond_dim: int = 64
    cond_seq_len: int = 8
    vocab_size: int = 32
    time_embed_dim: int = 64
    norm_groups: int = 8
    T_max: int = 1000

    def block_ids(self) -> list[str]:
        D = len(self.down_blocks)
        return [f"dn{i}" for i in range(D)] + ["mid"] + [f"up{i}" for i in range(len(self.up_blocks))]

    def block(self, block_id: str) -> BlockSpec:
        if block_id == "mid":
            return self.mid_block
        kind, idx = block_id[:2], block_id[2:]
        blocks = {"dn": self.down_blocks, "up": self.up_blocks}.get(kind)
        if blocks is None or not idx.isdigit() or int(idx) >= len(blocks):
            raise KeyError(f"no block {block_id!r}")
        return blocks[int(idx)]

    def with_block(self, block_id: str, block: BlockSpec) -> UNetSpec:
        if block_id == "mid":
            return replace(self, mid_block=block)
        idx = int(block_id[2:])
        if block_id.startswith("dn"):
            blocks = list(self.down_blocks)
            blocks[idx] = block
            return replace(self, down_blocks=tuple(blocks))
        blocks = list(self.up_blocks)
        blocks[idx] = block
        return replace(self, up_blocks=tuple(blocks))

    def layer_census(self) -> dict[str, int]:
        return {b: len(self.block(b).layers) for b in self.block_ids()}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> UNetSpec:
        def layer(ld, pos):
            rd = dict(ld["resnet"])
            cc = rd.get("condconv")
            rd["condconv"] = CondConvSpec(**cc) if cc else None
            tf = ld.get("transformer")
            return LayerSpec(ResNetUnitSpec(**rd), TransformerUnitSpec(**tf) if tf else None, ld.get("index", pos))

        def block(bd):
            return BlockSpec(tuple(layer(x, j) for j, x in enumerate(bd["layers"])), bd.get("resample", "none"))

        rest = {k: v for k, v in d.items() if k not in ("down_blocks", "mid_block", "up_blocks")}
        if "channel_multipliers" in rest:
            rest["channel_multipliers"] = tuple(rest["channel_multipliers"])
        return cls(
            down_blocks=tuple(block(b) for b in d["down_blocks"]),
            mid_block=block(d["mid_block"]),
            up_blocks=tuple(block(b) for b in d["up_blocks"]),
            **rest,
        )


def make_spec(
    base_channels: int = 32,
    channel_multipliers: Sequence[int] = (1, 2, 4, 4),
    down_layers: Sequence[int] = (2, 2, 2, 2),
    up_layers: Sequence[int] = (3, 3, 3, 3),
    down_transformer: Sequence[bool] = (True, True, True, False),
    up_transformer: Sequence[bool] = (False, True, True, True),
    downsample: Sequence[bool] = (True, True, False, False),
    head_dim: int = 16,
    ff_mult: int = 2,
    **fields,
) -> UNetSpec:
    """Assemble a UNetSpec from per-depth settings (SD-style layout).

    The deepest down block and the first up block carry no Transformer unit
    by default; the mid block is ``[ResNet+Transformer, ResNet]``.
    """
    D = len(channel_multipliers)
    if not (len(down_layers) == len(up_layers) == len(down_transformer) == len(up_transformer) == len(downsample) == D):
        raise ConfigError("per-depth settings must all have one entry per depth")
    chans = [base_channels * m for m in channel_multipliers]

    def tf(c, on):
        if not on:
            return None
        return TransformerUnitSpec(heads=max(1, c // head_dim), head_dim=head_dim, ff_mult=ff_mult)

    down = []
    prev = base_channels
    for i in range(D):
        layers = []
        for j in range(down_layers[i]):
            layers.append(LayerSpec(ResNetUnitSpec(prev, chans[i]), tf(chans[i], down_transformer[i]), j))
            prev = chans[i]
        down.append(BlockSpec(tuple(layers), "down" if downsample[i] else "none"))
    c = prev
    mid = BlockSpec((LayerSpec(ResNetUnitSpec(c, c), tf(c, True), 0), LayerSpec(ResNetUnitSpec(c, c), None, 1)), "none")
    up = []
    for k in range(D):
        mirror = D - 1 - k
        out = chans[mirror]
        layers = []
        for j in range(up_layers[k]):
            cin = prev + chans[mirror] if j == 0 else out
            layers.append(LayerSpec(ResNetUnitSpec(cin, out), tf(out, up_transformer[k]), j))
            prev = out
        resample = "up" if k < D - 1 and downsample[mirror - 1] else "none"
        up.append(BlockSpec(tuple(layers), resample))
    spec = UNetSpec(tuple(down), mid, tuple(up), base_channels=base_channels,
                    channel_multipliers=tuple(channel_multipliers), **fields)
    validate_spec(spec)
    return spec


def desk_spec(**overrides) -> UNetSpec:
    """Toy default: latent 4x16x16, base 32, multipliers 1/2/4/4."""
    return make_spec(**overrides)


def sd15_spec() -> UNetSpec:
    """Stable-Diffusion-v1.5-shaped layout, for accounting only."""
    return make_spec(
        base_channels=320,
        channel_multipliers=(1, 2, 4, 4),
        downsample=(True, True, True, False),
        head_dim=40,
        ff_mult=4,
        latent_size=64,
        cond_dim=768,
        cond_seq_len=77,
        vocab_size=49408,
        time_embed_dim=1280,
        norm_groups=32,
    )


def validate_spec(spec: UNetSpec) -> None:
    """Check channel/skip arithmetic; raise ConfigError naming the offender."""
    if len(spec.down_blocks) != len(spec.up_blocks):
        raise ConfigError("down and up paths must have the same number of blocks")
    if not spec.mid_block.layers:
        raise ConfigError("mid block must keep at least one layer")
    g = spec.norm_groups

    def check_layer(bid, j, layer, cin):
        r = layer.resnet
        if r.in_channels != cin:
            raise ConfigError(f"{bid} layer {j}: expects {r.in_channels} input channels, receives {cin}")
        for c in (r.in_channels, r.out_channels):
            if c % g:
                raise ConfigError(f"{bid} layer {j}: {c} channels not divisible by {g} norm groups")
        if r.condconv is not None and r.condconv.n_experts < 1:
            raise ConfigError(f"{bid} layer {j}: n_experts must be >= 1")
        t = layer.transformer
        if t is not None and (t.heads < 1 or t.head_dim < 1 or t.ff_mult < 1):
            raise ConfigError(f"{bid} layer {j}: bad transformer settings {t}")
        return r.out_channels

    c = spec.base_channels
    if c % g:
        raise ConfigError(f"base channels {c} not divisible by {g} norm groups")
    skips = []
    for i, b in enumerate(spec.down_blocks):
        if b.resample not in ("down", "none"):
            raise ConfigError(f"dn{i}: resample must be 'down' or 'none'")
        for j, layer in enumerate(b.layers):
            c = check_layer(f"dn{i}", j, layer, c)
        skips.append(c)
    for j, layer in enumerate(spec.mid_block.layers):
        c = check_layer("mid", j, layer, c)
    D = len(spec.up_blocks)
    for k, b in enumerate(spec.up_blocks):
        if b.resample not in ("up", "none"):
            raise ConfigError(f"up{k}: resample must be 'up' or 'none'")
        if not b.layers:
            raise ConfigError(f"up{k}: up blocks must keep at least one layer (skip tensor needs a consumer)")
        c = c + skips[D - 1 - k]
        for j, layer in enumerate(b.layers):
            c = check_layer(f"up{k}", j, layer, c)
    if c != spec.base_channels:
        raise ConfigError(f"up path ends with {c} channels, conv_out expects {spec.base_channels}")
    down = sum(b.resample == "down" for b in spec.down_blocks)
    up = sum(b.resample == "up" for b in spec.up_blocks)
    if down != up or spec.latent_size % (2**down):
        raise ConfigError(f"{down} downsamples vs {up} upsamples on latent size {spec.latent_size}")


# ----------------------------------------------------------------- modules


def _rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class Module:
    """Parameter container; children are registered in assignment order."""

    def __init__(self):
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, (Tensor, Module)) or (
            isinstance(value, list) and value and all(isinstance(v, Module) for v in value)
        ):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, v in self._children.items():
            full = f"{prefix}{name}"
            if isinstance(v, Tensor):
                yield full, v
            elif isinstance(v, Module):
                yield from v.named_parameters(full + ".")
            else:
                for i, m in enumerate(v):
                    yield from m.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


def _param(shape, fill: float = 0.0) -> Tensor:
    return Tensor(np.full(shape, fill, dtype=dk.DTYPE), requires_grad=True)


def init_std(name: str, shape: tuple[int, ...]) -> float:
    """Initialization scale for a weight parameter (fan-in normal)."""
    if name.endswith("cond.table"):
        return 1.0
    if name.endswith("cond.positions"):
        return 0.1
    fan_in = int(np.prod(shape[2:] if name.endswith("experts") else shape[1:]))
    return 1.0 / math.sqrt(fan_in)


def fresh_value(seed: int, name: str, shape: tuple[int, ...], gain: float = 1.0) -> np.ndarray:
    """Seeded draw for one parameter, independent of every other parameter."""
    return _rng(seed, name).standard_normal(shape) * (init_std(name, shape) * gain)


def init_module(module: Module, seed: int, prefix: str = "") -> None:
    """Draw all weight matrices/kernels; norms, biases and routing keep their fills."""
    for name, p in module.named_parameters(prefix):
        if p.data.ndim >= 2 and not name.endswith("route_w"):
            p.data[...] = fresh_value(seed, name, p.shape)


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, bias: bool = True):
        super().__init__()
        self.weight = _param((fan_out, fan_in))
        self.has_bias = bias
        if bias:
            self.bias = _param((fan_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return dk.linear(x, self.weight, self.bias if self.has_bias else None)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1):
        super().__init__()
        self.stride = stride
        self.padding = k // 2
        self.weight = _param((cout, cin, k, k))
        self.bias = _param((cout,))

    def __call__(self, x: Tensor) -> Tensor:
        return dk.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int):
        super().__init__()
        self.groups = groups
        self.gamma = _param((channels,), 1.0)
        self.beta = _param((channels,))

    def __call__(self, x: Tensor) -> Tensor:
        return dk.group_norm(x, self.groups, self.gamma, self.beta)


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gamma = _param((dim,), 1.0)
        self.beta = _param((dim,))

    def __call__(self, x: Tensor) -> Tensor:
        return dk.layer_norm(x, self.gamma, self.beta)


EXPERT0_BIAS = 5.0


class CondConvUnit(Module):
    """Multi-expert 3x3 convolution with softmax routing on pooled input.

    Per sample: ``r = softmax(route_w @ GAP(x) + route_b)``, effective kernel
    ``sum_i r_i * experts[i]``, then a padded stride-1 convolution.
    """

    def __init__(self, cin: int, cout: int, n_experts: int):
        super().__init__()
        if n_experts < 1:
            raise ConfigError("n_experts must be >= 1")
        self.n_experts = n_experts
        self.experts = _param((n_experts, cout, cin, 3, 3))
        self.bias = _param((cout,))
        self.route_w = _param((n_experts, cin))
        rb = np.zeros(n_experts)
        if n_experts > 1:
            rb[0] = EXPERT0_BIAS
        self.route_b = Tensor(rb, requires_grad=True)

    def routing(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.experts.shape[2]:
            raise DimensionError(f"condconv input {x.shape} does not fit experts {self.experts.shape}")
        return dk.softmax(dk.linear(dk.mean(x, axis=(2, 3)), self.route_w, self.route_b))

    def __call__(self, x: Tensor) -> Tensor:
        kernels = dk.mix_kernels(self.routing(x), self.experts)
        return dk.conv2d(x, kernels, self.bias, 1, 1)


def condconv_forward(unit: CondConvUnit, x: Tensor) -> Tensor:
    return unit(x)


class ResNetUnit(Module):
    def __init__(self, spec: ResNetUnitSpec, temb_dim: int, groups: int):
        super().__init__()
        cin, cout = spec.in_channels, spec.out_channels
        self.norm1 = GroupNorm(cin, groups)
        self.conv1 = self._conv(cin, cout, spec)
        self.temb_proj = Linear(temb_dim, cout)
        self.norm2 = GroupNorm(cout, groups)
        self.conv2 = self._conv(cout, cout, spec)
        self.has_shortcut = cin != cout
        if self.has_shortcut:
            self.shortcut = Conv2d(cin, cout, 1)

    @staticmethod
    def _conv(cin, cout, spec):
        if spec.condconv is None:
            return Conv2d(cin, cout, 3)
        return CondConvUnit(cin, cout, spec.condconv.n_experts)

    def __call__(self, x: Tensor, temb_act: Tensor) -> Tensor:
        h = self.conv1(dk.silu(self.norm1(x)))
        t = self.temb_proj(temb_act)
        h = h + dk.reshape(t, t.shape + (1, 1))
        h = self.conv2(dk.silu(self.norm2(h)))
        skip = self.shortcut(x) if self.has_shortcut else x
        return skip + h


class Attention(Module):
    def __init__(self, dim: int, ctx_dim: int, heads: int, head_dim: int):
        super().__init__()
        inner = heads * head_dim
        self.heads, self.head_dim = heads, head_dim
        self.to_q = Linear(dim, inner, bias=False)
        self.to_k = Linear(ctx_dim, inner, bias=False)
        self.to_v = Linear(ctx_dim, inner, bias=False)
        self.to_out = Linear(inner, dim)

    def _split(self, t: Tensor) -> Tensor:
        N, L, _ = t.shape
        t = dk.transpose(dk.reshape(t, (N, L, self.heads, self.head_dim)), (0, 2, 1, 3))
        return dk.reshape(t, (N * self.heads, L, self.head_dim))

    def __call__(self, x: Tensor, ctx: Tensor) -> Tensor:
        N, L, _ = x.shape
        o = dk.attention(self._split(self.to_q(x)), self._split(self.to_k(ctx)), self._split(self.to_v(ctx)))
        o = dk.transpose(dk.reshape(o, (N, self.heads, L, self.head_dim)), (0, 2, 1, 3))
        return self.to_out(dk.reshape(o, (N, L, self.heads * self.head_dim)))


class TransformerUnit(Module):
    """Self-attention over spatial tokens, cross-attention over condition tokens, GELU MLP."""

    def __init__(self, channels: int, spec: TransformerUnitSpec, cond_dim: int, groups: int):
        super().__init__()
        inner = spec.inner
        self.norm = GroupNorm(channels, groups)
        self.proj_in = Linear(channels, inner)
        self.ln1 = LayerNorm(inner)
        self.attn1 = Attention(inner, inner, spec.heads, spec.head_dim)
        self.ln2 = LayerNorm(inner)
        self.attn2 = Attention(inner, cond_dim, spec.heads, spec.head_dim)
        self.ln3 = LayerNorm(inner)
        self.ff1 = Linear(inner, spec.ff_mult * inner)
        self.ff2 = Linear(spec.ff_mult * inner, inner)
        self.proj_out = Linear(inner, channels)

    def __call__(self, x: Tensor, ctx: Tensor) -> Tensor:
        N, C, H, W = x.shape
        t = dk.transpose(dk.reshape(self.norm(x), (N, C, H * W)), (0, 2, 1))
        t = self.proj_in(t)
        h = self.ln1(t)
        t = t + self.attn1(h, h)
        t = t + self.attn2(self.ln2(t), ctx)
        t = t + self.ff2(dk.gelu(self.ff1(self.ln3(t))))
        t = dk.transpose(self.proj_out(t), (0, 2, 1))
        return x + dk.reshape(t, (N, C, H, W))


class Layer(Module):
    def __init__(self, spec: LayerSpec, model_spec: UNetSpec):
        super().__init__()
        g = model_spec.norm_groups
        self.resnet = ResNetUnit(spec.resnet, model_spec.time_embed_dim, g)
        self.has_transformer = spec.transformer is not None
        if self.has_transformer:
            self.transformer = TransformerUnit(spec.resnet.out_channels, spec.transformer, model_spec.cond_dim, g)

    def __call__(self, x: Tensor, temb_act: Tensor, ctx: Tensor) -> Tensor:
        x = self.resnet(x, temb_act)
        if self.has_transformer:
            x = self.transformer(x, ctx)
        return x


class Block(Module):
    def __init__(self, spec: BlockSpec, model_spec: UNetSpec, channels: int):
        super().__init__()
        self.resample = spec.resample
        self.indices = [l.index for l in spec.layers]
        self.layers = [Layer(l, model_spec) for l in spec.layers]
        if spec.resample == "down":
            self.sampler = Conv2d(channels, channels, 3, stride=2)
        elif spec.resample == "up":
            self.sampler = Conv2d(channels, channels, 3)

    def __call__(self, x, temb_act, ctx, trace=None, block_id=""):
        for j, layer in enumerate(self.layers):
            with dk.flop_scope(block_id):
                x = layer(x, temb_act, ctx)
            if trace is not None:
                trace.append(f"{block_id}.{self.indices[j]}")
        with dk.flop_scope(block_id):
            if self.resample == "down":
                x = self.sampler(x)
            elif self.resample == "up":
                x = self.sampler(dk.upsample_nearest2x(x))
        return x


class ConditionEmbedding(Module):
    """Token table plus learned positions; token 0 is the null (unconditional) token."""

    def __init__(self, vocab_size: int, cond_dim: int, seq_len: int):
        super().__init__()
        self.null_token = NULL_TOKEN
        self.table = _param((vocab_size, cond_dim))
        self.positions = _param((seq_len, cond_dim))

    def __call__(self, tokens: np.ndarray) -> Tensor:
        return dk.embedding(self.table, tokens) + self.positions


def timestep_embed(t, dim: int, T_max: int = 1000) -> np.ndarray:
    """Interleaved sin/cos encoding of integer timestep(s) with geometric frequencies."""
    if dim % 2:
        raise ConfigError(f"timestep embedding dim must be even, got {dim}")
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= T_max):
        raise ContractError(f"timestep outside [0, {T_max})")
    freqs = np.exp(-math.log(10000.0) * np.arange(dim // 2) / (dim // 2))
    ang = t.astype(np.float64)[..., None] * freqs
    out = np.empty(ang.shape[:-1] + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


# ------------------------------------------------------------------- model


class UNetModel(Module):
    def __init__(self, spec: UNetSpec, seed: int):
        super().__init__()
        validate_spec(spec)
        object.__setattr__(self, "spec", spec)
        object.__setattr__(self, "seed", seed)
        c = spec.base_channels
        self.time1 = Linear(c, spec.time_embed_dim)
        self.time2 = Linear(spec.time_embed_dim, spec.time_embed_dim)
        self.cond = ConditionEmbedding(spec.vocab_size, spec.cond_dim, spec.cond_seq_len)
        self.conv_in = Conv2d(spec.latent_channels, c, 3)
        self.down = [Block(b, spec, _block_out(b, c)) for b, c in _inputs(spec.down_blocks, c)]
        self.mid = Block(spec.mid_block, spec, 0)
        self.up = [Block(b, spec, b.layers[-1].resnet.out_channels) for b in spec.up_blocks]
        self.norm_out = GroupNorm(c, spec.norm_groups)
        self.conv_out = Conv2d(c, spec.latent_channels, 3)
        init_module(self, seed)

    def block_module(self, block_id: str) -> Block:
        if block_id == "mid":
            return self.mid
        idx = int(block_id[2:])
        return self.down[idx] if block_id.startswith("dn") else self.up[idx]

    def block_prefix(self, block_id: str) -> str:
        if block_id == "mid":
            return "mid."
        return f"{'down' if block_id.startswith('dn') else 'up'}.{block_id[2:]}."

    def forward(self, latent, timestep, cond_tokens, *, taps: bool = False, trace: list | None = None):
        spec = self.spec
        x = dk.as_tensor(latent)
        expect = (spec.latent_channels, spec.latent_size, spec.latent_size)
        if x.ndim != 4 or x.shape[1:] != expect:
            raise DimensionError(f"latent shape {x.shape} does not match (N,) + {expect}")
        N = x.shape[0]
        t = np.broadcast_to(np.asarray(timestep), (N,))
        tokens = np.asarray(cond_tokens)
        if tokens.ndim == 1:
            tokens = np.broadcast_to(tokens, (N, tokens.shape[0]))
        if tokens.shape != (N, spec.cond_seq_len):
            raise DimensionError(f"cond tokens {tokens.shape} do not match (N, {spec.cond_seq_len})")
        with dk.flop_scope("embed"):
            temb = Tensor(timestep_embed(t, spec.base_channels, spec.T_max))
            temb_act = dk.silu(self.time2(dk.silu(self.time1(temb))))
            ctx = self.cond(tokens)
        with dk.flop_scope("conv_in"):
            h = self.conv_in(x)
        skips = []
        for i, blk in enumerate(self.down):
            for j, layer in enumerate(blk.layers):
                with dk.flop_scope(f"dn{i}"):
                    h = layer(h, temb_act, ctx)
                if trace is not None:
                    trace.append(f"dn{i}.{blk.indices[j]}")
            skips.append(h)
            with dk.flop_scope(f"dn{i}"):
                if blk.resample == "down":
                    h = blk.sampler(h)
        h = self.mid(h, temb_act, ctx, trace, "mid")
        mid_features = h
        D = len(self.up)
        for k, blk in enumerate(self.up):
            h = dk.concat([h, skips[D - 1 - k]], axis=1)
            h = blk(h, temb_act, ctx, trace, f"up{k}")
        with dk.flop_scope("conv_out"):
            out = self.conv_out(dk.silu(self.norm_out(h)))
        return (out, mid_features) if taps else out

    __call__ = forward


def _block_out(b: BlockSpec, cin: int) -> int:
    return b.layers[-1].resnet.out_channels if b.layers else cin


def _inputs(blocks, c):
    for b in blocks:
        yield b, c
        c = _block_out(b, c)


def build_unet(spec: UNetSpec, seed: int = 0) -> UNetModel:
    return UNetModel(spec, seed)


def forward(model: UNetModel, latent, timestep, cond_tokens) -> Tensor:
    return model.forward(latent, timestep, cond_tokens)


def forward_with_taps(model: UNetModel, latent, timestep, cond_tokens) -> tuple[Tensor, Tensor]:
    return model.forward(latent, timestep, cond_tokens, taps=True)


def null_tokens(spec: UNetSpec, n: int = 1) -> np.ndarray:
    return np.full((n, spec.cond_seq_len), NULL_TOKEN, dtype=np.int64)
