"""Static parameter and FLOP accounting over a :class:`UNetSpec`.

Everything here is computed from a UNetSpec alone; no model is built. FLOP
conventions: a multiply-accumulate is 2 FLOPs (convolution, linear and the
two attention matmuls); norms, activations and softmax cost 1 FLOP per
output element; bias adds, residual adds, concatenation and resampling
copies are free. Kernel mixing in CondConv units is 2 FLOPs per mixed
kernel element per expert.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field, replace

from .unet import BlockSpec, LayerSpec, UNetSpec, validate_spec

KINDS = ("conv", "linear", "attention", "elementwise", "mix")
UNIT_KINDS = ("resnet", "transformer", "other")


@dataclass
class BlockRow:
    block: str
    layers: int
    params: int = 0
    flops: int = 0
    param_share: float = 0.0
    flop_share: float = 0.0
    flops_by_kind: dict[str, int] = field(default_factory=dict)


@dataclass
class ProfileReport:
    rows: list[BlockRow]
    unit_params: dict[str, int]
    unit_flops: dict[str, int]
    latent_shape: tuple[int, int, int] | None = None

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    def row(self, block: str) -> BlockRow:
        for r in self.rows:
            if r.block == block:
                return r
        raise KeyError(block)

    def flops_by_kind(self) -> dict[str, int]:
        tot: Counter = Counter()
        for r in self.rows:
            tot.update(r.flops_by_kind)
        return {k: tot.get(k, 0) for k in KINDS}

    def to_dict(self) -> dict:
        return {
            "blocks": [
                {
                    "block": r.block,
                    "layers": r.layers,
                    "params": r.params,
                    "flops": r.flops,
                    "param_share": r.param_share,
                    "flop_share": r.flop_share,
                    "flops_by_kind": dict(r.flops_by_kind),
                }
                for r in self.rows
            ],
            "totals": {
                "params": self.total_params,
                "flops": self.total_flops,
                "flops_by_kind": self.flops_by_kind(),
                "unit_params": dict(self.unit_params),
                "unit_flops": dict(self.unit_flops),
                "latent_shape": list(self.latent_shape) if self.latent_shape else None,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self) -> str:
        lines = [f"{'block':<9}{'layers':>7}{'params':>14}{'share':>8}{'MFLOPs':>12}{'share':>8}"]
        for r in self.rows:
            lines.append(
                f"{r.block:<9}{r.layers:>7}{r.params:>14,}{100 * r.param_share:>7.1f}%"
                f"{r.flops / 1e6:>12.2f}{100 * r.flop_share:>7.1f}%"
            )
        lines.append(f"{'total':<9}{'':>7}{self.total_params:>14,}{'':>8}{self.total_flops / 1e6:>12.2f}")
        for k in UNIT_KINDS:
            lines.append(f"  {k:<12} params {self.unit_params.get(k, 0):>12,}  MFLOPs {self.unit_flops.get(k, 0) / 1e6:>10.2f}")
        return "\n".join(lines)


# ----------------------------------------------------------- closed forms


def _linear(fan_in, fan_out, bias=True):
    return fan_in * fan_out + (fan_out if bias else 0)


def _conv(cin, cout, k):
    return cout * cin * k * k + cout


def _condconv(cin, cout, e):
    return e * cout * cin * 9 + cout + e * cin + e


def resnet_params(layer: LayerSpec, temb: int) -> int:
    r = layer.resnet
    cin, cout = r.in_channels, r.out_channels
    n = 2 * cin + 2 * cout + _linear(temb, cout)
    if r.condconv is None:
        n += _conv(cin, cout, 3) + _conv(cout, cout, 3)
    else:
        e = r.condconv.n_experts
        n += _condconv(cin, cout, e) + _condconv(cout, cout, e)
    if cin != cout:
        n += _conv(cin, cout, 1)
    return n


def transformer_params(layer: LayerSpec, cond_dim: int) -> int:
    t = layer.transformer
    if t is None:
        return 0
    c, d, f = layer.resnet.out_channels, t.inner, t.ff_mult
    n = 2 * c + _linear(c, d) + 3 * 2 * d
    n += 3 * d * d + _linear(d, d)  # self-attention
    n += d * d + 2 * cond_dim * d + _linear(d, d)  # cross-attention
    n += _linear(d, f * d) + _linear(f * d, d)
    n += _linear(d, c)
    return n


def _resample_params(block: BlockSpec, channels: int) -> int:
    return _conv(channels, channels, 3) if block.resample in ("down", "up") else 0


def _walk(spec: UNetSpec):
    """Yield (block_id, BlockSpec, input channels, output channels, input size)."""
    c = spec.base_channels
    s = spec.latent_size
    skips = []
    for i, b in enumerate(spec.down_blocks):
        out = b.layers[-1].resnet.out_channels if b.layers else c
        yield f"dn{i}", b, c, out, s
        skips.append(out)
        c = out
        if b.resample == "down":
            s //= 2
    b = spec.mid_block
    out = b.layers[-1].resnet.out_channels
    yield "mid", b, c, out, s
    c = out
    D = len(spec.up_blocks)
    for k, b in enumerate(spec.up_blocks):
        out = b.layers[-1].resnet.out_channels
        yield f"up{k}", b, c + skips[D - 1 - k], out, s
        c = out
        if b.resample == "up":
            s *= 2


def count_params(spec: UNetSpec) -> ProfileReport:
    validate_spec(spec)
    base = spec.base_channels
    units: Counter = Counter()
    rows = [BlockRow("embed", 0), BlockRow("conv_in", 0)]
    embed = _linear(base, spec.time_embed_dim) + _linear(spec.time_embed_dim, spec.time_embed_dim)
    embed += spec.vocab_size * spec.cond_dim + spec.cond_seq_len * spec.cond_dim
    rows[0].params = embed
    rows[1].params = _conv(spec.latent_channels, base, 3)
    units["other"] += embed + rows[1].params
    for bid, b, _cin, cout, _s in _walk(spec):
        row = BlockRow(bid, len(b.layers))
        for layer in b.layers:
            rp = resnet_params(layer, spec.time_embed_dim)
            tp = transformer_params(layer, spec.cond_dim)
            units["resnet"] += rp
            units["transformer"] += tp
            row.params += rp + tp
        rs = _resample_params(b, cout)
        units["other"] += rs
        row.params += rs
        rows.append(row)
    head = 2 * base + _conv(base, spec.latent_channels, 3)
    rows.append(BlockRow("conv_out", 0, params=head))
    units["other"] += head
    total = sum(r.params for r in rows)
    for r in rows:
        r.param_share = r.params / total
    return ProfileReport(rows, {k: units.get(k, 0) for k in UNIT_KINDS}, {})


def resnet_flops(layer: LayerSpec, hw: int, temb: int) -> Counter:
    r = layer.resnet
    cin, cout = r.in_channels, r.out_channels
    f: Counter = Counter()
    f["elementwise"] += 2 * cin * hw + 2 * cout * hw
    f["linear"] += 2 * temb * cout
    f["conv"] += 2 * 9 * cin * cout * hw + 2 * 9 * cout * cout * hw
    if r.condconv is not None:
        e = r.condconv.n_experts
        for ci, co in ((cin, cout), (cout, cout)):
            f["linear"] += 2 * ci * e
            f["elementwise"] += e
            f["mix"] += 2 * e * co * ci * 9
    if cin != cout:
        f["conv"] += 2 * cin * cout * hw
    return f


def transformer_flops(layer: LayerSpec, hw: int, cond_dim: int, seq: int) -> Counter:
    t = layer.transformer
    f: Counter = Counter()
    if t is None:
        return f
    c, d, m, h = layer.resnet.out_channels, t.inner, t.ff_mult, t.heads
    L = hw
    f["elementwise"] += c * L + 3 * d * L  # group norm + three layer norms
    f["linear"] += 2 * c * d * L + 2 * d * c * L  # proj_in / proj_out
    f["linear"] += 4 * 2 * d * d * L  # self-attention q, k, v, out
    f["attention"] += 4 * L * L * d
    f["elementwise"] += h * L * L
    f["linear"] += 2 * 2 * d * d * L + 2 * 2 * cond_dim * d * seq  # cross-attention q, out / k, v
    f["attention"] += 4 * L * seq * d
    f["elementwise"] += h * L * seq
    f["linear"] += 2 * 2 * d * m * d * L
    f["elementwise"] += m * d * L
    return f


def estimate_flops(spec: UNetSpec, latent_shape: tuple[int, int, int] | None = None) -> ProfileReport:
    """Per-sample forward FLOPs, broken down per block and per unit kind."""
    validate_spec(spec)
    if latent_shape is None:
        latent_shape = (spec.latent_channels, spec.latent_size, spec.latent_size)
    lc, H, W = latent_shape
    if H != W:
        raise ValueError("square latents only")
    if H != spec.latent_size:
        spec = _resized(spec, H)
    base = spec.base_channels
    te = spec.time_embed_dim
    units: Counter = Counter()
    rows: list[BlockRow] = []

    def add(row: BlockRow, unit: str, f: Counter):
        for k, v in f.items():
            row.flops_by_kind[k] = row.flops_by_kind.get(k, 0) + v
        units[unit] += sum(f.values())

    emb = BlockRow("embed", 0)
    add(emb, "other", Counter(linear=2 * base * te + 2 * te * te, elementwise=2 * te))
    cin = BlockRow("conv_in", 0)
    add(cin, "other", Counter(conv=2 * 9 * lc * base * H * W))
    rows += [emb, cin]
    for bid, b, _ci, cout, s in _walk(spec):
        row = BlockRow(bid, len(b.layers))
        hw = s * s
        for layer in b.layers:
            add(row, "resnet", resnet_flops(layer, hw, te))
            add(row, "transformer", transformer_flops(layer, hw, spec.cond_dim, spec.cond_seq_len))
        if b.resample == "down":
            add(row, "other", Counter(conv=2 * 9 * cout * cout * (hw // 4)))
        elif b.resample == "up":
            add(row, "other", Counter(conv=2 * 9 * cout * cout * (hw * 4)))
        rows.append(row)
    head = BlockRow("conv_out", 0)
    add(head, "other", Counter(elementwise=2 * base * H * W, conv=2 * 9 * base * lc * H * W))
    rows.append(head)
    total = 0
    for r in rows:
        r.flops = sum(r.flops_by_kind.values())
        total += r.flops
    for r in rows:
        r.flop_share = r.flops / total
    return ProfileReport(rows, {}, {k: units.get(k, 0) for k in UNIT_KINDS}, tuple(latent_shape))


def _resized(spec: UNetSpec, size: int) -> UNetSpec:
    return replace(spec, latent_size=size)


def profile(spec: UNetSpec, latent_shape=None) -> ProfileReport:
    """Parameters and FLOPs in one report."""
    p = count_params(spec)
    f = estimate_flops(spec, latent_shape)
    for rp, rf in zip(p.rows, f.rows):
        rf.params = rp.params
        rf.param_share = rp.param_share
    f.unit_params = p.unit_params
    return f


def speedup_estimate(spec_before: UNetSpec, spec_after: UNetSpec, latent_shape=None, overhead: float = 0.15) -> dict:
    """UNet FLOP reduction and whole-pipeline reduction.

    ``overhead`` is the fraction of pipeline time spent outside the UNet
    (text encoder, VAE decode); it is unaffected by UNet changes.
    """
    if not 0.0 <= overhead < 1.0:
        raise ValueError("overhead fraction must be in [0, 1)")
    before = estimate_flops(spec_before, latent_shape).total_flops
    after = estimate_flops(spec_after, latent_shape).total_flops
    r = 1.0 - after / before
    return {
        "flops_before": before,
        "flops_after": after,
        "unet_flop_reduction": r,
        "pipeline_reduction": (1.0 - overhead) * r,
        "overhead": overhead,
    }


def block_of(param_name: str) -> str:
    """Profiler row that owns a model parameter name."""
    head = param_name.split(".", 2)
    if head[0] in ("time1", "time2", "cond"):
        return "embed"
    if head[0] == "down":
        return f"dn{head[1]}"
    if head[0] == "up":
        return f"up{head[1]}"
    if head[0] in ("norm_out", "conv_out"):
        return "conv_out"
    return head[0]
