"""Closed-form parameter and FLOP accounting for UNet variants.

Conventions (fixed so reports are reproducible bit-for-bit):
  * FLOPs count multiply-accumulates: one MAC = one FLOP. Matmul/conv cost
    is positions * kernel * c_in * c_out; bias adds cost one FLOP per output
    element.
  * Normalizations (GroupNorm/LayerNorm/RMSNorm) cost 4 FLOPs per element;
    activations, gates, residual adds, and softmax cost 1 per element.
  * RoPE costs 3 FLOPs per rotated element.
  * Per-sample work (time embedding and per-block time projections) is
    counted once per forward, not per spatial position.

Parameter counts include every learned tensor (weights, biases, norm gains
and shifts) and must match exhaustive enumeration of the built model
exactly; tests enforce this for every ladder config.
"""
from __future__ import annotations

import io
import csv
from dataclasses import dataclass

from .config import ArchConfig, BlockKind, BlockSpec, plan_blocks

NORM_FLOPS_PER_ELEM = 4
ACT_FLOPS_PER_ELEM = 1
ROPE_FLOPS_PER_ELEM = 3


@dataclass(frozen=True)
class CostEntry:
    label: str
    kind: str
    stage: int
    params: int
    flops: int


@dataclass(frozen=True)
class CostReport:
    entries: tuple[CostEntry, ...]
    latent_h: int = 0
    latent_w: int = 0

    @property
    def total_params(self) -> int:
        return sum(e.params for e in self.entries)

    @property
    def total_flops(self) -> int:
        return sum(e.flops for e in self.entries)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["block", "kind", "stage", "params", "flops"])
        for e in self.entries:
            w.writerow([e.label, e.kind, e.stage, e.params, e.flops])
        w.writerow(["total", "", "", self.total_params, self.total_flops])
        return buf.getvalue()


def _conv_params(cin: int, cout: int, k: int, bias: bool = True) -> int:
    return k * k * cin * cout + (cout if bias else 0)


def _dw_params(c: int, k: int) -> int:
    return k * k * c + c


def _linear_params(din: int, dout: int, bias: bool = True) -> int:
    return din * dout + (dout if bias else 0)


def _attn_params(spec: BlockSpec, q_dim: int, kv_src: int) -> int:
    c = spec.in_ch
    kv = spec.kv_heads * spec.head_dim
    p = _linear_params(q_dim, c)            # q
    p += 2 * _linear_params(kv_src, kv)     # k, v
    p += _linear_params(c, c)               # out
    if spec.qk_rmsnorm:
        p += c + kv                         # per-dim gains on q and k
    return p


def _ffn_params(spec: BlockSpec) -> int:
    c, h = spec.in_ch, spec.ffn_hidden
    if spec.ffn_gated:
        return _linear_params(c, 2 * h) + _linear_params(h, c)
    return _linear_params(c, h) + _linear_params(h, c)


def _uib_params(spec: BlockSpec) -> int:
    cin, cout, t = spec.in_ch, spec.out_ch, spec.time_dim
    skip = _conv_params(cin, cout, 1) if cin != cout else 0
    if spec.sepconv:
        h = int(spec.expansion * cout)
        return (2 * cin + _conv_params(cin, h, 1) + _linear_params(t, h)
                + 2 * h + _dw_params(h, 3) + _conv_params(h, cout, 1) + skip)
    return (2 * cin + _conv_params(cin, cout, 3) + _linear_params(t, cout)
            + 2 * cout + _conv_params(cout, cout, 3) + skip)


def _transformer_params(spec: BlockSpec) -> int:
    c = spec.in_ch
    per_block = 0
    if spec.has_sa:
        per_block += 2 * c + _attn_params(spec, c, c)
    per_block += 2 * c + _attn_params(spec, c, spec.context_dim)
    per_block += 2 * c + _ffn_params(spec)
    site = 2 * c + 2 * _conv_params(c, c, 1)  # entry GroupNorm + proj in/out
    return site + spec.depth * per_block


def _cond_params(spec: BlockSpec) -> int:
    c = spec.in_ch
    p = _conv_params(spec.fuse_in, c, 1) if spec.fuse_in else 0
    p += 2 * c + _attn_params(spec, c, spec.context_dim)
    p += 2 * c + _ffn_params(spec)
    return p


def params_of(spec: BlockSpec) -> int:
    if spec.kind is BlockKind.UIB_RESBLOCK:
        return _uib_params(spec)
    if spec.kind is BlockKind.TRANSFORMER:
        return _transformer_params(spec)
    if spec.kind is BlockKind.FIRST_STAGE_COND:
        return _cond_params(spec)
    if spec.kind in (BlockKind.DOWNSAMPLE, BlockKind.UPSAMPLE):
        return _conv_params(spec.in_ch, spec.out_ch, 3)
    if spec.kind is BlockKind.IN_OUT_CONV:
        return _conv_params(spec.in_ch, spec.out_ch, 3) + (2 * spec.in_ch if spec.has_norm else 0)
    if spec.kind is BlockKind.TIME_EMBED:
        return _linear_params(spec.in_ch, spec.out_ch) + _linear_params(spec.out_ch, spec.out_ch)
    raise ValueError(spec.kind)


def _attn_flops(spec: BlockSpec, n: int, kv_src_dim: int, kv_tokens: int, rope: bool) -> int:
    c = spec.in_ch
    kv = spec.kv_heads * spec.head_dim
    f = n * c * c + n * c                                   # q proj
    f += 2 * (kv_tokens * kv_src_dim * kv + kv_tokens * kv)  # k, v proj
    if spec.qk_rmsnorm:
        f += NORM_FLOPS_PER_ELEM * (n * c + kv_tokens * kv)
    if rope:
        f += ROPE_FLOPS_PER_ELEM * (n * c + kv_tokens * kv)
    scores = spec.n_heads * n * kv_tokens
    f += 2 * scores * spec.head_dim                         # qk^T and attn@v
    f += ACT_FLOPS_PER_ELEM * scores                        # softmax
    f += n * c * c + n * c                                  # out proj
    f += ACT_FLOPS_PER_ELEM * n * c                         # residual add
    return f


def _ffn_flops(spec: BlockSpec, n: int) -> int:
    c, h = spec.in_ch, spec.ffn_hidden
    if spec.ffn_gated:
        f = n * c * 2 * h + n * 2 * h                       # fused in proj
        f += 2 * ACT_FLOPS_PER_ELEM * n * h                 # gate act + mult
    else:
        f = n * c * h + n * h + ACT_FLOPS_PER_ELEM * n * h
    f += n * h * c + n * c                                  # out proj
    f += ACT_FLOPS_PER_ELEM * n * c                         # residual add
    return f


def _uib_flops(spec: BlockSpec, n: int) -> int:
    cin, cout, t = spec.in_ch, spec.out_ch, spec.time_dim
    f = NORM_FLOPS_PER_ELEM * n * cin + ACT_FLOPS_PER_ELEM * n * cin
    if spec.sepconv:
        h = int(spec.expansion * cout)
        f += n * cin * h + n * h                            # pw expand
        f += ACT_FLOPS_PER_ELEM * t + t * h + h             # silu(t_emb) + proj, per sample
        f += ACT_FLOPS_PER_ELEM * n * h                     # time add
        f += NORM_FLOPS_PER_ELEM * n * h + ACT_FLOPS_PER_ELEM * n * h
        f += 9 * n * h + n * h                              # depthwise 3x3
        f += ACT_FLOPS_PER_ELEM * n * h
        f += n * h * cout + n * cout                        # pw project
    else:
        f += 9 * n * cin * cout + n * cout
        f += ACT_FLOPS_PER_ELEM * t + t * cout + cout
        f += ACT_FLOPS_PER_ELEM * n * cout
        f += NORM_FLOPS_PER_ELEM * n * cout + ACT_FLOPS_PER_ELEM * n * cout
        f += 9 * n * cout * cout + n * cout
    if cin != cout:
        f += n * cin * cout + n * cout                      # skip 1x1
    f += ACT_FLOPS_PER_ELEM * n * cout                      # residual add
    return f


def _transformer_flops(spec: BlockSpec, n: int) -> int:
    c = spec.in_ch
    f = NORM_FLOPS_PER_ELEM * n * c
    f += 2 * (n * c * c + n * c)                            # proj in/out
    per = 0
    if spec.has_sa:
        per += NORM_FLOPS_PER_ELEM * n * c
        per += _attn_flops(spec, n, c, n, rope=spec.rope2d)
    per += NORM_FLOPS_PER_ELEM * n * c
    per += _attn_flops(spec, n, spec.context_dim, spec.context_tokens, rope=False)
    per += NORM_FLOPS_PER_ELEM * n * c
    per += _ffn_flops(spec, n)
    f += spec.depth * per
    f += ACT_FLOPS_PER_ELEM * n * c                         # site residual add
    return f


def _cond_flops(spec: BlockSpec, n: int) -> int:
    c = spec.in_ch
    f = 0
    if spec.fuse_in:
        f += n * spec.fuse_in * c + n * c
    f += NORM_FLOPS_PER_ELEM * n * c
    f += _attn_flops(spec, n, spec.context_dim, spec.context_tokens, rope=False)
    f += NORM_FLOPS_PER_ELEM * n * c
    f += _ffn_flops(spec, n)
    return f


def flops_of(spec: BlockSpec, latent_h: int, latent_w: int) -> int:
    h = latent_h >> spec.stage
    w = latent_w >> spec.stage
    n = h * w
    if spec.kind is BlockKind.UIB_RESBLOCK:
        return _uib_flops(spec, n)
    if spec.kind is BlockKind.TRANSFORMER:
        return _transformer_flops(spec, n)
    if spec.kind is BlockKind.FIRST_STAGE_COND:
        return _cond_flops(spec, n)
    if spec.kind in (BlockKind.DOWNSAMPLE, BlockKind.UPSAMPLE):
        return 9 * n * spec.in_ch * spec.out_ch + n * spec.out_ch
    if spec.kind is BlockKind.IN_OUT_CONV:
        f = 9 * n * spec.in_ch * spec.out_ch + n * spec.out_ch
        if spec.has_norm:
            f += (NORM_FLOPS_PER_ELEM + ACT_FLOPS_PER_ELEM) * n * spec.in_ch
        return f
    if spec.kind is BlockKind.TIME_EMBED:
        fd, td = spec.in_ch, spec.out_ch
        return fd + (fd * td + td) + ACT_FLOPS_PER_ELEM * td + (td * td + td)
    raise ValueError(spec.kind)


def cost_report(cfg: ArchConfig, latent_h: int = 0, latent_w: int = 0) -> CostReport:
    if latent_h:
        div = 1 << (cfg.n_stages - 1)
        if latent_h % div or latent_w % div:
            raise ValueError(f"latent {latent_h}x{latent_w} not divisible by {div}")
    entries = []
    for i, spec in enumerate(plan_blocks(cfg)):
        entries.append(CostEntry(
            label=f"{i:03d}.{spec.label}", kind=spec.kind.value, stage=spec.stage,
            params=params_of(spec),
            flops=flops_of(spec, latent_h, latent_w) if latent_h else 0))
    return CostReport(entries=tuple(entries), latent_h=latent_h, latent_w=latent_w)


def count_params(cfg: ArchConfig) -> CostReport:
    return cost_report(cfg)


def count_flops(cfg: ArchConfig, latent_h: int, latent_w: int) -> CostReport:
    return cost_report(cfg, latent_h, latent_w)


def ablation_delta(cfg_a: ArchConfig, cfg_b: ArchConfig, latent_hw: int) -> dict[str, float]:
    """Signed percentage change of totals, B relative to A."""
    ra = cost_report(cfg_a, latent_hw, latent_hw)
    rb = cost_report(cfg_b, latent_hw, latent_hw)
    return {
        "param_delta_pct": 100.0 * (rb.total_params - ra.total_params) / ra.total_params,
        "flop_delta_pct": 100.0 * (rb.total_flops - ra.total_flops) / ra.total_flops,
    }
