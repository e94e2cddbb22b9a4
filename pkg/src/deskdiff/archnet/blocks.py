"""UNet building blocks: UIB/plain residual blocks, transformer blocks with
MQA / QK-RMSNorm / 2D RoPE, first-stage conditioning blocks, and samplers.

Module parameter inventories mirror the closed-form cost model exactly; the
test suite enumerates both per block.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import BlockSpec


def group_norm(c: int) -> nn.GroupNorm:
    g = min(32, c)
    while c % g:
        g -= 1
    return nn.GroupNorm(g, c)


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Standard sin/cos features of t*1000, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * 1000.0 * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb.to(t.dtype if t.is_floating_point() else torch.float32)


class TimeEmbed(nn.Module):
    def __init__(self, freq_dim: int, time_dim: int):
        super().__init__()
        self.freq_dim = freq_dim
        self.fc1 = nn.Linear(freq_dim, time_dim)
        self.fc2 = nn.Linear(time_dim, time_dim)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        h = sinusoidal_embedding(t, self.freq_dim)
        return self.fc2(F.silu(self.fc1(h)))


class UIBResBlock(nn.Module):
    """Residual block; sepconv=True gives PW expand -> DW 3x3 -> PW project,
    sepconv=False the plain two-3x3-conv block. Time embedding is projected
    and added after the first conv."""

    def __init__(self, spec: BlockSpec):
        super().__init__()
        cin, cout = spec.in_ch, spec.out_ch
        self.sepconv = spec.sepconv
        self.norm1 = group_norm(cin)
        if spec.sepconv:
            hidden = int(spec.expansion * cout)
            self.conv1 = nn.Conv2d(cin, hidden, 1)
            self.time_proj = nn.Linear(spec.time_dim, hidden)
            self.norm2 = group_norm(hidden)
            self.dw = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
            self.conv2 = nn.Conv2d(hidden, cout, 1)
        else:
            self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
            self.time_proj = nn.Linear(spec.time_dim, cout)
            self.norm2 = group_norm(cout)
            self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else None

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(t_emb))[:, :, None, None]
        if self.sepconv:
            h = F.silu(self.norm2(h))
            h = F.silu(self.dw(h))
            h = self.conv2(h)
        else:
            h = self.conv2(F.silu(self.norm2(h)))
        res = x if self.skip is None else self.skip(x)
        return res + h


class RMSNormGain(nn.Module):
    """Per-head RMS normalization over the head dimension with learned gain."""

    def __init__(self, heads: int, dim: int, eps: float = 1e-6):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(heads, dim))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # (B, heads, n, d)
        rms = x.pow(2).mean(dim=-1, keepdim=True).add(self.eps).sqrt()
        return x / rms * self.gain[None, :, None, :]


def rope_2d_phases(h: int, w: int, head_dim: int, base: float = 10000.0):
    """cos/sin tables for axis-split rotary phases, shape (h*w, head_dim//2)."""
    quarter = head_dim // 4
    inv_freq = base ** (-torch.arange(quarter, dtype=torch.float32) / quarter)
    rows = torch.arange(h, dtype=torch.float32).repeat_interleave(w)
    cols = torch.arange(w, dtype=torch.float32).repeat(h)
    ang = torch.cat([rows[:, None] * inv_freq[None], cols[:, None] * inv_freq[None]], dim=1)
    return ang.cos(), ang.sin()


def apply_rope_2d(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate (B, heads, n, d); pairs are (x[..., :d/2], x[..., d/2:])."""
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


class Attention(nn.Module):
    """Softmax attention covering SA and CA.

    With kv_heads=1 a single K/V head is shared by all query heads (MQA).
    QK RMSNorm normalizes per head after projection. 2D RoPE applies only
    when rope=True (self-attention within spatial token maps).
    """

    def __init__(self, dim: int, kv_src_dim: int, n_heads: int, kv_heads: int,
                 head_dim: int, qk_rmsnorm: bool, rope: bool):
        super().__init__()
        if rope and head_dim % 4:
            raise ValueError("2D RoPE needs head_dim divisible by 4")
        self.n_heads, self.kv_heads, self.head_dim = n_heads, kv_heads, head_dim
        self.rope = rope
        self.to_q = nn.Linear(dim, n_heads * head_dim)
        self.to_k = nn.Linear(kv_src_dim, kv_heads * head_dim)
        self.to_v = nn.Linear(kv_src_dim, kv_heads * head_dim)
        self.to_out = nn.Linear(n_heads * head_dim, dim)
        if qk_rmsnorm:
            self.q_norm = RMSNormGain(n_heads, head_dim)
            self.k_norm = RMSNormGain(kv_heads, head_dim)
        else:
            self.q_norm = self.k_norm = None

    def forward(self, x: torch.Tensor, src: torch.Tensor, hw=None) -> torch.Tensor:
        b, n, _ = x.shape
        m = src.shape[1]
        q = self.to_q(x).view(b, n, self.n_heads, self.head_dim).transpose(1, 2)
        k = self.to_k(src).view(b, m, self.kv_heads, self.head_dim).transpose(1, 2)
        v = self.to_v(src).view(b, m, self.kv_heads, self.head_dim).transpose(1, 2)
        if self.q_norm is not None:
            q = self.q_norm(q)
            k = self.k_norm(k)
        if self.rope:
            cos, sin = rope_2d_phases(*hw, self.head_dim)
            q = apply_rope_2d(q, cos, sin)
            k = apply_rope_2d(k, cos, sin)
        if self.kv_heads == 1 and self.n_heads > 1:
            k = k.expand(b, self.n_heads, m, self.head_dim)
            v = v.expand(b, self.n_heads, m, self.head_dim)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, self.n_heads * self.head_dim)
        return self.to_out(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int, gated: bool):
        super().__init__()
        self.gated = gated
        self.fc_in = nn.Linear(dim, 2 * hidden if gated else hidden)
        self.fc_out = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.fc_in(x)
        if self.gated:
            a, b = h.chunk(2, dim=-1)
            h = a * F.silu(b)
        else:
            h = F.silu(h)
        return self.fc_out(h)


class TransformerSubBlock(nn.Module):
    def __init__(self, spec: BlockSpec):
        super().__init__()
        c = spec.in_ch
        self.has_sa = spec.has_sa
        if spec.has_sa:
            self.ln_sa = nn.LayerNorm(c)
            self.sa = Attention(c, c, spec.n_heads, spec.kv_heads, spec.head_dim,
                                spec.qk_rmsnorm, rope=spec.rope2d)
        self.ln_ca = nn.LayerNorm(c)
        self.ca = Attention(c, spec.context_dim, spec.n_heads, spec.kv_heads,
                            spec.head_dim, spec.qk_rmsnorm, rope=False)
        self.ln_ffn = nn.LayerNorm(c)
        self.ffn = FeedForward(c, spec.ffn_hidden, spec.ffn_gated)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor, hw) -> torch.Tensor:
        if self.has_sa:
            h = self.ln_sa(x)
            x = x + self.sa(h, h, hw=hw)
        x = x + self.ca(self.ln_ca(x), ctx)
        x = x + self.ffn(self.ln_ffn(x))
        return x


class TransformerSite(nn.Module):
    """GroupNorm -> 1x1 in -> depth transformer blocks on tokens -> 1x1 out,
    residual around the whole site."""

    def __init__(self, spec: BlockSpec):
        super().__init__()
        c = spec.in_ch
        self.norm = group_norm(c)
        self.proj_in = nn.Conv2d(c, c, 1)
        self.blocks = nn.ModuleList(TransformerSubBlock(spec) for _ in range(spec.depth))
        self.proj_out = nn.Conv2d(c, c, 1)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        t = self.proj_in(self.norm(x)).flatten(2).transpose(1, 2)
        for blk in self.blocks:
            t = blk(t, ctx, (h, w))
        return x + self.proj_out(t.transpose(1, 2).reshape(b, c, h, w))


class FirstStageCondBlock(nn.Module):
    """Cross-attention + FFN on tokens, no self-attention, no time injection.
    A 1x1 fuse conv absorbs skip concatenation on the decoder side."""

    def __init__(self, spec: BlockSpec):
        super().__init__()
        c = spec.in_ch
        self.fuse = nn.Conv2d(spec.fuse_in, c, 1) if spec.fuse_in else None
        self.ln_ca = nn.LayerNorm(c)
        self.ca = Attention(c, spec.context_dim, spec.n_heads, spec.kv_heads,
                            spec.head_dim, spec.qk_rmsnorm, rope=False)
        self.ln_ffn = nn.LayerNorm(c)
        self.ffn = FeedForward(c, spec.ffn_hidden, spec.ffn_gated)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        if self.fuse is not None:
            x = self.fuse(x)
        b, c, h, w = x.shape
        t = x.flatten(2).transpose(1, 2)
        t = t + self.ca(self.ln_ca(t), ctx)
        t = t + self.ffn(self.ln_ffn(t))
        return t.transpose(1, 2).reshape(b, c, h, w)


class Downsample(nn.Module):
    def __init__(self, spec: BlockSpec):
        super().__init__()
        self.conv = nn.Conv2d(spec.in_ch, spec.out_ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, spec: BlockSpec):
        super().__init__()
        self.conv = nn.Conv2d(spec.in_ch, spec.out_ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class InOutConv(nn.Module):
    def __init__(self, spec: BlockSpec):
        super().__init__()
        self.norm = group_norm(spec.in_ch) if spec.has_norm else None
        self.conv = nn.Conv2d(spec.in_ch, spec.out_ch, 3, padding=1)

    def forward(self, x):
        if self.norm is not None:
            x = F.silu(self.norm(x))
        return self.conv(x)
