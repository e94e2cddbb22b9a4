"""Transformer (DiT-style) velocity teacher used for cross-architecture
distillation at desk scale: patchify -> adaptively modulated transformer
blocks -> unpatchify, trained on the same rectified flow as the student."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..flowcore import NoiseSchedule, TimestepDistribution, lerp_forward, sample_timesteps, task_loss
from ..archnet.blocks import sinusoidal_embedding
from ..bench.optim import build_adamw, weights_hash


@dataclass(frozen=True)
class DiTConfig:
    in_channels: int = 2
    input_size: int = 1
    patch: int = 1
    dim: int = 128
    depth: int = 6
    n_heads: int = 4
    time_dim: int = 128

    def __post_init__(self):
        if self.input_size % self.patch:
            raise ValueError("patch must divide input_size")
        if self.dim % self.n_heads:
            raise ValueError("n_heads must divide dim")

    @property
    def grid(self) -> int:
        return self.input_size // self.patch


def _modulate(x, shift, scale):
    return x * (1 + scale[:, None, :]) + shift[:, None, :]


class DiTBlock(nn.Module):
    def __init__(self, dim: int, n_heads: int, time_dim: int):
        super().__init__()
        self.n_heads = n_heads
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))
        self.ada = nn.Linear(time_dim, 6 * dim)
        self.ada.weight.data.zero_()
        self.ada.bias.data.zero_()

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        sh1, sc1, g1, sh2, sc2, g2 = self.ada(t_emb).chunk(6, dim=-1)
        h = _modulate(self.norm1(x), sh1, sc1)
        qkv = self.qkv(h).view(b, n, 3, self.n_heads, d // self.n_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.transpose(-2, -1) / (d // self.n_heads) ** 0.5, dim=-1)
        h = (attn @ v).transpose(1, 2).reshape(b, n, d)
        x = x + g1[:, None, :] * self.proj(h)
        h = self.mlp(_modulate(self.norm2(x), sh2, sc2))
        return x + g2[:, None, :] * h


class ToyDiT(nn.Module):
    def __init__(self, cfg: DiTConfig):
        super().__init__()
        self.cfg = cfg
        p, c, d = cfg.patch, cfg.in_channels, cfg.dim
        self.patchify = nn.Conv2d(c, d, p, stride=p)
        self.pos = nn.Parameter(torch.zeros(cfg.grid * cfg.grid, d))
        self.t_mlp = nn.Sequential(nn.Linear(256, cfg.time_dim), nn.SiLU(),
                                   nn.Linear(cfg.time_dim, cfg.time_dim))
        self.blocks = nn.ModuleList(DiTBlock(d, cfg.n_heads, cfg.time_dim) for _ in range(cfg.depth))
        self.final_norm = nn.LayerNorm(d, elementwise_affine=False)
        self.final_ada = nn.Linear(cfg.time_dim, 2 * d)
        self.head = nn.Linear(d, p * p * c)
        self.final_ada.weight.data.zero_()
        self.final_ada.bias.data.zero_()
        self.head.weight.data.zero_()
        self.head.bias.data.zero_()

    def init_weights(self, generator: torch.Generator) -> None:
        for name, m in self.named_modules():
            if isinstance(m, (nn.Linear, nn.Conv2d)):
                leaf = name.rsplit(".", 1)[-1]
                if leaf in ("ada", "final_ada", "head"):
                    continue
                fan_in = m.weight.shape[1] * (m.weight.shape[2] * m.weight.shape[3]
                                              if m.weight.dim() == 4 else 1)
                m.weight.data.normal_(0, fan_in ** -0.5, generator=generator)
                if m.bias is not None:
                    m.bias.data.zero_()
        self.pos.data.normal_(0, 0.02, generator=generator)

    def forward(self, x: torch.Tensor, t: torch.Tensor, cond=None) -> torch.Tensor:
        return self.forward_with_features(x, t)[0]

    def forward_with_features(self, x: torch.Tensor, t: torch.Tensor, taps=()):
        cfg = self.cfg
        b = x.shape[0]
        tokens = self.patchify(x).flatten(2).transpose(1, 2) + self.pos[None]
        t_emb = self.t_mlp(sinusoidal_embedding(t, 256))
        feats = {}
        g = cfg.grid
        for i, blk in enumerate(self.blocks):
            tokens = blk(tokens, t_emb)
            if i in taps:
                feats[i] = tokens.transpose(1, 2).reshape(b, cfg.dim, g, g)
        sh, sc = self.final_ada(t_emb).chunk(2, dim=-1)
        out = self.head(_modulate(self.final_norm(tokens), sh, sc))
        out = out.view(b, g, g, cfg.patch, cfg.patch, cfg.in_channels)
        out = out.permute(0, 5, 1, 3, 2, 4).reshape(b, cfg.in_channels,
                                                    cfg.input_size, cfg.input_size)
        return out, feats

    def block_kinds(self) -> set[str]:
        return {"TransformerBlock"}


class TeacherHandle:
    """A frozen velocity teacher with one exposed feature tap.

    Weights are frozen at construction and hash-checkable; every forward
    increments call_count so tests can assert when the teacher is consulted.
    """

    def __init__(self, model: ToyDiT, tap_layer: int | None = None):
        self.model = model
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        self.tap_layer = model.cfg.depth - 2 if tap_layer is None else tap_layer
        self.feature_dim = model.cfg.dim
        self.feature_grid = model.cfg.grid
        self.weight_hash = weights_hash(model)
        self.call_count = 0

    @torch.no_grad()
    def velocity(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        self.call_count += 1
        return self.model(x, t)

    @torch.no_grad()
    def velocity_and_feature(self, x: torch.Tensor, t: torch.Tensor):
        self.call_count += 1
        v, feats = self.model.forward_with_features(x, t, taps=(self.tap_layer,))
        return v, feats[self.tap_layer]

    @torch.no_grad()
    def features(self, x: torch.Tensor, t: torch.Tensor, taps) -> dict:
        self.call_count += 1
        return self.model.forward_with_features(x, t, taps=tuple(taps))[1]

    def current_hash(self) -> str:
        return weights_hash(self.model)


def train_teacher(batch_fn, dit_config: DiTConfig, budget: int, batch_size: int = 128,
                  lr: float = 2e-3, seed: int = 0,
                  schedule: NoiseSchedule | None = None,
                  tdist: TimestepDistribution | None = None,
                  log=None) -> TeacherHandle:
    """Train a ToyDiT on the rectified flow and return it frozen.

    batch_fn(n, generator) must yield (B, C, H, W) data matching dit_config.
    """
    schedule = schedule or NoiseSchedule()
    tdist = tdist or TimestepDistribution()
    gen = torch.Generator().manual_seed(seed)
    model = ToyDiT(dit_config)
    model.init_weights(gen)
    opt = build_adamw(model.parameters(), lr=lr)
    for step in range(budget):
        x0 = batch_fn(batch_size, gen)
        eps = torch.randn(x0.shape, generator=gen)
        t = sample_timesteps(batch_size, tdist, gen)
        fs = lerp_forward(x0, eps, t, schedule)
        v = model(fs.x_t, fs.t)
        loss, _ = task_loss(v, fs)
        if not torch.isfinite(loss):
            raise RuntimeError(f"teacher training diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log is not None and (step % 200 == 0 or step == budget - 1):
            log(step, float(loss))
    return TeacherHandle(model)
