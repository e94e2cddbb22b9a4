"""UNet assembly: instantiates the block plan and runs the forward pass.

The model's ordered module list corresponds 1:1 with plan_blocks(config);
forward() interprets the plan's routing tags, so structure, pricing, and
execution cannot drift apart.
"""
from __future__ import annotations

import torch
import torch.nn as nn

from ..flowcore import ConditionSet
from .config import ArchConfig, BlockKind, BlockSpec, plan_blocks
from . import blocks as B

_ZERO_INIT_NAMES = ("conv2", "to_out", "fc_out", "proj_out")


def _build_module(spec: BlockSpec) -> nn.Module:
    if spec.kind is BlockKind.TIME_EMBED:
        return B.TimeEmbed(spec.in_ch, spec.out_ch)
    if spec.kind is BlockKind.IN_OUT_CONV:
        return B.InOutConv(spec)
    if spec.kind is BlockKind.UIB_RESBLOCK:
        return B.UIBResBlock(spec)
    if spec.kind is BlockKind.TRANSFORMER:
        return B.TransformerSite(spec)
    if spec.kind is BlockKind.FIRST_STAGE_COND:
        return B.FirstStageCondBlock(spec)
    if spec.kind is BlockKind.DOWNSAMPLE:
        return B.Downsample(spec)
    if spec.kind is BlockKind.UPSAMPLE:
        return B.Upsample(spec)
    raise ValueError(spec.kind)


def init_weights(model: nn.Module, generator: torch.Generator) -> None:
    """Fan-in variance scaling everywhere; final projections of residual
    branches and the output conv start at zero."""
    for name, module in model.named_modules():
        if isinstance(module, (nn.Conv2d, nn.Linear)):
            w = module.weight
            fan_in = w.shape[1] * (w.shape[2] * w.shape[3] if w.dim() == 4 else 1)
            if isinstance(module, nn.Conv2d) and module.groups > 1:
                fan_in = w.shape[2] * w.shape[3]
            leaf = name.rsplit(".", 1)[-1]
            if leaf in _ZERO_INIT_NAMES:
                w.data.zero_()
            else:
                w.data.normal_(0.0, fan_in ** -0.5, generator=generator)
            if module.bias is not None:
                module.bias.data.zero_()


class UNetModel(nn.Module):
    """Velocity-predicting UNet over (B, C, H, W) latents.

    forward(x_t, t, cond) with t (B,) in [0, 1] and cond a ConditionSet, a
    raw (B, tokens, context_dim) tensor, or None (zero context token).
    """

    def __init__(self, config: ArchConfig):
        super().__init__()
        self.config = config
        self.block_specs: list[BlockSpec] = plan_blocks(config)
        self.blocks = nn.ModuleList(_build_module(s) for s in self.block_specs)

    def context_tokens(self, cond, batch: int, dtype) -> torch.Tensor:
        if cond is None:
            return torch.zeros(batch, 1, self.config.context_dim, dtype=dtype)
        tokens = cond.tokens() if isinstance(cond, ConditionSet) else cond
        if tokens.dim() != 3 or tokens.shape[-1] != self.config.context_dim:
            raise ValueError(
                f"context must be (B, tokens, {self.config.context_dim}), got {tuple(tokens.shape)}")
        return tokens

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, cond=None, return_feature: bool = False):
        """Predict velocity. With return_feature=True also returns the
        lowest-resolution decoder output (before the first upsample), the
        distillation tap."""
        cfg = self.config
        div = 1 << (cfg.n_stages - 1)
        if x_t.shape[1] != cfg.latent_channels:
            raise ValueError(f"expected {cfg.latent_channels} latent channels, got {x_t.shape[1]}")
        if x_t.shape[2] % div or x_t.shape[3] % div:
            raise ValueError(f"spatial dims {x_t.shape[2:]} not divisible by {div}")
        ctx = self.context_tokens(cond, x_t.shape[0], x_t.dtype)

        t_emb: torch.Tensor | None = None
        x = x_t
        feature: torch.Tensor | None = None
        skips: list[torch.Tensor] = []
        specs = self.block_specs
        n = len(specs)
        i = 0
        while i < n:
            spec, mod = specs[i], self.blocks[i]
            if spec.role == "time":
                t_emb = mod(t)
            elif spec.role == "conv_in":
                x = mod(x)
                skips.append(x)
            elif spec.role == "enc":
                x = self._apply(spec, mod, x, t_emb, ctx)
                if i + 1 < n and specs[i + 1].role == "enc" and specs[i + 1].kind is BlockKind.TRANSFORMER:
                    i += 1
                    x = self.blocks[i](x, ctx)
                skips.append(x)
            elif spec.role == "down":
                x = mod(x)
                skips.append(x)
            elif spec.role == "mid":
                x = self._apply(spec, mod, x, t_emb, ctx)
            elif spec.role == "dec":
                if spec.kind is not BlockKind.TRANSFORMER:
                    x = torch.cat([x, skips.pop()], dim=1)
                x = self._apply(spec, mod, x, t_emb, ctx)
            elif spec.role == "up":
                if feature is None:
                    feature = x
                x = mod(x)
            elif spec.role == "conv_out":
                if feature is None:
                    feature = x
                x = mod(x)
            else:
                raise RuntimeError(f"unroutable block {spec}")
            i += 1
        if return_feature:
            return x, feature
        return x

    @staticmethod
    def _apply(spec: BlockSpec, mod: nn.Module, x, t_emb, ctx):
        if spec.kind is BlockKind.UIB_RESBLOCK:
            return mod(x, t_emb)
        if spec.kind is BlockKind.TRANSFORMER:
            return mod(x, ctx)
        if spec.kind is BlockKind.FIRST_STAGE_COND:
            return mod(x, ctx)
        raise RuntimeError(f"unexpected kind {spec.kind}")

    def sa_stages(self) -> set[int]:
        """Stages containing any self-attention, from structure."""
        return {s.stage for s in self.block_specs
                if s.kind is BlockKind.TRANSFORMER and s.has_sa and s.depth > 0}

    def named_block_params(self):
        """(plan index, spec, param count) per block, by enumeration."""
        out = []
        for i, (spec, mod) in enumerate(zip(self.block_specs, self.blocks)):
            out.append((i, spec, sum(p.numel() for p in mod.parameters())))
        return out


def build(config: ArchConfig, generator: torch.Generator) -> UNetModel:
    model = UNetModel(config)
    init_weights(model, generator)
    out_conv = model.blocks[-1]
    out_conv.conv.weight.data.zero_()
    out_conv.conv.bias.data.zero_()
    return model
