"""Architecture configuration and the structural block plan.

ArchConfig declares one UNet variant; plan_blocks() expands it into an
ordered list of BlockSpec entries. The plan is the single structural source
of truth: the torch builder instantiates exactly these blocks and the cost
model prices exactly these blocks, so the two can be cross-checked to the
unit.

Layout (SDXL lineage): conv_in -> encoder stages (resblocks, each followed
by a transformer site where the stage has transformer depth, downsample
between stages) -> mid (resblock, transformer site, resblock) -> decoder
stages (resblocks_per_stage+1 resblocks consuming skip concatenations,
upsample between stages) -> conv_out. Transformer depth per site comes from
transformer_counts; self-attention can be restricted to the
lowest-resolution stage; with ca_first_stage the first stage's resblocks
become cross-attention+FFN blocks (no SA, no time injection).
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict, replace
from enum import Enum


class BlockKind(str, Enum):
    UIB_RESBLOCK = "UIBResBlock"
    TRANSFORMER = "TransformerBlock"
    FIRST_STAGE_COND = "FirstStageCondBlock"
    DOWNSAMPLE = "Downsample"
    UPSAMPLE = "Upsample"
    IN_OUT_CONV = "InOutConv"
    TIME_EMBED = "TimeEmbed"


@dataclass(frozen=True)
class ArchConfig:
    stage_channels: tuple[int, ...] = (64, 128, 192)
    transformer_counts: tuple[int, ...] = (0, 2, 4)
    resblocks_per_stage: int = 2
    ffn_ratio: float = 4.0
    ffn_gated: bool = True
    sepconv: bool = False
    sepconv_expansion: float = 2.0
    sa_lowest_stage_only: bool = False
    mqa: bool = False
    qk_rmsnorm: bool = False
    rope2d: bool = False
    ca_first_stage: bool = False
    head_dim: int = 32
    context_dim: int = 64
    context_tokens: int = 77
    time_embed_dim: int = 0  # 0 -> 4 * stage_channels[0]
    latent_channels: int = 4

    def __post_init__(self):
        if len(self.stage_channels) != len(self.transformer_counts):
            raise ValueError("stage_channels and transformer_counts must have equal length")
        if self.resblocks_per_stage < 1:
            raise ValueError("need at least one resblock per stage")
        if self.ffn_ratio <= 0 or self.sepconv_expansion <= 0:
            raise ValueError("ffn_ratio and sepconv_expansion must be positive")
        for i, (c, t) in enumerate(zip(self.stage_channels, self.transformer_counts)):
            if t > 0 and c % self.head_dim:
                raise ValueError(f"stage {i}: head_dim {self.head_dim} does not divide {c}")
        if self.ca_first_stage and self.stage_channels[0] % self.head_dim:
            raise ValueError("ca_first_stage needs head_dim dividing stage_channels[0]")

    @property
    def n_stages(self) -> int:
        return len(self.stage_channels)

    @property
    def time_dim(self) -> int:
        return self.time_embed_dim or 4 * self.stage_channels[0]

    def stage_has_sa(self, stage: int) -> bool:
        return (not self.sa_lowest_stage_only) or stage == self.n_stages - 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["transformer_counts"] = list(self.transformer_counts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ArchConfig keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("stage_channels", "transformer_counts"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class BlockSpec:
    """One priced/instantiated unit of the network."""

    kind: BlockKind
    stage: int               # resolution level the block's spatial math runs at
    role: str = ""           # routing tag: time/conv_in/enc/down/mid/dec/up/conv_out
    in_ch: int = 0
    out_ch: int = 0
    sepconv: bool = False
    expansion: float = 2.0
    time_dim: int = 0
    # transformer-site fields
    depth: int = 0
    has_sa: bool = False
    n_heads: int = 0
    kv_heads: int = 0
    head_dim: int = 0
    context_dim: int = 0
    context_tokens: int = 0
    ffn_hidden: int = 0
    ffn_gated: bool = True
    qk_rmsnorm: bool = False
    rope2d: bool = False
    fuse_in: int = 0         # cond block: concat width fused by a 1x1 before the block
    has_norm: bool = False   # InOutConv: GroupNorm+SiLU ahead of the conv (output head)

    @property
    def label(self) -> str:
        return f"{self.kind.value}[s{self.stage}]"


def _transformer_site(cfg: ArchConfig, channels: int, stage: int, has_sa: bool, role: str) -> BlockSpec:
    return BlockSpec(
        kind=BlockKind.TRANSFORMER, stage=stage, role=role, in_ch=channels, out_ch=channels,
        depth=cfg.transformer_counts[stage], has_sa=has_sa,
        n_heads=channels // cfg.head_dim,
        kv_heads=1 if cfg.mqa else channels // cfg.head_dim,
        head_dim=cfg.head_dim, context_dim=cfg.context_dim,
        context_tokens=cfg.context_tokens,
        ffn_hidden=int(cfg.ffn_ratio * channels), ffn_gated=cfg.ffn_gated,
        qk_rmsnorm=cfg.qk_rmsnorm, rope2d=cfg.rope2d)


def _cond_block(cfg: ArchConfig, fuse_in: int, role: str) -> BlockSpec:
    c = cfg.stage_channels[0]
    return BlockSpec(
        kind=BlockKind.FIRST_STAGE_COND, stage=0, role=role, in_ch=c, out_ch=c,
        n_heads=c // cfg.head_dim, kv_heads=1 if cfg.mqa else c // cfg.head_dim,
        head_dim=cfg.head_dim, context_dim=cfg.context_dim,
        context_tokens=cfg.context_tokens,
        ffn_hidden=int(cfg.ffn_ratio * c), ffn_gated=cfg.ffn_gated,
        qk_rmsnorm=cfg.qk_rmsnorm, fuse_in=fuse_in if fuse_in != c else 0)


def _resblock(cfg: ArchConfig, in_ch: int, out_ch: int, stage: int, role: str) -> BlockSpec:
    return BlockSpec(kind=BlockKind.UIB_RESBLOCK, stage=stage, role=role, in_ch=in_ch,
                     out_ch=out_ch, sepconv=cfg.sepconv, expansion=cfg.sepconv_expansion,
                     time_dim=cfg.time_dim)


def plan_blocks(cfg: ArchConfig) -> list[BlockSpec]:
    s = cfg.n_stages
    r = cfg.resblocks_per_stage
    chans = cfg.stage_channels
    counts = cfg.transformer_counts
    blocks: list[BlockSpec] = []

    blocks.append(BlockSpec(kind=BlockKind.TIME_EMBED, stage=0, role="time",
                            in_ch=chans[0], out_ch=cfg.time_dim))
    blocks.append(BlockSpec(kind=BlockKind.IN_OUT_CONV, stage=0, role="conv_in",
                            in_ch=cfg.latent_channels, out_ch=chans[0]))

    skips: list[int] = [chans[0]]
    ch = chans[0]
    for i in range(s):
        for _ in range(r):
            if i == 0 and cfg.ca_first_stage:
                blocks.append(_cond_block(cfg, fuse_in=ch, role="enc"))
            else:
                blocks.append(_resblock(cfg, ch, chans[i], i, role="enc"))
            ch = chans[i]
            if counts[i] > 0:
                blocks.append(_transformer_site(cfg, ch, i, cfg.stage_has_sa(i), role="enc"))
            skips.append(ch)
        if i < s - 1:
            blocks.append(BlockSpec(kind=BlockKind.DOWNSAMPLE, stage=i + 1, role="down",
                                    in_ch=ch, out_ch=ch))
            skips.append(ch)

    blocks.append(_resblock(cfg, ch, ch, s - 1, role="mid"))
    if counts[s - 1] > 0:
        blocks.append(_transformer_site(cfg, ch, s - 1, True, role="mid"))
    blocks.append(_resblock(cfg, ch, ch, s - 1, role="mid"))

    for i in reversed(range(s)):
        for _ in range(r + 1):
            skip_ch = skips.pop()
            if i == 0 and cfg.ca_first_stage:
                blocks.append(_cond_block(cfg, fuse_in=ch + skip_ch, role="dec"))
            else:
                blocks.append(_resblock(cfg, ch + skip_ch, chans[i], i, role="dec"))
            ch = chans[i]
            if counts[i] > 0:
                blocks.append(_transformer_site(cfg, ch, i, cfg.stage_has_sa(i), role="dec"))
        if i > 0:
            blocks.append(BlockSpec(kind=BlockKind.UPSAMPLE, stage=i - 1, role="up",
                                    in_ch=ch, out_ch=ch))

    blocks.append(BlockSpec(kind=BlockKind.IN_OUT_CONV, stage=0, role="conv_out",
                            in_ch=chans[0], out_ch=cfg.latent_channels, has_norm=True))
    assert not skips
    return blocks


# ---------------------------------------------------------------------------
# The published-scale variant ladder: (a) baseline .. (f) full.

_FULL = dict(stage_channels=(256, 512, 896), transformer_counts=(0, 2, 4),
             resblocks_per_stage=2, head_dim=64, context_dim=1024,
             context_tokens=77, latent_channels=16)


def ladder_configs() -> dict[str, ArchConfig]:
    """The architecture-change ladder at published scale.

    a: thin/short baseline (MHSA everywhere transformers exist, plain convs,
       gated FFN ratio 4)
    b: a + self-attention kept only in the lowest-resolution stage
    c: b + separable-conv residual blocks with expansion 2
    d: c + FFN ratio trimmed 4 -> 3
    e: d + multi-query attention + first-stage cross-attention blocks
    f: e + QK RMSNorm + 2D RoPE
    mqa: d + multi-query attention only (the isolated MQA delta)
    """
    a = ArchConfig(**_FULL, ffn_ratio=4.0)
    b = replace(a, sa_lowest_stage_only=True)
    c = replace(b, sepconv=True, sepconv_expansion=2.0)
    d = replace(c, ffn_ratio=3.0)
    d_mqa = replace(d, mqa=True)
    e = replace(d_mqa, ca_first_stage=True)
    f = replace(e, qk_rmsnorm=True, rope2d=True)
    return {"a": a, "b": b, "c": c, "d": d, "mqa": d_mqa, "e": e, "f": f}


def full_size_config() -> ArchConfig:
    return ladder_configs()["f"]


def desk_config(**overrides) -> ArchConfig:
    base = dict(stage_channels=(64, 128, 192), transformer_counts=(0, 2, 4),
                resblocks_per_stage=2, head_dim=32, context_dim=64,
                context_tokens=8, latent_channels=4, ffn_ratio=3.0,
                ffn_gated=True, sepconv=True, sa_lowest_stage_only=True,
                mqa=True, qk_rmsnorm=True, rope2d=True, ca_first_stage=True)
    base.update(overrides)
    return ArchConfig(**base)
