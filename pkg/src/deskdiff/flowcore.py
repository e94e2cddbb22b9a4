"""Rectified-flow core: forward interpolation, velocity loss, timestep
sampling, Euler integration, and classifier-free guidance.

All operations are pure given (inputs, generator); nothing here owns state.
Tensors are (B, C, H, W) float32 unless noted; timesteps live in (0, 1) with
t=1 pure noise and t=0 data.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

T_MIN_DEFAULT = 1e-4
T_MAX_DEFAULT = 1.0 - 1e-4


@dataclass(frozen=True)
class NoiseSchedule:
    """sigma(t) = shift*t / (1 + (shift-1)*t); shift=1 is the identity."""

    shift: float = 3.0
    t_min: float = T_MIN_DEFAULT
    t_max: float = T_MAX_DEFAULT

    def __post_init__(self):
        if not math.isfinite(self.shift) or self.shift <= 0:
            raise ValueError(f"shift must be a positive real, got {self.shift}")
        if not (0.0 <= self.t_min < self.t_max <= 1.0):
            raise ValueError(f"need 0 <= t_min < t_max <= 1, got [{self.t_min}, {self.t_max}]")


def sigma_of_t(t, schedule: NoiseSchedule):
    """Noise level at timestep t. Accepts scalars or tensors; endpoints are exact."""
    if isinstance(t, torch.Tensor):
        if not torch.isfinite(t).all():
            raise ValueError("non-finite timestep")
        if (t < 0).any() or (t > 1).any():
            raise ValueError("timestep outside [0, 1]")
        s = schedule.shift
        return s * t / (1.0 + (s - 1.0) * t)
    if not math.isfinite(t):
        raise ValueError("non-finite timestep")
    if t < 0.0 or t > 1.0:
        raise ValueError(f"timestep {t} outside [0, 1]")
    s = schedule.shift
    return s * t / (1.0 + (s - 1.0) * t)


@dataclass
class FlowSample:
    """One training batch on the straight noise->data path.

    x_t = (1 - sigma(t)) * x0 + sigma(t) * eps, v_target = eps - x0.
    """

    x0: torch.Tensor
    eps: torch.Tensor
    t: torch.Tensor  # (B,)
    x_t: torch.Tensor
    v_target: torch.Tensor


def _expand(t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return t.view(-1, *([1] * (like.dim() - 1)))


def lerp_forward(x0: torch.Tensor, eps: torch.Tensor, t: torch.Tensor, schedule: NoiseSchedule) -> FlowSample:
    """Interpolate data toward noise at per-sample timesteps."""
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {tuple(x0.shape)} and eps {tuple(eps.shape)} differ in shape")
    if t.dim() != 1 or t.shape[0] != x0.shape[0]:
        raise ValueError("t must be (B,) matching the batch")
    sig = _expand(sigma_of_t(t, schedule), x0)
    x_t = (1.0 - sig) * x0 + sig * eps
    return FlowSample(x0=x0, eps=eps, t=t, x_t=x_t, v_target=eps - x0)


def task_loss(v_pred: torch.Tensor, sample: FlowSample):
    """Velocity-matching MSE.

    Per-element mean within each sample, mean over the batch. Returns
    (scalar, per-sample vector); the per-sample vector feeds magnitude
    tracking downstream.
    """
    if v_pred.shape != sample.v_target.shape:
        raise ValueError("v_pred shape mismatch")
    if not torch.isfinite(v_pred).all():
        raise ValueError("non-finite v_pred")
    sq = (sample.v_target - v_pred) ** 2
    per_sample = sq.reshape(sq.shape[0], -1).mean(dim=1)
    return per_sample.mean(), per_sample


@dataclass(frozen=True)
class TimestepDistribution:
    """Logit-normal: t = sigmoid(z), z ~ Normal(location, scale)."""

    location: float = 0.0
    scale: float = 1.0
    t_min: float = T_MIN_DEFAULT
    t_max: float = T_MAX_DEFAULT

    def __post_init__(self):
        if self.scale < 0 or not math.isfinite(self.scale):
            raise ValueError(f"scale must be a nonnegative real, got {self.scale}")


def sample_timesteps(n: int, dist: TimestepDistribution, generator: torch.Generator) -> torch.Tensor:
    if n < 1:
        raise ValueError("need n >= 1")
    z = torch.randn(n, generator=generator) * dist.scale + dist.location
    return torch.sigmoid(z).clamp(dist.t_min, dist.t_max)


def euler_step(x_t: torch.Tensor, v: torch.Tensor, t_next: float, t_cur: float, schedule: NoiseSchedule) -> torch.Tensor:
    """One Euler step along the flow: x + (sigma(t_next) - sigma(t_cur)) * v."""
    if t_next >= t_cur:
        raise ValueError(f"t_next ({t_next}) must be below t_cur ({t_cur})")
    dsig = sigma_of_t(t_next, schedule) - sigma_of_t(t_cur, schedule)
    return x_t + dsig * v


def cfg_combine(v_uncond: torch.Tensor, v_cond: torch.Tensor, w: float) -> torch.Tensor:
    if v_uncond.shape != v_cond.shape:
        raise ValueError("guidance operands differ in shape")
    return v_uncond + w * (v_cond - v_uncond)


@dataclass(frozen=True)
class GuidanceSchedule:
    """Per-step guidance weight.

    constant: every step uses `scale`. varied: weight ramps linearly from
    scale_start to scale_end across active_steps (1-indexed, inclusive) and
    is 1 (no guidance) outside that interval.
    """

    mode: str = "constant"
    scale: float = 1.0
    scale_start: float = 1.1
    scale_end: float = 5.4
    active_steps: tuple[int, int] = (10, 30)

    def __post_init__(self):
        if self.mode not in ("constant", "varied"):
            raise ValueError(f"unknown guidance mode {self.mode!r}")
        if self.mode == "constant" and self.scale < 1.0:
            raise ValueError("constant guidance scale must be >= 1")
        if self.active_steps[0] > self.active_steps[1]:
            raise ValueError("active_steps must be an ordered interval")

    def weight_at(self, step: int, total_steps: int) -> float:
        """Guidance weight for 1-indexed `step` of a `total_steps` run."""
        if self.mode == "constant":
            return self.scale
        lo, hi = self.active_steps
        if step < lo or step > hi:
            return 1.0
        if hi == lo:
            return self.scale_start
        frac = (step - lo) / (hi - lo)
        return self.scale_start + frac * (self.scale_end - self.scale_start)


@dataclass
class ConditionSet:
    """Named condition-embedding sources with per-source null fallbacks.

    sources: name -> (B, tokens, dim). dropout_p: name -> probability of the
    source being replaced by its null embedding, drawn independently per
    sample per source. null_embeddings: name -> (tokens, dim) or broadcastable.
    """

    sources: dict[str, torch.Tensor]
    dropout_p: dict[str, float] = field(default_factory=dict)
    null_embeddings: dict[str, torch.Tensor] = field(default_factory=dict)

    def __post_init__(self):
        for name, src in self.sources.items():
            if src.dim() != 3:
                raise ValueError(f"source {name!r} must be (B, tokens, dim)")
            p = self.dropout_p.get(name, 0.0)
            if not (0.0 <= p <= 1.0):
                raise ValueError(f"dropout_p[{name!r}]={p} outside [0, 1]")
            if name not in self.null_embeddings:
                self.null_embeddings[name] = torch.zeros(src.shape[1:])

    @property
    def batch_size(self) -> int:
        return next(iter(self.sources.values())).shape[0]

    def tokens(self) -> torch.Tensor:
        """All sources concatenated along the token axis, for cross-attention."""
        return torch.cat(list(self.sources.values()), dim=1)

    def nulled(self) -> "ConditionSet":
        """Every source replaced by its null embedding (the unconditional set)."""
        b = self.batch_size
        nulled = {
            name: self.null_embeddings[name].expand(src.shape[1:]).unsqueeze(0).repeat(b, 1, 1)
            for name, src in self.sources.items()
        }
        return ConditionSet(sources=nulled, dropout_p=dict(self.dropout_p),
                            null_embeddings=dict(self.null_embeddings))


def drop_conditions(cond: ConditionSet, generator: torch.Generator):
    """Independently null out each source per sample with its dropout_p.

    Returns (new ConditionSet, mask) where mask is (B, n_sources) bool with
    True marking a dropped source.
    """
    b = cond.batch_size
    names = list(cond.sources.keys())
    mask = torch.zeros(b, len(names), dtype=torch.bool)
    new_sources = {}
    for j, name in enumerate(names):
        src = cond.sources[name]
        p = cond.dropout_p.get(name, 0.0)
        drop = torch.rand(b, generator=generator) < p
        mask[:, j] = drop
        null = cond.null_embeddings[name].expand(src.shape[1:]).to(src.dtype)
        new_sources[name] = torch.where(drop.view(b, 1, 1), null.unsqueeze(0), src)
    out = ConditionSet(sources=new_sources, dropout_p=dict(cond.dropout_p),
                       null_embeddings=dict(cond.null_embeddings))
    return out, mask


def uniform_t_grid(steps: int) -> list[float]:
    """steps+1 timesteps from 1 to 0, uniform in t (sigma is applied inside the step)."""
    return [1.0 - i / steps for i in range(steps + 1)]


@torch.no_grad()
def generate(model, steps: int, schedule: NoiseSchedule, guidance: GuidanceSchedule,
             cond: ConditionSet, generator: torch.Generator, shape=None,
             x_init: torch.Tensor | None = None) -> torch.Tensor:
    """Flow-Euler sampling from noise at t=1 down to t=0.

    `model(x_t, t, cond)` must return a velocity of x_t's shape. The
    unconditional pass runs only when the step weight differs from 1.
    Deterministic given the generator seed.
    """
    if steps < 1:
        raise ValueError("need steps >= 1")
    if x_init is not None:
        x = x_init.clone()
    else:
        if shape is None:
            raise ValueError("either shape or x_init is required")
        x = torch.randn(*shape, generator=generator)
    grid = uniform_t_grid(steps)
    uncond = None
    for i in range(steps):
        t_cur, t_next = grid[i], grid[i + 1]
        t_vec = torch.full((x.shape[0],), t_cur, dtype=x.dtype)
        v = model(x, t_vec, cond)
        w = guidance.weight_at(i + 1, steps)
        if w != 1.0:
            if uncond is None:
                uncond = cond.nulled()
            v_uncond = model(x, t_vec, uncond)
            v = cfg_combine(v_uncond, v, w)
        x = euler_step(x, v, t_next, t_cur, schedule)
        if not torch.isfinite(x).all():
            raise FloatingPointError(
                f"non-finite state at step {i + 1}/{steps} (t {t_cur:.4f} -> {t_next:.4f}); aborting sample")
    return x
