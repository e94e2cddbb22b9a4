"""Deterministic desk-scale datasets.

toy2d: seeded Gaussian mixture in the plane, with a closed-form posterior
velocity useful as an exact oracle. shapes32: procedural 32x32 RGB images of
colored shapes, fully determined by (seed, index). image_folder: PNGs from
disk. Train/eval splits use disjoint index ranges (shapes32/image_folder) or
disjoint seeds (toy2d).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..flowcore import NoiseSchedule, sigma_of_t

EVAL_INDEX_OFFSET = 1_000_000  # shapes32 eval indices live above this


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "toy2d"
    seed: int = 0
    # toy2d
    modes: int = 8
    radius: float = 1.5
    mode_std: float = 0.12
    # shapes32
    max_shapes: int = 3
    # image_folder
    path: str = ""
    resize: int = 32

    def __post_init__(self):
        if self.kind not in ("toy2d", "shapes32", "image_folder"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")


class Toy2dGMM:
    """Equal-weight Gaussian mixture with modes on a circle."""

    def __init__(self, spec: DatasetSpec):
        self.spec = spec
        ang = 2 * math.pi * np.arange(spec.modes) / spec.modes
        self.means = np.stack([spec.radius * np.cos(ang), spec.radius * np.sin(ang)], axis=1)
        self.std = spec.mode_std

    def sample(self, n: int, generator: torch.Generator) -> torch.Tensor:
        comp = torch.randint(0, self.spec.modes, (n,), generator=generator)
        mu = torch.from_numpy(self.means).float()[comp]
        return mu + self.std * torch.randn(n, 2, generator=generator)

    def velocity(self, x_t: torch.Tensor, t: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
        """Exact posterior velocity E[eps - x0 | x_t] = (x_t - E[x0|x_t]) / sigma(t).

        x_t: (B, 2) or (B, 2, 1, 1); t: (B,) with t > 0.
        """
        shape = x_t.shape
        x = x_t.reshape(shape[0], 2).double()
        sig = sigma_of_t(t.double(), schedule).clamp_min(1e-8)
        a = 1.0 - sig
        mu = torch.from_numpy(self.means).double()
        s2 = self.std ** 2
        var = (a ** 2) * s2 + sig ** 2                       # (B,)
        diff = x[:, None, :] - a[:, None, None] * mu[None]   # (B, K, 2)
        logp = -(diff ** 2).sum(-1) / (2 * var[:, None]) - torch.log(var[:, None])
        r = torch.softmax(logp, dim=1)                       # responsibilities
        gain = (a * s2 / var)[:, None, None]
        post_mean = mu[None] + gain * diff                   # E[x0 | x_t, k]
        ex0 = (r[:, :, None] * post_mean).sum(1)
        v = (x - ex0) / sig[:, None]
        return v.reshape(shape).to(x_t.dtype)

    def expected_task_loss(self, t: float, schedule: NoiseSchedule, n: int = 20000, seed: int = 0) -> float:
        """Monte-Carlo E||(eps-x0) - v*(x_t,t)||^2 / dim at the optimal predictor."""
        g = torch.Generator().manual_seed(seed)
        x0 = self.sample(n, g)
        eps = torch.randn(n, 2, generator=g)
        tt = torch.full((n,), t)
        sig = sigma_of_t(tt, schedule).unsqueeze(1)
        x_t = (1 - sig) * x0 + sig * eps
        v_star = self.velocity(x_t, tt, schedule)
        return float(((eps - x0 - v_star) ** 2).mean())


# ---------------------------------------------------------------------------
# shapes32: colored shapes on colored backgrounds, one RNG stream per index.

_YY, _XX = np.meshgrid(np.arange(32), np.arange(32), indexing="ij")


def _shape_mask(rng: np.random.Generator) -> np.ndarray:
    kind = rng.integers(0, 3)
    cy, cx = rng.uniform(6, 26, size=2)
    r = rng.uniform(4, 10)
    if kind == 0:      # circle
        return (_YY - cy) ** 2 + (_XX - cx) ** 2 <= r * r
    if kind == 1:      # square
        return (np.abs(_YY - cy) <= r) & (np.abs(_XX - cx) <= r)
    return (np.abs(_XX - cx) <= (_YY - cy + r) / 2) & (_YY >= cy - r) & (_YY <= cy + r)  # triangle


def shapes32_image(seed: int, index: int, max_shapes: int = 3) -> np.ndarray:
    """Deterministic (3, 32, 32) float32 image in [-1, 1]."""
    rng = np.random.default_rng((seed, index))
    img = np.empty((3, 32, 32), dtype=np.float32)
    img[:] = rng.uniform(-0.9, 0.9, size=3)[:, None, None]
    for _ in range(rng.integers(1, max_shapes + 1)):
        mask = _shape_mask(rng)
        color = rng.uniform(-1.0, 1.0, size=3).astype(np.float32)
        img[:, mask] = color[:, None]
    return img


def shapes32_batch(spec: DatasetSpec, indices: np.ndarray) -> torch.Tensor:
    arr = np.stack([shapes32_image(spec.seed, int(i), spec.max_shapes) for i in indices])
    return torch.from_numpy(arr)


def load_image_folder(spec: DatasetSpec) -> torch.Tensor:
    from PIL import Image
    paths = sorted(Path(spec.path).glob("*.png"))
    if not paths:
        raise FileNotFoundError(f"no .png files under {spec.path}")
    out = []
    for p in paths:
        im = Image.open(p).convert("RGB").resize((spec.resize, spec.resize), Image.BILINEAR)
        out.append(np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 127.5 - 1.0)
    return torch.from_numpy(np.stack(out))


class DataSource:
    """Uniform batch interface over the dataset kinds.

    train_batch/eval_batch return float tensors: (B, 2) for toy2d, images
    (B, 3, H, W) in [-1, 1] otherwise. Streams are deterministic from the
    spec seed; train and eval never overlap.
    """

    def __init__(self, spec: DatasetSpec):
        self.spec = spec
        if spec.kind == "toy2d":
            self.gmm = Toy2dGMM(spec)
        elif spec.kind == "image_folder":
            self._images = load_image_folder(spec)
        self._train_cursor = 0

    def train_batch(self, n: int, generator: torch.Generator) -> torch.Tensor:
        if self.spec.kind == "toy2d":
            return self.gmm.sample(n, generator)
        if self.spec.kind == "shapes32":
            idx = torch.randint(0, EVAL_INDEX_OFFSET, (n,), generator=generator).numpy()
            return shapes32_batch(self.spec, idx)
        idx = torch.randint(0, len(self._images), (n,), generator=generator).numpy()
        return self._images[idx]

    def eval_batch(self, n: int, seed: int = 7) -> torch.Tensor:
        if self.spec.kind == "toy2d":
            g = torch.Generator().manual_seed(seed ^ 0x5EED)
            return self.gmm.sample(n, g)
        if self.spec.kind == "shapes32":
            idx = EVAL_INDEX_OFFSET + np.arange(n) + n * seed
            return shapes32_batch(self.spec, idx)
        return self._images[:n]


# ---------------------------------------------------------------------------
# Frozen seeded latent encoder: maps shapes32 images to (4, 8, 8) latents for
# distillation experiments without requiring a trained autoencoder.

class FrozenLatentEncoder(torch.nn.Module):
    """Seeded random strided-conv encoder, standardized, never trained."""

    def __init__(self, latent_channels: int = 4, seed: int = 0xE7C0DE):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.c1 = torch.nn.Conv2d(3, 16, 3, stride=2, padding=1)
        self.c2 = torch.nn.Conv2d(16, 32, 3, stride=2, padding=1)
        self.c3 = torch.nn.Conv2d(32, latent_channels, 1)
        for m in (self.c1, self.c2, self.c3):
            fan_in = m.weight.shape[1] * m.weight.shape[2] * m.weight.shape[3]
            m.weight.data.normal_(0, fan_in ** -0.5, generator=g)
            m.bias.data.zero_()
        # standardize over a fixed reference batch so latents are ~N(0, 1)
        ref = shapes32_batch(DatasetSpec(kind="shapes32", seed=1234), np.arange(256))
        with torch.no_grad():
            z = self._raw(ref)
            self.register_buffer("mean", z.mean(dim=(0, 2, 3), keepdim=True))
            self.register_buffer("std", z.std(dim=(0, 2, 3), keepdim=True).clamp_min(1e-6))
        for p in self.parameters():
            p.requires_grad_(False)

    def _raw(self, x: torch.Tensor) -> torch.Tensor:
        h = torch.tanh(self.c1(x))
        h = torch.tanh(self.c2(h))
        return self.c3(h)

    @torch.no_grad()
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return (self._raw(x) - self.mean) / self.std
