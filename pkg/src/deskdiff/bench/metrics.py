"""Generation-quality proxies and metrics plumbing.

wasserstein2_2d is exact (assignment problem); desk_fid is a Frechet
distance over features of a fixed seeded random conv net and is comparable
only across runs of this artifact, not with any published FID.
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

MAX_EXACT_POINTS = 2048


def wasserstein2_2d(samples_a, samples_b) -> float:
    """Exact 2-Wasserstein between equal-size empirical 2D point sets:
    sqrt(mean squared distance under the optimal perfect matching)."""
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 2 or b.ndim != 2 or b.shape[1] != 2:
        raise ValueError("inputs must be (N, 2)")
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"point counts differ: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] > MAX_EXACT_POINTS:
        raise ValueError(f"exact assignment capped at {MAX_EXACT_POINTS} points")
    cost = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))


class _FidFeatureNet(torch.nn.Module):
    """Frozen random conv pyramid; features are mean+std pooled per channel."""

    def __init__(self, seed: int = 0xF1D0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        chans = [3, 16, 32, 64]
        self.convs = torch.nn.ModuleList(
            torch.nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1) for i in range(3))
        for m in self.convs:
            fan_in = m.weight.shape[1] * 9
            m.weight.data.normal_(0, fan_in ** -0.5, generator=g)
            m.bias.data.zero_()
        for p in self.parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = []
        h = x
        for conv in self.convs:
            h = torch.tanh(conv(h))
            feats.append(h.mean(dim=(2, 3)))
            feats.append(h.std(dim=(2, 3)))
        return torch.cat(feats, dim=1)


_fid_net: _FidFeatureNet | None = None


def _fid_features(images: torch.Tensor) -> np.ndarray:
    global _fid_net
    if _fid_net is None:
        _fid_net = _FidFeatureNet()
    return _fid_net(images.float()).numpy().astype(np.float64)


def desk_fid(images_a: torch.Tensor, images_b: torch.Tensor, ridge: float = 1e-6) -> float:
    """Frechet distance between Gaussians fitted to frozen random-net features.

    Artifact-local proxy; values are only comparable across runs of this code.
    """
    if images_a.shape[0] < 64 or images_b.shape[0] < 64:
        raise ValueError("need at least 64 images per side")
    fa, fb = _fid_features(images_a), _fid_features(images_b)
    mu_a, mu_b = fa.mean(0), fb.mean(0)
    ca = np.cov(fa, rowvar=False) + ridge * np.eye(fa.shape[1])
    cb = np.cov(fb, rowvar=False) + ridge * np.eye(fb.shape[1])
    from scipy.linalg import sqrtm
    covmean = sqrtm(ca @ cb)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    d2 = float(((mu_a - mu_b) ** 2).sum() + np.trace(ca + cb - 2 * covmean))
    return max(d2, 0.0)


class MetricsWriter:
    """Append-only CSV with a fixed column registry."""

    def __init__(self, path: str | Path, columns: list[str]):
        self.path = Path(path)
        self.columns = list(columns)
        if not self.path.exists():
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(self.columns)

    def write(self, **row):
        unknown = set(row) - set(self.columns)
        if unknown:
            raise ValueError(f"unregistered metric columns: {sorted(unknown)}")
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow([row.get(c, "") for c in self.columns])


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
