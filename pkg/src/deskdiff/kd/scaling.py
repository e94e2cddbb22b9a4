"""Timestep-aware loss scaling: the logit-normal gate, per-timestep-bin
magnitude tracking, and the scaled combination of task and distillation
losses."""
from __future__ import annotations

import math

import numpy as np
import torch

from ..flowcore import T_MIN_DEFAULT, T_MAX_DEFAULT

_PDF_MAX = 4.0 / math.sqrt(2.0 * math.pi)  # standard logit-normal peak, at t=0.5


def logit_normal_pdf(t):
    """Density of sigmoid(Z), Z ~ N(0,1), elementwise on tensors or floats."""
    if isinstance(t, torch.Tensor):
        logit = torch.log(t) - torch.log1p(-t)
        return torch.exp(-0.5 * logit ** 2) / (t * (1 - t) * math.sqrt(2 * math.pi))
    logit = math.log(t) - math.log1p(-t)
    return math.exp(-0.5 * logit ** 2) / (t * (1 - t) * math.sqrt(2 * math.pi))


def lambda_t(t):
    """Logit-normal density normalized to peak 1 at t=0.5; clamps t away from
    the endpoints."""
    if isinstance(t, torch.Tensor):
        t = t.clamp(T_MIN_DEFAULT, T_MAX_DEFAULT)
    else:
        t = min(max(t, T_MIN_DEFAULT), T_MAX_DEFAULT)
    return logit_normal_pdf(t) / _PDF_MAX


class MagnitudeTracker:
    """Per-timestep-bin EMAs of mean per-sample loss magnitudes.

    n_bins uniform bins over (0,1); each key (task/kd/featkd) keeps a per-bin
    EMA, a per-bin write count, and a global EMA used as the fallback for
    bins that have never been written. The first write to a bin initializes
    its EMA directly. State round-trips through checkpoints.
    """

    KEYS = ("task", "kd", "featkd")

    def __init__(self, n_bins: int = 100, decay: float = 0.99):
        self.n_bins = n_bins
        self.decay = decay
        self.ema = {k: np.zeros(n_bins) for k in self.KEYS}
        self.count = {k: np.zeros(n_bins, dtype=np.int64) for k in self.KEYS}
        self.global_ema = {k: 0.0 for k in self.KEYS}
        self.global_count = {k: 0 for k in self.KEYS}

    def _bins(self, t: torch.Tensor) -> np.ndarray:
        return np.clip((t.detach().numpy() * self.n_bins).astype(np.int64), 0, self.n_bins - 1)

    def update(self, key: str, t: torch.Tensor, per_sample: torch.Tensor) -> None:
        vals = per_sample.detach().abs().numpy().astype(np.float64)
        bins = self._bins(t)
        for b in np.unique(bins):
            m = float(vals[bins == b].mean())
            if self.count[key][b] == 0:
                self.ema[key][b] = m
            else:
                self.ema[key][b] = self.decay * self.ema[key][b] + (1 - self.decay) * m
            self.count[key][b] += int((bins == b).sum())
        g = float(vals.mean())
        if self.global_count[key] == 0:
            self.global_ema[key] = g
        else:
            self.global_ema[key] = self.decay * self.global_ema[key] + (1 - self.decay) * g
        self.global_count[key] += len(vals)

    def magnitude(self, key: str, t: torch.Tensor) -> torch.Tensor:
        """Tracked |L^t| per sample (gradient-free). Bins never written fall
        back to the global EMA."""
        bins = self._bins(t)
        out = self.ema[key][bins].copy()
        empty = self.count[key][bins] == 0
        out[empty] = self.global_ema[key]
        return torch.from_numpy(out).float()

    def profile(self):
        """Rows of (bin_center, task, kd, featkd, count); empty tracker -> []."""
        if all(c == 0 for c in self.global_count.values()):
            return []
        rows = []
        for b in range(self.n_bins):
            rows.append(((b + 0.5) / self.n_bins,
                         self.ema["task"][b], self.ema["kd"][b], self.ema["featkd"][b],
                         int(self.count["task"][b])))
        return rows

    def tensors(self, prefix: str = "tracker.") -> dict:
        out = {}
        for k in self.KEYS:
            out[f"{prefix}{k}.ema"] = self.ema[k].astype(np.float32)
            out[f"{prefix}{k}.count"] = self.count[k].astype(np.float32)
            out[f"{prefix}{k}.global"] = np.array(
                [self.global_ema[k], self.global_count[k]], dtype=np.float32)
        return out

    def load_tensors(self, tensors: dict, prefix: str = "tracker.") -> None:
        for k in self.KEYS:
            self.ema[k] = tensors[f"{prefix}{k}.ema"].astype(np.float64)
            self.count[k] = tensors[f"{prefix}{k}.count"].astype(np.int64)
            g = tensors[f"{prefix}{k}.global"]
            self.global_ema[k] = float(g[0])
            self.global_count[k] = int(g[1])


def timestep_scale(task_per_sample: torch.Tensor, other_per_sample: torch.Tensor,
                   t: torch.Tensor, tracker: MagnitudeTracker,
                   other_key: str = "kd", eps: float = 1e-12) -> torch.Tensor:
    """lambda(t)*L_task + (1-lambda(t)) * (|L^t_task|/|L^t_other|) * L_other,
    averaged over the batch. The magnitude ratio is a tracked, gradient-free
    constant with the denominator clamped at eps."""
    lam = lambda_t(t)
    mag_task = tracker.magnitude("task", t)
    mag_other = tracker.magnitude(other_key, t).clamp_min(eps)
    ratio = mag_task / mag_other
    return (lam * task_per_sample + (1.0 - lam) * ratio * other_per_sample).mean()
