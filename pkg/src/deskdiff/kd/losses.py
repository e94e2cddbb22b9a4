"""Distillation losses: teacher-output matching, projected feature matching,
the constant-weight baseline, and the timestep-scaled combined objective."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .scaling import MagnitudeTracker, timestep_scale


def _per_sample_mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    sq = (a - b) ** 2
    return sq.reshape(sq.shape[0], -1).mean(dim=1)


def output_kd_loss(v_student: torch.Tensor, v_teacher: torch.Tensor):
    """Mean ||v_teacher - v_student||^2 (per-element mean per sample, mean over
    batch). The teacher side never carries gradient."""
    if not torch.isfinite(v_student).all() or not torch.isfinite(v_teacher).all():
        raise ValueError("non-finite distillation inputs")
    per_sample = _per_sample_mse(v_student, v_teacher.detach())
    return per_sample.mean(), per_sample


class Projector(nn.Module):
    """Two pointwise convs mapping student feature maps to the teacher's
    feature dimension, with one nonlinearity between."""

    def __init__(self, student_dim: int, teacher_dim: int, hidden: int = 0):
        super().__init__()
        hidden = hidden or teacher_dim
        self.conv1 = nn.Conv2d(student_dim, hidden, 1)
        self.conv2 = nn.Conv2d(hidden, teacher_dim, 1)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return self.conv2(F.silu(self.conv1(f)))


def feature_kd_loss(student_feat: torch.Tensor, teacher_feat: torch.Tensor, projector: Projector):
    """Mean ||f_teacher - psi(f_student)||^2 over one tap pair; the student
    map is bilinearly resampled when the spatial grids differ."""
    proj = projector(student_feat)
    if proj.shape[-2:] != teacher_feat.shape[-2:]:
        proj = F.interpolate(proj, size=teacher_feat.shape[-2:], mode="bilinear", align_corners=False)
    if proj.shape != teacher_feat.shape:
        raise ValueError(
            f"irreconcilable feature geometry {tuple(proj.shape)} vs {tuple(teacher_feat.shape)}")
    per_sample = _per_sample_mse(proj, teacher_feat.detach())
    return per_sample.mean(), per_sample


def linear_baseline(task, kd, featkd=None, lambda1: float = 1.0, lambda2: float = 0.0):
    """L_task + lambda1 * L_kd + lambda2 * L_featkd with constant weights."""
    total = task + lambda1 * kd
    if featkd is not None:
        total = total + lambda2 * featkd
    return total


def multilevel_objective(task_ps: torch.Tensor, kd_ps: torch.Tensor,
                         featkd_ps: torch.Tensor | None, t: torch.Tensor,
                         tracker: MagnitudeTracker, update_tracker: bool = True) -> torch.Tensor:
    """S(L_task, L_kd) + S(L_task, L_featkd), with the tracker updated from
    the current batch's detached per-sample losses before reading."""
    if update_tracker:
        tracker.update("task", t, task_ps)
        tracker.update("kd", t, kd_ps)
        if featkd_ps is not None:
            tracker.update("featkd", t, featkd_ps)
    total = timestep_scale(task_ps, kd_ps, t, tracker, other_key="kd")
    if featkd_ps is not None:
        total = total + timestep_scale(task_ps, featkd_ps, t, tracker, other_key="featkd")
    return total
