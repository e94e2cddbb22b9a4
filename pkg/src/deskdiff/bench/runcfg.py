"""Run configuration: JSON with a strict schema and dotted-key overrides.

Every command resolves (defaults <- config file <- overrides) into a fully
explicit dict, rejects unknown keys at any nesting level, and archives the
resolved config next to its outputs so a run can be reproduced exactly.
"""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path


DEFAULTS: dict = {
    "seed": 0,
    "budget": 1000,
    "data": {
        "kind": "toy2d",
        "seed": 0,
        "modes": 8,
        "radius": 1.5,
        "mode_std": 0.12,
        "max_shapes": 3,
        "path": "",
        "resize": 32,
        "latents": False,          # encode shapes32 through the frozen latent encoder
    },
    "optim": {
        "lr": None,                # null -> 5e-5 * batch/1024, floored at 1e-5
        "weight_decay": 0.01,
        "betas": [0.9, 0.999],
        "batch_size": 64,
    },
    "ema": {"enabled": True, "decay": 0.999},
    "flow": {
        "shift": 3.0,
        "t_min": 1e-4,
        "t_max": 1.0 - 1e-4,
        "timestep_location": 0.0,
        "timestep_scale": 1.0,
        "cond_dropout": 0.1,
    },
    "arch": {
        "stage_channels": [64, 128, 192],
        "transformer_counts": [0, 2, 4],
        "resblocks_per_stage": 2,
        "ffn_ratio": 3.0,
        "ffn_gated": True,
        "sepconv": True,
        "sepconv_expansion": 2.0,
        "sa_lowest_stage_only": True,
        "mqa": True,
        "qk_rmsnorm": True,
        "rope2d": True,
        "ca_first_stage": True,
        "head_dim": 32,
        "context_dim": 64,
        "context_tokens": 8,
        "time_embed_dim": 0,
        "latent_channels": 4,
    },
    "teacher": {"dim": 128, "depth": 6, "heads": 4, "patch": 1, "time_dim": 128},
    "kd": {
        "mode": "full",            # task_only | kd | kd_feat | full
        "lambda1": 1.0,
        "lambda2": 0.5,
        "teacher_ckpt": "",
        "n_bins": 100,
        "ema_decay": 0.99,
        "projector_hidden": 0,     # 0 -> teacher feature dim
        "eval_batch": 256,
        "eval_every": 0,           # 0 -> budget (final only)
    },
    "decoder": {
        "latent_channels": 4,
        "downsample_factor": 4,
        "stage_channels": [64, 32, 16],
        "resblocks_per_stage": [2, 1, 1],
        "groupnorm_stages": [0],
        "sepconv": True,
        "sepconv_expansion": 2.0,
        "conv_shortcut": False,
        "w_mse": 1.0,
        "w_perceptual": 0.1,
        "w_adv": 0.05,
        "adv_start": 200,          # generator-only warmup steps
        "disc_lr": 1e-4,
        "hinge": False,
        "encoder_budget": 400,     # autoencoder pretraining steps for the frozen encoder
        "eval_every": 0,
    },
    "stepdistill": {
        "steps": 4,
        "adv_weight": 0.5,
        "shared_eps": False,
        "student_ckpt": "",
        "teacher_ckpt": "",
        "d_lr": 1e-3,
        "head_dim": 64,
        "tap_every": 4,
        "eval_every": 0,
        "eval_points": 512,
    },
    "sample": {
        "steps": 28,
        "count": 256,
        "ckpt": "",
        "use_ema": True,
        "guidance_mode": "constant",
        "guidance_scale": 1.0,
        "guidance_start": 1.1,
        "guidance_end": 5.4,
        "guidance_active": [10, 30],
    },
    "train": {
        "checkpoint_every": 0,     # 0 -> final only
        "log_every": 50,
        "lr": None,                # per-command override of optim.lr
    },
}


def _merge_strict(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        where = f"{path}.{k}" if path else k
        if k not in base:
            raise KeyError(f"unknown config key: {where}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise TypeError(f"{where} must be a section (object)")
            out[k] = _merge_strict(base[k], v, where)
        else:
            out[k] = v
    return out


def parse_override(text: str):
    """'a.b.c=value' with JSON-parsed values ('true', '3', '[1,2]', ...)."""
    if "=" not in text:
        raise ValueError(f"override {text!r} is not key=value")
    key, _, raw = text.partition("=")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node: dict = {}
    leaf = node
    parts = key.split(".")
    for p in parts[:-1]:
        leaf[p] = {}
        leaf = leaf[p]
    leaf[parts[-1]] = value
    return node


def resolve_config(config_path: str | None = None, overrides: list[str] | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if config_path:
        with open(config_path) as f:
            cfg = _merge_strict(cfg, json.load(f))
    for text in overrides or []:
        cfg = _merge_strict(cfg, parse_override(text))
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def archive_config(cfg: dict, run_dir: str | Path) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    out = run_dir / "config.json"
    with open(out, "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")
    return out
