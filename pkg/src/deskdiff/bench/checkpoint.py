"""Binary checkpoint format: a named f32 tensor store with JSON metadata.

Layout:  magic "DDCK" | u32 version | u64 header_len | header JSON | payload
The header carries format_version, free-form metadata (config hash, step,
rng state), and ordered entries {name, shape, dtype=f32, offset}; the payload
is the tensors' raw little-endian float32 bytes in entry order. Round trips
are bitwise.
"""
from __future__ import annotations

import base64
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"DDCK"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str | Path, tensors: dict, meta: dict | None = None) -> None:
    entries = []
    payload = bytearray()
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        arr = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f32",
                        "offset": len(payload)})
        payload.extend(arr.tobytes())
    header = json.dumps({"format_version": FORMAT_VERSION, "meta": meta or {},
                         "entries": entries}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(bytes(payload))


def load_checkpoint(path: str | Path):
    """Returns (tensors: name -> float32 ndarray, meta: dict)."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    (hlen,) = struct.unpack_from("<Q", raw, 8)
    header = json.loads(raw[16:16 + hlen].decode())
    payload = raw[16 + hlen:]
    tensors = {}
    expect = 0
    for e in header["entries"]:
        if e["dtype"] != "f32":
            raise CheckpointError(f"unsupported dtype {e['dtype']}")
        n = int(np.prod(e["shape"], dtype=np.int64)) if e["shape"] else 1
        if e["offset"] != expect:
            raise CheckpointError(f"{e['name']}: offset {e['offset']} inconsistent with shapes")
        end = e["offset"] + 4 * n
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated payload at entry {e['name']}")
        tensors[e["name"]] = np.frombuffer(payload, dtype="<f4", count=n,
                                           offset=e["offset"]).reshape(e["shape"]).copy()
        expect = end
    if expect != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - expect} trailing payload bytes")
    return tensors, header["meta"]


# -- model / optimizer / rng adapters ---------------------------------------

def model_tensors(model: torch.nn.Module, prefix: str = "model.") -> dict:
    return {prefix + k: v for k, v in model.state_dict().items()}


def load_model_tensors(model: torch.nn.Module, tensors: dict, prefix: str = "model.") -> None:
    sd = model.state_dict()
    missing, bad = [], []
    new_sd = {}
    for k, v in sd.items():
        key = prefix + k
        if key not in tensors:
            missing.append(k)
            continue
        arr = tensors[key]
        if tuple(arr.shape) != tuple(v.shape):
            bad.append(f"{k}: checkpoint {tuple(arr.shape)} vs model {tuple(v.shape)}")
            continue
        new_sd[k] = torch.from_numpy(np.array(arr))
    if missing or bad:
        raise CheckpointError(
            "checkpoint does not fit the model\n"
            + ("  missing: " + ", ".join(missing) + "\n" if missing else "")
            + ("  shape mismatches:\n    " + "\n    ".join(bad) if bad else ""))
    model.load_state_dict(new_sd, strict=False)


def optimizer_tensors(opt: torch.optim.Optimizer, model: torch.nn.Module) -> dict:
    """AdamW state keyed by parameter name; exact f32 round trip."""
    name_of = {id(p): n for n, p in model.named_parameters()}
    out = {}
    for group in opt.param_groups:
        for p in group["params"]:
            st = opt.state.get(p)
            if not st:
                continue
            n = name_of[id(p)]
            out[f"opt.{n}.step"] = np.float32(float(st["step"]))
            out[f"opt.{n}.exp_avg"] = st["exp_avg"]
            out[f"opt.{n}.exp_avg_sq"] = st["exp_avg_sq"]
    return out


def load_optimizer_tensors(opt: torch.optim.Optimizer, model: torch.nn.Module, tensors: dict) -> None:
    for n, p in model.named_parameters():
        key = f"opt.{n}.step"
        if key not in tensors:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(tensors[key])),
            "exp_avg": torch.from_numpy(np.array(tensors[f"opt.{n}.exp_avg"])),
            "exp_avg_sq": torch.from_numpy(np.array(tensors[f"opt.{n}.exp_avg_sq"])),
        }


def generator_state_to_meta(gen: torch.Generator) -> str:
    return base64.b64encode(gen.get_state().numpy().tobytes()).decode()


def generator_state_from_meta(value: str) -> torch.Tensor:
    return torch.from_numpy(np.frombuffer(base64.b64decode(value), dtype=np.uint8).copy())
