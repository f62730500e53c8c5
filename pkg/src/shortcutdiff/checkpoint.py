"""Binary checkpoint format.

Layout: 8-byte magic "SDOCKPT1", little-endian u64 length of a UTF-8 JSON
metadata block, the metadata, then each parameter array as raw
little-endian float64 in declaration order. Load failures report the byte
position of the problem.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import TIME_FEATURES, Denoiser
from .schedule import Schedule

MAGIC = b"SDOCKPT1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, denoiser: Denoiser, schedule: Schedule) -> None:
    meta = {
        "layer_sizes": denoiser.layer_sizes(),
        "hidden": list(denoiser.hidden),
        "activation": "tanh",
        "parameterization": denoiser.parameterization,
        "data_dim": denoiser.data_dim,
        "time_features": TIME_FEATURES,
        "schedule_kind": schedule.kind,
        "beta_min": schedule.beta_min,
        "beta_max": schedule.beta_max,
        "n_steps": schedule.n_steps,
        "param_shapes": [list(w.shape) for w in denoiser.weights],
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for w in denoiser.weights:
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[Denoiser, Schedule]:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8:
        raise CheckpointError(f"truncated header: file has {len(raw)} bytes")
    if raw[:8] != MAGIC:
        raise CheckpointError(f"bad magic at byte 0: {raw[:8]!r}")
    (meta_len,) = struct.unpack("<Q", raw[8:16])
    body = 16 + meta_len
    if len(raw) < body:
        raise CheckpointError(f"metadata truncated: need {body} bytes, have {len(raw)}")
    try:
        meta = json.loads(raw[16:body].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"bad metadata block at byte 16: {exc}") from exc

    try:
        shapes = [tuple(s) for s in meta["param_shapes"]]
        data_dim = int(meta["data_dim"])
        hidden = tuple(int(h) for h in meta["hidden"])
        parameterization = meta["parameterization"]
        schedule = Schedule(kind=meta["schedule_kind"], n_steps=int(meta["n_steps"]),
                            beta_min=float(meta["beta_min"]),
                            beta_max=float(meta["beta_max"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid metadata: {exc}") from exc

    pos = body
    weights = []
    for shape in shapes:
        size = int(np.prod(shape)) if shape else 1
        end = pos + 8 * size
        if len(raw) < end:
            raise CheckpointError(f"parameter data truncated at byte {pos}: "
                                  f"need {end - len(raw)} more bytes")
        weights.append(np.frombuffer(raw[pos:end], dtype="<f8").reshape(shape).copy())
        pos = end
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes at byte {pos}")
    return Denoiser(data_dim, hidden, parameterization, weights), schedule
