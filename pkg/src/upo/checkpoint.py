"""Binary model checkpoints.

Layout: the 8-byte magic ``UPOCKPT1``, a little-endian uint32 header length,
a UTF-8 JSON header (architecture descriptor, parameter layout, iteration,
seed), then the parameter vector as little-endian float64.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import ParamVector
from .models import BackboneDescriptor, EstimatorModel, PolicyModel, RewardModel

MAGIC = b"UPOCKPT1"
_FAMILY = b"UPOCKPT"
_KINDS = {"policy": PolicyModel, "reward": RewardModel, "estimator": EstimatorModel}


class CheckpointError(ValueError):
    pass


def encode_checkpoint(model, iteration: int = 0, seed: int = 0) -> bytes:
    header = {
        "kind": model.descriptor.kind,
        "descriptor": model.descriptor.to_json(),
        "layout": model.params.layout_json(),
        "count": int(model.params.values.size),
        "iteration": int(iteration),
        "seed": int(seed),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    body = model.params.values.astype("<f8").tobytes()
    return MAGIC + struct.pack("<I", len(blob)) + blob + body


def decode_checkpoint(data: bytes):
    """Returns ``(model, header)``; raises :class:`CheckpointError` on any corruption."""
    if len(data) < len(MAGIC) + 4:
        raise CheckpointError("checkpoint truncated before header")
    magic = data[: len(MAGIC)]
    if magic != MAGIC:
        if magic.startswith(_FAMILY):
            raise CheckpointError(f"unsupported checkpoint version {magic.decode(errors='replace')!r}; expected {MAGIC.decode()!r}")
        raise CheckpointError("not a checkpoint: bad magic")
    (hlen,) = struct.unpack("<I", data[len(MAGIC) : len(MAGIC) + 4])
    start = len(MAGIC) + 4
    if len(data) < start + hlen:
        raise CheckpointError("checkpoint truncated inside header")
    try:
        header = json.loads(data[start : start + hlen].decode("utf-8"))
        desc = BackboneDescriptor.from_json(header["descriptor"])
        layout = ParamVector.layout_from_json(header["layout"])
        count = int(header["count"])
        cls = _KINDS[header["kind"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    body = data[start + hlen :]
    if len(body) != 8 * count:
        raise CheckpointError(f"checkpoint body has {len(body)} bytes, expected {8 * count}")
    values = np.frombuffer(body, dtype="<f8").astype(np.float64)
    try:
        params = ParamVector(values, layout)
    except ValueError as exc:
        raise CheckpointError(f"corrupt checkpoint parameters: {exc}") from None
    return cls(desc, params), header


def save_checkpoint(path: str | Path, model, iteration: int = 0, seed: int = 0) -> None:
    Path(path).write_bytes(encode_checkpoint(model, iteration, seed))


def load_checkpoint(path: str | Path):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return decode_checkpoint(data)
