"""Model checkpointing: a single self-describing binary archive.

Layout of an ``MCILCKPT v1`` file::

    MCILCKPT v1\\n
    {...canonical JSON header...}\\n
    <raw little-endian float64 payload>

The header carries the full architecture config, the number of learned
tasks, and a table with one row per tensor: name, shape, owner_task,
frozen flag, byte offset into the payload, and a sha256 of the tensor's
bytes. Loading rebuilds the model from the embedded config, replays the
expert-growth protocol, then copies and verifies every tensor, so a
round trip reproduces all outputs bit-exactly.

The header is serialized with sorted keys and no whitespace, and the
table is ordered by tensor name, so saving the same model twice yields
byte-identical files.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .encoders import MCILModel, ModelConfig
from .errors import CheckpointError, InvalidConfig

MAGIC = b"MCILCKPT v1\n"


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("ascii")


def _tensor_bytes(tensor: torch.Tensor) -> bytes:
    if tensor.dtype != torch.float64:
        raise CheckpointError(
            f"only float64 tensors are serializable, got {tensor.dtype}"
        )
    return tensor.detach().contiguous().numpy().astype("<f8", copy=False).tobytes()


def save_checkpoint(model: MCILModel, path) -> Path:
    """Write the model to ``path`` in MCILCKPT v1 layout."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    table = []
    chunks = []
    offset = 0
    for name, tensor, owner_task, frozen in model.tensor_entries():
        raw = _tensor_bytes(tensor)
        table.append({
            "name": name,
            "shape": list(tensor.shape),
            "owner_task": owner_task,
            "frozen": frozen,
            "offset": offset,
            "sha256": hashlib.sha256(raw).hexdigest(),
        })
        chunks.append(raw)
        offset += len(raw)

    header = {
        "config": dataclasses.asdict(model.cfg),
        "task_count": model.task_count,
        "tensors": table,
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_canonical_json(header))
        fh.write(b"\n")
        for raw in chunks:
            fh.write(raw)
    return path


def read_header(path) -> dict:
    """Parse and return just the JSON header of a checkpoint file."""
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not an MCILCKPT v1 file")
    end = data.find(b"\n", len(MAGIC))
    if end < 0:
        raise CheckpointError(f"{path}: missing header line")
    try:
        header = json.loads(data[len(MAGIC):end])
    except ValueError as exc:
        raise CheckpointError(f"{path}: malformed header: {exc}") from exc
    for key in ("config", "task_count", "tensors"):
        if key not in header:
            raise CheckpointError(f"{path}: header missing {key!r}")
    return header


def load_checkpoint(path) -> MCILModel:
    """Rebuild a model from a checkpoint, verifying every tensor."""
    path = Path(path)
    data = path.read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not an MCILCKPT v1 file")
    end = data.find(b"\n", len(MAGIC))
    if end < 0:
        raise CheckpointError(f"{path}: missing header line")
    try:
        header = json.loads(data[len(MAGIC):end])
    except ValueError as exc:
        raise CheckpointError(f"{path}: malformed header: {exc}") from exc
    payload = data[end + 1:]

    try:
        cfg = ModelConfig(**header["config"])
    except (InvalidConfig, TypeError) as exc:
        raise CheckpointError(f"{path}: bad config echo: {exc}") from exc

    model = MCILModel(cfg)
    task_count = header.get("task_count", 0)
    if not isinstance(task_count, int) or task_count < 0:
        raise CheckpointError(f"{path}: bad task_count {task_count!r}")
    for t in range(1, task_count + 1):
        model.add_task_expert(t)

    rows = {row["name"]: row for row in header["tensors"]}
    entries = model.tensor_entries()
    live = {name for name, _, _, _ in entries}
    for extra in sorted(set(rows) - live):
        raise CheckpointError(f"{path}: tensor {extra!r} not present in rebuilt model")

    param_names = {name for name, _ in model.named_parameters()}
    with torch.no_grad():
        for name, tensor, owner_task, _ in entries:
            row = rows.get(name)
            if row is None:
                raise CheckpointError(f"{path}: tensor {name!r} missing from header")
            if list(tensor.shape) != list(row["shape"]):
                raise CheckpointError(
                    f"{path}: tensor {name!r} shape mismatch: "
                    f"model {list(tensor.shape)}, checkpoint {row['shape']}"
                )
            if row["owner_task"] != owner_task:
                raise CheckpointError(
                    f"{path}: tensor {name!r} owner_task mismatch: "
                    f"model {owner_task}, checkpoint {row['owner_task']}"
                )
            size = tensor.numel() * 8
            raw = payload[row["offset"]:row["offset"] + size]
            if len(raw) != size:
                raise CheckpointError(f"{path}: tensor {name!r} payload truncated")
            if hashlib.sha256(raw).hexdigest() != row["sha256"]:
                raise CheckpointError(f"{path}: tensor {name!r} payload corrupt")
            values = np.frombuffer(raw, dtype="<f8").reshape(row["shape"]).copy()
            tensor.copy_(torch.from_numpy(values))
            if name in param_names:
                tensor.requires_grad_(not row["frozen"])

    expected = sum(t.numel() * 8 for _, t, _, _ in entries)
    if len(payload) != expected:
        raise CheckpointError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}"
        )
    return model
