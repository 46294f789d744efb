"""LGL1 checkpoint codec.

Layout:
    b"LGL1" | uint64 little-endian header length | UTF-8 JSON header (sorted keys)
    | little-endian float64 payloads, one per header tensor entry, in order.

The header carries everything besides raw arrays (configs, optimizer
hyperparameters and step counts, rng bit-generator states, running stats),
so a loaded state continues bit-identically.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any, Literal

import numpy as np
from pydantic import Field, ValidationError

from .models import ExperimentConfigV1, LatentPartition, LinkSpec, ModelConfig, StrictModel
from .networks import DISCRIMINATOR_PREFIXES, GENERATOR_PREFIXES, AdamState, ModelState
from .training import RngStreams, TrainState


MAGIC = b"LGL1"
_LENGTH = struct.Struct("<Q")
_DTYPE = np.dtype("<f8")


class CheckpointError(ValueError):
    """Raised when a checkpoint file cannot be decoded."""

    def __init__(self, *, path: Path, reason: str) -> None:
        super().__init__(f"invalid checkpoint {path}: {reason}")
        self.path = path
        self.reason = reason


class PartitionMismatchError(ValueError):
    """Raised when a checkpoint was trained with a different latent partition."""

    def __init__(self, *, expected: list[int], found: list[int]) -> None:
        super().__init__(f"partition mismatch: config has {expected}, checkpoint has {found}")
        self.expected = expected
        self.found = found


class TensorEntryV1(StrictModel):
    name: str = Field(min_length=1)
    shape: list[int]


class AdamHeaderV1(StrictModel):
    lr: float = Field(gt=0.0)
    beta1: float
    beta2: float
    eps: float
    step: int = Field(ge=0)


class CheckpointHeaderV1(StrictModel):
    format: Literal["LGL1"] = "LGL1"
    iteration: int = Field(ge=0)
    config_fingerprint: str
    seed: int = Field(ge=0)
    model: ModelConfig
    partition: LatentPartition
    links: list[LinkSpec]
    tensors: list[TensorEntryV1]
    adam_g: AdamHeaderV1
    adam_d: AdamHeaderV1
    rng_states: dict[str, dict[str, Any]]
    stats: dict[str, float] = Field(default_factory=dict)


def _adam_header(state: AdamState) -> AdamHeaderV1:
    return AdamHeaderV1(lr=state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps, step=state.step)


def _payload(state: TrainState) -> list[tuple[str, np.ndarray]]:
    items = [(f"param/{name}", value) for name, value in state.model.params.items()]
    for label, adam in (("adam_g", state.adam_g), ("adam_d", state.adam_d)):
        items += [(f"{label}.m/{name}", value) for name, value in adam.m.items()]
        items += [(f"{label}.v/{name}", value) for name, value in adam.v.items()]
    return items


def encode_checkpoint(state: TrainState, config: ExperimentConfigV1) -> bytes:
    payload = _payload(state)
    header = CheckpointHeaderV1(
        iteration=state.iteration,
        config_fingerprint=config.fingerprint(),
        seed=config.seed,
        model=state.model.config,
        partition=config.partition,
        links=config.links,
        tensors=[TensorEntryV1(name=name, shape=list(value.shape)) for name, value in payload],
        adam_g=_adam_header(state.adam_g),
        adam_d=_adam_header(state.adam_d),
        rng_states=state.rngs.states(),
        stats=state.stats,
    )
    header_bytes = json.dumps(
        header.model_dump(mode="json"), sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    chunks = [MAGIC, _LENGTH.pack(len(header_bytes)), header_bytes]
    chunks += [np.ascontiguousarray(value, dtype=_DTYPE).tobytes() for _, value in payload]
    return b"".join(chunks)


def save_checkpoint(state: TrainState, path: Path, config: ExperimentConfigV1) -> Path:
    """Write atomically (temp file + rename) and return the path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(state, config))
    os.replace(tmp, path)
    return path


def _split(data: bytes, path: Path) -> tuple[CheckpointHeaderV1, bytes]:
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(path=path, reason="magic-byte mismatch")
    offset = len(MAGIC) + _LENGTH.size
    if len(data) < offset:
        raise CheckpointError(path=path, reason="truncated header length")
    (length,) = _LENGTH.unpack_from(data, len(MAGIC))
    if len(data) < offset + length:
        raise CheckpointError(path=path, reason="truncated header")
    try:
        header = CheckpointHeaderV1.model_validate_json(data[offset : offset + length])
    except (ValidationError, UnicodeDecodeError) as err:
        raise CheckpointError(path=path, reason=f"corrupt header ({err.__class__.__name__})") from err
    return header, data[offset + length :]


def read_header(path: Path) -> CheckpointHeaderV1:
    path = Path(path)
    return _split(_read(path), path)[0]


def _read(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except OSError as err:
        raise CheckpointError(path=path, reason=f"unreadable ({err.strerror or err})") from err


def decode_checkpoint(data: bytes, path: Path) -> tuple[CheckpointHeaderV1, TrainState]:
    header, body = _split(data, path)
    expected = sum(int(np.prod(entry.shape, dtype=np.int64)) for entry in header.tensors) * _DTYPE.itemsize
    if len(body) < expected:
        raise CheckpointError(path=path, reason=f"truncated payload ({len(body)} of {expected} bytes)")
    if len(body) > expected:
        raise CheckpointError(path=path, reason=f"{len(body) - expected} trailing bytes")

    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header.tensors:
        count = int(np.prod(entry.shape, dtype=np.int64))
        flat = np.frombuffer(body, dtype=_DTYPE, count=count, offset=offset)
        arrays[entry.name] = flat.reshape(entry.shape).astype(np.float64)
        offset += count * _DTYPE.itemsize

    def group(prefix: str) -> dict[str, np.ndarray]:
        return {name[len(prefix) :]: value for name, value in arrays.items() if name.startswith(prefix)}

    try:
        model = ModelState(config=header.model, params=group("param/"))
        adam = {
            label: AdamState(
                lr=hyper.lr,
                beta1=hyper.beta1,
                beta2=hyper.beta2,
                eps=hyper.eps,
                step=hyper.step,
                m=group(f"{label}.m/"),
                v=group(f"{label}.v/"),
            )
            for label, hyper in (("adam_g", header.adam_g), ("adam_d", header.adam_d))
        }
        if set(adam["adam_g"].m) != set(model.subset(GENERATOR_PREFIXES)) or set(adam["adam_d"].m) != set(
            model.subset(DISCRIMINATOR_PREFIXES)
        ):
            raise ValueError("optimizer moments do not match parameters")
        rngs = RngStreams.from_states(header.rng_states)
    except (KeyError, TypeError, ValueError) as err:
        raise CheckpointError(path=path, reason=f"inconsistent contents ({err})") from err

    state = TrainState(
        model=model,
        adam_g=adam["adam_g"],
        adam_d=adam["adam_d"],
        iteration=header.iteration,
        rngs=rngs,
        stats=dict(header.stats),
    )
    return header, state


def load_checkpoint(path: Path) -> TrainState:
    path = Path(path)
    return decode_checkpoint(_read(path), path)[1]


def check_compatible(header: CheckpointHeaderV1, config: ExperimentConfigV1, path: Path) -> None:
    """Reject checkpoints whose partition or model shape differ from `config`."""
    if header.partition.sizes != config.partition.sizes:
        raise PartitionMismatchError(expected=config.partition.sizes, found=header.partition.sizes)
    if header.model != config.model:
        raise CheckpointError(path=Path(path), reason="model configuration differs from config")


def open_checkpoint(path: Path, config: ExperimentConfigV1) -> tuple[CheckpointHeaderV1, TrainState]:
    """Load a checkpoint and verify it matches `config`."""
    path = Path(path)
    header, state = decode_checkpoint(_read(path), path)
    check_compatible(header, config, path)
    return header, state
