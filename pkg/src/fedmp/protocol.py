"""Wire formats, the server-side feature bank, and exact byte accounting.

All blobs are little-endian. Model payloads are 32-bit floats (the byte
convention the ledger reports), while in-memory training state stays float64;
the simulator moves state by direct copy and uses these blobs for accounting
and on-disk artifacts.
"""

from __future__ import annotations

import csv
import struct
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .nn import NetworkSpec, Parameters, check_params

MODEL_MAGIC = 0x464D5031  # "FMP1"

UP = "up"
DOWN = "down"
KIND_MODEL = "model"
KIND_FEATURES = "features"
KIND_PROTOTYPES = "prototypes"


@dataclass(frozen=True)
class FeatureRecord:
    """One labeled embedding as uploaded to the server."""

    embedding: np.ndarray
    label: int
    client_id: int
    round: int


class CorruptBlobError(ValueError):
    """Raised when a wire blob is truncated or fails validation."""


# ---------------------------------------------------------------------------
# model blobs: 8-byte header (magic, tensor count), then per tensor an 8-byte
# shape header (rows, cols as u32) and float32 payload in sorted key order.

def _model_tensors(params: Parameters):
    for key in params.keys():
        arr = params[key]
        if arr.ndim == 1:
            yield key, 1, arr.shape[0], arr
        else:
            yield key, arr.shape[0], arr.shape[1], arr


def serialize_model(params: Parameters) -> bytes:
    parts = [struct.pack("<II", MODEL_MAGIC, len(params.keys()))]
    for _, rows, cols, arr in _model_tensors(params):
        parts.append(struct.pack("<II", rows, cols))
        parts.append(arr.astype("<f4").tobytes())
    return b"".join(parts)


def deserialize_model(blob: bytes, spec: NetworkSpec | None = None) -> Parameters:
    if len(blob) < 8:
        raise CorruptBlobError("model blob shorter than header")
    magic, count = struct.unpack_from("<II", blob, 0)
    if magic != MODEL_MAGIC:
        raise CorruptBlobError(f"bad model magic {magic:#x}")
    if spec is not None:
        template = list(_reference_keys(spec))
        if count != len(template):
            raise CorruptBlobError(f"tensor count {count} != expected {len(template)}")
    else:
        # keyless decode: tensors alternate weight/bias per synthetic layer index
        template = [
            ((i // 2, "W" if i % 2 == 0 else "b"), None) for i in range(count)
        ]
    offset = 8
    values = {}
    for key, want_shape in template:
        if offset + 8 > len(blob):
            raise CorruptBlobError("model blob truncated in shape header")
        rows, cols = struct.unpack_from("<II", blob, offset)
        offset += 8
        n = rows * cols
        end = offset + 4 * n
        if end > len(blob):
            raise CorruptBlobError("model blob truncated in payload")
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).astype(np.float64)
        offset = end
        shape = (cols,) if rows == 1 and (want_shape is None or len(want_shape) == 1) else (rows, cols)
        if want_shape is not None and shape != want_shape:
            raise CorruptBlobError(f"tensor {key}: shape {shape} != spec {want_shape}")
        values[key] = arr.reshape(shape)
    if offset != len(blob):
        raise CorruptBlobError("trailing bytes after model payload")
    params = Parameters(values)
    if spec is not None:
        check_params(params, spec)
    return params


def _reference_keys(spec: NetworkSpec):
    for idx, layer in enumerate(spec.layers):
        if layer[0] != "affine":
            continue
        _, n_in, n_out = layer
        yield (idx, "W"), (n_in, n_out)
        yield (idx, "b"), (n_out,)


def model_blob_bytes(params: Parameters) -> int:
    """Closed-form length: 8 + sum over tensors of (8 + 4 * count)."""
    return 8 + sum(8 + 4 * params[k].size for k in params.keys())


# ---------------------------------------------------------------------------
# feature batches: 8-byte header (count, embedding width), then per record a
# header (client_id u16, label u16, round u32) and float32 embedding.

def serialize_features(records: list[FeatureRecord]) -> bytes:
    width = len(records[0].embedding) if records else 0
    parts = [struct.pack("<II", len(records), width)]
    for rec in records:
        if len(rec.embedding) != width:
            raise CorruptBlobError("mixed embedding widths in one batch")
        parts.append(struct.pack("<HHI", rec.client_id, rec.label, rec.round))
        parts.append(np.asarray(rec.embedding, dtype="<f4").tobytes())
    return b"".join(parts)


def deserialize_features(blob: bytes) -> list[FeatureRecord]:
    if len(blob) < 8:
        raise CorruptBlobError("feature blob shorter than header")
    count, width = struct.unpack_from("<II", blob, 0)
    offset = 8
    records = []
    for _ in range(count):
        if offset + 8 + 4 * width > len(blob):
            raise CorruptBlobError("feature blob truncated")
        cid, label, rnd = struct.unpack_from("<HHI", blob, offset)
        offset += 8
        emb = np.frombuffer(blob, dtype="<f4", count=width, offset=offset).astype(np.float64)
        offset += 4 * width
        records.append(FeatureRecord(embedding=emb, label=label, client_id=cid, round=rnd))
    if offset != len(blob):
        raise CorruptBlobError("trailing bytes after feature payload")
    return records


def feature_blob_bytes(num_records: int, width: int) -> int:
    return 8 + num_records * (8 + 4 * width)


# ---------------------------------------------------------------------------
# prototype sets: header (K, width), then K float32 vectors in class order.

def serialize_prototypes(prototypes: np.ndarray) -> bytes:
    protos = np.asarray(prototypes, dtype=np.float64)
    return struct.pack("<II", protos.shape[0], protos.shape[1]) + protos.astype("<f4").tobytes()


def deserialize_prototypes(blob: bytes) -> np.ndarray:
    if len(blob) < 8:
        raise CorruptBlobError("prototype blob shorter than header")
    k, width = struct.unpack_from("<II", blob, 0)
    if len(blob) != 8 + 4 * k * width:
        raise CorruptBlobError("prototype blob length mismatch")
    return np.frombuffer(blob, dtype="<f4", count=k * width, offset=8).astype(np.float64).reshape(k, width)


def prototype_blob_bytes(num_classes: int, width: int) -> int:
    return 8 + 4 * num_classes * width


# ---------------------------------------------------------------------------


class FeatureBank:
    """Server store of uploaded embeddings, FIFO-bounded per (client, class)."""

    def __init__(self, capacity_per_slot: int = 512):
        if capacity_per_slot < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity_per_slot
        self._slots: dict[tuple[int, int], deque] = {}

    def insert(self, records: list[FeatureRecord]) -> None:
        for rec in records:
            slot = self._slots.setdefault(
                (rec.client_id, rec.label), deque(maxlen=self.capacity)
            )
            slot.append(rec)

    def __len__(self) -> int:
        return sum(len(s) for s in self._slots.values())

    def sample(self, requesting_client: int, per_client_count: int, seed: int) -> list[FeatureRecord]:
        """Up to ``per_client_count`` records from each other client, without
        replacement, never the requester's own uploads. Deterministic in seed."""
        if per_client_count < 0:
            raise ValueError("sample count must be >= 0")
        by_client: dict[int, list[FeatureRecord]] = {}
        for (cid, _), slot in sorted(self._slots.items()):
            if cid == requesting_client:
                continue
            by_client.setdefault(cid, []).extend(slot)
        rng = np.random.default_rng(seed)
        sampled = []
        for cid in sorted(by_client):
            pool = by_client[cid]
            take = min(per_client_count, len(pool))
            idx = rng.choice(len(pool), size=take, replace=False)
            sampled.extend(pool[i] for i in sorted(idx))
        return sampled


@dataclass(frozen=True)
class LedgerEntry:
    round: int
    direction: str
    kind: str
    byte_count: int
    client_id: int


@dataclass
class CommLedger:
    """Append-only exact byte log of every client/server transfer."""

    entries: list[LedgerEntry] = field(default_factory=list)

    def record(self, round: int, direction: str, kind: str, byte_count: int, client_id: int) -> None:
        if direction not in (UP, DOWN):
            raise ValueError(f"bad direction {direction!r}")
        if kind not in (KIND_MODEL, KIND_FEATURES, KIND_PROTOTYPES):
            raise ValueError(f"bad kind {kind!r}")
        if byte_count < 0:
            raise ValueError("byte_count must be >= 0")
        self.entries.append(LedgerEntry(round, direction, kind, byte_count, client_id))

    def total(self, round: int | None = None, direction: str | None = None,
              kind: str | None = None, client_id: int | None = None) -> int:
        return sum(
            e.byte_count for e in self.entries
            if (round is None or e.round == round)
            and (direction is None or e.direction == direction)
            and (kind is None or e.kind == kind)
            and (client_id is None or e.client_id == client_id)
        )

    def rounds(self) -> list[int]:
        return sorted({e.round for e in self.entries})

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["round", "direction", "kind", "bytes", "client_id"])
            for e in self.entries:
                writer.writerow([e.round, e.direction, e.kind, e.byte_count, e.client_id])
