"""Bit-exact embedding container (HGAF), the JSON task manifest, task loading,
and checkpoint serialization. These byte layouts and the manifest schema are
the external contract shared with feature exporters; see README for the
normative description.

Reads are concurrent-safe; writes take an exclusive per-path lock within the
process and fsync before returning.
"""

from __future__ import annotations

import json
import os
import struct
import threading
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    BadMagicError,
    BadVersionError,
    CorruptChecksumError,
    ManifestError,
    TruncatedFileError,
    UnsupportedDtypeError,
    VersionMismatchError,
)
from .graph import HeteroGraph, assemble_graph
from .tensor import check_finite, row_l2_normalize

HGAF_MAGIC = b"HGAF"
HGAF_VERSION = 1
HGAF_DTYPE_F32 = 0
_HGAF_HEADER = struct.Struct("<4sIB3sQQ")  # magic, version, dtype, reserved, rows, dim
HGAF_HEADER_SIZE = _HGAF_HEADER.size  # 28 bytes

CKPT_MAGIC = b"HGCK"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sII")  # magic, version, crc32(payload)

_locks_guard = threading.Lock()
_path_locks: dict[str, threading.Lock] = {}


def _path_lock(path) -> threading.Lock:
    key = os.path.abspath(os.fspath(path))
    with _locks_guard:
        return _path_locks.setdefault(key, threading.Lock())


def _write_bytes(path, data: bytes) -> None:
    with _path_lock(path):
        with open(path, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())


# --- HGAF embedding container --------------------------------------------

def write_hgaf(m: np.ndarray, path) -> None:
    """Write a matrix as magic, version, dtype code, rows, dim (all
    little-endian) followed by the row-major float32 payload."""
    m = np.ascontiguousarray(m, dtype="<f4")
    if m.ndim != 2:
        raise ValueError(f"HGAF stores 2-D matrices, got shape {m.shape}")
    header = _HGAF_HEADER.pack(
        HGAF_MAGIC, HGAF_VERSION, HGAF_DTYPE_F32, b"\x00\x00\x00",
        m.shape[0], m.shape[1],
    )
    _write_bytes(path, header + m.tobytes())


def read_hgaf(path) -> np.ndarray:
    """Exact payload round-trip of `write_hgaf`; no normalization applied."""
    data = Path(path).read_bytes()
    if len(data) < HGAF_HEADER_SIZE:
        raise TruncatedFileError(
            f"{path}: {len(data)} bytes is shorter than the {HGAF_HEADER_SIZE}-byte header"
        )
    magic, version, dtype_code, _reserved, rows, dim = _HGAF_HEADER.unpack_from(data)
    if magic != HGAF_MAGIC:
        raise BadMagicError(f"{path}: magic {magic!r} != {HGAF_MAGIC!r}")
    if version != HGAF_VERSION:
        raise BadVersionError(f"{path}: version {version} != {HGAF_VERSION}")
    if dtype_code != HGAF_DTYPE_F32:
        raise UnsupportedDtypeError(f"{path}: unknown dtype code {dtype_code}")
    expected = HGAF_HEADER_SIZE + 4 * rows * dim
    if len(data) != expected:
        kind = "truncated" if len(data) < expected else "has trailing bytes"
        raise TruncatedFileError(
            f"{path}: {kind} ({len(data)} bytes, expected {expected})"
        )
    payload = np.frombuffer(data, dtype="<f4", offset=HGAF_HEADER_SIZE)
    return np.array(payload, dtype=np.float32).reshape(rows, dim)


# --- task manifest ---------------------------------------------------------

#: keys accepted under "hyperparameters"; "alpha_np" is the train-time value.
OVERRIDE_KEYS = frozenset({
    "alpha_pp", "alpha_vp", "alpha_np", "alpha_np_test",
    "beta_pn", "beta_vn", "gamma", "lambda",
    "lr", "epochs", "batch_size",
})


@dataclass
class TaskManifest:
    """Parsed manifest: class list, embedding file paths (relative to the
    manifest), per-row labels, shots, tau, and hyperparameter overrides."""

    class_names: list[str]
    shots: int
    tau: float
    positive_prompt_file: str
    positive_prompt_counts: list[int]
    negative_prompt_file: Optional[str]
    negative_prompt_counts: Optional[list[int]]
    cache_file: str
    cache_labels: list[int]
    test_file: Optional[str]
    test_labels: Optional[list[int]]
    hyperparameters: dict
    base_dir: Path

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def resolve(self, rel: str) -> Path:
        return (self.base_dir / rel).resolve()


@dataclass
class LoadedTask:
    graph: HeteroGraph
    test_queries: Optional[np.ndarray]
    test_labels: Optional[np.ndarray]
    tau: float
    overrides: dict
    manifest: TaskManifest


def _field(doc: dict, name: str, kind, required: bool = True, default=None):
    if name not in doc:
        if required:
            raise ManifestError(f"{name}: missing required field")
        return default
    value = doc[name]
    if kind is float and isinstance(value, int):
        value = float(value)
    if not isinstance(value, kind):
        raise ManifestError(f"{name}: expected {kind.__name__}, got {type(value).__name__}")
    return value


def _int_list(doc: dict, name: str, required: bool = True) -> Optional[list[int]]:
    value = _field(doc, name, list, required=required)
    if value is None:
        return None
    if not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        raise ManifestError(f"{name}: all entries must be integers")
    return value


def load_manifest(path) -> TaskManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ManifestError(f"manifest: no such file {path}")
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest: invalid JSON ({e})")
    if not isinstance(doc, dict):
        raise ManifestError("manifest: top level must be an object")

    class_names = _field(doc, "class_names", list)
    if len(class_names) < 2:
        raise ManifestError("class_names: need at least 2 classes")
    if not all(isinstance(n, str) for n in class_names):
        raise ManifestError("class_names: all entries must be strings")
    if len(set(class_names)) != len(class_names):
        raise ManifestError("class_names: names must be unique")
    c = len(class_names)

    shots = _field(doc, "shots", int)
    if shots < 1:
        raise ManifestError("shots: must be >= 1")
    tau = _field(doc, "tau", float, required=False, default=0.01)
    if tau <= 0:
        raise ManifestError("tau: must be positive")

    pos_counts = _int_list(doc, "positive_prompt_counts")
    if len(pos_counts) != c or any(v < 1 for v in pos_counts):
        raise ManifestError(
            f"positive_prompt_counts: need {c} positive counts, all >= 1"
        )
    neg_file = _field(doc, "negative_prompt_file", str, required=False)
    neg_counts = _int_list(doc, "negative_prompt_counts", required=False)
    if neg_counts is not None:
        if len(neg_counts) != c or any(v < 1 for v in neg_counts):
            raise ManifestError(
                f"negative_prompt_counts: need {c} counts, all >= 1"
            )
    elif neg_file is not None:
        neg_counts = [1] * c

    cache_labels = _int_list(doc, "cache_labels")
    test_file = _field(doc, "test_file", str, required=False)
    test_labels = _int_list(doc, "test_labels", required=test_file is not None)

    hyper = _field(doc, "hyperparameters", dict, required=False, default={})
    unknown = set(hyper) - OVERRIDE_KEYS
    if unknown:
        raise ManifestError(f"hyperparameters: unknown keys {sorted(unknown)}")
    for k, v in hyper.items():
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            raise ManifestError(f"hyperparameters: {k} must be numeric")

    return TaskManifest(
        class_names=list(class_names),
        shots=shots,
        tau=tau,
        positive_prompt_file=_field(doc, "positive_prompt_file", str),
        positive_prompt_counts=pos_counts,
        negative_prompt_file=neg_file,
        negative_prompt_counts=neg_counts,
        cache_file=_field(doc, "cache_file", str),
        cache_labels=cache_labels,
        test_file=test_file,
        test_labels=test_labels,
        hyperparameters=dict(hyper),
        base_dir=path.parent,
    )


def _read_normalized(manifest: TaskManifest, field_name: str, rel_path: str) -> np.ndarray:
    full = manifest.resolve(rel_path)
    if not full.is_file():
        raise ManifestError(f"{field_name}: no such file {full}")
    m = read_hgaf(full)
    check_finite(m, field_name)
    return row_l2_normalize(m)


def _split_prompt_rows(m: np.ndarray, counts: list[int], field_name: str):
    if m.shape[0] != sum(counts):
        raise ManifestError(
            f"{field_name}: file has {m.shape[0]} rows, counts sum to {sum(counts)}"
        )
    blocks, at = [], 0
    for n in counts:
        blocks.append(m[at:at + n])
        at += n
    return blocks


def load_task(manifest_path, variant: str = "full") -> LoadedTask:
    """Read every referenced embedding file, normalize rows, build the graph,
    and validate all counts. Negative prompts are only required for variants
    whose configuration actually uses them."""
    from .train import variant_needs_negatives  # trainer owns variant semantics

    manifest = load_manifest(manifest_path)
    c, k = manifest.num_classes, manifest.shots

    pos = _read_normalized(manifest, "positive_prompt_file", manifest.positive_prompt_file)
    pos_blocks = _split_prompt_rows(pos, manifest.positive_prompt_counts,
                                    "positive_prompt_counts")

    neg_blocks = None
    wants_negatives = variant_needs_negatives(variant)
    if manifest.negative_prompt_file is not None:
        neg_exists = manifest.resolve(manifest.negative_prompt_file).is_file()
        if neg_exists or wants_negatives:
            neg = _read_normalized(manifest, "negative_prompt_file",
                                   manifest.negative_prompt_file)
            neg_blocks = _split_prompt_rows(neg, manifest.negative_prompt_counts,
                                            "negative_prompt_counts")
    elif wants_negatives:
        raise ManifestError(
            f"negative_prompt_file: required for variant {variant!r}"
        )

    cache = _read_normalized(manifest, "cache_file", manifest.cache_file)
    labels = np.asarray(manifest.cache_labels, dtype=np.int64)
    if cache.shape[0] != labels.shape[0]:
        raise ManifestError(
            f"cache_labels: {labels.shape[0]} labels for {cache.shape[0]} cache rows"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ManifestError(f"cache_labels: labels must be in [0, {c})")
    counts = np.bincount(labels, minlength=c)
    if np.any(counts != k):
        raise ManifestError(
            f"cache_labels: every class must appear exactly shots={k} times, "
            f"got {counts.tolist()}"
        )

    test_queries = test_labels = None
    if manifest.test_file is not None:
        test_queries = _read_normalized(manifest, "test_file", manifest.test_file)
        test_labels = np.asarray(manifest.test_labels, dtype=np.int64)
        if test_queries.shape[0] != test_labels.shape[0]:
            raise ManifestError(
                f"test_labels: {test_labels.shape[0]} labels for "
                f"{test_queries.shape[0]} test rows"
            )
        if test_labels.size and (test_labels.min() < 0 or test_labels.max() >= c):
            raise ManifestError(f"test_labels: labels must be in [0, {c})")

    graph = assemble_graph(pos_blocks, neg_blocks, cache, labels)
    return LoadedTask(
        graph=graph,
        test_queries=test_queries,
        test_labels=test_labels,
        tau=manifest.tau,
        overrides=manifest.hyperparameters,
        manifest=manifest,
    )


def write_manifest(doc: dict, path) -> None:
    _write_bytes(path, json.dumps(doc, indent=2, sort_keys=True).encode() + b"\n")


# --- checkpoint container ---------------------------------------------------

_DTYPE_TAGS = {"<f4": np.float32, "<f8": np.float64, "<i8": np.int64}


def _pack_bundle(arrays: dict[str, np.ndarray], meta: dict) -> bytes:
    index = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        a = arrays[name]
        tag = {np.float32: "<f4", np.float64: "<f8", np.int64: "<i8"}[a.dtype.type]
        raw = np.ascontiguousarray(a, dtype=tag).tobytes()
        index.append({
            "name": name, "dtype": tag, "shape": list(a.shape),
            "offset": offset, "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    head = json.dumps({"meta": meta, "arrays": index},
                      sort_keys=True, separators=(",", ":")).encode()
    return struct.pack("<I", len(head)) + head + b"".join(blobs)


def _unpack_bundle(payload: bytes) -> tuple[dict[str, np.ndarray], dict]:
    (head_len,) = struct.unpack_from("<I", payload)
    head = json.loads(payload[4:4 + head_len].decode())
    base = 4 + head_len
    arrays = {}
    for entry in head["arrays"]:
        raw = payload[base + entry["offset"]: base + entry["offset"] + entry["nbytes"]]
        a = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"])
        arrays[entry["name"]] = np.array(a, dtype=_DTYPE_TAGS[entry["dtype"]])
    return arrays, head["meta"]


def save_checkpoint(path, ckpt) -> None:
    """Lossless dump of weights, optimizer moments, step counter, config echo,
    epoch and metric history, protected by a 32-bit payload checksum."""
    arrays = {f"weights/{k}": v for k, v in ckpt.weights.as_dict().items()}
    for k, v in ckpt.opt.m.items():
        arrays[f"opt/m/{k}"] = v
    for k, v in ckpt.opt.v.items():
        arrays[f"opt/v/{k}"] = v
    for k, vals in ckpt.history.items():
        arrays[f"hist/{k}"] = np.asarray(vals, dtype=np.float64)
    meta = {
        "config": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "opt": {
            "step": ckpt.opt.step,
            "lr_base": ckpt.opt.lr_base,
            "betas": list(ckpt.opt.betas),
            "eps": ckpt.opt.eps,
            "weight_decay": ckpt.opt.weight_decay,
        },
        "history_keys": sorted(ckpt.history),
    }
    payload = _pack_bundle(arrays, meta)
    header = _CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, zlib.crc32(payload) & 0xFFFFFFFF)
    _write_bytes(path, header + payload)


def load_checkpoint(path):
    """Inverse of save_checkpoint; returns a trainer Checkpoint."""
    from .adapter import AdapterWeights
    from .optim import OptimState
    from .train import Checkpoint, TrainConfig

    data = Path(path).read_bytes()
    if len(data) < _CKPT_HEADER.size:
        raise VersionMismatchError(f"{path}: too short to be a checkpoint")
    magic, version, crc = _CKPT_HEADER.unpack_from(data)
    if magic != CKPT_MAGIC or version != CKPT_VERSION:
        raise VersionMismatchError(
            f"{path}: magic/version {magic!r}/{version} != {CKPT_MAGIC!r}/{CKPT_VERSION}"
        )
    payload = data[_CKPT_HEADER.size:]
    if (zlib.crc32(payload) & 0xFFFFFFFF) != crc:
        raise CorruptChecksumError(f"{path}: payload checksum mismatch")
    arrays, meta = _unpack_bundle(payload)

    weights = AdapterWeights(
        wn=arrays["weights/wn"], wp=arrays["weights/wp"], wv=arrays["weights/wv"]
    )
    opt = OptimState(
        m={k: arrays[f"opt/m/{k}"] for k in ("wn", "wp", "wv")},
        v={k: arrays[f"opt/v/{k}"] for k in ("wn", "wp", "wv")},
        step=int(meta["opt"]["step"]),
        lr_base=float(meta["opt"]["lr_base"]),
        betas=tuple(meta["opt"]["betas"]),
        eps=float(meta["opt"]["eps"]),
        weight_decay=float(meta["opt"]["weight_decay"]),
    )
    history = {k: arrays[f"hist/{k}"].tolist() for k in meta["history_keys"]}
    return Checkpoint(
        weights=weights,
        opt=opt,
        config=TrainConfig.from_dict(meta["config"]),
        epoch=int(meta["epoch"]),
        history=history,
    )
