"""``.lcam`` checkpoints and JSON Lines metrics logs.

Checkpoint layout::

    b"LCAM1\\n"                  6 magic bytes
    uint32 little-endian         header length in bytes
    UTF-8 JSON header            format_version, model, parameters, seed, meta
    payload                      float32 little-endian tensors in manifest order

Each manifest entry is {"name", "shape", "offset", "nbytes", "trainable"}
with offsets relative to the start of the payload.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .errors import FormatError, VersionError

MAGIC = b"LCAM1\n"
FORMAT_VERSION = 1


def atomic_write_bytes(path: str, data: bytes):
    """Write via a temp file in the target directory, then rename over ``path``."""
    directory = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    except OSError as e:
        raise OSError(e.errno, f"cannot write {path}: {e.strerror}") from e
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as e:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise OSError(e.errno, f"cannot write {path}: {e.strerror}") from e


def checkpoint_bytes(spec, params, meta: dict | None = None, seed: int | None = None) -> bytes:
    manifest, chunks, offset = [], [], 0
    for name, t in params.items():
        buf = np.ascontiguousarray(t, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset,
                         "nbytes": len(buf), "trainable": bool(params.trainable[name])})
        chunks.append(buf)
        offset += len(buf)
    header = {"format_version": FORMAT_VERSION, "model": spec.to_dict(), "parameters": manifest,
              "seed": seed, "meta": meta or {}}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(hbytes)) + hbytes + b"".join(chunks)


def save_checkpoint(spec, params, meta: dict | None, path: str, seed: int | None = None):
    atomic_write_bytes(path, checkpoint_bytes(spec, params, meta, seed))


def parse_checkpoint(blob: bytes):
    from .model import ModelSpec, Parameters

    if blob[:6] != MAGIC:
        raise FormatError("bad magic: not an .lcam checkpoint")
    if len(blob) < 10:
        raise FormatError("truncated checkpoint header")
    (hlen,) = struct.unpack("<I", blob[6:10])
    if len(blob) < 10 + hlen:
        raise FormatError("truncated checkpoint header")
    try:
        header = json.loads(blob[10:10 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"corrupt checkpoint header: {e}") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"unsupported checkpoint version {header.get('format_version')!r}")
    payload = memoryview(blob)[10 + hlen:]
    try:
        spec = ModelSpec.from_dict(header["model"])
        tensors, trainable, expected = {}, {}, 0
        for entry in header["parameters"]:
            shape = tuple(entry["shape"])
            nbytes = 4 * int(np.prod(shape))
            if entry["nbytes"] != nbytes or entry["offset"] != expected:
                raise FormatError(f"{entry['name']}: manifest shape/offset inconsistent")
            if entry["offset"] + nbytes > len(payload):
                raise FormatError(f"truncated payload at {entry['name']}")
            raw = payload[entry["offset"]:entry["offset"] + nbytes]
            tensors[entry["name"]] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
            trainable[entry["name"]] = bool(entry.get("trainable", True))
            expected += nbytes
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, FormatError):
            raise
        raise FormatError(f"corrupt checkpoint header: {e}") from e
    if expected != len(payload):
        raise FormatError(f"payload has {len(payload)} bytes, manifest describes {expected}")
    if len(tensors) != len(header["parameters"]):
        raise FormatError("duplicate parameter names in manifest")
    params = Parameters(tensors, trainable)
    params.check(spec)
    meta = dict(header.get("meta") or {})
    meta.setdefault("seed", header.get("seed"))
    return spec, params, meta


def load_checkpoint(path: str):
    """Returns ``(spec, params, meta)``; raises FormatError/VersionError on bad files."""
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


def metrics_record(record) -> dict:
    from .optim import EpochRecord, StepRecord

    if isinstance(record, StepRecord):
        return {"kind": "step", "step": record.step, "phase": record.phase, "lr": record.lr,
                "momentum": record.momentum, "loss": record.train_loss}
    if isinstance(record, EpochRecord):
        return {"kind": "epoch", "epoch": record.epoch, "val_loss": record.val_loss, "val_acc": record.val_acc}
    raise TypeError(f"not a training record: {record!r}")


def append_metrics(record, path: str):
    line = json.dumps(metrics_record(record), separators=(",", ":")) + "\n"
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(line)


def read_metrics(path: str):
    """Replay a metrics log into a TrainReport."""
    from .optim import EpochRecord, StepRecord, TrainReport

    report = TrainReport()
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            d = json.loads(line)
            if d["kind"] == "step":
                report.steps.append(StepRecord(d["step"], d["phase"], d["lr"], d["momentum"], d["loss"]))
            elif d["kind"] == "epoch":
                report.epochs.append(EpochRecord(d["epoch"], d["val_loss"], d["val_acc"]))
            else:
                raise FormatError(f"{path}:{n}: unknown record kind {d['kind']!r}")
    return report
