"""Checkpoint container.

A checkpoint is a zip archive (stored, uncompressed, fixed timestamps so the
bytes depend only on the contents) holding:

``index.json``
    ``{"format": "usjepa-checkpoint", "version": 1, "entries": [...]}`` where
    each entry is ``{"name", "shape", "dtype", "file"}`` and ``dtype`` is
    ``"float32"`` or ``"float64"`` (or an integer type for bookkeeping arrays).
``tensors/<name>.bin``
    the raw values of one entry, C order, little-endian.
``meta.json``
    free-form metadata; the trainer writes ``config_hash``, ``epoch`` and
    ``val_loss``.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np

FORMAT = "usjepa-checkpoint"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _write_member(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name])
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            fname = f"tensors/{name}.bin"
            entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name, "file": fname})
            _write_member(zf, fname, le.tobytes())
        index = {"format": FORMAT, "version": VERSION, "entries": entries}
        _write_member(zf, "index.json", json.dumps(index, indent=1, sort_keys=True).encode())
        _write_member(zf, "meta.json", json.dumps(meta or {}, indent=1, sort_keys=True).encode())
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with zipfile.ZipFile(path) as zf:
        index = json.loads(zf.read("index.json"))
        if index.get("format") != FORMAT:
            raise ValueError(f"{path}: not a {FORMAT} archive")
        meta = json.loads(zf.read("meta.json"))
        arrays = {}
        for e in index["entries"]:
            dt = np.dtype(e["dtype"]).newbyteorder("<")
            raw = np.frombuffer(zf.read(e["file"]), dtype=dt)
            arrays[e["name"]] = raw.astype(np.dtype(e["dtype"])).reshape(e["shape"])
    return arrays, meta


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def arrays_sha256(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(a.shape).encode())
        h.update(a.dtype.name.encode())
        h.update(a.tobytes())
    return h.hexdigest()
