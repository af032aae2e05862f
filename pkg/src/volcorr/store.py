"""Named-array persistence: a JSON manifest addressing one little-endian blob.

Layout of a store directory::

    manifest.json   {"format": "volcorr-arrays", "version": 1,
                     "arrays": [{"name", "dtype", "shape", "offset", "nbytes"}, ...],
                     "meta": {...}}
    arrays.bin      concatenated raw array bytes, in manifest order

Floats are stored as ``<f8`` and integers as ``<i8``.
"""
from __future__ import annotations

import json
import os

import numpy as np

FORMAT = "volcorr-arrays"
VERSION = 1
MANIFEST = "manifest.json"
BLOB = "arrays.bin"


class StoreError(IOError):
    pass


def _dtype_for(a: np.ndarray) -> str:
    if a.dtype.kind in "biu":
        return "<i8"
    if a.dtype.kind == "f":
        return "<f8"
    raise StoreError(f"unsupported dtype {a.dtype}")


def write_store(path, arrays: dict, meta: dict | None = None) -> dict:
    os.makedirs(path, exist_ok=True)
    entries = []
    offset = 0
    with open(os.path.join(path, BLOB), "wb") as fh:
        for name, value in arrays.items():
            a = np.asarray(value)
            dt = _dtype_for(a)
            raw = np.ascontiguousarray(a, dtype=dt).tobytes()
            fh.write(raw)
            entries.append({"name": name, "dtype": dt, "shape": list(a.shape),
                            "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    manifest = {"format": FORMAT, "version": VERSION, "arrays": entries, "meta": meta or {}}
    with open(os.path.join(path, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def read_manifest(path) -> dict:
    try:
        with open(os.path.join(path, MANIFEST)) as fh:
            manifest = json.load(fh)
    except FileNotFoundError as exc:
        raise StoreError(f"no manifest in {path}") from exc
    except json.JSONDecodeError as exc:
        raise StoreError(f"corrupt manifest in {path}: {exc}") from exc
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise StoreError(f"{path}: unsupported store format/version")
    return manifest


def read_store(path) -> tuple[dict, dict]:
    manifest = read_manifest(path)
    try:
        with open(os.path.join(path, BLOB), "rb") as fh:
            blob = fh.read()
    except FileNotFoundError as exc:
        raise StoreError(f"no array blob in {path}") from exc
    arrays = {}
    end = 0
    for e in sorted(manifest["arrays"], key=lambda e: e["offset"]):
        if e["offset"] < end:
            raise StoreError(f"{path}: overlapping array {e['name']!r}")
        itemsize = np.dtype(e["dtype"]).itemsize
        count = int(np.prod(e["shape"], dtype=np.int64))
        if count * itemsize != e["nbytes"]:
            raise StoreError(f"{path}: shape of {e['name']!r} does not match its byte length")
        end = e["offset"] + e["nbytes"]
        if end > len(blob):
            raise StoreError(f"{path}: array {e['name']!r} runs past end of blob")
        a = np.frombuffer(blob, dtype=e["dtype"], count=count, offset=e["offset"])
        arrays[e["name"]] = a.reshape(e["shape"]).astype(e["dtype"][1:]).copy()
    return arrays, manifest.get("meta", {})
