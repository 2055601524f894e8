"""Shared persistence helpers.

All binary artifacts follow one convention: a `<name>.manifest.json` file
describing the payload plus a `<name>.bin` file holding the raw arrays as
little-endian float32, row-major, in the order listed in the manifest.
Every manifest embeds a config digest, seed and tool version so the
provenance chain is reconstructible from any artifact.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile

import numpy as np

TOOL_VERSION = "sidctr-0.1.0"
FORMAT_VERSION = 1


def config_digest(config: dict) -> str:
    """Content hash of a config dict (key-order independent)."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write via temp file + rename so partial files never appear."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def atomic_write_json(path: str, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def save_arrays(basepath: str, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Save named arrays as <basepath>.manifest.json + <basepath>.bin."""
    entries = []
    blob = bytearray()
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape), "offset": len(blob)})
        blob += a.tobytes()
    manifest = {
        "format_version": FORMAT_VERSION,
        "tool_version": TOOL_VERSION,
        "dtype": "<f4",
        "arrays": entries,
        "meta": meta,
    }
    atomic_write_bytes(basepath + ".bin", bytes(blob))
    atomic_write_json(basepath + ".manifest.json", manifest)


class ArtifactError(Exception):
    """Missing or version-mismatched artifact."""


def load_arrays(basepath: str) -> tuple[dict[str, np.ndarray], dict]:
    """Inverse of save_arrays; returns (arrays as float64, manifest meta)."""
    mpath = basepath + ".manifest.json"
    bpath = basepath + ".bin"
    if not (os.path.exists(mpath) and os.path.exists(bpath)):
        raise ArtifactError(f"missing artifact: {basepath}(.manifest.json/.bin)")
    with open(mpath) as f:
        manifest = json.load(f)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ArtifactError(
            f"artifact format version {manifest.get('format_version')} != {FORMAT_VERSION}: {basepath}"
        )
    with open(bpath, "rb") as f:
        blob = f.read()
    arrays = {}
    for e in manifest["arrays"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        a = np.frombuffer(blob, dtype="<f4", count=n, offset=e["offset"])
        arrays[e["name"]] = a.reshape(e["shape"]).astype(np.float64)
    return arrays, manifest["meta"]
