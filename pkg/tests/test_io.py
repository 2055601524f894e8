"""Persistence-layer contracts: atomicity, manifest format, digests."""

import json
import os

import numpy as np
import pytest

from sidctr import io


def test_config_digest_key_order_independent():
    a = io.config_digest({"x": 1, "y": [1, 2]})
    b = io.config_digest({"y": [1, 2], "x": 1})
    assert a == b and len(a) == 16


def test_config_digest_sensitive_to_values():
    assert io.config_digest({"x": 1}) != io.config_digest({"x": 2})


def test_atomic_write_no_temp_residue(tmp_path):
    p = tmp_path / "out.json"
    io.atomic_write_json(str(p), {"a": 1})
    assert json.loads(p.read_text()) == {"a": 1}
    leftovers = [f for f in os.listdir(tmp_path) if f.startswith(".tmp-")]
    assert leftovers == []


def test_atomic_write_overwrites(tmp_path):
    p = str(tmp_path / "x.txt")
    io.atomic_write_text(p, "one")
    io.atomic_write_text(p, "two")
    assert open(p).read() == "two"


def test_atomic_write_creates_directories(tmp_path):
    p = str(tmp_path / "a" / "b" / "c.txt")
    io.atomic_write_text(p, "deep")
    assert open(p).read() == "deep"


def test_save_load_arrays_roundtrip(tmp_path, rng):
    arrays = {"w": rng.normal(size=(3, 4)).astype(np.float32),
              "v": rng.normal(size=(7,)).astype(np.float32)}
    base = str(tmp_path / "ckpt")
    io.save_arrays(base, arrays, {"seed": 3})
    loaded, meta = io.load_arrays(base)
    assert meta["seed"] == 3
    assert set(loaded) == {"w", "v"}
    for k in arrays:
        np.testing.assert_array_equal(loaded[k],
                                      np.asarray(arrays[k], dtype=np.float64))
        assert loaded[k].shape == arrays[k].shape


def test_save_arrays_deterministic_bytes(tmp_path, rng):
    arrays = {"w": rng.normal(size=(5, 5))}
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    io.save_arrays(a, arrays, {"seed": 0})
    io.save_arrays(b, arrays, {"seed": 0})
    assert open(a + ".bin", "rb").read() == open(b + ".bin", "rb").read()
    assert open(a + ".manifest.json").read() == \
        open(b + ".manifest.json").read()


def test_load_missing_artifact(tmp_path):
    with pytest.raises(io.ArtifactError):
        io.load_arrays(str(tmp_path / "nope"))


def test_load_version_mismatch(tmp_path):
    base = str(tmp_path / "ckpt")
    io.save_arrays(base, {"w": np.ones(2)}, {})
    m = json.load(open(base + ".manifest.json"))
    m["format_version"] = 999
    with open(base + ".manifest.json", "w") as f:
        json.dump(m, f)
    with pytest.raises(io.ArtifactError):
        io.load_arrays(base)


def test_manifest_embeds_tool_version(tmp_path):
    base = str(tmp_path / "ckpt")
    io.save_arrays(base, {"w": np.ones(2)}, {"config_digest": "abc"})
    m = json.load(open(base + ".manifest.json"))
    assert m["tool_version"] == io.TOOL_VERSION
    assert m["meta"]["config_digest"] == "abc"
