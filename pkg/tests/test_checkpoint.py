"""Archive format: named arrays plus a JSON header in one npz file."""

import numpy as np
import pytest

from maskduo.checkpoint import FORMAT_VERSION, load_archive, save_archive


def test_round_trip_bitwise(tmp_path, rng):
    arrays = {
        "a/weight": rng.normal(size=(4, 3)).astype(np.float32),
        "a/bias": rng.normal(size=(3,)).astype(np.float64),
        "count": np.asarray(7, dtype=np.int64),  # 0-dim must survive
    }
    path = save_archive(tmp_path / "x.npz", arrays, kind="demo", extra={"note": "hi"})
    back, meta = load_archive(path)
    assert set(back) == set(arrays)
    for name in arrays:
        assert back[name].dtype == arrays[name].dtype
        assert back[name].shape == arrays[name].shape
        assert (back[name] == arrays[name]).all()
    assert meta["format_version"] == FORMAT_VERSION
    assert meta["kind"] == "demo"
    assert meta["note"] == "hi"


def test_save_load_save_identical_bytes(tmp_path, rng):
    arrays = {"w": rng.normal(size=(5, 5)).astype(np.float32)}
    p1 = save_archive(tmp_path / "one.npz", arrays, kind="demo")
    back, meta = load_archive(p1)
    extra = {k: v for k, v in meta.items() if k not in ("format_version", "kind", "entries")}
    p2 = save_archive(tmp_path / "two.npz", back, kind=meta["kind"], extra=extra)
    assert p1.read_bytes() == p2.read_bytes()


def test_reserved_name_rejected(tmp_path):
    with pytest.raises(ValueError, match="reserved"):
        save_archive(tmp_path / "x.npz", {"__meta__": np.zeros(1)}, kind="demo")


def test_missing_header_rejected(tmp_path):
    np.savez(tmp_path / "plain.npz", w=np.zeros(3))
    with pytest.raises(ValueError, match="__meta__"):
        load_archive(tmp_path / "plain.npz")


def test_header_mismatch_rejected(tmp_path, rng, monkeypatch):
    # write a valid archive, then corrupt one payload array on disk
    import json

    arrays = {"w": rng.normal(size=(3,)).astype(np.float32)}
    path = save_archive(tmp_path / "x.npz", arrays, kind="demo")
    with np.load(path) as npz:
        meta = json.loads(bytes(npz["__meta__"]).decode())
        payload = {k: npz[k] for k in npz.files}
    payload["w"] = payload["w"].astype(np.float64)  # dtype no longer matches header
    np.savez(path, **payload)
    with pytest.raises(ValueError, match="header says"):
        load_archive(path)


def test_missing_file_raises_oserror(tmp_path):
    with pytest.raises(OSError):
        load_archive(tmp_path / "absent.npz")
