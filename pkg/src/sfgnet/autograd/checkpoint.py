"""Parameter checkpoints: a stored zip of raw float64 buffers plus a JSON manifest.

Layout::

    manifest.json   {"format": "sfgnet-params", "version": 1,
                     "entries": [{"name", "shape", "dtype": "<f8", "file"}, ...]}
    tensors/0000.bin, tensors/0001.bin, ...   little-endian float64, C order

Entries keep insertion order and every zip member carries a fixed timestamp,
so identical parameters always produce identical bytes.
"""

from __future__ import annotations

import json
import zipfile
from pathlib import Path
from typing import Mapping, Union

import numpy as np

from .tensor import Tensor

FORMAT = "sfgnet-params"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


def _member(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_params(path: Union[str, Path], params: Mapping[str, Union[Tensor, np.ndarray]]) -> None:
    entries = []
    blobs = []
    for i, (name, value) in enumerate(params.items()):
        arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        buf = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        fname = f"tensors/{i:04d}.bin"
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f8", "file": fname})
        blobs.append((fname, buf))
    manifest = {"format": FORMAT, "version": VERSION, "entries": entries}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w") as zf:
        _member(zf, "manifest.json", json.dumps(manifest, indent=1, sort_keys=True).encode())
        for fname, buf in blobs:
            _member(zf, fname, buf)


def load_params(path: Union[str, Path]) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
                raise CheckpointError(f"{path}: unsupported checkpoint format {manifest.get('format')!r} "
                                      f"v{manifest.get('version')}")
            out: dict[str, np.ndarray] = {}
            for e in manifest["entries"]:
                raw = zf.read(e["file"])
                shape = tuple(e["shape"])
                expected = int(np.prod(shape)) * 8
                if len(raw) != expected:
                    raise CheckpointError(f"{path}: entry {e['name']!r} has {len(raw)} bytes, expected {expected}")
                out[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
            return out
    except (zipfile.BadZipFile, KeyError) as exc:
        raise CheckpointError(f"{path}: not a valid checkpoint ({exc})") from exc
