"""Checkpoint files: one ``.npz`` archive per checkpoint.

Layout (stable):

* ``__meta__`` -- uint8 array holding UTF-8 JSON with ``format`` (always
  ``"diffsid-checkpoint"``), ``version`` (currently 1), ``kind`` and any
  configuration / scalar state of the writer.
* every other key -- a float64 or int64 array, named ``<group>/<name>``
  (for example ``tokenizer/codebook.0`` or ``index/codes``).

The archive is written uncompressed with keys in sorted order, so identical
state gives identical bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np

FORMAT = "diffsid-checkpoint"
VERSION = 1


def save(path, meta: dict, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": FORMAT, "version": VERSION, **meta}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    entries = {"__meta__": np.frombuffer(blob, dtype=np.uint8)}
    entries.update(arrays)
    # fixed timestamps keep the archive byte-identical across reruns
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for key in sorted(entries):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(entries[key]), allow_pickle=False)
            info = zipfile.ZipInfo(key + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())
    return path


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as npz:
        arrays = {k: npz[k] for k in npz.files}
    if "__meta__" not in arrays:
        raise ValueError(f"{path}: not a {FORMAT} archive (missing __meta__)")
    meta = json.loads(arrays.pop("__meta__").tobytes().decode("utf-8"))
    if meta.get("format") != FORMAT:
        raise ValueError(f"{path}: unexpected format {meta.get('format')!r}")
    return meta, arrays


def digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def subgroup(arrays: dict[str, np.ndarray], group: str) -> dict[str, np.ndarray]:
    prefix = group + "/"
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}


def prefixed(group: str, arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{group}/{k}": v for k, v in arrays.items()}
