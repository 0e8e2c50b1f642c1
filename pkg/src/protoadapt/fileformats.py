"""Binary artifact formats.

All multi-byte fields are little-endian.

TNS1 tensor block:
    magic "TNS1" | u32 rank | rank x u32 dims | prod(dims) x f32 data

EMB1 embedding export:
    magic "EMB1" | one TNS1 block of shape [n, d+2]
    Columns: d embedding coordinates, true label, predicted label.

MDL1 and GMM1 are framed on top of TNS1 blocks by the model and gmm
modules; see their save/load functions.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FileFormatError

TNS1_MAGIC = b"TNS1"
MDL1_MAGIC = b"MDL1"
GMM1_MAGIC = b"GMM1"
EMB1_MAGIC = b"EMB1"


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FileFormatError(f"truncated file: wanted {n} bytes, got {len(buf)}")
    return buf


def read_u32(f) -> int:
    return struct.unpack("<I", _read_exact(f, 4))[0]


def write_u32(f, value: int) -> None:
    f.write(struct.pack("<I", value))


def read_f32(f) -> float:
    return struct.unpack("<f", _read_exact(f, 4))[0]


def write_f32(f, value: float) -> None:
    f.write(struct.pack("<f", value))


def write_tns1(f, arr: np.ndarray) -> None:
    a = np.ascontiguousarray(arr, dtype=np.float32)
    f.write(TNS1_MAGIC)
    write_u32(f, a.ndim)
    for dim in a.shape:
        write_u32(f, dim)
    f.write(a.astype("<f4").tobytes())


def read_tns1(f) -> np.ndarray:
    magic = _read_exact(f, 4)
    if magic != TNS1_MAGIC:
        raise FileFormatError(f"bad tensor magic {magic!r}")
    rank = read_u32(f)
    shape = tuple(read_u32(f) for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(f, 4 * count), dtype="<f4")
    return data.reshape(shape).astype(np.float32)


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tns1(f, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        out = read_tns1(f)
        if f.read(1):
            raise FileFormatError("trailing bytes after tensor payload")
    return out


def save_embeddings(path, embeddings: np.ndarray, true_labels, pred_labels) -> None:
    """EMB1 export: [n, d+2] block of (embedding, true label, predicted label)."""
    emb = np.asarray(embeddings, dtype=np.float32)
    block = np.concatenate(
        [
            emb,
            np.asarray(true_labels, dtype=np.float32).reshape(-1, 1),
            np.asarray(pred_labels, dtype=np.float32).reshape(-1, 1),
        ],
        axis=1,
    )
    with open(path, "wb") as f:
        f.write(EMB1_MAGIC)
        write_tns1(f, block)


def load_embeddings(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4)
        if magic != EMB1_MAGIC:
            raise FileFormatError(f"bad embedding magic {magic!r}")
        return read_tns1(f)


def write_keyvalue(path, mapping: dict) -> None:
    """Plain key=value text file, one pair per line."""
    with open(path, "w") as f:
        for key, value in mapping.items():
            f.write(f"{key}={value}\n")


def read_keyvalue(path) -> dict:
    out = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FileFormatError(f"malformed key=value line: {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out
