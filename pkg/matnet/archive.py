"""Binary container files for tensors

A single tensor record is::

    b"MTN1" | u32 rank | rank x u32 dims | f32 payload (row-major)

with all integers and floats little-endian. A named archive stores::

    u32 count | count x (u16 name length | utf-8 name | tensor record)

Archives can carry a text manifest. It is stored as an ordinary entry named
MANIFEST_KEY whose payload are the UTF-8 bytes of the text as floats.
"""

import io
import os
from typing import BinaryIO, Dict, Optional, Tuple

import numpy as np

MAGIC = b"MTN1"
MANIFEST_KEY = "#manifest"


class DataError(ValueError):
    """Malformed input files, out-of-range data or impossible data requests"""


def _read_exact(stream: BinaryIO, n: int, what: str) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise DataError(f"Unexpected end of file while reading {what}")
    return buf


def write_record(stream: BinaryIO, array: np.ndarray) -> None:
    """Write one tensor record to an open binary stream"""
    array = np.asarray(array)
    stream.write(MAGIC)
    stream.write(np.array([array.ndim, *array.shape], dtype="<u4").tobytes())
    stream.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def read_record(stream: BinaryIO) -> np.ndarray:
    """Read one tensor record from an open binary stream

    :raises DataError: on wrong magic bytes or truncated data
    """
    magic = _read_exact(stream, 4, "magic bytes")
    if magic != MAGIC:
        raise DataError(f"Not a tensor record: magic bytes {magic!r}")
    rank = int(np.frombuffer(_read_exact(stream, 4, "rank"), dtype="<u4")[0])
    if rank > 4:
        raise DataError(f"Tensor rank {rank} exceeds the maximum of 4")
    dims = tuple(int(d) for d in np.frombuffer(_read_exact(stream, 4 * rank, "dims"), dtype="<u4"))
    count = int(np.prod(dims, dtype=np.int64))
    payload = _read_exact(stream, 4 * count, "tensor payload")
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)


def save_tensor(path: str, array: np.ndarray) -> None:
    """Write a single tensor container file"""
    with open(path, "wb") as f:
        write_record(f, array)


def load_tensor(path: str) -> np.ndarray:
    """Read a single tensor container file"""
    with open(path, "rb") as f:
        return read_record(f)


def save_archive(path: str, tensors: Dict[str, np.ndarray], manifest: Optional[str] = None) -> None:
    """Write a named tensor archive

    The file is written to a temporary name first and then moved, so an
    interrupted write never leaves a truncated archive behind.

    :param tensors: name -> array, written in the given order
    :param manifest: optional text stored under MANIFEST_KEY
    """
    entries = dict(tensors)
    if manifest is not None:
        entries[MANIFEST_KEY] = np.frombuffer(manifest.encode("utf-8"), dtype=np.uint8).astype(np.float32)
    buf = io.BytesIO()
    buf.write(np.array([len(entries)], dtype="<u4").tobytes())
    for name, array in entries.items():
        encoded = name.encode("utf-8")
        buf.write(np.array([len(encoded)], dtype="<u2").tobytes())
        buf.write(encoded)
        write_record(buf, array)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(buf.getvalue())
    os.replace(tmp, path)


def load_archive(path: str) -> Tuple[Dict[str, np.ndarray], Optional[str]]:
    """Read a named tensor archive

    :return (tensors, manifest): the entries in file order and the manifest text
    :raises DataError: on malformed content
    """
    with open(path, "rb") as f:
        count = int(np.frombuffer(_read_exact(f, 4, "entry count"), dtype="<u4")[0])
        tensors: Dict[str, np.ndarray] = {}
        for _ in range(count):
            length = int(np.frombuffer(_read_exact(f, 2, "name length"), dtype="<u2")[0])
            try:
                name = _read_exact(f, length, "entry name").decode("utf-8")
            except UnicodeDecodeError as e:
                raise DataError("Entry name is not valid UTF-8") from e
            tensors[name] = read_record(f)
        if f.read(1):
            raise DataError(f"Trailing bytes after {count} archive entries")
    manifest = None
    if MANIFEST_KEY in tensors:
        manifest = tensors.pop(MANIFEST_KEY).astype(np.uint8).tobytes().decode("utf-8")
    return tensors, manifest
