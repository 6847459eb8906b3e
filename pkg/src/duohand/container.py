"""Versioned binary container used for datasets and checkpoints.

Layout::

    magic (8 bytes) | version (3 bytes: major, minor, patch)
    | body length (8 bytes, little endian) | body | sha256(body) (32 bytes)

The body is a length-prefixed YAML header followed by raw little-endian array
payloads. The header lists every array with its dtype, shape and offset, so
floating point arrays round-trip bit-exactly without passing through YAML.
"""

import hashlib
import struct
from pathlib import Path
from typing import Any, Dict, Tuple

import numpy as np
import yaml

from .errors import ChecksumError, ContainerIOError, FormatError, VersionMismatchError

FORMAT_VERSION = (1, 0, 0)

DATASET_MAGIC = b"DHDSET\x00\x01"
CHECKPOINT_MAGIC = b"DHCKPT\x00\x01"

_PREFIX = struct.Struct("<8s3BQ")
_DIGEST_SIZE = 32
_DTYPES = {"f8": "<f8", "i8": "<i8"}


def _encode_array(arr: np.ndarray) -> Tuple[str, bytes]:
    if np.issubdtype(arr.dtype, np.floating):
        code = "f8"
    elif np.issubdtype(arr.dtype, np.integer):
        code = "i8"
    else:
        raise TypeError(f"unsupported array dtype {arr.dtype}")
    return code, np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def encode_container(magic: bytes, header: Dict[str, Any], arrays: Dict[str, np.ndarray]) -> bytes:
    """Serialize a header and named arrays into container bytes."""
    index = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        code, raw = _encode_array(arr)
        index.append(
            {
                "name": name,
                "dtype": code,
                "shape": [int(n) for n in arr.shape],
                "offset": len(payload),
                "nbytes": len(raw),
            }
        )
        payload.extend(raw)

    full_header = dict(header)
    full_header["arrays"] = index
    header_bytes = yaml.safe_dump(full_header, sort_keys=True).encode("utf-8")
    body = struct.pack("<Q", len(header_bytes)) + header_bytes + bytes(payload)
    prefix = _PREFIX.pack(magic, *FORMAT_VERSION, len(body))
    return prefix + body + hashlib.sha256(body).digest()


def decode_container(data: bytes, magic: bytes) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """Parse container bytes, verifying magic, version and checksum.

    Raises:
        ChecksumError: if the data is truncated or the digest does not match.
        FormatError: if the magic bytes name a different kind of file.
        VersionMismatchError: if the major format version differs.
    """
    if len(data) < _PREFIX.size:
        raise ChecksumError("container is truncated before its header")
    found_magic, major, minor, patch, body_len = _PREFIX.unpack_from(data, 0)
    if found_magic != magic:
        raise FormatError(f"unexpected magic bytes {found_magic!r}, expected {magic!r}")
    if major != FORMAT_VERSION[0]:
        raise VersionMismatchError(
            f"container version {major}.{minor}.{patch} is not readable by "
            f"format {'.'.join(map(str, FORMAT_VERSION))}"
        )
    expected = _PREFIX.size + body_len + _DIGEST_SIZE
    if len(data) != expected:
        raise ChecksumError(f"container holds {len(data)} bytes, expected {expected}")
    body = data[_PREFIX.size : _PREFIX.size + body_len]
    if hashlib.sha256(body).digest() != data[_PREFIX.size + body_len :]:
        raise ChecksumError("container checksum does not match its contents")

    (header_len,) = struct.unpack_from("<Q", body, 0)
    header = yaml.safe_load(body[8 : 8 + header_len].decode("utf-8"))
    payload = body[8 + header_len :]
    arrays = {}
    for entry in header.pop("arrays"):
        dtype = np.dtype(_DTYPES[entry["dtype"]])
        count = entry["nbytes"] // dtype.itemsize
        if count == 0:
            arrays[entry["name"]] = np.zeros(entry["shape"], dtype=dtype.newbyteorder("="))
            continue
        flat = np.frombuffer(payload, dtype=dtype, count=count, offset=entry["offset"])
        arrays[entry["name"]] = flat.reshape(entry["shape"]).astype(dtype.newbyteorder("="))
    return header, arrays


def write_container(
    path: Path, magic: bytes, header: Dict[str, Any], arrays: Dict[str, np.ndarray]
) -> str:
    """Write a container file and return the sha256 of the whole file."""
    data = encode_container(magic, header, arrays)
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(data)
    except OSError as e:
        raise ContainerIOError(f"cannot write {path}: {e}") from e
    return hashlib.sha256(data).hexdigest()


def read_container(path: Path, magic: bytes) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """Read and verify a container file."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise ContainerIOError(f"cannot read {path}: {e}") from e
    return decode_container(data, magic)


def file_sha256(path: Path) -> str:
    """Hex sha256 of a file's bytes."""
    digest = hashlib.sha256()
    try:
        with open(path, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 20), b""):
                digest.update(chunk)
    except OSError as e:
        raise ContainerIOError(f"cannot read {path}: {e}") from e
    return digest.hexdigest()
