"""Tests for the binary container format."""

import numpy as np
import pytest

from duohand.container import (
    CHECKPOINT_MAGIC,
    DATASET_MAGIC,
    decode_container,
    encode_container,
    file_sha256,
    read_container,
    write_container,
)
from duohand.errors import ChecksumError, ContainerIOError, FormatError, VersionMismatchError


@pytest.fixture
def arrays():
    rng = np.random.default_rng(0)
    return {
        "values": rng.normal(size=(4, 21, 3)),
        "ids": np.arange(4, dtype=np.int64),
        "empty": np.zeros((0, 3)),
    }


def test_full_precision_round_trip(arrays):
    """Headers and arrays decode exactly, keeping their dtypes."""
    header = {"kind": "test", "count": 4}
    decoded_header, decoded = decode_container(encode_container(DATASET_MAGIC, header, arrays), DATASET_MAGIC)
    assert decoded_header == header
    np.testing.assert_array_equal(decoded["values"], arrays["values"])
    np.testing.assert_array_equal(decoded["ids"], arrays["ids"])
    assert decoded["ids"].dtype == np.int64
    assert decoded["empty"].shape == (0, 3)


def test_encoding_is_deterministic(arrays):
    """Key order does not change the encoded bytes."""
    header = {"b": 1, "a": 2}
    assert encode_container(DATASET_MAGIC, header, arrays) == encode_container(
        DATASET_MAGIC, dict(reversed(list(header.items()))), dict(reversed(list(arrays.items())))
    )


def test_wrong_magic(arrays):
    """A container of another kind is rejected."""
    data = encode_container(CHECKPOINT_MAGIC, {}, arrays)
    with pytest.raises(FormatError):
        decode_container(data, DATASET_MAGIC)


def test_major_version_mismatch(arrays):
    """A newer major format version is rejected."""
    data = bytearray(encode_container(DATASET_MAGIC, {}, arrays))
    data[8] += 1
    with pytest.raises(VersionMismatchError):
        decode_container(bytes(data), DATASET_MAGIC)


def test_flipped_byte(arrays):
    """A corrupted byte fails the checksum."""
    data = bytearray(encode_container(DATASET_MAGIC, {}, arrays))
    data[len(data) // 2] ^= 0xFF
    with pytest.raises(ChecksumError):
        decode_container(bytes(data), DATASET_MAGIC)


@pytest.mark.parametrize("keep", [0, 5, 30, -1])
def test_truncation(arrays, keep):
    """Any truncation fails the checksum."""
    data = encode_container(DATASET_MAGIC, {}, arrays)
    with pytest.raises(ChecksumError):
        decode_container(data[:keep], DATASET_MAGIC)


def test_write_and_read(tmp_path, arrays):
    """Writing returns the file digest and creates parent directories."""
    path = tmp_path / "nested" / "file.bin"
    digest = write_container(path, CHECKPOINT_MAGIC, {"kind": "checkpoint"}, arrays)
    assert digest == file_sha256(path)
    header, decoded = read_container(path, CHECKPOINT_MAGIC)
    assert header["kind"] == "checkpoint"
    np.testing.assert_array_equal(decoded["values"], arrays["values"])


def test_missing_file(tmp_path):
    """Reading a missing file is an IO error."""
    with pytest.raises(ContainerIOError):
        read_container(tmp_path / "missing.bin", DATASET_MAGIC)
