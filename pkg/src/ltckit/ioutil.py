"""Small byte-sink/source helpers shared by the binary formats."""

from __future__ import annotations

import io
import zlib
from contextlib import contextmanager
from pathlib import Path
from typing import BinaryIO, Iterator, Union

ByteSink = Union[str, Path, BinaryIO]
ByteSource = Union[str, Path, bytes, bytearray, BinaryIO]


def crc32_hex(data: bytes) -> str:
    return f"crc32:{zlib.crc32(data) & 0xFFFFFFFF:08x}"


@contextmanager
def open_sink(destination: ByteSink) -> Iterator[BinaryIO]:
    if isinstance(destination, (str, Path)):
        with open(destination, "wb") as fh:
            yield fh
    else:
        yield destination


@contextmanager
def open_source(source: ByteSource) -> Iterator[BinaryIO]:
    if isinstance(source, (str, Path)):
        with open(source, "rb") as fh:
            yield fh
    elif isinstance(source, (bytes, bytearray)):
        yield io.BytesIO(source)
    else:
        yield source


def read_all(source: ByteSource) -> bytes:
    with open_source(source) as fh:
        return fh.read()
