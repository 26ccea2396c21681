"""FLC1 tensor files and named-tensor checkpoints.

FLC1 record: ``b"FLC1"``, u32 LE rank, rank × u32 LE extents, then float64
LE values in row-major order.

Checkpoint: a text header ``FLCKPT <n>`` followed by ``n`` manifest lines
``<name> <offset> <d0,d1,...>`` and a line ``END``; after that, the FLC1
records back to back.  Offsets are byte positions of each record relative to
the first byte after ``END\\n``.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"FLC1"
CKPT_MAGIC = "FLCKPT"


class FormatError(ValueError):
    """A file does not follow the FLC1 / checkpoint layout."""


def encode_tensor(array) -> bytes:
    a = np.asarray(array, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
    head = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes(order="C")


def read_tensor_from(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
    count = int(np.prod(shape)) if rank else 1
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise FormatError(f"truncated tensor: expected {8 * count} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def write_tensor(path: str | Path, array) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor_from(fh)


def write_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    blobs, lines, offset = [], [], 0
    for name, value in tensors.items():
        if not name or any(ch.isspace() for ch in name):
            raise ValueError(f"tensor name {name!r} must be non-empty without whitespace")
        blob = encode_tensor(value)
        shape = ",".join(str(d) for d in np.shape(value))
        lines.append(f"{name} {offset} {shape}")
        blobs.append(blob)
        offset += len(blob)
    header = f"{CKPT_MAGIC} {len(lines)}\n" + "".join(line + "\n" for line in lines) + "END\n"
    Path(path).write_bytes(header.encode("ascii") + b"".join(blobs))


def read_manifest(path: str | Path) -> list[tuple[str, int, tuple[int, ...]]]:
    return _parse(Path(path).read_bytes())[0]


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    manifest, body = _parse(Path(path).read_bytes())
    out = {}
    for name, offset, shape in manifest:
        value = read_tensor_from(io.BytesIO(body[offset:]))
        if value.shape != shape:
            raise FormatError(f"{name}: manifest shape {shape} disagrees with record shape {value.shape}")
        out[name] = value
    return out


def _parse(data: bytes):
    end = data.find(b"\nEND\n")
    if not data.startswith(CKPT_MAGIC.encode()) or end < 0:
        raise FormatError("not a checkpoint file")
    lines = data[:end].decode("ascii").split("\n")
    count = int(lines[0].split()[1])
    if len(lines) - 1 != count:
        raise FormatError(f"manifest declares {count} tensors but lists {len(lines) - 1}")
    manifest = []
    for line in lines[1:]:
        name, offset, shape = line.split(" ")
        dims = tuple(int(d) for d in shape.split(",")) if shape else ()
        manifest.append((name, int(offset), dims))
    return manifest, data[end + len(b"\nEND\n") :]
