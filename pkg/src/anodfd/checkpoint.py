"""Flat binary checkpoint container.

Layout (all integers u32 little-endian)::

    b"ANODFD1"  value-width (4 or 8)
    repeated until EOF:
        name-length  name-bytes(utf-8)  rank  extent*rank  values(LE IEEE-754, row-major)
"""
import struct
from pathlib import Path

import numpy as np

from .errors import DataIOError, ValidationError

MAGIC = b"ANODFD1"
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def save_checkpoint(path, arrays, width=4):
    """Write ``arrays`` (name -> ndarray) at ``width`` bytes per value."""
    if width not in _DTYPES:
        raise ValueError(f"value width must be 4 or 8, got {width}")
    dt = _DTYPES[width]
    path = Path(path)
    chunks = [MAGIC, struct.pack("<I", width)]
    for name, value in arrays.items():
        value = np.asarray(value)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype=dt).tobytes())
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(b"".join(chunks))
        tmp.replace(path)
    except OSError as exc:
        raise DataIOError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path):
    """Read a container back into an ordered dict of arrays and the value width."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read checkpoint {path}: {exc}") from exc
    if not buf.startswith(MAGIC):
        raise ValidationError(f"{path}: not an ANODFD1 checkpoint")
    pos = len(MAGIC)

    def u32(n=1):
        nonlocal pos
        if pos + 4 * n > len(buf):
            raise ValidationError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(f"<{n}I", buf, pos)
        pos += 4 * n
        return vals

    (width,) = u32()
    if width not in _DTYPES:
        raise ValidationError(f"{path}: unsupported value width {width}")
    dt = _DTYPES[width]
    arrays = {}
    while pos < len(buf):
        (n,) = u32()
        name = buf[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = u32()
        shape = u32(rank) if rank else ()
        count = int(np.prod(shape)) if shape else 1
        end = pos + count * width
        if end > len(buf):
            raise ValidationError(f"{path}: truncated values for {name!r}")
        arrays[name] = np.frombuffer(buf, dtype=dt, count=count, offset=pos).reshape(shape).astype(dt.newbyteorder("="))
        pos = end
    return arrays, width
