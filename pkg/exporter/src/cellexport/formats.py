"""On-disk formats of the segmentation file protocol, written atomically.

This package talks to the segmentation pipeline exclusively through files,
so the formats here are an independent implementation of that protocol:

  tensor files (.cgf)  8-byte header (magic "COIN", u8 version=1, u8 dtype
                       code, u8 ndim, u8 reserved=0), ndim little-endian u32
                       dims in (H, W[, D]) order, row-major little-endian
                       payload.  dtype codes: 1=f32, 2=u8, 3=u16, 4=i32.
  binary masks (.pgm)  raw PGM (P5), maxval 255, background 0 / foreground 255.
  input images         PPM (P6) color or 8-bit PGM (P5) grayscale.

Every write goes through a temp file in the target directory followed by an
atomic rename, so consumers never observe a partially written file.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"COIN"
VERSION = 1

_DTYPE_BY_CODE = {1: "<f4", 2: "u1", 3: "<u2", 4: "<i4"}
_CODE_BY_KIND = {("f", 4): 1, ("u", 1): 2, ("u", 2): 3, ("i", 4): 4}


class FormatError(ValueError):
    """A file does not conform to one of the on-disk formats."""


class DataError(ValueError):
    """Input-folder problem: missing file, empty folder, malformed request."""


def atomic_write_bytes(path: str | Path, blob: bytes) -> None:
    """Write via temp file + rename so the target is never half-written."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(blob)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def atomic_write_json(path: str | Path, payload: object) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Tensor files

def save_tensor(array: np.ndarray, path: str | Path) -> None:
    arr = np.ascontiguousarray(array)
    key = (arr.dtype.kind, arr.dtype.itemsize)
    if key not in _CODE_BY_KIND:
        raise FormatError(f"unsupported dtype {arr.dtype} for tensor file")
    if arr.ndim < 1 or arr.ndim > 255:
        raise FormatError(f"unsupported ndim {arr.ndim} for tensor file")
    code = _CODE_BY_KIND[key]
    blob = (MAGIC + struct.pack("<BBBB", VERSION, code, arr.ndim, 0)
            + struct.pack(f"<{arr.ndim}I", *arr.shape)
            + arr.astype(_DTYPE_BY_CODE[code], copy=False).tobytes(order="C"))
    atomic_write_bytes(path, blob)


def load_tensor(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise FormatError(f"{path}: truncated header ({len(blob)} bytes)")
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    version, code, ndim, reserved = struct.unpack("<BBBB", blob[4:8])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if code not in _DTYPE_BY_CODE:
        raise FormatError(f"{path}: unknown dtype code {code}")
    if reserved != 0:
        raise FormatError(f"{path}: reserved byte must be 0, got {reserved}")
    if ndim < 1:
        raise FormatError(f"{path}: bad ndim {ndim}")
    need = 8 + 4 * ndim
    if len(blob) < need:
        raise FormatError(f"{path}: truncated dims")
    dims = struct.unpack(f"<{ndim}I", blob[8:need])
    dt = np.dtype(_DTYPE_BY_CODE[code])
    count = int(np.prod(dims, dtype=np.int64))
    expect = need + count * dt.itemsize
    if len(blob) != expect:
        raise FormatError(f"{path}: payload is {len(blob) - need} bytes, "
                          f"header declares {expect - need}")
    data = np.frombuffer(blob, dtype=dt, count=count, offset=need)
    return data.reshape(dims).astype(dt.newbyteorder("="), copy=True)


# ---------------------------------------------------------------------------
# Masks and images

def save_mask(mask: np.ndarray, path: str | Path) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise FormatError(f"binary mask must be 2-D, got {mask.shape}")
    vals = np.unique(mask)
    if not np.isin(vals, (0, 1)).all():
        raise FormatError(f"binary mask values must be 0/1, got {vals[:5].tolist()}")
    h, w = mask.shape
    head = f"P5\n{w} {h}\n255\n".encode()
    atomic_write_bytes(path, head + (mask.astype(np.uint8) * 255).tobytes())


def _read_pnm_header(blob: bytes, path, magics: tuple[bytes, ...], nfields: int):
    if blob[:2] not in magics:
        want = "/".join(m.decode() for m in magics)
        raise FormatError(f"{path}: not a {want} file (got {blob[:2]!r})")
    pos = 2
    fields: list[int] = []
    while len(fields) < nfields:
        if pos >= len(blob):
            raise FormatError(f"{path}: truncated header")
        ch = blob[pos:pos + 1]
        if ch == b"#":
            nl = blob.find(b"\n", pos)
            pos = len(blob) if nl < 0 else nl + 1
        elif ch.isspace():
            pos += 1
        elif ch.isdigit():
            end = pos
            while end < len(blob) and blob[end:end + 1].isdigit():
                end += 1
            fields.append(int(blob[pos:end]))
            pos = end
        else:
            raise FormatError(f"{path}: unexpected byte {ch!r} in header")
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise FormatError(f"{path}: missing separator before payload")
    return fields, pos + 1


def load_mask(path: str | Path) -> np.ndarray:
    """Binary mask as uint8 {0,1}; grayscale encodings threshold at 128."""
    blob = Path(path).read_bytes()
    (width, height, maxval), off = _read_pnm_header(blob, path, (b"P5",), 3)
    if not 0 < maxval < 256:
        raise FormatError(f"{path}: binary mask maxval must be <= 255, got {maxval}")
    count = width * height
    if len(blob) - off < count:
        raise FormatError(f"{path}: truncated pixel data")
    data = np.frombuffer(blob, dtype=np.uint8, count=count, offset=off)
    data = data.reshape(height, width)
    if maxval == 1:
        return (data > 0).astype(np.uint8)
    return (data >= 128).astype(np.uint8)


def load_image(path: str | Path) -> np.ndarray:
    """Read a PPM (P6) or 8-bit PGM (P5) image as (H, W, 3) uint8.

    Grayscale input is replicated across the three channels so every
    backend sees one color layout.
    """
    path = Path(path)
    blob = path.read_bytes()
    if blob[:2] in (b"P2", b"P3"):
        raise FormatError(f"{path}: ASCII PNM is not supported, use P5/P6")
    (width, height, maxval), off = _read_pnm_header(blob, path, (b"P5", b"P6"), 3)
    channels = 3 if blob[:2] == b"P6" else 1
    if not 0 < maxval < 256:
        raise FormatError(f"{path}: only 8-bit images supported, maxval {maxval}")
    count = width * height * channels
    if len(blob) - off < count:
        raise FormatError(f"{path}: truncated pixel data")
    data = np.frombuffer(blob, dtype=np.uint8, count=count, offset=off)
    if channels == 3:
        return data.reshape(height, width, 3).copy()
    return np.repeat(data.reshape(height, width, 1), 3, axis=2)


def save_image(rgb: np.ndarray, path: str | Path) -> None:
    """Write an (H, W, 3) uint8 image as PPM (P6); used by tests/fixtures."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise FormatError(f"rgb image must be (H, W, 3), got {rgb.shape}")
    h, w, _ = rgb.shape
    atomic_write_bytes(path, f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())


def discover_images(folder: str | Path) -> dict[str, Path]:
    """Map image id (file stem) -> path for every .ppm/.pgm in the folder."""
    folder = Path(folder)
    if not folder.is_dir():
        raise DataError(f"{folder}: not a directory")
    found: dict[str, Path] = {}
    for path in sorted(folder.iterdir()):
        if path.suffix not in (".ppm", ".pgm") or not path.is_file():
            continue
        if path.stem in found:
            raise DataError(f"{folder}: duplicate image id {path.stem!r} "
                            f"({found[path.stem].name} and {path.name})")
        found[path.stem] = path
    return found
