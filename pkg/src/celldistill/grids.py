"""Grid containers and file formats.

Array conventions used across the package:
  feature grid   float32 (H, W, D), C-order, channel innermost
  binary mask    uint8   (H, W), values {0, 1}
  instance map   int32   (H, W), 0 = background, instances labeled 1..N
  rgb image      uint8   (H, W, 3)

Binary tensor files (.cgf) have an 8-byte header (magic "COIN", u8 version,
u8 dtype code, u8 ndim, u8 reserved zero) followed by ndim little-endian u32
dims in (H, W[, D]) order and a row-major little-endian payload.  Masks are
exchanged as raw PGM (P5); instance maps use maxval 65535 which per the PGM
convention stores big-endian 16-bit samples.  RGB ingestion uses PPM (P6).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"COIN"
VERSION = 1

# dtype code <-> numpy dtype (little-endian on disk)
_DTYPE_BY_CODE = {1: "<f4", 2: "u1", 3: "<u2", 4: "<i4"}
_CODE_BY_KIND = {("f", 4): 1, ("u", 1): 2, ("u", 2): 3, ("i", 4): 4}


class FormatError(ValueError):
    """A file does not conform to one of the on-disk formats."""


class DataError(ValueError):
    """Dataset-level problem: missing file, inconsistent record, bad shape."""


def instance_count(labels: np.ndarray) -> int:
    return int(labels.max()) if labels.size else 0


def validate_instance_map(labels: np.ndarray) -> None:
    """Labels must be non-negative and occupy 1..N without gaps."""
    if labels.ndim != 2:
        raise DataError(f"instance map must be 2-D, got shape {labels.shape}")
    if labels.size == 0:
        return
    lo = int(labels.min())
    if lo < 0:
        raise DataError(f"negative instance label {lo}")
    n = int(labels.max())
    present = np.unique(labels)
    want = np.arange(0, n + 1) if 0 in present else np.arange(1, n + 1)
    missing = np.setdiff1d(want, present)
    if missing.size:
        raise DataError(f"instance labels not contiguous, missing {missing[:4].tolist()}")


@dataclass
class ImageRecord:
    """One dataset element: features plus the coarse seed, optional extras."""

    image_id: str
    features: np.ndarray          # (H, W, D) float32
    seed: np.ndarray              # (H, W) uint8 {0,1}
    gt: np.ndarray | None = None  # (H, W) int32 instance map
    rgb: np.ndarray | None = None  # (H, W, 3) uint8

    def __post_init__(self) -> None:
        if self.features.ndim != 3:
            raise DataError(f"{self.image_id}: features must be (H, W, D)")
        if self.seed.shape != self.features.shape[:2]:
            raise DataError(f"{self.image_id}: seed shape {self.seed.shape} "
                            f"does not match features {self.features.shape[:2]}")
        if self.gt is not None and self.gt.shape != self.seed.shape:
            raise DataError(f"{self.image_id}: gt shape mismatch")

    @property
    def shape(self) -> tuple[int, int]:
        return self.features.shape[:2]


# ---------------------------------------------------------------------------
# CGF binary tensors


def save_grid(array: np.ndarray, path: str | Path) -> None:
    """Write a tensor as a .cgf file. Supports f32/u8/u16/i32, any ndim >= 1."""
    arr = np.ascontiguousarray(array)
    key = (arr.dtype.kind, arr.dtype.itemsize)
    if key not in _CODE_BY_KIND:
        raise FormatError(f"unsupported dtype {arr.dtype} for cgf")
    if arr.ndim < 1 or arr.ndim > 255:
        raise FormatError(f"unsupported ndim {arr.ndim} for cgf")
    code = _CODE_BY_KIND[key]
    header = MAGIC + struct.pack("<BBBB", VERSION, code, arr.ndim, 0)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.astype(_DTYPE_BY_CODE[code], copy=False).tobytes(order="C")
    Path(path).write_bytes(header + dims + payload)


def load_grid(path: str | Path) -> np.ndarray:
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
    if len(blob) < expect:
        raise FormatError(f"{path}: truncated payload, header declares "
                          f"{count} elements ({expect - need} bytes), "
                          f"found {len(blob) - need}")
    if len(blob) > expect:
        raise FormatError(f"{path}: {len(blob) - expect} trailing bytes after payload")
    data = np.frombuffer(blob, dtype=dt, count=count, offset=need)
    return data.reshape(dims).astype(dt.newbyteorder("="), copy=True)


# ---------------------------------------------------------------------------
# PGM / PPM

def _read_pnm_header(blob: bytes, path, magics: tuple[bytes, ...], nfields: int):
    """Parse a PNM header: magic then nfields ints, '#' comments allowed."""
    if blob[:2] == b"P2" and b"P2" not in magics:
        raise FormatError(f"{path}: ASCII PGM (P2) is not supported, use P5")
    if blob[:2] not in magics:
        raise FormatError(f"{path}: not a {'/'.join(m.decode() for m in magics)} file")
    pos = 2
    fields = []
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
    # exactly one whitespace byte separates header from payload
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise FormatError(f"{path}: missing separator before payload")
    return fields, pos + 1


def _read_pgm(path: str | Path) -> tuple[np.ndarray, int]:
    blob = Path(path).read_bytes()
    (width, height, maxval), off = _read_pnm_header(blob, path, (b"P5",), 3)
    if not 0 < maxval < 65536:
        raise FormatError(f"{path}: bad maxval {maxval}")
    dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height
    if len(blob) - off < count * dt.itemsize:
        raise FormatError(f"{path}: truncated pixel data")
    data = np.frombuffer(blob, dtype=dt, count=count, offset=off)
    return data.reshape(height, width).astype(dt.newbyteorder("="), copy=True), maxval


def save_binary_mask(mask: np.ndarray, path: str | Path) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise FormatError(f"binary mask must be 2-D, got {mask.shape}")
    vals = np.unique(mask)
    if not np.isin(vals, (0, 1)).all():
        raise FormatError(f"binary mask values must be 0/1, got {vals[:5].tolist()}")
    h, w = mask.shape
    head = f"P5\n{w} {h}\n255\n".encode()
    Path(path).write_bytes(head + (mask.astype(np.uint8) * 255).tobytes())


def load_binary_mask(path: str | Path) -> np.ndarray:
    data, maxval = _read_pgm(path)
    if maxval == 1:
        return (data > 0).astype(np.uint8)
    # grayscale encodings of a binary mask threshold at 128
    return (data >= 128).astype(np.uint8)


def save_instance_map(labels: np.ndarray, path: str | Path) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise FormatError(f"instance map must be 2-D, got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() > 65535):
        raise FormatError(f"instance labels outside [0, 65535]: "
                          f"min {labels.min()}, max {labels.max()}")
    h, w = labels.shape
    head = f"P5\n{w} {h}\n65535\n".encode()
    Path(path).write_bytes(head + labels.astype(">u2").tobytes())


def load_instance_map(path: str | Path) -> np.ndarray:
    data, _ = _read_pgm(path)
    return data.astype(np.int32)


# three-valued pseudo-label masks: 0 background, 255 foreground, 128 ignore
_PSEUDO_CODES = {0: 0, 255: 1, 128: 2}


def save_pseudo_mask(target: np.ndarray, ignore: np.ndarray, path: str | Path) -> None:
    img = np.where(ignore, 128, np.asarray(target, dtype=np.uint8) * 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def load_pseudo_mask(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Returns (target uint8 {0,1}, ignore bool)."""
    data, maxval = _read_pgm(path)
    if maxval != 255:
        raise FormatError(f"{path}: pseudo mask must use maxval 255")
    bad = np.setdiff1d(np.unique(data), (0, 128, 255))
    if bad.size:
        raise FormatError(f"{path}: pseudo mask values must be 0/128/255, got {bad[:5].tolist()}")
    return (data == 255).astype(np.uint8), data == 128


def save_rgb(rgb: np.ndarray, path: str | Path) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise FormatError(f"rgb image must be (H, W, 3), got {rgb.shape}")
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())


def load_rgb(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    (width, height, maxval), off = _read_pnm_header(blob, path, (b"P6",), 3)
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PPM supported, maxval {maxval}")
    count = width * height * 3
    if len(blob) - off < count:
        raise FormatError(f"{path}: truncated pixel data")
    data = np.frombuffer(blob, dtype=np.uint8, count=count, offset=off)
    return data.reshape(height, width, 3).copy()


# ---------------------------------------------------------------------------
# Patch partitioning

@dataclass(frozen=True)
class PatchLayout:
    """Geometry of a per_axis x per_axis tiling with edge-replication padding."""

    per_axis: int
    height: int        # original extent
    width: int
    patch_height: int  # after padding
    patch_width: int

    @property
    def pad_bottom(self) -> int:
        return self.patch_height * self.per_axis - self.height

    @property
    def pad_right(self) -> int:
        return self.patch_width * self.per_axis - self.width


def partition_patches(grid: np.ndarray, per_axis: int) -> tuple[list[np.ndarray], PatchLayout]:
    """Split a (H, W[, C]) grid into per_axis**2 equal patches, row-major.

    Non-divisible extents are padded at the bottom/right edges by replicating
    the last row/column; the layout records the original extent so stitching
    restores it exactly.
    """
    if per_axis < 1:
        raise ValueError(f"per_axis must be >= 1, got {per_axis}")
    if grid.ndim not in (2, 3):
        raise ValueError(f"can only partition 2-D or 3-D grids, got shape {grid.shape}")
    h, w = grid.shape[:2]
    if h == 0 or w == 0:
        raise ValueError("cannot partition an empty grid")
    ph = -(-h // per_axis)
    pw = -(-w // per_axis)
    layout = PatchLayout(per_axis, h, w, ph, pw)
    pad = [(0, layout.pad_bottom), (0, layout.pad_right)] + [(0, 0)] * (grid.ndim - 2)
    padded = np.pad(grid, pad, mode="edge")
    patches = []
    for i in range(per_axis):
        for j in range(per_axis):
            patches.append(padded[i * ph:(i + 1) * ph, j * pw:(j + 1) * pw].copy())
    return patches, layout


def stitch_patches(patches: list[np.ndarray], layout: PatchLayout) -> np.ndarray:
    """Inverse of partition_patches over the original extent."""
    n = layout.per_axis
    if len(patches) != n * n:
        raise ValueError(f"expected {n * n} patches, got {len(patches)}")
    rows = []
    for i in range(n):
        rows.append(np.concatenate(patches[i * n:(i + 1) * n], axis=1))
    full = np.concatenate(rows, axis=0)
    return full[:layout.height, :layout.width].copy()


# ---------------------------------------------------------------------------
# Dataset directories

def dataset_paths(root: str | Path, image_id: str) -> dict[str, Path]:
    root = Path(root)
    return {
        "features": root / f"{image_id}.features.cgf",
        "seed": root / f"{image_id}.seed.pgm",
        "gt": root / f"{image_id}.gt.pgm16",
        "rgb": root / f"{image_id}.ppm",
    }


def save_dataset(root: str | Path, splits: dict[str, list[ImageRecord]],
                 extra: dict | None = None, with_rgb: bool = False) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest: dict = {"images": []}
    for split in sorted(splits):
        for rec in splits[split]:
            paths = dataset_paths(root, rec.image_id)
            save_grid(rec.features, paths["features"])
            save_binary_mask(rec.seed, paths["seed"])
            entry = {
                "id": rec.image_id,
                "split": split,
                "height": rec.shape[0],
                "width": rec.shape[1],
                "depth": rec.features.shape[2],
            }
            if rec.gt is not None:
                save_instance_map(rec.gt, paths["gt"])
                entry["gt"] = True
            if with_rgb and rec.rgb is not None:
                save_rgb(rec.rgb, paths["rgb"])
                entry["rgb"] = True
            manifest["images"].append(entry)
    if extra:
        manifest.update(extra)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(root: str | Path) -> dict[str, list[ImageRecord]]:
    """Load a dataset directory into {"train": [...], "test": [...]}."""
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise DataError(f"{root}: no manifest.json")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{mpath}: invalid JSON ({exc})") from exc
    splits: dict[str, list[ImageRecord]] = {}
    for entry in manifest.get("images", []):
        image_id = entry["id"]
        paths = dataset_paths(root, image_id)
        if not paths["features"].is_file():
            raise DataError(f"{paths['features']}: missing features file")
        features = load_grid(paths["features"])
        if features.ndim != 3 or features.dtype != np.float32:
            raise DataError(f"{paths['features']}: expected a (H, W, D) float32 grid")
        if not paths["seed"].is_file():
            raise DataError(f"{paths['seed']}: missing seed mask")
        seed = load_binary_mask(paths["seed"])
        gt = None
        if entry.get("gt"):
            gt = load_instance_map(paths["gt"])
            validate_instance_map(gt)
        rgb = load_rgb(paths["rgb"]) if entry.get("rgb") else None
        rec = ImageRecord(image_id, features, seed, gt=gt, rgb=rgb)
        splits.setdefault(entry.get("split", "train"), []).append(rec)
    return splits
