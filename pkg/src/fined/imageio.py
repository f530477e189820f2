"""Image decoding/encoding and dataset manifests.

Images move through the library as float arrays in [0, 1], shaped (c, h, w)
with c of 1 or 3. PNG files go through Pillow (8-bit gray/RGB, 16-bit gray);
PGM/PPM are parsed and emitted directly (P2/P3 ASCII and P5/P6 raw, maxval up
to 65535, two-byte samples big-endian per the Netpbm convention). Pixel
values map as v = round(p * maxval) on write and p = v / maxval on read, so
a write/read cycle is exact at matching bit depth.

A dataset manifest is a text file of tab-separated records::

    image_path<TAB>gt_path_1[,gt_path_2,...]

Relative paths are resolved against the manifest's own directory. Blank
lines and lines starting with '#' are skipped.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .util import atomic_write


def _from_uint(arr: np.ndarray, maxval: int) -> np.ndarray:
    return (arr.astype(np.float32) / np.float32(maxval))


def read_image(path: str) -> np.ndarray:
    """Decode a PNG/PGM/PPM file to a (c, h, w) float32 array in [0, 1]."""
    ext = os.path.splitext(path)[1].lower()
    if ext in (".pgm", ".ppm", ".pnm"):
        return _read_netpbm(path)
    if ext == ".png":
        return _read_png(path)
    raise ValueError(f"{path}: unsupported image format {ext!r} (png/pgm/ppm only)")


def write_image(path: str, image: np.ndarray, bit_depth: int = 8) -> None:
    """Encode a (h, w), (1, h, w) or (3, h, w) array in [0, 1] to ``path``.

    Grayscale supports bit depth 8 or 16; RGB is 8-bit only. The format
    comes from the extension. Writes are atomic.
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ValueError(f"image must be (h, w), (1, h, w) or (3, h, w), got {arr.shape}")
    if bit_depth not in (8, 16):
        raise ValueError(f"bit depth must be 8 or 16, got {bit_depth}")
    if arr.shape[0] == 3 and bit_depth != 8:
        raise ValueError("RGB output is 8-bit only")
    maxval = (1 << bit_depth) - 1
    quant = np.clip(np.round(arr * maxval), 0, maxval)
    quant = quant.astype(np.uint8 if bit_depth == 8 else np.uint16)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".png":
        data = _encode_png(quant, bit_depth)
    elif ext in (".pgm", ".pnm") and quant.shape[0] == 1:
        data = _encode_netpbm(quant, maxval, b"P5")
    elif ext == ".ppm" and quant.shape[0] == 3:
        data = _encode_netpbm(quant, maxval, b"P6")
    else:
        raise ValueError(f"{path}: cannot write {quant.shape[0]}-channel image as {ext!r}")
    atomic_write(path, data)


# ---------------------------------------------------------------------------
# PNG via Pillow


def _read_png(path: str) -> np.ndarray:
    with Image.open(path) as img:
        img.load()
        mode = img.mode
        if mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(img, dtype=np.uint32)
            return _from_uint(arr, 65535)[None]
        if mode == "L":
            return _from_uint(np.asarray(img), 255)[None]
        if mode in ("RGB", "RGBA", "P", "LA"):
            rgb = np.asarray(img.convert("RGB"))
            return _from_uint(rgb, 255).transpose(2, 0, 1)
    raise ValueError(f"{path}: unsupported PNG mode {mode!r}")


def _encode_png(quant: np.ndarray, bit_depth: int) -> bytes:
    if quant.shape[0] == 3:
        img = Image.fromarray(quant.transpose(1, 2, 0))
    else:
        img = Image.fromarray(quant[0])  # L for uint8, I;16 for uint16
    out = io.BytesIO()
    img.save(out, format="PNG")
    return out.getvalue()


# ---------------------------------------------------------------------------
# Netpbm


def _read_netpbm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()

    pos = 0

    def token() -> bytes:
        nonlocal pos
        while pos < len(blob):
            ch = blob[pos:pos + 1]
            if ch == b"#":
                while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated header")
        return blob[start:pos]

    magic = token()
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported netpbm magic {magic!r}")
    width, height, maxval = int(token()), int(token()), int(token())
    if not (0 < maxval < 65536):
        raise ValueError(f"{path}: invalid maxval {maxval}")
    channels = 3 if magic in (b"P3", b"P6") else 1
    count = width * height * channels

    if magic in (b"P2", b"P3"):
        values = blob[pos:].split()
        if len(values) < count:
            raise ValueError(f"{path}: expected {count} samples, found {len(values)}")
        arr = np.array([int(v) for v in values[:count]], dtype=np.uint32)
    else:
        pos += 1  # single whitespace byte after maxval
        width_bytes = 2 if maxval > 255 else 1
        need = count * width_bytes
        raw = blob[pos:pos + need]
        if len(raw) < need:
            raise ValueError(f"{path}: truncated pixel data ({len(raw)} of {need} bytes)")
        dtype = ">u2" if maxval > 255 else np.uint8
        arr = np.frombuffer(raw, dtype=dtype).astype(np.uint32)
    if arr.max(initial=0) > maxval:
        raise ValueError(f"{path}: sample exceeds maxval {maxval}")
    arr = arr.reshape(height, width, channels).transpose(2, 0, 1)
    return _from_uint(arr, maxval)


def _encode_netpbm(quant: np.ndarray, maxval: int, magic: bytes) -> bytes:
    c, h, w = quant.shape
    header = b"%s\n%d %d\n%d\n" % (magic, w, h, maxval)
    pixels = quant.transpose(1, 2, 0)
    if maxval > 255:
        body = pixels.astype(">u2").tobytes()
    else:
        body = pixels.astype(np.uint8).tobytes()
    return header + body


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestEntry:
    image: str
    gts: tuple[str, ...]

    @property
    def id(self) -> str:
        return os.path.splitext(os.path.basename(self.image))[0]


def parse_manifest(path: str) -> list[ManifestEntry]:
    """Read a manifest, resolving relative paths against its directory."""
    base = os.path.dirname(os.path.abspath(path))
    entries: list[ManifestEntry] = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[1]:
                raise ValueError(
                    f"{path}:{lineno}: expected 'image<TAB>gt1[,gt2,...]', got {line!r}")

            def resolve(p: str) -> str:
                return p if os.path.isabs(p) else os.path.join(base, p)

            gts = tuple(resolve(g.strip()) for g in parts[1].split(","))
            entries.append(ManifestEntry(image=resolve(parts[0].strip()), gts=gts))
    if not entries:
        raise ValueError(f"{path}: manifest has no entries")
    return entries


def load_gt(paths, fuse) -> np.ndarray:
    """Read annotator maps and combine them into one consensus map.

    A single path is taken as an already-fused map in [0, 1]; several paths
    are required to be binary and are combined by ``fuse`` (pixel mean).
    """
    maps = []
    for p in paths:
        arr = read_image(p)
        if arr.shape[0] != 1:
            raise ValueError(f"{p}: ground truth must be single-channel")
        maps.append(arr[0])
    if len(maps) == 1:
        return np.clip(maps[0], 0.0, 1.0)
    return fuse(maps)
