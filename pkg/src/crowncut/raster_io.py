"""Binary PGM/PPM and baseline uncompressed TIFF codecs.

Only what the pipeline needs: single-band 8/16-bit grayscale in, 0/255 masks
and 8-bit P6 previews out. Multi-byte PGM samples are big-endian per the
netpbm format; TIFF byte order follows the file header.
"""
from __future__ import annotations

import os
import re
import struct
from pathlib import Path

import numpy as np

from .exceptions import IoFailure, MalformedRaster, MissingFile, UnsupportedBitDepth
from .imaging import BandId, RasterGrid, SegmentationMask

BAND_SUFFIX = re.compile(r"^(?P<scene>.+)_(?P<band>gre|red|reg|nir)\.(?:pgm|tif|tiff)$", re.IGNORECASE)


def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such file: {path}")
    try:
        return path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def _write_bytes(path, payload: bytes) -> None:
    try:
        Path(path).write_bytes(payload)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


# -- netpbm -----------------------------------------------------------------


def _netpbm_header(buf: bytes, nfields: int):
    """Parse magic plus ``nfields`` integers; return (magic, ints, data offset)."""
    if len(buf) < 2:
        raise MalformedRaster("file too short for a netpbm header")
    magic = buf[:2].decode("latin-1")
    pos = 2
    values = []
    while len(values) < nfields:
        if pos >= len(buf):
            raise MalformedRaster("truncated netpbm header")
        c = buf[pos:pos + 1]
        if c == b"#":
            end = buf.find(b"\n", pos)
            if end < 0:
                raise MalformedRaster("unterminated header comment")
            pos = end + 1
        elif c.isspace():
            pos += 1
        elif c.isdigit():
            start = pos
            while pos < len(buf) and buf[pos:pos + 1].isdigit():
                pos += 1
            values.append(int(buf[start:pos]))
        else:
            raise MalformedRaster(f"unexpected byte {c!r} in netpbm header")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise MalformedRaster("missing whitespace after netpbm header")
    return magic, values, pos + 1


def decode_pnm(buf: bytes) -> tuple[np.ndarray, int]:
    """Decode a binary P5/P6 image to ``(array, maxval)``; P6 yields (H, W, 3)."""
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise MalformedRaster(f"bad magic {magic!r}; expected binary PGM (P5) or PPM (P6)")
    _, (width, height, maxval), offset = _netpbm_header(buf, 3)
    if width < 1 or height < 1:
        raise MalformedRaster(f"invalid dimensions {width}x{height}")
    if not 1 <= maxval <= 65535:
        raise UnsupportedBitDepth(f"maxval {maxval} outside 1..65535")
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    need = count * dtype.itemsize
    if len(buf) - offset < need:
        raise MalformedRaster(f"truncated pixel data: need {need} bytes, have {len(buf) - offset}")
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
    if np.any(data > maxval):
        raise MalformedRaster("sample exceeds declared maxval")
    shape = (height, width, 3) if channels == 3 else (height, width)
    return data.reshape(shape).astype(np.int64), maxval


def encode_pnm(array: np.ndarray, maxval: int) -> bytes:
    a = np.asarray(array)
    if a.ndim == 2:
        magic = b"P5"
    elif a.ndim == 3 and a.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode array of shape {a.shape} as netpbm")
    if not 1 <= maxval <= 65535:
        raise UnsupportedBitDepth(f"maxval {maxval} outside 1..65535")
    if np.any(a < 0) or np.any(a > maxval) or np.any(a != np.round(a)):
        raise ValueError("samples must be integers within [0, maxval]")
    dtype = ">u2" if maxval > 255 else "u1"
    header = b"%s\n%d %d\n%d\n" % (magic, a.shape[1], a.shape[0], maxval)
    return header + np.ascontiguousarray(a, dtype=dtype).tobytes()


# -- TIFF -------------------------------------------------------------------

_TIFF_TYPES = {1: "B", 3: "H", 4: "I", 16: "Q"}


def decode_tiff(buf: bytes) -> tuple[np.ndarray, int]:
    """Decode the first IFD of a baseline uncompressed single-band grayscale TIFF."""
    if len(buf) < 8:
        raise MalformedRaster("file too short for a TIFF header")
    if buf[:4] == b"II*\x00":
        bo = "<"
    elif buf[:4] == b"MM\x00*":
        bo = ">"
    else:
        raise MalformedRaster(f"bad TIFF magic {buf[:4]!r}")
    (ifd,) = struct.unpack(bo + "I", buf[4:8])
    if ifd + 2 > len(buf):
        raise MalformedRaster("IFD offset beyond end of file")
    (n,) = struct.unpack(bo + "H", buf[ifd:ifd + 2])
    if ifd + 2 + 12 * n > len(buf):
        raise MalformedRaster("truncated IFD")
    tags: dict[int, tuple] = {}
    for i in range(n):
        tag, typ, cnt, raw = struct.unpack(bo + "HHI4s", buf[ifd + 2 + 12 * i: ifd + 14 + 12 * i])
        if typ not in _TIFF_TYPES:
            continue
        fmt = _TIFF_TYPES[typ]
        size = struct.calcsize(fmt) * cnt
        if size <= 4:
            src = raw[:size]
        else:
            (off,) = struct.unpack(bo + "I", raw)
            if off + size > len(buf):
                raise MalformedRaster(f"tag {tag} data beyond end of file")
            src = buf[off:off + size]
        tags[tag] = struct.unpack(bo + fmt * cnt, src)

    def one(tag, default=None):
        if tag in tags:
            return tags[tag][0]
        if default is None:
            raise MalformedRaster(f"required TIFF tag {tag} missing")
        return default

    width, height = one(256), one(257)
    if width < 1 or height < 1:
        raise MalformedRaster(f"invalid dimensions {width}x{height}")
    bits = one(258, 1)
    if bits not in (8, 16):
        raise UnsupportedBitDepth(f"{bits}-bit TIFF samples are not supported")
    if one(259, 1) != 1:
        raise MalformedRaster("compressed TIFF is not supported")
    if one(277, 1) != 1:
        raise MalformedRaster("only single-band TIFF is supported")
    if one(339, 1) != 1:
        raise UnsupportedBitDepth("only unsigned integer TIFF samples are supported")
    if 322 in tags:
        raise MalformedRaster("tiled TIFF is not supported")
    photometric = one(262, 1)
    if photometric not in (0, 1):
        raise MalformedRaster(f"photometric interpretation {photometric} is not grayscale")
    offsets = tags.get(273)
    counts = tags.get(279)
    if offsets is None or counts is None or len(offsets) != len(counts):
        raise MalformedRaster("missing or inconsistent strip tags")
    chunks = []
    for off, cnt in zip(offsets, counts):
        if off + cnt > len(buf):
            raise MalformedRaster("strip data beyond end of file")
        chunks.append(buf[off:off + cnt])
    data = b"".join(chunks)
    dtype = np.dtype(bo + ("u2" if bits == 16 else "u1"))
    need = width * height * dtype.itemsize
    if len(data) < need:
        raise MalformedRaster(f"truncated pixel data: need {need} bytes, have {len(data)}")
    arr = np.frombuffer(data, dtype=dtype, count=width * height).reshape(height, width).astype(np.int64)
    maxval = (1 << bits) - 1
    if photometric == 0:
        arr = maxval - arr
    return arr, maxval


def encode_tiff(array: np.ndarray, bits: int = 16) -> bytes:
    """Encode a 2-D integer array as a little-endian single-strip TIFF."""
    a = np.asarray(array)
    if a.ndim != 2:
        raise ValueError("TIFF encoder takes a 2-D array")
    if bits not in (8, 16):
        raise UnsupportedBitDepth(f"{bits}-bit TIFF samples are not supported")
    maxval = (1 << bits) - 1
    if np.any(a < 0) or np.any(a > maxval) or np.any(a != np.round(a)):
        raise ValueError(f"samples must be integers within [0, {maxval}]")
    pixels = np.ascontiguousarray(a, dtype="<u2" if bits == 16 else "u1").tobytes()
    h, w = a.shape
    entries = [
        (256, 4, 1, w), (257, 4, 1, h), (258, 3, 1, bits), (259, 3, 1, 1),
        (262, 3, 1, 1), (273, 4, 1, 0), (277, 3, 1, 1), (278, 4, 1, h), (279, 4, 1, len(pixels)),
    ]
    ifd_size = 2 + 12 * len(entries) + 4
    data_off = 8 + ifd_size
    out = bytearray(b"II*\x00" + struct.pack("<I", 8) + struct.pack("<H", len(entries)))
    for tag, typ, cnt, val in entries:
        if tag == 273:
            val = data_off
        packed = struct.pack("<H", val) + b"\x00\x00" if typ == 3 else struct.pack("<I", val)
        out += struct.pack("<HHI", tag, typ, cnt) + packed
    out += struct.pack("<I", 0)
    return bytes(out) + pixels


# -- public entry points ----------------------------------------------------


def _decode_any(buf: bytes) -> tuple[np.ndarray, int]:
    if buf[:2] in (b"P5", b"P6"):
        return decode_pnm(buf)
    if buf[:4] in (b"II*\x00", b"MM\x00*"):
        return decode_tiff(buf)
    raise MalformedRaster(f"unrecognised raster magic {buf[:4]!r}")


def load_raster(path) -> RasterGrid:
    arr, maxval = _decode_any(_read_bytes(path))
    if arr.ndim != 2:
        raise MalformedRaster(f"{path}: expected a single-band raster")
    return RasterGrid(arr.astype(np.float64), max_value=255.0 if maxval <= 255 else 65535.0)


def load_band(path, band: BandId | None = None) -> RasterGrid:
    """Decode one band file.

    When ``band`` is given and the filename follows the ``<scene>_<BAND>``
    convention, the suffix must agree with it.
    """
    if band is not None:
        m = BAND_SUFFIX.match(os.path.basename(str(path)))
        if m and BandId.parse(m.group("band")) is not band:
            raise ValueError(f"{path} is named as band {m.group('band').upper()}, not {band.name}")
    return load_raster(path)


def save_raster(grid: RasterGrid, path, fmt: str = "pgm") -> None:
    """Write ``grid``; fractional samples (e.g. warped bands) are rounded half up."""
    maxval = 255 if grid.max_value <= 255 else 65535
    values = np.clip(np.floor(grid.values + 0.5), 0, maxval).astype(np.int64)
    if fmt == "pgm":
        payload = encode_pnm(values, maxval)
    elif fmt == "tif":
        payload = encode_tiff(values, 8 if maxval == 255 else 16)
    else:
        raise ValueError(f"unknown raster format {fmt!r}")
    _write_bytes(path, payload)


def save_mask(mask: SegmentationMask, path) -> None:
    _write_bytes(path, encode_pnm(mask.labels.astype(np.int64) * 255, 255))


def load_mask(path) -> SegmentationMask:
    arr, maxval = decode_pnm(_read_bytes(path))
    if arr.ndim != 2 or maxval != 255:
        raise MalformedRaster(f"{path}: masks are 8-bit single-band PGM")
    if not np.all((arr == 0) | (arr == 255)):
        raise MalformedRaster(f"{path}: mask samples must be 0 or 255")
    return SegmentationMask((arr == 255).astype(np.uint8))


def save_rgb(data: np.ndarray, path) -> None:
    """Write an ``(H, W, 3)`` array in [0, 1] as an 8-bit P6 file."""
    q = np.floor(np.clip(np.asarray(data, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5)
    _write_bytes(path, encode_pnm(q.astype(np.int64), 255))


def load_rgb(path) -> np.ndarray:
    arr, maxval = decode_pnm(_read_bytes(path))
    if arr.ndim != 3:
        raise MalformedRaster(f"{path}: expected a P6 image")
    return arr / float(maxval)


def find_scenes(directory) -> dict[str, dict[BandId, Path]]:
    """Group ``<scene>_<BAND>.pgm|tif`` files in ``directory`` (recursively) by scene."""
    scenes: dict[str, dict[BandId, Path]] = {}
    for p in sorted(Path(directory).rglob("*")):
        m = BAND_SUFFIX.match(p.name)
        if m and p.is_file():
            scenes.setdefault(m.group("scene"), {})[BandId.parse(m.group("band"))] = p
    return scenes


def load_scene(paths: dict[BandId, Path]) -> dict[BandId, RasterGrid]:
    return {band: load_band(path, band) for band, path in paths.items()}
