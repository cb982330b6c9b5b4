"""Image codecs and pairing manifests.

Supported formats, chosen by extension and confirmed by magic bytes:

* ``.pgm`` -- binary PGM (``P5``); 8-bit, or 16-bit big-endian when maxval > 255.
* ``.mfr`` -- raw float32: 16-byte header (``b"MFR1"``, u32 height, u32 width,
  u32 reserved; little-endian) followed by row-major little-endian float32.
* ``.tif``/``.tiff`` -- uncompressed, single-strip, single-page grayscale
  TIFF with 8- or 16-bit unsigned samples in either byte order.

Anything else raises :class:`FormatUnsupportedError` naming the feature.
"""

from collections.abc import Sequence
from dataclasses import dataclass
import json
import os
import struct

import numpy as np

from .errors import FormatUnsupportedError, InputError, ManifestError
from .ssim import as_image

MFR_MAGIC = b"MFR1"
_EXTENSIONS = {".pgm": "pgm", ".mfr": "mfr", ".tif": "tiff", ".tiff": "tiff"}


@dataclass(frozen=True)
class ImageFile:
    pixels: np.ndarray
    bit_depth: int | None
    format: str


def format_for_path(path):
    ext = os.path.splitext(str(path))[1].lower()
    try:
        return _EXTENSIONS[ext]
    except KeyError:
        raise FormatUnsupportedError(f"{path}: unknown image extension {ext!r}") from None


def read_image(path):
    """Decode ``path`` into an :class:`ImageFile`."""
    fmt = format_for_path(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if fmt == "pgm":
        return _decode_pgm(data, path)
    if fmt == "mfr":
        return _decode_mfr(data, path)
    return _decode_tiff(data, path)


def load_image(path):
    """Decode ``path`` into a float64 array."""
    return read_image(path).pixels


def save_image(img, path, format=None, bit_depth=16, byteorder="<"):
    """Encode ``img`` at ``path``.

    Integer formats need values that are already integers in
    ``[0, 2**bit_depth - 1]``; nothing is clipped or rounded here.
    ``byteorder`` only affects TIFF output.
    """
    fmt = format or format_for_path(path)
    img = as_image(img)
    if fmt == "mfr":
        data = _encode_mfr(img)
    elif fmt in ("pgm", "tiff"):
        ints = _check_integer(img, bit_depth)
        data = _encode_pgm(ints, bit_depth) if fmt == "pgm" else _encode_tiff(ints, bit_depth, byteorder)
    else:
        raise FormatUnsupportedError(f"unknown output format {fmt!r}")
    with open(path, "wb") as fh:
        fh.write(data)


def _check_integer(img, bit_depth):
    if bit_depth not in (8, 16):
        raise InputError(f"integer formats support 8 or 16 bits, got {bit_depth}")
    top = 2 ** bit_depth - 1
    if img.min() < 0 or img.max() > top:
        raise InputError(f"values must lie in [0, {top}] for {bit_depth}-bit output, "
                         f"got [{img.min()}, {img.max()}]")
    if not np.array_equal(img, np.rint(img)):
        raise InputError("integer formats need integer-valued pixels; quantize first")
    return img.astype(np.uint8 if bit_depth == 8 else np.uint16)


# PGM

def _pgm_tokens(data, path):
    tokens = []
    pos = 0
    n = len(data)
    while len(tokens) < 4:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatUnsupportedError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def _decode_pgm(data, path):
    if data[:2] != b"P5":
        raise FormatUnsupportedError(f"{path}: not a binary PGM (magic {data[:2]!r})")
    tokens, offset = _pgm_tokens(data, path)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatUnsupportedError(f"{path}: malformed PGM header") from None
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise FormatUnsupportedError(f"{path}: invalid PGM dimensions or maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * dtype.itemsize
    if len(data) - offset < need:
        raise FormatUnsupportedError(f"{path}: truncated payload ({len(data) - offset} of {need} bytes)")
    pixels = np.frombuffer(data, dtype=dtype, count=width * height, offset=offset)
    return ImageFile(pixels.reshape(height, width).astype(np.float64),
                     16 if maxval > 255 else 8, "pgm")


def _encode_pgm(ints, bit_depth):
    h, w = ints.shape
    maxval = 2 ** bit_depth - 1
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    body = ints.astype(">u2" if bit_depth == 16 else "u1").tobytes()
    return header + body


# MFR1 raw float

def _decode_mfr(data, path):
    if data[:4] != MFR_MAGIC:
        raise FormatUnsupportedError(f"{path}: bad raw-float magic {data[:4]!r}")
    if len(data) < 16:
        raise FormatUnsupportedError(f"{path}: truncated header")
    height, width, _ = struct.unpack("<III", data[4:16])
    need = 4 * height * width
    if len(data) - 16 < need:
        raise FormatUnsupportedError(f"{path}: truncated payload ({len(data) - 16} of {need} bytes)")
    pixels = np.frombuffer(data, dtype="<f4", count=height * width, offset=16)
    img = pixels.reshape(height, width).astype(np.float64)
    if not np.isfinite(img).all():
        raise InputError(f"{path}: contains NaN or Inf")
    return ImageFile(img, None, "mfr")


def _encode_mfr(img):
    if np.abs(img).max(initial=0.0) > np.finfo(np.float32).max:
        raise InputError("values overflow float32")
    h, w = img.shape
    return MFR_MAGIC + struct.pack("<III", h, w, 0) + img.astype("<f4").tobytes()


# TIFF

_TIFF_TYPES = {1: ("B", 1), 3: ("H", 2), 4: ("I", 4), 16: ("Q", 8)}
_TAG_NAMES = {256: "ImageWidth", 257: "ImageLength", 258: "BitsPerSample", 259: "Compression",
              262: "PhotometricInterpretation", 273: "StripOffsets", 277: "SamplesPerPixel",
              278: "RowsPerStrip", 279: "StripByteCounts", 284: "PlanarConfiguration",
              322: "TileWidth", 323: "TileLength", 339: "SampleFormat"}


def _tiff_ifd(data, bo, offset, path):
    if offset + 2 > len(data):
        raise FormatUnsupportedError(f"{path}: truncated TIFF directory")
    (count,) = struct.unpack_from(bo + "H", data, offset)
    end = offset + 2 + 12 * count
    if end + 4 > len(data):
        raise FormatUnsupportedError(f"{path}: truncated TIFF directory")
    tags = {}
    for i in range(count):
        tag, typ, n, raw = struct.unpack_from(bo + "HHI4s", data, offset + 2 + 12 * i)
        if typ not in _TIFF_TYPES:
            tags[tag] = None
            continue
        fmt, size = _TIFF_TYPES[typ]
        if n * size <= 4:
            values = struct.unpack_from(bo + fmt * n, raw)
        else:
            (ptr,) = struct.unpack(bo + "I", raw)
            if ptr + n * size > len(data):
                raise FormatUnsupportedError(f"{path}: truncated TIFF tag {tag}")
            values = struct.unpack_from(bo + fmt * n, data, ptr)
        tags[tag] = values
    (next_ifd,) = struct.unpack_from(bo + "I", data, end)
    return tags, next_ifd


def _decode_tiff(data, path):
    if data[:4] == b"II*\x00":
        bo = "<"
    elif data[:4] == b"MM\x00*":
        bo = ">"
    elif data[:4] in (b"II+\x00", b"MM\x00+"):
        raise FormatUnsupportedError(f"{path}: BigTIFF is not supported")
    else:
        raise FormatUnsupportedError(f"{path}: not a TIFF file (magic {data[:4]!r})")
    (ifd,) = struct.unpack_from(bo + "I", data, 4)
    tags, next_ifd = _tiff_ifd(data, bo, ifd, path)

    def one(tag, default=None):
        v = tags.get(tag)
        if v is None:
            if default is None:
                raise FormatUnsupportedError(f"{path}: missing TIFF tag {_TAG_NAMES.get(tag, tag)}")
            return default
        return v[0]

    if 322 in tags or 323 in tags:
        raise FormatUnsupportedError(f"{path}: tiled TIFF is not supported")
    compression = one(259, 1)
    if compression != 1:
        raise FormatUnsupportedError(f"{path}: compressed TIFF (compression={compression}) is not supported")
    spp = one(277, 1)
    if spp != 1:
        raise FormatUnsupportedError(f"{path}: multi-channel TIFF ({spp} samples per pixel) is not supported")
    photometric = one(262, 1)
    if photometric != 1:
        raise FormatUnsupportedError(f"{path}: photometric interpretation {photometric} is not supported "
                                     "(only BlackIsZero grayscale)")
    bits = one(258)
    if bits not in (8, 16):
        raise FormatUnsupportedError(f"{path}: {bits}-bit samples are not supported")
    sample_format = one(339, 1)
    if sample_format != 1:
        raise FormatUnsupportedError(f"{path}: sample format {sample_format} is not supported "
                                     "(only unsigned integers)")
    if next_ifd != 0:
        raise FormatUnsupportedError(f"{path}: multi-page TIFF is not supported")
    offsets = tags.get(273)
    counts = tags.get(279)
    if not offsets or not counts:
        raise FormatUnsupportedError(f"{path}: missing strip offsets or byte counts")
    if len(offsets) != 1:
        raise FormatUnsupportedError(f"{path}: multi-strip TIFF ({len(offsets)} strips) is not supported")
    width, height = one(256), one(257)
    dtype = np.dtype(bo + ("u2" if bits == 16 else "u1"))
    need = width * height * dtype.itemsize
    start = offsets[0]
    if counts[0] < need or start + need > len(data):
        raise FormatUnsupportedError(f"{path}: truncated payload (strip holds "
                                     f"{min(counts[0], max(len(data) - start, 0))} of {need} bytes)")
    pixels = np.frombuffer(data, dtype=dtype, count=width * height, offset=start)
    return ImageFile(pixels.reshape(height, width).astype(np.float64), bits, "tiff")


def _encode_tiff(ints, bit_depth, byteorder="<"):
    if byteorder not in ("<", ">"):
        raise InputError(f"byte order must be '<' or '>', got {byteorder!r}")
    bo = byteorder
    h, w = ints.shape
    entries = [
        (256, 4, w),
        (257, 4, h),
        (258, 3, bit_depth),
        (259, 3, 1),
        (262, 3, 1),
        (273, 4, 0),  # patched below
        (277, 3, 1),
        (278, 4, h),
        (279, 4, h * w * bit_depth // 8),
        (284, 3, 1),
        (339, 3, 1),
    ]
    ifd_size = 2 + 12 * len(entries) + 4
    data_offset = 8 + ifd_size
    out = bytearray()
    out += (b"II*\x00" if bo == "<" else b"MM\x00*") + struct.pack(bo + "I", 8)
    out += struct.pack(bo + "H", len(entries))
    for tag, typ, value in entries:
        if tag == 273:
            value = data_offset
        if typ == 3:
            out += struct.pack(bo + "HHIHH", tag, typ, 1, value, 0)
        else:
            out += struct.pack(bo + "HHII", tag, typ, 1, value)
    out += struct.pack(bo + "I", 0)
    dtype = bo + ("u2" if bit_depth == 16 else "u1")
    out += ints.astype(dtype).tobytes()
    return bytes(out)


# manifests

@dataclass(frozen=True)
class ManifestEntry:
    id: str
    gt_path: str
    pred_path: str


@dataclass(frozen=True)
class PairManifest:
    entries: tuple
    root: str | None = None

    def __len__(self):
        return len(self.entries)

    @property
    def ids(self):
        return [e.id for e in self.entries]

    def gt_images(self):
        return LazyImages([e.gt_path for e in self.entries])

    def pred_images(self):
        return LazyImages([e.pred_path for e in self.entries])


def load_manifest(path):
    """Parse a JSON-lines manifest; relative paths resolve against its directory.

    Each non-blank line is an object ``{"id": ..., "gt": ..., "pred": ...}``.
    """
    root = os.path.dirname(os.path.abspath(path))
    entries = []
    seen = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc.strerror}") from None
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"invalid JSON ({exc.msg})", n) from None
        if not isinstance(obj, dict):
            raise ManifestError("entry must be a JSON object", n)
        missing = [k for k in ("id", "gt", "pred") if k not in obj]
        if missing:
            raise ManifestError(f"missing field(s) {', '.join(missing)}", n)
        pid, gt, pred = obj["id"], obj["gt"], obj["pred"]
        if not isinstance(pid, (str, int)) or isinstance(pid, bool):
            raise ManifestError("id must be a string or integer", n)
        if not isinstance(gt, str) or not isinstance(pred, str):
            raise ManifestError("gt and pred must be path strings", n)
        pid = str(pid)
        if pid in seen:
            raise ManifestError(f"duplicate id {pid!r} (first on line {seen[pid]})", n)
        seen[pid] = n
        resolved = []
        for p in (gt, pred):
            full = p if os.path.isabs(p) else os.path.join(root, p)
            if not os.path.isfile(full):
                raise ManifestError(f"file not found: {full}", n)
            resolved.append(full)
        entries.append(ManifestEntry(pid, *resolved))
    return PairManifest(tuple(entries), root)


def write_manifest(entries, path):
    """Write ``(id, gt_path, pred_path)`` triples as a JSON-lines manifest."""
    root = os.path.dirname(os.path.abspath(path))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for pid, gt, pred in entries:
            rel = [os.path.relpath(os.path.abspath(p), root) for p in (gt, pred)]
            fh.write(json.dumps({"id": str(pid), "gt": rel[0], "pred": rel[1]}) + "\n")


class LazyImages(Sequence):
    """Read-only sequence of images decoded from disk on each access."""

    def __init__(self, paths):
        self.paths = list(paths)

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return LazyImages(self.paths[i])
        return load_image(self.paths[i])

    def bit_depth(self):
        """Common bit depth of the files, or None if unknown or mixed."""
        depths = {read_image(p).bit_depth for p in self.paths[:1]}
        return depths.pop() if len(depths) == 1 else None
