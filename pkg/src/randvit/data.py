"""Dataset plumbing: normalization, resizing, a binary corpus format, a
synthetic glyph task, and portable image file IO.

The synthetic task places one of five 6x6 binary glyphs at a uniformly
random pixel position on a noisy background.  Because positions are not
aligned to any patch grid, fixed tokenization usually splits a glyph across
patches, while random tokenization has a decent chance of centering it in
one token; that makes the task a useful desk-scale probe for the sampler
comparison.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadImage, SchemaMismatch, TruncatedFile
from .sampling import _PURPOSE_DATA, _gather_bilinear, stream

GLYPH_SIZE = 6
GLYPH_CLASSES = 5
_SPLIT_IDS = {"train": 0, "val": 1}

# five distinct binary shapes: ring, plus, X, T, checker
_GLYPH_ROWS = [
    ["111111", "100001", "100001", "100001", "100001", "111111"],
    ["001100", "001100", "111111", "111111", "001100", "001100"],
    ["100001", "010010", "001100", "001100", "010010", "100001"],
    ["111111", "111111", "001100", "001100", "001100", "001100"],
    ["110011", "110011", "001100", "001100", "110011", "110011"],
]

GLYPHS = np.array([[[int(ch) for ch in row] for row in g] for g in _GLYPH_ROWS],
                  dtype=np.float32)


@dataclass
class Dataset:
    images: np.ndarray   # (n, C, H, W)
    labels: np.ndarray   # (n,) int64 in [0, n_classes)
    n_classes: int
    split: str

    def __len__(self) -> int:
        return self.images.shape[0]


def normalize(img: np.ndarray) -> np.ndarray:
    """Map byte values 0..255 to [-1, 1] via v/127.5 - 1."""
    return (np.asarray(img, dtype=np.float32) / np.float32(127.5)) - np.float32(1.0)


def denormalize(img: np.ndarray) -> np.ndarray:
    """Inverse of normalize, rounded back to bytes."""
    v = (np.asarray(img, dtype=np.float64) + 1.0) * 127.5
    return np.clip(np.rint(v), 0, 255).astype(np.uint8)


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Corner-aligned bilinear resize of a float image (C, H, W).

    Same-size calls return a bit-identical copy.  A target extent of 1
    samples the center of that axis.
    """
    if img.ndim != 3:
        raise ValueError(f"expected (C, H, W) image, got shape {img.shape}")
    if not np.issubdtype(img.dtype, np.floating):
        raise ValueError("resize expects a float image; normalize first")
    if height < 1 or width < 1:
        raise ValueError("target size must be >= 1")
    c, h, w = img.shape
    if (height, width) == (h, w):
        return img.copy()
    ys = (np.arange(height, dtype=np.float64) * ((h - 1) / (height - 1))
          if height > 1 else np.array([(h - 1) / 2.0]))
    xs = (np.arange(width, dtype=np.float64) * ((w - 1) / (width - 1))
          if width > 1 else np.array([(w - 1) / 2.0]))
    yy = np.minimum(ys, h - 1)[:, None] + np.zeros((1, width))
    xx = np.minimum(xs, w - 1)[None, :] + np.zeros((height, 1))
    out = _gather_bilinear(img.astype(np.float64, copy=False), yy, xx)
    return out.astype(img.dtype)


# ---------------------------------------------------------------------------
# binary corpus
#
# 12-byte header, little-endian:
#   0..3   magic b"IMC1" (format version 1 baked into the magic)
#   4      channels C, u8
#   5..6   height H, u16
#   7..8   width W, u16
#   9..10  class count K, u16
#   11     reserved, must be 0
# followed by records of 1 label byte + C*H*W pixel bytes (c, y, x order).
# ---------------------------------------------------------------------------

CORPUS_MAGIC = b"IMC1"
_HEADER = np.dtype([("magic", "S4"), ("channels", "u1"), ("height", "<u2"),
                    ("width", "<u2"), ("classes", "<u2"), ("reserved", "u1")])


def write_binary_corpus(path: str | Path, images: np.ndarray, labels: np.ndarray,
                        n_classes: int) -> None:
    """Serialize byte images (n, C, H, W) uint8 + labels into the corpus format."""
    images = np.asarray(images)
    if images.dtype != np.uint8:
        raise ValueError(f"corpus stores raw bytes; got dtype {images.dtype}")
    labels = np.asarray(labels)
    n, c, h, w = images.shape
    header = np.zeros(1, dtype=_HEADER)
    header["magic"] = CORPUS_MAGIC
    header["channels"] = c
    header["height"] = h
    header["width"] = w
    header["classes"] = n_classes
    with open(path, "wb") as f:
        f.write(header.tobytes())
        for i in range(n):
            f.write(bytes([int(labels[i])]))
            f.write(images[i].tobytes())


def load_binary_corpus(path: str | Path, split: str = "train") -> Dataset:
    """Read a corpus file into a Dataset of raw byte images.

    Raises SchemaMismatch for a bad header or invalid labels and
    TruncatedFile when the payload ends mid-record.
    """
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.itemsize:
        raise SchemaMismatch(f"{path}: shorter than the {_HEADER.itemsize}-byte header")
    header = np.frombuffer(raw[:_HEADER.itemsize], dtype=_HEADER)[0]
    if bytes(header["magic"]) != CORPUS_MAGIC:
        raise SchemaMismatch(f"{path}: bad magic {bytes(header['magic'])!r}")
    if header["reserved"] != 0:
        raise SchemaMismatch(f"{path}: reserved header byte is non-zero")
    c, h, w, k = (int(header["channels"]), int(header["height"]),
                  int(header["width"]), int(header["classes"]))
    if min(c, h, w, k) == 0:
        raise SchemaMismatch(f"{path}: zero-sized dimension in header")
    payload = raw[_HEADER.itemsize:]
    record = 1 + c * h * w
    n, leftover = divmod(len(payload), record)
    if leftover:
        raise TruncatedFile(
            f"{path}: {len(payload)} payload bytes is not a multiple of the "
            f"{record}-byte record")
    body = np.frombuffer(payload, dtype=np.uint8).reshape(n, record) if n else \
        np.zeros((0, record), dtype=np.uint8)
    labels = body[:, 0].astype(np.int64)
    if n and labels.max() >= k:
        raise SchemaMismatch(f"{path}: label {labels.max()} >= class count {k}")
    images = body[:, 1:].reshape(n, c, h, w).copy()
    return Dataset(images=images, labels=labels, n_classes=k, split=split)


def synth_glyphs(n: int, seed: int, split: str = "train",
                 height: int = 64, width: int = 64) -> Dataset:
    """Generate n labeled glyph images, already normalized to [-1, 1].

    Labels cycle through the K classes, so any n divisible by K is exactly
    balanced.  Every image gets its own counter-based stream keyed by
    (seed, split, index): datasets are bit-reproducible and a shorter run
    is a prefix of a longer one.
    """
    if n < GLYPH_CLASSES:
        raise ValueError(f"need at least {GLYPH_CLASSES} samples, got {n}")
    if split not in _SPLIT_IDS:
        raise ValueError(f"split must be one of {sorted(_SPLIT_IDS)}, got {split!r}")
    g = GLYPH_SIZE
    images = np.empty((n, 1, height, width), dtype=np.float32)
    labels = (np.arange(n) % GLYPH_CLASSES).astype(np.int64)
    for i in range(n):
        rng = stream(seed, _PURPOSE_DATA, _SPLIT_IDS[split], i)
        top = int(rng.integers(0, height - g + 1))
        left = int(rng.integers(0, width - g + 1))
        bg = np.clip(rng.normal(0.0, 0.1, size=(height, width)), -1.0, 1.0)
        img = bg.astype(np.float32)
        window = img[top:top + g, left:left + g]
        mask = GLYPHS[labels[i]] > 0
        window[mask] = 1.0
        images[i, 0] = img
    return Dataset(images=images, labels=labels, n_classes=GLYPH_CLASSES, split=split)


# ---------------------------------------------------------------------------
# portable image files (binary PGM "P5" and PPM "P6", maxval 255)
# ---------------------------------------------------------------------------

def read_pnm(path: str | Path) -> np.ndarray:
    """Read a binary PGM/PPM file into a (C, H, W) uint8 array."""
    raw = Path(path).read_bytes()
    if raw[:2] not in (b"P5", b"P6"):
        raise BadImage(f"{path}: not a binary PGM/PPM file")
    channels = 1 if raw[:2] == b"P5" else 3
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":  # comment runs to end of line
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        token = raw[start:pos]
        if not token.isdigit():
            raise BadImage(f"{path}: malformed header token {token!r}")
        fields.append(int(token))
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise BadImage(f"{path}: only maxval 255 is supported, got {maxval}")
    need = width * height * channels
    data = raw[pos:pos + need]
    if len(data) < need:
        raise BadImage(f"{path}: expected {need} pixel bytes, found {len(data)}")
    img = np.frombuffer(data, dtype=np.uint8).reshape(height, width, channels)
    return np.ascontiguousarray(np.moveaxis(img, -1, 0))


def write_pnm(path: str | Path, img: np.ndarray) -> None:
    """Write a (1, H, W) or (3, H, W) array as binary PGM/PPM.

    Float inputs are interpreted as [0, 1] intensities; everything else
    must already be uint8.
    """
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"expected (1|3, H, W), got shape {img.shape}")
    if np.issubdtype(img.dtype, np.floating):
        img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    c, h, w = img.shape
    magic = b"P5" if c == 1 else b"P6"
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(np.moveaxis(img, 0, -1)).tobytes())
