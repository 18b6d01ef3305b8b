"""Attention-map data model, binary raster formats, and dataset manifests.

Attention maps travel as ATNM files: magic ``ATNM``, u32 little-endian
version (currently 1), u32 width, u32 height, u8 normalized flag, then
``width * height`` little-endian float64 values in row-major order. Frames
are 8-bit binary PPM (P6); grayscale exports are binary PGM (P5).

A manifest is tab-separated text, one sample per line::

    <split>\\t<frame path>\\t<label paths ;-separated>\\t<mask path|->\\t<gt path|->

Paths are relative to the manifest's directory.
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    BadMagicError,
    DataError,
    DegenerateMapError,
    InvalidMapError,
    NanPayloadError,
    ShapeError,
    TruncatedFileError,
)

ATNM_MAGIC = b"ATNM"
ATNM_VERSION = 1
NORMALIZED_TOL = 1e-6

KNOWN_CLASSES = ("pedestrian", "bicycle", "motorcycle", "traffic_light", "stop_sign")
DEFAULT_KEEP_CLASSES = frozenset(KNOWN_CLASSES)


@dataclass(frozen=True)
class AttentionMap:
    """Single-channel nonnegative raster, optionally a spatial distribution."""

    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        arr = np.ascontiguousarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", arr)
        if arr.ndim != 2:
            raise InvalidMapError(f"attention map must be 2-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidMapError("attention map contains non-finite values")
        if np.any(arr < 0):
            raise InvalidMapError("attention map contains negative values")
        if self.normalized:
            total = arr.sum()
            if abs(total - 1.0) > NORMALIZED_TOL:
                raise InvalidMapError(
                    f"map flagged normalized but sums to {total!r}"
                )

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class KnowledgeMask:
    """Binary instance/segmentation mask with class provenance."""

    values: np.ndarray
    classes: tuple = ()

    def __post_init__(self):
        arr = np.ascontiguousarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "classes", tuple(self.classes))
        if arr.ndim != 2:
            raise InvalidMapError(f"mask must be 2-D, got shape {arr.shape}")
        if not np.all((arr == 0.0) | (arr == 1.0)):
            raise InvalidMapError("mask values must be exactly 0 or 1")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class PseudoLabelSet:
    """Ordered collection of source-tagged attention maps for one frame."""

    source_names: tuple
    maps: list
    embedded: bool = False

    def __post_init__(self):
        self.source_names = tuple(self.source_names)
        if len(self.source_names) != len(self.maps) or not self.maps:
            raise InvalidMapError("pseudo-label set needs >= 1 named map")
        dims = {(m.height, m.width) for m in self.maps}
        if len(dims) != 1:
            raise ShapeError(f"pseudo-label maps disagree on dimensions: {dims}")

    def __len__(self) -> int:
        return len(self.maps)


@dataclass
class SampleRecord:
    """One frame with its pseudo-labels and optional mask / ground truth."""

    frame: np.ndarray  # [3, H, W] floats in [0, 1]
    pseudo_labels: PseudoLabelSet
    mask: Optional[KnowledgeMask] = None
    ground_truth: Optional[AttentionMap] = None

    def __post_init__(self):
        self.frame = np.ascontiguousarray(self.frame, dtype=np.float64)
        if self.frame.ndim != 3 or self.frame.shape[0] != 3:
            raise ShapeError(f"frame must be [3,H,W], got {self.frame.shape}")
        h, w = self.frame.shape[1:]
        rasters = list(self.pseudo_labels.maps)
        if self.mask is not None:
            rasters.append(self.mask)
        if self.ground_truth is not None:
            rasters.append(self.ground_truth)
        for r in rasters:
            if (r.height, r.width) != (h, w):
                raise ShapeError(
                    f"raster {r.height}x{r.width} does not match frame {h}x{w}"
                )


def normalize_spatial(amap: AttentionMap) -> AttentionMap:
    """Scale values to sum to one. Already-normalized maps pass through."""
    if amap.normalized:
        return amap
    total = amap.values.sum()
    if total <= 0:
        raise DegenerateMapError("cannot normalize an all-zero map")
    return AttentionMap(amap.values / total, normalized=True)


# ---------------------------------------------------------------------------
# ATNM binary format
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIIIB")


def raster_to_atnm_bytes(values: np.ndarray, normalized: bool) -> bytes:
    values = np.ascontiguousarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ShapeError(f"ATNM rasters are 2-D, got shape {values.shape}")
    header = _HEADER.pack(ATNM_MAGIC, ATNM_VERSION, values.shape[1],
                          values.shape[0], 1 if normalized else 0)
    return header + values.astype("<f8").tobytes()


def atnm_bytes_to_raster(blob: bytes) -> tuple:
    """Decode ATNM bytes into (values array, normalized flag)."""
    if len(blob) < 4:
        raise TruncatedFileError("file shorter than the ATNM magic")
    if blob[:4] != ATNM_MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {ATNM_MAGIC!r}")
    if len(blob) < _HEADER.size:
        raise TruncatedFileError("truncated ATNM header")
    _, version, width, height, flag = _HEADER.unpack_from(blob)
    if version != ATNM_VERSION:
        raise DataError(f"unsupported ATNM version {version}")
    expected = _HEADER.size + width * height * 8
    if len(blob) < expected:
        raise TruncatedFileError(
            f"ATNM payload truncated: {len(blob)} bytes, expected {expected}"
        )
    if len(blob) > expected:
        raise DataError(f"trailing bytes after ATNM payload ({len(blob) - expected})")
    values = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size).reshape(height, width)
    if not np.all(np.isfinite(values)):
        raise NanPayloadError("ATNM payload contains non-finite values")
    return values.astype(np.float64), bool(flag)


def save_raster(values: np.ndarray, path, normalized: bool = False) -> None:
    """Write any 2-D float raster (no nonnegativity constraint) as ATNM."""
    Path(path).write_bytes(raster_to_atnm_bytes(values, normalized))


def load_raster(path) -> tuple:
    return atnm_bytes_to_raster(Path(path).read_bytes())


def save_map(amap: AttentionMap, path) -> None:
    """Write an attention map as ATNM; the round trip is bit-exact."""
    save_raster(amap.values, path, normalized=amap.normalized)


def load_map(path) -> AttentionMap:
    values, normalized = load_raster(path)
    return AttentionMap(values, normalized=normalized)


def load_mask(path, classes: tuple = ()) -> KnowledgeMask:
    """Read a mask raster (ATNM or PGM), thresholding at 0.5."""
    p = Path(path)
    if p.suffix.lower() == ".pgm":
        gray = read_pnm(p)
        values = (gray >= 0.5).astype(np.float64)
    else:
        raw, _ = load_raster(p)
        values = (raw >= 0.5).astype(np.float64)
    return KnowledgeMask(values, classes=classes)


# ---------------------------------------------------------------------------
# PGM / PPM
# ---------------------------------------------------------------------------

def export_pgm(amap: AttentionMap, path) -> None:
    """Write a min-max scaled 8-bit binary PGM; constant maps export as
    mid-gray 128."""
    v = amap.values
    lo, hi = float(v.min()), float(v.max())
    if hi > lo:
        scaled = np.rint((v - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        scaled = np.full(v.shape, 128, dtype=np.uint8)
    header = f"P5\n{amap.width} {amap.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + scaled.tobytes())


def write_ppm(frame: np.ndarray, path) -> None:
    """Write a [3,H,W] float frame in [0,1] as 8-bit binary PPM."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3 or frame.shape[0] != 3:
        raise ShapeError(f"PPM frames are [3,H,W], got {frame.shape}")
    quant = np.rint(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = frame.shape[1:]
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + quant.transpose(1, 2, 0).tobytes())


def _parse_pnm_tokens(blob: bytes, count: int) -> tuple:
    """Return ``count`` whitespace-separated header tokens and the offset
    just past the single whitespace byte that terminates the header."""
    tokens = []
    i = 0
    while len(tokens) < count:
        if i >= len(blob):
            raise TruncatedFileError("truncated PNM header")
        ch = blob[i : i + 1]
        if ch == b"#":
            while i < len(blob) and blob[i : i + 1] != b"\n":
                i += 1
            i += 1
        elif ch.isspace():
            i += 1
        else:
            start = i
            while i < len(blob) and not blob[i : i + 1].isspace():
                i += 1
            tokens.append(blob[start:i])
    if i >= len(blob) or not blob[i : i + 1].isspace():
        raise TruncatedFileError("PNM header not terminated")
    return tokens, i + 1


def read_pnm(path) -> np.ndarray:
    """Read binary PGM (-> [H,W]) or PPM (-> [3,H,W]) into floats in [0,1]."""
    blob = Path(path).read_bytes()
    if blob[:2] not in (b"P5", b"P6"):
        raise BadMagicError(f"not a binary PGM/PPM: magic {blob[:2]!r}")
    tokens, offset = _parse_pnm_tokens(blob, 4)
    kind = tokens[0]
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise DataError(f"bad PNM header in {path}") from exc
    if maxval <= 0 or maxval > 255:
        raise DataError(f"unsupported PNM maxval {maxval}")
    channels = 3 if kind == b"P6" else 1
    need = w * h * channels
    payload = np.frombuffer(blob, dtype=np.uint8, offset=offset)
    if payload.size < need:
        raise TruncatedFileError(f"PNM payload truncated: {payload.size} < {need}")
    payload = payload[:need].astype(np.float64) / maxval
    if channels == 1:
        return payload.reshape(h, w)
    return np.ascontiguousarray(payload.reshape(h, w, 3).transpose(2, 0, 1))


def read_frame(path) -> np.ndarray:
    """Load a frame raster as [3,H,W]; grayscale inputs are replicated."""
    arr = read_pnm(path)
    if arr.ndim == 2:
        arr = np.stack([arr, arr, arr])
    return arr


# ---------------------------------------------------------------------------
# Manifests and datasets
# ---------------------------------------------------------------------------

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ManifestEntry:
    split: str
    frame: str
    labels: tuple
    mask: Optional[str]
    gt: Optional[str]


@dataclass
class Manifest:
    """Ordered sample records with a base directory for relative paths."""

    base_dir: Path
    entries: list = field(default_factory=list)

    @staticmethod
    def parse_line(line: str) -> ManifestEntry:
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 5:
            raise DataError(f"manifest line needs 5 tab-separated fields: {line!r}")
        split, frame, labels, mask, gt = parts
        if split not in SPLITS:
            raise DataError(f"unknown split {split!r} (expected one of {SPLITS})")
        label_paths = tuple(p for p in labels.split(";") if p)
        if not label_paths:
            raise DataError(f"manifest line has no pseudo-label paths: {line!r}")
        return ManifestEntry(
            split=split,
            frame=frame,
            labels=label_paths,
            mask=None if mask == "-" else mask,
            gt=None if gt == "-" else gt,
        )

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"manifest not found: {path}")
        entries = []
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            entry = cls.parse_line(line)
            for rel in (entry.frame, *entry.labels, entry.mask, entry.gt):
                if rel is not None and not (path.parent / rel).is_file():
                    raise DataError(f"manifest references missing file: {rel}")
            entries.append(entry)
        return cls(base_dir=path.parent, entries=entries)

    def save(self, path) -> None:
        lines = []
        for e in self.entries:
            lines.append("\t".join([
                e.split,
                e.frame,
                ";".join(e.labels),
                e.mask if e.mask is not None else "-",
                e.gt if e.gt is not None else "-",
            ]))
        Path(path).write_text("\n".join(lines) + "\n")

    def split(self, name: str, stride: int = 1) -> list:
        """Entries of one split, subsampled by taking every stride-th."""
        if stride < 1:
            raise DataError(f"manifest stride must be >= 1, got {stride}")
        chosen = [e for e in self.entries if e.split == name]
        return chosen[::stride]

    def n_sources(self) -> int:
        counts = {len(e.labels) for e in self.entries}
        if len(counts) != 1:
            raise DataError(f"entries disagree on pseudo-label count: {sorted(counts)}")
        return counts.pop()


class SampleSet:
    """Disk-backed access to one split's samples.

    Ground-truth reads are counted (``gt_reads``) so tests can prove the
    training loop never touches them.
    """

    def __init__(self, base_dir, entries: Sequence[ManifestEntry]):
        self.base_dir = Path(base_dir)
        self.entries = list(entries)
        self.gt_reads = 0

    def __len__(self) -> int:
        return len(self.entries)

    def sample_id(self, i: int) -> str:
        return Path(self.entries[i].frame).stem

    def frame(self, i: int) -> np.ndarray:
        return read_frame(self.base_dir / self.entries[i].frame)

    def labels(self, i: int) -> PseudoLabelSet:
        entry = self.entries[i]
        maps = [load_map(self.base_dir / p) for p in entry.labels]
        names = tuple(f"s{k + 1}" for k in range(len(maps)))
        return PseudoLabelSet(source_names=names, maps=maps)

    def mask(self, i: int) -> Optional[KnowledgeMask]:
        entry = self.entries[i]
        if entry.mask is None:
            return None
        return load_mask(self.base_dir / entry.mask)

    def has_ground_truth(self, i: int) -> bool:
        return self.entries[i].gt is not None

    def ground_truth(self, i: int) -> AttentionMap:
        entry = self.entries[i]
        if entry.gt is None:
            raise DataError(f"sample {self.sample_id(i)} has no ground truth")
        self.gt_reads += 1
        return load_map(self.base_dir / entry.gt)
