"""Tile-statistic features, linear projection to unit descriptors, ISCD files."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable

import numpy as np

from .errors import DegenerateInputError, DimensionMismatchError, FormatError, LengthError, SizeError
from .imaging import Image, ViewKind, cell_bounds, check_id, crop_views
from .rng import Rng64

DEFAULT_DIM = 256
DEFAULT_TILES = 4
NORM_EPS = 1e-12
UNIT_TOL = 1e-6


def l2_normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.sqrt(np.sum(v * v)))
    if not norm > NORM_EPS:
        raise DegenerateInputError(f"cannot normalize vector with norm {norm:g}")
    return v / norm


def raw_features(img: Image, g: int = DEFAULT_TILES) -> np.ndarray:
    """Per-tile RGB means then RGB standard deviations, scaled by 1/255.

    Tiles are visited row-major; each contributes a block of six values.
    """
    if g < 1:
        raise SizeError("tile grid must be >= 1")
    if img.width < g or img.height < g:
        raise SizeError(f"{img.width}x{img.height} image is smaller than tile grid {g}")
    px = img.pixels.astype(np.float64) / 255.0
    out = np.empty(6 * g * g, dtype=np.float64)
    cols = cell_bounds(img.width, g)
    k = 0
    for y0, y1 in cell_bounds(img.height, g):
        for x0, x1 in cols:
            tile = px[y0:y1, x0:x1].reshape(-1, 3)
            out[k : k + 3] = tile.mean(axis=0)
            out[k + 3 : k + 6] = tile.std(axis=0)
            k += 6
    return out


@dataclass(frozen=True)
class Projector:
    """Linear map from raw features (length ``f``) to ``d``-dimensional embeddings."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
            raise DimensionMismatchError(f"projector must be a non-empty matrix, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise FormatError("projector has non-finite entries")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def d(self) -> int:
        return self.matrix.shape[0]

    @property
    def f(self) -> int:
        return self.matrix.shape[1]


def random_projector(d: int, f: int, rng: Rng64 | int) -> Projector:
    """Entries uniform on (-1, 1), filled row-major from the generator."""
    if d < 1 or f < 1:
        raise DimensionMismatchError("projector sizes must be >= 1")
    if not isinstance(rng, Rng64):
        rng = Rng64(rng)
    return Projector(rng.symmetric_array(d * f).reshape(d, f))


def embed(feat: np.ndarray, p: Projector) -> np.ndarray:
    feat = np.asarray(feat, dtype=np.float64)
    if feat.shape != (p.f,):
        raise DimensionMismatchError(f"feature length {feat.shape} does not match projector columns {p.f}")
    return l2_normalize(p.matrix @ feat)


def describe(img: Image, p: Projector, g: int = DEFAULT_TILES) -> np.ndarray:
    return embed(raw_features(img, g), p)


@dataclass(frozen=True)
class DescriptorRecord:
    image_id: str
    view: ViewKind
    descriptor: np.ndarray


def describe_views(
    image_id: str, img: Image, p: Projector, grid: int = 2, g: int = DEFAULT_TILES
) -> list[DescriptorRecord]:
    return [DescriptorRecord(image_id, view, describe(v_img, p, g)) for view, v_img in crop_views(img, grid)]


# --- ISCD file format --------------------------------------------------------------

ISCD_MAGIC = b"ISCD"
ISCD_VERSION = 1


def write_descriptors(records: Iterable[DescriptorRecord], fh: BinaryIO, dim: int | None = None) -> None:
    records = list(records)
    if dim is None:
        if not records:
            raise DimensionMismatchError("dim is required for an empty descriptor file")
        dim = records[0].descriptor.shape[0]
    fh.write(ISCD_MAGIC + struct.pack("<IIQ", ISCD_VERSION, dim, len(records)))
    for rec in records:
        if rec.descriptor.shape != (dim,):
            raise DimensionMismatchError(f"{rec.image_id}: descriptor length {rec.descriptor.shape[0]} != {dim}")
        raw_id = check_id(rec.image_id).encode("utf-8")
        fh.write(struct.pack("<H", len(raw_id)) + raw_id + struct.pack("<B", rec.view.code))
        fh.write(np.asarray(rec.descriptor, dtype="<f4").tobytes())


def dumps_descriptors(records: Iterable[DescriptorRecord], dim: int | None = None) -> bytes:
    import io

    buf = io.BytesIO()
    write_descriptors(records, buf, dim)
    return buf.getvalue()


def loads_descriptors(data: bytes, grid: int = 0) -> tuple[int, list[DescriptorRecord]]:
    """Parse an ISCD blob; returns ``(dim, records)``."""
    if len(data) < 20 or data[:4] != ISCD_MAGIC:
        raise FormatError("not an ISCD descriptor file")
    version, dim, count = struct.unpack_from("<IIQ", data, 4)
    if version != ISCD_VERSION:
        raise FormatError(f"unsupported ISCD version {version}")
    pos = 20
    records = []
    for _ in range(count):
        if pos + 2 > len(data):
            raise LengthError("ISCD file truncated")
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        end = pos + n + 1 + 4 * dim
        if end > len(data):
            raise LengthError("ISCD file truncated")
        image_id = data[pos : pos + n].decode("utf-8")
        code = data[pos + n]
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=pos + n + 1).astype(np.float64)
        records.append(DescriptorRecord(image_id, ViewKind.from_code(code, grid), vec))
        pos = end
    if pos != len(data):
        raise LengthError(f"{len(data) - pos} trailing bytes in ISCD file")
    return dim, records
