"""Images, PPM I/O, views, deterministic augmentation and synthetic data."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, FormatError, LengthError, SizeError
from .rng import Rng64

ID_PATTERN = re.compile(r"^[A-Za-z0-9_-]+$")

FULL_CODE = 0
CENTER_CODE = 255


class Image:
    """8-bit RGB image; ``pixels`` is a read-only (height, width, 3) uint8 array."""

    __slots__ = ("pixels",)

    def __init__(self, pixels: np.ndarray):
        arr = np.ascontiguousarray(pixels, dtype=np.uint8)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ArgumentError(f"expected (h, w, 3) pixels, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ArgumentError("image must be at least 1x1")
        arr.setflags(write=False)
        self.pixels = arr

    @classmethod
    def from_bytes(cls, width: int, height: int, data: bytes | list[int]) -> Image:
        buf = np.frombuffer(bytes(data), dtype=np.uint8)
        if buf.size != width * height * 3:
            raise LengthError(f"expected {width * height * 3} bytes, got {buf.size}")
        return cls(buf.reshape(height, width, 3))

    @classmethod
    def constant(cls, width: int, height: int, rgb: tuple[int, int, int]) -> Image:
        arr = np.empty((height, width, 3), dtype=np.uint8)
        arr[:] = rgb
        return cls(arr)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def tobytes(self) -> bytes:
        return self.pixels.tobytes()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Image):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(np.array_equal(self.pixels, other.pixels))

    def __hash__(self) -> int:
        return hash((self.width, self.height, self.tobytes()))

    def __repr__(self) -> str:
        return f"Image({self.width}x{self.height})"


@dataclass(frozen=True, order=True)
class ViewKind:
    """Which part of an image a descriptor was computed on.

    ``kind`` is ``"full"``, ``"crop"`` (grid cell ``row``, ``col``) or ``"center"``.
    """

    kind: str
    row: int = 0
    col: int = 0
    grid: int = 0

    def __post_init__(self):
        if self.kind == "crop":
            if self.grid < 2:
                raise ArgumentError("grid must be >= 2")
            if not (0 <= self.row < self.grid and 0 <= self.col < self.grid):
                raise ArgumentError(f"cell ({self.row}, {self.col}) outside grid {self.grid}")
            if self.grid * self.grid >= CENTER_CODE:
                raise ArgumentError("grid too large for one-byte view codes")
        elif self.kind not in ("full", "center"):
            raise ArgumentError(f"unknown view kind {self.kind!r}")

    @classmethod
    def full(cls) -> ViewKind:
        return cls("full")

    @classmethod
    def center(cls) -> ViewKind:
        return cls("center")

    @classmethod
    def crop(cls, row: int, col: int, grid: int) -> ViewKind:
        return cls("crop", row, col, grid)

    @property
    def code(self) -> int:
        if self.kind == "full":
            return FULL_CODE
        if self.kind == "center":
            return CENTER_CODE
        return 1 + self.row * self.grid + self.col

    @property
    def is_full(self) -> bool:
        return self.kind == "full"

    @classmethod
    def from_code(cls, code: int, grid: int = 0) -> ViewKind:
        """Inverse of ``code``; cell codes need ``grid`` to recover row/col.

        With ``grid=0`` a cell code decodes to a crop on the smallest square
        grid that can hold it, which preserves the code round trip.
        """
        if code == FULL_CODE:
            return cls.full()
        if code == CENTER_CODE:
            return cls.center()
        if not 0 < code < CENTER_CODE:
            raise FormatError(f"invalid view code {code}")
        if grid == 0:
            grid = max(2, math.isqrt(code - 1) + 1)
            while grid * grid < code:
                grid += 1
        if code > grid * grid:
            raise FormatError(f"view code {code} exceeds grid {grid}")
        row, col = divmod(code - 1, grid)
        return cls.crop(row, col, grid)


# --- PPM ---------------------------------------------------------------------

_WS = b" \t\n\r\x0b\x0c"


def _read_header_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        c = data[pos : pos + 1]
        if c in _WS:
            pos += 1
        elif c == b"#":
            while pos < n and data[pos : pos + 1] not in b"\r\n":
                pos += 1
        else:
            break
    start = pos
    while pos < n and data[pos : pos + 1] not in _WS and data[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("truncated PPM header")
    return data[start:pos], pos


def read_ppm(data: bytes) -> Image:
    """Decode a binary P6 PPM with maxval 255."""
    data = bytes(data)
    if data[:2] != b"P6":
        raise FormatError(f"bad PPM magic {data[:2]!r}")
    pos = 2
    if pos >= len(data) or data[pos : pos + 1] not in _WS:
        raise FormatError("missing whitespace after PPM magic")
    fields = []
    for _ in range(3):
        tok, pos = _read_header_token(data, pos)
        if not tok.isdigit():
            raise FormatError(f"non-numeric PPM header field {tok!r}")
        fields.append(int(tok))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"invalid PPM dimensions {width}x{height}")
    if maxval != 255:
        raise FormatError(f"unsupported PPM maxval {maxval}")
    if pos >= len(data) or data[pos : pos + 1] not in _WS:
        raise FormatError("missing whitespace before PPM pixel data")
    pos += 1
    payload = data[pos:]
    expected = width * height * 3
    if len(payload) < expected:
        raise LengthError(f"PPM pixel data truncated: {len(payload)} of {expected} bytes")
    if len(payload) > expected:
        raise LengthError(f"PPM has {len(payload) - expected} trailing bytes")
    return Image.from_bytes(width, height, payload)


def write_ppm(img: Image) -> bytes:
    return b"P6\n%d %d\n255\n" % (img.width, img.height) + img.tobytes()


# --- geometry ------------------------------------------------------------------


def cell_bounds(dim: int, grid: int) -> list[tuple[int, int]]:
    """Half-open [start, stop) spans of ``grid`` cells over ``dim`` pixels."""
    edges = [k * dim // grid for k in range(grid + 1)]
    return list(zip(edges[:-1], edges[1:]))


def crop(img: Image, x0: int, y0: int, w: int, h: int) -> Image:
    if w < 1 or h < 1 or x0 < 0 or y0 < 0 or x0 + w > img.width or y0 + h > img.height:
        raise SizeError(f"crop ({x0},{y0},{w},{h}) outside {img.width}x{img.height}")
    return Image(img.pixels[y0 : y0 + h, x0 : x0 + w])


def center_crop(img: Image) -> Image:
    w = max(1, img.width // 2)
    h = max(1, img.height // 2)
    return crop(img, (img.width - w) // 2, (img.height - h) // 2, w, h)


def crop_views(img: Image, grid: int = 2) -> list[tuple[ViewKind, Image]]:
    """Full view, then grid cells in row-major order, then the center crop."""
    if grid < 2:
        raise ArgumentError("grid must be >= 2")
    if img.width < grid or img.height < grid:
        raise SizeError(f"{img.width}x{img.height} image is smaller than grid {grid}")
    views = [(ViewKind.full(), img)]
    cols = cell_bounds(img.width, grid)
    for r, (y0, y1) in enumerate(cell_bounds(img.height, grid)):
        for c, (x0, x1) in enumerate(cols):
            views.append((ViewKind.crop(r, c, grid), crop(img, x0, y0, x1 - x0, y1 - y0)))
    views.append((ViewKind.center(), center_crop(img)))
    return views


def _axis_weights(src: int, dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pos = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0.0, src - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, src - 1)
    return lo, hi, pos - lo


def resize_bilinear(img: Image, w: int, h: int) -> Image:
    """Bilinear resampling with half-pixel centers and round-half-up."""
    if w < 1 or h < 1:
        raise ArgumentError(f"target size {w}x{h} must be positive")
    if (w, h) == (img.width, img.height):
        return img
    src = img.pixels.astype(np.float64)
    x0, x1, fx = _axis_weights(img.width, w)
    y0, y1, fy = _axis_weights(img.height, h)
    fx = fx[None, :, None]
    top = src[y0][:, x0] * (1.0 - fx) + src[y0][:, x1] * fx
    bottom = src[y1][:, x0] * (1.0 - fx) + src[y1][:, x1] * fx
    fy = fy[:, None, None]
    out = top * (1.0 - fy) + bottom * fy
    return Image(np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8))


def hflip(img: Image) -> Image:
    return Image(img.pixels[:, ::-1])


def concat_horizontal(left: Image, right: Image) -> Image:
    if left.height != right.height:
        raise ArgumentError("heights differ")
    return Image(np.concatenate([left.pixels, right.pixels], axis=1))


# --- augmentation ----------------------------------------------------------------


@dataclass(frozen=True)
class AugmentPolicy:
    """Per-step probabilities for ``augment``."""

    p_flip: float = 0.5
    p_crop: float = 1.0
    p_brightness: float = 1.0
    p_jitter: float = 1.0
    p_overlay: float = 0.3


DEFAULT_POLICY = AugmentPolicy()


@dataclass(frozen=True)
class AugmentRecord:
    """Applied augmentation steps as ``(name, params)`` in application order."""

    steps: tuple[tuple[str, tuple], ...] = ()

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.steps)

    @property
    def is_overlay(self) -> bool:
        return "overlay" in self.names


def _shift(img: Image, offsets: tuple[int, int, int]) -> Image:
    out = img.pixels.astype(np.int16) + np.asarray(offsets, dtype=np.int16)
    return Image(np.clip(out, 0, 255).astype(np.uint8))


def noise_image(width: int, height: int, rng: Rng64) -> Image:
    return Image(rng.bytes_array(width * height * 3).reshape(height, width, 3))


def augment(img: Image, rng: Rng64, policy: AugmentPolicy = DEFAULT_POLICY) -> tuple[Image, AugmentRecord]:
    """Seeded augmentation chain; output has the input's dimensions.

    Steps, drawn in this order: horizontal flip (p=0.5); crop of 60-100% of
    the area (aspect in [3/4, 4/3]) resized back; brightness shift in
    [-40, 40]; per-channel jitter in [-20, 20]; and with p=0.3 a paste of a
    30-70% scale copy onto a noise background.
    """
    if img.width < 8 or img.height < 8:
        raise SizeError("augment needs at least an 8x8 image")
    w, h = img.width, img.height
    steps: list[tuple[str, tuple]] = []

    if rng.bernoulli(policy.p_flip):
        img = hflip(img)
        steps.append(("hflip", ()))

    if rng.bernoulli(policy.p_crop):
        area = rng.uniform_range(0.6, 1.0)
        aspect = math.exp(rng.uniform_range(math.log(3 / 4), math.log(4 / 3)))
        cw = min(w, max(1, int(round(math.sqrt(area * aspect) * w))))
        ch = min(h, max(1, int(round(math.sqrt(area / aspect) * h))))
        cx = rng.randint(0, w - cw)
        cy = rng.randint(0, h - ch)
        img = resize_bilinear(crop(img, cx, cy, cw, ch), w, h)
        steps.append(("crop", (cx, cy, cw, ch)))

    if rng.bernoulli(policy.p_brightness):
        delta = rng.randint(-40, 40)
        img = _shift(img, (delta, delta, delta))
        steps.append(("brightness", (delta,)))

    if rng.bernoulli(policy.p_jitter):
        jitter = (rng.randint(-20, 20), rng.randint(-20, 20), rng.randint(-20, 20))
        img = _shift(img, jitter)
        steps.append(("jitter", jitter))

    if rng.bernoulli(policy.p_overlay):
        scale = rng.uniform_range(0.3, 0.7)
        pw = max(1, int(round(scale * w)))
        ph = max(1, int(round(scale * h)))
        px = rng.randint(0, w - pw)
        py = rng.randint(0, h - ph)
        canvas = np.array(noise_image(w, h, rng).pixels)
        canvas[py : py + ph, px : px + pw] = resize_bilinear(img, pw, ph).pixels
        img = Image(canvas)
        steps.append(("overlay", (px, py, pw, ph)))

    return img, AugmentRecord(tuple(steps))


# --- synthetic data -------------------------------------------------------------------


def procedural_image(rng: Rng64, width: int = 64, height: int = 64) -> Image:
    """Colored linear gradient, a few filled rectangles/ellipses, and mild noise."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    c0 = np.array([rng.randint(0, 255) for _ in range(3)], dtype=np.float64)
    c1 = np.array([rng.randint(0, 255) for _ in range(3)], dtype=np.float64)
    angle = rng.uniform_range(0.0, 2.0 * math.pi)
    t = (math.cos(angle) * (xx / max(width - 1, 1) - 0.5) + math.sin(angle) * (yy / max(height - 1, 1) - 0.5)) + 0.5
    t = np.clip(t, 0.0, 1.0)[..., None]
    canvas = c0 * (1.0 - t) + c1 * t

    for _ in range(rng.randint(3, 6)):
        color = np.array([rng.randint(0, 255) for _ in range(3)], dtype=np.float64)
        sw = rng.randint(width // 8, width // 2)
        sh = rng.randint(height // 8, height // 2)
        sx = rng.randint(0, width - sw)
        sy = rng.randint(0, height - sh)
        if rng.bernoulli(0.5):
            mask = (xx >= sx) & (xx < sx + sw) & (yy >= sy) & (yy < sy + sh)
        else:
            cx, cy = sx + sw / 2.0, sy + sh / 2.0
            mask = ((xx + 0.5 - cx) / (sw / 2.0)) ** 2 + ((yy + 0.5 - cy) / (sh / 2.0)) ** 2 <= 1.0
        canvas[mask] = color

    noise = rng.symmetric_array(width * height * 3, 10.0).reshape(height, width, 3)
    return Image(np.clip(np.floor(canvas + noise + 0.5), 0, 255).astype(np.uint8))


@dataclass
class SyntheticDataset:
    refs: dict[str, Image]
    queries: dict[str, Image]
    ground_truth: dict[str, str]
    query_records: dict[str, AugmentRecord] = field(default_factory=dict)

    @property
    def overlay_queries(self) -> list[str]:
        return [q for q, rec in self.query_records.items() if rec.is_overlay and q in self.ground_truth]


def make_synthetic_dataset(
    n_refs: int,
    n_pos_queries: int,
    n_distractors: int,
    seed: int | Rng64,
    size: int = 64,
) -> SyntheticDataset:
    """Procedural references, augmented positive queries, and fresh distractors.

    References are ``R<k>``; queries ``Q<k>`` are shuffled so positives and
    distractors interleave. Positive ``j`` copies reference ``j``.
    """
    if min(n_refs, n_pos_queries, n_distractors) < 0:
        raise ArgumentError("counts must be non-negative")
    if n_pos_queries > n_refs:
        raise ArgumentError(f"n_pos_queries ({n_pos_queries}) > n_refs ({n_refs})")
    rng = seed if isinstance(seed, Rng64) else Rng64(seed)
    ref_rng, query_rng, order_rng = rng.spawn(), rng.spawn(), rng.spawn()

    refs = {f"R{k}": procedural_image(ref_rng, size, size) for k in range(n_refs)}
    sources: list[tuple[str | None, Image, AugmentRecord]] = []
    for j in range(n_pos_queries):
        ref_id = f"R{j}"
        q, rec = augment(refs[ref_id], query_rng)
        sources.append((ref_id, q, rec))
    for _ in range(n_distractors):
        sources.append((None, procedural_image(query_rng, size, size), AugmentRecord()))

    queries: dict[str, Image] = {}
    gt: dict[str, str] = {}
    records: dict[str, AugmentRecord] = {}
    for k, idx in enumerate(order_rng.permutation(len(sources))):
        ref_id, q, rec = sources[idx]
        qid = f"Q{k}"
        queries[qid] = q
        records[qid] = rec
        if ref_id is not None:
            gt[qid] = ref_id
    return SyntheticDataset(refs, queries, gt, records)


def make_training_images(n: int, seed: int | Rng64, size: int = 64) -> dict[str, Image]:
    """Procedural training images ``T<k>``, drawn independently of any reference set."""
    rng = seed if isinstance(seed, Rng64) else Rng64(seed)
    return {f"T{k}": procedural_image(rng, size, size) for k in range(n)}


def grayscale(img: Image) -> np.ndarray:
    """(r + g + b) / 765 as a float64 (height, width) array in [0, 1]."""
    return img.pixels.astype(np.float64).sum(axis=2) / 765.0


def check_id(image_id: str) -> str:
    if not ID_PATTERN.match(image_id):
        raise ArgumentError(f"id {image_id!r} must match [A-Za-z0-9_-]+")
    return image_id
