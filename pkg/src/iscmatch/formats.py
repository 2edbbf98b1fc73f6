"""CSV and key=value text formats, dataset directories, checksums.

CSVs are unquoted; ids are restricted to ``[A-Za-z0-9_-]``. Floats are
written with ``repr``, the shortest string that round-trips.
"""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import FormatError, ValidationError
from .imaging import Image, check_id, read_ppm, write_ppm
from .metrics import GroundTruth, MatchPrediction, PRPoint
from .pipeline import METHODS, CandidatePair

GT_HEADER = "query_id,reference_id"
SUBMISSION_HEADER = "query_id,reference_id,score"
CANDIDATES_HEADER = "query_id,reference_id,similarity,methods"
CURVE_HEADER = "rank,score,precision,recall"


def _rows(text: str, header: str, ncols: int, what: str) -> list[list[str]]:
    lines = text.splitlines()
    if not lines or lines[0].strip() != header:
        raise FormatError(f"{what}: expected header {header!r}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cols = line.split(",")
        if len(cols) != ncols:
            raise FormatError(f"{what} line {lineno}: expected {ncols} columns, got {len(cols)}")
        rows.append(cols)
    return rows


def _float(s: str, what: str) -> float:
    try:
        return float(s)
    except ValueError:
        raise FormatError(f"{what}: bad number {s!r}") from None


def format_ground_truth(gt: GroundTruth | Mapping[str, str]) -> str:
    items = gt if isinstance(gt, GroundTruth) else gt.items()
    return GT_HEADER + "\n" + "".join(f"{check_id(q)},{check_id(r)}\n" for q, r in items)


def parse_ground_truth(text: str) -> GroundTruth:
    return GroundTruth((check_id(q), check_id(r)) for q, r in _rows(text, GT_HEADER, 2, "ground truth"))


def format_submission(preds: Iterable[MatchPrediction]) -> str:
    return SUBMISSION_HEADER + "\n" + "".join(
        f"{check_id(p.query_id)},{check_id(p.ref_id)},{p.score!r}\n" for p in preds
    )


def parse_submission(text: str) -> list[MatchPrediction]:
    preds = []
    seen = set()
    for q, r, s in _rows(text, SUBMISSION_HEADER, 3, "submission"):
        if (q, r) in seen:
            raise ValidationError(f"duplicate prediction {q},{r}")
        seen.add((q, r))
        preds.append(MatchPrediction(check_id(q), check_id(r), _float(s, "submission")))
    return preds


def format_candidates(cands: Iterable[CandidatePair]) -> str:
    return CANDIDATES_HEADER + "\n" + "".join(
        f"{c.query_id},{c.ref_id},{c.retrieval_similarity!r},{c.methods_tag}\n" for c in cands
    )


def parse_candidates(text: str) -> list[CandidatePair]:
    out = []
    for q, r, s, tag in _rows(text, CANDIDATES_HEADER, 4, "candidates"):
        methods = tag.split("|")
        if not methods or any(m not in METHODS for m in methods):
            raise FormatError(f"candidates: bad methods tag {tag!r}")
        out.append(CandidatePair(check_id(q), check_id(r), _float(s, "candidates"), frozenset(methods)))
    return out


def format_curve(curve: Sequence[PRPoint]) -> str:
    return CURVE_HEADER + "\n" + "".join(f"{p.rank},{p.score!r},{p.precision!r},{p.recall!r}\n" for p in curve)


def format_key_values(items: Mapping[str, object]) -> str:
    return "".join(f"{k}={v}\n" for k, v in items.items())


def parse_key_values(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise FormatError(f"line {lineno}: empty key")
        if key in out:
            raise FormatError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def sha256_tree(root: Path) -> str:
    """Digest over relative paths and contents of every file below ``root``."""
    root = Path(root)
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(path.relative_to(root).as_posix().encode() + b"\0")
        h.update(hashlib.sha256(path.read_bytes()).digest())
    return h.hexdigest()


def _id_sort_key(image_id: str) -> tuple:
    # R10 after R9: numeric suffix order for generated ids, plain text otherwise.
    head = image_id.rstrip("0123456789")
    tail = image_id[len(head) :]
    return (head, int(tail) if tail else -1, image_id)


def read_image_dir(directory: Path) -> dict[str, Image]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"image directory {directory} does not exist")
    paths = sorted(directory.glob("*.ppm"), key=lambda p: _id_sort_key(p.stem))
    return {check_id(p.stem): read_ppm(p.read_bytes()) for p in paths}


def write_image_dir(directory: Path, images: Mapping[str, Image]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for image_id, img in images.items():
        (directory / f"{check_id(image_id)}.ppm").write_bytes(write_ppm(img))
