"""File-level stages shared by the CLI commands and the end-to-end run.

Every stage is a pure function of its inputs and seed; outputs are written
in canonical byte form so reruns reproduce identical files.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping

from .descriptor import DEFAULT_DIM, DEFAULT_TILES, dumps_descriptors, loads_descriptors, random_projector
from .errors import ArgumentError, DimensionMismatchError, FormatError
from .formats import (
    format_candidates,
    format_curve,
    format_ground_truth,
    format_key_values,
    format_submission,
    parse_candidates,
    parse_ground_truth,
    parse_submission,
    read_image_dir,
    sha256_file,
    write_image_dir,
)
from .imaging import Image, make_synthetic_dataset, make_training_images
from .learning.matcher import (
    DEFAULT_INIT_SCALE,
    DEFAULT_LR,
    TinyMatcherParams,
    dumps_matcher,
    loads_matcher,
    make_pair_examples,
    train_tiny_matcher,
)
from .learning.projector import dumps_projector, loads_projector, train_projector
from .metrics import micro_average_precision, pr_curve
from .pipeline import (
    METHODS,
    MatcherScorer,
    RetrievalScorer,
    extract_all,
    retrieve,
    score_candidates,
    select_best_per_query,
)
from .rng import Rng64, mix64

TRAIN_STREAM_TAG = 0x747261696E


def _write(path: Path, data: bytes | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    path.write_bytes(data)
    return path


def _manifest(command: str, params: Mapping[str, object], outputs: Mapping[str, Path], base: Path) -> str:
    items: dict[str, object] = {"command": command}
    items.update({f"config.{k}": v for k, v in params.items()})
    for name, path in outputs.items():
        path = Path(path)
        try:
            shown = path.relative_to(base).as_posix()
        except ValueError:
            shown = path.as_posix()
        items[f"output.{name}"] = shown
        items[f"sha256.{name}"] = sha256_file(path)
    return format_key_values(items)


# --- stages ---------------------------------------------------------------------------


def gen_data(out: Path, n_refs: int, n_pos: int, n_distractors: int, seed: int, n_train: int = 200) -> Path:
    """Write ``refs/``, ``queries/``, ``train/``, ``gt.csv`` and ``manifest.txt``."""
    out = Path(out)
    ds = make_synthetic_dataset(n_refs, n_pos, n_distractors, seed)
    write_image_dir(out / "refs", ds.refs)
    write_image_dir(out / "queries", ds.queries)
    if n_train:
        write_image_dir(out / "train", make_training_images(n_train, training_stream(seed)))
    gt_path = _write(out / "gt.csv", format_ground_truth(ds.ground_truth))
    params = dict(refs=n_refs, pos=n_pos, distractors=n_distractors, train=n_train, seed=seed)
    outputs = {"gt": gt_path}
    for sub in ("refs", "queries", "train"):
        for p in sorted((out / sub).glob("*.ppm")) if (out / sub).is_dir() else []:
            outputs[f"{sub}/{p.stem}"] = p
    return _write(out / "manifest.txt", _manifest("gen-data", params, outputs, out))


def training_stream(seed: int) -> Rng64:
    """Generator for training images, independent of the reference/query streams."""
    return Rng64(mix64(seed ^ TRAIN_STREAM_TAG))


def load_projector_file(path: Path):
    return loads_projector(Path(path).read_bytes())


def extract(
    images_dir: Path,
    out: Path,
    grid: int = 2,
    dim: int = DEFAULT_DIM,
    projector_path: Path | None = None,
    seed: int = 0,
    tiles: int = DEFAULT_TILES,
) -> Path:
    images = read_image_dir(images_dir)
    if projector_path is not None:
        projector = load_projector_file(projector_path)
        if projector.f != 6 * tiles * tiles:
            raise FormatError(f"projector expects {projector.f} features, tiles={tiles} gives {6 * tiles * tiles}")
        dim = projector.d
    else:
        projector = random_projector(dim, 6 * tiles * tiles, Rng64(seed))
    records = extract_all(images, projector, grid, tiles)
    return _write(out, dumps_descriptors(records, dim))


def retrieve_files(query_desc: Path, ref_desc: Path, out: Path, k: int = 10, methods=METHODS) -> Path:
    qdim, q_records = loads_descriptors(Path(query_desc).read_bytes())
    rdim, r_records = loads_descriptors(Path(ref_desc).read_bytes())
    if qdim != rdim:
        raise DimensionMismatchError(f"descriptor dimensions differ: queries {qdim}, references {rdim}")
    return _write(out, format_candidates(retrieve(q_records, r_records, k, methods)))


def training_images(data_dir: Path) -> dict[str, Image]:
    data_dir = Path(data_dir)
    sub = data_dir / "train" if (data_dir / "train").is_dir() else data_dir / "refs"
    return read_image_dir(sub)


def matcher_init(seed: int, init_scale: float = DEFAULT_INIT_SCALE) -> TinyMatcherParams:
    """Parameters ``train_matcher`` starts from for ``seed``."""
    return TinyMatcherParams.init(Rng64(seed).spawn().spawn(), scale=init_scale)


def train_matcher(
    data_dir: Path,
    out: Path,
    epochs: int = 30,
    lr: float = DEFAULT_LR,
    seed: int = 0,
    batch: int = 16,
    init_scale: float = DEFAULT_INIT_SCALE,
    log_out: Path | None = None,
) -> tuple[Path, object]:
    images = list(training_images(data_dir).values())
    if len(images) < 2:
        raise ArgumentError(f"need at least 2 training images in {data_dir}, found {len(images)}")
    rng = Rng64(seed)
    train_rng = rng.spawn()
    pair_rng = rng.spawn()
    examples = make_pair_examples(images, pair_rng)
    params, log = train_tiny_matcher(examples, epochs, lr, train_rng, batch, init_scale=init_scale)
    path = _write(out, dumps_matcher(params))
    _write(log_out or Path(str(out) + ".log.csv"), log.to_csv())
    return path, log


def train_projector_files(
    data_dir: Path,
    out: Path,
    epochs: int = 40,
    lr: float = 2.0,
    tau: float = 0.1,
    batch: int = 50,
    dim: int = DEFAULT_DIM,
    seed: int = 0,
    log_out: Path | None = None,
) -> tuple[Path, object]:
    images = list(training_images(data_dir).values())
    projector, log = train_projector(images, Rng64(seed), epochs, lr, tau, batch, dim)
    path = _write(out, dumps_projector(projector))
    _write(log_out or Path(str(out) + ".log.csv"), log.to_csv())
    return path, log


def rerank(
    candidates: Path, data_dir: Path, out: Path, matcher_path: Path | None = None, best_only: bool = True
) -> Path:
    cands = parse_candidates(Path(candidates).read_text())
    data_dir = Path(data_dir)
    queries = read_image_dir(data_dir / "queries")
    refs = read_image_dir(data_dir / "refs")
    if matcher_path is None:
        scorer = RetrievalScorer()
    else:
        scorer = MatcherScorer(loads_matcher(Path(matcher_path).read_bytes()))
    preds = score_candidates(cands, scorer, queries, refs)
    if best_only:
        preds = select_best_per_query(preds)
    return _write(out, format_submission(preds))


@dataclass
class EvalResult:
    micro_ap: float
    n_predictions: int
    n_correct: int
    n_ground_truth: int

    def to_text(self) -> str:
        return (
            f"micro_ap={self.micro_ap!r}\n"
            f"n_predictions={self.n_predictions}\n"
            f"n_correct={self.n_correct}\n"
            f"n_ground_truth={self.n_ground_truth}\n"
        )


def evaluate(submission: Path, gt_path: Path, curve_out: Path | None = None) -> EvalResult:
    preds = parse_submission(Path(submission).read_text())
    gt = parse_ground_truth(Path(gt_path).read_text())
    ap = micro_average_precision(preds, gt)
    if curve_out is not None:
        _write(curve_out, format_curve(pr_curve(preds, gt)))
    correct = sum((p.query_id, p.ref_id) in gt for p in preds)
    return EvalResult(ap, len(preds), correct, len(gt))


# --- end-to-end ---------------------------------------------------------------------------


def _parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ArgumentError(f"expected a boolean, got {value!r}")


@dataclass
class RunConfig:
    """Everything ``run_pipeline`` needs; the key=value config file maps onto these fields."""

    seed: int = 0
    k_per_method: int = 10
    grid: int = 2
    dim: int = DEFAULT_DIM
    matcher: str = "tiny"
    best_only: bool = True
    gen_data: bool = True
    data_dir: str = ""
    n_refs: int = 200
    n_pos: int = 80
    n_distractors: int = 20
    n_train: int = 400
    projector: str = "trained"
    projector_epochs: int = 40
    projector_lr: float = 2.0
    projector_batch: int = 50
    tau: float = 0.1
    matcher_epochs: int = 30
    matcher_lr: float = DEFAULT_LR
    matcher_batch: int = 16
    matcher_init_scale: float = DEFAULT_INIT_SCALE

    def __post_init__(self):
        if self.k_per_method < 1:
            raise ArgumentError("k_per_method must be >= 1")
        if self.grid < 2:
            raise ArgumentError("grid must be >= 2")
        if self.matcher not in ("tiny", "baseline"):
            raise ArgumentError(f"matcher must be 'tiny' or 'baseline', got {self.matcher!r}")
        if self.projector not in ("trained", "random"):
            raise ArgumentError(f"projector must be 'trained' or 'random', got {self.projector!r}")
        if not self.gen_data and not self.data_dir:
            raise ArgumentError("data_dir is required when gen_data is false")

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> RunConfig:
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ArgumentError(f"unknown config keys: {', '.join(unknown)}")
        kwargs: dict[str, object] = {}
        for key, raw in values.items():
            kind = known[key].type
            try:
                if kind in ("bool", bool):
                    kwargs[key] = _parse_bool(raw)
                elif kind in ("int", int):
                    kwargs[key] = int(raw)
                elif kind in ("float", float):
                    kwargs[key] = float(raw)
                else:
                    kwargs[key] = raw
            except ValueError:
                raise ArgumentError(f"config key {key}: cannot parse {raw!r}") from None
        return cls(**kwargs)

    def as_items(self) -> dict[str, object]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def run_pipeline(config: RunConfig, out: Path) -> tuple[EvalResult | None, dict[str, float]]:
    """gen-data (optional) -> train projector (optional) -> extract -> retrieve
    -> train matcher (optional) -> rerank -> evaluate, writing ``manifest.txt``.

    Stage timings go to ``report.txt``, not the manifest, so manifests stay
    byte-identical across reruns.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    timings: dict[str, float] = {}
    outputs: dict[str, Path] = {}

    def stage(name, fn, *args, **kwargs):
        t0 = time.perf_counter()
        result = fn(*args, **kwargs)
        timings[name] = (time.perf_counter() - t0) * 1000.0
        return result

    if config.gen_data:
        data = out / "data"
        stage(
            "gen_data",
            gen_data,
            data,
            config.n_refs,
            config.n_pos,
            config.n_distractors,
            config.seed,
            config.n_train,
        )
        outputs["data_manifest"] = data / "manifest.txt"
    else:
        data = Path(config.data_dir)

    projector_path = None
    if config.projector == "trained":
        projector_path, _ = stage(
            "train_projector",
            train_projector_files,
            data,
            out / "projector.iscp",
            config.projector_epochs,
            config.projector_lr,
            config.tau,
            config.projector_batch,
            config.dim,
            config.seed,
            out / "projector_log.csv",
        )
        outputs["projector"] = projector_path
        outputs["projector_log"] = out / "projector_log.csv"

    ref_desc = stage(
        "extract_refs", extract, data / "refs", out / "refs.iscd", config.grid, config.dim, projector_path, config.seed
    )
    query_desc = stage(
        "extract_queries",
        extract,
        data / "queries",
        out / "queries.iscd",
        config.grid,
        config.dim,
        projector_path,
        config.seed,
    )
    outputs["ref_descriptors"] = ref_desc
    outputs["query_descriptors"] = query_desc
    cands = stage("retrieve", retrieve_files, query_desc, ref_desc, out / "candidates.csv", config.k_per_method)
    outputs["candidates"] = cands

    matcher_path = None
    if config.matcher == "tiny":
        matcher_path, _ = stage(
            "train_matcher",
            train_matcher,
            data,
            out / "matcher.iscm",
            config.matcher_epochs,
            config.matcher_lr,
            config.seed,
            config.matcher_batch,
            config.matcher_init_scale,
            out / "matcher_log.csv",
        )
        outputs["matcher"] = matcher_path
        outputs["matcher_log"] = out / "matcher_log.csv"

    submission = stage(
        "rerank", rerank, cands, data, out / "submission.csv", matcher_path, config.best_only
    )
    outputs["submission"] = submission

    result = None
    gt_path = data / "gt.csv"
    if gt_path.is_file():
        result = stage("evaluate", evaluate, submission, gt_path, out / "pr_curve.csv")
        outputs["evaluation"] = _write(out / "evaluation.txt", result.to_text())
        outputs["pr_curve"] = out / "pr_curve.csv"

    _write(out / "manifest.txt", _manifest("pipeline", config.as_items(), outputs, out))
    _write(out / "report.txt", format_key_values({f"time_ms.{k}": f"{v:.1f}" for k, v in timings.items()}))
    return result, timings
