import pytest

from iscmatch.errors import ArgumentError, FormatError, ValidationError
from iscmatch.formats import (
    format_candidates,
    format_ground_truth,
    format_submission,
    parse_candidates,
    parse_ground_truth,
    parse_key_values,
    parse_submission,
    read_image_dir,
    write_image_dir,
)
from iscmatch.imaging import Image
from iscmatch.metrics import GroundTruth, MatchPrediction
from iscmatch.pipeline import CandidatePair


def test_submission_round_trip_shortest_repr():
    preds = [MatchPrediction("Q1", "R2", 0.1), MatchPrediction("Q2", "R0", 1 / 3)]
    text = format_submission(preds)
    assert text == "query_id,reference_id,score\nQ1,R2,0.1\nQ2,R0,0.3333333333333333\n"
    assert parse_submission(text) == preds


def test_submission_errors():
    with pytest.raises(ValidationError, match="Q1,R2"):
        parse_submission("query_id,reference_id,score\nQ1,R2,0.5\nQ1,R2,0.4\n")
    with pytest.raises(FormatError):
        parse_submission("query,reference,score\n")
    with pytest.raises(FormatError):
        parse_submission("query_id,reference_id,score\nQ1,R2\n")
    with pytest.raises(FormatError):
        parse_submission("query_id,reference_id,score\nQ1,R2,abc\n")
    with pytest.raises(ArgumentError):
        parse_submission("query_id,reference_id,score\nQ 1,R2,0.5\n")


def test_ground_truth_round_trip():
    gt = GroundTruth({"Q3": "R1", "Q0": "R7"})
    text = format_ground_truth(gt)
    assert text == "query_id,reference_id\nQ3,R1\nQ0,R7\n"
    assert parse_ground_truth(text).pairs == gt.pairs


def test_candidates_round_trip():
    cands = [CandidatePair("Q1", "R1", 0.25, frozenset({"III", "I"})), CandidatePair("Q1", "R4", -0.5, frozenset({"II"}))]
    text = format_candidates(cands)
    assert text.splitlines()[1] == "Q1,R1,0.25,I|III"
    assert parse_candidates(text) == cands
    with pytest.raises(FormatError):
        parse_candidates("query_id,reference_id,similarity,methods\nQ1,R1,0.2,IV\n")


def test_key_values():
    assert parse_key_values("# note\na = 1\n\nb=x=y\n") == {"a": "1", "b": "x=y"}
    with pytest.raises(FormatError):
        parse_key_values("a=1\na=2\n")
    with pytest.raises(FormatError):
        parse_key_values("novalue\n")


def test_image_dir_numeric_order(tmp_path):
    imgs = {f"R{k}": Image.constant(2, 2, (k, k, k)) for k in (10, 2, 1)}
    write_image_dir(tmp_path, imgs)
    assert list(read_image_dir(tmp_path)) == ["R1", "R2", "R10"]
    with pytest.raises(FileNotFoundError):
        read_image_dir(tmp_path / "missing")
