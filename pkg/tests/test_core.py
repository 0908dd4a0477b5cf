import json
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from videotriage.core import (
    DatasetError,
    LabeledExample,
    ModelOutput,
    NotNormalizedError,
    OutOfRangeError,
    ProbVector,
    ProbVectorError,
    TooShortError,
    TriageError,
    VideoItem,
    example_from_dict,
    example_to_dict,
    read_dataset,
    validate_prob_vector,
    write_dataset,
)


def test_prob_vector_basic():
    p = ProbVector((0.2, 0.8))
    assert len(p) == 2
    assert p[1] == 0.8
    assert list(p) == [0.2, 0.8]
    assert p.positive == 0.8


def test_prob_vector_multiclass():
    p = ProbVector((0.1, 0.2, 0.3, 0.4))
    assert len(p) == 4
    assert p.positive == 0.2


def test_prob_vector_too_short():
    with pytest.raises(TooShortError):
        ProbVector((1.0,))
    with pytest.raises(TooShortError):
        ProbVector(())


def test_prob_vector_out_of_range():
    with pytest.raises(OutOfRangeError):
        ProbVector((-0.1, 1.1))
    with pytest.raises(OutOfRangeError):
        ProbVector((0.5, 0.5, float("nan")))
    with pytest.raises(OutOfRangeError):
        ProbVector((1.5, -0.5))


def test_prob_vector_not_normalized():
    with pytest.raises(NotNormalizedError):
        ProbVector((0.7, 0.4))
    with pytest.raises(NotNormalizedError):
        ProbVector((0.3, 0.3))


def test_prob_vector_tolerance():
    # a few ulps off is fine, 1e-9 is the documented tolerance
    ProbVector((0.1, 0.9 + 1e-10))
    with pytest.raises(NotNormalizedError):
        ProbVector((0.1, 0.9 + 1e-8))


def test_error_hierarchy():
    assert issubclass(ProbVectorError, TriageError)
    assert issubclass(ProbVectorError, ValueError)
    for cls in (TooShortError, OutOfRangeError, NotNormalizedError):
        assert issubclass(cls, ProbVectorError)


def test_validate_prob_vector():
    p = validate_prob_vector([0.25, 0.75])
    assert isinstance(p, ProbVector)
    assert tuple(p) == (0.25, 0.75)


@given(st.floats(min_value=0.0, max_value=1.0, allow_nan=False))
def test_binary_complement_always_valid(s):
    # the standard way binary vectors are built throughout the package
    p = ProbVector((1.0 - s, s))
    assert math.isclose(math.fsum(p), 1.0, abs_tol=1e-9)


def test_video_item_validation():
    with pytest.raises(ValueError):
        VideoItem(id="")
    with pytest.raises(ValueError):
        VideoItem(id="v1", metadata={"vv": float("inf")})


def test_video_item_metadata_copied():
    meta = {"vv": 100.0}
    item = VideoItem(id="v1", metadata=meta)
    meta["vv"] = 5.0
    assert item.metadata["vv"] == 100.0


def test_labeled_example_validation():
    item = VideoItem(id="v1")
    p2 = ProbVector((0.5, 0.5))
    with pytest.raises(ValueError):
        LabeledExample(item=item, stage1=p2, stage2=None, label=2)
    with pytest.raises(ValueError):
        LabeledExample(item=item, stage1=p2, stage2=ProbVector((0.2, 0.3, 0.5)), label=0)
    ex = LabeledExample(item=item, stage1=p2, stage2=None, label=1)
    assert ex.stage2 is None


def test_model_output_cost():
    with pytest.raises(ValueError):
        ModelOutput(probs=ProbVector((0.5, 0.5)), model_id="m", cost_units=-1.0)


def test_example_dict_roundtrip():
    ex = LabeledExample(
        item=VideoItem(id="v1", metadata={"vv": 42.0}),
        stage1=ProbVector((0.3, 0.7)),
        stage2=ProbVector((0.1, 0.9)),
        label=1,
    )
    record = example_to_dict(ex)
    assert record["id"] == "v1"
    assert record["stage1"] == [0.3, 0.7]
    assert record["stage2"] == [0.1, 0.9]
    assert record["label"] == 1
    assert record["metadata"] == {"vv": 42.0}
    back = example_from_dict(record)
    assert back == ex


def test_example_dict_optional_stage2():
    ex = LabeledExample(
        item=VideoItem(id="v1"),
        stage1=ProbVector((0.3, 0.7)),
        stage2=None,
        label=0,
    )
    record = example_to_dict(ex)
    assert "stage2" not in record
    assert example_from_dict(record).stage2 is None


def test_dataset_roundtrip(tmp_path):
    examples = [
        LabeledExample(
            item=VideoItem(id=f"v{i}", metadata={"vv": float(i * 10 + 10)}),
            stage1=ProbVector((1.0 - 0.1 * i, 0.1 * i)),
            stage2=ProbVector((0.5, 0.5)),
            label=i % 2,
        )
        for i in range(1, 5)
    ]
    path = tmp_path / "data.jsonl"
    write_dataset(str(path), examples)
    assert read_dataset(str(path)) == examples


def test_read_dataset_line_numbers(tmp_path):
    path = tmp_path / "bad.jsonl"
    good = json.dumps(example_to_dict(
        LabeledExample(VideoItem(id="v1"), ProbVector((0.5, 0.5)), None, 0)
    ))
    path.write_text(good + "\n{not json}\n")
    with pytest.raises(DatasetError) as err:
        read_dataset(str(path))
    assert ":2:" in str(err.value)


def test_read_dataset_invalid_probs(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps({"id": "v1", "stage1": [0.7, 0.4], "label": 0}) + "\n")
    with pytest.raises(DatasetError) as err:
        read_dataset(str(path))
    assert ":1:" in str(err.value)


def test_read_dataset_duplicate_ids(tmp_path):
    path = tmp_path / "dup.jsonl"
    rec = json.dumps({"id": "v1", "stage1": [0.5, 0.5], "label": 0})
    path.write_text(rec + "\n" + rec + "\n")
    with pytest.raises(DatasetError) as err:
        read_dataset(str(path))
    assert "duplicate" in str(err.value)


def test_read_dataset_skips_blank_lines(tmp_path):
    path = tmp_path / "gaps.jsonl"
    rec = json.dumps({"id": "v1", "stage1": [0.5, 0.5], "label": 1})
    path.write_text("\n" + rec + "\n\n")
    assert len(read_dataset(str(path))) == 1


def test_dataset_error_format():
    err = DatasetError("data.jsonl", 3, "boom")
    assert str(err) == "data.jsonl:3: boom"
