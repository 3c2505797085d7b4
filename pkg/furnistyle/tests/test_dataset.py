# furnistyle/tests/test_dataset.py
import numpy as np
import pytest

from furnistyle.dataset import (
    ItemRecord,
    PairSample,
    check_pairs,
    items_by_id,
    pair_violations,
    read_dataset,
    read_pairs,
    validate_items,
    write_dataset,
    write_pairs,
)
from furnistyle.errors import InputError, SamplingError


def _item(i, style, ftype, split="train"):
    return ItemRecord(i, np.array([0.1, 1 / 3]), style, ftype, (1, 2), split)


def test_dataset_file_round_trip(tmp_path, small_items):
    path = tmp_path / "d.tsv"
    write_dataset(path, small_items, {"num_styles": 4, "num_types": 3})
    items, meta = read_dataset(path)
    assert items == small_items
    assert meta["input_dim"] == 16
    assert meta["count"] == len(small_items)
    write_dataset(tmp_path / "again.tsv", items, {k: v for k, v in meta.items() if k != "count"})
    assert (tmp_path / "again.tsv").read_bytes() == path.read_bytes()


def test_read_dataset_reports_line_numbers(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text(
        "#furnistyle-dataset v1 input_dim=2\n"
        "a\t0\t1\t0.1,0.2\t1,2\ttrain\n"
        "b\t0\tx\t0.1,0.2\t1,2\ttrain\n",
        encoding="utf-8",
    )
    with pytest.raises(InputError, match=r"bad.tsv:3"):
        read_dataset(path)


def test_read_dataset_rejects_wrong_dim_and_header(tmp_path):
    path = tmp_path / "dim.tsv"
    path.write_text("#furnistyle-dataset v1 input_dim=3\na\t0\t1\t0.1,0.2\t1\t-\n", encoding="utf-8")
    with pytest.raises(InputError, match="input_dim"):
        read_dataset(path)
    path.write_text("id\tstyle\n", encoding="utf-8")
    with pytest.raises(InputError, match=":1"):
        read_dataset(path)
    with pytest.raises(FileNotFoundError):
        read_dataset(tmp_path / "missing.tsv")


def test_validate_items_catches_duplicates_and_ranges():
    with pytest.raises(InputError, match="duplicate"):
        validate_items([_item("a", 0, 0), _item("a", 1, 1)])
    with pytest.raises(InputError, match="style"):
        validate_items([_item("a", 5, 0)], num_styles=4)
    with pytest.raises(InputError, match="split"):
        validate_items([_item("a", 0, 0, split="holdout")])


def test_pair_file_round_trip(tmp_path):
    pairs = [PairSample("a", "b", 1), PairSample("a", "c", 0)]
    path = tmp_path / "p.tsv"
    write_pairs(path, pairs)
    assert read_pairs(path) == pairs
    path.write_text("#furnistyle-pairs v1\na\tb\t2\n", encoding="utf-8")
    with pytest.raises(InputError, match=":2"):
        read_pairs(path)


def test_pair_violations():
    by_id = items_by_id(
        [_item("a", 0, 0), _item("b", 0, 1), _item("c", 0, 0), _item("d", 1, 0), _item("e", 1, 1, split="val")]
    )
    assert pair_violations([PairSample("a", "b", 1), PairSample("a", "d", 0)], by_id) == []
    bad = [
        PairSample("a", "c", 1),  # same type
        PairSample("a", "b", 0),  # same style labeled negative
        PairSample("b", "e", 0),  # crosses splits
        PairSample("a", "a", 1),
        PairSample("a", "zz", 0),
    ]
    problems = pair_violations(bad, by_id)
    assert len(problems) >= len(bad)
    with pytest.raises(SamplingError):
        check_pairs(bad, by_id)


def test_pair_canonical_order():
    assert PairSample.canonical("b", "a", 1) == PairSample("a", "b", 1)


def test_item_record_coerces_fields():
    it = ItemRecord("x", [1, 2], np.int64(3), 1.0, [4, 5])
    assert it.features.dtype == np.float64
    assert it.tokens == (4, 5)
    assert isinstance(it.style, int)
    assert it.split is None
