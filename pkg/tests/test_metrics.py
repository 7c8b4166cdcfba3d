import math

import pytest
from hypothesis import given, strategies as st

from bitsift.metrics import (
    ADJUST_COLUMNS, SWEEP_COLUMNS, TRAIN_COLUMNS, CsvStream, SweepRow, adjust_row, read_sweep, read_train, train_row,
)
from bitsift.pipeline import TrainRecord
from bitsift.precision import AdjustReport
from bitsift.regularizer import LossBreakdown


def record(epoch=0, bpp=3.5):
    loss = LossBreakdown(0.7, [1.5, 2.5], [0.4, 0.6], 0.01, 0.7 + 0.01 * (0.4 * 1.5 + 0.6 * 2.5))
    return TrainRecord(epoch, "bsq", loss, 0.9, [4, 3], bpp, 32 / bpp)


def test_train_csv_round_trip(tmp_path):
    path = tmp_path / "m.csv"
    with CsvStream(path, TRAIN_COLUMNS) as out:
        for e in range(3):
            out.write(train_row(record(e, 3.0 + e / 7)))
    rows = read_train(path)
    assert [r["epoch"] for r in rows] == [0, 1, 2]
    assert rows[1]["bits_per_param"] == 3.0 + 1 / 7  # repr-exact
    assert rows[0]["precisions"] == [4, 3] and rows[0]["coefficients"] == [0.4, 0.6]
    for r in rows:
        assert r["compression_rate"] == pytest.approx(32 / r["bits_per_param"], rel=1e-12)


def test_adjust_row_columns(tmp_path):
    rep = AdjustReport("fc0", 4, 5, 1.0, 31 / 15, 0, 0, True)
    row = adjust_row(3, rep)
    assert tuple(row) == ADJUST_COLUMNS
    with CsvStream(tmp_path / "a.csv", ADJUST_COLUMNS) as out:
        out.write(row)
    text = (tmp_path / "a.csv").read_text().splitlines()
    assert text[0] == ",".join(ADJUST_COLUMNS)
    assert text[1].endswith(",true")


@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 9), st.floats(0.01, 32), st.floats(0, 1),
                          st.lists(st.integers(0, 16), max_size=5)), min_size=1, max_size=6))
def test_sweep_round_trip(tmp_path_factory, rows):
    path = tmp_path_factory.mktemp("s") / "t.csv"
    written = [SweepRow(a, s, b, 32 / b, acc, acc, p) for a, s, b, acc, p in rows]
    with CsvStream(path, SWEEP_COLUMNS) as out:
        for r in written:
            out.write(r.as_dict())
    assert read_sweep(path) == written


def test_failed_sweep_row_has_nan(tmp_path):
    path = tmp_path / "t.csv"
    with CsvStream(path, SWEEP_COLUMNS) as out:
        out.write(SweepRow(0.1, 0, math.nan, math.nan, math.nan, math.nan, [], "failed: boom").as_dict())
    (row,) = read_sweep(path)
    assert math.isnan(row.bits_per_param) and row.status == "failed: boom" and row.precisions == []


def test_readers_reject_wrong_header(tmp_path):
    (tmp_path / "x.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_sweep(tmp_path / "x.csv")
    with pytest.raises(ValueError):
        read_train(tmp_path / "x.csv")
