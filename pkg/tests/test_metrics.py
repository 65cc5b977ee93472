import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from marsseg.metrics import (
    ConfusionMatrix,
    NoLabeledPixelsError,
    confusion,
    fmt_recall,
    per_class_recall,
    pixel_accuracy,
    write_class_distribution_csv,
    write_confusion_csvs,
)

from oracles import confusion_loops


class TestAccuracy:
    def test_half_right(self):
        assert pixel_accuracy([[0, 1], [2, 3]], [[0, 1], [3, 2]]) == 0.5

    def test_nulls_excluded(self):
        assert pixel_accuracy([0, 1, 5, 5], [0, 1, 255, 255]) == 1.0

    def test_all_null(self):
        with pytest.raises(NoLabeledPixelsError):
            pixel_accuracy([0, 1], [255, 255])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            pixel_accuracy([0, 1, 2], [0, 1])


class TestConfusion:
    def test_small_example(self):
        cm = confusion([0, 0, 1, 3], [0, 1, 1, 3])
        assert cm.counts[0, 0] == 1 and cm.counts[1, 0] == 1 and cm.counts[1, 1] == 1 and cm.counts[3, 3] == 1
        assert cm.total == 4 and cm.accuracy == 0.75

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 200))
    def test_matches_loops(self, seed, n):
        rng = np.random.default_rng(seed)
        pred = rng.integers(0, 6, n)
        lab = rng.integers(0, 6, n)
        lab[rng.random(n) < 0.2] = 255
        cm = confusion(pred, lab)
        np.testing.assert_array_equal(cm.counts, confusion_loops(pred, lab))
        if cm.total:
            assert cm.accuracy == pytest.approx(pixel_accuracy(pred, lab), abs=1e-12)

    def test_null_pixel_predictions_irrelevant(self):
        rng = np.random.default_rng(0)
        lab = rng.integers(0, 6, (4, 8, 8))
        lab[:, :3] = 255
        pred = rng.integers(0, 6, lab.shape)
        other = pred.copy()
        other[:, :3] = (other[:, :3] + 1) % 6
        assert np.array_equal(confusion(pred, lab).counts, confusion(other, lab).counts)
        assert pixel_accuracy(pred, lab) == pixel_accuracy(other, lab)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.int64, (6, 6), elements=st.integers(0, 10_000)))
    def test_normalized_rows(self, counts):
        norm = ConfusionMatrix(counts).normalized()
        for r, row in zip(counts, norm):
            if r.sum():
                assert abs(row.sum() - 100.0) <= 0.1
            else:
                assert np.all(np.isnan(row))

    def test_recall_undefined_class(self):
        cm = confusion([0, 1, 1], [0, 1, 0])
        rec = per_class_recall(cm)
        assert rec[0] == 0.5 and rec[1] == 1.0
        assert rec[3] is None and fmt_recall(rec[3]) == "n/a"

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            confusion([6], [0])
        with pytest.raises(ValueError):
            confusion([0], [7])

    def test_add(self):
        a = confusion([0, 1], [0, 1])
        b = confusion([2], [3])
        assert (a + b).total == 3


def test_csv_outputs(tmp_path):
    cm = confusion([0, 1, 1, 2], [0, 1, 0, 2])
    write_confusion_csvs(cm, tmp_path)
    counts = (tmp_path / "confusion_counts.csv").read_text().splitlines()
    assert counts[0].startswith("true\\pred,soil,bedrock") and counts[1] == "soil,1,1,0,0,0,0"
    recall = (tmp_path / "recall.csv").read_text().splitlines()
    assert recall[4] == "3,bigRock,n/a,0"
    norm = (tmp_path / "confusion_normalized.csv").read_text().splitlines()
    assert norm[1] == "soil,50.0000,50.0000,0.0000,0.0000,0.0000,0.0000"


def test_class_distribution_csv(tmp_path):
    write_class_distribution_csv([10, 0, 90, 0, 0, 0], tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[1] == "0,soil,10,0.100000,1.0000"
    assert lines[2].endswith("n/a")
