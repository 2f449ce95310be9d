import math

import numpy as np
import pytest

from descent_planner import dataset as ds
from descent_planner.errors import IngestError


def test_small_csv_single_partition(tmp_csv):
    path = tmp_csv([b"1.0,2.0,3.0", b"-1.0,0.5,0.25", b"1.0,1.0,1.0"])
    data = ds.ingest(path, partition_bytes=1 << 20)
    assert data.num_partitions == 1
    assert data.stats.num_units == 3
    assert data.stats.num_features == 2


def test_partition_count_matches_layout_formula(tmp_csv):
    # 400 records of 40 bytes -> ceil(16000 / 4096) = 4 partitions
    line = b"1.0," + b"2.1," * 8 + b"3.2"  # 40 bytes with the newline stripped
    assert len(line) == 39
    line = line + b"4"  # pad to exactly 40 bytes
    path = tmp_csv([line] * 400)
    data = ds.ingest(path, partition_bytes=4096)
    assert data.stats.size_bytes == 16000
    assert data.num_partitions == math.ceil(16000 / 4096) == 4


def test_empty_file_is_zero_records(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_bytes(b"")
    with pytest.raises(IngestError, match="zero records"):
        ds.ingest(str(path))


def test_missing_file(tmp_path):
    with pytest.raises(IngestError, match="no such file"):
        ds.ingest(str(tmp_path / "nope.csv"))


def test_inconsistent_columns_reports_line(tmp_csv):
    path = tmp_csv([b"1.0,2.0,3.0", b"1.0,2.0", b"1.0,2.0,3.0"])
    with pytest.raises(IngestError, match="line 2"):
        ds.ingest(path)


def test_malformed_number_reports_line(tmp_csv):
    path = tmp_csv([b"1.0,2.0", b"1.0,oops"])
    with pytest.raises(IngestError, match="line 2"):
        ds.ingest(path)


def test_partitions_never_split_records_and_preserve_order(tmp_csv):
    lines = [f"{i},1,2".encode() for i in range(64)]
    path = tmp_csv(lines)
    data = ds.ingest(path, partition_bytes=40)
    for part in data.partitions:
        assert part.size_bytes == sum(len(r.text) for r in part.records)
    rebuilt = [r.text for r in data.iter_records()]
    assert rebuilt == lines
    for part in data.partitions:
        for off, rec in enumerate(part.records):
            assert rec.offset == off


def test_units_per_partition_formula(tmp_csv):
    line = b"1.0," + b"2.1," * 8 + b"3.24"
    path = tmp_csv([line] * 400)
    data = ds.ingest(path, partition_bytes=4096)
    expect = math.ceil(400 * 4096 / data.stats.size_bytes)
    assert data.stats.units_per_partition == expect


def test_reingest_roundtrip_preserves_stats(tmp_path, small_synth):
    out = tmp_path / "copy.csv"
    ds.write_dataset(small_synth.dataset, out)
    again = ds.ingest(str(out), partition_bytes=small_synth.dataset.partition_bytes)
    assert again.stats == small_synth.dataset.stats


def test_libsvm_ingest(tmp_csv):
    path = tmp_csv([b"+1 1:0.5 3:1.5", b"-1 2:2.0"], name="d.libsvm")
    data = ds.ingest(path)
    assert data.format == ds.LIBSVM_SPARSE
    assert data.stats.num_features == 3
    assert data.stats.density == pytest.approx(3 / 6)


def test_libsvm_indices_must_increase(tmp_csv):
    path = tmp_csv([b"+1 3:0.5 2:1.0"], name="d.libsvm")
    with pytest.raises(IngestError, match="strictly increasing"):
        ds.ingest(path)


def test_column_spec_changes_dimension(tmp_csv):
    path = tmp_csv([b"9,1,2,3,4,5", b"8,6,7,8,9,10"])
    spec = ds.ColumnSpec(label_column=2, feature_start=4, feature_end=6)
    data = ds.ingest(path, columns=spec)
    assert data.stats.num_features == 3


class TestSynthesize:
    def test_deterministic_in_seed(self):
        a = ds.synthesize("svm", 50, 3, 0.2, seed=11)
        b = ds.synthesize("svm", 50, 3, 0.2, seed=11)
        assert [r.text for r in a.dataset.iter_records()] == \
               [r.text for r in b.dataset.iter_records()]

    def test_classification_separable_at_zero_noise(self):
        synth = ds.synthesize("svm", 100, 2, 0.0, seed=7)
        from descent_planner import executor
        parser = executor.RecordParser(ds.DENSE_CSV, 2)
        data = executor.transform_all(synth.dataset, parser)
        margins = data.y * (data.X @ synth.true_weights)
        assert np.all(margins > 0)

    def test_bgd_reaches_full_accuracy_on_separable_data(self):
        # oracle: run full-batch descent itself
        import descent_planner as dp
        from descent_planner import executor
        synth = ds.synthesize("svm", 100, 2, 0.0, seed=7)
        pipe = dp.assemble(dp.GDPlan(dp.BatchGD()), dp.get_gradient("svm-hinge"),
                           dp.HyperParams())
        res = dp.execute(pipe, synth.dataset, seed=1)
        parser = executor.RecordParser(ds.DENSE_CSV, 2)
        data = executor.transform_all(synth.dataset, parser)
        out = executor.predict_batch(res.weights, data.X, data.y, "classification")
        assert out.accuracy == 1.0

    def test_regression_exact_recovery_without_noise(self):
        # oracle: normal equations
        from descent_planner import executor
        synth = ds.synthesize("linreg", 50, 3, 0.0, seed=1)
        parser = executor.RecordParser(ds.DENSE_CSV, 3)
        data = executor.transform_all(synth.dataset, parser)
        solved, *_ = np.linalg.lstsq(data.X, data.y, rcond=None)
        assert np.max(np.abs(solved - synth.true_weights)) < 1e-9

    def test_full_noise_flips_every_label(self):
        clean = ds.synthesize("svm", 80, 3, 0.0, seed=9)
        flipped = ds.synthesize("svm", 80, 3, 1.0, seed=9)
        from descent_planner import executor
        parser = executor.RecordParser(ds.DENSE_CSV, 3)
        y0 = executor.transform_all(clean.dataset, parser).y
        y1 = executor.transform_all(flipped.dataset, parser).y
        assert np.array_equal(y1, -y0)

    def test_sparse_output_is_libsvm(self):
        synth = ds.synthesize("logistic", 40, 20, 0.1, seed=2, density=0.3)
        assert synth.dataset.format == ds.LIBSVM_SPARSE
        assert synth.dataset.stats.density < 0.8

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            ds.synthesize("svm", 0, 3, 0.0, seed=1)
        with pytest.raises(ValueError):
            ds.synthesize("unknown-task", 10, 3, 0.0, seed=1)
