import json

import numpy as np
import pytest

from advkit.attacks import AttackOutcome
from advkit.io import (RESULT_HEADER, CifarFormatError, ResultRow, dumps_report, read_cifar10_binary, read_results,
                       write_cifar10_binary, write_report, write_results)


def record(label, pixels):
    return bytes([label]) + np.asarray(pixels, dtype=np.uint8).tobytes()


def test_single_white_record(tmp_path):
    path = tmp_path / "b.bin"
    path.write_bytes(record(7, [255] * 3072))
    d = read_cifar10_binary(path)
    assert len(d) == 1 and d.labels[0] == 7 and d.dim == 3072
    assert np.all(d.inputs == 1.0)


def test_channel_layout_and_scaling(tmp_path):
    pixels = np.zeros(3072, dtype=np.uint8)
    pixels[:1024] = 255  # red plane
    pixels[1024 + 33] = 51  # green, row 1 col 1
    path = tmp_path / "b.bin"
    path.write_bytes(record(2, pixels) + record(9, np.arange(3072) % 256))
    d = read_cifar10_binary(path)
    np.testing.assert_array_equal(d.labels, [2, 9])
    assert np.all(d.inputs[0, :1024] == 1.0)
    assert d.inputs[0].reshape(3, 32, 32)[1, 1, 1] == np.float32(51) / np.float32(255)
    np.testing.assert_array_equal(d.inputs[1], (np.arange(3072) % 256).astype(np.float32) / np.float32(255))


def test_truncated_file_names_offset(tmp_path):
    path = tmp_path / "b.bin"
    path.write_bytes(record(1, [0] * 3072) + b"\x01\x02")
    with pytest.raises(CifarFormatError, match="byte offset 3073"):
        read_cifar10_binary(path)


def test_bad_label(tmp_path):
    path = tmp_path / "b.bin"
    path.write_bytes(record(1, [0] * 3072) + record(10, [0] * 3072))
    with pytest.raises(CifarFormatError, match="label 10"):
        read_cifar10_binary(path)


def test_full_test_batch_size(tmp_path):
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 10, 10000)
    pixels = rng.integers(0, 256, (10000, 3072))
    path = tmp_path / "test_batch.bin"
    write_cifar10_binary(pixels / 255, labels, path)
    assert path.stat().st_size == 10000 * 3073
    d = read_cifar10_binary(path)
    assert len(d) == 10000
    np.testing.assert_array_equal(d.labels, labels)
    np.testing.assert_array_equal(np.rint(d.inputs * 255).astype(int), pixels)


def test_empty_results_are_header_only(tmp_path):
    path = tmp_path / "r.csv"
    write_results([], path)
    assert path.read_text() == ",".join(RESULT_HEADER) + "\n"
    assert RESULT_HEADER == ("index", "true_label", "clean_pred", "adv_pred", "success", "l2_norm", "linf_norm",
                             "first_success_iter", "loss", "model", "seed")


def test_result_rows_round_trip(tmp_path):
    o = AttackOutcome(np.zeros(2), 3, True, 3, 5, 0.123456789123, 1 / 255, 17, -0.5)
    f = AttackOutcome(np.zeros(2), 1, False, 1, 1, 0.0, 0.0, None, 2.0)
    rows = [ResultRow.from_outcome(0, o, "jitter", "m1", 42), ResultRow.from_outcome(1, f, "ce", "m1", 43)]
    path = tmp_path / "r.csv"
    write_results(rows, path)
    lines = path.read_text().splitlines()
    assert lines[1] == "0,3,3,5,1,0.123456789,0.00392156863,17,jitter,m1,42"
    assert lines[2] == "1,1,1,1,0,0,0,,ce,m1,43"
    back = read_results(path)
    assert back[1] == rows[1]
    assert back[0].l2_norm == float("0.123456789")


def test_report_json_is_stable(tmp_path):
    report = {"b": np.float32(0.1), "a": [1.0 / 3, float("nan"), np.int64(4)], "c": {"z": True, "y": np.arange(2)}}
    text = dumps_report(report)
    assert json.loads(text) == {"a": [0.333333333, None, 4], "b": 0.100000001, "c": {"y": [0, 1], "z": True}}
    assert text.index('"a"') < text.index('"b"') < text.index('"c"')
    write_report(report, tmp_path / "r.json")
    write_report(report, tmp_path / "s.json")
    assert (tmp_path / "r.json").read_bytes() == (tmp_path / "s.json").read_bytes()


def test_write_failure_names_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        write_results([], blocker / "sub" / "r.csv")
