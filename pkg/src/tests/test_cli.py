#!/usr/bin/env python3
"""
Experiment driver: artifacts, federated-vs-plaintext comparison, sweeps, exit codes
"""

import json
import sys
import tempfile
from pathlib import Path

import pandas as pd
import pytest

sys.path.append(str(Path(__file__).parent.parent.parent))

from src.cli import (
    COMPARISON_FILE, CURVES_FILE, EXIT_CONFIG, EXIT_OK, ExperimentSpec, accuracy_from_confusion,
    cmd_compare, cmd_sweep, confusion_counts, main,
)
from src.config import METRICS_FILE, MODEL_FILE, RAW_DATA_DIR, STAGES_FILE, SUMMARY_FILE, RunConfig
from src.errors import ConfigurationError
from src.gbt_core import BoostedModel
from src.tests.suite import run_suite

SMALL = dict(dataset="synthetic", synthetic_instances=240, synthetic_features=5,
             users=4, edges=2, max_depth=2, rounds=2, seed=5)


def _spec(out, axis=None, values=(), **overrides):
    settings = dict(SMALL, output_dir=Path(out))
    settings.update(overrides)
    return ExperimentSpec(RunConfig(**settings), axis, list(values))


def test_train_writes_artifacts():
    with tempfile.TemporaryDirectory() as tmp:
        argv = ["train", "--out", tmp, "--rounds", "2", "--users", "4", "--edges", "2", "--seed", "5"]
        env = {"FEDXGB_SYNTHETIC_INSTANCES": "240", "FEDXGB_MAX_DEPTH": "2"}
        assert main(argv, environ=env) == EXIT_OK
        out = Path(tmp)
        for name in (MODEL_FILE, METRICS_FILE, STAGES_FILE, SUMMARY_FILE):
            assert (out / name).is_file(), name
        model = BoostedModel.from_dict(json.loads((out / MODEL_FILE).read_text()))
        assert len(model.trees) == 2
        metrics = pd.read_csv(out / METRICS_FILE)
        assert list(metrics["round"]) == [0, 1, 2]
        summary = json.loads((out / SUMMARY_FILE).read_text())
        assert summary["config"]["users"] == 4
        assert summary["config"]["max_depth"] == 2
        assert summary["key_fingerprints"]
        assert not list(out.glob("*.tmp"))


def test_bad_configuration_exit_code():
    assert main(["train", "--users", "0"], environ={}) == EXIT_CONFIG
    assert main(["train", "--users", "3", "--edges", "5"], environ={}) == EXIT_CONFIG
    with tempfile.TemporaryDirectory() as tmp:
        assert main(["train", "--config", str(Path(tmp) / "absent.env")], environ={}) == EXIT_CONFIG
        assert main(["sweep", "--axis", "users", "--values", "a,b", "--out", tmp], environ={}) == EXIT_CONFIG


def test_experiment_spec_validation():
    with tempfile.TemporaryDirectory() as tmp:
        try:
            _spec(tmp, axis="depth", values=[1])
        except ConfigurationError:
            pass
        else:
            raise AssertionError("unknown sweep axis accepted")
        spec = _spec(tmp, axis="dropout", values=[0.1])
        assert spec.point(0.1).dropout_rate == 0.1
        assert _spec(tmp, axis="users", values=[8]).point(8.0).users == 8


def test_compare_zero_rounds():
    with tempfile.TemporaryDirectory() as tmp:
        report = cmd_compare(_spec(tmp, rounds=0), verbose=False)
        assert not report.partial
        assert report.final_accuracy_gap == 0.0
        assert report.max_accuracy_gap == 0.0
        assert report.trees_identical is True
        assert (Path(tmp) / COMPARISON_FILE).is_file()


def test_compare_matches_oracle():
    with tempfile.TemporaryDirectory() as tmp:
        report = cmd_compare(_spec(tmp), verbose=False)
        assert report.trees_identical is True
        assert report.max_leaf_weight_gap == 0.0
        assert report.final_accuracy_gap == 0.0
        assert report.max_accuracy_gap == 0.0
        curves = pd.read_csv(Path(tmp) / CURVES_FILE)
        assert list(curves["round"]) == [0, 1, 2]
        assert (curves["oracle_test_accuracy"] == curves["federated_test_accuracy"]).all()
        saved = json.loads((Path(tmp) / COMPARISON_FILE).read_text())
        assert saved["trees_identical"] is True
        fed_counts = report.confusion["federated"]
        assert fed_counts == report.confusion["oracle"]
        # 240 instances, one third held out
        assert sum(sum(row.values()) for row in fed_counts.values()) == 80


ADULT_PRESENT = all(
    any((RAW_DATA_DIR / name).is_file() for name in names)
    for names in (("a9a", "a9a.txt"), ("a9a.t", "a9a.t.txt"))
)


@pytest.mark.skipif(not ADULT_PRESENT, reason="a9a files not downloaded")
def test_adult_subsample_gap_under_one_point():
    if not ADULT_PRESENT:
        pytest.skip("a9a files not downloaded")
    with tempfile.TemporaryDirectory() as tmp:
        spec = _spec(tmp, dataset="adult", subsample=2000, test_subsample=1000, rounds=50,
                     users=20, edges=2, max_depth=3)
        report = cmd_compare(spec, verbose=False)
        assert not report.partial
        assert abs(report.final_accuracy_gap) < 0.01


def test_confusion_helpers():
    table = confusion_counts([0, 0, 1, 1, 1], [0, 1, 1, 1, 0])
    assert int(table.loc[1, 1]) == 2
    assert accuracy_from_confusion(table) == 3 / 5
    assert accuracy_from_confusion(pd.DataFrame()) == 0.0


def test_sweep_user_bytes_fall_with_more_users():
    with tempfile.TemporaryDirectory() as tmp:
        spec = _spec(tmp, axis="users", values=[6, 12, 24], edges=3, rounds=1,
                     synthetic_instances=1800)
        table = cmd_sweep(spec, verbose=False)
        assert list(table["status"]) == ["ok"] * 3
        per_user = list(table["user_bytes"])
        assert per_user[0] > per_user[1] > per_user[2]
        assert (Path(tmp) / "sweep_users.csv").is_file()


def test_sweep_edge_cost_falls_with_more_edges():
    with tempfile.TemporaryDirectory() as tmp:
        spec = _spec(tmp, axis="edges", values=[1, 2, 3, 4, 6], users=24, rounds=1,
                     synthetic_instances=480)
        table = cmd_sweep(spec, verbose=False)
        assert list(table["status"]) == ["ok"] * 5
        per_edge = list(table["edge_runtime_proxy"])
        assert all(later <= earlier for earlier, later in zip(per_edge, per_edge[1:]))
        assert per_edge[-1] < per_edge[0]


def test_sweep_records_failed_points():
    with tempfile.TemporaryDirectory() as tmp:
        spec = _spec(tmp, axis="edges", values=[1, 20], users=6, rounds=1)
        table = cmd_sweep(spec, verbose=False)
        assert table.loc[0, "status"] == "ok"
        assert table.loc[1, "status"].startswith("failed: ConfigurationError")
        assert table["transcript_hash"].notna().sum() == 1


def run_all_tests():
    return run_suite("EXPERIMENT DRIVER", [
        ("Train artifacts", test_train_writes_artifacts),
        ("Bad configuration", test_bad_configuration_exit_code),
        ("Experiment spec", test_experiment_spec_validation),
        ("Compare, zero rounds", test_compare_zero_rounds),
        ("Compare vs oracle", test_compare_matches_oracle),
        ("Adult subsample gap", test_adult_subsample_gap_under_one_point),
        ("Confusion helpers", test_confusion_helpers),
        ("Sweep: user bytes", test_sweep_user_bytes_fall_with_more_users),
        ("Sweep: edge cost", test_sweep_edge_cost_falls_with_more_edges),
        ("Sweep: failed points", test_sweep_records_failed_points),
    ])


if __name__ == "__main__":
    sys.exit(0 if run_all_tests() else 1)
