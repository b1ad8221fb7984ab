#!/usr/bin/env python3
"""
FedXGB experiment driver

    python -m src.cli train   [flags]   federated training, writes model/metrics/summary
    python -m src.cli compare [flags]   federated vs plaintext oracle, per-round curves
    python -m src.cli sweep --axis users --values 60,120,180   cost trends over a grid

Settings come from defaults < --config file < FEDXGB_* environment < flags.
Exit codes: 0 success, 2 configuration or dataset problem, 3 run failure.
"""

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

sys.path.append(str(Path(__file__).parent.parent))

from src.config import (
    DATASETS, DROPOUT_SCOPES, METRICS_FILE, MODEL_FILE, STAGES_FILE, SUMMARY_FILE, RunConfig,
    load_run_config,
)
from src.data_io import BenchmarkDownloader
from src.errors import ConfigurationError, DatasetFormatError, DatasetParseError, FedXGBError
from src.federation import Federation
from src.gbt_core import accuracy, labels_from_scores, loss_value, train_plaintext

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

SWEEP_AXES = ("users", "edges", "dropout")
CURVES_FILE = "curves.csv"
COMPARISON_FILE = "comparison.json"


@dataclass
class ExperimentSpec:
    """A run configuration plus the sweep grid (when sweeping)"""
    config: RunConfig
    axis: Optional[str] = None
    values: List[float] = field(default_factory=list)

    def __post_init__(self):
        self.config.validate()
        if self.axis is not None:
            if self.axis not in SWEEP_AXES:
                raise ConfigurationError(f"sweep axis must be one of {SWEEP_AXES}")
            if not self.values:
                raise ConfigurationError("sweep needs at least one value")

    @property
    def output_dir(self) -> Path:
        return Path(self.config.output_dir)

    def point(self, value) -> RunConfig:
        """Configuration of one sweep point"""
        if self.axis == "dropout":
            return self.config.with_overrides(dropout_rate=float(value))
        return self.config.with_overrides(**{self.axis: int(value)})


@dataclass
class ComparisonReport:
    federated: pd.DataFrame
    oracle: pd.DataFrame
    stage_costs: Optional[pd.DataFrame]
    max_accuracy_gap: Optional[float]
    final_accuracy_gap: Optional[float]
    confusion: Dict[str, Dict[str, int]] = field(default_factory=dict)
    trees_identical: Optional[bool] = None
    max_leaf_weight_gap: Optional[float] = None
    partial: bool = False
    failure: Optional[str] = None

    def curves(self) -> pd.DataFrame:
        """Per-round accuracy and loss of both arms side by side"""
        oracle = self.oracle.add_prefix("oracle_").rename(columns={"oracle_round": "round"})
        if self.federated.empty:
            return oracle
        fed = self.federated[["round", "test_accuracy", "test_loss", "train_loss"]].add_prefix("federated_")
        fed = fed.rename(columns={"federated_round": "round"})
        return oracle.merge(fed, on="round", how="left")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "max_accuracy_gap": self.max_accuracy_gap,
            "final_accuracy_gap": self.final_accuracy_gap,
            "trees_identical": self.trees_identical,
            "max_leaf_weight_gap": self.max_leaf_weight_gap,
            "confusion": self.confusion,
            "partial": self.partial,
            "failure": self.failure,
        }


# ---------------------------------------------------------------------------
# Atomic artifact writers
# ---------------------------------------------------------------------------

def _replace_into(path: Path, write) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    write(tmp)
    os.replace(tmp, path)
    return path


def write_json(path, payload) -> Path:
    return _replace_into(path, lambda tmp: tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n"))


def write_csv(path, frame: pd.DataFrame) -> Path:
    return _replace_into(path, lambda tmp: frame.to_csv(tmp, index=False, float_format="%.10g"))


def confusion_counts(labels: np.ndarray, predicted: np.ndarray) -> pd.DataFrame:
    return pd.crosstab(pd.Series(labels, name="label"), pd.Series(predicted, name="predicted"))


def accuracy_from_confusion(table: pd.DataFrame) -> float:
    total = int(table.values.sum())
    if total == 0:
        return 0.0
    hits = sum(int(table.loc[c, c]) for c in table.index if c in table.columns)
    return hits / total


def _confusion_dict(table: pd.DataFrame) -> Dict[str, Dict[str, int]]:
    return {str(r): {str(c): int(table.loc[r, c]) for c in table.columns} for r in table.index}


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train(spec: ExperimentSpec, verbose: bool = True) -> Dict[str, Path]:
    """Federated training; model dump, metrics CSV, stage table and JSON summary"""
    config = spec.config
    federation = Federation.from_config(config)
    start = time.time()
    metrics = federation.train(verbose=verbose)
    out = spec.output_dir

    summary = metrics.summary()
    summary["config"] = config.to_dict()
    summary["elapsed_seconds"] = round(time.time() - start, 3)
    summary["key_fingerprints"] = federation.fingerprints()

    artifacts = {
        "model": write_json(out / MODEL_FILE, federation.central.model.to_dict()),
        "metrics": write_csv(out / METRICS_FILE, metrics.to_frame()),
        "stages": write_csv(out / STAGES_FILE, metrics.stage_costs),
        "summary": write_json(out / SUMMARY_FILE, summary),
    }
    if verbose:
        print(f"\n{'='*60}")
        print("SUCCESS: TRAINING COMPLETE")
        print(f"{'='*60}")
        for name, path in artifacts.items():
            print(f"   {name:<8} {path}")
    return artifacts


def _oracle_curve(federation: Federation) -> tuple:
    """Plaintext arm on the same data, seed, candidates and gradient grid"""
    train, test = federation.train_set, federation.test_set
    params = federation.params
    rows = []

    def record(k, model, scores):
        test_scores = model.predict_raw(test.X)
        rows.append({
            "round": k + 1,
            "test_accuracy": accuracy(test_scores, test.y),
            "test_loss": loss_value(params.loss, test_scores, test.y),
            "train_loss": loss_value(params.loss, scores, train.y),
        })

    model = train_plaintext(train.X, train.y, params, federation.config.seed,
                            candidate_table=federation.ctx.candidate_table,
                            quantize=federation.ctx.codec.quantize, on_round=record)
    base = model.initial_scores(len(test))
    rows.insert(0, {
        "round": 0,
        "test_accuracy": accuracy(base, test.y),
        "test_loss": loss_value(params.loss, base, test.y),
        "train_loss": loss_value(params.loss, model.initial_scores(len(train)), train.y),
    })
    return model, pd.DataFrame(rows)


def cmd_compare(spec: ExperimentSpec, verbose: bool = True) -> ComparisonReport:
    """Both arms on one configuration; per-round curves and the accuracy gap"""
    federation = Federation.from_config(spec.config)
    failure = None
    try:
        metrics = federation.train(verbose=verbose)
        federated = metrics.to_frame()
        stage_costs = metrics.stage_costs
    except FedXGBError as e:
        logger.error("federated arm failed: %s", e)
        failure = f"{type(e).__name__}: {e}"
        federated = federation.metrics.to_frame()
        stage_costs = None

    oracle_model, oracle = _oracle_curve(federation)
    test = federation.test_set
    report = ComparisonReport(federated, oracle, stage_costs, None, None,
                              partial=failure is not None, failure=failure)

    if not federated.empty:
        joined = oracle.merge(federated[["round", "test_accuracy"]], on="round", suffixes=("_oracle", "_fed"))
        gaps = (joined["test_accuracy_oracle"] - joined["test_accuracy_fed"]).abs()
        report.max_accuracy_gap = float(gaps.max()) if len(gaps) else None

    if failure is None:
        fed_model = federation.central.model
        fed_table = confusion_counts(test.y, labels_from_scores(fed_model.predict_raw(test.X)))
        oracle_table = confusion_counts(test.y, labels_from_scores(oracle_model.predict_raw(test.X)))
        report.final_accuracy_gap = abs(accuracy_from_confusion(fed_table) - accuracy_from_confusion(oracle_table))
        report.confusion = {"federated": _confusion_dict(fed_table), "oracle": _confusion_dict(oracle_table)}
        pairs = list(zip(fed_model.trees, oracle_model.trees))
        report.trees_identical = (
            len(fed_model.trees) == len(oracle_model.trees)
            and all(a.structure() == b.structure() for a, b in pairs)
        )
        weight_gaps = [
            abs(x.weight - y.weight)
            for a, b in pairs if a.structure() == b.structure()
            for x, y in zip(a.leaves(), b.leaves())
        ]
        report.max_leaf_weight_gap = max(weight_gaps, default=0.0)

    out = spec.output_dir
    write_csv(out / CURVES_FILE, report.curves())
    if stage_costs is not None:
        write_csv(out / STAGES_FILE, stage_costs)
    write_json(out / COMPARISON_FILE, report.to_dict())

    if verbose:
        print(f"\n{'='*60}")
        print("COMPARISON: FEDERATED vs PLAINTEXT")
        print(f"{'='*60}")
        if report.partial:
            print(f"   PARTIAL: {report.failure}")
        if report.final_accuracy_gap is not None:
            print(f"   Final accuracy gap: {report.final_accuracy_gap * 100:.3f} pp")
        if report.max_accuracy_gap is not None:
            print(f"   Max per-round gap:  {report.max_accuracy_gap * 100:.3f} pp")
        if report.trees_identical is not None:
            print(f"   Trees identical:    {report.trees_identical}")
    return report


def cmd_sweep(spec: ExperimentSpec, verbose: bool = True) -> pd.DataFrame:
    """One run per grid point; failed points are recorded and the sweep continues"""
    rows = []
    for value in spec.values:
        row: Dict[str, Any] = {"axis": spec.axis, "value": value}
        start = time.time()
        try:
            federation = Federation.from_config(spec.point(value))
            metrics = federation.train(verbose=False)
            counts = metrics.role_counts
            last = metrics.rounds[-1]
            row.update({
                "status": "ok",
                "final_accuracy": last["test_accuracy"],
                "user_runtime_proxy": counts.get("user", {}).get("cost_per_participant"),
                "user_bytes": counts.get("user", {}).get("bytes_per_participant"),
                "edge_runtime_proxy": counts.get("edge", {}).get("cost_per_participant"),
                "edge_bytes": counts.get("edge", {}).get("bytes_per_participant"),
                "central_runtime_proxy": counts.get("central", {}).get("cost_per_participant"),
                "messages": last["messages"],
                "aborted_rounds": metrics.aborted_rounds,
                "transcript_hash": metrics.transcript_hash,
            })
        except FedXGBError as e:
            logger.error("sweep point %s=%s failed: %s", spec.axis, value, e)
            row["status"] = f"failed: {type(e).__name__}: {e}"
        row["wall_seconds"] = round(time.time() - start, 3)
        rows.append(row)
        if verbose:
            print(f"   {spec.axis}={value}: {row['status']}  ({row['wall_seconds']:.1f}s)")

    table = pd.DataFrame(rows)
    write_csv(spec.output_dir / f"sweep_{spec.axis}.csv", table)
    return table


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _parse_values(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigurationError(f"bad sweep values '{text}': {e}") from e


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="KEY=VALUE config file with SCHEMA_VERSION=1")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, dest="output_dir", help="Output directory")
    common.add_argument("--dataset", choices=DATASETS)
    common.add_argument("--subsample", type=int, help="Stratified training subsample size")
    common.add_argument("--test-subsample", type=int)
    common.add_argument("--rounds", type=int)
    common.add_argument("--users", type=int, help="Selected users per round across all domains")
    common.add_argument("--edges", type=int, help="Edge servers (domains)")
    common.add_argument("--dropout-rate", type=float)
    common.add_argument("--dropout-scope", choices=DROPOUT_SCOPES)
    common.add_argument("--download", action="store_true", help="Fetch the benchmark files first")
    common.add_argument("--verbose", action="store_true", help="DEBUG logging")

    parser = argparse.ArgumentParser(description="Privacy-preserving federated XGBoost simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="Federated training run")
    sub.add_parser("compare", parents=[common], help="Federated vs plaintext oracle")
    sweep = sub.add_parser("sweep", parents=[common], help="Cost trends over a grid")
    sweep.add_argument("--axis", choices=SWEEP_AXES, required=True)
    sweep.add_argument("--values", required=True, help="Comma-separated grid, e.g. 60,120,180")
    return parser


FLAG_FIELDS = ("seed", "output_dir", "dataset", "subsample", "test_subsample", "rounds",
               "users", "edges", "dropout_rate", "dropout_scope")


def spec_from_args(args: argparse.Namespace, environ=None) -> ExperimentSpec:
    overrides = {name: getattr(args, name, None) for name in FLAG_FIELDS}
    config = load_run_config(args.config, overrides, environ)
    if args.command == "sweep":
        return ExperimentSpec(config, args.axis, _parse_values(args.values))
    return ExperimentSpec(config)


def main(argv: Optional[Sequence[str]] = None, environ=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        spec = spec_from_args(args, environ)
        if args.download and spec.config.dataset != "synthetic":
            BenchmarkDownloader().download(spec.config.dataset)
        if args.command == "train":
            cmd_train(spec)
        elif args.command == "compare":
            report = cmd_compare(spec)
            if report.partial:
                return EXIT_RUNTIME
        else:
            table = cmd_sweep(spec)
            if not (table["status"] == "ok").any():
                return EXIT_RUNTIME
    except (ConfigurationError, DatasetParseError, DatasetFormatError) as e:
        print(f"[error] {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FedXGBError as e:
        print(f"[error] {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
