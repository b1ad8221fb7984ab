#!/usr/bin/env python3
"""
Message bus, payload codec, transcript audit, cost ledger and dropout schedule
"""

import dataclasses
import sys
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

sys.path.append(str(Path(__file__).parent.parent.parent))

from src.crypto_suite import key_setup, sig_sign, sig_verify
from src.sim_harness import (
    CENTRAL_ID, CostLedger, DropoutSchedule, MessageBus, MessageKind, PayloadKind, Role,
    RunMetrics, Stage, TrustedAuthority, audit_transcript, decode_payload, edge_id,
    encode_payload, inject_dropout, role_counts, user_id,
)
from src.tests.suite import run_suite


def test_payload_codec():
    payload = {"values": np.array([1, 2, 3], dtype=np.uint64), "nonce": b"\x00\xff", "n": np.int64(4)}
    decoded = decode_payload(encode_payload(payload))
    assert decoded == {"values": [1, 2, 3], "nonce": b"\x00\xff", "n": 4}
    # canonical: key order does not matter
    assert encode_payload({"a": 1, "b": 2}) == encode_payload({"b": 2, "a": 1})


def test_bus_delivery_order_and_conservation():
    bus = MessageBus(keep_log=True)
    u, e = user_id(0, 1), edge_id(0)
    for i in range(3):
        bus.send(u, e, MessageKind.MASKED_UPLOAD, PayloadKind.MASKED_VALUE, 0, {"i": i})
    bus.send(u, e, MessageKind.FLAG, PayloadKind.CONTROL, 0, {"sender": "x"})
    uploads = bus.receive(e, MessageKind.MASKED_UPLOAD)
    assert [env.decoded()["i"] for env in uploads] == [0, 1, 2]
    assert [env.sequence for env in uploads] == [1, 2, 3]
    assert bus.pending == 1
    assert bus.conserved()
    assert [env.kind for env in bus.receive(e)] == [MessageKind.FLAG]
    assert bus.pending == 0 and bus.conserved()
    assert bus.bytes_sent[u] == sum(len(env.payload) for env in bus.log)


def test_disconnect_discards():
    bus = MessageBus()
    u, e = user_id(1, 2), edge_id(1)
    bus.send(e, u, MessageKind.ROSTER, PayloadKind.CONTROL, 0, {})
    bus.disconnect(u)
    assert bus.discarded == 1
    assert bus.send(u, e, MessageKind.MASKED_UPLOAD, PayloadKind.MASKED_VALUE, 0, {}) is None
    assert bus.send(e, u, MessageKind.ROSTER, PayloadKind.CONTROL, 0, {}) is None
    assert bus.discarded == 3
    assert bus.receive(u) == []
    bus.send(e, CENTRAL_ID, MessageKind.DOMAIN_AGGREGATE, PayloadKind.SHARE, 0, {})
    assert bus.flush_pending("restart") == 1
    assert bus.conserved()


def test_tamper_hook_and_hash():
    def run(tamper):
        bus = MessageBus()
        bus.tamper = tamper
        bus.send(user_id(0, 1), edge_id(0), MessageKind.KEY_ANNOUNCE,
                 PayloadKind.PUBLIC_KEY_BUNDLE, 0, {"k": 1})
        return bus
    clean = run(None)
    again = run(None)
    assert clean.transcript_hash() == again.transcript_hash()
    tampered = run(lambda env: dataclasses.replace(env, payload=b"{}"))
    assert tampered.transcript_hash() != clean.transcript_hash()
    assert tampered.receive(edge_id(0))[0].payload == b"{}"


def test_audit_transcript():
    bus = MessageBus(keep_log=True)
    u, e = user_id(0, 1), edge_id(0)
    bus.send(u, e, MessageKind.MASKED_UPLOAD, PayloadKind.MASKED_VALUE, 0, {"v": [1, 2]})
    bus.send(e, CENTRAL_ID, MessageKind.DOMAIN_AGGREGATE, PayloadKind.SHARE, 0, {"v": [3]})
    # central may broadcast public reals downward
    bus.send(CENTRAL_ID, e, MessageKind.CANDIDATES, PayloadKind.PUBLIC_PARAMETERS, 0, {"t": [0.5]})
    assert audit_transcript(bus.log) == []
    bus.send(u, e, MessageKind.FEATURE_SHARE, PayloadKind.RAW_THRESHOLD, 0, {"t": 1})
    bus.send(e, CENTRAL_ID, MessageKind.FLAG, PayloadKind.CONTROL, 0, {"g": 0.25})
    problems = audit_transcript(bus.log)
    assert len(problems) == 2
    assert "forbidden payload raw_threshold" in problems[0]
    assert "real values" in problems[1]


def test_cost_ledger_stages():
    ledger = CostLedger({"sign": 10.0})
    u, e = user_id(0, 1), edge_id(0)
    ledger.charge(u, "keygen")
    with ledger.in_stage(Stage.BOOSTING):
        ledger.charge(u, "sign", 2)
        ledger.charge(e, "compare", 4)
    assert ledger.stage is Stage.USER_SELECTION
    assert ledger.total(u) == 25.0 + 20.0
    table = ledger.stage_table({Role.USER: [u], Role.EDGE: [e], Role.CENTRAL: []})
    assert isinstance(table, pd.DataFrame)
    boosting = table.set_index("stage").loc["boosting"]
    assert boosting["user_cost"] == 20.0
    assert boosting["edge_cost"] == 2.0
    assert boosting["central_cost"] == 0.0
    assert ledger.wall[Stage.BOOSTING] >= 0.0


def test_dropout_schedule():
    schedule = DropoutSchedule(rate=0.1, period=10)
    assert [k for k in range(30) if schedule.fires(k)] == [9, 19, 29]
    assert schedule.events(50) == 5
    assert schedule.count_for(300) == 30
    live = {0: [user_id(0, i) for i in range(1, 151)], 1: [user_id(1, i) for i in range(1, 151)]}
    dropped = inject_dropout(schedule, 9, live, np.random.default_rng(0))
    assert len(dropped) == 30
    assert inject_dropout(schedule, 8, live, np.random.default_rng(0)) == set()
    assert inject_dropout(DropoutSchedule(), 9, live, np.random.default_rng(0)) == set()
    again = inject_dropout(schedule, 9, live, np.random.default_rng(0))
    assert again == dropped


def test_authority_issues_signature_keys():
    authority = TrustedAuthority(key_setup(256), np.random.default_rng(1))
    pid = user_id(0, 1)
    pair = authority.issue(pid)
    assert authority.issue(pid) is pair
    assert authority.verify_key(pid) == pair.public_key
    assert authority.verify_key(user_id(0, 2)) is None
    assert sig_verify(authority.verify_key(pid), b"m", sig_sign(pair, b"m"))


def test_run_metrics_and_role_counts():
    metrics = RunMetrics()
    metrics.record_round(round=1, train_loss=0.5, test_accuracy=0.8)
    metrics.record_round(round=2, train_loss=0.4, test_accuracy=0.85)
    with pytest.raises(ValueError):
        metrics.record_round(round=2, train_loss=0.3, test_accuracy=0.9)
    summary = metrics.summary()
    assert summary["rounds_completed"] == 2
    assert summary["final_accuracy"] == 0.85
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "metrics.csv"
        metrics.write_csv(path)
        frame = pd.read_csv(path)
    assert list(frame["round"]) == [1, 2]

    bus, ledger = MessageBus(), CostLedger()
    u1, u2 = user_id(0, 1), user_id(0, 2)
    bus.send(u1, edge_id(0), MessageKind.MASKED_UPLOAD, PayloadKind.MASKED_VALUE, 0, b"1234")
    counts = role_counts(bus, ledger, {Role.USER: [u1, u2], Role.EDGE: []})
    assert counts["user"]["messages_per_participant"] == 0.5
    assert counts["user"]["bytes_per_participant"] == 2.0
    assert "edge" not in counts


def run_all_tests():
    return run_suite("SIMULATION HARNESS", [
        ("Payload codec", test_payload_codec),
        ("Bus order and conservation", test_bus_delivery_order_and_conservation),
        ("Disconnect discards", test_disconnect_discards),
        ("Tamper hook and hash", test_tamper_hook_and_hash),
        ("Transcript audit", test_audit_transcript),
        ("Cost ledger", test_cost_ledger_stages),
        ("Dropout schedule", test_dropout_schedule),
        ("Signature authority", test_authority_issues_signature_keys),
        ("Metrics and role counts", test_run_metrics_and_role_counts),
    ])


if __name__ == "__main__":
    sys.exit(0 if run_all_tests() else 1)
