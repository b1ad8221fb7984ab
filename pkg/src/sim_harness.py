"""
Deterministic single-process execution support for FedXGB runs

The message bus (mailboxes with per-pair sequence numbers), payload codec,
cost ledger, dropout schedule, the signature-key authority fixture and the
metrics collected over a run.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from collections import defaultdict, deque
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Any, Deque, Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np
import pandas as pd

from src.config import DEFAULT_COST_WEIGHTS
from src.crypto_suite import KeyPair, KeyPurpose, PublicKey, PublicParams, key_gen

logger = logging.getLogger(__name__)

WIRE_FORMAT_VERSION = 1


class Role(str, Enum):
    USER = "user"
    EDGE = "edge"
    CENTRAL = "central"


@dataclass(frozen=True, order=True)
class ParticipantId:
    role: Role
    domain: int
    index: int

    def __str__(self):
        return f"{self.role.value}:{self.domain}:{self.index}"


CENTRAL_ID = ParticipantId(Role.CENTRAL, 0, 0)


def edge_id(domain: int) -> ParticipantId:
    return ParticipantId(Role.EDGE, domain, 0)


def user_id(domain: int, index: int) -> ParticipantId:
    return ParticipantId(Role.USER, domain, index)


class MessageKind(IntEnum):
    """Stable numeric tags; documented in documentation/WIRE_FORMAT.md"""
    SELECT = 10
    KEY_ANNOUNCE = 11
    KEY_FORWARD = 12
    ROSTER = 13
    MASK_KEY_SHARE = 20
    ROSTER_UPDATE = 21
    FLAG = 22
    CANDIDATES = 30
    SELF_MASK_SHARE = 31
    MASKED_UPLOAD = 32
    RECOVERY_REQUEST = 33
    RECOVERY_SHARE = 34
    DOMAIN_AGGREGATE = 35
    DOMAIN_ABORT = 36
    AGGREGATE_REQUEST = 37
    SPLIT_ANNOUNCE = 40
    THRESHOLD_SHARE = 41
    FEATURE_SHARE = 42
    CMP_OPENING = 43
    CMP_OPENED = 44
    CMP_PRODUCT = 45
    CMP_BIT_SHARE = 46
    CMP_RESULT = 47
    LEAF_WEIGHTS = 50


class PayloadKind(str, Enum):
    SHARE = "share"
    MASKED_VALUE = "masked_value"
    CIPHERTEXT = "ciphertext"
    PUBLIC_KEY_BUNDLE = "public_key_bundle"
    PUBLIC_PARAMETERS = "public_parameters"
    CONTROL = "control"
    RAW_GRADIENT = "raw_gradient"
    RAW_THRESHOLD = "raw_threshold"


NUMERIC_PAYLOADS = {PayloadKind.SHARE, PayloadKind.MASKED_VALUE, PayloadKind.CIPHERTEXT}
FORBIDDEN_PAYLOADS = {PayloadKind.RAW_GRADIENT, PayloadKind.RAW_THRESHOLD}


class Stage(str, Enum):
    USER_SELECTION = "user_selection"
    MASK_COLLECTION = "mask_collection"
    BOOSTING = "boosting"
    PREDICTION = "prediction"


# ---------------------------------------------------------------------------
# Payload codec
# ---------------------------------------------------------------------------

def _to_jsonable(obj):
    if isinstance(obj, bytes):
        return {"__b__": obj.hex()}
    if isinstance(obj, np.ndarray):
        if obj.dtype.kind == "f":
            return [float(v) for v in obj]
        return [int(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, Mapping):
        return {str(k): _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        if set(obj) == {"__b__"}:
            return bytes.fromhex(obj["__b__"])
        return {k: _from_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_from_jsonable(v) for v in obj]
    return obj


def encode_payload(payload: Any) -> bytes:
    return json.dumps(_to_jsonable(payload), sort_keys=True, separators=(",", ":")).encode()


def decode_payload(data: bytes) -> Any:
    return _from_jsonable(json.loads(data.decode()))


def contains_float(obj) -> bool:
    if isinstance(obj, float):
        return True
    if isinstance(obj, dict):
        return any(contains_float(v) for v in obj.values())
    if isinstance(obj, list):
        return any(contains_float(v) for v in obj)
    return False


# ---------------------------------------------------------------------------
# Bus
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Envelope:
    sender: ParticipantId
    receiver: ParticipantId
    kind: MessageKind
    payload_kind: PayloadKind
    round_index: int
    payload: bytes
    sequence: int

    def header(self) -> bytes:
        return (f"{self.sender}>{self.receiver}|{int(self.kind)}|{self.payload_kind.value}|"
                f"{self.round_index}|{self.sequence}|").encode()

    def decoded(self):
        return decode_payload(self.payload)


class MessageBus:
    """
    In-process mailboxes.

    Sequence numbers increase per (sender, receiver) pair and every sent
    envelope ends up delivered or discarded by an explicit disconnect rule.
    """

    def __init__(self, keep_log: bool = False):
        self.keep_log = keep_log
        self.log: List[Envelope] = []
        self._queues: Dict[ParticipantId, Deque[Envelope]] = defaultdict(deque)
        self._sequence: Dict[Tuple[ParticipantId, ParticipantId], int] = defaultdict(int)
        self._disconnected: Set[ParticipantId] = set()
        self._hash = hashlib.sha256()
        self.tamper = None
        self.sent = 0
        self.delivered = 0
        self.discarded = 0
        self.messages_sent: Dict[ParticipantId, int] = defaultdict(int)
        self.bytes_sent: Dict[ParticipantId, int] = defaultdict(int)
        self.bytes_received: Dict[ParticipantId, int] = defaultdict(int)

    def disconnect(self, pid: ParticipantId) -> None:
        if pid in self._disconnected:
            return
        self._disconnected.add(pid)
        pending = self._queues.pop(pid, deque())
        if pending:
            logger.info("discarding %d pending envelopes for disconnected %s", len(pending), pid)
        self.discarded += len(pending)

    def is_connected(self, pid: ParticipantId) -> bool:
        return pid not in self._disconnected

    def send(self, sender: ParticipantId, receiver: ParticipantId, kind: MessageKind,
             payload_kind: PayloadKind, round_index: int, payload: Any) -> Optional[Envelope]:
        data = payload if isinstance(payload, bytes) else encode_payload(payload)
        pair = (sender, receiver)
        self._sequence[pair] += 1
        env = Envelope(sender, receiver, kind, payload_kind, round_index, data, self._sequence[pair])
        if self.tamper is not None:
            env = self.tamper(env)
        self.sent += 1
        self.messages_sent[sender] += 1
        self.bytes_sent[sender] += len(env.payload)
        self._hash.update(env.header())
        self._hash.update(hashlib.sha256(env.payload).digest())
        if self.keep_log:
            self.log.append(env)
        if sender in self._disconnected or receiver in self._disconnected:
            logger.debug("discarding %s from %s to %s (disconnected)", kind.name, sender, receiver)
            self.discarded += 1
            return None
        self._queues[receiver].append(env)
        return env

    def receive(self, receiver: ParticipantId, kind: Optional[MessageKind] = None) -> List[Envelope]:
        """Pop deliverable envelopes (optionally of one kind) in send order"""
        queue = self._queues.get(receiver)
        if not queue:
            return []
        taken, kept = [], deque()
        for env in queue:
            (taken if kind is None or env.kind == kind else kept).append(env)
        self._queues[receiver] = kept
        self.delivered += len(taken)
        for env in taken:
            self.bytes_received[receiver] += len(env.payload)
        return taken

    def flush_pending(self, reason: str) -> int:
        """Discard every undelivered envelope (a round attempt is being restarted)"""
        count = sum(len(q) for q in self._queues.values())
        if count:
            logger.info("discarding %d undelivered envelopes: %s", count, reason)
        self._queues.clear()
        self.discarded += count
        return count

    @property
    def pending(self) -> int:
        return sum(len(q) for q in self._queues.values())

    def conserved(self) -> bool:
        return self.sent == self.delivered + self.discarded + self.pending

    def transcript_hash(self) -> str:
        return self._hash.copy().hexdigest()


def audit_transcript(envelopes: Iterable[Envelope]) -> List[str]:
    """Privacy-structure violations on user-to-edge and edge-to-central traffic"""
    violations = []
    for env in envelopes:
        route = (env.sender.role, env.receiver.role)
        if route not in ((Role.USER, Role.EDGE), (Role.EDGE, Role.CENTRAL)):
            continue
        where = f"{env.kind.name} {env.sender}->{env.receiver} seq {env.sequence}"
        if env.payload_kind in FORBIDDEN_PAYLOADS:
            violations.append(f"{where}: forbidden payload {env.payload_kind.value}")
        elif env.payload_kind not in NUMERIC_PAYLOADS and contains_float(env.decoded()):
            violations.append(f"{where}: real values in a {env.payload_kind.value} payload")
    return violations


# ---------------------------------------------------------------------------
# Simulated cost
# ---------------------------------------------------------------------------

class CostLedger:
    """Per-participant simulated cost and wall-clock time, split by stage"""

    def __init__(self, weights: Optional[Mapping[str, float]] = None):
        self.weights = dict(DEFAULT_COST_WEIGHTS)
        self.weights.update(weights or {})
        self.stage = Stage.USER_SELECTION
        self.units: Dict[Tuple[ParticipantId, Stage], float] = defaultdict(float)
        self.op_counts: Dict[str, int] = defaultdict(int)
        self.wall: Dict[Stage, float] = defaultdict(float)

    @contextmanager
    def in_stage(self, stage: Stage):
        previous = self.stage
        self.stage = stage
        started = time.perf_counter()
        try:
            yield
        finally:
            self.wall[stage] += time.perf_counter() - started
            self.stage = previous

    def charge(self, pid: ParticipantId, op: str, count: float = 1) -> None:
        self.units[(pid, self.stage)] += self.weights[op] * count
        self.op_counts[op] += int(count)

    def total(self, pid: ParticipantId) -> float:
        return sum(v for (p, _), v in self.units.items() if p == pid)

    def stage_table(self, participants: Mapping[Role, Sequence[ParticipantId]]) -> pd.DataFrame:
        """Mean simulated cost per participant of each role, by stage"""
        rows = []
        for stage in Stage:
            row = {"stage": stage.value}
            for role in Role:
                pids = participants.get(role, [])
                total = sum(self.units.get((p, stage), 0.0) for p in pids)
                row[f"{role.value}_cost"] = round(total / len(pids), 6) if pids else 0.0
            rows.append(row)
        return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# Dropout and the signature-key authority
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DropoutSchedule:
    rate: float = 0.0
    period: int = 10
    scope: str = "during_secfind"

    def fires(self, round_index: int) -> bool:
        return self.rate > 0 and (round_index + 1) % self.period == 0

    def events(self, rounds: int) -> int:
        return sum(1 for k in range(rounds) if self.fires(k))

    def count_for(self, roster_size: int) -> int:
        return int(math.floor(self.rate * roster_size + 0.5))


def inject_dropout(schedule: DropoutSchedule, round_index: int,
                   live_by_domain: Mapping[int, Sequence[ParticipantId]],
                   rng: np.random.Generator) -> Set[ParticipantId]:
    """Users chosen to disconnect this round (per-domain share of the rate)"""
    if not schedule.fires(round_index):
        return set()
    dropped: Set[ParticipantId] = set()
    for domain in sorted(live_by_domain):
        live = sorted(live_by_domain[domain])
        count = min(len(live), schedule.count_for(len(live)))
        if count:
            picks = rng.choice(len(live), size=count, replace=False)
            dropped.update(live[i] for i in sorted(picks))
    return dropped


class TrustedAuthority:
    """Out-of-band issuer of signature key pairs, run before training starts"""

    def __init__(self, params: PublicParams, rng: np.random.Generator):
        self.params = params
        self.rng = rng
        self._keys: Dict[ParticipantId, KeyPair] = {}

    def issue(self, pid: ParticipantId) -> KeyPair:
        if pid not in self._keys:
            self._keys[pid] = key_gen(self.params, KeyPurpose.SIGN, self.rng)
        return self._keys[pid]

    def verify_key(self, pid: ParticipantId) -> Optional[PublicKey]:
        pair = self._keys.get(pid)
        return pair.public_key if pair else None


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass
class RunMetrics:
    rounds: List[Dict[str, Any]] = field(default_factory=list)
    stage_costs: Optional[pd.DataFrame] = None
    wall_clock: Dict[str, float] = field(default_factory=dict)
    role_counts: Dict[str, Dict[str, float]] = field(default_factory=dict)
    transcript_hash: str = ""
    aborted_rounds: int = 0
    dropout_events: List[Dict[str, Any]] = field(default_factory=list)

    def record_round(self, **values) -> None:
        if self.rounds and values["round"] <= self.rounds[-1]["round"]:
            raise ValueError("rounds must be recorded in increasing order")
        self.rounds.append(values)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rounds)

    def write_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.10g")

    def summary(self) -> Dict[str, Any]:
        last = self.rounds[-1] if self.rounds else {}
        return {
            "wire_format_version": WIRE_FORMAT_VERSION,
            "rounds_completed": len(self.rounds),
            "aborted_rounds": self.aborted_rounds,
            "final_accuracy": last.get("test_accuracy"),
            "final_loss": last.get("train_loss"),
            "transcript_hash": self.transcript_hash,
            "role_counts": self.role_counts,
            "wall_clock_seconds": {k: round(v, 4) for k, v in self.wall_clock.items()},
            "dropout_events": self.dropout_events,
        }


def role_counts(bus: MessageBus, ledger: CostLedger,
                participants: Mapping[Role, Sequence[ParticipantId]]) -> Dict[str, Dict[str, float]]:
    """Mean messages, bytes and cost per participant of each role"""
    out = {}
    for role, pids in participants.items():
        if not pids:
            continue
        n = len(pids)
        out[role.value] = {
            "participants": n,
            "messages_per_participant": sum(bus.messages_sent[p] for p in pids) / n,
            "bytes_per_participant": sum(bus.bytes_sent[p] + bus.bytes_received[p] for p in pids) / n,
            "cost_per_participant": sum(ledger.total(p) for p in pids) / n,
        }
    return out


def run(config, keep_log: bool = False, verbose: bool = True):
    """
    Execute a full training run

    Returns:
    --------
    (RunMetrics, BoostedModel, Federation)
    """
    from src.federation import Federation

    federation = Federation.from_config(config, keep_log=keep_log)
    metrics = federation.train(verbose=verbose)
    return metrics, federation.central.model, federation
