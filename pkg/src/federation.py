"""
FedXGB protocol participants and the round driver

Users hold data and compute gradients, edge servers aggregate their domain
and jointly run secure comparisons, and the central server grows trees from
domain aggregates. Every exchange goes through the MessageBus; the
Federation object drives the protocol steps in a fixed order so a run is a
pure function of (config, seed).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from src.config import RunConfig
from src.crypto_suite import (
    NONCE_BYTES, Ciphertext, KeyPair, KeyPurpose, PublicKey, PublicParams, SharedKey, Signature,
    aead_decrypt, aead_encrypt, key_agree, key_fingerprint, key_gen, key_setup, message_context,
    sig_sign, sig_verify,
)
from src.data_io import Dataset, partition, resolve_dataset
from src.errors import (
    AuthenticationError, ConfigurationError, DomainAbortedError, IncompleteRoundError,
    RunFailedError, ThresholdError,
)
from src.finite_field import (
    FieldElement, FixedPointCodec, Share, ShareVector, encode_fixed_ints, field_array,
    share_scalar, signed_ints, ss_recon_vector, ss_share_vector, vec_add, zeros,
)
from src.gbt_core import (
    BoostedModel, BoostParams, Cart, NodeStats, SplitCandidate, SplitDecision, TreeGrower,
    accuracy, build_candidate_table, candidates_for, choose_split, compute_gradients,
    left_sums_for, loss_value, sample_features,
)
from src.masking import (
    MaskKeyring, dropout_correction_vector, reconstruct_self_mask, recover_mask_keypair,
    self_mask_vector, unmask_domain_vector,
)
from src.seccmp import (
    ComparisonDealer, Preprocessing, blinding_bits, combine_sign, local_openings,
    local_product, open_values,
)
from src.sim_harness import (
    CENTRAL_ID, CostLedger, DropoutSchedule, MessageBus, MessageKind, ParticipantId,
    PayloadKind, Role, RunMetrics, Stage, TrustedAuthority, decode_payload, edge_id,
    encode_payload, inject_dropout, role_counts, user_id,
)

logger = logging.getLogger(__name__)

DROPOUT_CASES = {
    "before_upload": "case1",
    "during_secfind": "case2",
    "during_secpred": "case3",
}


def domain_sizes(total: int, domains: int) -> List[int]:
    base, extra = divmod(total, domains)
    return [base + (1 if j < extra else 0) for j in range(domains)]


def default_user_threshold(n: int) -> int:
    return min(n, math.ceil(n / 2) + 1)


def default_edge_threshold(theta: int) -> int:
    return min(theta, math.ceil(theta / 2) + 1)


def aggregation_tag(round_index: int, request: dict) -> bytes:
    return (f"{round_index}|{request['seq']}|{request['class_index']}|"
            f"{request['node']}|{request['phase']}").encode()


# ---------------------------------------------------------------------------
# Round bookkeeping
# ---------------------------------------------------------------------------

@dataclass
class DomainRoster:
    """Users an edge server admitted for one round, with their verified keys"""
    edge: ParticipantId
    round_index: int
    selected: List[ParticipantId]
    threshold: int
    mask_publics: Dict[ParticipantId, PublicKey] = field(default_factory=dict)
    encrypt_publics: Dict[ParticipantId, PublicKey] = field(default_factory=dict)
    signatures: Dict[ParticipantId, Signature] = field(default_factory=dict)
    live: List[ParticipantId] = field(default_factory=list)
    excluded: Dict[ParticipantId, str] = field(default_factory=dict)
    frozen: bool = False

    @property
    def domain(self) -> int:
        return self.edge.domain

    def holders(self) -> List[int]:
        return [p.index for p in self.live]

    def exclude(self, pid: ParticipantId, reason: str) -> None:
        if pid in self.live:
            self.live.remove(pid)
            self.excluded[pid] = reason
            logger.info("round %d domain %d: excluded %s (%s)", self.round_index, self.domain, pid, reason)

    def check_threshold(self) -> None:
        if len(self.live) < self.threshold:
            raise DomainAbortedError(
                self.domain, f"{len(self.live)} live users below threshold {self.threshold}"
            )

    def freeze(self) -> None:
        self.check_threshold()
        self.frozen = True


@dataclass(frozen=True)
class SharedThreshold:
    """One split threshold split across the edge servers"""
    node_id: int
    shares: Dict[int, Share]


@dataclass
class RoundState:
    round_index: int
    rosters: Dict[int, DomainRoster] = field(default_factory=dict)
    aborted_domains: Dict[int, str] = field(default_factory=dict)
    trees: List[Cart] = field(default_factory=list)
    current_tree: Optional[Cart] = None
    node_aggregates: Dict[Tuple[int, int, str], Tuple[np.ndarray, ...]] = field(default_factory=dict)
    dropped: Set[ParticipantId] = field(default_factory=set)
    aggregation_seq: int = 0

    def live_domains(self) -> List[int]:
        return sorted(j for j in self.rosters if j not in self.aborted_domains)


@dataclass(frozen=True)
class ProtocolContext:
    """Public material every participant receives at setup"""
    params: BoostParams
    public_params: PublicParams
    codec: FixedPointCodec
    comparison_codec: FixedPointCodec
    candidate_table: Dict[int, np.ndarray]
    authority: TrustedAuthority
    num_edges: int
    edge_threshold: int

    @property
    def prime(self) -> int:
        return self.codec.prime

    @property
    def edge_holders(self) -> List[int]:
        return list(range(1, self.num_edges + 1))


# ---------------------------------------------------------------------------
# Participants
# ---------------------------------------------------------------------------

class Participant:
    def __init__(self, pid: ParticipantId, bus: MessageBus, ledger: CostLedger,
                 rng: np.random.Generator, context: ProtocolContext):
        self.pid = pid
        self.bus = bus
        self.ledger = ledger
        self.rng = rng
        self.ctx = context
        self.sign_pair = context.authority.issue(pid)

    def send(self, receiver: ParticipantId, kind: MessageKind, payload_kind: PayloadKind,
             round_index: int, payload) -> None:
        self.bus.send(self.pid, receiver, kind, payload_kind, round_index, payload)

    def inbox(self, kind: MessageKind):
        return self.bus.receive(self.pid, kind)

    def charge(self, op: str, count: float = 1) -> None:
        self.ledger.charge(self.pid, op, count)

    def nonce(self) -> bytes:
        return self.rng.bytes(NONCE_BYTES)

    def encrypt_for(self, key: SharedKey, receiver: ParticipantId, round_index: int,
                    kind: MessageKind, payload) -> bytes:
        context = message_context(str(self.pid), str(receiver), round_index, kind.name)
        self.charge("encrypt")
        return aead_encrypt(key, encode_payload(payload), context, self.nonce()).to_bytes()

    def decrypt_from(self, key: SharedKey, sender: ParticipantId, round_index: int,
                     kind: MessageKind, data: bytes):
        context = message_context(str(sender), str(self.pid), round_index, kind.name)
        self.charge("decrypt")
        return decode_payload(aead_decrypt(key, Ciphertext.from_bytes(data), context))


class UserNode(Participant):
    """A data holder: local instances, predictions, keys and masks"""

    def __init__(self, pid, bus, ledger, rng, context, data: Dataset, uptime: float):
        super().__init__(pid, bus, ledger, rng, context)
        self.X = data.X
        self.y = data.y
        self.uptime = uptime
        self.online = True
        self.joined = False
        self.trees_seen = 0
        params = context.params
        if params.trees_per_round == 1:
            self.y_hat = np.full(len(self.y), params.base_score, dtype=np.float64)
        else:
            self.y_hat = np.full((len(self.y), params.trees_per_round), params.base_score, dtype=np.float64)
        self.edge = edge_id(pid.domain)
        self.mask_pair: Optional[KeyPair] = None
        self.enc_pair: Optional[KeyPair] = None
        self.keyring: Optional[MaskKeyring] = None
        self.enc_keys: Dict[int, SharedKey] = {}
        self.roster_holders: List[int] = []
        self.threshold = 1
        self.g_fixed: Optional[np.ndarray] = None
        self.h_fixed: Optional[np.ndarray] = None
        self.position = np.zeros(len(self.y), dtype=np.int64)
        self.leaf_ids = np.zeros(len(self.y), dtype=np.int64)
        self._request: Optional[dict] = None
        self._announced: List[List[int]] = []
        self.candidate_table: Dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self.y)

    @property
    def index(self) -> int:
        return self.pid.index

    def _peer(self, index: int) -> ParticipantId:
        return user_id(self.pid.domain, index)

    # Setup and selection

    def receive_parameters(self) -> None:
        """Adopt the published candidate thresholds"""
        for env in self.inbox(MessageKind.CANDIDATES):
            published = env.decoded()
            if int(published["prime"]) != self.ctx.prime:
                raise ConfigurationError(f"{self.pid}: published prime does not match the local field")
            self.candidate_table = {
                int(f): np.asarray(t, dtype=np.float64) for f, t in published["candidates"].items()
            }

    def announce_keys(self, round_index: int) -> None:
        if not self.online or not self.inbox(MessageKind.SELECT):
            return
        pp = self.ctx.public_params
        self.mask_pair = key_gen(pp, KeyPurpose.MASK, self.rng)
        self.enc_pair = key_gen(pp, KeyPurpose.ENCRYPT, self.rng)
        self.charge("keygen", 2)
        message = key_announcement(round_index, self.pid, self.mask_pair.public_key, self.enc_pair.public_key)
        signature = sig_sign(self.sign_pair, message)
        self.charge("sign")
        self.send(self.edge, MessageKind.KEY_ANNOUNCE, PayloadKind.PUBLIC_KEY_BUNDLE, round_index, {
            "mask": self.mask_pair.public_key.point,
            "encrypt": self.enc_pair.public_key.point,
            "signature": signature.der,
        })

    def accept_roster_keys(self, round_index: int) -> None:
        """Verify every peer's announcement and agree mask and encryption keys"""
        if not self.online:
            return
        pp = self.ctx.public_params
        for env in self.inbox(MessageKind.KEY_FORWARD):
            bundle = env.decoded()
            self.threshold = int(bundle["threshold"])
            mask_publics: Dict[int, PublicKey] = {}
            self.enc_keys = {}
            for key, entry in sorted(bundle["users"].items(), key=lambda kv: int(kv[0])):
                index = int(key)
                mask_pub = PublicKey(entry["mask"], KeyPurpose.MASK, pp)
                enc_pub = PublicKey(entry["encrypt"], KeyPurpose.ENCRYPT, pp)
                if index != self.index:
                    peer = self._peer(index)
                    verify_key = self.ctx.authority.verify_key(peer)
                    message = key_announcement(round_index, peer, mask_pub, enc_pub)
                    self.charge("verify")
                    if verify_key is None or not sig_verify(verify_key, message, Signature(entry["signature"])):
                        raise AuthenticationError(f"{self.pid}: forwarded keys of {peer} do not verify")
                    self.enc_keys[index] = key_agree(self.enc_pair, enc_pub)
                    self.charge("agree", 2)
                mask_publics[index] = mask_pub
            self.roster_holders = sorted(mask_publics)
            self.keyring = MaskKeyring(self.index, self.ctx.prime)
            self.keyring.establish_pairwise(self.mask_pair, mask_publics)
            self.joined = True

    def share_mask_key(self, round_index: int) -> None:
        if not self.online or self.keyring is None:
            return
        shares = share_scalar(self.mask_pair.private_key, self.ctx.public_params.scalar_bits,
                              self.threshold, self.roster_holders, self.rng, self.ctx.prime)
        self.charge("share", len(shares[0]) * len(shares))
        for share in shares:
            if share.holder_index == self.index:
                self.keyring.record_mask_key_share(self.index, share)
                continue
            peer = self._peer(share.holder_index)
            body = self.encrypt_for(self.enc_keys[share.holder_index], peer, round_index,
                                    MessageKind.MASK_KEY_SHARE, {"limbs": share.values})
            self.send(self.edge, MessageKind.MASK_KEY_SHARE, PayloadKind.CIPHERTEXT, round_index,
                      {"to": share.holder_index, "ciphertext": body})

    def receive_mask_key_shares(self, round_index: int) -> None:
        if not self.online:
            return
        for env in self.inbox(MessageKind.MASK_KEY_SHARE):
            payload = env.decoded()
            sender = int(payload["from"])
            try:
                plain = self.decrypt_from(self.enc_keys[sender], self._peer(sender), round_index,
                                          MessageKind.MASK_KEY_SHARE, payload["ciphertext"])
            except AuthenticationError as e:
                logger.warning("%s: mask-key share from user %d rejected: %s", self.pid, sender, e)
                self.send(self.edge, MessageKind.FLAG, PayloadKind.CONTROL, round_index, {"sender": sender})
                continue
            self.keyring.record_mask_key_share(
                sender, ShareVector(self.index, field_array(plain["limbs"], self.ctx.prime), self.ctx.prime)
            )

    def apply_roster(self) -> None:
        for env in self.inbox(MessageKind.ROSTER):
            live = sorted(int(i) for i in env.decoded()["live"])
            gone = set(self.roster_holders) - set(live)
            if gone and self.keyring is not None:
                self.keyring.drop_peers(gone)
            self.roster_holders = live

    # Gradients and aggregation

    def compute_gradients(self) -> None:
        params = self.ctx.params
        g, h = compute_gradients(params.loss, self.y_hat, self.y)
        self.g_fixed = self.ctx.codec.to_fixed(g)
        self.h_fixed = self.ctx.codec.to_fixed(h)

    def start_tree(self) -> None:
        self.position = np.zeros(len(self.y), dtype=np.int64)

    def share_self_mask(self, round_index: int) -> None:
        if not self.online:
            return
        self.apply_roster()
        requests = self.inbox(MessageKind.AGGREGATE_REQUEST)
        if not requests:
            return
        self._request = requests[-1].decoded()
        self.keyring.refresh_self_mask(self.rng)
        shares = self.keyring.share_self_mask(self.threshold, self.roster_holders, self.rng)
        self.charge("share", len(shares))
        for share in shares:
            if share.holder_index == self.index:
                self.keyring.record_self_mask_share(self.index, share)
                continue
            peer = self._peer(share.holder_index)
            body = self.encrypt_for(self.enc_keys[share.holder_index], peer, round_index,
                                    MessageKind.SELF_MASK_SHARE, {"value": share.value.value})
            self.send(self.edge, MessageKind.SELF_MASK_SHARE, PayloadKind.CIPHERTEXT, round_index,
                      {"to": share.holder_index, "ciphertext": body})

    def stats_vector(self, request: dict) -> np.ndarray:
        """Fixed-point [G, H, N] at a node, or per-candidate left sums"""
        c = int(request["class_index"])
        here = self.position == int(request["node"])
        g = self.g_fixed if self.g_fixed.ndim == 1 else self.g_fixed[:, c]
        h = self.h_fixed if self.h_fixed.ndim == 1 else self.h_fixed[:, c]
        if request["phase"] == "totals":
            values = np.array([g[here].sum(), h[here].sum(), here.sum()], dtype=np.int64)
        else:
            candidates = candidates_for(self.candidate_table, request["features"])
            G_L, H_L, N_L = left_sums_for(self.X[here], g[here], h[here], candidates)
            values = np.concatenate([G_L, H_L, N_L]).astype(np.int64)
        return encode_fixed_ints(values, self.ctx.prime)

    def upload(self, round_index: int) -> None:
        if not self.online or self._request is None:
            return
        for env in self.inbox(MessageKind.SELF_MASK_SHARE):
            payload = env.decoded()
            sender = int(payload["from"])
            plain = self.decrypt_from(self.enc_keys[sender], self._peer(sender), round_index,
                                      MessageKind.SELF_MASK_SHARE, payload["ciphertext"])
            self.keyring.record_self_mask_share(
                sender, Share(self.index, FieldElement(int(plain["value"]), self.ctx.prime))
            )
        values = self.stats_vector(self._request)
        tag = aggregation_tag(round_index, self._request)
        masked = self.keyring.mask_vector(values, self.roster_holders, round_index, tag)
        self.charge("mask", len(values) * len(self.roster_holders))
        held = {owner: sh.value.value for owner, sh in sorted(self.keyring.self_mask_shares_held.items())}
        self.send(self.edge, MessageKind.MASKED_UPLOAD, PayloadKind.MASKED_VALUE, round_index,
                  {"masked": masked, "self_mask_shares": held})
        self._request = None

    def answer_recovery(self, round_index: int) -> None:
        if not self.online:
            return
        for env in self.inbox(MessageKind.RECOVERY_REQUEST):
            dropped = [int(d) for d in env.decoded()["dropped"]]
            shares = {
                d: self.keyring.mask_key_shares_held[d].values
                for d in dropped if d in self.keyring.mask_key_shares_held
            }
            self.send(self.edge, MessageKind.RECOVERY_SHARE, PayloadKind.SHARE, round_index,
                      {"shares": shares})

    # Secure routing

    def share_features(self, round_index: int) -> None:
        """Share this user's feature values for every announced node with all edges"""
        if not self.online:
            return
        announced = []
        for env in self.inbox(MessageKind.SPLIT_ANNOUNCE):
            announced = [list(map(int, n)) for n in env.decoded()["nodes"]]
        self._announced = announced
        if not announced or len(self.y) == 0:
            return
        values = np.concatenate([self.X[:, feature] for _, feature, _, _ in announced])
        shares = ss_share_vector(self.ctx.comparison_codec.encode_array(values),
                                 self.ctx.edge_threshold, self.ctx.edge_holders, self.rng, self.ctx.prime)
        self.charge("share", len(values) * len(shares))
        for share in shares:
            self.send(edge_id(share.holder_index), MessageKind.FEATURE_SHARE, PayloadKind.SHARE,
                      round_index, {"count": len(self.y), "shares": share.values})

    def comparison_bits(self) -> np.ndarray:
        """Reconstructed bits, one row per announced node; 0 means the value is below the threshold"""
        shares = [
            ShareVector(env.sender.domain, field_array(env.decoded()["shares"], self.ctx.prime), self.ctx.prime)
            for env in self.inbox(MessageKind.CMP_RESULT)
        ]
        if not self._announced or len(self.y) == 0:
            return np.zeros((len(self._announced), len(self.y)), dtype=np.int64)
        if len(shares) < self.ctx.edge_threshold:
            raise ThresholdError(f"{self.pid}: {len(shares)} comparison shares, need {self.ctx.edge_threshold}")
        bits = np.asarray(ss_recon_vector(sorted(shares, key=lambda s: s.holder_index),
                                          self.ctx.edge_threshold)).astype(np.int64)
        self.charge("recon", len(bits))
        if np.any((bits != 0) & (bits != 1)):
            raise AuthenticationError(f"{self.pid}: comparison result is not a bit")
        return bits.reshape(len(self._announced), len(self.y))

    def route_level(self) -> None:
        if not self.online:
            return
        bits = self.comparison_bits()
        for row, (node, _, left, right) in enumerate(self._announced):
            here = self.position == node
            go_left = bits[row] == 0
            self.position[here & go_left] = left
            self.position[here & ~go_left] = right

    def clear_routes(self) -> None:
        self._announced = []
        self.leaf_ids = np.zeros(len(self.y), dtype=np.int64)

    def route_tree(self) -> None:
        if not self.online:
            return
        bits = self.comparison_bits()
        at = np.zeros(len(self.y), dtype=np.int64)
        # parents precede children in node-id order
        for row, (node, _, left, right) in enumerate(self._announced):
            here = at == node
            go_left = bits[row] == 0
            at[here & go_left] = left
            at[here & ~go_left] = right
        self.leaf_ids = at

    def apply_leaf_weights(self) -> None:
        if not self.online:
            return
        for env in self.inbox(MessageKind.LEAF_WEIGHTS):
            payload = env.decoded()
            weights = {int(k): float(v) for k, v in payload["weights"].items()}
            w = np.array([weights.get(int(i), 0.0) for i in self.leaf_ids], dtype=np.float64)
            update = self.ctx.params.eta * w
            if self.y_hat.ndim == 1:
                self.y_hat = self.y_hat + update
            else:
                c = int(payload["class_index"])
                self.y_hat[:, c] = self.y_hat[:, c] + update
            self.trees_seen += 1


def key_announcement(round_index: int, pid: ParticipantId, mask_pub: PublicKey, enc_pub: PublicKey) -> bytes:
    return f"{round_index}|{pid}|".encode() + mask_pub.point + b"|" + enc_pub.point


class EdgeServer(Participant):
    """Aggregates one domain and holds one share in every secure comparison"""

    def __init__(self, pid, bus, ledger, rng, context):
        super().__init__(pid, bus, ledger, rng, context)
        self.enc_pair = key_gen(context.public_params, KeyPurpose.ENCRYPT, rng)
        self.charge("keygen")
        self.central_key: Optional[SharedKey] = None
        self.roster: Optional[DomainRoster] = None
        self._uploads: Dict[int, dict] = {}
        self._cmp_left: Optional[ShareVector] = None
        self._cmp_right: Optional[ShareVector] = None
        self._cmp_layout: List[Tuple[ParticipantId, int]] = []
        self._cmp_pre: Optional[Preprocessing] = None
        self._threshold_shares: Dict[int, int] = {}

    @property
    def domain(self) -> int:
        return self.pid.domain

    def connect_central(self, central_public: PublicKey) -> None:
        self.central_key = key_agree(self.enc_pair, central_public)
        self.charge("agree")

    def relay_down(self, round_index: int, kind: MessageKind, payload_kind: PayloadKind,
                   users: Iterable[ParticipantId]) -> None:
        """Forward messages of one kind from the central server to users of this domain"""
        users = [u for u in users if u.domain == self.domain]
        for env in self.inbox(kind):
            for u in users:
                self.send(u, kind, payload_kind, round_index, env.payload)

    # Selection and key shares

    def open_roster(self, round_index: int, chosen: Sequence[ParticipantId], threshold: int) -> DomainRoster:
        self.roster = DomainRoster(self.pid, round_index, list(chosen), threshold)
        for pid in chosen:
            self.send(pid, MessageKind.SELECT, PayloadKind.CONTROL, round_index, {"threshold": threshold})
        return self.roster

    def abort(self, round_index: int, reason: str):
        logger.warning("round %d: domain %d aborts: %s", round_index, self.domain, reason)
        self.send(CENTRAL_ID, MessageKind.DOMAIN_ABORT, PayloadKind.CONTROL, round_index, {"reason": reason})
        raise DomainAbortedError(self.domain, reason)

    def verify_announcements(self, round_index: int) -> None:
        roster = self.roster
        pp = self.ctx.public_params
        for env in self.inbox(MessageKind.KEY_ANNOUNCE):
            if env.sender not in roster.selected:
                continue
            bundle = env.decoded()
            mask_pub = PublicKey(bundle["mask"], KeyPurpose.MASK, pp)
            enc_pub = PublicKey(bundle["encrypt"], KeyPurpose.ENCRYPT, pp)
            verify_key = self.ctx.authority.verify_key(env.sender)
            message = key_announcement(round_index, env.sender, mask_pub, enc_pub)
            self.charge("verify")
            if verify_key is None or not sig_verify(verify_key, message, Signature(bundle["signature"])):
                roster.excluded[env.sender] = "signature verification failed"
                logger.warning("round %d domain %d: signature of %s failed verification; excluded",
                               round_index, self.domain, env.sender)
                continue
            roster.mask_publics[env.sender] = mask_pub
            roster.encrypt_publics[env.sender] = enc_pub
            roster.signatures[env.sender] = Signature(bundle["signature"])
        roster.live = [p for p in roster.selected if p in roster.mask_publics]
        for pid in roster.selected:
            if pid not in roster.mask_publics and pid not in roster.excluded:
                roster.excluded[pid] = "no key announcement"
        try:
            roster.freeze()
        except DomainAbortedError as e:
            self.abort(round_index, str(e))
        bundle = {
            "threshold": roster.threshold,
            "users": {
                p.index: {
                    "mask": roster.mask_publics[p].point,
                    "encrypt": roster.encrypt_publics[p].point,
                    "signature": roster.signatures[p].der,
                }
                for p in roster.live
            },
        }
        for pid in roster.live:
            self.send(pid, MessageKind.KEY_FORWARD, PayloadKind.PUBLIC_KEY_BUNDLE, round_index, bundle)
        self.send(CENTRAL_ID, MessageKind.KEY_FORWARD, PayloadKind.PUBLIC_KEY_BUNDLE, round_index, bundle)

    def relay_between_users(self, round_index: int, kind: MessageKind) -> Set[int]:
        """Forward user-to-user ciphertexts; returns the senders seen"""
        senders = set()
        for env in self.inbox(kind):
            payload = env.decoded()
            senders.add(env.sender.index)
            target = user_id(self.domain, int(payload["to"]))
            self.send(target, kind, PayloadKind.CIPHERTEXT, round_index,
                      {"from": env.sender.index, "ciphertext": payload["ciphertext"]})
        return senders

    def relay_mask_key_shares(self, round_index: int) -> None:
        senders = self.relay_between_users(round_index, MessageKind.MASK_KEY_SHARE)
        if len(self.roster.live) > 1:
            for pid in list(self.roster.live):
                if pid.index not in senders:
                    self.roster.exclude(pid, "no mask-key shares before upload")

    def close_key_collection(self, round_index: int) -> None:
        for env in self.inbox(MessageKind.FLAG):
            flagged = user_id(self.domain, int(env.decoded()["sender"]))
            self.roster.exclude(flagged, f"share decryption failed at {env.sender}")
        try:
            self.roster.check_threshold()
        except DomainAbortedError as e:
            self.abort(round_index, str(e))
        self.publish_roster(round_index)

    def publish_roster(self, round_index: int) -> None:
        live = self.roster.holders()
        for pid in self.roster.live:
            self.send(pid, MessageKind.ROSTER, PayloadKind.CONTROL, round_index, {"live": live})
        self.send(CENTRAL_ID, MessageKind.ROSTER_UPDATE, PayloadKind.CONTROL, round_index, {
            "live": live,
            "excluded": sorted(p.index for p in self.roster.excluded),
        })

    # Masked aggregation

    def collect_uploads(self, round_index: int) -> List[ParticipantId]:
        """Store masked uploads; returns roster users that did not upload"""
        roster = self.roster
        self._uploads = {}
        for env in self.inbox(MessageKind.MASKED_UPLOAD):
            if env.sender in roster.live:
                self._uploads[env.sender.index] = env.decoded()
        missing = [p for p in roster.live if p.index not in self._uploads]
        if len(self._uploads) < roster.threshold:
            self.abort(round_index, f"{len(self._uploads)} uploads below threshold {roster.threshold}")
        if missing:
            logger.info("round %d domain %d: %d users missing at upload; recovering their masks",
                        round_index, self.domain, len(missing))
            request = {"dropped": [p.index for p in missing]}
            for index in sorted(self._uploads):
                self.send(user_id(self.domain, index), MessageKind.RECOVERY_REQUEST,
                          PayloadKind.CONTROL, round_index, request)
        return missing

    def finish_aggregation(self, round_index: int, tag: bytes, size: int,
                           missing: Sequence[ParticipantId]) -> None:
        """Remove self masks, cancel dropped users' pairwise masks, forward the domain sum"""
        roster = self.roster
        prime = self.ctx.prime
        t = roster.threshold
        survivors = sorted(self._uploads)

        corrections = []
        if missing:
            recovery: Dict[int, List[ShareVector]] = {p.index: [] for p in missing}
            for env in self.inbox(MessageKind.RECOVERY_SHARE):
                for key, limbs in env.decoded()["shares"].items():
                    if int(key) in recovery:
                        recovery[int(key)].append(
                            ShareVector(env.sender.index, field_array(limbs, prime), prime)
                        )
            survivor_publics = {i: roster.mask_publics[user_id(self.domain, i)] for i in survivors}
            for pid in missing:
                shares = sorted(recovery[pid.index], key=lambda s: s.holder_index)
                if len(shares) < t:
                    self.abort(round_index, f"{len(shares)} recovery shares for {pid}, need {t}")
                pair = recover_mask_keypair(shares, t, roster.mask_publics[pid])
                self.charge("recon", len(shares[0]))
                corrections.append(dropout_correction_vector(
                    pair, pid.index, survivor_publics, round_index, tag, size, prime
                ))
                self.charge("agree", len(survivor_publics))
                self.charge("mask", size * len(survivor_publics))

        self_masks = {}
        for owner in survivors:
            shares = [
                Share(holder, FieldElement(int(self._uploads[holder]["self_mask_shares"][str(owner)]), prime))
                for holder in survivors if str(owner) in self._uploads[holder]["self_mask_shares"]
            ]
            if len(shares) < t:
                self.abort(round_index, f"{len(shares)} self-mask shares for user {owner}, need {t}")
            self_masks[owner] = self_mask_vector(reconstruct_self_mask(shares, t), tag, size)
            self.charge("recon")
            self.charge("mask", size)

        masked = {i: field_array(self._uploads[i]["masked"], prime) for i in survivors}
        total = unmask_domain_vector(masked, self_masks, size, prime, corrections)
        self.charge("field_op", size * (len(survivors) + len(corrections)))

        if missing:
            for pid in missing:
                roster.exclude(pid, "dropped during aggregation")
            self.publish_roster(round_index)

        body = self.encrypt_for(self.central_key, CENTRAL_ID, round_index, MessageKind.DOMAIN_AGGREGATE,
                                {"sum": total})
        self.send(CENTRAL_ID, MessageKind.DOMAIN_AGGREGATE, PayloadKind.CIPHERTEXT, round_index,
                  {"ciphertext": body, "contributors": len(survivors)})
        self._uploads = {}

    # Secure comparison

    def receive_thresholds(self) -> None:
        for env in self.inbox(MessageKind.THRESHOLD_SHARE):
            payload = env.decoded()
            self._threshold_shares = {int(n): int(v) for n, v in zip(payload["nodes"], payload["shares"])}

    def open_comparison(self, round_index: int, audience: Sequence[ParticipantId],
                        nodes: Sequence[int], pre: Preprocessing, combiner: ParticipantId) -> None:
        """Assemble [threshold] and [feature] vectors in audience order and send openings"""
        prime = self.ctx.prime
        received = {env.sender: env.decoded() for env in self.inbox(MessageKind.FEATURE_SHARE)}
        left, right, layout = [], [], []
        for pid in audience:
            payload = received.get(pid)
            if payload is None:
                continue
            count = int(payload["count"])
            layout.append((pid, count * len(nodes)))
            right.extend(int(v) for v in payload["shares"])
            for node in nodes:
                left.extend([self._threshold_shares[node]] * count)
        self._cmp_layout = layout
        self._cmp_left = ShareVector(self.domain, field_array(left, prime), prime)
        self._cmp_right = ShareVector(self.domain, field_array(right, prime), prime)
        self._cmp_pre = pre
        eps, phi = local_openings(self._cmp_left, self._cmp_right, pre)
        self.charge("compare", len(left))
        self.send(combiner, MessageKind.CMP_OPENING, PayloadKind.SHARE, round_index,
                  {"eps": eps.values, "phi": phi.values})

    def combine_openings(self, round_index: int, edges: Sequence[ParticipantId]) -> None:
        prime = self.ctx.prime
        t = self.ctx.edge_threshold
        eps_shares, phi_shares = [], []
        for env in self.inbox(MessageKind.CMP_OPENING):
            payload = env.decoded()
            eps_shares.append(ShareVector(env.sender.domain, field_array(payload["eps"], prime), prime))
            phi_shares.append(ShareVector(env.sender.domain, field_array(payload["phi"], prime), prime))
        eps = open_values(sorted(eps_shares, key=lambda s: s.holder_index), t)
        phi = open_values(sorted(phi_shares, key=lambda s: s.holder_index), t)
        self.charge("recon", 2 * len(eps))
        for e in edges:
            self.send(e, MessageKind.CMP_OPENED, PayloadKind.MASKED_VALUE, round_index,
                      {"eps": eps, "phi": phi})

    def multiply(self, round_index: int, combiner: ParticipantId) -> None:
        prime = self.ctx.prime
        for env in self.inbox(MessageKind.CMP_OPENED):
            payload = env.decoded()
            product = local_product(self._cmp_pre, field_array(payload["eps"], prime),
                                    field_array(payload["phi"], prime))
            self.charge("compare", len(product))
            self.send(combiner, MessageKind.CMP_PRODUCT, PayloadKind.SHARE, round_index,
                      {"product": product.values})

    def combine_sign(self, round_index: int, edges: Sequence[ParticipantId], limit: int) -> None:
        prime = self.ctx.prime
        products = [
            ShareVector(env.sender.domain, field_array(env.decoded()["product"], prime), prime)
            for env in self.inbox(MessageKind.CMP_PRODUCT)
        ]
        bits = combine_sign(sorted(products, key=lambda s: s.holder_index), self.ctx.edge_threshold,
                            self.ctx.edge_holders, self.rng, limit)
        self.charge("recon", len(bits[0]))
        self.charge("share", len(bits[0]))
        for share in bits:
            self.send(edge_id(share.holder_index), MessageKind.CMP_BIT_SHARE, PayloadKind.SHARE,
                      round_index, {"bits": share.values})

    def deliver_results(self, round_index: int) -> None:
        for env in self.inbox(MessageKind.CMP_BIT_SHARE):
            bits = field_array(env.decoded()["bits"], self.ctx.prime)
            start = 0
            for pid, width in self._cmp_layout:
                self.send(pid, MessageKind.CMP_RESULT, PayloadKind.SHARE, round_index,
                          {"shares": bits[start:start + width]})
                start += width
        self._cmp_pre = None


class CentralServer(Participant):
    """Grows trees from domain aggregates and owns the model"""

    def __init__(self, pid, bus, ledger, rng, context, num_features: int):
        super().__init__(pid, bus, ledger, rng, context)
        self.enc_pair = key_gen(context.public_params, KeyPurpose.ENCRYPT, rng)
        self.charge("keygen")
        self.edge_keys: Dict[int, SharedKey] = {}
        self.model = BoostedModel(context.params, num_features)
        self.signature_failures: List[ParticipantId] = []

    def connect_edge(self, domain: int, edge_public: PublicKey) -> None:
        self.edge_keys[domain] = key_agree(self.enc_pair, edge_public)
        self.charge("agree")

    def publish(self, round_index: int, edges: Sequence[ParticipantId]) -> None:
        ctx = self.ctx
        payload = {
            "security_parameter": ctx.public_params.security_parameter,
            "group": ctx.public_params.group,
            "prime": str(ctx.prime),
            "fractional_bits": ctx.codec.fractional_bits,
            "edge_threshold": ctx.edge_threshold,
            "eta": ctx.params.eta,
            "gamma": ctx.params.gamma,
            "lam": ctx.params.lam,
            "max_depth": ctx.params.max_depth,
            "loss": ctx.params.loss.value,
            "candidates": {f: t for f, t in sorted(ctx.candidate_table.items())},
        }
        for e in edges:
            self.send(e, MessageKind.CANDIDATES, PayloadKind.PUBLIC_PARAMETERS, round_index, payload)

    def verify_forwarded(self, round_index: int, domain: int) -> List[ParticipantId]:
        """Check the edge-forwarded key bundles; returns users whose signatures fail"""
        pp = self.ctx.public_params
        failed = []
        for env in self.inbox(MessageKind.KEY_FORWARD):
            for key, entry in env.decoded()["users"].items():
                pid = user_id(env.sender.domain, int(key))
                message = key_announcement(round_index, pid, PublicKey(entry["mask"], KeyPurpose.MASK, pp),
                                           PublicKey(entry["encrypt"], KeyPurpose.ENCRYPT, pp))
                verify_key = self.ctx.authority.verify_key(pid)
                self.charge("verify")
                if verify_key is None or not sig_verify(verify_key, message, Signature(entry["signature"])):
                    failed.append(pid)
        if failed:
            logger.warning("round %d: central rejects forwarded keys of %s", round_index,
                           ", ".join(map(str, failed)))
            self.signature_failures.extend(failed)
        return failed

    def observe_rosters(self) -> Dict[int, List[int]]:
        return {env.sender.domain: env.decoded()["live"] for env in self.inbox(MessageKind.ROSTER_UPDATE)}

    def request_aggregation(self, round_index: int, request: dict, domains: Sequence[int]) -> None:
        for j in domains:
            self.send(edge_id(j), MessageKind.AGGREGATE_REQUEST, PayloadKind.CONTROL, round_index, request)

    def collect_aggregates(self, round_index: int, size: int) -> Tuple[np.ndarray, Dict[int, str]]:
        prime = self.ctx.prime
        total = zeros(size, prime)
        self.observe_rosters()
        aborted = {env.sender.domain: env.decoded()["reason"] for env in self.inbox(MessageKind.DOMAIN_ABORT)}
        for env in self.inbox(MessageKind.DOMAIN_AGGREGATE):
            if env.sender.domain in aborted:
                continue
            plain = self.decrypt_from(self.edge_keys[env.sender.domain], env.sender, round_index,
                                      MessageKind.DOMAIN_AGGREGATE, env.decoded()["ciphertext"])
            total = vec_add(total, field_array(plain["sum"], prime), prime)
            self.charge("field_op", size)
        return total, aborted

    def share_thresholds(self, round_index: int, nodes: Sequence[Tuple[int, int, float, int, int]]
                         ) -> List[SharedThreshold]:
        ctx = self.ctx
        values = ctx.comparison_codec.encode_array([threshold for _, _, threshold, _, _ in nodes])
        shares = ss_share_vector(values, ctx.edge_threshold, ctx.edge_holders, self.rng, ctx.prime)
        self.charge("share", len(values) * len(shares))
        for share in shares:
            self.send(edge_id(share.holder_index), MessageKind.THRESHOLD_SHARE, PayloadKind.SHARE,
                      round_index, {"nodes": [n[0] for n in nodes], "shares": share.values})
        return [
            SharedThreshold(node[0], {
                s.holder_index: Share(s.holder_index, FieldElement(int(s.values[i]), ctx.prime))
                for s in shares
            })
            for i, node in enumerate(nodes)
        ]

    def announce_splits(self, round_index: int, nodes: Sequence[Tuple[int, int, float, int, int]]) -> None:
        payload = {"nodes": [[node, feature, left, right] for node, feature, _, left, right in nodes]}
        for j in self.ctx.edge_holders:
            self.send(edge_id(j), MessageKind.SPLIT_ANNOUNCE, PayloadKind.CONTROL, round_index, payload)

    def send_leaf_weights(self, round_index: int, tree: Cart) -> None:
        payload = {
            "class_index": tree.class_index,
            "weights": {n.node_id: n.weight for n in tree.leaves()},
        }
        for j in self.ctx.edge_holders:
            self.send(edge_id(j), MessageKind.LEAF_WEIGHTS, PayloadKind.CONTROL, round_index, payload)


# ---------------------------------------------------------------------------
# Statistics provider for the tree grower
# ---------------------------------------------------------------------------

class FederatedStats:
    """Node statistics obtained by masked aggregation over the live domains"""

    def __init__(self, federation: "Federation", round_index: int, class_index: int, features: Sequence[int]):
        self.federation = federation
        self.round_index = round_index
        self.class_index = class_index
        self.features = [int(f) for f in features]
        self.pending: List[Tuple[int, SplitCandidate, int, int]] = []

    def _flush(self) -> None:
        if self.pending:
            self.federation.route_split_level(self.round_index, self.pending)
            self.pending = []

    def _decode(self, vector: np.ndarray) -> np.ndarray:
        return np.asarray(signed_ints(vector, self.federation.ctx.prime), dtype=np.int64)

    def node_totals(self, node_id: int) -> NodeStats:
        self._flush()
        request = {"class_index": self.class_index, "node": node_id, "phase": "totals"}
        ints = self._decode(self.federation.aggregate(self.round_index, request, 3))
        scale = self.federation.ctx.codec.scale
        stats = NodeStats(float(ints[0] / scale), float(ints[1] / scale), int(ints[2]))
        self.federation.state.node_aggregates[(self.class_index, node_id, "totals")] = (ints,)
        return stats

    def left_sums(self, node_id: int, candidates: Sequence[SplitCandidate]):
        self._flush()
        request = {"class_index": self.class_index, "node": node_id, "phase": "left_sums",
                   "features": self.features}
        size = 3 * len(candidates)
        ints = self._decode(self.federation.aggregate(self.round_index, request, size))
        scale = self.federation.ctx.codec.scale
        C = len(candidates)
        G_L = ints[:C] / scale
        H_L = ints[C:2 * C] / scale
        N_L = ints[2 * C:]
        self.federation.state.node_aggregates[(self.class_index, node_id, "left")] = (G_L, H_L, N_L)
        return G_L, H_L, N_L

    def apply_split(self, node_id: int, candidate: SplitCandidate, left_id: int, right_id: int) -> None:
        self.pending.append((node_id, candidate, left_id, right_id))


# ---------------------------------------------------------------------------
# Protocol driver
# ---------------------------------------------------------------------------

class Federation:
    """
    One simulated deployment: users grouped into edge domains, the edge
    servers and the central server, wired through a single MessageBus.
    """

    def __init__(self, config: RunConfig, train: Dataset, test: Dataset, keep_log: bool = False):
        self.config = config.validate()
        self.train_set = train
        self.test_set = test
        self.bus = MessageBus(keep_log=keep_log)
        self.ledger = CostLedger(config.cost_weights)
        self.schedule = DropoutSchedule(config.dropout_rate, config.dropout_period, config.dropout_scope)
        self.metrics = RunMetrics()
        self.state = RoundState(-1)
        self._dropout_rounds: Set[int] = set()
        self.setup_run()

    @classmethod
    def from_config(cls, config: RunConfig, keep_log: bool = False) -> "Federation":
        train, test = resolve_dataset(
            config.dataset, config.seed, subsample=config.subsample,
            test_subsample=config.test_subsample, synthetic_instances=config.synthetic_instances,
            synthetic_features=config.synthetic_features,
        )
        return cls(config, train, test, keep_log=keep_log)

    # Setup

    def _spare_counts(self, sizes: Sequence[int]) -> List[int]:
        cfg = self.config
        if cfg.spare_users is not None:
            return domain_sizes(cfg.spare_users, cfg.edges)
        events = self.schedule.events(cfg.rounds)
        return [self.schedule.count_for(n) * events for n in sizes]

    def setup_run(self) -> None:
        """Publish parameters, issue keys and place every user's data partition"""
        cfg = self.config
        if len(self.train_set) == 0:
            raise ConfigurationError("training set is empty")
        loss = cfg.loss or ("logistic" if self.train_set.num_classes == 2 else "softmax")
        params = BoostParams(
            eta=cfg.eta, gamma=cfg.gamma, lam=cfg.lam, max_depth=cfg.max_depth, rounds=cfg.rounds,
            feature_subsample=cfg.feature_subsample, max_candidates=cfg.max_candidates,
            min_node_instances=cfg.min_node_instances, loss=loss,
            num_classes=self.train_set.num_classes,
        ).validate()
        codec = FixedPointCodec(cfg.fractional_bits, cfg.prime, cfg.max_summands)
        comparison_codec = FixedPointCodec(cfg.fractional_bits, cfg.prime, 1, cfg.comparison_range_bound)
        public_params = key_setup(cfg.security_level)

        self.domain_targets = dict(zip(range(1, cfg.edges + 1), domain_sizes(cfg.users, cfg.edges)))
        if cfg.user_threshold is not None and cfg.user_threshold > min(self.domain_targets.values()):
            raise ConfigurationError(
                f"user_threshold {cfg.user_threshold} exceeds the smallest domain "
                f"({min(self.domain_targets.values())} users)"
            )
        spares = self._spare_counts(list(self.domain_targets.values()))

        self.ctx = ProtocolContext(
            params=params,
            public_params=public_params,
            codec=codec,
            comparison_codec=comparison_codec,
            candidate_table=build_candidate_table(self.train_set.X, params.max_candidates),
            authority=TrustedAuthority(public_params, np.random.default_rng([cfg.seed, 0x7A])),
            num_edges=cfg.edges,
            edge_threshold=cfg.edge_threshold or default_edge_threshold(cfg.edges),
        )
        self.dealer = ComparisonDealer(np.random.default_rng([cfg.seed, 0xDEA1]), cfg.prime,
                                       blinding_bits(comparison_codec))
        self.dropout_rng = np.random.default_rng([cfg.seed, 0xD409])

        self.central = CentralServer(CENTRAL_ID, self.bus, self.ledger,
                                     np.random.default_rng([cfg.seed, 0xCE]), self.ctx,
                                     self.train_set.num_features)
        self.edges: Dict[int, EdgeServer] = {
            j: EdgeServer(edge_id(j), self.bus, self.ledger, np.random.default_rng([cfg.seed, 0xED, j]), self.ctx)
            for j in range(1, cfg.edges + 1)
        }
        for j, edge in self.edges.items():
            edge.connect_central(self.central.enc_pair.public_key)
            self.central.connect_edge(j, edge.enc_pair.public_key)

        self.population: Dict[int, List[ParticipantId]] = {
            j: [user_id(j, i) for i in range(1, self.domain_targets[j] + spares[j - 1] + 1)]
            for j in self.edges
        }
        everyone = [pid for j in sorted(self.population) for pid in self.population[j]]
        placement = partition(len(self.train_set), everyone, cfg.seed)
        uptime_rng = np.random.default_rng([cfg.seed, 0x0B7])
        uptimes = uptime_rng.uniform(0.5, 1.0, size=len(everyone))
        self.users: Dict[ParticipantId, UserNode] = {}
        for pid, uptime in zip(everyone, uptimes):
            data = self.train_set.subset(placement.assignments[pid])
            rng = np.random.default_rng([cfg.seed, 0x05E4, pid.domain, pid.index])
            self.users[pid] = UserNode(pid, self.bus, self.ledger, rng, self.ctx, data, float(uptime))

        self.central.publish(0, [e.pid for e in self.edges.values()])
        for j, edge in self.edges.items():
            edge.relay_down(0, MessageKind.CANDIDATES, PayloadKind.PUBLIC_PARAMETERS, self.population[j])
        for user in self.users.values():
            user.receive_parameters()
        logger.info("setup: %d edges, %d users (%d spare), edge threshold %d, %d candidate features",
                    cfg.edges, len(everyone), sum(spares), self.ctx.edge_threshold,
                    len(self.ctx.candidate_table))

    # Accessors

    @property
    def params(self) -> BoostParams:
        return self.ctx.params

    def fingerprints(self) -> Dict[str, str]:
        keys = {str(CENTRAL_ID): key_fingerprint(self.central.enc_pair.public_key)}
        keys.update({str(e.pid): key_fingerprint(e.enc_pair.public_key) for e in self.edges.values()})
        keys.update({str(pid): key_fingerprint(u.sign_pair.public_key) for pid, u in self.users.items()})
        return keys

    def roster_users(self) -> List[UserNode]:
        """Online users admitted in the live domains of the current round"""
        state = self.state
        return [
            self.users[pid]
            for j in state.live_domains() for pid in state.rosters[j].live
            if self.users[pid].online
        ]

    def prediction_audience(self, trees_seen: Optional[int] = None) -> List[UserNode]:
        """Online users holding model predictions, optionally only those that have seen ``trees_seen`` trees"""
        return [
            u for _, u in sorted(self.users.items())
            if u.online and u.joined and (trees_seen is None or u.trees_seen == trees_seen)
        ]

    def participants_by_role(self) -> Dict[Role, List[ParticipantId]]:
        return {
            Role.USER: sorted(pid for pid, u in self.users.items() if u.joined),
            Role.EDGE: [e.pid for e in self.edges.values()],
            Role.CENTRAL: [CENTRAL_ID],
        }

    def _abort_domain(self, domain: int, reason: str) -> None:
        if domain not in self.state.aborted_domains:
            self.state.aborted_domains[domain] = reason

    # Step 2: user selection

    def select_users(self, domain: int, round_index: int) -> DomainRoster:
        """Choose active users, collect and verify their signed key announcements"""
        cfg = self.config
        edge = self.edges[domain]
        edge.roster = None
        online = [pid for pid in self.population[domain] if self.users[pid].online]
        if cfg.selection_policy == "all":
            chosen = online
        else:
            ranked = sorted(online, key=lambda p: (-self.users[p].uptime, p.index))
            chosen = sorted(ranked[:self.domain_targets[domain]])
        if not chosen:
            raise DomainAbortedError(domain, "no online users to select")
        threshold = cfg.user_threshold or default_user_threshold(len(chosen))
        roster = edge.open_roster(round_index, chosen, threshold)
        for pid in chosen:
            self.users[pid].announce_keys(round_index)
        edge.verify_announcements(round_index)
        failed = self.central.verify_forwarded(round_index, domain)
        for pid in failed:
            roster.exclude(pid, "central rejected forwarded keys")
        for pid in roster.live:
            self.users[pid].accept_roster_keys(round_index)
        return roster

    # Step 3: mask-key shares

    def collect_key_shares(self, roster: DomainRoster, round_index: int) -> Dict[ParticipantId, int]:
        """Every admitted user shares its private mask key with its peers, encrypted via the edge"""
        edge = self.edges[roster.domain]
        members = [self.users[pid] for pid in roster.live]
        for u in members:
            u.share_mask_key(round_index)
        edge.relay_mask_key_shares(round_index)
        for u in members:
            u.receive_mask_key_shares(round_index)
        edge.close_key_collection(round_index)
        self.central.observe_rosters()
        for pid in roster.live:
            self.users[pid].apply_roster()
        return {pid: len(self.users[pid].keyring.mask_key_shares_held) for pid in roster.live}

    # Dropout

    def maybe_inject(self, scope: str, round_index: int) -> Set[ParticipantId]:
        if scope != self.schedule.scope or round_index in self._dropout_rounds:
            return set()
        if not self.schedule.fires(round_index):
            return set()
        self._dropout_rounds.add(round_index)
        live = {
            j: [pid for pid in self.state.rosters[j].live if self.users[pid].online]
            for j in self.state.live_domains()
        }
        dropped = inject_dropout(self.schedule, round_index, live, self.dropout_rng)
        self.handle_dropout(DROPOUT_CASES[scope], dropped)
        return dropped

    def handle_dropout(self, case: str, participants: Iterable[ParticipantId]) -> None:
        """
        Disconnect users for good.

        case1: the edge rejects what they would upload and drops them from the roster.
        case2: the edge rebuilds their mask keys from survivor shares at the next upload.
        case3: prediction requests to them are ignored; the next selection skips them.
        """
        for pid in sorted(participants):
            user = self.users[pid]
            user.online = False
            self.bus.disconnect(pid)
            self.state.dropped.add(pid)
            self.metrics.dropout_events.append(
                {"round": self.state.round_index, "case": case, "user": str(pid)}
            )
            logger.info("round %d: %s dropped (%s)", self.state.round_index, pid, case)

    # Step 4: boosting

    def aggregate(self, round_index: int, request: dict, size: int) -> np.ndarray:
        """One masked aggregation across live domains; returns the field sum at central"""
        state = self.state
        state.aggregation_seq += 1
        request = dict(request, seq=state.aggregation_seq)
        tag = aggregation_tag(round_index, request)
        domains = state.live_domains()
        if not domains:
            raise IncompleteRoundError(f"round {round_index}: no live domain left")

        self.central.request_aggregation(round_index, request, domains)
        for j in domains:
            self.edges[j].relay_down(round_index, MessageKind.AGGREGATE_REQUEST, PayloadKind.CONTROL,
                                     state.rosters[j].live)
        members = self.roster_users()
        for u in members:
            u.share_self_mask(round_index)
        for j in domains:
            self.edges[j].relay_between_users(round_index, MessageKind.SELF_MASK_SHARE)
        self.maybe_inject("during_secfind", round_index)
        for u in members:
            u.upload(round_index)

        missing: Dict[int, List[ParticipantId]] = {}
        for j in domains:
            try:
                missing[j] = self.edges[j].collect_uploads(round_index)
            except DomainAbortedError as e:
                self._abort_domain(j, str(e))
        for u in members:
            u.answer_recovery(round_index)
        for j in sorted(missing):
            try:
                self.edges[j].finish_aggregation(round_index, tag, size, missing[j])
            except DomainAbortedError as e:
                self._abort_domain(j, str(e))

        total, aborted = self.central.collect_aggregates(round_index, size)
        for j, reason in sorted(aborted.items()):
            self._abort_domain(j, reason)
        newly = sorted(set(aborted) & set(domains))
        if newly:
            raise DomainAbortedError(newly[0], state.aborted_domains[newly[0]])
        return total

    def sec_find(self, round_index: int, node_id: int, class_index: int,
                 features: Sequence[int]) -> Tuple[NodeStats, Optional[SplitDecision]]:
        """Node totals, per-candidate left sums and the best admissible split"""
        provider = FederatedStats(self, round_index, class_index, features)
        candidates = candidates_for(self.ctx.candidate_table, features)
        stats = provider.node_totals(node_id)
        if not candidates:
            return stats, None
        G_L, H_L, N_L = provider.left_sums(node_id, candidates)
        return stats, choose_split(stats, candidates, G_L, H_L, N_L, self.params)

    def grow_tree(self, round_index: int, class_index: int, features: Sequence[int]) -> Cart:
        for u in self.roster_users():
            u.start_tree()
        grower = TreeGrower(self.params, self.ctx.candidate_table, features, class_index, round_index)
        tree = grower.grow(FederatedStats(self, round_index, class_index, features))
        self.state.current_tree = tree
        return tree

    def route_split_level(self, round_index: int, splits: Sequence[Tuple[int, SplitCandidate, int, int]]) -> None:
        """Move each user's instances from freshly split nodes to their children"""
        nodes = [(node, c.feature, c.threshold, left, right) for node, c, left, right in splits]
        audience = self.roster_users()
        self._secure_compare(round_index, nodes, audience)
        for u in audience:
            u.route_level()

    def _secure_compare(self, round_index: int, nodes: Sequence[Tuple[int, int, float, int, int]],
                        audience: Sequence[UserNode]) -> None:
        audience = [u for u in audience if u.online]
        pids = [u.pid for u in audience]
        edges = [e.pid for e in self.edges.values()]
        combiner = self.edges[1]

        self.central.share_thresholds(round_index, nodes)
        self.central.announce_splits(round_index, nodes)
        for edge in self.edges.values():
            edge.relay_down(round_index, MessageKind.SPLIT_ANNOUNCE, PayloadKind.CONTROL, pids)
        for u in audience:
            u.share_features(round_index)

        size = sum(len(u) for u in audience) * len(nodes)
        if size == 0:
            for edge in self.edges.values():
                edge.inbox(MessageKind.THRESHOLD_SHARE)
            return
        preprocessing = self.dealer.deal(size, self.ctx.edge_threshold, self.ctx.edge_holders)
        node_ids = [n[0] for n in nodes]
        for j, edge in self.edges.items():
            edge.receive_thresholds()
            edge.open_comparison(round_index, pids, node_ids, preprocessing[j], combiner.pid)
        combiner.combine_openings(round_index, edges)
        for edge in self.edges.values():
            edge.multiply(round_index, combiner.pid)
        codec = self.ctx.comparison_codec
        limit = int(2 * codec.range_bound * codec.scale) << self.dealer.blind_bits
        combiner.combine_sign(round_index, edges, limit)
        for edge in self.edges.values():
            edge.deliver_results(round_index)

    def sec_pred(self, tree: Cart, audience: Sequence[UserNode], round_index: int) -> Dict[ParticipantId, np.ndarray]:
        """Route every audience instance through the tree on shared thresholds, then apply leaf weights"""
        audience = [u for u in audience if u.online]
        nodes = [(n.node_id, n.feature, n.threshold, n.left, n.right) for n in tree.internal_nodes()]
        if nodes and audience:
            self._secure_compare(round_index, nodes, audience)
        for u in audience:
            if nodes:
                u.route_tree()
            else:
                u.clear_routes()
        self.central.send_leaf_weights(round_index, tree)
        for edge in self.edges.values():
            edge.relay_down(round_index, MessageKind.LEAF_WEIGHTS, PayloadKind.CONTROL, [u.pid for u in audience])
        for u in audience:
            u.apply_leaf_weights()
        return {u.pid: u.leaf_ids.copy() for u in audience}

    def catch_up(self, round_index: int) -> None:
        """Bring users joining after the first round up to the current model"""
        trees = self.central.model.trees
        late = [u for u in self.prediction_audience() if u.trees_seen < len(trees)]
        if not late:
            return
        logger.info("round %d: catching up %d newly joined users on %d trees", round_index, len(late), len(trees))
        for i, tree in enumerate(trees):
            audience = [u for u in late if u.trees_seen == i]
            if audience:
                self.sec_pred(tree, audience, round_index)

    def prepare_round(self, round_index: int) -> RoundState:
        """User selection and key-share collection for every domain"""
        self.state = RoundState(round_index)
        state = self.state
        with self.ledger.in_stage(Stage.USER_SELECTION):
            for j in sorted(self.edges):
                try:
                    state.rosters[j] = self.select_users(j, round_index)
                except DomainAbortedError as e:
                    state.rosters[j] = self.edges[j].roster or DomainRoster(edge_id(j), round_index, [], 1)
                    self._abort_domain(j, str(e))
        if not state.live_domains():
            raise IncompleteRoundError(f"round {round_index}: no domain could form a roster")

        with self.ledger.in_stage(Stage.MASK_COLLECTION):
            self.maybe_inject("before_upload", round_index)
            for j in state.live_domains():
                try:
                    self.collect_key_shares(state.rosters[j], round_index)
                except DomainAbortedError as e:
                    self._abort_domain(j, str(e))
        if not state.live_domains():
            raise IncompleteRoundError(f"round {round_index}: every domain aborted during key sharing")

        with self.ledger.in_stage(Stage.PREDICTION):
            self.catch_up(round_index)
        with self.ledger.in_stage(Stage.BOOSTING):
            for u in self.roster_users():
                u.compute_gradients()
        return state

    def sec_boost_round(self, round_index: int) -> List[Cart]:
        """Grow this round's trees (one per class) and deliver predictions"""
        state = self.state
        trees = []
        for c in range(self.params.trees_per_round):
            features = sample_features(self.train_set.num_features, self.params.feature_subsample,
                                       self.config.seed, round_index, c)
            tree = None
            while tree is None:
                if not state.live_domains():
                    raise IncompleteRoundError(f"round {round_index}: every domain aborted")
                try:
                    with self.ledger.in_stage(Stage.BOOSTING):
                        tree = self.grow_tree(round_index, c, features)
                except DomainAbortedError as e:
                    logger.warning("round %d class %d: regrowing tree without domain %s", round_index, c, e.domain)
            state.trees.append(tree)
            self.maybe_inject("during_secpred", round_index)
            with self.ledger.in_stage(Stage.PREDICTION):
                seen = len(self.central.model.trees) + len(state.trees) - 1
                self.sec_pred(tree, self.prediction_audience(seen), round_index)
            trees.append(tree)
        return trees

    # Training loop

    def _snapshot(self):
        return {pid: (u.y_hat.copy(), u.trees_seen, u.joined) for pid, u in self.users.items()}

    def _restore(self, snapshot) -> None:
        for pid, (y_hat, seen, joined) in snapshot.items():
            user = self.users[pid]
            user.y_hat, user.trees_seen, user.joined = y_hat, seen, joined

    def training_loss(self) -> Tuple[float, float]:
        users = self.prediction_audience()
        if not users or not any(len(u) for u in users):
            return 0.0, 0.0
        scores = np.concatenate([u.y_hat for u in users if len(u)])
        labels = np.concatenate([u.y for u in users if len(u)])
        return loss_value(self.params.loss, scores, labels), accuracy(scores, labels)

    def _record(self, completed: int) -> None:
        model = self.central.model
        test_scores = model.predict_raw(self.test_set.X)
        train_loss, train_accuracy = self.training_loss()
        self.metrics.record_round(
            round=completed,
            test_accuracy=accuracy(test_scores, self.test_set.y),
            test_loss=loss_value(self.params.loss, test_scores, self.test_set.y),
            train_loss=train_loss,
            train_accuracy=train_accuracy,
            live_users=len(self.roster_users()) if completed else 0,
            dropped_users=sum(1 for u in self.users.values() if not u.online),
            aborted_domains=len(self.state.aborted_domains) if completed else 0,
            trees=len(model.trees),
            messages=self.bus.sent,
            bytes=sum(self.bus.bytes_sent.values()),
        )

    def run_round(self, round_index: int) -> List[Cart]:
        self.prepare_round(round_index)
        return self.sec_boost_round(round_index)

    def train(self, verbose: bool = True) -> RunMetrics:
        """
        Run every boosting round; a round in which every domain aborts is
        retried with fresh rosters up to ``max_round_retries`` times.
        """
        cfg = self.config
        if verbose:
            print(f"\n{'='*60}")
            print(f"FEDXGB TRAINING: {self.train_set.name}")
            print(f"{'='*60}\n")
            print(f" Users:      {cfg.users} in {cfg.edges} domains")
            print(f" Instances:  {len(self.train_set):,} train / {len(self.test_set):,} test")
            print(f" Rounds:     {cfg.rounds}  (depth {cfg.max_depth}, eta {cfg.eta})")
            print(f" Dropout:    {cfg.dropout_rate:.0%} every {cfg.dropout_period} rounds ({cfg.dropout_scope})\n")

        self._record(0)
        for k in range(cfg.rounds):
            attempts = 0
            while True:
                snapshot = self._snapshot()
                self.bus.flush_pending(f"starting round {k}")
                try:
                    trees = self.run_round(k)
                    break
                except IncompleteRoundError as e:
                    self._restore(snapshot)
                    attempts += 1
                    self.metrics.aborted_rounds += 1
                    logger.warning("round %d aborted (attempt %d): %s", k, attempts, e)
                    if attempts > cfg.max_round_retries:
                        raise RunFailedError(
                            f"round {k} aborted {attempts} times; last cause: {e}"
                        ) from e
            self.central.model.trees.extend(trees)
            self._record(k + 1)
            if verbose:
                row = self.metrics.rounds[-1]
                print(f" round {k + 1:>3}: test acc {row['test_accuracy']:.4f}  "
                      f"train loss {row['train_loss']:.4f}  users {row['live_users']}")

        self.metrics.stage_costs = self.ledger.stage_table(self.participants_by_role())
        self.metrics.wall_clock = {s.value: v for s, v in self.ledger.wall.items()}
        self.metrics.role_counts = role_counts(self.bus, self.ledger, self.participants_by_role())
        self.metrics.transcript_hash = self.bus.transcript_hash()
        if verbose:
            print(f"\n{'='*60}")
            print(f" Transcript hash: {self.metrics.transcript_hash[:16]}")
            print(f"{'='*60}\n")
        return self.metrics
