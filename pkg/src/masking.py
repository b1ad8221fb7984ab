"""
Secret masking of per-user sums (self mask plus signed pairwise masks),
self-mask sharing and reconstruction, domain unmasking, and recovery of a
dropped user's pairwise masks from the shares of its private mask key.

Scalar functions follow the masking equation literally. Vector functions
expand each key into a pseudorandom field vector so a whole statistics
vector is masked with one key.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from src.config import DEFAULT_PRIME
from src.crypto_suite import KeyPair, KeyPurpose, PublicKey, SharedKey, key_agree, keypair_from_scalar
from src.errors import AuthenticationError, IncompleteRoundError, RosterError
from src.finite_field import (
    FieldElement, Share, ShareVector, random_field_int, random_field_vector,
    recon_scalar, ss_recon, ss_share, vec_add, vec_sub, zeros,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MaskedValue:
    value: FieldElement


def _digest(*parts: bytes) -> bytes:
    h = hashlib.sha256()
    for part in parts:
        h.update(len(part).to_bytes(4, "big"))
        h.update(part)
    return h.digest()


def derive_pairwise_mask(shared_key: SharedKey, round_index: int, tag: bytes,
                         prime: int = DEFAULT_PRIME) -> FieldElement:
    d = _digest(shared_key.material, round_index.to_bytes(8, "big"), tag)
    return FieldElement(int.from_bytes(d, "big") % prime, prime)


def expand_mask(seed_material: bytes, size: int, prime: int = DEFAULT_PRIME) -> np.ndarray:
    """Pseudorandom field vector from seed bytes"""
    seed = int.from_bytes(_digest(b"fedxgb/prg", seed_material), "big")
    return random_field_vector(np.random.default_rng(seed), size, prime)


def pairwise_mask_vector(shared_key: SharedKey, round_index: int, tag: bytes, size: int,
                         prime: int = DEFAULT_PRIME) -> np.ndarray:
    return expand_mask(shared_key.material + round_index.to_bytes(8, "big") + tag, size, prime)


def self_mask_vector(r_u: FieldElement, tag: bytes, size: int) -> np.ndarray:
    return expand_mask(r_u.value.to_bytes(16, "big") + tag, size, r_u.prime)


def _check_peers(owner: int, peers: Iterable[int], roster: Sequence[int]) -> None:
    expected = set(roster) - {owner}
    got = set(peers)
    if owner not in set(roster) or got != expected:
        raise RosterError(
            f"masks for {sorted(got)} do not match live peers {sorted(expected)} of user {owner}"
        )


def sec_mask(s: FieldElement, r_u: FieldElement, owner: int,
             peer_masks: Mapping[int, FieldElement], roster: Sequence[int]) -> MaskedValue:
    """s + r_u + sum of masks with lower-indexed peers - sum with higher-indexed peers"""
    _check_peers(owner, peer_masks, roster)
    value = s + r_u
    for peer in sorted(peer_masks):
        value = value + peer_masks[peer] if owner > peer else value - peer_masks[peer]
    return MaskedValue(value)


def sec_mask_vector(values: np.ndarray, self_mask: np.ndarray, owner: int,
                    peer_masks: Mapping[int, np.ndarray], roster: Sequence[int],
                    prime: int = DEFAULT_PRIME) -> np.ndarray:
    _check_peers(owner, peer_masks, roster)
    out = vec_add(values, self_mask, prime)
    for peer in sorted(peer_masks):
        if owner > peer:
            out = vec_add(out, peer_masks[peer], prime)
        else:
            out = vec_sub(out, peer_masks[peer], prime)
    return out


def share_self_mask(r_u: FieldElement, t: int, roster: Sequence[int],
                    rng: np.random.Generator) -> List[Share]:
    return ss_share(r_u, t, roster, rng)


def reconstruct_self_mask(shares: Sequence[Share], t: int) -> FieldElement:
    return ss_recon(shares, t)


def unmask_domain_aggregate(masked: Mapping[int, MaskedValue],
                            recovered_self_masks: Mapping[int, FieldElement],
                            corrections: Sequence[FieldElement] = ()) -> FieldElement:
    """Field sum of the contributors' secrets once self masks are removed"""
    missing = set(masked) - set(recovered_self_masks)
    if missing:
        raise IncompleteRoundError(f"no self mask recovered for users {sorted(missing)}")
    if not masked:
        return FieldElement(0)
    prime = next(iter(masked.values())).value.prime
    total = FieldElement(0, prime)
    for user in sorted(masked):
        total = total + masked[user].value - recovered_self_masks[user]
    for c in corrections:
        total = total + c
    return total


def unmask_domain_vector(masked: Mapping[int, np.ndarray], self_masks: Mapping[int, np.ndarray],
                         size: int, prime: int = DEFAULT_PRIME,
                         corrections: Sequence[np.ndarray] = ()) -> np.ndarray:
    missing = set(masked) - set(self_masks)
    if missing:
        raise IncompleteRoundError(f"no self mask recovered for users {sorted(missing)}")
    total = zeros(size, prime)
    for user in sorted(masked):
        total = vec_add(total, vec_sub(masked[user], self_masks[user], prime), prime)
    for c in corrections:
        total = vec_add(total, c, prime)
    return total


def recover_mask_keypair(survivor_shares: Sequence[ShareVector], t: int,
                         dropped_public: PublicKey) -> KeyPair:
    """Rebuild a dropped user's mask key pair and check it against its published key"""
    scalar = recon_scalar(survivor_shares, t)
    pair = keypair_from_scalar(dropped_public.params, scalar, KeyPurpose.MASK)
    if pair.public_key.point != dropped_public.point:
        raise AuthenticationError("reconstructed mask key does not match the published public key")
    return pair


def recover_dropout_pairwise(dropped: int, survivor_shares: Sequence[ShareVector], t: int,
                             dropped_public: PublicKey, survivor_publics: Mapping[int, PublicKey],
                             round_index: int, tag: bytes,
                             prime: int = DEFAULT_PRIME) -> FieldElement:
    """Correction term cancelling survivors' pairwise masks with the dropped user"""
    pair = recover_mask_keypair(survivor_shares, t, dropped_public)
    correction = FieldElement(0, prime)
    for peer in sorted(survivor_publics):
        m = derive_pairwise_mask(key_agree(pair, survivor_publics[peer]), round_index, tag, prime)
        correction = correction + m if dropped > peer else correction - m
    return correction


def dropout_correction_vector(pair: KeyPair, dropped: int, survivor_publics: Mapping[int, PublicKey],
                              round_index: int, tag: bytes, size: int,
                              prime: int = DEFAULT_PRIME) -> np.ndarray:
    correction = zeros(size, prime)
    for peer in sorted(survivor_publics):
        m = pairwise_mask_vector(key_agree(pair, survivor_publics[peer]), round_index, tag, size, prime)
        correction = vec_add(correction, m, prime) if dropped > peer else vec_sub(correction, m, prime)
    return correction


@dataclass
class MaskKeyring:
    """
    One user's masking state for a round.

    ``mask_key_shares_held`` is the set of shares of peers' private mask
    keys; ``self_mask_shares_held`` holds the peers' self-mask shares for
    the aggregation in progress.
    """
    owner: int
    prime: int = DEFAULT_PRIME
    pairwise_keys: Dict[int, SharedKey] = field(default_factory=dict)
    self_mask: Optional[FieldElement] = None
    self_mask_shares_out: List[Share] = field(default_factory=list)
    mask_key_shares_held: Dict[int, ShareVector] = field(default_factory=dict)
    self_mask_shares_held: Dict[int, Share] = field(default_factory=dict)
    _used_self_masks: set = field(default_factory=set, repr=False)

    def establish_pairwise(self, mask_pair: KeyPair, peer_publics: Mapping[int, PublicKey]) -> None:
        self.pairwise_keys = {
            peer: key_agree(mask_pair, pub)
            for peer, pub in sorted(peer_publics.items()) if peer != self.owner
        }

    def drop_peers(self, peers: Iterable[int]) -> None:
        for peer in peers:
            self.pairwise_keys.pop(peer, None)

    def refresh_self_mask(self, rng: np.random.Generator) -> FieldElement:
        while True:
            r = FieldElement(random_field_int(rng, self.prime), self.prime)
            if r.value not in self._used_self_masks:
                break
        self._used_self_masks.add(r.value)
        self.self_mask = r
        self.self_mask_shares_held = {}
        return r

    def share_self_mask(self, t: int, roster: Sequence[int], rng: np.random.Generator) -> List[Share]:
        if self.self_mask is None:
            raise IncompleteRoundError("self mask not drawn for this aggregation")
        self.self_mask_shares_out = share_self_mask(self.self_mask, t, roster, rng)
        return self.self_mask_shares_out

    def record_mask_key_share(self, peer: int, share: ShareVector) -> None:
        self.mask_key_shares_held[peer] = share

    def record_self_mask_share(self, peer: int, share: Share) -> None:
        self.self_mask_shares_held[peer] = share

    def mask_vector(self, values: np.ndarray, roster: Sequence[int], round_index: int,
                    tag: bytes) -> np.ndarray:
        size = len(values)
        peers = {
            v: pairwise_mask_vector(self.pairwise_keys[v], round_index, tag, size, self.prime)
            for v in roster if v != self.owner
        }
        own = self_mask_vector(self.self_mask, tag, size)
        return sec_mask_vector(values, own, self.owner, peers, roster, self.prime)
