"""
Secure comparison among edge servers.

Given Shamir sharings of s1 and s2 the servers produce a sharing of the
indicator that is 0 when s1 > s2 and 1 otherwise (ties give 1).

Construction: each server subtracts its shares locally to hold [d],
multiplies [d] by a shared random positive blinding factor [rho] using a
multiplication triple from the offline dealer, and a designated combiner
opens rho*d, reads its sign and shares the bit back.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.config import DEFAULT_PRIME
from src.errors import (
    AggregationConsistencyError, ConfigurationError, FieldRangeError, RosterError, ThresholdError,
)
from src.finite_field import (
    FixedPointCodec, Share, ShareVector, field_array, random_field_vector, signed_ints,
    ss_recon_vector, ss_share_vector, vec_add, vec_mul, vec_sub,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CmpRequest:
    """Aligned sharings of two batches of values over the same edge roster"""
    left_shares: List[ShareVector]
    right_shares: List[ShareVector]
    threshold: int

    @classmethod
    def from_shares(cls, left: Sequence[Share], right: Sequence[Share], threshold: int) -> "CmpRequest":
        def lift(sh: Share) -> ShareVector:
            return ShareVector(sh.holder_index, field_array([sh.value.value], sh.value.prime),
                               sh.value.prime)
        return cls([lift(s) for s in left], [lift(s) for s in right], threshold)

    @property
    def holders(self) -> List[int]:
        return [s.holder_index for s in self.left_shares]

    @property
    def size(self) -> int:
        return len(self.left_shares[0]) if self.left_shares else 0

    @property
    def prime(self) -> int:
        return self.left_shares[0].prime if self.left_shares else DEFAULT_PRIME

    def validate(self) -> None:
        left = self.holders
        right = [s.holder_index for s in self.right_shares]
        if sorted(left) != sorted(right) or len(set(left)) != len(left):
            raise RosterError(f"comparison sharings over different rosters {left} vs {right}")
        if len(left) < self.threshold:
            raise ThresholdError(f"{len(left)} edge shares for threshold {self.threshold}")
        if len({len(s) for s in self.left_shares + self.right_shares}) > 1:
            raise RosterError("comparison share vectors have different lengths")


@dataclass(frozen=True)
class CmpResultShares:
    shares: List[ShareVector]


@dataclass(frozen=True)
class Preprocessing:
    """One server's correlated randomness: triple shares and blinding-factor share"""
    a: ShareVector
    b: ShareVector
    c: ShareVector
    rho: ShareVector


def blinding_bits(codec: FixedPointCodec) -> int:
    """Largest blinding width for which rho * (s1 - s2) keeps its sign in the field"""
    max_difference = int(2 * codec.range_bound * codec.scale)
    bits = ((codec.prime // 2) // max_difference).bit_length() - 1
    if bits < 1:
        raise ConfigurationError("field too small for blinded comparison at this range bound")
    return bits


class ComparisonDealer:
    """Offline dealer of multiplication triples and positive blinding factors"""

    def __init__(self, rng: np.random.Generator, prime: int = DEFAULT_PRIME, blind_bits: int = 16):
        self.rng = rng
        self.prime = prime
        self.blind_bits = blind_bits
        self.dealt = 0

    def deal(self, size: int, t: int, holders: Sequence[int]) -> Dict[int, Preprocessing]:
        p = self.prime
        a = random_field_vector(self.rng, size, p)
        b = random_field_vector(self.rng, size, p)
        c = vec_mul(a, b, p)
        rho = field_array(self.rng.integers(1, 1 << self.blind_bits, size=size, endpoint=True), p)
        parts = [ss_share_vector(v, t, holders, self.rng, p) for v in (a, b, c, rho)]
        self.dealt += size
        return {
            h: Preprocessing(parts[0][i], parts[1][i], parts[2][i], parts[3][i])
            for i, h in enumerate(holders)
        }


def share_for_comparison(values, codec: FixedPointCodec, t: int, holders: Sequence[int],
                         rng: np.random.Generator) -> List[ShareVector]:
    """Encode reals with the comparison codec (range-checked) and share them"""
    return ss_share_vector(codec.encode_array(values), t, holders, rng, codec.prime)


# per-server and combiner steps; sec_cmp chains them in one process

def local_openings(left: ShareVector, right: ShareVector,
                   pre: Preprocessing) -> Tuple[ShareVector, ShareVector]:
    p = left.prime
    d = vec_sub(left.values, right.values, p)
    eps = ShareVector(left.holder_index, vec_sub(d, pre.a.values, p), p)
    phi = ShareVector(left.holder_index, vec_sub(pre.rho.values, pre.b.values, p), p)
    return eps, phi


def open_values(shares: Sequence[ShareVector], t: int) -> np.ndarray:
    return ss_recon_vector(shares, t)


def local_product(pre: Preprocessing, eps: np.ndarray, phi: np.ndarray) -> ShareVector:
    """Share of rho * d from opened eps = d - a and phi = rho - b"""
    p = pre.a.prime
    z = vec_add(pre.c.values, vec_mul(pre.b.values, eps, p), p)
    z = vec_add(z, vec_mul(pre.a.values, phi, p), p)
    z = vec_add(z, vec_mul(eps, phi, p), p)
    return ShareVector(pre.a.holder_index, z, p)


def combine_sign(product_shares: Sequence[ShareVector], t: int, holders: Sequence[int],
                 rng: np.random.Generator, limit: Optional[int] = None) -> List[ShareVector]:
    """Combiner: open rho*d, map positive to 0 and the rest to 1, share the bits"""
    prime = product_shares[0].prime
    blinded = signed_ints(ss_recon_vector(product_shares, t), prime)
    if limit is not None and np.any(np.abs(blinded.astype(object)) > limit):
        raise FieldRangeError("compared values exceed the comparable range")
    bits = np.where(blinded > 0, 0, 1)
    return ss_share_vector(field_array(bits, prime), t, holders, rng, prime)


def sec_cmp(req: CmpRequest, rng: np.random.Generator, dealer: ComparisonDealer,
            codec: Optional[FixedPointCodec] = None,
            transcript: Optional[List[Tuple[str, int]]] = None) -> CmpResultShares:
    """
    Compare batches of shared values

    Parameters:
    -----------
    req : CmpRequest
        Sharings of s1 (left) and s2 (right)
    rng : np.random.Generator
        Randomness for re-sharing the result bits
    dealer : ComparisonDealer
        Source of triples and blinding factors
    codec : FixedPointCodec, optional
        When given, the opened blinded difference is range-checked
    transcript : list, optional
        Receives (kind, size) records of everything a server observes
    """
    req.validate()
    t = req.threshold
    holders = sorted(req.holders)
    left = {s.holder_index: s for s in req.left_shares}
    right = {s.holder_index: s for s in req.right_shares}
    pre = dealer.deal(req.size, t, holders)

    eps_shares, phi_shares = [], []
    for h in holders:
        eps, phi = local_openings(left[h], right[h], pre[h])
        eps_shares.append(eps)
        phi_shares.append(phi)
    eps = open_values(eps_shares, t)
    phi = open_values(phi_shares, t)
    if transcript is not None:
        transcript.append(("share", req.size * len(holders) * 2))
        transcript.append(("opened_masked_difference", req.size * 2))

    products = [local_product(pre[h], eps, phi) for h in holders]
    limit = None
    if codec is not None:
        limit = int(2 * codec.range_bound * codec.scale) << dealer.blind_bits
    result = combine_sign(products, t, holders, rng, limit)
    if transcript is not None:
        transcript.append(("blinded_difference", req.size))
        transcript.append(("share", req.size * len(holders)))
    return CmpResultShares(result)


def cmp_recon_batch(result: CmpResultShares, t: int) -> np.ndarray:
    bits = np.asarray(ss_recon_vector(result.shares, t)).astype(np.int64)
    if np.any((bits != 0) & (bits != 1)):
        raise AggregationConsistencyError("comparison result is not a bit")
    return bits


def cmp_recon(result: CmpResultShares, t: int) -> bool:
    """Reconstructed indicator of a single comparison: False iff s1 > s2"""
    bits = cmp_recon_batch(result, t)
    if len(bits) != 1:
        raise ValueError("cmp_recon expects a single comparison; use cmp_recon_batch")
    return bool(bits[0])
