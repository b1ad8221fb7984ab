#!/usr/bin/env python3
"""
Masking of per-user sums and recovery after dropout
"""

import sys
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

sys.path.append(str(Path(__file__).parent.parent.parent))

from src.config import DEFAULT_PRIME
from src.crypto_suite import KeyPurpose, key_agree, key_gen, key_setup
from src.errors import AuthenticationError, IncompleteRoundError, RosterError, ThresholdError
from src.finite_field import (
    FieldElement, random_field_int, random_field_vector, share_scalar, ss_recon,
    vec_sum,
)
from src.masking import (
    MaskKeyring, derive_pairwise_mask, dropout_correction_vector, reconstruct_self_mask,
    recover_dropout_pairwise, recover_mask_keypair, sec_mask, self_mask_vector,
    share_self_mask, unmask_domain_aggregate, unmask_domain_vector,
)
from src.tests.suite import run_suite

P = DEFAULT_PRIME
PARAMS = key_setup(256)
TAG = b"0|0|0|0|stats"
POOL_SIZE = 50
SIGNIFICANCE = 1e-3


def _domain(users, rng):
    pairs = {u: key_gen(PARAMS, KeyPurpose.MASK, rng) for u in users}
    publics = {u: pair.public_key for u, pair in pairs.items()}
    rings = {}
    for u in users:
        ring = MaskKeyring(owner=u)
        ring.establish_pairwise(pairs[u], publics)
        rings[u] = ring
    return pairs, publics, rings


def test_scalar_masks_cancel():
    rng = np.random.default_rng(0)
    roster = [1, 2, 3, 4]
    pairs, publics, _ = _domain(roster, rng)
    secrets = {u: FieldElement(10 * u) for u in roster}
    self_masks = {u: FieldElement(random_field_int(rng)) for u in roster}
    masked = {}
    for u in roster:
        peers = {
            v: derive_pairwise_mask(key_agree(pairs[u], publics[v]), 0, TAG)
            for v in roster if v != u
        }
        masked[u] = sec_mask(secrets[u], self_masks[u], u, peers, roster)
    assert unmask_domain_aggregate(masked, self_masks) == FieldElement(100)


def _key_pool(rng):
    """Mask key pairs for users 1..POOL_SIZE and a lazily filled shared-key cache"""
    pairs = {u: key_gen(PARAMS, KeyPurpose.MASK, rng) for u in range(1, POOL_SIZE + 1)}
    shared = {}

    def shared_key(u, v):
        lo, hi = min(u, v), max(u, v)
        if (lo, hi) not in shared:
            shared[(lo, hi)] = key_agree(pairs[lo], pairs[hi].public_key)
        return shared[(lo, hi)]

    return pairs, shared_key


def test_masks_cancel_random_configurations():
    rng = np.random.default_rng(1000)
    pairs, shared_key = _key_pool(rng)
    for config in range(1000):
        n = int(rng.integers(2, 31))
        roster = sorted(int(u) for u in rng.choice(POOL_SIZE, size=n, replace=False) + 1)
        secrets = {u: FieldElement(random_field_int(rng)) for u in roster}
        self_masks = {u: FieldElement(random_field_int(rng)) for u in roster}
        masked = {}
        for u in roster:
            peers = {v: derive_pairwise_mask(shared_key(u, v), config, TAG) for v in roster if v != u}
            masked[u] = sec_mask(secrets[u], self_masks[u], u, peers, roster)
        expected = FieldElement(sum(s.value for s in secrets.values()) % P)
        assert unmask_domain_aggregate(masked, self_masks) == expected

        # one user drops after masking; survivors rebuild its key and cancel its masks
        dropped = roster[int(rng.integers(0, n))]
        survivors = [u for u in roster if u != dropped]
        t = min(len(survivors), 3)
        key_shares = share_scalar(pairs[dropped].private_key, PARAMS.scalar_bits, t, survivors, rng)
        picks = rng.choice(len(survivors), size=t, replace=False)
        correction = recover_dropout_pairwise(
            dropped, [key_shares[i] for i in picks], t, pairs[dropped].public_key,
            {u: pairs[u].public_key for u in survivors}, config, TAG,
        )
        survivor_total = unmask_domain_aggregate(
            {u: masked[u] for u in survivors}, {u: self_masks[u] for u in survivors}, [correction],
        )
        assert survivor_total == FieldElement(sum(secrets[u].value for u in survivors) % P)


def _buckets(values, bins=32):
    return np.bincount([v * bins // P for v in values], minlength=bins)


def test_pairwise_masks_are_uniform():
    rng = np.random.default_rng(9)
    u = key_gen(PARAMS, KeyPurpose.MASK, rng)
    v = key_gen(PARAMS, KeyPurpose.MASK, rng)
    key = key_agree(u, v.public_key)
    draws = [derive_pairwise_mask(key, i // 1000, f"{i}|stats".encode()).value for i in range(100_000)]
    assert stats.chisquare(_buckets(draws)).pvalue > SIGNIFICANCE
    assert derive_pairwise_mask(key, 3, TAG) == derive_pairwise_mask(key_agree(v, u.public_key), 3, TAG)


def test_masked_value_hides_secret():
    rng = np.random.default_rng(2)
    roster = [1, 2, 3]

    def sample(secret, count=20_000):
        out = []
        for _ in range(count):
            peers = {2: FieldElement(random_field_int(rng)), 3: FieldElement(random_field_int(rng))}
            r_u = FieldElement(random_field_int(rng))
            out.append(sec_mask(FieldElement(secret), r_u, 1, peers, roster).value.value)
        return _buckets(out)

    small, large = sample(5), sample(P - (1 << 40))
    assert stats.chisquare(small).pvalue > SIGNIFICANCE
    assert stats.chisquare(large).pvalue > SIGNIFICANCE
    assert stats.chi2_contingency(np.vstack([small, large]))[1] > SIGNIFICANCE


def test_mask_roster_mismatch():
    with pytest.raises(RosterError):
        sec_mask(FieldElement(1), FieldElement(2), 1, {2: FieldElement(3)}, [1, 2, 3])
    with pytest.raises(IncompleteRoundError):
        unmask_domain_aggregate({1: sec_mask(FieldElement(1), FieldElement(2), 1, {}, [1])}, {})


def test_vector_masks_cancel_through_keyring():
    rng = np.random.default_rng(3)
    roster = [2, 5, 7, 9]
    _, _, rings = _domain(roster, rng)
    size = 12
    values = {u: random_field_vector(rng, size) for u in roster}
    masked, own = {}, {}
    for u in roster:
        rings[u].refresh_self_mask(rng)
        masked[u] = rings[u].mask_vector(values[u], roster, 0, TAG)
        own[u] = self_mask_vector(rings[u].self_mask, TAG, size)
    total = unmask_domain_vector(masked, own, size)
    assert np.array_equal(total, vec_sum(list(values.values()), size))


def test_self_mask_sharing():
    rng = np.random.default_rng(4)
    r = FieldElement(random_field_int(rng))
    shares = share_self_mask(r, 3, [1, 2, 3, 4, 5], rng)
    assert reconstruct_self_mask(shares[2:], 3) == r
    ring = MaskKeyring(owner=1)
    with pytest.raises(IncompleteRoundError):
        ring.share_self_mask(2, [1, 2], rng)
    first = ring.refresh_self_mask(rng)
    second = ring.refresh_self_mask(rng)
    assert first != second


def test_recover_mask_keypair():
    rng = np.random.default_rng(5)
    pair = key_gen(PARAMS, KeyPurpose.MASK, rng)
    shares = share_scalar(pair.private_key, PARAMS.scalar_bits, 3, [1, 2, 3, 4], rng)
    recovered = recover_mask_keypair(shares[1:], 3, pair.public_key)
    assert recovered.private_key == pair.private_key
    other = key_gen(PARAMS, KeyPurpose.MASK, rng)
    with pytest.raises(AuthenticationError):
        recover_mask_keypair(shares[1:], 3, other.public_key)


def test_scalar_dropout_correction():
    rng = np.random.default_rng(6)
    roster = [1, 2, 3, 4]
    pairs, publics, _ = _domain(roster, rng)
    dropped = 3
    survivors = [u for u in roster if u != dropped]
    secrets = {u: FieldElement(7 * u) for u in roster}
    self_masks = {u: FieldElement(random_field_int(rng)) for u in roster}
    masked = {}
    for u in survivors:
        peers = {
            v: derive_pairwise_mask(key_agree(pairs[u], publics[v]), 0, TAG)
            for v in roster if v != u
        }
        masked[u] = sec_mask(secrets[u], self_masks[u], u, peers, roster)
    key_shares = share_scalar(pairs[dropped].private_key, PARAMS.scalar_bits, 2, survivors, rng)
    correction = recover_dropout_pairwise(
        dropped, key_shares, 2, publics[dropped], {u: publics[u] for u in survivors}, 0, TAG,
    )
    total = unmask_domain_aggregate(masked, {u: self_masks[u] for u in survivors}, [correction])
    assert total == FieldElement(sum(7 * u for u in survivors))


def test_thirty_percent_dropout_vector():
    rng = np.random.default_rng(7)
    roster = list(range(1, 11))
    pairs, publics, rings = _domain(roster, rng)
    size, t = 6, 5
    dropped = [2, 5, 9]
    survivors = [u for u in roster if u not in dropped]

    # every user deals shares of its mask key to the whole roster
    held = {u: {} for u in roster}
    for u in roster:
        for sh in share_scalar(pairs[u].private_key, PARAMS.scalar_bits, t, roster, rng):
            held[sh.holder_index][u] = sh

    values = {u: random_field_vector(rng, size) for u in roster}
    masked, own = {}, {}
    for u in survivors:
        rings[u].refresh_self_mask(rng)
        masked[u] = rings[u].mask_vector(values[u], roster, 4, TAG)
        own[u] = self_mask_vector(rings[u].self_mask, TAG, size)

    corrections = []
    survivor_publics = {u: publics[u] for u in survivors}
    for d in dropped:
        pair = recover_mask_keypair([held[u][d] for u in survivors[:t]], t, publics[d])
        corrections.append(dropout_correction_vector(pair, d, survivor_publics, 4, TAG, size))
    total = unmask_domain_vector(masked, own, size, corrections=corrections)
    assert np.array_equal(total, vec_sum([values[u] for u in survivors], size))


def test_below_threshold_recovery_fails():
    rng = np.random.default_rng(8)
    pair = key_gen(PARAMS, KeyPurpose.MASK, rng)
    shares = share_scalar(pair.private_key, PARAMS.scalar_bits, 4, [1, 2, 3, 4, 5], rng)
    with pytest.raises(ThresholdError):
        recover_mask_keypair(shares[:3], 4, pair.public_key)
    r = FieldElement(random_field_int(rng))
    assert ss_recon(share_self_mask(r, 2, [1, 2], rng), 2) == r


def run_all_tests():
    return run_suite("MASKING", [
        ("Scalar masks cancel", test_scalar_masks_cancel),
        ("1000 configurations with dropout", test_masks_cancel_random_configurations),
        ("Pairwise masks uniform", test_pairwise_masks_are_uniform),
        ("Masked value hides secret", test_masked_value_hides_secret),
        ("Roster mismatch", test_mask_roster_mismatch),
        ("Vector masks via keyring", test_vector_masks_cancel_through_keyring),
        ("Self-mask sharing", test_self_mask_sharing),
        ("Mask key recovery", test_recover_mask_keypair),
        ("Scalar dropout correction", test_scalar_dropout_correction),
        ("30% dropout, vector", test_thirty_percent_dropout_vector),
        ("Below-threshold recovery", test_below_threshold_recovery_fails),
    ])


if __name__ == "__main__":
    sys.exit(0 if run_all_tests() else 1)
