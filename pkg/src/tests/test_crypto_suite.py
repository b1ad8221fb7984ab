#!/usr/bin/env python3
"""
Key setup, agreement, authenticated encryption and signatures
"""

import sys
from pathlib import Path

import numpy as np
import pytest
from cryptography.hazmat.primitives.asymmetric.utils import encode_dss_signature

sys.path.append(str(Path(__file__).parent.parent.parent))

from src.crypto_suite import (
    Ciphertext, KeyPurpose, PublicKey, Signature, aead_decrypt, aead_encrypt, key_agree,
    key_fingerprint, key_gen, key_setup, message_context, sig_sign, sig_verify,
)
from src.errors import AuthenticationError, ConfigurationError, KeyAgreementError, KeyPurposeError
from src.tests.suite import run_suite

PARAMS = key_setup(256)


def test_key_setup_levels():
    assert PARAMS.group == "P-256"
    assert PARAMS.hash_name == "SHA-256"
    assert PARAMS.scalar_bits == 256
    assert key_setup(384).group == "P-384"
    with pytest.raises(ConfigurationError):
        key_setup(7)


def test_key_gen_is_seeded():
    a = key_gen(PARAMS, KeyPurpose.MASK, np.random.default_rng(1))
    b = key_gen(PARAMS, KeyPurpose.MASK, np.random.default_rng(1))
    c = key_gen(PARAMS, KeyPurpose.MASK, np.random.default_rng(2))
    assert a.public_key.point == b.public_key.point
    assert a.public_key.point != c.public_key.point
    assert 0 < a.private_key < PARAMS.order


def test_agreement_is_symmetric():
    rng = np.random.default_rng(20)
    for _ in range(20):
        u = key_gen(PARAMS, KeyPurpose.ENCRYPT, rng)
        v = key_gen(PARAMS, KeyPurpose.ENCRYPT, rng)
        assert key_agree(u, v.public_key) == key_agree(v, u.public_key)


def test_agreement_rejects_bad_keys():
    rng = np.random.default_rng(3)
    mine = key_gen(PARAMS, KeyPurpose.MASK, rng)
    bogus = PublicKey(b"\x04" + b"\x01" * 64, KeyPurpose.MASK, PARAMS)
    with pytest.raises(KeyAgreementError):
        key_agree(mine, bogus)
    signer = key_gen(PARAMS, KeyPurpose.SIGN, rng)
    with pytest.raises(KeyPurposeError):
        key_agree(mine, signer.public_key)
    other_purpose = key_gen(PARAMS, KeyPurpose.ENCRYPT, rng)
    with pytest.raises(KeyPurposeError):
        key_agree(mine, other_purpose.public_key)


def test_aead_roundtrip_and_tamper():
    rng = np.random.default_rng(4)
    u = key_gen(PARAMS, KeyPurpose.ENCRYPT, rng)
    v = key_gen(PARAMS, KeyPurpose.ENCRYPT, rng)
    key = key_agree(u, v.public_key)
    context = message_context("user:1", "user:2", 0, "MASK_KEY_SHARE")
    ct = aead_encrypt(key, b"share bytes", context, nonce=rng.bytes(12))
    assert aead_decrypt(key_agree(v, u.public_key), ct, context) == b"share bytes"

    flipped = bytearray(ct.body)
    flipped[0] ^= 1
    with pytest.raises(AuthenticationError):
        aead_decrypt(key, Ciphertext(ct.nonce, bytes(flipped)), context)
    with pytest.raises(AuthenticationError):
        aead_decrypt(key, ct, message_context("user:1", "user:3", 0, "MASK_KEY_SHARE"))
    assert Ciphertext.from_bytes(ct.to_bytes()) == ct
    with pytest.raises(AuthenticationError):
        Ciphertext.from_bytes(b"short")


def test_signatures():
    rng = np.random.default_rng(5)
    signer = key_gen(PARAMS, KeyPurpose.SIGN, rng)
    sig = sig_sign(signer, b"0|3|announcement")
    assert sig_verify(signer.public_key, b"0|3|announcement", sig)
    assert not sig_verify(signer.public_key, b"0|4|announcement", sig)
    assert not sig_verify(signer.public_key, b"0|3|announcement", Signature(b"\x30\x00"))
    # deterministic signing
    assert sig_sign(signer, b"0|3|announcement") == sig
    masker = key_gen(PARAMS, KeyPurpose.MASK, rng)
    with pytest.raises(KeyPurposeError):
        sig_sign(masker, b"x")


def test_random_signatures_rejected():
    rng = np.random.default_rng(1000)
    signer = key_gen(PARAMS, KeyPurpose.SIGN, rng)
    message = b"0|7|leaf weights"
    for i in range(1000):
        if i % 2:
            der = rng.bytes(int(rng.integers(1, 80)))
        else:
            r = 1 + int.from_bytes(rng.bytes(32), "big") % (PARAMS.order - 1)
            s = 1 + int.from_bytes(rng.bytes(32), "big") % (PARAMS.order - 1)
            der = encode_dss_signature(r, s)
        assert not sig_verify(signer.public_key, message, Signature(der))


def test_fingerprint_depends_on_purpose():
    rng = np.random.default_rng(6)
    pair = key_gen(PARAMS, KeyPurpose.MASK, rng)
    relabelled = PublicKey(pair.public_key.point, KeyPurpose.ENCRYPT, PARAMS)
    assert key_fingerprint(pair.public_key) != key_fingerprint(relabelled)
    assert len(key_fingerprint(pair.public_key)) == 16


def run_all_tests():
    return run_suite("CRYPTO SUITE", [
        ("Key setup", test_key_setup_levels),
        ("Seeded key generation", test_key_gen_is_seeded),
        ("Agreement symmetry", test_agreement_is_symmetric),
        ("Agreement rejects bad keys", test_agreement_rejects_bad_keys),
        ("AEAD roundtrip and tamper", test_aead_roundtrip_and_tamper),
        ("Signatures", test_signatures),
        ("Random signatures rejected", test_random_signatures_rejected),
        ("Fingerprints", test_fingerprint_depends_on_purpose),
    ])


if __name__ == "__main__":
    sys.exit(0 if run_all_tests() else 1)
