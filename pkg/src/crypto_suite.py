"""
Key setup, generation and agreement, authenticated encryption under agreed
keys, and signatures.

Elliptic-curve Diffie-Hellman on the NIST curves, HKDF to a fixed-length
shared key, AES-GCM with 128-bit keys and deterministic ECDSA.
"""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import Optional

import numpy as np
from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from src.errors import (
    AuthenticationError, ConfigurationError, KeyAgreementError, KeyPurposeError,
)

logger = logging.getLogger(__name__)

AES_KEY_BYTES = 16
NONCE_BYTES = 12
SHARED_KEY_BYTES = 32

# security parameter -> (curve class, hash class, curve name, hash name, group order)
_LEVELS = {
    256: (ec.SECP256R1, hashes.SHA256, "P-256", "SHA-256",
          0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551),
    384: (ec.SECP384R1, hashes.SHA384, "P-384", "SHA-384",
          0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFC7634D81F4372DDF581A0DB248B0A77AECEC196ACCC52973),
}


class KeyPurpose(str, Enum):
    MASK = "mask"
    ENCRYPT = "encrypt"
    SIGN = "sign"


@dataclass(frozen=True)
class PublicParams:
    security_parameter: int
    group: str
    order: int
    generator: str
    hash_name: str

    def curve(self) -> ec.EllipticCurve:
        return _LEVELS[self.security_parameter][0]()

    def hash_algorithm(self) -> hashes.HashAlgorithm:
        return _LEVELS[self.security_parameter][1]()

    @property
    def scalar_bits(self) -> int:
        return self.order.bit_length()


@dataclass(frozen=True)
class PublicKey:
    point: bytes
    purpose: KeyPurpose
    params: PublicParams

    @cached_property
    def _loaded(self) -> ec.EllipticCurvePublicKey:
        try:
            return ec.EllipticCurvePublicKey.from_encoded_point(self.params.curve(), self.point)
        except (ValueError, TypeError) as e:
            raise KeyAgreementError(f"degenerate or malformed public key: {e}") from e


@dataclass(frozen=True)
class KeyPair:
    private_key: int
    public_key: PublicKey
    purpose: KeyPurpose

    @cached_property
    def _loaded(self) -> ec.EllipticCurvePrivateKey:
        return ec.derive_private_key(self.private_key, self.public_key.params.curve())


@dataclass(frozen=True)
class SharedKey:
    material: bytes

    def __post_init__(self):
        if len(self.material) != SHARED_KEY_BYTES:
            raise KeyAgreementError("shared key has wrong length")


@dataclass(frozen=True)
class Ciphertext:
    nonce: bytes
    body: bytes

    def to_bytes(self) -> bytes:
        return self.nonce + self.body

    @classmethod
    def from_bytes(cls, data: bytes) -> "Ciphertext":
        if len(data) < NONCE_BYTES + 16:
            raise AuthenticationError("ciphertext too short")
        return cls(bytes(data[:NONCE_BYTES]), bytes(data[NONCE_BYTES:]))


@dataclass(frozen=True)
class Signature:
    der: bytes


def key_setup(security_parameter: int) -> PublicParams:
    if security_parameter not in _LEVELS:
        raise ConfigurationError(
            f"unsupported security level {security_parameter}; choose from {sorted(_LEVELS)}"
        )
    _, _, group, hash_name, order = _LEVELS[security_parameter]
    return PublicParams(security_parameter, group, order, f"{group} standard base point", hash_name)


def keypair_from_scalar(params: PublicParams, scalar: int, purpose: KeyPurpose) -> KeyPair:
    if not 0 < scalar < params.order:
        raise KeyAgreementError("private scalar out of range")
    private = ec.derive_private_key(scalar, params.curve())
    point = private.public_key().public_bytes(
        serialization.Encoding.X962, serialization.PublicFormat.UncompressedPoint
    )
    return KeyPair(scalar, PublicKey(point, KeyPurpose(purpose), params), KeyPurpose(purpose))


def key_gen(params: PublicParams, purpose: KeyPurpose, rng: np.random.Generator) -> KeyPair:
    """Fresh key pair drawn from the participant's seeded stream"""
    nbytes = (params.scalar_bits + 7) // 8 + 8
    scalar = 1 + int.from_bytes(rng.bytes(nbytes), "big") % (params.order - 1)
    return keypair_from_scalar(params, scalar, purpose)


def key_agree(mine: KeyPair, theirs: PublicKey) -> SharedKey:
    if mine.purpose is KeyPurpose.SIGN or theirs.purpose is KeyPurpose.SIGN:
        raise KeyPurposeError("signature keys cannot be used for agreement")
    if mine.purpose is not theirs.purpose:
        raise KeyPurposeError(f"cannot agree a {mine.purpose.value} key with a {theirs.purpose.value} key")
    if mine.public_key.params != theirs.params:
        raise KeyAgreementError("keys come from different public parameters")
    try:
        secret = mine._loaded.exchange(ec.ECDH(), theirs._loaded)
    except ValueError as e:
        raise KeyAgreementError(f"key agreement failed: {e}") from e
    material = HKDF(
        algorithm=hashes.SHA256(),
        length=SHARED_KEY_BYTES,
        salt=None,
        info=b"fedxgb/agree/" + mine.purpose.value.encode(),
    ).derive(secret)
    return SharedKey(material)


def message_context(sender: str, receiver: str, round_index: int, kind: str) -> bytes:
    """Associated data binding a ciphertext to its route, round and message kind"""
    return f"{sender}|{receiver}|{round_index}|{kind}".encode()


def aead_encrypt(key: SharedKey, plaintext: bytes, context: bytes,
                 nonce: Optional[bytes] = None) -> Ciphertext:
    if nonce is None:
        nonce = os.urandom(NONCE_BYTES)
    if len(nonce) != NONCE_BYTES:
        raise ValueError("nonce must be 12 bytes")
    body = AESGCM(key.material[:AES_KEY_BYTES]).encrypt(nonce, plaintext, context)
    return Ciphertext(nonce, body)


def aead_decrypt(key: SharedKey, ciphertext: Ciphertext, context: bytes) -> bytes:
    try:
        return AESGCM(key.material[:AES_KEY_BYTES]).decrypt(ciphertext.nonce, ciphertext.body, context)
    except InvalidTag as e:
        raise AuthenticationError("ciphertext failed authentication") from e


def sig_sign(sign_key: KeyPair, message: bytes) -> Signature:
    if sign_key.purpose is not KeyPurpose.SIGN:
        raise KeyPurposeError("only signature keys can sign")
    algorithm = ec.ECDSA(sign_key.public_key.params.hash_algorithm(), deterministic_signing=True)
    return Signature(sign_key._loaded.sign(message, algorithm))


def sig_verify(verify_key: PublicKey, message: bytes, signature: Signature) -> bool:
    if verify_key.purpose is not KeyPurpose.SIGN:
        return False
    try:
        verify_key._loaded.verify(
            bytes(signature.der), message, ec.ECDSA(verify_key.params.hash_algorithm())
        )
        return True
    except (InvalidSignature, ValueError, TypeError, KeyAgreementError):
        return False


def key_fingerprint(public: PublicKey) -> str:
    return hashlib.sha256(public.purpose.value.encode() + public.point).hexdigest()[:16]
