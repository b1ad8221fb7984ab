"""
Prime-field arithmetic, fixed-point encoding and Shamir secret sharing

Scalars are FieldElement values; batches are numpy arrays holding field
integers (uint64 when the prime fits in 63 bits, Python ints otherwise).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.config import DEFAULT_FRACTIONAL_BITS, DEFAULT_MAX_SUMMANDS, DEFAULT_PRIME
from src.errors import ConfigurationError, FieldRangeError, RosterError, ThresholdError


def _native(prime: int) -> bool:
    """True when field vectors can live in uint64 (a + b never overflows)"""
    return prime < (1 << 63)


@dataclass(frozen=True)
class FieldElement:
    """An element of F_p; value is always reduced into [0, p)"""
    value: int
    prime: int = DEFAULT_PRIME

    def __post_init__(self):
        if not 0 <= self.value < self.prime:
            raise FieldRangeError(f"{self.value} is not reduced modulo {self.prime}")

    @classmethod
    def reduce(cls, value: int, prime: int = DEFAULT_PRIME) -> "FieldElement":
        return cls(int(value) % prime, prime)

    def _other(self, other) -> int:
        if isinstance(other, FieldElement):
            if other.prime != self.prime:
                raise ValueError("field elements from different fields")
            return other.value
        return int(other)

    def __add__(self, other):
        return FieldElement((self.value + self._other(other)) % self.prime, self.prime)

    __radd__ = __add__

    def __sub__(self, other):
        return FieldElement((self.value - self._other(other)) % self.prime, self.prime)

    def __rsub__(self, other):
        return FieldElement((self._other(other) - self.value) % self.prime, self.prime)

    def __mul__(self, other):
        return FieldElement((self.value * self._other(other)) % self.prime, self.prime)

    __rmul__ = __mul__

    def __neg__(self):
        return FieldElement((-self.value) % self.prime, self.prime)

    def __int__(self):
        return self.value

    def inverse(self) -> "FieldElement":
        if self.value == 0:
            raise ZeroDivisionError("zero has no inverse")
        return FieldElement(pow(self.value, -1, self.prime), self.prime)

    def signed(self) -> int:
        """Two's-complement style reading: upper half of the field is negative"""
        return self.value - self.prime if self.value > self.prime // 2 else self.value


@dataclass(frozen=True)
class Share:
    """One holder's evaluation of a sharing polynomial"""
    holder_index: int
    value: FieldElement


@dataclass(frozen=True)
class ShareVector:
    """A holder's shares of a batch of secrets, one polynomial per entry"""
    holder_index: int
    values: np.ndarray
    prime: int = DEFAULT_PRIME

    def __len__(self):
        return len(self.values)


# ---------------------------------------------------------------------------
# Randomness and vector arithmetic
# ---------------------------------------------------------------------------

def random_field_int(rng: np.random.Generator, prime: int = DEFAULT_PRIME) -> int:
    if _native(prime):
        return int(rng.integers(0, prime, dtype=np.int64))
    nbytes = (prime.bit_length() + 64 + 7) // 8
    return int.from_bytes(rng.bytes(nbytes), "big") % prime


def random_field_vector(rng: np.random.Generator, size: int,
                        prime: int = DEFAULT_PRIME) -> np.ndarray:
    if _native(prime):
        return rng.integers(0, prime, size=size, dtype=np.int64).astype(np.uint64)
    return np.array([random_field_int(rng, prime) for _ in range(size)], dtype=object)


def field_array(values, prime: int = DEFAULT_PRIME) -> np.ndarray:
    """Coerce a sequence of (already reduced or signed) integers into a field vector"""
    as_obj = np.array([int(v) % prime for v in np.asarray(values, dtype=object).ravel()],
                      dtype=object)
    return as_obj.astype(np.uint64) if _native(prime) else as_obj


def zeros(size: int, prime: int = DEFAULT_PRIME) -> np.ndarray:
    return np.zeros(size, dtype=np.uint64) if _native(prime) else np.array([0] * size, dtype=object)


def vec_add(a: np.ndarray, b: np.ndarray, prime: int = DEFAULT_PRIME) -> np.ndarray:
    if _native(prime):
        p = np.uint64(prime)
        s = a.astype(np.uint64) + b.astype(np.uint64)
        return np.where(s >= p, s - p, s)
    return (a + b) % prime


def vec_sub(a: np.ndarray, b: np.ndarray, prime: int = DEFAULT_PRIME) -> np.ndarray:
    if _native(prime):
        p = np.uint64(prime)
        a = a.astype(np.uint64)
        b = b.astype(np.uint64)
        return np.where(a >= b, a - b, a + (p - b))
    return (a - b) % prime


def vec_neg(a: np.ndarray, prime: int = DEFAULT_PRIME) -> np.ndarray:
    return vec_sub(zeros(len(a), prime), a, prime)


def vec_sum(vectors: Sequence[np.ndarray], size: int, prime: int = DEFAULT_PRIME) -> np.ndarray:
    total = zeros(size, prime)
    for v in vectors:
        total = vec_add(total, v, prime)
    return total


def vec_mul(a: np.ndarray, b, prime: int = DEFAULT_PRIME) -> np.ndarray:
    """Entry-wise product; b may be a vector or a scalar"""
    left = np.asarray(a).astype(object)
    right = np.asarray(b).astype(object) if isinstance(b, np.ndarray) else int(b)
    out = (left * right) % prime
    return out.astype(np.uint64) if _native(prime) else out


def vec_add_scalar(a: np.ndarray, c: int, prime: int = DEFAULT_PRIME) -> np.ndarray:
    return vec_add(a, field_array([c] * len(a), prime), prime)


def signed_ints(a: np.ndarray, prime: int = DEFAULT_PRIME) -> np.ndarray:
    """Read field vector entries with the upper half negative"""
    if _native(prime):
        ints = a.astype(np.int64)
        return np.where(ints > prime // 2, ints - prime, ints)
    return np.array([v - prime if v > prime // 2 else v for v in a], dtype=object)


# ---------------------------------------------------------------------------
# Fixed-point codec
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FixedPointCodec:
    """
    Maps reals to field elements as round(x * 2^f) with negatives wrapped
    into the upper half of the field.

    ``range_bound`` defaults to the largest magnitude for which summing
    ``max_summands`` encoded values cannot wrap around.
    """
    fractional_bits: int = DEFAULT_FRACTIONAL_BITS
    prime: int = DEFAULT_PRIME
    max_summands: int = DEFAULT_MAX_SUMMANDS
    range_bound: Optional[float] = None

    def __post_init__(self):
        if self.fractional_bits < 0 or self.max_summands < 1:
            raise ConfigurationError("fractional_bits >= 0 and max_summands >= 1 required")
        scale = 1 << self.fractional_bits
        limit = (self.prime - 1) // (2 * scale * self.max_summands)
        if self.range_bound is None:
            object.__setattr__(self, "range_bound", float(limit))
        if self.range_bound <= 0 or 2 * self.range_bound * scale * self.max_summands >= self.prime:
            raise ConfigurationError(
                f"range bound {self.range_bound} too large for a {self.prime.bit_length()}-bit "
                f"field with {self.fractional_bits} fractional bits and {self.max_summands} summands"
            )

    @property
    def scale(self) -> int:
        return 1 << self.fractional_bits

    @property
    def resolution(self) -> float:
        return 1.0 / self.scale

    def _check(self, x) -> None:
        arr = np.asarray(x, dtype=np.float64)
        if not np.all(np.isfinite(arr)) or np.any(np.abs(arr) > self.range_bound):
            raise FieldRangeError(f"value outside encodable range ±{self.range_bound}")

    def to_fixed(self, x) -> np.ndarray:
        """Round-to-nearest integer representation (signed, not yet reduced)"""
        self._check(x)
        return np.floor(np.asarray(x, dtype=np.float64) * self.scale + 0.5).astype(np.int64)

    def encode(self, x: float) -> FieldElement:
        v = int(self.to_fixed(x))
        return FieldElement(v % self.prime, self.prime)

    def decode(self, e: FieldElement) -> float:
        return e.signed() / self.scale

    def encode_array(self, xs) -> np.ndarray:
        return encode_fixed_ints(self.to_fixed(xs), self.prime)

    def decode_array(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(signed_ints(values, self.prime), dtype=np.float64) / self.scale

    def quantize(self, xs) -> np.ndarray:
        """The real values the field actually carries after encoding"""
        return self.to_fixed(xs).astype(np.float64) / self.scale


def encode_fixed_ints(ints: np.ndarray, prime: int = DEFAULT_PRIME) -> np.ndarray:
    """Wrap signed integers (already scaled) into the field"""
    ints = np.atleast_1d(np.asarray(ints))
    if _native(prime):
        v = ints.astype(np.int64)
        return np.where(v < 0, v + prime, v).astype(np.uint64)
    return np.array([int(v) % prime for v in ints], dtype=object)


# ---------------------------------------------------------------------------
# Shamir (t, n) sharing
# ---------------------------------------------------------------------------

def _check_sharing(t: int, roster: Sequence[int], prime: int) -> None:
    if len(set(roster)) != len(roster):
        raise RosterError(f"duplicate holder indices in roster {list(roster)}")
    if any(int(i) <= 0 or int(i) >= prime for i in roster):
        raise RosterError("holder indices must be in [1, p)")
    if t > len(roster):
        raise ThresholdError(f"threshold {t} exceeds roster size {len(roster)}")
    # a lone holder may hold the secret outright
    if t < 2 and not (t == 1 and len(roster) == 1):
        raise ThresholdError(f"threshold {t} below 2")


@lru_cache(maxsize=4096)
def lagrange_coefficients_at_zero(indices: Tuple[int, ...], prime: int = DEFAULT_PRIME) -> Tuple[int, ...]:
    coefficients = []
    for j, xj in enumerate(indices):
        num, den = 1, 1
        for m, xm in enumerate(indices):
            if m != j:
                num = num * xm % prime
                den = den * (xm - xj) % prime
        coefficients.append(num * pow(den, -1, prime) % prime)
    return tuple(coefficients)


def _check_recon(holders: List[int], t: int) -> None:
    if t < 1:
        raise ThresholdError(f"threshold {t} below 1")
    if not holders:
        raise ThresholdError("no shares supplied")
    if len(holders) < t:
        raise ThresholdError(f"{len(holders)} shares supplied, threshold is {t}")
    if len(set(holders)) != len(holders):
        raise RosterError("duplicate holder indices among shares")
    if any(h <= 0 for h in holders):
        raise RosterError("share with holder index 0")


def ss_share(s: FieldElement, t: int, roster: Sequence[int],
             rng: np.random.Generator) -> List[Share]:
    """Split s into one share per roster member; any t reconstruct it"""
    prime = s.prime
    _check_sharing(t, roster, prime)
    coefficients = [s.value] + [random_field_int(rng, prime) for _ in range(t - 1)]
    shares = []
    for holder in roster:
        acc = 0
        for c in reversed(coefficients):
            acc = (acc * holder + c) % prime
        shares.append(Share(int(holder), FieldElement(acc, prime)))
    return shares


def ss_recon(shares: Sequence[Share], t: int) -> FieldElement:
    """Lagrange interpolation at zero over the supplied shares"""
    holders = [sh.holder_index for sh in shares]
    _check_recon(holders, t)
    prime = shares[0].value.prime
    lam = lagrange_coefficients_at_zero(tuple(holders), prime)
    total = 0
    for coeff, sh in zip(lam, shares):
        total = (total + coeff * sh.value.value) % prime
    return FieldElement(total, prime)


def ss_share_vector(values: np.ndarray, t: int, roster: Sequence[int],
                    rng: np.random.Generator, prime: int = DEFAULT_PRIME) -> List[ShareVector]:
    """Share every entry of a field vector with an independent polynomial"""
    _check_sharing(t, roster, prime)
    values = np.asarray(values)
    size = len(values)
    coefficients = [random_field_vector(rng, size, prime) for _ in range(t - 1)]
    out = []
    for holder in roster:
        acc = values.astype(object)
        power = 1
        for c in coefficients:
            power = power * holder % prime
            acc = acc + c.astype(object) * power
        acc = acc % prime
        out.append(ShareVector(int(holder), acc.astype(np.uint64) if _native(prime) else acc, prime))
    return out


def ss_recon_vector(shares: Sequence[ShareVector], t: int) -> np.ndarray:
    holders = [sh.holder_index for sh in shares]
    _check_recon(holders, t)
    prime = shares[0].prime
    sizes = {len(sh) for sh in shares}
    if len(sizes) != 1:
        raise RosterError("share vectors of different lengths")
    lam = lagrange_coefficients_at_zero(tuple(holders), prime)
    acc = np.zeros(sizes.pop(), dtype=object)
    for coeff, sh in zip(lam, shares):
        acc = acc + sh.values.astype(object) * coeff
    acc = acc % prime
    return acc.astype(np.uint64) if _native(prime) else acc


def add_share_vectors(a: ShareVector, b: ShareVector) -> ShareVector:
    """Share-wise sum; reconstructs to the sum of the two secrets"""
    if a.holder_index != b.holder_index:
        raise RosterError("adding shares held by different participants")
    return ShareVector(a.holder_index, vec_add(a.values, b.values, a.prime), a.prime)


# ---------------------------------------------------------------------------
# Large integers (e.g. curve scalars) shared limb by limb
# ---------------------------------------------------------------------------

def limb_bits_for(prime: int) -> int:
    return prime.bit_length() - 1


def split_limbs(secret: int, bit_length: int, prime: int = DEFAULT_PRIME) -> np.ndarray:
    width = limb_bits_for(prime)
    count = max(1, math.ceil(bit_length / width))
    mask = (1 << width) - 1
    return field_array([(secret >> (width * i)) & mask for i in range(count)], prime)


def join_limbs(limbs: np.ndarray, prime: int = DEFAULT_PRIME) -> int:
    width = limb_bits_for(prime)
    return sum(int(v) << (width * i) for i, v in enumerate(limbs))


def share_scalar(secret: int, bit_length: int, t: int, roster: Sequence[int],
                 rng: np.random.Generator, prime: int = DEFAULT_PRIME) -> List[ShareVector]:
    return ss_share_vector(split_limbs(secret, bit_length, prime), t, roster, rng, prime)


def recon_scalar(shares: Sequence[ShareVector], t: int) -> int:
    return join_limbs(ss_recon_vector(shares, t), shares[0].prime)


def shares_by_holder(shares: Sequence[Share]) -> Dict[int, Share]:
    return {sh.holder_index: sh for sh in shares}
