"""Paillier cryptosystem with g = n + 1, signed-value encoding and
carry-free slot packing for aggregating +-1 updates.

Not side-channel hardened: big-integer arithmetic is not constant time.
"""
from __future__ import annotations

import hashlib
import math
import random
import secrets
import struct
import threading
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

try:
    import gmpy2

    def powmod(b, e, m):
        return int(gmpy2.powmod(b, e, m))

    def invert(a, m):
        return int(gmpy2.invert(a, m))

    BIGINT_BACKEND = "gmpy2"
except ImportError:  # pragma: no cover - exercised when gmpy2 is absent
    powmod = pow

    def invert(a, m):
        return pow(a, -1, m)

    BIGINT_BACKEND = "python"

DEFAULT_BITS = 2048
MR_ROUNDS = 64

_SMALL_PRIMES = [p for p in range(3, 2000) if all(p % q for q in range(2, int(p ** 0.5) + 1))]


class CryptoError(ValueError):
    pass


# --------------------------------------------------------------------------
# randomness


class NonceSource:
    """Thread-safe source of random integers.

    Seeded sources are deterministic (test mode only); unseeded ones draw
    from the OS CSPRNG.
    """

    def __init__(self, seed=None):
        self._rng = secrets.SystemRandom() if seed is None else random.Random(seed)
        self._lock = threading.Lock()

    def randrange(self, lo, hi):
        with self._lock:
            return self._rng.randrange(lo, hi)

    def getrandbits(self, k):
        with self._lock:
            return self._rng.getrandbits(k)


_default_nonces = NonceSource()


# --------------------------------------------------------------------------
# primes


def is_probable_prime(n: int, rounds: int = MR_ROUNDS, rng: NonceSource | None = None) -> bool:
    """Miller-Rabin with ``rounds`` random bases after trial division."""
    if n < 2:
        return False
    if n in (2, 3):
        return True
    if n % 2 == 0:
        return False
    for p in _SMALL_PRIMES:
        if n == p:
            return True
        if n % p == 0:
            return False
    rng = rng or _default_nonces
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for _ in range(rounds):
        a = rng.randrange(2, n - 1)
        x = powmod(a, d, n)
        if x == 1 or x == n - 1:
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def random_prime(bits: int, rng: NonceSource, max_tries: int = 100_000) -> int:
    """Random prime with exactly ``bits`` bits and its top two bits set."""
    for _ in range(max_tries):
        c = rng.getrandbits(bits) | (3 << (bits - 2)) | 1
        if is_probable_prime(c, rng=rng):
            return c
    raise CryptoError(f"no {bits}-bit prime found after {max_tries} candidates")


# --------------------------------------------------------------------------
# keys and ciphertexts


@dataclass(frozen=True)
class PublicKey:
    n: int
    g: int
    nsquare: int
    bits: int

    @classmethod
    def from_n(cls, n: int) -> "PublicKey":
        return cls(n, n + 1, n * n, n.bit_length())

    @property
    def fingerprint(self) -> str:
        raw = self.n.to_bytes((self.n.bit_length() + 7) // 8, "big")
        return hashlib.sha256(raw).hexdigest()[:16]

    def encrypt(self, m: int, nonces: NonceSource | None = None, r: int | None = None) -> "Ciphertext":
        return encrypt(self, m, nonces, r)

    def to_bytes(self) -> bytes:
        """Key broadcast form: 4-byte little-endian bit length + big-endian n."""
        return struct.pack("<I", self.bits) + self.n.to_bytes((self.bits + 7) // 8, "big")

    @classmethod
    def from_bytes(cls, raw: bytes) -> "PublicKey":
        if len(raw) < 4:
            raise CryptoError("truncated public key")
        (bits,) = struct.unpack_from("<I", raw, 0)
        nb = (bits + 7) // 8
        if len(raw) != 4 + nb:
            raise CryptoError(f"public key of {bits} bits needs {4 + nb} bytes, got {len(raw)}")
        n = int.from_bytes(raw[4:], "big")
        if n.bit_length() != bits:
            raise CryptoError("public key bit length does not match modulus")
        return cls.from_n(n)


@dataclass(frozen=True, repr=False)
class PrivateKey:
    public: PublicKey
    lam: int
    mu: int
    p: int
    q: int

    def decrypt(self, c: "Ciphertext") -> int:
        return decrypt(self, c)

    def __repr__(self):
        return f"PrivateKey(fingerprint={self.public.fingerprint})"


@dataclass(frozen=True)
class PaillierKeypair:
    public: PublicKey
    secret: PrivateKey

    @property
    def bit_length(self) -> int:
        return self.public.bits


@dataclass(frozen=True)
class Ciphertext:
    value: int
    fingerprint: str

    def to_bytes(self) -> bytes:
        """4-byte little-endian byte count + big-endian magnitude."""
        mag = self.value.to_bytes((self.value.bit_length() + 7) // 8, "big")
        return struct.pack("<I", len(mag)) + mag


def L(x: int, n: int) -> int:
    return (x - 1) // n


def keypair_from_primes(p: int, q: int) -> PaillierKeypair:
    if p == q:
        raise CryptoError("p and q must be distinct")
    n = p * q
    if math.gcd(n, (p - 1) * (q - 1)) != 1:
        raise CryptoError("gcd(pq, (p-1)(q-1)) must be 1")
    pk = PublicKey.from_n(n)
    lam = math.lcm(p - 1, q - 1)
    u = powmod(pk.g, lam, pk.nsquare)
    mu = invert(L(u, n) % n, n)
    return PaillierKeypair(pk, PrivateKey(pk, lam, mu, p, q))


def keygen(bits: int = DEFAULT_BITS, seed: int | None = None, p: int | None = None,
           q: int | None = None, max_retries: int = 64) -> PaillierKeypair:
    """Generate a keypair with an n of exactly ``bits`` bits.

    ``seed`` makes generation deterministic (tests only). Explicit ``p``
    and ``q`` bypass generation and are checked for primality.
    """
    if p is not None or q is not None:
        if p is None or q is None:
            raise CryptoError("give both p and q")
        if not (is_probable_prime(p) and is_probable_prime(q)):
            raise CryptoError("p and q must be prime")
        return keypair_from_primes(p, q)
    if bits < 64:
        raise CryptoError("modulus must have at least 64 bits")
    rng = NonceSource(seed)
    for _ in range(max_retries):
        a = random_prime(bits // 2, rng)
        b = random_prime(bits - bits // 2, rng)
        if a == b:
            continue
        if (a * b).bit_length() != bits:
            continue
        try:
            return keypair_from_primes(a, b)
        except CryptoError:
            continue
    raise CryptoError(f"key generation failed after {max_retries} attempts")


def _check_key(pk: PublicKey, c: Ciphertext):
    if c.fingerprint != pk.fingerprint:
        raise CryptoError("ciphertext was produced under a different key")


def encrypt(pk: PublicKey, m: int, nonces: NonceSource | None = None, r: int | None = None) -> Ciphertext:
    """E(m) = g^m r^n mod n^2 with fresh r in Z*_n (g = n + 1, so g^m = 1 + mn)."""
    m = int(m)
    if not 0 <= m < pk.n:
        raise CryptoError(f"plaintext must lie in [0, n), got {m}")
    if r is None:
        src = nonces or _default_nonces
        while True:
            r = src.randrange(1, pk.n)
            if math.gcd(r, pk.n) == 1:
                break
    gm = (1 + m * pk.n) % pk.nsquare
    return Ciphertext(gm * powmod(r, pk.n, pk.nsquare) % pk.nsquare, pk.fingerprint)


def he_add(pk: PublicKey, c1: Ciphertext, c2: Ciphertext) -> Ciphertext:
    """Ciphertext product: decrypts to (a + b) mod n."""
    _check_key(pk, c1)
    _check_key(pk, c2)
    return Ciphertext(c1.value * c2.value % pk.nsquare, pk.fingerprint)


def decrypt(sk: PrivateKey, c: Ciphertext) -> int:
    pk = sk.public
    _check_key(pk, c)
    if not 0 < c.value < pk.nsquare:
        raise CryptoError("malformed ciphertext (outside (0, n^2))")
    return L(powmod(c.value, sk.lam, pk.nsquare), pk.n) * sk.mu % pk.n


def ciphertexts_to_bytes(cts: Iterable[Ciphertext]) -> bytes:
    return b"".join(c.to_bytes() for c in cts)


def ciphertexts_from_bytes(raw: bytes, pk: PublicKey) -> list[Ciphertext]:
    out, pos = [], 0
    while pos < len(raw):
        if pos + 4 > len(raw):
            raise CryptoError("truncated ciphertext length")
        (nb,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        if pos + nb > len(raw):
            raise CryptoError(f"ciphertext needs {nb} bytes, only {len(raw) - pos} left")
        v = int.from_bytes(raw[pos:pos + nb], "big")
        if v >= pk.nsquare:
            raise CryptoError("ciphertext value exceeds n^2")
        out.append(Ciphertext(v, pk.fingerprint))
        pos += nb
    return out


# --------------------------------------------------------------------------
# signed encoding and slot packing


@dataclass(frozen=True)
class SignedEncoding:
    """Encoding of per-client values in [-value_bound, value_bound].

    With packing, each slot holds ``v + value_bound`` as a base-``base``
    digit, ``base = 2 * k_max * value_bound + 1``, so sums over up to
    ``k_max`` clients never carry between slots. ``values_per_ciphertext``
    is 1 when packing is off (one value per ciphertext, negatives wrapped
    mod n).
    """

    k_max: int
    base: int
    values_per_ciphertext: int
    value_bound: int = 1

    @classmethod
    def create(cls, k_max: int, n_bits: int, value_bound: int = 1, batch: bool = True) -> "SignedEncoding":
        if k_max < 1 or value_bound < 1:
            raise CryptoError("k_max and value_bound must be >= 1")
        base = 2 * k_max * value_bound + 1
        if not batch:
            return cls(k_max, base, 1, value_bound)
        limit = 1 << (n_bits - 1)
        b, acc = 0, 1
        while acc * base < limit:
            acc *= base
            b += 1
        if b < 1:
            raise CryptoError(f"modulus of {n_bits} bits cannot hold one base-{base} slot")
        return cls(k_max, base, b, value_bound)

    @property
    def batched(self) -> bool:
        return self.values_per_ciphertext > 1

    def check(self, n_bits: int) -> None:
        if self.values_per_ciphertext * math.log2(self.base) >= n_bits - 1:
            raise CryptoError("packing would overflow the plaintext space")

    def n_ciphertexts(self, d: int) -> int:
        return -(-d // self.values_per_ciphertext)


def encode_signed(v: int, enc: SignedEncoding, n: int) -> int:
    bound = enc.k_max * enc.value_bound
    if abs(v) > bound:
        raise CryptoError(f"|{v}| exceeds the encodable bound {bound}")
    return int(v) % n


def decode_signed(d: int, n: int, enc: SignedEncoding | None = None) -> int:
    v = d - n if d > n // 2 else d
    if enc is not None and abs(v) > enc.k_max * enc.value_bound:
        raise CryptoError(f"decoded aggregate {v} is outside the encodable range")
    return v


def pack_batch(values: Sequence[int], enc: SignedEncoding) -> list[int]:
    """Pack signed per-client values into base-``enc.base`` plaintext integers."""
    vb = enc.value_bound
    vals = np.asarray(values, dtype=np.int64)
    if vals.size and np.abs(vals).max() > vb:
        raise CryptoError(f"slot values must lie in [-{vb}, {vb}]")
    b = enc.values_per_ciphertext
    digits = (vals + vb).tolist()
    out = []
    for start in range(0, len(digits), b):
        acc = 0
        for dgt in reversed(digits[start:start + b]):
            acc = acc * enc.base + dgt
        out.append(acc)
    return out


def unpack_sums(decrypted: int, enc: SignedEncoding, num_clients: int, count: int | None = None) -> list[int]:
    """Per-slot signed sums from one decrypted aggregate of ``num_clients`` packs."""
    if num_clients > enc.k_max:
        raise CryptoError(f"{num_clients} clients exceed K_max={enc.k_max}; slots would carry")
    count = enc.values_per_ciphertext if count is None else count
    out = []
    x = int(decrypted)
    for _ in range(count):
        x, dgt = divmod(x, enc.base)
        out.append(dgt - num_clients * enc.value_bound)
    return out


# --------------------------------------------------------------------------
# vector protocol


def encrypt_vector(pk: PublicKey, values, enc: SignedEncoding, nonces: NonceSource | None = None) -> list[Ciphertext]:
    """Client side: encrypt a vector of small signed integers."""
    if enc.batched:
        plains = pack_batch(values, enc)
    else:
        plains = [encode_signed(int(v), enc, pk.n) for v in values]
    return [encrypt(pk, m, nonces) for m in plains]


class SecureAggregator:
    """Server-side homomorphic accumulator.

    Only the running product of ciphertexts is kept, and :meth:`finalize`
    decrypts the aggregate; individual updates are never decrypted here.
    """

    def __init__(self, pk: PublicKey, enc: SignedEncoding, d: int, expected_clients: int | None = None):
        if expected_clients is not None and expected_clients > enc.k_max:
            raise CryptoError(f"{expected_clients} clients exceed K_max={enc.k_max}")
        self.pk, self.enc, self.d = pk, enc, d
        self.count = 0
        self._acc: list[Ciphertext] | None = None

    def add(self, cts: Sequence[Ciphertext]) -> None:
        need = self.enc.n_ciphertexts(self.d)
        if len(cts) != need:
            raise CryptoError(f"expected {need} ciphertexts, got {len(cts)}")
        if self.count + 1 > self.enc.k_max:
            raise CryptoError(f"more than K_max={self.enc.k_max} contributions")
        if self._acc is None:
            for c in cts:
                _check_key(self.pk, c)
            self._acc = list(cts)
        else:
            self._acc = [he_add(self.pk, a, c) for a, c in zip(self._acc, cts)]
        self.count += 1

    def aggregate(self) -> list[Ciphertext]:
        if self._acc is None:
            raise CryptoError("no contributions")
        return list(self._acc)

    def finalize(self, sk: PrivateKey) -> np.ndarray:
        """Decrypt the aggregate into exact per-coordinate signed sums."""
        if sk.public != self.pk:
            raise CryptoError("secret key does not match aggregation key")
        return decrypt_sums(sk, self.aggregate(), self.enc, self.count, self.d)


def decrypt_sums(sk: PrivateKey, agg: Sequence[Ciphertext], enc: SignedEncoding, num_clients: int, d: int) -> np.ndarray:
    n = sk.public.n
    out = []
    if enc.batched:
        b = enc.values_per_ciphertext
        for i, c in enumerate(agg):
            count = min(b, d - i * b)
            out.extend(unpack_sums(decrypt(sk, c), enc, num_clients, count))
    else:
        out = [decode_signed(decrypt(sk, c), n, enc) for c in agg]
    return np.asarray(out, dtype=np.int64)
