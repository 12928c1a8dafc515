"""Elliptic-curve groups, keys, hashing, addresses, and plain ECDSA signatures.

Curves are short Weierstrass curves y^2 = x^3 + a*x + b over a prime field,
with a prime-order group and cofactor 1.  Two curves are registered: the
production 256-bit curve and a tiny curve over a 1-byte field used for
exhaustive testing.

All arithmetic uses arbitrary-precision Python integers and is NOT
constant-time.  Scalar multiplication, inversion, and comparisons leak
timing information, so this module is strictly a simulation and research
artifact; it must never guard real funds.
"""

from __future__ import annotations

import hashlib
import hmac
import random
from dataclasses import dataclass

# A point is an (x, y) pair of field elements; None is the group identity.
Point = tuple[int, int] | None

_SYSTEM_RNG = random.SystemRandom()

_SMALL_PRIMES = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47,
                 53, 59, 61, 67, 71, 73, 79, 83, 89, 97, 101, 103, 107,
                 109, 113, 127, 131, 137, 139, 149, 151, 157, 163, 167,
                 173, 179, 181, 191, 193, 197, 199, 211, 223, 227, 229,
                 233, 239, 241, 251]


class PointError(ValueError):
    """Raised for off-curve points, bad encodings, or misuse of infinity."""


def is_probable_prime(n: int, rng: random.Random | None = None,
                      rounds: int = 32) -> bool:
    """Miller-Rabin primality test; error probability at most 4**-rounds."""
    if n < 2:
        return False
    for q in _SMALL_PRIMES:
        if n % q == 0:
            return n == q
    rng = rng or _SYSTEM_RNG
    d = n - 1
    r = 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for _ in range(rounds):
        a = rng.randrange(2, n - 1)
        x = pow(a, d, n)
        if x == 1 or x == n - 1:
            continue
        for _ in range(r - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


@dataclass(frozen=True)
class CurveParams:
    """Domain parameters of one curve, plus its group and codec operations."""

    name: str
    p: int
    a: int
    b: int
    gx: int
    gy: int
    n: int
    h: int

    def __post_init__(self):
        if self.h != 1:
            raise ValueError("only cofactor-1 curves are supported")
        if (4 * self.a ** 3 + 27 * self.b ** 2) % self.p == 0:
            raise ValueError("singular curve")
        if self.p % 4 != 3:
            raise ValueError("p must be 3 mod 4 for point decompression")
        # deterministic witnesses make construction reproducible
        check_rng = random.Random(self.p ^ self.n)
        if not is_probable_prime(self.p, check_rng):
            raise ValueError("field modulus is not prime")
        if not is_probable_prime(self.n, check_rng):
            raise ValueError("group order is not prime")
        if not self.is_on_curve((self.gx, self.gy)):
            raise ValueError("generator is not on the curve")
        if self.mul(self.n, self.g) is not None:
            raise ValueError("generator order does not divide n")

    @property
    def g(self) -> Point:
        return (self.gx, self.gy)

    @property
    def field_bytes(self) -> int:
        return (self.p.bit_length() + 7) // 8

    @property
    def scalar_bytes(self) -> int:
        return (self.n.bit_length() + 7) // 8

    def is_on_curve(self, P: Point) -> bool:
        if P is None:
            return True
        x, y = P
        if not (0 <= x < self.p and 0 <= y < self.p):
            return False
        return (y * y - (x * x * x + self.a * x + self.b)) % self.p == 0

    def negate(self, P: Point) -> Point:
        if P is None:
            return None
        x, y = P
        return (x, (-y) % self.p)

    def add(self, P: Point, Q: Point) -> Point:
        """Affine chord-and-tangent addition."""
        if P is None:
            return Q
        if Q is None:
            return P
        p = self.p
        x1, y1 = P
        x2, y2 = Q
        if x1 == x2:
            if (y1 + y2) % p == 0:
                return None
            lam = (3 * x1 * x1 + self.a) * pow(2 * y1, -1, p) % p
        else:
            lam = (y2 - y1) * pow(x2 - x1, -1, p) % p
        x3 = (lam * lam - x1 - x2) % p
        y3 = (lam * (x1 - x3) - y1) % p
        return (x3, y3)

    def _jacobian_double(self, X1, Y1, Z1):
        p = self.p
        A = X1 * X1 % p
        B = Y1 * Y1 % p
        C = B * B % p
        D = 2 * ((X1 + B) * (X1 + B) - A - C) % p
        Z2 = Z1 * Z1 % p
        E = (3 * A + self.a * Z2 * Z2) % p
        X3 = (E * E - 2 * D) % p
        Y3 = (E * (D - X3) - 8 * C) % p
        Z3 = 2 * Y1 * Z1 % p
        return X3, Y3, Z3

    def _jacobian_add_affine(self, X1, Y1, Z1, x2, y2):
        p = self.p
        Z1Z1 = Z1 * Z1 % p
        U2 = x2 * Z1Z1 % p
        S2 = y2 * Z1 * Z1Z1 % p
        if U2 == X1:
            if (S2 + Y1) % p == 0:
                return None
            return self._jacobian_double(X1, Y1, Z1)
        H = (U2 - X1) % p
        HH = H * H % p
        I = 4 * HH % p
        J = H * I % p
        r = 2 * (S2 - Y1) % p
        V = X1 * I % p
        X3 = (r * r - J - 2 * V) % p
        Y3 = (r * (V - X3) - 2 * Y1 * J) % p
        Z3 = ((Z1 + H) * (Z1 + H) - Z1Z1 - HH) % p
        return X3, Y3, Z3

    def mul(self, k: int, P: Point) -> Point:
        """Double-and-add scalar multiplication.

        Internally uses Jacobian coordinates so only one field inversion is
        paid per call; the result is converted back to affine form.
        """
        if P is not None and not self.is_on_curve(P):
            raise PointError("point is not on the curve")
        k %= self.n
        if P is None or k == 0:
            return None
        x2, y2 = P
        acc = None
        for bit in bin(k)[2:]:
            if acc is not None:
                acc = self._jacobian_double(*acc)
            if bit == "1":
                if acc is None:
                    acc = (x2, y2, 1)
                else:
                    acc = self._jacobian_add_affine(*acc, x2, y2)
        if acc is None:
            return None
        X, Y, Z = acc
        zi = pow(Z, -1, self.p)
        zi2 = zi * zi % self.p
        return (X * zi2 % self.p, Y * zi2 * zi % self.p)

    def serialize_point(self, P: Point) -> bytes:
        """Compressed encoding: parity prefix 02/03 plus big-endian x."""
        if P is None:
            raise PointError("cannot serialize the point at infinity")
        if not self.is_on_curve(P):
            raise PointError("point is not on the curve")
        x, y = P
        return bytes([0x02 | (y & 1)]) + x.to_bytes(self.field_bytes, "big")

    def parse_point(self, data: bytes) -> Point:
        """Inverse of serialize_point; rejects malformed or off-curve input."""
        if len(data) != 1 + self.field_bytes:
            raise PointError("wrong encoded point length")
        if data[0] not in (0x02, 0x03):
            raise PointError("bad point prefix")
        x = int.from_bytes(data[1:], "big")
        if x >= self.p:
            raise PointError("x out of field range")
        rhs = (x * x * x + self.a * x + self.b) % self.p
        y = pow(rhs, (self.p + 1) // 4, self.p)
        if y * y % self.p != rhs:
            raise PointError("x is not on the curve")
        if (y & 1) != (data[0] & 1):
            y = self.p - y
        return (x, y)

    def random_scalar(self, rng: random.Random | None = None) -> int:
        return (rng or _SYSTEM_RNG).randrange(1, self.n)


SECP256K1 = CurveParams(
    name="secp256k1",
    p=2**256 - 2**32 - 2**9 - 2**8 - 2**7 - 2**6 - 2**4 - 1,
    a=0,
    b=7,
    gx=0x79BE667EF9DCBBAC55A06295CE870B07029BFCDB2DCE28D959F2815B16F81798,
    gy=0x483ADA7726A3C4655DA4FBFC0E1108A8FD17B448A68554199C47D08FFB10D4B8,
    n=0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEBAAEDCE6AF48A03BBFD25E8CD0364141,
    h=1,
)

# Same curve family over a 1-byte field; every group property can be checked
# by exhaustive enumeration.  139 points including infinity.
TOY_CURVE = CurveParams(
    name="toy", p=163, a=0, b=7, gx=2, gy=34, n=139, h=1,
)

CURVES = {c.name: c for c in (SECP256K1, TOY_CURVE)}


def get_curve(name: str) -> CurveParams:
    try:
        return CURVES[name]
    except KeyError:
        raise ValueError(f"unknown curve {name!r}") from None


@dataclass(frozen=True)
class KeyPair:
    secret: int
    public: tuple[int, int]


def keygen(curve: CurveParams, rng: random.Random | None = None,
           secret: int | None = None) -> KeyPair:
    """Generate a key pair; `secret` pins the private scalar for tests."""
    if secret is None:
        secret = curve.random_scalar(rng)
    if not 1 <= secret < curve.n:
        raise ValueError("secret out of range")
    return KeyPair(secret=secret, public=curve.mul(secret, curve.g))


def hash256(data: bytes) -> bytes:
    """Single SHA-256 digest."""
    return hashlib.sha256(data).digest()


def address_of(curve: CurveParams, P: Point) -> bytes:
    """Ledger address: double SHA-256 of the compressed point encoding."""
    return hash256(hash256(curve.serialize_point(P)))


def _bits2int(data: bytes, n: int) -> int:
    """Leftmost bits of `data` as an integer, truncated to n's bit length."""
    v = int.from_bytes(data, "big")
    excess = len(data) * 8 - n.bit_length()
    if excess > 0:
        v >>= excess
    return v


def _int2octets(v: int, rolen: int) -> bytes:
    return v.to_bytes(rolen, "big")


def _nonce_stream(curve: CurveParams, secret: int, digest: bytes):
    """Deterministic nonce candidates from an HMAC-SHA256 chain.

    The chain is keyed by the private scalar and the message digest, so
    the same (key, message) pair always yields the same signature.
    """
    n = curve.n
    rolen = curve.scalar_bytes
    h = _bits2int(digest, n) % n
    V = b"\x01" * 32
    K = b"\x00" * 32
    seed = _int2octets(secret, rolen) + _int2octets(h, rolen)
    K = hmac.new(K, V + b"\x00" + seed, hashlib.sha256).digest()
    V = hmac.new(K, V, hashlib.sha256).digest()
    K = hmac.new(K, V + b"\x01" + seed, hashlib.sha256).digest()
    V = hmac.new(K, V, hashlib.sha256).digest()
    while True:
        t = b""
        while len(t) * 8 < n.bit_length():
            V = hmac.new(K, V, hashlib.sha256).digest()
            t += V
        k = _bits2int(t, n)
        if 1 <= k < n:
            yield k
        K = hmac.new(K, V + b"\x00", hashlib.sha256).digest()
        V = hmac.new(K, V, hashlib.sha256).digest()


def plain_sign(curve: CurveParams, key: KeyPair, msg: bytes) -> bytes:
    """ECDSA with deterministic nonces; returns fixed-width r || s."""
    n = curve.n
    digest = hash256(msg)
    z = _bits2int(digest, n) % n
    for k in _nonce_stream(curve, key.secret, digest):
        R = curve.mul(k, curve.g)
        r = R[0] % n
        if r == 0:
            continue
        s = pow(k, -1, n) * (z + r * key.secret) % n
        if s == 0:
            continue
        w = curve.scalar_bytes
        return r.to_bytes(w, "big") + s.to_bytes(w, "big")


def plain_verify(curve: CurveParams, public: Point, msg: bytes,
                 sig: bytes) -> bool:
    """Check an ECDSA signature; malformed input yields False, not an error."""
    n = curve.n
    w = curve.scalar_bytes
    if not isinstance(sig, (bytes, bytearray)) or len(sig) != 2 * w:
        return False
    if public is None or not curve.is_on_curve(public):
        return False
    r = int.from_bytes(sig[:w], "big")
    s = int.from_bytes(sig[w:], "big")
    if not (1 <= r < n and 1 <= s < n):
        return False
    z = _bits2int(hash256(msg), n) % n
    si = pow(s, -1, n)
    V = curve.add(curve.mul(z * si % n, curve.g),
                  curve.mul(r * si % n, public))
    if V is None:
        return False
    return V[0] % n == r
