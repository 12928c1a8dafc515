"""Blind signatures over an elliptic-curve group.

The signer commits to a one-time point R = k*G.  The requester blinds the
message digest with two secret scalars (gamma shifts the final signature
scalar, delta shifts the digest), obtains a response on the blinded digest,
and unblinds it into a signature that the signer cannot later recognize.

A signature (c, s) on message m under public key P checks as

    c == H(encode(m) || x(c*P + s*G) mod n)

with the digest interpreted as a big-endian integer reduced mod n.  The
message embeds the intended public key, and verification requires the
embedded key to equal the verification key: with an x-only check a
signature would otherwise also validate under one mirrored key, so the
binding is what makes issuance deniable by no one and undeniable by the
signer.  See the tests for a demonstration of the mirrored key against
the raw equation.
"""

from __future__ import annotations

import random
import threading
from dataclasses import dataclass

from .ec import CurveParams, KeyPair, Point, hash256

_SYSTEM_RNG = random.SystemRandom()

OUTPUT_ADDRESS_BYTES = 32
DENOMINATION_BYTES = 8
NONCE_BYTES = 16

_MAX_BLIND_RETRIES = 10000


class MessageError(ValueError):
    """Raised for malformed part-blind message encodings."""


class BlindingError(ValueError):
    """Raised when blinding cannot produce a usable digest."""


class SessionError(Exception):
    """Signing-session failure with a stable machine-readable code."""

    def __init__(self, code: str):
        super().__init__(code)
        self.code = code


@dataclass(frozen=True)
class PartBlindMessage:
    """Message under a part-blind signature.

    The output address and nonce stay hidden from the signer until
    redemption; the denomination and bank key are the agreed-on plain part.
    """

    output_address: bytes
    denomination: int
    bank_key: tuple[int, int]
    nonce: bytes


@dataclass(frozen=True)
class BlindingSecrets:
    """Requester-side secrets tying one blinded digest to its signature."""

    gamma: int
    delta: int
    t: int
    c: int


@dataclass(frozen=True)
class Signature:
    c: int
    s: int


def encode_message(curve: CurveParams, m: PartBlindMessage) -> bytes:
    """Fixed-width message bytes: address || denomination || key || nonce."""
    if len(m.output_address) != OUTPUT_ADDRESS_BYTES:
        raise MessageError("output address must be 32 bytes")
    if not 0 < m.denomination < 1 << (8 * DENOMINATION_BYTES):
        raise MessageError("denomination out of range")
    if len(m.nonce) != NONCE_BYTES:
        raise MessageError("nonce must be 16 bytes")
    try:
        key = curve.serialize_point(m.bank_key)
    except ValueError as exc:
        raise MessageError(f"bad bank key: {exc}") from None
    return (m.output_address
            + m.denomination.to_bytes(DENOMINATION_BYTES, "big")
            + key
            + m.nonce)


def decode_message(curve: CurveParams, data: bytes) -> PartBlindMessage:
    """Inverse of encode_message; rejects any length or field defect."""
    key_len = 1 + curve.field_bytes
    expected = OUTPUT_ADDRESS_BYTES + DENOMINATION_BYTES + key_len + NONCE_BYTES
    if len(data) != expected:
        raise MessageError(f"message must be {expected} bytes, got {len(data)}")
    addr = data[:OUTPUT_ADDRESS_BYTES]
    off = OUTPUT_ADDRESS_BYTES
    denom = int.from_bytes(data[off:off + DENOMINATION_BYTES], "big")
    off += DENOMINATION_BYTES
    try:
        key = curve.parse_point(data[off:off + key_len])
    except ValueError as exc:
        raise MessageError(f"bad bank key: {exc}") from None
    nonce = data[off + key_len:]
    if denom == 0:
        raise MessageError("denomination out of range")
    return PartBlindMessage(output_address=addr, denomination=denom,
                            bank_key=key, nonce=nonce)


def _digest_scalar(curve: CurveParams, message_bytes: bytes, t: int) -> int:
    t_bytes = t.to_bytes(curve.scalar_bytes, "big")
    return int.from_bytes(hash256(message_bytes + t_bytes), "big") % curve.n


def blind(curve: CurveParams, m: PartBlindMessage, R: Point, P: Point,
          rng: random.Random | None = None, *,
          gamma: int | None = None,
          delta: int | None = None) -> tuple[int, BlindingSecrets]:
    """Blind a message against commitment R; returns (c_prime, secrets).

    Picks fresh secrets gamma and delta, forms A = R + gamma*G + delta*P,
    takes t = x(A) mod n, digests the message with t, and hides the digest
    as c_prime = c - delta.  Resamples whenever t degenerates to zero.
    Explicit gamma/delta pin the outcome for tests and fail instead of
    resampling.
    """
    rng = rng or _SYSTEM_RNG
    if R is None or not curve.is_on_curve(R):
        raise BlindingError("commitment must be a finite on-curve point")
    if P is None or not curve.is_on_curve(P):
        raise BlindingError("public key must be a finite on-curve point")
    if m.bank_key != P:
        raise BlindingError("message embeds a different public key")
    message_bytes = encode_message(curve, m)
    pinned = gamma is not None or delta is not None
    if pinned and (gamma is None or delta is None):
        raise BlindingError("pin both blinding scalars or neither")
    for _ in range(_MAX_BLIND_RETRIES):
        g = gamma if pinned else curve.random_scalar(rng)
        d = delta if pinned else curve.random_scalar(rng)
        if not (1 <= g < curve.n and 1 <= d < curve.n):
            raise BlindingError("blinding scalars out of range")
        A = curve.add(R, curve.add(curve.mul(g, curve.g), curve.mul(d, P)))
        if A is None:
            if pinned:
                raise BlindingError("blinded point degenerated to infinity")
            continue
        t = A[0] % curve.n
        if t == 0:
            if pinned:
                raise BlindingError("blinded x-coordinate reduced to zero")
            continue
        c = _digest_scalar(curve, message_bytes, t)
        c_prime = (c - d) % curve.n
        return c_prime, BlindingSecrets(gamma=g, delta=d, t=t, c=c)
    raise BlindingError("could not find a usable blinding after many tries")


def unblind(curve: CurveParams, s_prime: int, secrets: BlindingSecrets) -> Signature:
    """Shift the signer's response into the final signature scalar."""
    return Signature(c=secrets.c, s=(s_prime + secrets.gamma) % curve.n)


def verify(curve: CurveParams, m: PartBlindMessage, sig: Signature,
           P: Point) -> bool:
    """Check a signature; any structural defect yields False, not an error."""
    if P is None or not curve.is_on_curve(P):
        return False
    if not isinstance(sig.c, int) or not isinstance(sig.s, int):
        return False
    if not (0 <= sig.c < curve.n and 0 <= sig.s < curve.n):
        return False
    try:
        message_bytes = encode_message(curve, m)
    except ValueError:
        return False
    # the message names its key; a signature must not travel to other keys
    if m.bank_key != P:
        return False
    V = curve.add(curve.mul(sig.c, P), curve.mul(sig.s, curve.g))
    if V is None:
        return False
    return _digest_scalar(curve, message_bytes, V[0] % curve.n) == sig.c


@dataclass
class _Session:
    k: int | None
    commitment: tuple[int, int]
    signer_public: tuple[int, int]
    created_height: int
    consumed: bool = False


class SignerRegistry:
    """One-time signing sessions for a single signer.

    Each session holds a secret nonce k with commitment R = k*G.  A session
    signs exactly once: consumption is an atomic test-and-set, after which
    k is erased.  Unconsumed sessions expire ttl_blocks after creation.
    """

    def __init__(self, curve: CurveParams, ttl_blocks: int = 1008,
                 rng: random.Random | None = None):
        self.curve = curve
        self.ttl_blocks = ttl_blocks
        self._rng = rng or _SYSTEM_RNG
        self._lock = threading.Lock()
        self._sessions: dict[str, _Session] = {}

    def new_session(self, signer_key: KeyPair, *, height: int = 0,
                    k: int | None = None) -> tuple[str, Point]:
        """Open a session for signer_key; returns (session_id, R)."""
        if k is None:
            k = self.curve.random_scalar(self._rng)
        if not 1 <= k < self.curve.n:
            raise ValueError("nonce out of range")
        R = self.curve.mul(k, self.curve.g)
        with self._lock:
            session_id = self._rng.randbytes(16).hex()
            while session_id in self._sessions:
                session_id = self._rng.randbytes(16).hex()
            self._sessions[session_id] = _Session(
                k=k, commitment=R, signer_public=signer_key.public,
                created_height=height)
        return session_id, R

    def blind_sign(self, session_id: str, c_prime: int, signer_key: KeyPair,
                   *, height: int = 0) -> int:
        """Answer one blinded digest: s_prime = k - c_prime * d mod n."""
        if not 0 <= c_prime < self.curve.n:
            raise SessionError("bad-blinded-digest")
        with self._lock:
            session = self._sessions.get(session_id)
            if session is None:
                raise SessionError("unknown-session")
            if session.signer_public != signer_key.public:
                raise SessionError("wrong-signer")
            if session.consumed:
                raise SessionError("session-consumed")
            if height - session.created_height >= self.ttl_blocks:
                raise SessionError("session-expired")
            k = session.k
            session.consumed = True
            session.k = None
        return (k - c_prime * signer_key.secret) % self.curve.n

    def commitment_of(self, session_id: str) -> Point:
        with self._lock:
            session = self._sessions.get(session_id)
            if session is None:
                raise SessionError("unknown-session")
            return session.commitment

    def expire_before(self, height: int) -> int:
        """Drop unconsumed sessions whose ttl has passed; returns the count."""
        dropped = 0
        with self._lock:
            for sid in list(self._sessions):
                session = self._sessions[sid]
                if (not session.consumed
                        and height - session.created_height >= self.ttl_blocks):
                    del self._sessions[sid]
                    dropped += 1
        return dropped

    def __len__(self) -> int:
        with self._lock:
            return len(self._sessions)
