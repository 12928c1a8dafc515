import random
import threading

import pytest
from hypothesis import given, settings, strategies as st

from tumbler import blindsig, ec
from tumbler.blindsig import PartBlindMessage, Signature
from tests.conftest import naive_mul


def make_message(curve, bank_public, rng):
    return PartBlindMessage(
        output_address=rng.randbytes(32),
        denomination=100_000,
        bank_key=bank_public,
        nonce=rng.randbytes(16),
    )


def full_round(curve, rng, signer=None, message=None):
    """Run one complete issue/blind/sign/unblind cycle; returns all values."""
    signer = signer or ec.keygen(curve, rng)
    registry = blindsig.SignerRegistry(curve, rng=rng)
    session_id, R = registry.new_session(signer)
    m = message or make_message(curve, signer.public, rng)
    c_prime, secrets = blindsig.blind(curve, m, R, signer.public, rng)
    s_prime = registry.blind_sign(session_id, c_prime, signer)
    sig = blindsig.unblind(curve, s_prime, secrets)
    return {
        "signer": signer, "registry": registry, "session_id": session_id,
        "R": R, "m": m, "c_prime": c_prime, "secrets": secrets,
        "s_prime": s_prime, "sig": sig,
    }


def raw_equation_holds(curve, m, sig, P):
    """The x-only verification equation with no key binding."""
    V = curve.add(curve.mul(sig.c, P), curve.mul(sig.s, curve.g))
    if V is None:
        return False
    enc = blindsig.encode_message(curve, m)
    return blindsig._digest_scalar(curve, enc, V[0] % curve.n) == sig.c


# --- message codec

def test_encoded_message_width_is_89_bytes_on_production_curve(secp):
    rng = random.Random(0)
    key = ec.keygen(secp, rng)
    m = make_message(secp, key.public, rng)
    data = blindsig.encode_message(secp, m)
    assert len(data) == 32 + 8 + 33 + 16 == 89
    assert blindsig.decode_message(secp, data) == m


def test_codec_round_trips_on_toy_curve(toy):
    rng = random.Random(1)
    key = ec.keygen(toy, rng)
    for _ in range(20):
        m = PartBlindMessage(
            output_address=rng.randbytes(32),
            denomination=rng.randrange(1, 1 << 32),
            bank_key=key.public,
            nonce=rng.randbytes(16),
        )
        assert blindsig.decode_message(
            toy, blindsig.encode_message(toy, m)) == m


def test_codec_rejects_malformed_input(secp):
    rng = random.Random(2)
    key = ec.keygen(secp, rng)
    m = make_message(secp, key.public, rng)
    data = blindsig.encode_message(secp, m)
    with pytest.raises(blindsig.MessageError):
        blindsig.decode_message(secp, data[:-1])
    with pytest.raises(blindsig.MessageError):
        blindsig.decode_message(secp, data + b"\x00")
    bad_key = data[:40] + b"\x05" + data[41:]
    with pytest.raises(blindsig.MessageError):
        blindsig.decode_message(secp, bad_key)
    with pytest.raises(blindsig.MessageError):
        blindsig.encode_message(secp, PartBlindMessage(
            b"\x00" * 31, 1, key.public, b"\x00" * 16))
    with pytest.raises(blindsig.MessageError):
        blindsig.encode_message(secp, PartBlindMessage(
            b"\x00" * 32, 0, key.public, b"\x00" * 16))
    with pytest.raises(blindsig.MessageError):
        blindsig.encode_message(secp, PartBlindMessage(
            b"\x00" * 32, 1, key.public, b"\x00" * 15))


# --- pinned arithmetic oracles on the toy curve

def test_session_commitment_matches_naive_oracle(toy):
    signer = ec.keygen(toy, secret=5)
    registry = blindsig.SignerRegistry(toy, rng=random.Random(3))
    _, R = registry.new_session(signer, k=3)
    assert R == naive_mul(toy, 3, toy.g)


def test_blinded_digest_matches_independent_recomputation(toy):
    rng = random.Random(4)
    signer = ec.keygen(toy, secret=5)
    m = make_message(toy, signer.public, rng)
    k, gamma, delta = 3, 7, 11
    R = naive_mul(toy, k, toy.g)
    c_prime, secrets = blindsig.blind(toy, m, R, signer.public,
                                      gamma=gamma, delta=delta)
    # independent recomputation with naive arithmetic
    A = toy.add(R, toy.add(naive_mul(toy, gamma, toy.g),
                           naive_mul(toy, delta, signer.public)))
    t = A[0] % toy.n
    assert t != 0
    enc = blindsig.encode_message(toy, m)
    c = int.from_bytes(
        ec.hash256(enc + t.to_bytes(toy.scalar_bytes, "big")), "big") % toy.n
    assert secrets.t == t
    assert secrets.c == c
    assert c_prime == (c - delta) % toy.n


def test_signer_response_arithmetic():
    toy = ec.TOY_CURVE
    signer = ec.keygen(toy, secret=5)
    registry = blindsig.SignerRegistry(toy, rng=random.Random(5))
    session_id, _ = registry.new_session(signer, k=3)
    s_prime = registry.blind_sign(session_id, 2, signer)
    assert s_prime == (3 - 2 * 5) % toy.n == 132


def test_unblind_adds_gamma():
    toy = ec.TOY_CURVE
    secrets = blindsig.BlindingSecrets(gamma=7, delta=11, t=1, c=9)
    assert blindsig.unblind(toy, 100, secrets) == Signature(c=9, s=107)
    wrap = blindsig.unblind(toy, toy.n - 3, secrets)
    assert wrap.s == (toy.n - 3 + 7) % toy.n


def test_blinded_digest_plus_delta_recovers_digest(toy):
    rng = random.Random(6)
    for _ in range(50):
        r = full_round(toy, rng)
        assert (r["c_prime"] + r["secrets"].delta) % toy.n == r["secrets"].c


# --- round trips and tampering

@pytest.mark.parametrize("curve_name,count", [("toy", 300), ("secp256k1", 25)])
def test_round_trip_verifies(curve_name, count):
    curve = ec.get_curve(curve_name)
    rng = random.Random(7)
    for _ in range(count):
        r = full_round(curve, rng)
        assert blindsig.verify(curve, r["m"], r["sig"], r["signer"].public)


def test_changed_nonce_fails_verification(toy):
    rng = random.Random(8)
    r = full_round(toy, rng)
    m = r["m"]
    other = PartBlindMessage(m.output_address, m.denomination, m.bank_key,
                             bytes(16))
    assert other.nonce != m.nonce
    assert not blindsig.verify(toy, other, r["sig"], r["signer"].public)


def test_corrupted_response_fails_local_verification(toy):
    rng = random.Random(9)
    signer = ec.keygen(toy, rng)
    registry = blindsig.SignerRegistry(toy, rng=rng)
    session_id, R = registry.new_session(signer)
    m = make_message(toy, signer.public, rng)
    c_prime, secrets = blindsig.blind(toy, m, R, signer.public, rng)
    s_prime = registry.blind_sign(session_id, c_prime, signer)
    bad = blindsig.unblind(toy, (s_prime + 1) % toy.n, secrets)
    assert not blindsig.verify(toy, m, bad, signer.public)


def test_verify_rejects_structural_defects(toy):
    rng = random.Random(10)
    r = full_round(toy, rng)
    good = r["sig"]
    P = r["signer"].public
    assert not blindsig.verify(toy, r["m"], Signature(good.c, good.s + toy.n), P)
    assert not blindsig.verify(toy, r["m"], Signature(-1, good.s), P)
    assert not blindsig.verify(toy, r["m"], good, None)
    assert not blindsig.verify(toy, r["m"], good, (1, 1))
    bad_m = PartBlindMessage(b"\x00" * 31, r["m"].denomination,
                             r["m"].bank_key, r["m"].nonce)
    assert not blindsig.verify(toy, bad_m, good, P)


# --- blindness

def test_blindness_identity_over_all_pairings(toy):
    # R + (s - s')G + (c - c')P equals cP + sG for EVERY transcript and
    # EVERY signature under the key, so transcripts point at nothing.
    rng = random.Random(11)
    signer = ec.keygen(toy, rng)
    rounds = [full_round(toy, rng, signer=signer) for _ in range(20)]
    P = signer.public
    for t in rounds:
        for v in rounds:
            sig = v["sig"]
            lhs = toy.add(t["R"], toy.add(
                toy.mul((sig.s - t["s_prime"]) % toy.n, toy.g),
                toy.mul((sig.c - t["c_prime"]) % toy.n, P)))
            rhs = toy.add(toy.mul(sig.c, P), toy.mul(sig.s, toy.g))
            assert lhs == rhs


def test_zero_blinded_digest_is_accepted(toy):
    # delta may land exactly on the digest, making c_prime zero; the signer
    # must still answer and the unblinded signature must verify.
    rng = random.Random(12)
    signer = ec.keygen(toy, rng)
    for attempt in range(20000):
        registry = blindsig.SignerRegistry(toy, rng=rng)
        session_id, R = registry.new_session(signer)
        m = make_message(toy, signer.public, rng)
        c_prime, secrets = blindsig.blind(toy, m, R, signer.public, rng)
        if c_prime != 0:
            continue
        s_prime = registry.blind_sign(session_id, 0, signer)
        sig = blindsig.unblind(toy, s_prime, secrets)
        assert blindsig.verify(toy, m, sig, signer.public)
        return
    pytest.fail("no zero blinded digest found in 20000 attempts")


# --- exhaustive signature scan

def test_only_honestly_derivable_pairs_verify(toy):
    rng = random.Random(13)
    signer = ec.keygen(toy, secret=29)
    m = make_message(toy, signer.public, rng)
    enc = blindsig.encode_message(toy, m)
    # honest characterization: each finite point V yields exactly one
    # candidate pair (c, s) with c the digest at x(V) and s solving
    # cP + sG = V; nothing else may pass.
    dlog = {}
    acc = None
    for e in range(1, toy.n):
        acc = toy.add(acc, toy.g)
        dlog[acc] = e
    expected = set()
    for V, e in dlog.items():
        c = blindsig._digest_scalar(toy, enc, V[0] % toy.n)
        s = (e - c * signer.secret) % toy.n
        expected.add((c, s))
    assert len(expected) == toy.n - 1
    scanned = set()
    for c in range(toy.n):
        for s in range(toy.n):
            if blindsig.verify(toy, m, Signature(c, s), signer.public):
                scanned.add((c, s))
    assert scanned == expected


# --- undeniability and the mirrored key

def test_no_other_public_key_validates_a_fixed_signature(toy):
    rng = random.Random(14)
    r = full_round(toy, rng)
    honest = r["signer"]
    for d2 in range(1, toy.n):
        P2 = toy.mul(d2, toy.g)
        ok = blindsig.verify(toy, r["m"], r["sig"], P2)
        assert ok == (P2 == honest.public)


def test_raw_equation_admits_exactly_one_mirrored_key(toy):
    # Without the embedded-key binding, negating the verification point
    # yields a second key (-d - 2s/c) that satisfies the bare equation.
    # The binding in verify() is what closes this off.
    rng = random.Random(15)
    r = full_round(toy, rng)
    d = r["signer"].secret
    sig = r["sig"]
    assert sig.c != 0
    mirror_d = (-d - 2 * sig.s * pow(sig.c, -1, toy.n)) % toy.n
    assert mirror_d not in (0, d)
    mirror_P = toy.mul(mirror_d, toy.g)
    assert raw_equation_holds(toy, r["m"], sig, mirror_P)
    assert not blindsig.verify(toy, r["m"], sig, mirror_P)
    passing = {d2 for d2 in range(1, toy.n)
               if raw_equation_holds(toy, r["m"], sig, toy.mul(d2, toy.g))}
    assert d in passing and mirror_d in passing


# --- sessions

def test_session_signs_exactly_once(toy):
    rng = random.Random(16)
    signer = ec.keygen(toy, rng)
    registry = blindsig.SignerRegistry(toy, rng=rng)
    session_id, _ = registry.new_session(signer)
    registry.blind_sign(session_id, 5, signer)
    with pytest.raises(blindsig.SessionError) as info:
        registry.blind_sign(session_id, 5, signer)
    assert info.value.code == "session-consumed"
    assert registry._sessions[session_id].k is None  # nonce erased


def test_unknown_and_wrong_signer_sessions_rejected(toy):
    rng = random.Random(17)
    signer = ec.keygen(toy, rng)
    other = ec.keygen(toy, rng)
    registry = blindsig.SignerRegistry(toy, rng=rng)
    session_id, _ = registry.new_session(signer)
    with pytest.raises(blindsig.SessionError) as info:
        registry.blind_sign("feedbeef", 1, signer)
    assert info.value.code == "unknown-session"
    with pytest.raises(blindsig.SessionError) as info:
        registry.blind_sign(session_id, 1, other)
    assert info.value.code == "wrong-signer"
    with pytest.raises(blindsig.SessionError):
        registry.blind_sign(session_id, toy.n, signer)


def test_sessions_expire_after_ttl_blocks(toy):
    rng = random.Random(18)
    signer = ec.keygen(toy, rng)
    registry = blindsig.SignerRegistry(toy, ttl_blocks=5, rng=rng)
    fresh, _ = registry.new_session(signer, height=0)
    with pytest.raises(blindsig.SessionError) as info:
        registry.blind_sign(fresh, 1, signer, height=5)
    assert info.value.code == "session-expired"
    alive, _ = registry.new_session(signer, height=0)
    assert registry.blind_sign(alive, 1, signer, height=4) is not None


def test_expire_before_drops_only_stale_unconsumed(toy):
    rng = random.Random(19)
    signer = ec.keygen(toy, rng)
    registry = blindsig.SignerRegistry(toy, ttl_blocks=5, rng=rng)
    stale, _ = registry.new_session(signer, height=0)
    used, _ = registry.new_session(signer, height=0)
    young, _ = registry.new_session(signer, height=3)
    registry.blind_sign(used, 1, signer)
    assert registry.expire_before(6) == 1
    assert len(registry) == 2
    with pytest.raises(blindsig.SessionError) as info:
        registry.blind_sign(stale, 1, signer, height=6)
    assert info.value.code == "unknown-session"


def test_concurrent_signing_consumes_session_once(toy):
    rng = random.Random(20)
    signer = ec.keygen(toy, rng)
    registry = blindsig.SignerRegistry(toy, rng=rng)
    session_id, _ = registry.new_session(signer)
    results, errors = [], []
    barrier = threading.Barrier(16)

    def worker():
        barrier.wait()
        try:
            results.append(registry.blind_sign(session_id, 9, signer))
        except blindsig.SessionError as exc:
            errors.append(exc.code)

    threads = [threading.Thread(target=worker) for _ in range(16)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(results) == 1
    assert errors.count("session-consumed") == 15


# --- blinding input validation

def test_blind_rejects_bad_commitments(toy):
    rng = random.Random(21)
    signer = ec.keygen(toy, rng)
    m = make_message(toy, signer.public, rng)
    with pytest.raises(blindsig.BlindingError):
        blindsig.blind(toy, m, None, signer.public, rng)
    with pytest.raises(blindsig.BlindingError):
        blindsig.blind(toy, m, (1, 1), signer.public, rng)
    with pytest.raises(blindsig.BlindingError):
        blindsig.blind(toy, m, toy.g, None, rng)
    other = ec.keygen(toy, rng)
    with pytest.raises(blindsig.BlindingError):
        blindsig.blind(toy, m, toy.g, other.public, rng)
    with pytest.raises(blindsig.BlindingError):
        blindsig.blind(toy, m, toy.g, signer.public, rng, gamma=3)
    with pytest.raises(blindsig.BlindingError):
        blindsig.blind(toy, m, toy.g, signer.public, rng, gamma=0, delta=5)


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=1, max_value=ec.TOY_CURVE.n - 1),
       st.integers(min_value=1, max_value=ec.TOY_CURVE.n - 1),
       st.integers(min_value=1, max_value=ec.TOY_CURVE.n - 1))
def test_round_trip_property_over_pinned_scalars(k, gamma, delta):
    toy = ec.TOY_CURVE
    rng = random.Random(22)
    signer = ec.keygen(toy, secret=23)
    registry = blindsig.SignerRegistry(toy, rng=rng)
    session_id, R = registry.new_session(signer, k=k)
    m = make_message(toy, signer.public, rng)
    try:
        c_prime, secrets = blindsig.blind(toy, m, R, signer.public,
                                          gamma=gamma, delta=delta)
    except blindsig.BlindingError:
        return  # degenerate blinding for these exact scalars
    s_prime = registry.blind_sign(session_id, c_prime, signer)
    sig = blindsig.unblind(toy, s_prime, secrets)
    assert blindsig.verify(toy, m, sig, signer.public)
    assert (c_prime + secrets.delta) % toy.n == secrets.c
