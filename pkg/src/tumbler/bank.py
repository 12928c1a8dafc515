"""The mixing bank.

The bank publishes a signing key and a set of denominations.  A client
deposits a denomination to a fresh bank-issued deposit address, and the
deposit transaction doubles as the carrier of a blind-signature request:
the deposit address point R is also the one-time signing commitment.  The
bank answers one blinded digest per deposit, the client unblinds it into a
bearer voucher, and later redeems the voucher for a payout from a pool of
withdrawal addresses, minus the mixing fee.  Because the bank only ever
sees the blinded digest and response, it cannot connect a redeemed voucher
to the deposit that bought it; the unlinkability tests in the analysis
module check exactly that from the bank's own records.

Bank state (keys, address books, used-transaction and spent-voucher sets,
signing transcripts) is snapshotted to a JSON file after every mutation
and restored on restart.  The snapshot holds private keys in the clear; it
is the bank's own secret storage, not a public artifact.
"""

from __future__ import annotations

import enum
import json
import math
import os
import pathlib
import random
import threading
from dataclasses import dataclass, field
from fractions import Fraction

from . import blindsig, ec, ledger
from .blindsig import PartBlindMessage, Signature
from .ec import CurveParams, KeyPair
from .ledger import Chain, Transaction, TxInput, TxOutput

_SYSTEM_RNG = random.SystemRandom()


class BankError(Exception):
    """Protocol failure with a stable machine-readable code."""

    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code
        self.detail = detail


class InsufficientDeposit(BankError):
    """Deposit below the requested denomination; carries the refund tx id."""

    def __init__(self, refund_tx_id: bytes | None):
        super().__init__("insufficient-deposit",
                         refund_tx_id.hex() if refund_tx_id else "no refund")
        self.refund_tx_id = refund_tx_id


class VoucherStatus(enum.Enum):
    VALID = "valid"
    SPENT = "spent"
    INVALID_MESSAGE = "invalid_message"
    BAD_SIGNATURE = "bad_signature"


@dataclass(frozen=True)
class BankConfig:
    """Operating parameters; everything value-like is exact (int/Fraction)."""

    denominations: tuple[int, ...]
    fee_rate: Fraction = Fraction(1, 10)
    required_confirmations: int = 1
    withdrawal_delay_blocks: int = 144
    session_ttl_blocks: int = 1008
    withdrawal_pool_size: int = 10
    refund_margin: int = 1000
    curve_name: str = "secp256k1"

    def __post_init__(self):
        if not self.denominations:
            raise ValueError("at least one denomination required")
        if len(set(self.denominations)) != len(self.denominations):
            raise ValueError("denominations must be distinct")
        if any(v <= 0 for v in self.denominations):
            raise ValueError("denominations must be positive")
        if not 0 <= self.fee_rate < 1:
            raise ValueError("fee rate must lie in [0, 1)")
        if self.required_confirmations < 0 or self.withdrawal_delay_blocks < 0:
            raise ValueError("confirmation and delay counts must be >= 0")
        if self.withdrawal_pool_size <= 0:
            raise ValueError("withdrawal pool must hold at least one address")
        object.__setattr__(self, "denominations",
                           tuple(sorted(self.denominations)))
        object.__setattr__(self, "fee_rate", Fraction(self.fee_rate))

    def payout(self, denomination: int) -> int:
        return math.floor(denomination * (1 - self.fee_rate))

    def to_file(self, path):
        lines = [
            f"curve = {self.curve_name}",
            "denominations = " + ", ".join(str(v) for v in self.denominations),
            f"fee_rate = {self.fee_rate}",
            f"required_confirmations = {self.required_confirmations}",
            f"withdrawal_delay_blocks = {self.withdrawal_delay_blocks}",
            f"session_ttl_blocks = {self.session_ttl_blocks}",
            f"withdrawal_pool_size = {self.withdrawal_pool_size}",
            f"refund_margin = {self.refund_margin}",
        ]
        pathlib.Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_file(cls, path) -> BankConfig:
        raw = {}
        for line in pathlib.Path(path).read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            raw[key.strip()] = value.strip()
        kwargs = {}
        if "curve" in raw:
            kwargs["curve_name"] = raw["curve"]
        if "denominations" in raw:
            kwargs["denominations"] = tuple(
                int(v) for v in raw["denominations"].split(","))
        if "fee_rate" in raw:
            kwargs["fee_rate"] = Fraction(raw["fee_rate"])
        for key in ("required_confirmations", "withdrawal_delay_blocks",
                    "session_ttl_blocks", "withdrawal_pool_size",
                    "refund_margin"):
            if key in raw:
                kwargs[key] = int(raw[key])
        return cls(**kwargs)


@dataclass
class _DepositEntry:
    keypair: KeyPair
    session_id: str
    created_height: int
    consumed: bool = False
    dispatched: bool = False


@dataclass(frozen=True)
class SignedRecord:
    """One blind-signing transcript: everything the signer side ever learns."""

    commitment: tuple[int, int]
    c_prime: int
    s_prime: int
    denomination: int
    tx_id: bytes
    height: int


@dataclass(frozen=True)
class RedeemedVoucher:
    message: PartBlindMessage
    signature: Signature
    wt_tx_id: bytes


def voucher_digest(curve: CurveParams, m: PartBlindMessage,
                   sig: Signature) -> bytes:
    """Canonical identity of a voucher: hash of (message, c, s)."""
    w = curve.scalar_bytes
    return ec.hash256(blindsig.encode_message(curve, m)
                      + sig.c.to_bytes(w, "big") + sig.s.to_bytes(w, "big"))


class Bank:
    """One mixing bank bound to one simulated chain.

    All mutating operations run under a single lock, so checks like
    "voucher unspent" and the insertions that follow them are atomic.
    """

    def __init__(self, chain: Chain, config: BankConfig,
                 rng: random.Random | None = None, state_path=None, *,
                 key: KeyPair | None = None, treasury: KeyPair | None = None):
        if chain.curve.name != config.curve_name:
            raise ValueError("config curve does not match chain curve")
        self.chain = chain
        self.config = config
        self.curve = chain.curve
        self.rng = rng or _SYSTEM_RNG
        self.state_path = pathlib.Path(state_path) if state_path else None
        self.key = key or ec.keygen(self.curve, self.rng)
        self.treasury = treasury or ec.keygen(self.curve, self.rng)
        self.registry = blindsig.SignerRegistry(
            self.curve, ttl_blocks=config.session_ttl_blocks, rng=self.rng)
        self._deposits: dict[bytes, _DepositEntry] = {}
        self._pool: list[KeyPair] = []
        self._used_tx_ids: set[bytes] = set()
        self._signed_records: list[SignedRecord] = []
        self._spent_vouchers: set[bytes] = set()
        self._redeemed: list[RedeemedVoucher] = []
        self._lock = threading.RLock()

    # -- setup

    @classmethod
    def create(cls, chain: Chain, config: BankConfig,
               rng: random.Random | None = None, state_path=None) -> Bank:
        """Generate keys, then fund the withdrawal-address pool on-chain.

        Mints pool capital to a treasury address, mines it, splits it across
        fresh withdrawal addresses, and mines again, so the pool is spendable
        the moment the bank opens.
        """
        bank = cls(chain, config, rng, state_path)
        funding = max(config.denominations)
        treasury_addr = ec.address_of(bank.curve, bank.treasury.public)
        chain.coinbase(treasury_addr, funding * config.withdrawal_pool_size)
        chain.mine_block()
        utxo = chain.unspent_outputs(treasury_addr)[0]
        bank._pool = [ec.keygen(bank.curve, bank.rng)
                      for _ in range(config.withdrawal_pool_size)]
        split = Transaction(
            inputs=(TxInput(utxo.tx_id, utxo.index, bank.treasury.public),),
            outputs=tuple(
                TxOutput(ec.address_of(bank.curve, kp.public), funding)
                for kp in bank._pool),
        )
        chain.submit(ledger.sign_transaction(bank.curve, split,
                                             [bank.treasury]))
        chain.mine_block()
        bank._save()
        return bank

    # -- public parameters

    def public_params(self) -> dict:
        return {
            "P": self.key.public,
            "denominations": list(self.config.denominations),
            "fee_rate": self.config.fee_rate,
            "required_confirmations": self.config.required_confirmations,
            "withdrawal_delay_blocks": self.config.withdrawal_delay_blocks,
        }

    # -- deposit flow

    def issue_deposit_address(self) -> tuple[tuple[int, int], bytes]:
        """Open a deposit session; returns (R, signature over R).

        R serves two roles: its address receives the deposit, and it is the
        one-time commitment for the blind signature that the deposit buys.
        The signature lets the client check R against the bank key before
        sending any funds.
        """
        with self._lock:
            height = self.chain.height
            keypair = ec.keygen(self.curve, self.rng)
            session_id, R = self.registry.new_session(
                self.key, height=height, k=keypair.secret)
            address = ec.address_of(self.curve, R)
            self._deposits[address] = _DepositEntry(
                keypair=keypair, session_id=session_id, created_height=height)
            sig = ec.plain_sign(self.curve, self.key,
                                self.curve.serialize_point(R))
            self._save()
            return R, sig

    def process_deposit(self, c_prime: int, denomination: int, tx_id: bytes,
                        user_sig: bytes,
                        user_pubkey: tuple[int, int] | None = None) -> int:
        """Blind-sign one confirmed deposit; returns the response scalar.

        Checks run in a fixed order: transaction unused, confirmations
        reached, pays a live deposit address, voucher request signed by the
        depositing key, denomination known and amount sufficient.  An
        underpaying deposit is refunded to the sender minus a fixed margin.
        """
        with self._lock:
            if tx_id in self._used_tx_ids:
                raise BankError("tx-already-used", tx_id.hex())
            try:
                tx = self.chain.get_tx(tx_id)
            except ledger.LedgerError:
                raise BankError("unknown-tx", tx_id.hex()) from None
            confirmations = self.chain.confirmations(tx_id)
            if confirmations < self.config.required_confirmations:
                raise BankError(
                    "unconfirmed",
                    f"{confirmations} < {self.config.required_confirmations}")
            entry_addr = None
            paid = 0
            for out in tx.outputs:
                entry = self._deposits.get(out.address)
                if entry is not None and not entry.consumed:
                    entry_addr = out.address
                    paid = out.amount
                    break
            if entry_addr is None:
                raise BankError("unknown-deposit",
                                "transaction pays no live deposit address")
            entry = self._deposits[entry_addr]
            if not tx.inputs:
                raise BankError("unknown-deposit",
                                "deposit has no spendable sender")
            sender_key = tx.inputs[0].pubkey
            if user_pubkey is not None and user_pubkey != sender_key:
                raise BankError("wrong-user-key",
                                "stated key differs from deposit input key")
            payload = blindsig.voucher_payload(self.curve, c_prime,
                                               denomination, tx_id)
            if not ec.plain_verify(self.curve, sender_key, payload, user_sig):
                raise BankError("bad-voucher-signature",
                                "request not signed by the depositing key")
            if denomination not in self.config.denominations:
                raise BankError("bad-denomination", str(denomination))
            if paid < denomination:
                refund_id = self._refund(entry, entry_addr, paid, sender_key)
                self._used_tx_ids.add(tx_id)
                entry.consumed = True
                self._save()
                raise InsufficientDeposit(refund_id)
            try:
                s_prime = self.registry.blind_sign(
                    entry.session_id, c_prime, self.key,
                    height=self.chain.height)
            except blindsig.SessionError as exc:
                raise BankError(exc.code) from None
            self._used_tx_ids.add(tx_id)
            entry.consumed = True
            self._signed_records.append(SignedRecord(
                commitment=entry.keypair.public, c_prime=c_prime,
                s_prime=s_prime, denomination=denomination, tx_id=tx_id,
                height=self.chain.height_of(tx_id)))
            self._save()
            return s_prime

    def _refund(self, entry: _DepositEntry, address: bytes, paid: int,
                sender_key: tuple[int, int]) -> bytes | None:
        """Return an underpayment to its sender, minus the miner margin."""
        amount = paid - self.config.refund_margin
        if amount <= 0:
            return None
        utxos = [u for u in self.chain.unspent_outputs(address)
                 if u.amount == paid]
        if not utxos:
            return None
        utxo = utxos[0]
        refund = Transaction(
            inputs=(TxInput(utxo.tx_id, utxo.index, entry.keypair.public),),
            outputs=(TxOutput(ec.address_of(self.curve, sender_key), amount),),
        )
        refund = ledger.sign_transaction(self.curve, refund, [entry.keypair])
        return self.chain.submit(refund)

    # -- voucher verification and redemption

    def verify_voucher(self, m: PartBlindMessage,
                       sig: Signature) -> VoucherStatus:
        """Classify a voucher; read-only."""
        with self._lock:
            try:
                blindsig.encode_message(self.curve, m)
            except blindsig.MessageError:
                return VoucherStatus.INVALID_MESSAGE
            if m.bank_key != self.key.public:
                return VoucherStatus.INVALID_MESSAGE
            if m.denomination not in self.config.denominations:
                return VoucherStatus.INVALID_MESSAGE
            if not blindsig.verify(self.curve, m, sig, self.key.public):
                return VoucherStatus.BAD_SIGNATURE
            if voucher_digest(self.curve, m, sig) in self._spent_vouchers:
                return VoucherStatus.SPENT
            return VoucherStatus.VALID

    def _matured_slots(self, denomination: int) -> int:
        height = self.chain.height
        delay = self.config.withdrawal_delay_blocks
        return sum(1 for rec in self._signed_records
                   if rec.denomination == denomination
                   and rec.height is not None
                   and height >= rec.height + delay)

    def _redeemed_count(self, denomination: int) -> int:
        return sum(1 for r in self._redeemed
                   if r.message.denomination == denomination)

    def withdraw(self, m: PartBlindMessage, sig: Signature) -> bytes:
        """Redeem a valid voucher: pay its output address from the pool.

        The voucher digest enters the spent set before the withdrawal
        transaction is submitted, inside one critical section, so exactly
        one of any number of concurrent redemptions can win.

        The bank cannot know WHICH deposit backs a given voucher, so the
        withdrawal delay is enforced by counting: vouchers of denomination
        v are redeemable only while the number of redemptions stays below
        the number of signed deposits of v whose block is at least the
        delay old.
        """
        with self._lock:
            status = self.verify_voucher(m, sig)
            if status is VoucherStatus.INVALID_MESSAGE:
                raise BankError("invalid-message")
            if status is VoucherStatus.BAD_SIGNATURE:
                raise BankError("bad-voucher")
            if status is VoucherStatus.SPENT:
                raise BankError("voucher-spent")
            denomination = m.denomination
            if self._redeemed_count(denomination) >= self._matured_slots(
                    denomination):
                raise BankError("delay-not-reached")
            payout = self.config.payout(denomination)
            eligible = []
            for kp in self._pool:
                for utxo in self.chain.unspent_outputs(
                        ec.address_of(self.curve, kp.public)):
                    if utxo.amount >= denomination:
                        eligible.append((kp, utxo))
            if not eligible:
                self._dispatch_for_pool()
                raise BankError("pool-dispatch-pending",
                                "pool transfer queued; retry after next block")
            eligible.sort(key=lambda pair: (pair[1].tx_id, pair[1].index))
            kp, utxo = eligible[self.rng.randrange(len(eligible))]
            outputs = [TxOutput(m.output_address, payout)]
            change = utxo.amount - payout
            if change > 0:
                outputs.append(TxOutput(ec.address_of(self.curve, kp.public),
                                        change))
            wt = Transaction(
                inputs=(TxInput(utxo.tx_id, utxo.index, kp.public),),
                outputs=tuple(outputs),
            )
            wt = ledger.sign_transaction(self.curve, wt, [kp])
            digest = voucher_digest(self.curve, m, sig)
            self._spent_vouchers.add(digest)
            try:
                wt_tx_id = self.chain.submit(wt)
            except ledger.LedgerError:
                self._spent_vouchers.discard(digest)
                raise
            self._redeemed.append(RedeemedVoucher(m, sig, wt_tx_id))
            self._save()
            return wt_tx_id

    def _dispatch_for_pool(self):
        try:
            self.dispatch()
        except BankError as exc:
            raise BankError("pool-underfunded", exc.code) from None

    # -- pool transfer

    def dispatch(self, count: int | None = None) -> bytes:
        """Sweep consumed deposit addresses into fresh withdrawal addresses.

        Builds one many-in many-out transaction: `count` deposit inputs
        (oldest first), equally split over `count` brand-new pool addresses.
        """
        with self._lock:
            candidates = []
            for address, entry in self._deposits.items():
                if not entry.consumed or entry.dispatched:
                    continue
                utxos = self.chain.unspent_outputs(address)
                if utxos:
                    candidates.append((address, entry, utxos[0]))
            if count is None:
                count = len(candidates)
            if count <= 0:
                raise BankError("nothing-to-dispatch")
            if count > len(candidates):
                raise BankError("nothing-to-dispatch",
                                f"only {len(candidates)} funded deposits")
            chosen = candidates[:count]
            total = sum(utxo.amount for _, _, utxo in chosen)
            fresh = [ec.keygen(self.curve, self.rng) for _ in range(count)]
            base = total // count
            amounts = [base] * count
            amounts[-1] += total - base * count
            pt = Transaction(
                inputs=tuple(TxInput(utxo.tx_id, utxo.index,
                                     entry.keypair.public)
                             for _, entry, utxo in chosen),
                outputs=tuple(
                    TxOutput(ec.address_of(self.curve, kp.public), amount)
                    for kp, amount in zip(fresh, amounts)),
            )
            pt = ledger.sign_transaction(
                self.curve, pt, [entry.keypair for _, entry, _ in chosen])
            tx_id = self.chain.submit(pt)
            for _, entry, _ in chosen:
                entry.dispatched = True
            self._pool.extend(fresh)
            self._save()
            return tx_id

    # -- bookkeeping views

    @property
    def signed_records(self) -> tuple[SignedRecord, ...]:
        with self._lock:
            return tuple(self._signed_records)

    @property
    def redeemed_vouchers(self) -> tuple[RedeemedVoucher, ...]:
        with self._lock:
            return tuple(self._redeemed)

    def deposit_addresses(self) -> list[bytes]:
        with self._lock:
            return list(self._deposits)

    def pool_addresses(self) -> list[bytes]:
        with self._lock:
            return [ec.address_of(self.curve, kp.public) for kp in self._pool]

    def total_holdings(self) -> int:
        """Everything currently spendable by a bank-held key."""
        with self._lock:
            addresses = ([ec.address_of(self.curve, self.treasury.public)]
                         + self.deposit_addresses() + self.pool_addresses())
        return sum(self.chain.balance(a) for a in set(addresses))

    def expire_sessions(self) -> int:
        return self.registry.expire_before(self.chain.height)

    # -- persistence

    def _save(self):
        if self.state_path is None:
            return
        with self._lock:
            data = {
                "curve": self.curve.name,
                "key": self.key.secret,
                "treasury": self.treasury.secret,
                "deposits": [
                    {
                        "secret": entry.keypair.secret,
                        "session_id": entry.session_id,
                        "created_height": entry.created_height,
                        "consumed": entry.consumed,
                        "dispatched": entry.dispatched,
                    }
                    for entry in self._deposits.values()
                ],
                "pool": [kp.secret for kp in self._pool],
                "used_tx_ids": sorted(t.hex() for t in self._used_tx_ids),
                "signed_records": [
                    {
                        "commitment": self.curve.serialize_point(
                            rec.commitment).hex(),
                        "c_prime": rec.c_prime,
                        "s_prime": rec.s_prime,
                        "denomination": rec.denomination,
                        "tx_id": rec.tx_id.hex(),
                        "height": rec.height,
                    }
                    for rec in self._signed_records
                ],
                "spent_vouchers": sorted(d.hex() for d in self._spent_vouchers),
                "redeemed": [
                    {
                        "message": blindsig.encode_message(
                            self.curve, r.message).hex(),
                        "c": r.signature.c,
                        "s": r.signature.s,
                        "wt_tx_id": r.wt_tx_id.hex(),
                    }
                    for r in self._redeemed
                ],
            }
        tmp = self.state_path.with_name(self.state_path.name + ".tmp")
        tmp.write_text(json.dumps(data, indent=1))
        os.replace(tmp, self.state_path)

    @classmethod
    def load(cls, chain: Chain, config: BankConfig, state_path,
             rng: random.Random | None = None) -> Bank:
        """Restore a bank from its snapshot; the chain must be loaded first."""
        data = json.loads(pathlib.Path(state_path).read_text())
        curve = chain.curve
        if data["curve"] != curve.name:
            raise ValueError("snapshot curve does not match chain")
        bank = cls(chain, config, rng, state_path,
                   key=ec.keygen(curve, secret=data["key"]),
                   treasury=ec.keygen(curve, secret=data["treasury"]))
        for item in data["deposits"]:
            keypair = ec.keygen(curve, secret=item["secret"])
            address = ec.address_of(curve, keypair.public)
            bank.registry.restore_session(
                item["session_id"], bank.key,
                k=None if item["consumed"] else keypair.secret,
                commitment=keypair.public,
                height=item["created_height"], consumed=item["consumed"])
            bank._deposits[address] = _DepositEntry(
                keypair=keypair, session_id=item["session_id"],
                created_height=item["created_height"],
                consumed=item["consumed"], dispatched=item["dispatched"])
        bank._pool = [ec.keygen(curve, secret=s) for s in data["pool"]]
        bank._used_tx_ids = {bytes.fromhex(t) for t in data["used_tx_ids"]}
        bank._signed_records = [
            SignedRecord(
                commitment=curve.parse_point(bytes.fromhex(rec["commitment"])),
                c_prime=rec["c_prime"], s_prime=rec["s_prime"],
                denomination=rec["denomination"],
                tx_id=bytes.fromhex(rec["tx_id"]), height=rec["height"])
            for rec in data["signed_records"]
        ]
        bank._spent_vouchers = {
            bytes.fromhex(d) for d in data["spent_vouchers"]}
        bank._redeemed = [
            RedeemedVoucher(
                message=blindsig.decode_message(
                    curve, bytes.fromhex(r["message"])),
                signature=Signature(c=r["c"], s=r["s"]),
                wt_tx_id=bytes.fromhex(r["wt_tx_id"]))
            for r in data["redeemed"]
        ]
        return bank
