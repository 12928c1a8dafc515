"""Simulated UTXO ledger.

Transactions spend prior unspent outputs and are queued until a block is
mined; block production is manual, so tests control confirmation counts
exactly.  There is no proof-of-work and no reorganization: the chain is a
single serialized state machine, and every mutating call runs under one
lock.  A transaction's transfer time is simply the height of the block
that contains it.

Validation is strict: inputs must reference outputs that are already mined
and unspent, each input's public key must hash to the referenced output's
address, and every input must carry a valid signature over the
transaction's canonical bytes with all signatures excluded.  The
difference between input and output sums is an implicit fee, destroyed
rather than paid to anyone.
"""

from __future__ import annotations

import pathlib
import threading
from dataclasses import dataclass

from . import ec
from .ec import CurveParams, KeyPair, hash256

AMOUNT_LIMIT = 1 << 64


class LedgerError(ValueError):
    """Validation or lookup failure with a stable machine-readable code."""

    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code


@dataclass(frozen=True)
class TxOutput:
    address: bytes
    amount: int


@dataclass(frozen=True)
class TxInput:
    prev_tx: bytes
    prev_index: int
    pubkey: tuple[int, int]
    signature: bytes = b""


@dataclass(frozen=True)
class Utxo:
    tx_id: bytes
    index: int
    amount: int


@dataclass(frozen=True)
class Transaction:
    """A transfer of value; coinbase transactions mint with no inputs.

    coinbase_seq makes otherwise-identical minting transactions distinct,
    so repeated faucet grants to one address never collide on tx id.
    """

    inputs: tuple[TxInput, ...]
    outputs: tuple[TxOutput, ...]
    coinbase_seq: int | None = None

    @property
    def is_coinbase(self) -> bool:
        return self.coinbase_seq is not None

    def serialize(self, curve: CurveParams, include_signatures: bool = True) -> bytes:
        parts = []
        if self.is_coinbase:
            parts.append(b"\x01" + self.coinbase_seq.to_bytes(8, "big"))
        else:
            parts.append(b"\x00")
        parts.append(len(self.inputs).to_bytes(2, "big"))
        for txin in self.inputs:
            parts.append(txin.prev_tx)
            parts.append(txin.prev_index.to_bytes(4, "big"))
            parts.append(curve.serialize_point(txin.pubkey))
            if include_signatures:
                parts.append(len(txin.signature).to_bytes(2, "big"))
                parts.append(txin.signature)
            else:
                parts.append(b"\x00\x00")
        parts.append(len(self.outputs).to_bytes(2, "big"))
        for txout in self.outputs:
            parts.append(txout.address)
            parts.append(txout.amount.to_bytes(8, "big"))
        return b"".join(parts)

    def signing_bytes(self, curve: CurveParams) -> bytes:
        """Canonical bytes with signatures excluded; also the tx id preimage."""
        return self.serialize(curve, include_signatures=False)

    def tx_id(self, curve: CurveParams) -> bytes:
        return hash256(self.signing_bytes(curve))

    @classmethod
    def parse(cls, curve: CurveParams, data: bytes) -> Transaction:
        off = 0

        def take(count):
            nonlocal off
            if off + count > len(data):
                raise LedgerError("bad-encoding", "truncated transaction")
            chunk = data[off:off + count]
            off += count
            return chunk

        flag = take(1)[0]
        coinbase_seq = None
        if flag == 0x01:
            coinbase_seq = int.from_bytes(take(8), "big")
        elif flag != 0x00:
            raise LedgerError("bad-encoding", "unknown transaction flag")
        n_in = int.from_bytes(take(2), "big")
        inputs = []
        for _ in range(n_in):
            prev_tx = take(32)
            prev_index = int.from_bytes(take(4), "big")
            try:
                pubkey = curve.parse_point(take(1 + curve.field_bytes))
            except ValueError as exc:
                raise LedgerError("bad-encoding", str(exc)) from None
            sig_len = int.from_bytes(take(2), "big")
            signature = take(sig_len)
            inputs.append(TxInput(prev_tx, prev_index, pubkey, signature))
        n_out = int.from_bytes(take(2), "big")
        outputs = []
        for _ in range(n_out):
            addr = take(32)
            amount = int.from_bytes(take(8), "big")
            outputs.append(TxOutput(addr, amount))
        if off != len(data):
            raise LedgerError("bad-encoding", "trailing bytes")
        return cls(tuple(inputs), tuple(outputs), coinbase_seq)


def sign_transaction(curve: CurveParams, tx: Transaction,
                     keys: list[KeyPair]) -> Transaction:
    """Fill each input's signature; keys align with inputs by position."""
    if len(keys) != len(tx.inputs):
        raise ValueError("one key per input required")
    digest_source = tx.signing_bytes(curve)
    signed = []
    for txin, key in zip(tx.inputs, keys):
        if key.public != txin.pubkey:
            raise ValueError("key does not match input public key")
        signed.append(TxInput(txin.prev_tx, txin.prev_index, txin.pubkey,
                              ec.plain_sign(curve, key, digest_source)))
    return Transaction(tuple(signed), tx.outputs, tx.coinbase_seq)


@dataclass(frozen=True)
class Block:
    height: int
    tx_ids: tuple[bytes, ...]


@dataclass(frozen=True)
class ConservationSummary:
    minted: int
    implicit_fees: int
    total_unspent: int

    @property
    def balanced(self) -> bool:
        return self.total_unspent == self.minted - self.implicit_fees


class Chain:
    """The simulated chain: mined blocks plus a queue of pending transactions.

    With journal_path set, every accepted transaction and every mined block
    is appended to a text journal (one canonical-hex record per line) from
    which `Chain.replay` reconstructs identical state.
    """

    def __init__(self, curve: CurveParams, journal_path=None):
        self.curve = curve
        self.journal_path = pathlib.Path(journal_path) if journal_path else None
        self._lock = threading.RLock()
        self._txs: dict[bytes, Transaction] = {}
        self._tx_height: dict[bytes, int] = {}
        self._utxos: dict[tuple[bytes, int], TxOutput] = {}
        self._spent: set[tuple[bytes, int]] = set()
        self._queue: list[bytes] = []
        self._queue_spends: set[tuple[bytes, int]] = set()
        self._blocks: list[Block] = []
        self._coinbase_count = 0

    # -- views

    @property
    def height(self) -> int:
        """Height of the newest block; -1 before any block is mined."""
        with self._lock:
            return len(self._blocks) - 1

    @property
    def blocks(self) -> tuple[Block, ...]:
        with self._lock:
            return tuple(self._blocks)

    @property
    def pending(self) -> tuple[bytes, ...]:
        with self._lock:
            return tuple(self._queue)

    def get_tx(self, tx_id: bytes) -> Transaction:
        with self._lock:
            try:
                return self._txs[tx_id]
            except KeyError:
                raise LedgerError("unknown-tx", tx_id.hex()) from None

    def height_of(self, tx_id: bytes) -> int | None:
        """Block height containing the transaction; None while queued."""
        self.get_tx(tx_id)
        with self._lock:
            return self._tx_height.get(tx_id)

    def confirmations(self, tx_id: bytes) -> int:
        with self._lock:
            self.get_tx(tx_id)
            h = self._tx_height.get(tx_id)
            if h is None:
                return 0
            return len(self._blocks) - h

    def unspent_outputs(self, address: bytes) -> list[Utxo]:
        with self._lock:
            found = [Utxo(tx_id, index, out.amount)
                     for (tx_id, index), out in self._utxos.items()
                     if out.address == address]
        found.sort(key=lambda u: (u.tx_id, u.index))
        return found

    def balance(self, address: bytes) -> int:
        return sum(u.amount for u in self.unspent_outputs(address))

    def output_at(self, tx_id: bytes, index: int) -> TxOutput:
        tx = self.get_tx(tx_id)
        if not 0 <= index < len(tx.outputs):
            raise LedgerError("unknown-output", f"{tx_id.hex()}:{index}")
        return tx.outputs[index]

    def is_spent(self, tx_id: bytes, index: int) -> bool:
        self.output_at(tx_id, index)
        with self._lock:
            return (tx_id, index) in self._spent

    # -- mutations

    def submit(self, tx: Transaction) -> bytes:
        """Validate a transaction against mined state and the queue; enqueue it."""
        with self._lock:
            tx_id = self._validate(tx)
            self._enqueue(tx, tx_id)
            return tx_id

    def coinbase(self, address: bytes, amount: int) -> bytes:
        """Mint new value to an address (simulation faucet)."""
        if not 0 < amount < AMOUNT_LIMIT:
            raise LedgerError("bad-amount", str(amount))
        if len(address) != 32:
            raise LedgerError("bad-address", address.hex())
        with self._lock:
            tx = Transaction((), (TxOutput(address, amount),),
                             coinbase_seq=self._coinbase_count)
            self._coinbase_count += 1
            tx_id = tx.tx_id(self.curve)
            self._enqueue(tx, tx_id)
            return tx_id

    def mine_block(self) -> Block:
        """Move every queued transaction into a new block."""
        with self._lock:
            height = len(self._blocks)
            tx_ids = tuple(self._queue)
            for tx_id in tx_ids:
                tx = self._txs[tx_id]
                for txin in tx.inputs:
                    outpoint = (txin.prev_tx, txin.prev_index)
                    del self._utxos[outpoint]
                    self._spent.add(outpoint)
                for index, out in enumerate(tx.outputs):
                    self._utxos[(tx_id, index)] = out
                self._tx_height[tx_id] = height
            self._queue.clear()
            self._queue_spends.clear()
            block = Block(height=height, tx_ids=tx_ids)
            self._blocks.append(block)
            self._journal(f"block {height}")
            return block

    # -- internals

    def _validate(self, tx: Transaction, check_signatures: bool = True) -> bytes:
        if tx.is_coinbase:
            raise LedgerError("bad-coinbase", "mint through coinbase() only")
        if not tx.inputs:
            raise LedgerError("bad-structure", "transaction has no inputs")
        if not tx.outputs:
            raise LedgerError("bad-structure", "transaction has no outputs")
        for out in tx.outputs:
            if not 0 < out.amount < AMOUNT_LIMIT:
                raise LedgerError("bad-amount", str(out.amount))
            if len(out.address) != 32:
                raise LedgerError("bad-address", out.address.hex())
        tx_id = tx.tx_id(self.curve)
        if tx_id in self._txs:
            raise LedgerError("duplicate-tx", tx_id.hex())
        seen = set()
        total_in = 0
        digest_source = tx.signing_bytes(self.curve)
        for txin in tx.inputs:
            outpoint = (txin.prev_tx, txin.prev_index)
            if outpoint in seen:
                raise LedgerError("double-spend", "input repeated in transaction")
            seen.add(outpoint)
            if outpoint in self._spent or outpoint in self._queue_spends:
                raise LedgerError("double-spend",
                                  f"{txin.prev_tx.hex()}:{txin.prev_index}")
            utxo = self._utxos.get(outpoint)
            if utxo is None:
                raise LedgerError("unknown-input",
                                  f"{txin.prev_tx.hex()}:{txin.prev_index}")
            if ec.address_of(self.curve, txin.pubkey) != utxo.address:
                raise LedgerError("wrong-key", "public key does not own output")
            if check_signatures and not ec.plain_verify(
                    self.curve, txin.pubkey, digest_source, txin.signature):
                raise LedgerError("bad-signature",
                                  f"input {txin.prev_tx.hex()}:{txin.prev_index}")
            total_in += utxo.amount
        total_out = sum(out.amount for out in tx.outputs)
        if total_in < total_out:
            raise LedgerError("insufficient-inputs",
                              f"in={total_in} out={total_out}")
        return tx_id

    def _enqueue(self, tx: Transaction, tx_id: bytes):
        self._txs[tx_id] = tx
        self._queue.append(tx_id)
        for txin in tx.inputs:
            self._queue_spends.add((txin.prev_tx, txin.prev_index))
        self._journal(f"tx {tx.serialize(self.curve).hex()}")

    def _journal(self, line: str):
        if self.journal_path is not None:
            with open(self.journal_path, "a") as fh:
                fh.write(line + "\n")

    # -- persistence

    def dump(self, path):
        """Write the full journal to a file (same format as live journaling)."""
        with self._lock, open(path, "w") as fh:
            for block in self._blocks:
                for tx_id in block.tx_ids:
                    fh.write(f"tx {self._txs[tx_id].serialize(self.curve).hex()}\n")
                fh.write(f"block {block.height}\n")
            for tx_id in self._queue:
                fh.write(f"tx {self._txs[tx_id].serialize(self.curve).hex()}\n")

    @classmethod
    def replay(cls, curve: CurveParams, path, journal_path=None) -> Chain:
        """Rebuild a chain from a journal; records pass full revalidation."""
        chain = cls(curve)
        for raw in pathlib.Path(path).read_text().splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            kind, _, rest = line.partition(" ")
            if kind == "tx":
                tx = Transaction.parse(curve, bytes.fromhex(rest))
                if tx.is_coinbase:
                    with chain._lock:
                        if tx.coinbase_seq != chain._coinbase_count:
                            raise LedgerError("bad-coinbase",
                                              "journal out of order")
                        chain._coinbase_count += 1
                        chain._enqueue(tx, tx.tx_id(curve))
                else:
                    chain.submit(tx)
            elif kind == "block":
                block = chain.mine_block()
                if block.height != int(rest):
                    raise LedgerError("bad-journal", "block height mismatch")
            else:
                raise LedgerError("bad-journal", f"unknown record {kind!r}")
        chain.journal_path = pathlib.Path(journal_path) if journal_path else None
        return chain

    # -- audits

    def conservation_summary(self) -> ConservationSummary:
        """Recount minted value, implicit fees, and unspent total from blocks."""
        with self._lock:
            minted = 0
            fees = 0
            for block in self._blocks:
                for tx_id in block.tx_ids:
                    tx = self._txs[tx_id]
                    out_total = sum(o.amount for o in tx.outputs)
                    if tx.is_coinbase:
                        minted += out_total
                    else:
                        in_total = sum(
                            self._txs[i.prev_tx].outputs[i.prev_index].amount
                            for i in tx.inputs)
                        fees += in_total - out_total
            unspent = sum(o.amount for o in self._utxos.values())
            return ConservationSummary(minted, fees, unspent)

    def audit(self) -> ConservationSummary:
        """Full-scan audit: recompute the UTXO set from genesis and verify
        it matches incremental state, that no output is spent twice, and
        that value is conserved."""
        with self._lock:
            utxos: dict[tuple[bytes, int], TxOutput] = {}
            spent: set[tuple[bytes, int]] = set()
            for block in self._blocks:
                for tx_id in block.tx_ids:
                    tx = self._txs[tx_id]
                    for txin in tx.inputs:
                        outpoint = (txin.prev_tx, txin.prev_index)
                        if outpoint in spent:
                            raise LedgerError("double-spend",
                                              "audit found a double spend")
                        if outpoint not in utxos:
                            raise LedgerError("unknown-input",
                                              "audit found a dangling input")
                        del utxos[outpoint]
                        spent.add(outpoint)
                    for index, out in enumerate(tx.outputs):
                        utxos[(tx_id, index)] = out
            if utxos != self._utxos or spent != self._spent:
                raise LedgerError("state-divergence",
                                  "incremental state disagrees with full scan")
            summary = self.conservation_summary()
            if not summary.balanced:
                raise LedgerError("conservation",
                                  f"unspent {summary.total_unspent} != minted "
                                  f"{summary.minted} - fees {summary.implicit_fees}")
            return summary
