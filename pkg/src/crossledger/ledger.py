"""In-process simulated blockchain ledgers.

Each chain keeps integer account balances and turns queued transfer requests
into hash-chained blocks. Blocks are hashed over a canonical, length-prefixed
byte serialization so integrity checks are byte-stable across runs. Fault
directives let a harness halt production, force transaction failures, or
tamper with a block after it has been hashed.
"""

from __future__ import annotations

import hashlib
import threading
import uuid
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Mapping

from .clock import Clock, SystemClock, epoch_millis
from .errors import (
    DuplicateChainError,
    InvalidAmountError,
    InvalidConfigError,
    UnknownChainError,
)

GENESIS_PREV_HASH = bytes(32)

RETURN_OK = 0
RETURN_INSUFFICIENT_FUNDS = 1

TxIdSource = Callable[[], str]


def default_tx_id_source() -> str:
    return str(uuid.uuid4())


def seeded_tx_id_source(rng) -> TxIdSource:
    """UUID-shaped transaction ids drawn from a seeded ``random.Random``."""

    def _next() -> str:
        return str(uuid.UUID(int=rng.getrandbits(128), version=4))

    return _next


class BlockPolicyKind(str, Enum):
    PER_TRANSACTION = "per-transaction"
    INTERVAL = "interval"


@dataclass(frozen=True)
class BlockPolicy:
    kind: BlockPolicyKind = BlockPolicyKind.PER_TRANSACTION
    interval_seconds: float = 0.0

    @classmethod
    def per_transaction(cls) -> "BlockPolicy":
        return cls(BlockPolicyKind.PER_TRANSACTION)

    @classmethod
    def interval(cls, seconds: float = 0.0) -> "BlockPolicy":
        return cls(BlockPolicyKind.INTERVAL, seconds)


@dataclass(frozen=True)
class ChainConfig:
    chain_id: str
    asset_type: str = "number"
    genesis_allocations: Mapping[str, int] = field(default_factory=dict)
    block_policy: BlockPolicy = field(default_factory=BlockPolicy.per_transaction)
    pow_difficulty: int = 0

    def validate(self) -> None:
        if not self.chain_id:
            raise InvalidConfigError("chain id must be non-empty")
        if self.pow_difficulty < 0:
            raise InvalidConfigError("pow difficulty must be >= 0")
        if self.block_policy.interval_seconds < 0:
            raise InvalidConfigError("block interval must be >= 0")
        for account, balance in self.genesis_allocations.items():
            if not isinstance(balance, int) or isinstance(balance, bool) or balance < 0:
                raise InvalidConfigError(
                    f"genesis balance for {account!r} must be a non-negative integer"
                )


class TxStatus(str, Enum):
    PENDING = "pending"
    SUCCESS = "success"
    FAILURE = "failure"


@dataclass
class Transaction:
    tx_id: str
    from_account: str
    to_account: str
    amount: int
    status: TxStatus = TxStatus.PENDING
    return_code: int = RETURN_OK
    submitted_at: int = 0  # epoch milliseconds


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: bytes
    transactions: tuple[Transaction, ...]
    nonce: int
    timestamp: int  # epoch milliseconds
    hash: bytes


class FaultMode(str, Enum):
    NONE = "none"
    HALT = "halt-block-production"
    FAIL_NEXT = "fail-next-transaction"
    TAMPER_NEXT = "tamper-next-block"


@dataclass(frozen=True)
class FaultDirective:
    chain_id: str
    mode: FaultMode
    return_code: int = 2  # used by FAIL_NEXT; must be nonzero

    def validate(self) -> None:
        if self.mode is FaultMode.FAIL_NEXT and self.return_code == 0:
            raise InvalidConfigError("fail-next-transaction needs a nonzero return code")


def _u32(value: int) -> bytes:
    return value.to_bytes(4, "big")


def _u64(value: int) -> bytes:
    return value.to_bytes(8, "big")


def _i64(value: int) -> bytes:
    return value.to_bytes(8, "big", signed=True)


def _string(value: str) -> bytes:
    raw = value.encode("utf-8")
    return _u32(len(raw)) + raw


def serialize_block_content(
    height: int,
    prev_hash: bytes,
    transactions: Iterable[Transaction],
    nonce: int,
    timestamp: int,
) -> bytes:
    """Canonical length-prefixed serialization of a block's hashed content.

    Field order: height, prev hash, transaction list (id, from, to, amount,
    status, return code for each), nonce, timestamp. Integers are fixed-width
    big-endian; strings are length-prefixed UTF-8.
    """
    txs = tuple(transactions)
    parts = [_u64(height), bytes(prev_hash), _u32(len(txs))]
    for tx in txs:
        parts.append(_string(tx.tx_id))
        parts.append(_string(tx.from_account))
        parts.append(_string(tx.to_account))
        parts.append(_u64(tx.amount))
        parts.append(_string(tx.status.value))
        parts.append(_i64(tx.return_code))
    parts.append(_u64(nonce))
    parts.append(_u64(timestamp))
    return b"".join(parts)


def block_content_hash(
    height: int,
    prev_hash: bytes,
    transactions: Iterable[Transaction],
    nonce: int,
    timestamp: int,
) -> bytes:
    return hashlib.sha256(
        serialize_block_content(height, prev_hash, transactions, nonce, timestamp)
    ).digest()


def leading_zero_bits(digest: bytes) -> int:
    bits = 0
    for byte in digest:
        if byte == 0:
            bits += 8
            continue
        bits += 8 - byte.bit_length()
        break
    return bits


class SimulatedChain:
    """One hash-chained ledger with accounts, transfers, and fault injection.

    All state mutation happens under a per-chain lock, so submissions, block
    production, and fault directives are applied in one total order. Block
    delivery to subscribers goes through a FIFO outbox that is flushed outside
    the state lock, which keeps delivery in height order while letting
    subscribers submit new transfers from inside their callbacks.
    """

    def __init__(
        self,
        config: ChainConfig,
        clock: Clock | None = None,
        tx_id_source: TxIdSource | None = None,
    ):
        config.validate()
        self.config = config
        self.chain_id = config.chain_id
        self._clock = clock or SystemClock()
        self._tx_id_source = tx_id_source or default_tx_id_source
        self._lock = threading.RLock()
        self._delivery_lock = threading.Lock()
        self._outbox: deque[Block] = deque()
        self._balances: dict[str, int] = dict(config.genesis_allocations)
        self._pending: deque[Transaction] = deque()
        self._seen_tx_ids: set[str] = set()
        self._subscribers: dict[int, Callable[[Block], None]] = {}
        self._next_handle = 1
        self._fault: FaultDirective | None = None
        self.tampered_heights: set[int] = set()
        genesis = self._build_block(height=0, transactions=())
        self._blocks: list[Block] = [genesis]

    # -- block construction ------------------------------------------------

    def _build_block(self, height: int, transactions: tuple[Transaction, ...]) -> Block:
        prev_hash = GENESIS_PREV_HASH if height == 0 else self._blocks[-1].hash
        timestamp = epoch_millis(self._clock.now())
        nonce = 0
        digest = block_content_hash(height, prev_hash, transactions, nonce, timestamp)
        while leading_zero_bits(digest) < self.config.pow_difficulty:
            nonce += 1
            digest = block_content_hash(height, prev_hash, transactions, nonce, timestamp)
        return Block(height, prev_hash, transactions, nonce, timestamp, digest)

    # -- reads ---------------------------------------------------------------

    @property
    def height(self) -> int:
        with self._lock:
            return self._blocks[-1].height

    @property
    def head(self) -> Block:
        with self._lock:
            return self._blocks[-1]

    def blocks(self) -> list[Block]:
        with self._lock:
            return list(self._blocks)

    def get_block(self, height: int) -> Block:
        with self._lock:
            return self._blocks[height]

    def get_balance(self, account_id: str) -> int:
        with self._lock:
            return self._balances.get(account_id, 0)

    def balances(self) -> dict[str, int]:
        with self._lock:
            return dict(self._balances)

    def pending_tx_ids(self) -> set[str]:
        with self._lock:
            return {tx.tx_id for tx in self._pending}

    def is_halted(self) -> bool:
        with self._lock:
            return self._fault is not None and self._fault.mode is FaultMode.HALT

    # -- writes --------------------------------------------------------------

    def submit_transfer(self, from_account: str, to_account: str, amount: int) -> str:
        if not isinstance(amount, int) or isinstance(amount, bool) or amount < 1:
            raise InvalidAmountError(f"transfer amount must be a positive integer, got {amount!r}")
        with self._lock:
            tx_id = self._tx_id_source()
            while tx_id in self._seen_tx_ids:
                tx_id = self._tx_id_source()
            self._seen_tx_ids.add(tx_id)
            tx = Transaction(
                tx_id=tx_id,
                from_account=from_account,
                to_account=to_account,
                amount=amount,
                submitted_at=epoch_millis(self._clock.now()),
            )
            self._pending.append(tx)
            return tx_id

    def inject_fault(self, directive: FaultDirective) -> None:
        directive.validate()
        with self._lock:
            self._fault = None if directive.mode is FaultMode.NONE else directive

    def subscribe(self, subscriber: Callable[[Block], None]) -> int:
        with self._lock:
            handle = self._next_handle
            self._next_handle += 1
            self._subscribers[handle] = subscriber
            return handle

    def _policy_permits(self) -> bool:
        policy = self.config.block_policy
        if policy.kind is BlockPolicyKind.PER_TRANSACTION:
            return bool(self._pending)
        elapsed_ms = epoch_millis(self._clock.now()) - self._blocks[-1].timestamp
        return elapsed_ms >= policy.interval_seconds * 1000

    def produce_block(self) -> Block | None:
        """Execute all pending transfers, append a block, and deliver it.

        Returns None when production is halted or the block policy does not
        permit a block right now. Transactions execute in submission order; a
        later transfer may spend funds credited earlier in the same block.
        """
        with self._lock:
            if self._fault is not None and self._fault.mode is FaultMode.HALT:
                return None
            if not self._policy_permits():
                return None

            executed: list[Transaction] = []
            while self._pending:
                tx = self._pending.popleft()
                if self._fault is not None and self._fault.mode is FaultMode.FAIL_NEXT:
                    tx.status = TxStatus.FAILURE
                    tx.return_code = self._fault.return_code
                    self._fault = None  # one-shot
                elif self._balances.get(tx.from_account, 0) >= tx.amount:
                    self._balances[tx.from_account] = (
                        self._balances.get(tx.from_account, 0) - tx.amount
                    )
                    self._balances[tx.to_account] = (
                        self._balances.get(tx.to_account, 0) + tx.amount
                    )
                    tx.status = TxStatus.SUCCESS
                    tx.return_code = RETURN_OK
                else:
                    tx.status = TxStatus.FAILURE
                    tx.return_code = RETURN_INSUFFICIENT_FUNDS
                executed.append(tx)

            block = self._build_block(self._blocks[-1].height + 1, tuple(executed))
            if (
                self._fault is not None
                and self._fault.mode is FaultMode.TAMPER_NEXT
                and block.transactions
            ):
                # Mutation happens after hashing, so the stored hash no longer
                # matches the content. Balances already reflect the original
                # amount; only the reported block lies.
                block.transactions[0].amount += 1
                self.tampered_heights.add(block.height)
                self._fault = None  # one-shot
            self._blocks.append(block)
            self._outbox.append(block)

        self._flush_outbox()
        return block

    def _flush_outbox(self) -> None:
        # Non-blocking: if another flush (possibly on this very thread, via a
        # subscriber that produced a block) holds the lock, its loop will pick
        # up whatever we queued, preserving height order.
        if not self._delivery_lock.acquire(blocking=False):
            return
        try:
            while True:
                with self._lock:
                    if not self._outbox:
                        return
                    block = self._outbox.popleft()
                    subscribers = list(self._subscribers.values())
                for subscriber in subscribers:
                    subscriber(block)
        finally:
            self._delivery_lock.release()


def audit_hash_chain(chain: SimulatedChain) -> list[str]:
    """Recompute every block hash and linkage; return violation descriptions.

    Deliberately tampered blocks are expected to mismatch on content and are
    reported separately if they fail to.
    """
    problems: list[str] = []
    blocks = chain.blocks()
    for block in blocks:
        recomputed = block_content_hash(
            block.height, block.prev_hash, block.transactions, block.nonce, block.timestamp
        )
        tampered = block.height in chain.tampered_heights
        if tampered and recomputed == block.hash:
            problems.append(f"height {block.height}: tampered block still hashes clean")
        if not tampered and recomputed != block.hash:
            problems.append(f"height {block.height}: content hash mismatch")
        expected_prev = GENESIS_PREV_HASH if block.height == 0 else blocks[block.height - 1].hash
        if block.prev_hash != expected_prev:
            problems.append(f"height {block.height}: prev hash linkage broken")
        if chain.config.pow_difficulty and leading_zero_bits(block.hash) < chain.config.pow_difficulty:
            problems.append(f"height {block.height}: difficulty not met")
    return problems


class LedgerNetwork:
    """Registry of simulated chains sharing a clock and a tx-id source."""

    def __init__(self, clock: Clock | None = None, tx_id_source: TxIdSource | None = None):
        self._clock = clock or SystemClock()
        self._tx_id_source = tx_id_source or default_tx_id_source
        self._chains: dict[str, SimulatedChain] = {}
        self._lock = threading.Lock()

    def create_chain(self, config: ChainConfig) -> str:
        config.validate()
        with self._lock:
            if config.chain_id in self._chains:
                raise DuplicateChainError(f"chain {config.chain_id!r} already exists")
            self._chains[config.chain_id] = SimulatedChain(
                config, clock=self._clock, tx_id_source=self._tx_id_source
            )
            return config.chain_id

    def chain(self, chain_id: str) -> SimulatedChain:
        with self._lock:
            try:
                return self._chains[chain_id]
            except KeyError:
                raise UnknownChainError(f"unknown chain {chain_id!r}") from None

    def has_chain(self, chain_id: str) -> bool:
        with self._lock:
            return chain_id in self._chains

    def chain_ids(self) -> list[str]:
        with self._lock:
            return list(self._chains)

    def chains(self) -> list[SimulatedChain]:
        with self._lock:
            return list(self._chains.values())

    # Convenience pass-throughs keyed by chain id.

    def submit_transfer(self, chain_id: str, from_account: str, to_account: str, amount: int) -> str:
        return self.chain(chain_id).submit_transfer(from_account, to_account, amount)

    def produce_block(self, chain_id: str) -> Block | None:
        return self.chain(chain_id).produce_block()

    def get_balance(self, chain_id: str, account_id: str) -> int:
        return self.chain(chain_id).get_balance(account_id)

    def subscribe_blocks(self, chain_id: str, subscriber: Callable[[Block], None]) -> int:
        return self.chain(chain_id).subscribe(subscriber)

    def inject_fault(self, directive: FaultDirective) -> None:
        self.chain(directive.chain_id).inject_fault(directive)
