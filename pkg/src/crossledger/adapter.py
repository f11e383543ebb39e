"""Per-chain adapter between the escrow engine and one simulated ledger.

The adapter participates in a chain the way any ordinary node would: it
submits transfer requests and consumes broadcast block data. Before anything
reaches the engine, each block is normalized into a ``VerifiedBlockEvent``
whose ``verified`` flag reflects a full integrity check — the recomputed
content hash must match the block's stored hash and the block must link to the
last block this adapter verified. Events that fail the check are still
forwarded (with empty results) so the engine can observe and time out, but
their contents are never trusted.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from typing import Callable, NamedTuple

from .clock import Clock, SystemClock, epoch_millis
from .errors import UnverifiedEventError
from .ledger import Block, SimulatedChain, TxStatus, block_content_hash

logger = logging.getLogger(__name__)


class TxResult(NamedTuple):
    tx_id: str
    status: TxStatus
    return_code: int
    from_account: str
    to_account: str
    amount: int


@dataclass(frozen=True)
class VerifiedBlockEvent:
    chain_id: str
    height: int
    results: tuple[TxResult, ...]
    verified: bool
    received_at: int  # epoch milliseconds


EventSink = Callable[[VerifiedBlockEvent], None]


def verify_block_integrity(block: Block, expected_prev_hash: bytes) -> bool:
    """True iff the recomputed hash matches the stored one and linkage holds.

    Pure check, no side effects; a malformed block verifies false rather than
    raising.
    """
    try:
        recomputed = block_content_hash(
            block.height, block.prev_hash, block.transactions, block.nonce, block.timestamp
        )
        return recomputed == block.hash and bytes(block.prev_hash) == bytes(expected_prev_hash)
    except Exception:
        return False


class ChainAdapter:
    """Issues transactions on one chain and forwards its blocks to a sink.

    Block handling is serialized per adapter and tracked in height order: the
    expected previous hash is always the hash of the last block this adapter
    verified, so a gap or a tampered block makes every later block unverifiable
    until the adapter is rebuilt.
    """

    def __init__(self, chain: SimulatedChain, sink: EventSink | None = None,
                 clock: Clock | None = None):
        self.chain = chain
        self.chain_id = chain.chain_id
        self._sink = sink
        self._clock = clock or SystemClock()
        self._lock = threading.Lock()
        head = chain.head
        self._last_verified_height = head.height
        self._last_verified_hash = head.hash
        self._in_flight: set[str] = set()
        chain.subscribe(self.forward_block)

    def set_sink(self, sink: EventSink) -> None:
        self._sink = sink

    def issue_transaction(self, from_account: str, to_account: str, amount: int) -> str:
        tx_id = self.chain.submit_transfer(from_account, to_account, amount)
        with self._lock:
            self._in_flight.add(tx_id)
        return tx_id

    def get_balance(self, account_id: str) -> int:
        return self.chain.get_balance(account_id)

    def in_flight(self) -> set[str]:
        with self._lock:
            return set(self._in_flight)

    def forward_block(self, block: Block) -> VerifiedBlockEvent:
        with self._lock:
            ok = (
                block.height == self._last_verified_height + 1
                and verify_block_integrity(block, self._last_verified_hash)
            )
            if ok:
                self._last_verified_height = block.height
                self._last_verified_hash = block.hash
                results = tuple(
                    TxResult(
                        tx.tx_id, tx.status, tx.return_code,
                        tx.from_account, tx.to_account, tx.amount,
                    )
                    for tx in block.transactions
                )
                self._in_flight.difference_update(r.tx_id for r in results)
            else:
                results = ()
            event = VerifiedBlockEvent(
                chain_id=self.chain_id,
                height=block.height,
                results=results,
                verified=ok,
                received_at=epoch_millis(self._clock.now()),
            )
        if not ok:
            logger.warning("rejected block %d on %s: integrity check failed",
                           block.height, self.chain_id)
        if self._sink is not None:
            self._sink(event)
        return event


def lookup_result(event: VerifiedBlockEvent, tx_id: str) -> tuple[TxStatus, int] | None:
    """Find a transaction's (status, return code) inside a verified event."""
    if not event.verified:
        raise UnverifiedEventError(
            f"refusing to read results from unverified block {event.height} on {event.chain_id}"
        )
    for result in event.results:
        if result.tx_id == tx_id:
            return result.status, result.return_code
    return None
