"""Escrow exchange engine.

Runs the exchange state machine across a source chain and a destination
chain: take the payer's deposit into an engine-owned escrow account, pay the
merchant on the destination chain once the deposit is confirmed, then settle
the deposit to the exchanger — or refund it to the payer when anything on the
way fails. Every state change is written to the world state before any
transfer that depends on it is issued, and all ledger facts arrive exclusively
through verified block events.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, NamedTuple

from .adapter import ChainAdapter, VerifiedBlockEvent
from .clock import Clock, SystemClock, compact_id, compact_timestamp, epoch_millis
from .errors import (
    CrossLedgerError,
    DuplicateRuleError,
    InvalidAmountError,
    InvalidConfigError,
    UnknownChainError,
    UnknownIdError,
    UnknownRuleError,
)
from .ledger import TxStatus

logger = logging.getLogger(__name__)

ESCROW_ACCOUNT_PREFIX = "cc-escrow-"

DEFAULT_TIMEOUT_SECONDS = 20.0
DEFAULT_RETRY_LIMIT = 3


class Progress(str, Enum):
    CREATE = "create"
    REQUEST_MARGIN = "requestMargin"
    FIXED_MARGIN = "fixedMargin"
    FAILED_MARGIN = "failedMargin"
    REQUEST_CREDIT = "requestCredit"
    FIXED_CREDIT = "fixedCredit"
    FAILED_CREDIT = "failedCredit"
    REQUEST_FREEZE = "requestFreeze"
    FIXED_FREEZE = "fixedFreeze"
    REQUEST_RECOVERY = "requestRecovery"
    FIXED_RECOVERY = "fixedRecovery"
    COMPLETE = "complete"


TERMINAL_PROGRESS = frozenset(
    {Progress.COMPLETE, Progress.FIXED_RECOVERY, Progress.FAILED_MARGIN}
)

PROGRESS_EDGES: dict[Progress, frozenset[Progress]] = {
    Progress.CREATE: frozenset({Progress.REQUEST_MARGIN}),
    Progress.REQUEST_MARGIN: frozenset({Progress.FIXED_MARGIN, Progress.FAILED_MARGIN}),
    Progress.FIXED_MARGIN: frozenset({Progress.REQUEST_CREDIT, Progress.FAILED_CREDIT}),
    Progress.REQUEST_CREDIT: frozenset({Progress.FIXED_CREDIT, Progress.FAILED_CREDIT}),
    Progress.FIXED_CREDIT: frozenset({Progress.REQUEST_FREEZE}),
    Progress.FAILED_CREDIT: frozenset({Progress.REQUEST_RECOVERY}),
    Progress.REQUEST_FREEZE: frozenset({Progress.FIXED_FREEZE}),
    Progress.FIXED_FREEZE: frozenset({Progress.COMPLETE}),
    Progress.REQUEST_RECOVERY: frozenset({Progress.FIXED_RECOVERY}),
    Progress.COMPLETE: frozenset(),
    Progress.FIXED_RECOVERY: frozenset(),
    Progress.FAILED_MARGIN: frozenset(),
}


class TransitionError(CrossLedgerError):
    code = "illegal-transition"


@dataclass(frozen=True)
class ServiceProfile:
    """An exchanger's accounts on both chains plus conversion terms.

    ``rate`` is destination units per source unit, held exactly as an integer
    numerator/denominator pair; ``fee`` is charged in source-chain units.
    """

    rule_id: str
    src_chain_id: str
    dst_chain_id: str
    exchanger_src_account: str
    exchanger_dst_account: str
    rate_numerator: int
    rate_denominator: int
    fee: int = 0

    def validate(self) -> None:
        if self.rate_numerator < 1 or self.rate_denominator < 1:
            raise InvalidConfigError("rate numerator and denominator must be >= 1")
        if self.fee < 0:
            raise InvalidConfigError("fee must be >= 0")
        if self.src_chain_id == self.dst_chain_id:
            raise InvalidConfigError("source and destination chains must differ")


@dataclass(frozen=True)
class ExchangeRequest:
    user_id: str
    src_account: str
    dst_account: str
    rule_id: str
    dst_amount: int


def compute_source_amount(dst_amount: int, profile: ServiceProfile) -> int:
    """Source-chain units charged for ``dst_amount`` destination units.

    The smallest source amount that covers the destination amount at the
    profile's rate (rounding in the engine's favour), plus the handling fee.
    """
    if not isinstance(dst_amount, int) or isinstance(dst_amount, bool) or dst_amount < 1:
        raise InvalidAmountError(f"destination amount must be a positive integer, got {dst_amount!r}")
    n, d = profile.rate_numerator, profile.rate_denominator
    return (dst_amount * d + n - 1) // n + profile.fee


@dataclass
class SourceLeg:
    chain_id: str
    account_id: str
    asset_type: str
    asset: str  # decimal string
    escrow_tx_id: str | None = None
    settlement_tx_id: str | None = None
    restore_tx_id: str | None = None


@dataclass
class DestinationLeg:
    chain_id: str
    account_id: str
    asset_type: str
    asset: str
    payment_tx_id: str | None = None


@dataclass
class ExchangeRecord:
    record_id: str
    user_id: str
    rule_id: str
    from_chain: SourceLeg
    to_chain: DestinationLeg
    progress: Progress
    timestamps: dict[str, str] = field(default_factory=dict)
    # Engine-internal bookkeeping; never serialized into the wire shape.
    stuck: bool = False
    attempts: int = 0
    comp_attempts: int = 0
    awaited_tx_id: str | None = None
    awaited_since: int | None = None  # epoch milliseconds
    landed: set[str] = field(default_factory=set)
    comp_reversal_tx_id: str | None = None

    @property
    def src_amount(self) -> int:
        return int(self.from_chain.asset)

    @property
    def dst_amount(self) -> int:
        return int(self.to_chain.asset)

    def is_terminal(self) -> bool:
        return self.progress in TERMINAL_PROGRESS

    def to_wire(self) -> dict:
        """The record in its external JSON shape (key order included)."""
        from_chain: dict = {
            "chainID": self.from_chain.chain_id,
            "accountID": self.from_chain.account_id,
            "assetType": self.from_chain.asset_type,
            "asset": self.from_chain.asset,
        }
        if self.from_chain.escrow_tx_id is not None:
            from_chain["escrowTxID"] = self.from_chain.escrow_tx_id
        if self.from_chain.settlement_tx_id is not None:
            from_chain["settlementTxID"] = self.from_chain.settlement_tx_id
        if self.from_chain.restore_tx_id is not None:
            from_chain["restoreTxID"] = self.from_chain.restore_tx_id
        to_chain: dict = {
            "chainID": self.to_chain.chain_id,
            "accountID": self.to_chain.account_id,
            "assetType": self.to_chain.asset_type,
            "asset": self.to_chain.asset,
        }
        if self.to_chain.payment_tx_id is not None:
            to_chain["paymentTxID"] = self.to_chain.payment_tx_id
        return {
            "id": self.record_id,
            "userID": self.user_id,
            "ruleID": self.rule_id,
            "fromChain": from_chain,
            "toChain": to_chain,
            "progress": self.progress.value,
            "timestamps": dict(self.timestamps),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_wire())


class WorldState:
    """Key-value store for exchange records plus engine account metadata.

    Records are only ever inserted and transitioned, never deleted. ``put`` is
    the persistence point: observers (snapshot capture, journals) fire on
    every call, before the engine takes any dependent action.
    """

    def __init__(self) -> None:
        self.entries: dict[str, ExchangeRecord] = {}
        self.escrow_accounts: dict[str, str] = {}
        self.profiles: dict[str, ServiceProfile] = {}
        self._observers: list[Callable[[ExchangeRecord], None]] = []

    def add_observer(self, observer: Callable[[ExchangeRecord], None]) -> None:
        self._observers.append(observer)

    def put(self, record: ExchangeRecord) -> None:
        self.entries[record.record_id] = record
        for observer in self._observers:
            observer(record)

    def get(self, record_id: str) -> ExchangeRecord:
        try:
            return self.entries[record_id]
        except KeyError:
            raise UnknownIdError(f"unknown exchange id {record_id!r}") from None

    def records(self) -> list[ExchangeRecord]:
        return list(self.entries.values())

    def snapshot_dict(self) -> dict:
        return {record_id: record.to_wire() for record_id, record in self.entries.items()}

    def snapshot(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.snapshot_dict(), fh, indent=2)


def load_snapshot(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


class AppliedTransition(NamedTuple):
    record_id: str
    from_progress: Progress
    to_progress: Progress


# Internal transfer kinds tracked against in-flight transaction ids.
KIND_ESCROW = "escrow"
KIND_PAYMENT = "payment"
KIND_SETTLEMENT = "settlement"
KIND_RESTORE = "restore"
KIND_COMP_REFUND = "comp_refund"
KIND_COMP_REVERSAL = "comp_reversal"

_AWAITED_KINDS = {KIND_ESCROW, KIND_PAYMENT, KIND_SETTLEMENT, KIND_RESTORE}


class ExchangeEngine:
    """Single authoritative host for the exchange state machine."""

    def __init__(
        self,
        world: WorldState | None = None,
        clock: Clock | None = None,
        timeout_seconds: float = DEFAULT_TIMEOUT_SECONDS,
        retry_limit: int = DEFAULT_RETRY_LIMIT,
    ):
        self.world = world or WorldState()
        self._clock = clock or SystemClock()
        self.timeout_seconds = timeout_seconds
        self.retry_limit = retry_limit
        self._adapters: dict[str, ChainAdapter] = {}
        self._index: dict[str, tuple[str, str]] = {}  # tx id -> (record id, kind)
        self._lock = threading.RLock()
        self._id_counters: dict[str, int] = {}

    # -- wiring ------------------------------------------------------------

    def attach_chain(self, adapter: ChainAdapter) -> None:
        with self._lock:
            self._adapters[adapter.chain_id] = adapter
            self.world.escrow_accounts.setdefault(
                adapter.chain_id, ESCROW_ACCOUNT_PREFIX + adapter.chain_id
            )
            adapter.set_sink(self.on_block_event)

    def adapter(self, chain_id: str) -> ChainAdapter:
        try:
            return self._adapters[chain_id]
        except KeyError:
            raise UnknownChainError(f"no adapter attached for chain {chain_id!r}") from None

    def escrow_account(self, chain_id: str) -> str:
        try:
            return self.world.escrow_accounts[chain_id]
        except KeyError:
            raise UnknownChainError(f"no escrow account on chain {chain_id!r}") from None

    # -- profiles ------------------------------------------------------------

    def register_profile(self, profile: ServiceProfile) -> str:
        profile.validate()
        with self._lock:
            if profile.rule_id in self.world.profiles:
                raise DuplicateRuleError(f"rule {profile.rule_id!r} already registered")
            for chain_id in (profile.src_chain_id, profile.dst_chain_id):
                if chain_id not in self._adapters:
                    raise UnknownChainError(f"profile references unattached chain {chain_id!r}")
            self.world.profiles[profile.rule_id] = profile
            return profile.rule_id

    def list_profiles(self) -> list[ServiceProfile]:
        with self._lock:
            return list(self.world.profiles.values())

    def get_profile(self, rule_id: str) -> ServiceProfile:
        with self._lock:
            try:
                return self.world.profiles[rule_id]
            except KeyError:
                raise UnknownRuleError(f"unknown rule {rule_id!r}") from None

    # -- record access -------------------------------------------------------

    def get_record(self, record_id: str) -> ExchangeRecord:
        with self._lock:
            return self.world.get(record_id)

    def records(self) -> list[ExchangeRecord]:
        with self._lock:
            return self.world.records()

    def outstanding_tx_ids(self, record_id: str) -> dict[str, str]:
        """Unresolved engine-issued transaction ids for one record, by kind."""
        with self._lock:
            return {
                kind: tx_id
                for tx_id, (rid, kind) in self._index.items()
                if rid == record_id
            }

    # -- exchange lifecycle ----------------------------------------------------

    def start_exchange(self, request: ExchangeRequest) -> str:
        with self._lock:
            profile = self.get_profile(request.rule_id)
            src_amount = compute_source_amount(request.dst_amount, profile)
            src_adapter = self.adapter(profile.src_chain_id)
            dst_chain = self.adapter(profile.dst_chain_id).chain
            record = ExchangeRecord(
                record_id=self._new_record_id(),
                user_id=request.user_id,
                rule_id=request.rule_id,
                from_chain=SourceLeg(
                    chain_id=profile.src_chain_id,
                    account_id=request.src_account,
                    asset_type=src_adapter.chain.config.asset_type,
                    asset=str(src_amount),
                ),
                to_chain=DestinationLeg(
                    chain_id=profile.dst_chain_id,
                    account_id=request.dst_account,
                    asset_type=dst_chain.config.asset_type,
                    asset=str(request.dst_amount),
                ),
                progress=Progress.CREATE,
            )
            record.timestamps[Progress.CREATE.value] = compact_timestamp(self._clock.now())
            self.world.put(record)

            escrow = self.escrow_account(profile.src_chain_id)
            tx_id = src_adapter.issue_transaction(request.src_account, escrow, src_amount)
            record.from_chain.escrow_tx_id = tx_id
            self._track(record, tx_id, KIND_ESCROW)
            self._transition(record, Progress.REQUEST_MARGIN)
            self.world.put(record)
            return record.record_id

    def on_block_event(self, event: VerifiedBlockEvent) -> list[AppliedTransition]:
        """Apply transitions for every in-flight record the event resolves."""
        if not event.verified:
            logger.warning("ignoring unverified block %d from %s", event.height, event.chain_id)
            return []
        applied: list[AppliedTransition] = []
        with self._lock:
            for result in event.results:
                entry = self._index.pop(result.tx_id, None)
                if entry is None:
                    continue
                record_id, kind = entry
                record = self.world.get(record_id)
                success = result.status is TxStatus.SUCCESS
                if success:
                    record.landed.add(kind)
                try:
                    self._apply_result(record, kind, success, result.return_code, applied)
                except TransitionError:
                    logger.exception("halting record %s after illegal transition", record_id)
                    record.stuck = True
                    self.world.put(record)
        return applied

    def on_timeout(self, record_id: str) -> str | None:
        """Resolve one record that has waited too long for a result.

        Returns the resulting progress value, "stuck", or None when nothing
        applied (terminal record, nothing awaited, or timeout not elapsed).
        """
        with self._lock:
            record = self.world.get(record_id)
            if record.is_terminal() or record.awaited_tx_id is None:
                return None
            elapsed_ms = epoch_millis(self._clock.now()) - (record.awaited_since or 0)
            if elapsed_ms < self.timeout_seconds * 1000:
                return None

            if record.progress is Progress.REQUEST_MARGIN:
                # Nothing was handed over yet; write the exchange off. The
                # deposit stays indexed so a late confirmation still triggers
                # a compensating refund.
                self._clear_awaited(record)
                self._transition(record, Progress.FAILED_MARGIN)
                self.world.put(record)
                return record.progress.value

            if record.progress is Progress.REQUEST_CREDIT:
                self._clear_awaited(record)
                record.to_chain.payment_tx_id = None
                self._transition(record, Progress.FAILED_CREDIT)
                self.world.put(record)
                self._issue_restore_tx(record)
                self._transition(record, Progress.REQUEST_RECOVERY)
                self.world.put(record)
                return record.progress.value

            if record.progress in (Progress.REQUEST_FREEZE, Progress.REQUEST_RECOVERY):
                # The escrow already holds the deposit; re-issuing blindly
                # while the original transfer may still execute would pay out
                # twice, so a bare timeout only flags the record. Observed
                # failure results drive retries.
                if not record.stuck:
                    record.stuck = True
                    self.world.put(record)
                    logger.warning("record %s stuck in %s", record_id, record.progress.value)
                    return "stuck"
            return None

    def scan_timeouts(self) -> list[tuple[str, str]]:
        """Run the timeout check across all records; returns what fired."""
        fired: list[tuple[str, str]] = []
        with self._lock:
            for record_id in list(self.world.entries):
                outcome = self.on_timeout(record_id)
                if outcome is not None:
                    fired.append((record_id, outcome))
        return fired

    # -- internals ---------------------------------------------------------

    def _new_record_id(self) -> str:
        base = compact_id(self._clock.now())
        if base not in self._id_counters and base not in self.world.entries:
            self._id_counters[base] = 1
            return base
        self._id_counters[base] = self._id_counters.get(base, 1) + 1
        return f"{base}-{self._id_counters[base]}"

    def _transition(self, record: ExchangeRecord, new_progress: Progress) -> None:
        if new_progress not in PROGRESS_EDGES[record.progress]:
            raise TransitionError(
                f"illegal transition {record.progress.value} -> {new_progress.value}"
            )
        record.progress = new_progress
        record.stuck = False
        if new_progress is not Progress.COMPLETE:
            record.timestamps[new_progress.value] = compact_timestamp(self._clock.now())

    def _track(self, record: ExchangeRecord, tx_id: str, kind: str) -> None:
        self._index[tx_id] = (record.record_id, kind)
        if kind in _AWAITED_KINDS:
            record.awaited_tx_id = tx_id
            record.awaited_since = epoch_millis(self._clock.now())

    def _clear_awaited(self, record: ExchangeRecord) -> None:
        record.awaited_tx_id = None
        record.awaited_since = None

    def _apply_result(
        self,
        record: ExchangeRecord,
        kind: str,
        success: bool,
        return_code: int,
        applied: list[AppliedTransition],
    ) -> None:
        def step(new_progress: Progress) -> None:
            before = record.progress
            self._transition(record, new_progress)
            self.world.put(record)
            applied.append(AppliedTransition(record.record_id, before, new_progress))

        profile = self.world.profiles[record.rule_id]

        if kind == KIND_ESCROW:
            if record.progress is Progress.REQUEST_MARGIN:
                self._clear_awaited(record)
                if success:
                    step(Progress.FIXED_MARGIN)
                    self._continue_after_margin(record, profile, step)
                else:
                    logger.info("deposit for %s failed (code %d)", record.record_id, return_code)
                    step(Progress.FAILED_MARGIN)
            elif record.progress is Progress.FAILED_MARGIN and success:
                # Deposit confirmed after the exchange was written off.
                logger.warning("late deposit landed for %s; refunding", record.record_id)
                self._issue_comp_refund(record)
            return

        if kind == KIND_PAYMENT:
            if record.progress is Progress.REQUEST_CREDIT:
                self._clear_awaited(record)
                if success:
                    step(Progress.FIXED_CREDIT)
                    self._issue_settlement(record, profile)
                    step(Progress.REQUEST_FREEZE)
                else:
                    logger.info("payment for %s failed (code %d)", record.record_id, return_code)
                    record.to_chain.payment_tx_id = None
                    step(Progress.FAILED_CREDIT)
                    self._issue_restore_tx(record)
                    step(Progress.REQUEST_RECOVERY)
            elif success:
                # Payment confirmed after a timeout-driven refund: reverse it
                # so the merchant is not paid for a voided exchange.
                logger.warning("late payment landed for %s; reversing", record.record_id)
                self._issue_comp_reversal(record, profile)
            return

        if kind == KIND_SETTLEMENT:
            if record.progress is not Progress.REQUEST_FREEZE:
                return
            if success:
                self._clear_awaited(record)
                step(Progress.FIXED_FREEZE)
                step(Progress.COMPLETE)
            else:
                self._retry(record, kind, lambda: self._issue_settlement(record, profile))
            return

        if kind == KIND_RESTORE:
            if record.progress is not Progress.REQUEST_RECOVERY:
                return
            if success:
                self._clear_awaited(record)
                step(Progress.FIXED_RECOVERY)
            else:
                self._retry(record, kind, lambda: self._issue_restore_tx(record))
            return

        if kind == KIND_COMP_REFUND:
            if not success:
                self._retry_comp(record, lambda: self._issue_comp_refund(record, force=True))
            else:
                self.world.put(record)
            return

        if kind == KIND_COMP_REVERSAL:
            if not success:
                self._retry_comp(record, lambda: self._issue_comp_reversal(record, profile, force=True))
            else:
                self.world.put(record)
            return

    def _continue_after_margin(self, record: ExchangeRecord, profile: ServiceProfile, step) -> None:
        """Deposit confirmed: pay the merchant if the exchanger can cover it."""
        dst_adapter = self.adapter(profile.dst_chain_id)
        balance = dst_adapter.get_balance(profile.exchanger_dst_account)
        if balance >= record.dst_amount:
            tx_id = dst_adapter.issue_transaction(
                profile.exchanger_dst_account, record.to_chain.account_id, record.dst_amount
            )
            record.to_chain.payment_tx_id = tx_id
            self._track(record, tx_id, KIND_PAYMENT)
            step(Progress.REQUEST_CREDIT)
        else:
            # Advisory fast-fail: do not even issue the payment.
            logger.info(
                "exchanger balance %d on %s cannot cover %d for %s",
                balance, profile.dst_chain_id, record.dst_amount, record.record_id,
            )
            step(Progress.FAILED_CREDIT)
            self._issue_restore_tx(record)
            step(Progress.REQUEST_RECOVERY)

    def _issue_settlement(self, record: ExchangeRecord, profile: ServiceProfile) -> None:
        src_adapter = self.adapter(profile.src_chain_id)
        tx_id = src_adapter.issue_transaction(
            self.escrow_account(profile.src_chain_id),
            profile.exchanger_src_account,
            record.src_amount,
        )
        record.from_chain.settlement_tx_id = tx_id
        self._track(record, tx_id, KIND_SETTLEMENT)

    def _issue_restore_tx(self, record: ExchangeRecord) -> None:
        """Issue the refund transfer; callers persist and transition around it."""
        src_adapter = self.adapter(record.from_chain.chain_id)
        tx_id = src_adapter.issue_transaction(
            self.escrow_account(record.from_chain.chain_id),
            record.from_chain.account_id,
            record.src_amount,
        )
        record.from_chain.restore_tx_id = tx_id
        self._track(record, tx_id, KIND_RESTORE)
        logger.info("refund issued for %s", record.record_id)

    def _issue_comp_refund(self, record: ExchangeRecord, force: bool = False) -> None:
        if record.from_chain.restore_tx_id is not None and not force:
            return
        src_adapter = self.adapter(record.from_chain.chain_id)
        tx_id = src_adapter.issue_transaction(
            self.escrow_account(record.from_chain.chain_id),
            record.from_chain.account_id,
            record.src_amount,
        )
        record.from_chain.restore_tx_id = tx_id
        self._index[tx_id] = (record.record_id, KIND_COMP_REFUND)
        self.world.put(record)

    def _issue_comp_reversal(self, record: ExchangeRecord, profile: ServiceProfile,
                             force: bool = False) -> None:
        if record.comp_reversal_tx_id is not None and not force:
            return
        dst_adapter = self.adapter(profile.dst_chain_id)
        tx_id = dst_adapter.issue_transaction(
            record.to_chain.account_id, profile.exchanger_dst_account, record.dst_amount
        )
        record.comp_reversal_tx_id = tx_id
        self._index[tx_id] = (record.record_id, KIND_COMP_REVERSAL)
        self.world.put(record)

    def _retry(self, record: ExchangeRecord, kind: str, reissue) -> None:
        record.attempts += 1
        if record.attempts > self.retry_limit:
            record.stuck = True
            self.world.put(record)
            logger.error("record %s stuck: %s retries exhausted", record.record_id, kind)
            return
        logger.info("retrying %s for %s (attempt %d)", kind, record.record_id, record.attempts)
        reissue()
        self.world.put(record)

    def _retry_comp(self, record: ExchangeRecord, reissue) -> None:
        record.comp_attempts += 1
        if record.comp_attempts > self.retry_limit:
            record.stuck = True
            self.world.put(record)
            return
        reissue()
