"""Exception taxonomy.

Each exception carries a stable machine-readable ``code`` that the HTTP layer
maps onto status codes and error bodies.
"""

from __future__ import annotations


class CrossLedgerError(Exception):
    """Base class for all domain errors."""

    code = "internal"


class UnknownChainError(CrossLedgerError):
    code = "unknown-chain"


class DuplicateChainError(CrossLedgerError):
    code = "duplicate-chain-id"


class InvalidConfigError(CrossLedgerError):
    code = "invalid-config"


class InvalidAmountError(CrossLedgerError):
    code = "invalid-amount"


class UnknownRuleError(CrossLedgerError):
    code = "unknown-rule"


class DuplicateRuleError(CrossLedgerError):
    code = "duplicate-rule"


class UnknownIdError(CrossLedgerError):
    code = "unknown-id"


class UnverifiedEventError(CrossLedgerError):
    """Raised when a caller tries to read results out of an unverified event."""

    code = "unverified-event"
