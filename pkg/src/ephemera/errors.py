"""Exception hierarchy.

Every error carries a short kebab-case ``code`` so callers (CLI, HTTP layer,
scenario reports) can surface a stable identifier.
"""

from __future__ import annotations


class EphemeraError(Exception):
    code = "error"

    def __init__(self, message: str = "", **details):
        super().__init__(message or self.code)
        self.details = details


class SeedTooLong(EphemeraError):
    code = "seed-too-long"


class TooManySeeds(EphemeraError):
    code = "too-many-seeds"


class DuplicateProgram(EphemeraError):
    code = "duplicate-program"


class UnknownProgram(EphemeraError):
    code = "unknown-program"


class UnknownAccount(EphemeraError):
    code = "unknown-account"


class InvalidConfig(EphemeraError):
    code = "invalid-config"


class NotOwner(EphemeraError):
    code = "not-owner"


class AlreadyDelegated(EphemeraError):
    code = "already-delegated"


class ExecutableAccount(EphemeraError):
    code = "executable-account"


class UnknownER(EphemeraError):
    code = "unknown-er"


class ForeignAccount(EphemeraError):
    code = "foreign-account"


class NotDelegated(EphemeraError):
    code = "not-delegated"


class LifetimeNotExpired(EphemeraError):
    code = "lifetime-not-expired-and-not-owner"


class UnknownCommit(EphemeraError):
    code = "unknown-commit"


class DuplicateER(EphemeraError):
    code = "duplicate-er"


class RollupNotAlive(EphemeraError):
    code = "er-not-alive"


class MalformedLog(EphemeraError):
    code = "malformed-log"


class UnknownWorld(EphemeraError):
    code = "unknown-world"


class UnknownEntity(EphemeraError):
    code = "unknown-entity"


class DuplicateComponent(EphemeraError):
    code = "duplicate-component"


class MissingComponent(EphemeraError):
    code = "missing-component"


class MissingInput(EphemeraError):
    code = "missing-input"


class SchemaError(EphemeraError, ValueError):
    """Also a ``ValueError`` so a routine tripping over bad bytes fails its transaction."""

    code = "schema-error"


class ScenarioError(EphemeraError):
    """Scenario file could not be parsed; ``line``/``field`` locate the problem."""

    code = "parse-error"

    def __init__(self, message: str, *, line: int | None = None, field: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field:
            where.append(f"field {field!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.line = line
        self.field = field


class UnresolvedReference(ScenarioError):
    code = "unresolved-reference"


class ProgramError(EphemeraError):
    """Raised by program routines to fail a transaction.

    The executor turns it into a ``failed:<code>`` status and rolls back every
    mutation except the fee debit.
    """

    def __init__(self, code: str, message: str = ""):
        super().__init__(message or code)
        self.code = code


class NoRouteTarget(EphemeraError):
    """A rejected routing decision has no chain to fetch a blockhash from."""

    code = "no-route-target"
