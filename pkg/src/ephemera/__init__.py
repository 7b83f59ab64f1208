"""Deterministic simulator of an account chain with ephemeral rollups."""

from .account import Account
from .address import Address, derive_pda
from .chain import BaseChain, SimClock
from .cluster import Cluster
from .delegation import DelegationProgram, ERConfig
from .execution import AccountMeta, Transaction
from .router import RouteDecision, RouterPolicy
from .verification import verify_commit

__version__ = "0.1.0"

__all__ = [
    "Account",
    "AccountMeta",
    "Address",
    "BaseChain",
    "Cluster",
    "DelegationProgram",
    "ERConfig",
    "RouteDecision",
    "RouterPolicy",
    "SimClock",
    "Transaction",
    "derive_pda",
    "verify_commit",
    "__version__",
]
