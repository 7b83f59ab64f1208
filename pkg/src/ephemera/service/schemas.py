"""Request and response bodies for the HTTP service. Byte strings travel as lowercase hex."""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, Field, field_validator

from ..account import Account


def _hex(value: str, length: Optional[int] = None) -> str:
    try:
        raw = bytes.fromhex(value)
    except ValueError:
        raise ValueError("expected a hex string") from None
    if length is not None and len(raw) != length:
        raise ValueError(f"expected {length} bytes, got {len(raw)}")
    return value.lower()


class AddressList(BaseModel):
    accounts: list[str] = Field(default_factory=list)

    @field_validator("accounts")
    @classmethod
    def _addresses(cls, v):
        return [_hex(a, 32) for a in v]


class ReadRequest(AddressList):
    pass


class AccountState(BaseModel):
    address: str
    owner: str
    balance: int
    executable: bool
    data: str
    delegated_to: Optional[str] = None
    encoding: str

    @classmethod
    def of(cls, acct: Account) -> "AccountState":
        return cls(
            address=acct.address.hex(),
            owner=acct.owner.hex(),
            balance=acct.balance,
            executable=acct.executable,
            data=acct.data.hex(),
            delegated_to=acct.delegated_to,
            encoding=acct.encode().hex(),
        )


class Decision(BaseModel):
    target: str
    er_id: Optional[str] = None
    reason: Optional[str] = None
    settle: list[str] = Field(default_factory=list)
    label: str


class ReadResponse(BaseModel):
    decision: Decision
    accounts: dict[str, Optional[AccountState]]


class SendRequest(BaseModel):
    tx: str

    @field_validator("tx")
    @classmethod
    def _tx(cls, v):
        return _hex(v)


class SendResponse(BaseModel):
    tx_id: str
    decision: Decision
    layer: Optional[str]
    submitted_ms: int
    rerouted: bool
    status: Optional[str]


class Meta(BaseModel):
    address: str
    writable: bool = False

    @field_validator("address")
    @classmethod
    def _address(cls, v):
        return _hex(v, 32)


class BlockhashRequest(BaseModel):
    """Either name a chain directly (``base`` or an er id) or describe the transaction to route."""

    target: Optional[str] = None
    metas: list[Meta] = Field(default_factory=list)
    fee_payer: Optional[str] = None


class BlockhashResponse(BaseModel):
    decision: Decision
    blockhash: str
    now_ms: int


class SubscribeRequest(BaseModel):
    accounts: Optional[list[str]] = None

    @field_validator("accounts")
    @classmethod
    def _addresses(cls, v):
        return None if v is None else [_hex(a, 32) for a in v]


class SubscribeResponse(BaseModel):
    id: int


class Update(BaseModel):
    address: str
    encoding: str
    source: str
    slot: int
    timestamp_ms: int
    kind: str
    final: bool


class UpdatesResponse(BaseModel):
    id: int
    updates: list[Update]


class AdvanceRequest(BaseModel):
    ms: Optional[int] = Field(default=None, ge=0)
    to_ms: Optional[int] = Field(default=None, ge=0)


class FundRequest(BaseModel):
    address: str
    amount: int = Field(gt=0)

    @field_validator("address")
    @classmethod
    def _address(cls, v):
        return _hex(v, 32)


class ClockResponse(BaseModel):
    now_ms: int
