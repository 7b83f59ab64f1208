"""Built-in non-ECS programs: native transfers and a counter used by workloads."""

from __future__ import annotations

import struct

from .address import SYSTEM_PROGRAM, Address
from .errors import ProgramError
from .execution import InvokeContext, ProgramRoutine

COUNTER_PROGRAM = Address.from_label("ephemera/counter")

TRANSFER = 0

COUNTER_INIT = 0
COUNTER_ADD = 1
COUNTER_ADD_THEN_FAIL = 2
COUNTER_WRITE_READONLY = 3


def transfer_ix(amount: int) -> bytes:
    return struct.pack("<BQ", TRANSFER, amount)


def _system(ctx: InvokeContext) -> None:
    if not ctx.data or ctx.data[0] != TRANSFER:
        raise ProgramError("unknown-instruction")
    (amount,) = struct.unpack_from("<Q", ctx.data, 1)
    src, dst = ctx.accounts[0], ctx.accounts[1]
    if src.balance < amount:
        raise ProgramError("insufficient-funds")
    src.balance -= amount
    dst.balance += amount


def counter_value(data: bytes) -> int:
    return struct.unpack("<Q", data)[0] if len(data) == 8 else 0


def counter_ix(op: int, amount: int = 0) -> bytes:
    return struct.pack("<BQ", op, amount)


def _counter(ctx: InvokeContext) -> None:
    op = ctx.data[0]
    (amount,) = struct.unpack_from("<Q", ctx.data, 1)
    targets = ctx.accounts[1:]
    if op == COUNTER_INIT:
        for view in targets:
            if view.writable and view.is_blank:
                view.owner = COUNTER_PROGRAM
                view.data = struct.pack("<Q", amount)
        return
    if op == COUNTER_WRITE_READONLY:
        for view in targets:
            if not view.writable:
                view.data = struct.pack("<Q", counter_value(view.data) + 1)
                return
        raise ProgramError("no-readonly-account")
    # Reads feed into writes so read/write ordering is observable in state.
    read_sum = sum(counter_value(v.data) for v in targets if not v.writable)
    for view in targets:
        if view.writable:
            if view.owner != COUNTER_PROGRAM:
                raise ProgramError("not-a-counter")
            value = (counter_value(view.data) + amount + read_sum) % (1 << 64)
            view.data = struct.pack("<Q", value)
    if op == COUNTER_ADD_THEN_FAIL:
        raise ProgramError("requested-failure")


SYSTEM_ROUTINE = ProgramRoutine(SYSTEM_PROGRAM, _system, "system")
COUNTER_ROUTINE = ProgramRoutine(COUNTER_PROGRAM, _counter, "counter")
