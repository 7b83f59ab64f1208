import struct

import pytest

from ephemera.account import Account
from ephemera.address import Address
from ephemera.cluster import Cluster
from ephemera.delegation import ERConfig
from ephemera.execution import AccountMeta
from ephemera.programs import COUNTER_ADD, COUNTER_PROGRAM, counter_ix, counter_value

PAYER = Address.from_label("test/payer")
STRANGER = Address.from_label("test/stranger")


def counter_account(label: str, value: int = 0) -> Account:
    return Account(Address.from_label(label), owner=COUNTER_PROGRAM, data=struct.pack("<Q", value))


class CounterWorld:
    """A cluster with funded payer and ``n`` counter accounts on the base layer."""

    def __init__(self, n=3, **cluster_kw):
        self.cluster = Cluster(**cluster_kw)
        self.cluster.fund(PAYER, 10**12)
        self.accounts = []
        for i in range(n):
            acct = counter_account(f"test/counter/{i}")
            self.cluster.base.upsert_account(acct)
            self.accounts.append(acct.address)

    def delegate(self, addrs=None, **cfg):
        cfg = {"lifetime_ms": 2000, "commit_frequency_ms": 500, "block_time_ms": 10, **cfg}
        return self.cluster.delegate(COUNTER_PROGRAM, self.accounts if addrs is None else addrs, ERConfig(**cfg))

    def add(self, addr, amount=1, reads=()):
        metas = [AccountMeta(addr, True)] + [AccountMeta(a, False) for a in reads]
        return self.cluster.send_instruction(PAYER, COUNTER_PROGRAM, metas, counter_ix(COUNTER_ADD, amount))

    def value(self, addr, layer="base"):
        if layer == "base":
            acct = self.cluster.base.get_account(addr)
        else:
            acct = self.cluster.rollup(layer).read(addr)
        return counter_value(acct.data)


@pytest.fixture
def world():
    return CounterWorld()
