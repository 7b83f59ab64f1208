"""FastAPI wrapper around one in-process :class:`~ephemera.cluster.Cluster`.

The simulated clock only moves through ``POST /sim/advance``; every handler
holds one lock, so requests observe the cluster between blocks.
"""

from __future__ import annotations

import threading
from typing import Optional

from fastapi import FastAPI, HTTPException

from ..address import Address
from ..cluster import Cluster
from ..errors import EphemeraError
from ..execution import AccountMeta, Transaction
from ..router import BASE, ER, RouteDecision
from . import schemas as s


def _decision(d: RouteDecision) -> s.Decision:
    return s.Decision(**d.to_dict(), label=d.label())


def _error(exc: Exception, status: int = 400) -> HTTPException:
    code = getattr(exc, "code", type(exc).__name__)
    return HTTPException(status_code=status, detail={"code": code, "message": str(exc)})


def create_app(cluster: Optional[Cluster] = None) -> FastAPI:
    cluster = cluster if cluster is not None else Cluster()
    lock = threading.Lock()
    subs: dict[int, object] = {}
    app = FastAPI(title="ephemera", version="0.1.0")
    app.state.cluster = cluster

    @app.get("/health")
    def health():
        return {"ok": True}

    @app.get("/status")
    def status():
        with lock:
            return cluster.status()

    @app.post("/rpc/read", response_model=s.ReadResponse)
    def read(req: s.ReadRequest):
        with lock:
            decision, accounts = cluster.read([Address.from_hex(a) for a in req.accounts])
        return s.ReadResponse(
            decision=_decision(decision),
            accounts={a.hex(): (None if acct is None else s.AccountState.of(acct)) for a, acct in accounts.items()},
        )

    @app.post("/rpc/send", response_model=s.SendResponse)
    def send(req: s.SendRequest):
        try:
            tx = Transaction.decode(bytes.fromhex(req.tx))
        except (ValueError, EphemeraError) as exc:
            raise _error(exc)
        with lock:
            receipt = cluster.send(tx)
        d = receipt.to_dict()
        d["decision"] = _decision(receipt.decision)
        return s.SendResponse(**d)

    @app.post("/rpc/blockhash", response_model=s.BlockhashResponse)
    def blockhash(req: s.BlockhashRequest):
        with lock:
            if req.target is not None:
                decision = RouteDecision.base() if req.target == BASE else RouteDecision(ER, req.target)
            else:
                metas = [AccountMeta(Address.from_hex(m.address), m.writable) for m in req.metas]
                payer = Address.from_hex(req.fee_payer) if req.fee_payer else None
                decision = cluster.router.route_instruction(metas, payer)
            try:
                h = cluster.router.latest_blockhash(decision)
            except EphemeraError as exc:
                raise _error(exc, 409)
            return s.BlockhashResponse(decision=_decision(decision), blockhash=h.hex(), now_ms=cluster.now_ms)

    @app.post("/rpc/subscribe", response_model=s.SubscribeResponse)
    def subscribe(req: s.SubscribeRequest):
        accounts = None if req.accounts is None else [Address.from_hex(a) for a in req.accounts]
        with lock:
            sub = cluster.router.subscribe(accounts)
            subs[sub.id] = sub
        return s.SubscribeResponse(id=sub.id)

    @app.get("/rpc/subscriptions/{sub_id}", response_model=s.UpdatesResponse)
    def poll(sub_id: int):
        sub = subs.get(sub_id)
        if sub is None:
            raise HTTPException(404, detail={"code": "unknown-subscription", "message": str(sub_id)})
        return s.UpdatesResponse(id=sub_id, updates=[s.Update(**u.to_dict()) for u in sub.poll()])

    @app.delete("/rpc/subscriptions/{sub_id}")
    def unsubscribe(sub_id: int):
        with lock:
            subs.pop(sub_id, None)
            return {"removed": cluster.router.unsubscribe(sub_id)}

    @app.post("/sim/advance", response_model=s.ClockResponse)
    def advance(req: s.AdvanceRequest):
        if (req.ms is None) == (req.to_ms is None):
            raise HTTPException(422, detail={"code": "invalid-request", "message": "give exactly one of ms, to_ms"})
        with lock:
            target = cluster.now_ms + req.ms if req.ms is not None else req.to_ms
            if target < cluster.now_ms:
                raise HTTPException(409, detail={"code": "clock-backwards", "message": f"now is {cluster.now_ms}"})
            cluster.advance_to(target)
            return s.ClockResponse(now_ms=cluster.now_ms)

    @app.post("/sim/fund")
    def fund(req: s.FundRequest):
        with lock:
            cluster.fund(Address.from_hex(req.address), req.amount)
            acct = cluster.base.get_account(Address.from_hex(req.address))
        return s.AccountState.of(acct)

    @app.get("/trace")
    def trace():
        with lock:
            return {"lines": cluster.router.trace_lines()}

    @app.get("/accounts/{address}", response_model=Optional[s.AccountState])
    def account(address: str):
        try:
            addr = Address.from_hex(address)
        except ValueError as exc:
            raise _error(exc)
        with lock:
            acct = cluster.base.get_account(addr)
        if acct is None:
            raise HTTPException(404, detail={"code": "unknown-account", "message": address})
        return s.AccountState.of(acct)

    return app
