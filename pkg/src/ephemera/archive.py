"""Transaction log segments and the archive file format.

A rollup's log is split into segments whose boundaries coincide with its
commits. Segments are kept after the rollup terminates, and can be written to
a JSON-lines archive that any verifier can replay independently.

Archive records, one JSON object per line, grouped per session::

    {"kind": "session", "er_id", "config", "version"}
    {"kind": "segment", "er_id", "index", "start_commit", "gasless",
     "flat_fee", "delegated": [hex], "added": {hex: hex}}
    {"kind": "tx", "er_id", "segment", "tx": hex, "status", "slot", "ts",
     "readonly": {hex: hex}, "pre": hex, "post": hex}
    {"kind": "commit", "er_id", "segment", "commit_id", "segment_hash",
     "final", "states": {hex: hex}}
    {"kind": "end", "er_id", "segments", "records", "commits"}

Byte strings are lowercase hex.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Optional, Union

from .address import TICK_AUTHORITY, Address
from .errors import MalformedLog
from .execution import Transaction

ARCHIVE_VERSION = 1


@dataclass(frozen=True)
class FeeSchedule:
    """Rollup fee rule: zero when gasless; ticks never pay."""

    gasless: bool
    flat_fee: int

    def exempt(self, tx: Transaction) -> bool:
        return self.gasless or tx.fee_payer == TICK_AUTHORITY

    def required(self, tx: Transaction) -> int:
        return 0 if self.exempt(tx) else self.flat_fee

    def charged(self, tx: Transaction) -> int:
        return 0 if self.exempt(tx) else tx.fee


@dataclass
class LogRecord:
    tx: Transaction
    status: str
    slot: int
    timestamp_ms: int
    readonly: dict = field(default_factory=dict)
    pre_hash: bytes = b""
    post_hash: bytes = b""

    def encode(self) -> bytes:
        tx = self.tx.encode()
        status = self.status.encode()
        parts = [
            struct.pack("<I", len(tx)),
            tx,
            struct.pack("<H", len(status)),
            status,
            struct.pack("<QQI", self.slot, self.timestamp_ms, len(self.readonly)),
        ]
        for addr in sorted(self.readonly):
            enc = self.readonly[addr]
            parts += [addr, struct.pack("<I", len(enc)), enc]
        parts += [self.pre_hash.ljust(32, b"\0"), self.post_hash.ljust(32, b"\0")]
        return b"".join(parts)


@dataclass
class LogSegment:
    er_id: str
    index: int
    start_commit: Optional[int]
    fees: FeeSchedule
    delegated: tuple = ()
    added: dict = field(default_factory=dict)
    records: list = field(default_factory=list)
    commit_id: Optional[int] = None

    def hash(self) -> bytes:
        h = hashlib.sha256(b"EPHEMERA_SEGMENT")
        er = self.er_id.encode()
        h.update(struct.pack("<H", len(er)) + er)
        h.update(struct.pack("<Iq", self.index, -1 if self.start_commit is None else self.start_commit))
        h.update(struct.pack("<BQ", int(self.fees.gasless), self.fees.flat_fee))
        h.update(struct.pack("<I", len(self.delegated)))
        for addr in self.delegated:
            h.update(addr)
        h.update(struct.pack("<I", len(self.added)))
        for addr in sorted(self.added):
            enc = self.added[addr]
            h.update(addr + struct.pack("<I", len(enc)) + enc)
        h.update(struct.pack("<I", len(self.records)))
        for rec in self.records:
            enc = rec.encode()
            h.update(struct.pack("<I", len(enc)) + enc)
        return h.digest()


@dataclass
class ArchivedCommit:
    commit_id: int
    segment_index: int
    segment_hash: bytes
    states: dict
    final: bool = False


@dataclass
class ArchivedSession:
    er_id: str
    config: dict
    segments: list = field(default_factory=list)
    commits: list = field(default_factory=list)

    def commit_for(self, segment_index: int) -> Optional[ArchivedCommit]:
        for c in self.commits:
            if c.segment_index == segment_index:
                return c
        return None


class LogArchive:
    """Data-availability store: segments by hash, grouped per rollup session."""

    def __init__(self):
        self._by_hash: dict[bytes, LogSegment] = {}
        self.sessions: dict[str, ArchivedSession] = {}

    def open_session(self, er_id: str, config: dict) -> ArchivedSession:
        sess = self.sessions.get(er_id)
        if sess is None:
            sess = self.sessions[er_id] = ArchivedSession(er_id, config)
        return sess

    def add_segment(self, segment: LogSegment) -> bytes:
        h = segment.hash()
        self._by_hash[h] = segment
        sess = self.sessions[segment.er_id]
        if not sess.segments or sess.segments[-1] is not segment:
            sess.segments.append(segment)
        return h

    def add_commit(self, er_id: str, commit_id: int, segment: LogSegment, segment_hash: bytes, states, final: bool):
        self.sessions[er_id].commits.append(
            ArchivedCommit(commit_id, segment.index, segment_hash, dict(states), final)
        )

    def get(self, segment_hash: bytes) -> Optional[LogSegment]:
        return self._by_hash.get(bytes(segment_hash))

    def drop(self, segment_hash: bytes) -> None:
        """Test hook: simulate data becoming unavailable."""
        self._by_hash.pop(bytes(segment_hash), None)

    # -- file IO -----------------------------------------------------------------
    def write(self, target: Union[str, Path, IO[str]], er_ids: Iterable[str] | None = None) -> None:
        sessions = [self.sessions[e] for e in (er_ids or sorted(self.sessions, key=_er_sort_key))]
        if isinstance(target, (str, Path)):
            with open(target, "w") as fh:
                write_sessions(fh, sessions)
        else:
            write_sessions(target, sessions)


def _er_sort_key(er_id: str):
    head, _, num = er_id.rpartition("-")
    return (head, int(num)) if num.isdigit() else (er_id, 0)


def _hexmap(m: dict) -> dict:
    return {Address(k).hex(): bytes(v).hex() for k, v in sorted(m.items())}


def write_sessions(fh: IO[str], sessions: Iterable[ArchivedSession]) -> None:
    def emit(obj):
        fh.write(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n")

    for sess in sessions:
        emit({"kind": "session", "er_id": sess.er_id, "config": sess.config, "version": ARCHIVE_VERSION})
        n_records = 0
        for seg in sess.segments:
            emit(
                {
                    "kind": "segment",
                    "er_id": sess.er_id,
                    "index": seg.index,
                    "start_commit": seg.start_commit,
                    "gasless": seg.fees.gasless,
                    "flat_fee": seg.fees.flat_fee,
                    "delegated": [a.hex() for a in seg.delegated],
                    "added": _hexmap(seg.added),
                }
            )
            for rec in seg.records:
                n_records += 1
                emit(
                    {
                        "kind": "tx",
                        "er_id": sess.er_id,
                        "segment": seg.index,
                        "tx": rec.tx.encode().hex(),
                        "status": rec.status,
                        "slot": rec.slot,
                        "ts": rec.timestamp_ms,
                        "readonly": _hexmap(rec.readonly),
                        "pre": rec.pre_hash.hex(),
                        "post": rec.post_hash.hex(),
                    }
                )
            commit = sess.commit_for(seg.index)
            if commit is not None:
                emit(
                    {
                        "kind": "commit",
                        "er_id": sess.er_id,
                        "segment": seg.index,
                        "commit_id": commit.commit_id,
                        "segment_hash": commit.segment_hash.hex(),
                        "final": commit.final,
                        "states": _hexmap(commit.states),
                    }
                )
        emit(
            {
                "kind": "end",
                "er_id": sess.er_id,
                "segments": len(sess.segments),
                "records": n_records,
                "commits": len(sess.commits),
            }
        )


def _unhexmap(m) -> dict:
    if not isinstance(m, dict):
        raise ValueError("expected an object of hex strings")
    return {Address.from_hex(k): bytes.fromhex(v) for k, v in m.items()}


def read_archive(source: Union[str, Path, IO[str], Iterable[str]]) -> list[ArchivedSession]:
    """Parse an archive; any truncation or inconsistency raises :class:`MalformedLog`."""
    if isinstance(source, (str, Path)):
        with open(source) as fh:
            lines = fh.read().split("\n")
    elif hasattr(source, "read"):
        lines = source.read().split("\n")
    else:
        lines = list(source)
    if lines and lines[-1] == "":
        lines.pop()

    sessions: list[ArchivedSession] = []
    current: Optional[ArchivedSession] = None
    segment: Optional[LogSegment] = None
    n_records = 0
    for lineno, line in enumerate(lines, 1):
        try:
            obj = json.loads(line)
            kind = obj["kind"]
            if kind == "session":
                if current is not None:
                    raise ValueError("session started before previous one ended")
                if obj.get("version") != ARCHIVE_VERSION:
                    raise ValueError(f"unsupported archive version {obj.get('version')}")
                current = ArchivedSession(obj["er_id"], obj["config"])
                segment, n_records = None, 0
                continue
            if current is None or obj["er_id"] != current.er_id:
                raise ValueError(f"{kind} record outside its session")
            if kind == "segment":
                if obj["index"] != len(current.segments):
                    raise ValueError("segment index out of sequence")
                segment = LogSegment(
                    current.er_id,
                    obj["index"],
                    obj["start_commit"],
                    FeeSchedule(bool(obj["gasless"]), int(obj["flat_fee"])),
                    tuple(Address.from_hex(a) for a in obj["delegated"]),
                    _unhexmap(obj["added"]),
                )
                current.segments.append(segment)
            elif kind == "tx":
                if segment is None or obj["segment"] != segment.index:
                    raise ValueError("transaction record outside its segment")
                segment.records.append(
                    LogRecord(
                        Transaction.decode(bytes.fromhex(obj["tx"])),
                        obj["status"],
                        int(obj["slot"]),
                        int(obj["ts"]),
                        _unhexmap(obj["readonly"]),
                        bytes.fromhex(obj["pre"]),
                        bytes.fromhex(obj["post"]),
                    )
                )
                n_records += 1
            elif kind == "commit":
                if segment is None or obj["segment"] != segment.index:
                    raise ValueError("commit record outside its segment")
                segment.commit_id = obj["commit_id"]
                current.commits.append(
                    ArchivedCommit(
                        int(obj["commit_id"]),
                        segment.index,
                        bytes.fromhex(obj["segment_hash"]),
                        _unhexmap(obj["states"]),
                        bool(obj["final"]),
                    )
                )
            elif kind == "end":
                if (obj["segments"], obj["records"], obj["commits"]) != (
                    len(current.segments),
                    n_records,
                    len(current.commits),
                ):
                    raise ValueError("end marker counts do not match content")
                sessions.append(current)
                current, segment = None, None
            else:
                raise ValueError(f"unknown record kind {kind!r}")
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedLog(f"line {lineno}: {exc}") from exc
    if current is not None:
        raise MalformedLog(f"archive truncated: session {current.er_id} has no end marker")
    return sessions
