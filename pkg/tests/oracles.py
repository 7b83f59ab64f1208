"""Independent reference implementations used to check the package.

They share no code with ``ephemera``: digests come from ``cryptography`` and
state machines are re-derived from the documented rules.
"""

import struct

from cryptography.hazmat.primitives import hashes


def sha256(data: bytes) -> bytes:
    h = hashes.Hash(hashes.SHA256())
    h.update(data)
    return h.finalize()


def label_address(label: str) -> bytes:
    return sha256(b"EPHEMERA_LABEL" + label.encode())


def pda(program: bytes, seeds) -> bytes:
    msg = b"EPHEMERA_PDA" + bytes([len(seeds)])
    for s in seeds:
        if isinstance(s, str):
            s = s.encode()
        elif isinstance(s, int):
            s = struct.pack("<Q", s)
        msg += bytes([len(s)]) + s
    return sha256(msg + program)


def account_encoding(address, owner, balance, executable, data) -> bytes:
    return address + owner + struct.pack("<Q", balance) + bytes([int(executable)]) + struct.pack("<I", len(data)) + data


def schema_layout(name, fields) -> bytes:
    def s(x):
        b = x.encode()
        return struct.pack("<H", len(b)) + b

    out = s(name) + struct.pack("<H", len(fields))
    for f in fields:
        name_, typ, unit = (tuple(f) + ("",))[:3]
        out += s(name_) + s(typ) + s(unit)
    return out


def schema_id(name, fields) -> bytes:
    return sha256(b"EPHEMERA_SCHEMA" + schema_layout(name, fields))


# Published routing table, restated cell by cell.
def expected_read(cells):
    homes = {h for h, _ in cells if h != "base"}
    if len(homes) > 1:
        return "Reject(multi-er-read)"
    if homes:
        return f"ER({homes.pop()})"
    return "BaseLayer"


def expected_send(cells, policy):
    writable = [h for h, w in cells if w]
    delegated = [h for h in writable if h != "base"]
    if not delegated:
        return "BaseLayer"
    if len(delegated) == len(writable) and len(set(delegated)) == 1:
        return f"ER({delegated[0]})"
    return "ForceSettleThenBase" if policy == "force-settle" else "Reject(mixed-writable)"


# Counter program semantics, for sequential replay of workloads.
def counter_step(state: dict, writes, reads, amount, fail=False):
    """Apply one counter add to ``state`` (address -> int); returns the new state."""
    read_sum = sum(state.get(a, 0) for a in reads)
    if fail:
        return dict(state)
    new = dict(state)
    for a in writes:
        new[a] = (state.get(a, 0) + amount + read_sum) % (1 << 64)
    return new


def energy_closed_form(base, rate, period_ms, start_ms, now_ms):
    if now_ms < start_ms:
        return base
    return base + rate * ((now_ms - start_ms) // period_ms)
