"""Run metrics and their text / JSON-lines renderings."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Union


def latency_stats(samples: list[int]) -> dict:
    if not samples:
        return {"count": 0}
    xs = sorted(samples)
    n = len(xs)

    def pct(p: float) -> int:
        # nearest-rank percentile
        return xs[max(1, math.ceil(p * n / 100)) - 1]

    return {
        "count": n,
        "min": xs[0],
        "p50": pct(50),
        "p90": pct(90),
        "p99": pct(99),
        "max": xs[-1],
        "mean": round(sum(xs) / n, 3),
    }


@dataclass
class MetricsReport:
    scenario: str
    seed: int
    duration_ms: int
    routed: int = 0
    base_included: int = 0
    er_included: int = 0
    rejected: int = 0
    ticks: int = 0
    commits: int = 0
    final_commits: int = 0
    verified: int = 0
    fraud: int = 0
    reverted_commits: int = 0
    state_digest: str = ""
    layers: dict = field(default_factory=dict)  # layer -> {"included", "ok", "failed", "tps"}
    latency: dict = field(default_factory=dict)  # layer -> latency_stats
    rejections: dict = field(default_factory=dict)  # reason -> count
    routing: dict = field(default_factory=dict)  # decision label -> count
    sessions: dict = field(default_factory=dict)  # er_id -> {"status", "reason", "commits"}
    errors: list = field(default_factory=list)  # {"at_ms", "action", "code", "message"}

    @property
    def reconciles(self) -> bool:
        return self.routed == self.base_included + self.er_included + self.rejected

    # -- structured records ------------------------------------------------------------
    _SUMMARY = (
        "scenario", "seed", "duration_ms", "routed", "base_included", "er_included", "rejected", "ticks",
        "commits", "final_commits", "verified", "fraud", "reverted_commits", "state_digest",
    )

    def records(self) -> list[dict]:
        out = [{"record": "summary", "reconciles": self.reconciles, **{k: getattr(self, k) for k in self._SUMMARY}}]
        for layer in sorted(self.layers):
            out.append({"record": "layer", "layer": layer, **self.layers[layer]})
        for layer in sorted(self.latency):
            out.append({"record": "latency", "layer": layer, **self.latency[layer]})
        for reason in sorted(self.rejections):
            out.append({"record": "rejection", "reason": reason, "count": self.rejections[reason]})
        for label in sorted(self.routing):
            out.append({"record": "routing", "decision": label, "count": self.routing[label]})
        for er_id in sorted(self.sessions):
            out.append({"record": "session", "er_id": er_id, **self.sessions[er_id]})
        for err in self.errors:
            out.append({"record": "error", **err})
        return out

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in self.records())

    @classmethod
    def from_records(cls, records: Iterable[dict]) -> "MetricsReport":
        report = None
        for rec in records:
            rec = dict(rec)
            kind = rec.pop("record")
            if kind == "summary":
                rec.pop("reconciles", None)
                report = cls(**rec)
                continue
            if report is None:
                raise ValueError("structured report must start with a summary record")
            if kind == "layer":
                report.layers[rec.pop("layer")] = rec
            elif kind == "latency":
                report.latency[rec.pop("layer")] = rec
            elif kind == "rejection":
                report.rejections[rec["reason"]] = rec["count"]
            elif kind == "routing":
                report.routing[rec["decision"]] = rec["count"]
            elif kind == "session":
                report.sessions[rec.pop("er_id")] = rec
            elif kind == "error":
                report.errors.append(rec)
            else:
                raise ValueError(f"unknown record kind {kind!r}")
        if report is None:
            raise ValueError("empty structured report")
        return report

    @classmethod
    def from_jsonl(cls, text: Union[str, IO[str]]) -> "MetricsReport":
        if not isinstance(text, str):
            text = text.read()
        return cls.from_records(json.loads(line) for line in text.splitlines() if line.strip())

    # -- text --------------------------------------------------------------------------
    def to_text(self) -> str:
        secs = self.duration_ms / 1000
        lines = [
            f"scenario {self.scenario}  seed {self.seed}  simulated {secs:g} s",
            f"routed {self.routed} = base {self.base_included} + er {self.er_included} + rejected {self.rejected}"
            f"  [{'reconciled' if self.reconciles else 'MISMATCH'}]",
            "",
            f"{'layer':<10}{'included':>10}{'ok':>8}{'failed':>8}{'TPS':>10}",
        ]
        for layer in sorted(self.layers):
            d = self.layers[layer]
            lines.append(f"{layer:<10}{d['included']:>10}{d['ok']:>8}{d['failed']:>8}{d['tps']:>10.1f}")
        if self.latency:
            lines += ["", f"{'latency ms':<10}{'count':>8}{'min':>6}{'p50':>6}{'p90':>6}{'p99':>6}{'max':>6}{'mean':>9}"]
            for layer in sorted(self.latency):
                d = self.latency[layer]
                if not d["count"]:
                    continue
                lines.append(
                    f"{layer:<10}{d['count']:>8}{d['min']:>6}{d['p50']:>6}{d['p90']:>6}{d['p99']:>6}{d['max']:>6}{d['mean']:>9.2f}"
                )
        lines += [
            "",
            f"ticks {self.ticks}  commits {self.commits} (final {self.final_commits})  "
            f"verified {self.verified}  fraud {self.fraud}  reverted {self.reverted_commits}",
        ]
        if self.routing:
            lines.append("routing: " + ", ".join(f"{k} {v}" for k, v in sorted(self.routing.items())))
        if self.rejections:
            lines.append("rejections: " + ", ".join(f"{k} {v}" for k, v in sorted(self.rejections.items())))
        for er_id in sorted(self.sessions):
            d = self.sessions[er_id]
            lines.append(f"session {er_id}: {d['status']} ({d['reason'] or '-'}), {d['commits']} commits")
        for err in self.errors:
            lines.append(f"error at {err['at_ms']} ms in {err['action']}: {err['code']}: {err['message']}")
        lines.append(f"state digest {self.state_digest}")
        return "\n".join(lines) + "\n"


def report(metrics: MetricsReport, fmt: str = "text") -> str:
    if fmt == "text":
        return metrics.to_text()
    if fmt in ("jsonl", "structured"):
        return metrics.to_jsonl()
    raise ValueError(f"unknown report format {fmt!r}")
