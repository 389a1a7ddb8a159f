"""Append-only audit log for rollout decisions.

One JSON object per line, strictly sequenced with no gaps, so a
damaged or truncated log is detectable and a healthy one can be
replayed to reconstruct the ledger state that produced it.
Timestamps are simulated-day indices: wall-clock stamps would break
byte-for-byte reproducibility of runs.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

from .counterfactual import RiskLedger, ledger_step
from .errors import AuditIntegrityError

EVENT_KINDS = frozenset(
    {
        "flag_transition",
        "invariant_violation",
        "ledger_update",
        "playbook_action",
        "phase_transition",
    }
)


@dataclass(frozen=True)
class AuditRecord:
    sequence: int
    day: int
    event_kind: str
    payload: dict = field(default_factory=dict)
    signature: str | None = None  # reserved for a future signing scheme

    def __post_init__(self) -> None:
        if self.sequence < 0:
            raise ValueError("sequence must be non-negative")
        if self.event_kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.event_kind!r}")

    def to_json(self) -> str:
        doc = {
            "sequence": self.sequence,
            "day": self.day,
            "event_kind": self.event_kind,
            "payload": self.payload,
            "signature": self.signature,
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> AuditRecord:
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise AuditIntegrityError(f"unparseable audit line: {exc}") from exc
        try:
            return cls(
                sequence=int(doc["sequence"]),
                day=int(doc["day"]),
                event_kind=doc["event_kind"],
                payload=doc.get("payload", {}),
                signature=doc.get("signature"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise AuditIntegrityError(f"malformed audit record: {exc}") from exc


class AuditLog:
    """Appending writer. Sequences start at 0 and must arrive gapless."""

    def __init__(self, path: str | Path, fsync: bool = False):
        self._path = Path(path)
        self._fsync = fsync
        self._last = self._scan_last()
        self._fh = open(self._path, "a", encoding="utf-8")

    def _scan_last(self) -> int:
        if not self._path.exists() or self._path.stat().st_size == 0:
            return -1
        last = -1
        for record in read_records(self._path):
            last = record.sequence
        return last

    @property
    def next_sequence(self) -> int:
        return self._last + 1

    def append(self, record: AuditRecord) -> None:
        """Append one record; a sequence gap aborts without writing."""
        if record.sequence != self._last + 1:
            raise AuditIntegrityError(
                f"sequence gap: expected {self._last + 1}, got {record.sequence}"
            )
        self._fh.write(record.to_json() + "\n")
        self._fh.flush()
        if self._fsync:
            os.fsync(self._fh.fileno())
        self._last = record.sequence

    def emit(self, day: int, event_kind: str, payload: dict) -> AuditRecord:
        """Convenience append that assigns the next sequence number."""
        record = AuditRecord(
            sequence=self.next_sequence, day=day, event_kind=event_kind, payload=payload
        )
        self.append(record)
        return record

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> AuditLog:
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_records(path: str | Path) -> Iterator[AuditRecord]:
    """Yield validated records; any gap or parse failure stops the read."""
    expected = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            record = AuditRecord.from_json(line)
            if record.sequence != expected:
                raise AuditIntegrityError(
                    f"line {lineno}: sequence {record.sequence}, expected {expected}"
                )
            expected += 1
            yield record


@dataclass(frozen=True)
class ReplaySummary:
    records: int
    events_by_kind: dict
    final_exposure: float | None
    final_ledger_balance: float | None
    last_day: int | None


def replay(path: str | Path) -> ReplaySummary:
    """Re-derive final state from the log alone.

    Ledger updates are recomputed step by step from the recorded
    inputs; any recorded balance that disagrees with the recomputation
    marks the log as tampered or torn.
    """
    counts: dict[str, int] = {}
    final_exposure: float | None = None
    ledger: RiskLedger | None = None
    total = 0
    last_day: int | None = None
    for record in read_records(path):
        total += 1
        last_day = record.day
        counts[record.event_kind] = counts.get(record.event_kind, 0) + 1
        if record.event_kind == "flag_transition":
            final_exposure = float(record.payload["exposure"])
        elif record.event_kind == "ledger_update":
            p = record.payload
            if ledger is None:
                ledger = RiskLedger(
                    balance=float(p["balance_before"]),
                    replenish_rate=float(p["replenish_rate"]),
                    lambda_comp=float(p["lambda_comp"]),
                    balance_cap=float(p["balance_cap"]),
                )
            elif ledger.balance != float(p["balance_before"]):
                raise AuditIntegrityError(
                    f"ledger chain broken at sequence {record.sequence}: "
                    f"balance_before {p['balance_before']} != replayed {ledger.balance}"
                )
            ledger = ledger_step(
                ledger,
                exposure=float(p["exposure"]),
                abuse_cf=float(p["abuse_cf"]),
                comp_cf=float(p["comp_cf"]),
            )
            if ledger.balance != float(p["balance_after"]):
                raise AuditIntegrityError(
                    f"ledger replay mismatch at sequence {record.sequence}: "
                    f"recorded {p['balance_after']}, replayed {ledger.balance}"
                )
    return ReplaySummary(
        records=total,
        events_by_kind=counts,
        final_exposure=final_exposure,
        final_ledger_balance=None if ledger is None else ledger.balance,
        last_day=last_day,
    )
