"""Synchronized interval recording of both peers' battery state.

Every charging tick emits one record per role under an identical tick
index and timestamp; the timestamp is session start plus tick * interval,
so both sides of a session log against the same grid. Traces are aligned
by tick index after collection, and session metrics (provider loss,
consumer gain, energy loss) come straight from the first/last aligned
records.

Trace CSV is bit-exact: fixed header, ``\\n`` line endings, floats printed
with full round-trip precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .battery import BatteryState
from .errors import EnergyShareError
from .protocol import Reason, SessionPhase, SessionState
from .util import check_id, fmt_float

ROLE_PROVIDER = "provider"
ROLE_CONSUMER = "consumer"

TRACE_HEADER = (
    "tick_index,wall_time_s,session_id,device_id,role,"
    "battery_level_pct,battery_charge_mah,cumulative_transferred_mah"
)

_RECORDABLE_PHASES = frozenset(
    {SessionPhase.CHARGING, SessionPhase.COMPLETED, SessionPhase.ABORTED}
)


class SessionNotActive(EnergyShareError):
    """Recording requested outside the charging lifetime of a session."""


class MisalignedTraces(EnergyShareError):
    """Provider/consumer traces disagree on which tick indices exist."""

    def __init__(self, missing_ticks: list[int]):
        self.missing_ticks = missing_ticks
        super().__init__(f"unpaired tick indices: {missing_ticks}")


class EmptyTrace(EnergyShareError):
    """Metrics were requested over an empty record series."""


@dataclass(frozen=True)
class MonitorConfig:
    """Recording interval between synchronized battery samples."""

    interval_s: float = 1.0

    def __post_init__(self) -> None:
        if self.interval_s <= 0:
            raise ValueError(f"interval_s must be > 0, got {self.interval_s!r}")


@dataclass(frozen=True)
class MonitorRecord:
    """One timestamped battery sample of one device in one session."""

    tick_index: int
    wall_time_s: float
    session_id: str
    device_id: str
    role: str
    battery_level_pct: float
    battery_charge_mah: float
    cumulative_transferred_mah: float

    def __post_init__(self) -> None:
        if self.tick_index < 0:
            raise ValueError(f"tick_index must be >= 0, got {self.tick_index!r}")
        if self.role not in (ROLE_PROVIDER, ROLE_CONSUMER):
            raise ValueError(f"role must be provider|consumer, got {self.role!r}")
        check_id(self.session_id, "session_id")
        check_id(self.device_id, "device_id")


@dataclass(frozen=True)
class SessionMetrics:
    """Whole-session energy accounting derived from the trace endpoints."""

    provider_loss_mah: float
    consumer_gain_mah: float
    energy_loss_mah: float
    duration_s: float
    terminal_reason: Reason | None = None


def record_tick(
    session: SessionState,
    tick_index: int,
    wall_time_s: float,
    *,
    provider_id: str,
    provider_battery: BatteryState,
    consumer_id: str,
    consumer_battery: BatteryState,
    cumulative_out_mah: float,
    cumulative_in_mah: float,
) -> tuple[MonitorRecord, MonitorRecord]:
    """Emit the synchronized provider/consumer record pair for one tick."""
    if session.state not in _RECORDABLE_PHASES:
        raise SessionNotActive(f"cannot record in state {session.state.value}")
    provider_record = MonitorRecord(
        tick_index=tick_index,
        wall_time_s=wall_time_s,
        session_id=session.session_id,
        device_id=provider_id,
        role=ROLE_PROVIDER,
        battery_level_pct=provider_battery.level_pct,
        battery_charge_mah=provider_battery.charge_mah,
        cumulative_transferred_mah=cumulative_out_mah,
    )
    consumer_record = MonitorRecord(
        tick_index=tick_index,
        wall_time_s=wall_time_s,
        session_id=session.session_id,
        device_id=consumer_id,
        role=ROLE_CONSUMER,
        battery_level_pct=consumer_battery.level_pct,
        battery_charge_mah=consumer_battery.charge_mah,
        cumulative_transferred_mah=cumulative_in_mah,
    )
    return provider_record, consumer_record


def align_traces(
    provider_records: Sequence[MonitorRecord],
    consumer_records: Sequence[MonitorRecord],
) -> list[tuple[MonitorRecord, MonitorRecord]]:
    """Pair records with equal tick_index; report any unpaired tick."""
    by_tick_provider = {r.tick_index: r for r in provider_records}
    by_tick_consumer = {r.tick_index: r for r in consumer_records}
    missing = sorted(set(by_tick_provider) ^ set(by_tick_consumer))
    if missing:
        raise MisalignedTraces(missing)
    return [
        (by_tick_provider[tick], by_tick_consumer[tick])
        for tick in sorted(by_tick_provider)
    ]


def compute_metrics(
    pairs: Sequence[tuple[MonitorRecord, MonitorRecord]],
    *,
    capacities: dict[str, float] | None = None,
    terminal_reason: Reason | None = None,
) -> SessionMetrics:
    """Metrics over an aligned series: endpoint deltas of both batteries.

    Records normally carry charge in mAh directly; pass ``capacities``
    (keyed by role) to derive charge from the percent column instead, for
    sources that only log levels.
    """
    if not pairs:
        raise EmptyTrace("metrics need at least one record pair")

    def charge(record: MonitorRecord) -> float:
        if capacities is not None:
            return record.battery_level_pct / 100.0 * capacities[record.role]
        return record.battery_charge_mah

    first_provider, first_consumer = pairs[0]
    last_provider, last_consumer = pairs[-1]
    provider_loss = charge(first_provider) - charge(last_provider)
    consumer_gain = charge(last_consumer) - charge(first_consumer)
    return SessionMetrics(
        provider_loss_mah=provider_loss,
        consumer_gain_mah=consumer_gain,
        energy_loss_mah=provider_loss - consumer_gain,
        duration_s=last_provider.wall_time_s - first_provider.wall_time_s,
        terminal_reason=terminal_reason,
    )


# --- trace CSV ----------------------------------------------------------------


def format_record(record: MonitorRecord) -> str:
    return ",".join(
        (
            str(record.tick_index),
            fmt_float(record.wall_time_s),
            record.session_id,
            record.device_id,
            record.role,
            fmt_float(record.battery_level_pct),
            fmt_float(record.battery_charge_mah),
            fmt_float(record.cumulative_transferred_mah),
        )
    )


def parse_record(row: str) -> MonitorRecord:
    parts = row.split(",")
    if len(parts) != 8:
        raise ValueError(f"expected 8 CSV fields, got {len(parts)}: {row!r}")
    return MonitorRecord(
        tick_index=int(parts[0]),
        wall_time_s=float(parts[1]),
        session_id=parts[2],
        device_id=parts[3],
        role=parts[4],
        battery_level_pct=float(parts[5]),
        battery_charge_mah=float(parts[6]),
        cumulative_transferred_mah=float(parts[7]),
    )


def trace_csv_text(pairs: Iterable[tuple[MonitorRecord, MonitorRecord]]) -> str:
    """Canonical CSV for a paired trace: provider row then consumer row per tick."""
    lines = [TRACE_HEADER]
    for provider_record, consumer_record in pairs:
        lines.append(format_record(provider_record))
        lines.append(format_record(consumer_record))
    return "\n".join(lines) + "\n"


def write_trace_csv(path: Path, pairs: Iterable[tuple[MonitorRecord, MonitorRecord]]) -> None:
    Path(path).write_bytes(trace_csv_text(pairs).encode("utf-8"))


def read_trace_csv(path: Path) -> list[MonitorRecord]:
    return records_from_csv_text(Path(path).read_text(encoding="utf-8"))


def records_from_csv_text(text: str) -> list[MonitorRecord]:
    lines = text.splitlines()
    if not lines or lines[0] != TRACE_HEADER:
        raise ValueError("trace CSV must start with the canonical header")
    return [parse_record(row) for row in lines[1:] if row]


def pairs_from_records(
    records: Sequence[MonitorRecord],
) -> list[tuple[MonitorRecord, MonitorRecord]]:
    """Rebuild the aligned pair series from a flat record list."""
    providers = [r for r in records if r.role == ROLE_PROVIDER]
    consumers = [r for r in records if r.role == ROLE_CONSUMER]
    return align_traces(providers, consumers)
