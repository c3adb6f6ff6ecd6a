"""Synchronized recording, trace alignment, metrics and the trace CSV."""

import pytest

from energyshare.battery import BatteryState
from energyshare.monitor import (
    EmptyTrace,
    MisalignedTraces,
    MonitorConfig,
    MonitorRecord,
    ROLE_CONSUMER,
    ROLE_PROVIDER,
    SessionNotActive,
    TRACE_HEADER,
    align_traces,
    compute_metrics,
    pairs_from_records,
    read_trace_csv,
    record_tick,
    records_from_csv_text,
    trace_csv_text,
    write_trace_csv,
)
from energyshare.protocol import (
    Reason,
    RequestKind,
    SessionPhase,
    SessionState,
    make_request,
)


def charging_session(session_id="ses-r1"):
    request = make_request(RequestKind.DURATION, 1800.0, "c1", request_id="r1")
    return SessionState(
        session_id=session_id, request=request, provider_id="p1",
        state=SessionPhase.CHARGING,
    )


def mk_record(tick, role, charge=1000.0, capacity=2000.0, wall=None, session="ses-r1"):
    return MonitorRecord(
        tick_index=tick,
        wall_time_s=wall if wall is not None else float(tick),
        session_id=session,
        device_id="p1" if role == ROLE_PROVIDER else "c1",
        role=role,
        battery_level_pct=100.0 * charge / capacity,
        battery_charge_mah=charge,
        cumulative_transferred_mah=0.25 * tick,
    )


def test_monitor_config_requires_positive_interval():
    MonitorConfig(1.0)
    with pytest.raises(ValueError):
        MonitorConfig(0.0)


def test_record_tick_emits_synchronized_pair():
    session = charging_session()
    provider_record, consumer_record = record_tick(
        session, 0, 10.5,
        provider_id="p1", provider_battery=BatteryState(4080, 4080),
        consumer_id="c1", consumer_battery=BatteryState(2915, 1166),
        cumulative_out_mah=0.0, cumulative_in_mah=0.0,
    )
    assert provider_record.tick_index == consumer_record.tick_index == 0
    assert provider_record.wall_time_s == consumer_record.wall_time_s == 10.5
    assert provider_record.role == ROLE_PROVIDER
    assert consumer_record.role == ROLE_CONSUMER
    assert consumer_record.battery_level_pct == pytest.approx(40.0, rel=1e-12)


def test_record_tick_outside_charging_raises():
    request = make_request(RequestKind.DURATION, 60.0, "c1", request_id="r1")
    requested = SessionState(
        session_id="ses-r1", request=request, provider_id="p1",
        state=SessionPhase.REQUESTED,
    )
    with pytest.raises(SessionNotActive):
        record_tick(
            requested, 0, 0.0,
            provider_id="p1", provider_battery=BatteryState(10, 10),
            consumer_id="c1", consumer_battery=BatteryState(10, 1),
            cumulative_out_mah=0.0, cumulative_in_mah=0.0,
        )


def test_align_dense_traces():
    providers = [mk_record(t, ROLE_PROVIDER) for t in range(5)]
    consumers = [mk_record(t, ROLE_CONSUMER) for t in range(5)]
    pairs = align_traces(providers, consumers)
    assert len(pairs) == 5
    assert all(p.tick_index == c.tick_index for p, c in pairs)


def test_align_reports_missing_tick():
    providers = [mk_record(t, ROLE_PROVIDER) for t in range(10)]
    consumers = [mk_record(t, ROLE_CONSUMER) for t in range(10) if t != 7]
    with pytest.raises(MisalignedTraces) as err:
        align_traces(providers, consumers)
    assert err.value.missing_ticks == [7]


def test_align_empty_traces_is_empty():
    assert align_traces([], []) == []


def test_metrics_from_percent_and_capacities():
    capacities = {ROLE_PROVIDER: 4080.0, ROLE_CONSUMER: 2915.0}
    first = (
        mk_record(0, ROLE_PROVIDER, charge=4080.0, capacity=4080.0),
        mk_record(0, ROLE_CONSUMER, charge=0.40 * 2915.0, capacity=2915.0),
    )
    last = (
        mk_record(1800, ROLE_PROVIDER, charge=0.90 * 4080.0, capacity=4080.0),
        mk_record(1800, ROLE_CONSUMER, charge=0.52 * 2915.0, capacity=2915.0),
    )
    metrics = compute_metrics([first, last], capacities=capacities)
    assert metrics.provider_loss_mah == pytest.approx(408.0, rel=1e-9)
    assert metrics.consumer_gain_mah == pytest.approx(349.8, rel=1e-9)
    assert metrics.energy_loss_mah == pytest.approx(58.2, rel=1e-9)
    assert metrics.duration_s == 1800.0


def test_metrics_identity_when_nothing_changes():
    pair = (mk_record(0, ROLE_PROVIDER), mk_record(0, ROLE_CONSUMER))
    metrics = compute_metrics([pair])
    assert metrics.provider_loss_mah == 0.0
    assert metrics.consumer_gain_mah == 0.0
    assert metrics.energy_loss_mah == 0.0


def test_metrics_carry_terminal_reason():
    pair = (mk_record(0, ROLE_PROVIDER), mk_record(0, ROLE_CONSUMER))
    metrics = compute_metrics([pair], terminal_reason=Reason.DURATION_ELAPSED)
    assert metrics.terminal_reason is Reason.DURATION_ELAPSED


def test_metrics_reject_empty_series():
    with pytest.raises(EmptyTrace):
        compute_metrics([])


# --- CSV ------------------------------------------------------------------------


def sample_pairs(n=4):
    return [
        (mk_record(t, ROLE_PROVIDER, charge=4080.0 - 0.3 * t, capacity=4080.0),
         mk_record(t, ROLE_CONSUMER, charge=1166.0 + 0.27 * t, capacity=2915.0))
        for t in range(n)
    ]


def test_trace_csv_round_trip_is_bit_exact(tmp_path):
    pairs = sample_pairs()
    path = tmp_path / "trace.csv"
    write_trace_csv(path, pairs)
    text = path.read_text(encoding="utf-8")
    assert text.startswith(TRACE_HEADER + "\n")
    assert text.endswith("\n")
    records = read_trace_csv(path)
    assert pairs_from_records(records) == pairs
    assert trace_csv_text(pairs_from_records(records)) == text


def test_trace_csv_rejects_foreign_header():
    with pytest.raises(ValueError):
        records_from_csv_text("time,level\n0,40\n")


def test_record_validation():
    with pytest.raises(ValueError):
        mk_record(-1, ROLE_PROVIDER)
    with pytest.raises(ValueError):
        MonitorRecord(0, 0.0, "s", "d", "observer", 50.0, 10.0, 0.0)
