"""Scenario file parsing, defaults and validation."""

import pytest

from energyshare.battery import Technology
from energyshare.protocol import RequestKind
from energyshare.scenario import (
    ParseError,
    ValidationError,
    parse_scenario,
    parse_scenario_text,
)

MINIMAL = """
monitor.interval_s = 1
request.kind = duration
request.value = 1800
device.p1.role = provider
device.c1.role = consumer
"""


def test_minimal_file_fills_reference_defaults():
    scenario = parse_scenario_text(MINIMAL, run_id="minimal")
    assert scenario.run_id == "minimal"
    assert scenario.seed == 0
    assert scenario.clock_mode == "virtual"
    assert scenario.interval_s == 1.0
    assert scenario.request_kind is RequestKind.DURATION
    assert scenario.request_value == 1800.0
    assert scenario.technology is Technology.WIRELESS_DISTANCE
    assert scenario.tech_params.efficiency == 0.80
    assert scenario.tech_params.transfer_rate_ma == 1200.0
    assert scenario.tech_params.distance_m == 0.02
    provider = scenario.providers()[0]
    consumer = scenario.consumers()[0]
    assert provider.start_level_pct == 100.0
    assert provider.capacity_mah == 4080.0
    assert provider.baseline_ma == 40.0
    assert provider.accept_threshold_pct == 30.0
    assert consumer.start_level_pct == 40.0
    assert consumer.capacity_mah == 2915.0
    assert scenario.request_consumer_id == "c1"


def test_parse_from_file(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text(MINIMAL, encoding="utf-8")
    scenario = parse_scenario(path)
    assert scenario.run_id == "exp"


def test_overrides_applied():
    text = MINIMAL + """
scenario.seed = 9
technology.name = cable
technology.efficiency = 0.5
transport.latency_s = 0.1
device.c1.start_level_pct = 10
device.c1.position = 1.5, -2.0
"""
    scenario = parse_scenario_text(text)
    assert scenario.seed == 9
    assert scenario.technology is Technology.CABLE
    assert scenario.tech_params.efficiency == 0.5
    assert scenario.latency_s == 0.1
    consumer = scenario.consumers()[0]
    assert consumer.start_level_pct == 10.0
    assert consumer.position == (1.5, -2.0)


def test_out_of_range_start_level_rejected():
    with pytest.raises(ValidationError) as err:
        parse_scenario_text(MINIMAL + "device.c1.start_level_pct = 140\n")
    assert "start_level_pct" in str(err.value)


def test_missing_request_rejected():
    text = """
device.p1.role = provider
device.c1.role = consumer
"""
    with pytest.raises(ValidationError) as err:
        parse_scenario_text(text)
    assert "request.kind" in str(err.value)


def test_nonpositive_request_value_rejected():
    with pytest.raises(ValidationError):
        parse_scenario_text(MINIMAL.replace("request.value = 1800", "request.value = 0"))


def test_unknown_key_is_parse_error_with_line():
    with pytest.raises(ParseError) as err:
        parse_scenario_text("request.kindd = duration\n")
    assert err.value.line_no == 1


def test_missing_equals_is_parse_error():
    with pytest.raises(ParseError):
        parse_scenario_text("scenario.seed 42\n")


def test_duplicate_key_rejected():
    with pytest.raises(ParseError):
        parse_scenario_text("scenario.seed = 1\nscenario.seed = 2\n" + MINIMAL)


def test_non_numeric_value_is_parse_error():
    with pytest.raises(ParseError):
        parse_scenario_text(MINIMAL.replace("request.value = 1800", "request.value = lots"))


def test_bad_clock_mode_rejected():
    with pytest.raises(ValidationError):
        parse_scenario_text(MINIMAL + "scenario.clock = lunar\n")


def test_devices_required():
    with pytest.raises(ValidationError):
        parse_scenario_text("request.kind = duration\nrequest.value = 10\n")
    only_provider = """
request.kind = duration
request.value = 10
device.p1.role = provider
"""
    with pytest.raises(ValidationError):
        parse_scenario_text(only_provider)


def test_request_consumer_must_be_a_consumer():
    with pytest.raises(ValidationError):
        parse_scenario_text(MINIMAL + "request.consumer = p1\n")


def test_comments_and_blank_lines_ignored():
    text = "# a comment\n\n" + MINIMAL + "# trailing\n"
    scenario = parse_scenario_text(text)
    assert scenario.request_value == 1800.0


def test_bad_position_is_parse_error():
    with pytest.raises(ParseError):
        parse_scenario_text(MINIMAL + "device.c1.position = 1.0\n")


def test_drop_probability_range_checked():
    with pytest.raises(ValidationError):
        parse_scenario_text(MINIMAL + "transport.drop_prob = 1.5\n")
