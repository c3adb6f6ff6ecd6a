"""Closest-provider selection with deterministic tie-breaking.

Providers advertise position and battery level; a consumer ranks the
available ones by Euclidean distance (ties broken by smallest id) and
walks the ranking on rejection until it is exhausted. Scripted providers
accept a request when their battery level clears a threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from .battery import Technology
from .errors import EnergyShareError
from .util import check_id

DEFAULT_ACCEPT_THRESHOLD_PCT = 30.0


class NoProviderAvailable(EnergyShareError):
    """No (remaining) provider can serve the request."""


@dataclass(frozen=True)
class ProviderAdvert:
    """A provider's discovery announcement inside the confined area."""

    provider_id: str
    position: tuple[float, float]
    battery_level_pct: float
    technology: Technology
    available: bool = True

    def __post_init__(self) -> None:
        check_id(self.provider_id, "provider_id")
        x, y = self.position
        if not (math.isfinite(x) and math.isfinite(y)):
            raise ValueError(f"position must be finite, got {self.position!r}")
        if not 0.0 <= self.battery_level_pct <= 100.0:
            raise ValueError(
                f"battery_level_pct must be in [0, 100], got {self.battery_level_pct!r}"
            )


def _distance(a: tuple[float, float], b: tuple[float, float]) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def rank_providers(
    consumer_position: tuple[float, float], adverts: Iterable[ProviderAdvert]
) -> list[str]:
    """Available providers ordered by (distance to consumer, provider_id)."""
    available = [a for a in adverts if a.available]
    available.sort(key=lambda a: (_distance(a.position, consumer_position), a.provider_id))
    return [a.provider_id for a in available]


def select_provider(
    consumer_position: tuple[float, float], adverts: Iterable[ProviderAdvert]
) -> str:
    """The closest available provider; raises NoProviderAvailable if none."""
    ranking = rank_providers(consumer_position, adverts)
    if not ranking:
        raise NoProviderAvailable("no available provider advertised")
    return ranking[0]


def next_after_reject(ranking: Sequence[str], rejected_so_far: Iterable[str]) -> str:
    """First ranked provider not yet rejected; raises when exhausted."""
    rejected = set(rejected_so_far)
    for provider_id in ranking:
        if provider_id not in rejected:
            return provider_id
    raise NoProviderAvailable("all ranked providers rejected the request")


def provider_accepts(
    battery_level_pct: float, threshold_pct: float = DEFAULT_ACCEPT_THRESHOLD_PCT
) -> bool:
    """Scripted provider accept rule: enough spare battery to share."""
    return battery_level_pct >= threshold_pct
