"""Attack-feasibility arithmetic.

Closed-form calculators for sensing-station coverage, wormhole fleet sizing,
test-center observation rates, replay amplification, and targeted-attack
reach. Everything is computed in exact rationals; rounding happens only in
the presentation helpers so printed figures are reproducible to the digit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

from .ble import AirtimeModel, LinkBudget, effective_adverts_per_second, max_adverts_per_second, on_air_us

UPLOAD_WINDOW_DAYS = 14
RPI_VALIDITY_MIN = 10
REPLAY_WINDOW_MIN = 120


def _exact(x) -> Fraction:
    """Decimal-faithful conversion: 0.043 means 43/1000, not the float bits."""
    return x if isinstance(x, Fraction) else Fraction(str(x))


def round_half_up(x, ndigits: int = 0) -> Fraction:
    scale = Fraction(10) ** ndigits
    return Fraction(math.floor(_exact(x) * scale + Fraction(1, 2)), 1) / scale


def fmt(x, ndigits: int = 2) -> str:
    """Fixed-point decimal string, rounded half-up."""
    scaled = int(round_half_up(x, ndigits) * 10**ndigits)
    text = str(abs(scaled)).rjust(ndigits + 1, "0")
    sign = "-" if scaled < 0 else ""
    if ndigits == 0:
        return sign + text
    return f"{sign}{text[:-ndigits]}.{text[-ndigits:]}"


def parse_duration(text: str) -> int:
    """``hh:mm:ss`` or ``mm:ss`` to seconds."""
    parts = text.split(":")
    if not 2 <= len(parts) <= 3 or not all(p.isdigit() for p in parts):
        raise ValueError(f"duration must be mm:ss or hh:mm:ss, got {text!r}")
    parts = [int(p) for p in parts]
    if len(parts) == 2:
        parts = [0] + parts
    h, m, s = parts
    return h * 3600 + m * 60 + s


@dataclass(frozen=True)
class EpidemicParams:
    """Population-level inputs driving how often a captured RPI turns positive."""

    incidence_per_100k_week: Fraction
    positive_test_rate: Fraction = Fraction(0)
    upload_share: Fraction = Fraction(0)

    def __post_init__(self):
        object.__setattr__(
            self, "incidence_per_100k_week", _exact(self.incidence_per_100k_week))
        object.__setattr__(self, "positive_test_rate", _exact(self.positive_test_rate))
        object.__setattr__(self, "upload_share", _exact(self.upload_share))
        if self.incidence_per_100k_week < 0:
            raise ValueError("incidence must be non-negative")
        for name in ("positive_test_rate", "upload_share"):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise ValueError(f"{name} must be a fraction in [0, 1]")


@dataclass(frozen=True)
class CollectionParams:
    """Measured sniffer yield and the replay-timing constants."""

    unique_rpis_per_min: Fraction
    avg_rpi_validity_min: Fraction = Fraction(RPI_VALIDITY_MIN, 2)
    replay_window_min: Fraction = Fraction(REPLAY_WINDOW_MIN)

    def __post_init__(self):
        for name in ("unique_rpis_per_min", "avg_rpi_validity_min",
                     "replay_window_min"):
            object.__setattr__(self, name, _exact(getattr(self, name)))
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class CoveragePlan:
    """Sensing stations per transport category, as (low, high) estimates."""

    categories: tuple[tuple[str, int, int], ...]

    def __post_init__(self):
        for name, lo, hi in self.categories:
            if lo < 0 or hi < lo:
                raise ValueError(f"{name}: need 0 <= low <= high, got {lo}..{hi}")


PAPER_COVERAGE_PLAN = CoveragePlan(categories=(
    ("Trams", 25, 25),
    ("Buses", 60, 80),
    ("Railways", 60, 60),
    ("Cars", 200, 250),
    ("Pedestrians", 50, 50),
))


def collection_rate(unique_rpis: int, duration_s: int) -> Fraction:
    """Unique RPIs per minute of sniffing."""
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    if unique_rpis < 0:
        raise ValueError("count must be non-negative")
    return Fraction(unique_rpis * 60, duration_s)


def collection_rate_printed(unique_rpis: int, duration_s: int) -> str:
    """Per-minute rate as printed in the source measurements.

    The published figures (21.26 for 549 RPIs in 25:49, 30.43 for 142 in
    4:40) are not reproducible from one half-up rounding of the per-minute
    value; they follow from rounding the per-second rate to 4 decimals
    first. That two-stage presentation is reproduced here.
    """
    per_second = round_half_up(Fraction(unique_rpis, duration_s), 4)
    return fmt(per_second * 60, 2)


def rpis_per_positive(p: EpidemicParams) -> Fraction:
    """How many captured RPIs it takes to net one diagnosed-and-uploaded RPI.

    Diagnosed users publish their last 14 days of keys, so twice the weekly
    incidence per person is the hit probability: 1 / (incidence/100k/7 * 14).
    """
    if p.incidence_per_100k_week <= 0:
        raise ValueError("incidence must be positive for this estimate")
    return Fraction(100000) / (2 * p.incidence_per_100k_week)


def wormhole_devices_needed(p: EpidemicParams,
                            c: CollectionParams) -> tuple[Fraction, int]:
    """Fleet size that keeps one positive RPI in the air at any moment.

    Each device collects ``unique_rpis_per_min`` and each captured RPI stays
    usable for about half its 10-minute validity; devices = RPIs-per-positive
    divided by that per-device coverage, rounded up (you cannot deploy a
    fraction of a device).
    """
    raw = rpis_per_positive(p) / (c.unique_rpis_per_min * c.avg_rpi_validity_min)
    return raw, math.ceil(raw)


def screening_center(p: EpidemicParams, tests_per_hour) -> tuple[Fraction, Fraction]:
    """(infected observed per hour, of which uploads per hour) at a test site."""
    tests = _exact(tests_per_hour)
    if tests < 0:
        raise ValueError("tests_per_hour must be non-negative")
    infected = tests * p.positive_test_rate
    return infected, infected * p.upload_share


def replay_exposures(uploads_per_hour, replay_window_min=REPLAY_WINDOW_MIN) -> Fraction:
    """Positive identities simultaneously replayable from hourly uploads.

    Every captured positive RPI stays replayable for the tolerance window,
    so uploads/hour / 60 * window gives the steady-state count a victim sees.
    """
    uploads = _exact(uploads_per_hour)
    window = _exact(replay_window_min)
    if uploads < 0 or window < 0:
        raise ValueError("inputs must be non-negative")
    return uploads / 60 * window


def targeted_reach(rate_per_min, hours_per_day=12, days=UPLOAD_WINDOW_DAYS) -> tuple[Fraction, int]:
    """(devices reached per hour, total registered positive sightings).

    One publishing wormhole device reaches rate*60 devices per hour; over
    the exposure-relevant days (daytime hours only) the whole-number hourly
    reach multiplies out to the campaign total.
    """
    rate = _exact(rate_per_min)
    if rate <= 0 or hours_per_day <= 0 or days <= 0:
        raise ValueError("inputs must be positive")
    per_hour = rate * 60
    return per_hour, math.floor(per_hour) * days * hours_per_day


def coverage_total(plan: CoveragePlan) -> tuple[int, int]:
    """Component-wise sum of the per-category station estimates."""
    lo = sum(c[1] for c in plan.categories)
    hi = sum(c[2] for c in plan.categories)
    return lo, hi


# --- labeled derivation chains (CLI output, pinned by tests) ----------------------

def chain_airtime(model: AirtimeModel = AirtimeModel(),
                  budget: LinkBudget = LinkBudget()) -> list[tuple[str, str]]:
    """Service payload -> advertisement -> PDU -> on-air -> packet rates."""
    airtime = on_air_us(model)
    theoretical = max_adverts_per_second(model)
    effective = effective_adverts_per_second(model, budget)
    rx_pct = _exact(budget.rx_fraction) * 100
    return [
        ("service payload (bytes)", str(model.payload_bytes)),
        ("advertisement (bytes)", str(model.advertisement_bytes)),
        ("packet data unit (bytes)", str(model.pdu_bytes)),
        ("on-air time (us)", fmt(airtime, 0) if airtime.denominator == 1 else fmt(airtime, 2)),
        ("theoretical packets/s", str(math.floor(theoretical))),
        ("received fraction (%)", fmt(rx_pct, 1)),
        ("effective adverts/s", fmt(effective, 0)),
    ]


def chain_collection(unique_rpis: int, duration_s: int) -> list[tuple[str, str]]:
    return [
        ("unique RPIs", str(unique_rpis)),
        ("duration (s)", str(duration_s)),
        ("collected per minute", collection_rate_printed(unique_rpis, duration_s)),
    ]


def chain_wormhole_devices(p: EpidemicParams, c: CollectionParams) -> list[tuple[str, str]]:
    per_positive = rpis_per_positive(p)
    raw, devices = wormhole_devices_needed(p, c)
    return [
        ("incidence per 100k/week", fmt(p.incidence_per_100k_week, 2)),
        ("RPIs per positive", fmt(per_positive, 0)),
        ("collection rate (RPIs/min/device)", fmt(c.unique_rpis_per_min, 2)),
        ("avg RPI validity (min)", fmt(c.avg_rpi_validity_min, 0)),
        ("devices (raw)", fmt(raw, 2)),
        ("devices (deployable)", str(devices)),
    ]


def chain_screening_center(p: EpidemicParams, tests_per_hour) -> list[tuple[str, str]]:
    infected, uploads = screening_center(p, tests_per_hour)
    return [
        ("tests per hour", fmt(tests_per_hour, 0)),
        ("positive test rate (%)", fmt(p.positive_test_rate * 100, 2)),
        ("upload share (%)", fmt(p.upload_share * 100, 2)),
        ("infected observed per hour", fmt(infected, 2)),
        ("uploads per hour", fmt(uploads, 2)),
    ]


def chain_replay(uploads_per_hour, replay_window_min=REPLAY_WINDOW_MIN) -> list[tuple[str, str]]:
    concurrent = replay_exposures(uploads_per_hour, replay_window_min)
    return [
        ("uploads per hour", fmt(uploads_per_hour, 2)),
        ("replay window (min)", fmt(replay_window_min, 0)),
        ("concurrent positive identities", fmt(concurrent, 2)),
    ]


def chain_targeted(rate_per_min, hours_per_day=12, days=UPLOAD_WINDOW_DAYS) -> list[tuple[str, str]]:
    per_hour, total = targeted_reach(rate_per_min, hours_per_day, days)
    return [
        ("broadcast rate (devices/min)", fmt(rate_per_min, 2)),
        ("devices reached per hour", fmt(per_hour, 1)),
        ("whole devices per hour", str(math.floor(per_hour))),
        ("hours per day", str(hours_per_day)),
        ("days", str(days)),
        ("registered positive RPIs", str(total)),
    ]


def chain_coverage(plan: CoveragePlan = PAPER_COVERAGE_PLAN) -> list[tuple[str, str]]:
    lines = [(name, str(lo) if lo == hi else f"{lo} - {hi}")
             for name, lo, hi in plan.categories]
    lo, hi = coverage_total(plan)
    lines.append(("Total", str(lo) if lo == hi else f"{lo} - {hi}"))
    return lines
