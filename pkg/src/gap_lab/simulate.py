"""Deterministic scenario simulator.

Replaces field deployments with a desk-scale model: agents teleport between
stations along an itinerary, beacon at a fixed cadence, rotate their RPI
every 10-minute interval, and are sniffed by any station in range with a
Bernoulli receive probability. Identical seeds produce byte-identical logs,
and per-agent random streams make the output independent of agent
declaration order.
"""

from __future__ import annotations

import hashlib
import math
import random
from dataclasses import dataclass, replace

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from .ble import LinkBudget
from .captures import CaptureRecord
from .crypto import (
    DEFAULT_METADATA,
    INTERVALS_PER_DAY,
    TemporaryExposureKey,
    derive_aemk,
    encrypt_aem,
    expand_tek,
    generate_tek,
    interval_number,
)

BASE_RSSI_DBM = -60.0
RSSI_ATTENUATION_DB_PER_M = 2.0
RSSI_NOISE_SIGMA_DB = 2.0


class ScenarioError(ValueError):
    """Scenario definition violates an invariant (overlaps, duplicate ids, ...)."""


@dataclass(frozen=True)
class Station:
    id: str
    label: str = ""
    x: float = 0.0
    y: float = 0.0
    range_m: float = 6.0
    rx_fraction: float | None = None  # per-station duty-cycle override

    def distance_to(self, x: float, y: float) -> float:
        return math.hypot(self.x - x, self.y - y)


@dataclass(frozen=True)
class Visit:
    station_id: str
    arrive: int
    depart: int

    def __post_init__(self):
        if self.depart <= self.arrive:
            raise ScenarioError(
                f"visit to {self.station_id}: depart {self.depart} "
                f"not after arrive {self.arrive}"
            )


@dataclass(frozen=True)
class Agent:
    id: str
    itinerary: tuple[Visit, ...]
    transmission_risk_level: int = 0
    diagnosed: bool = False

    def __post_init__(self):
        ordered = sorted(self.itinerary, key=lambda v: v.arrive)
        for earlier, later in zip(ordered, ordered[1:]):
            if later.arrive < earlier.depart:
                raise ScenarioError(
                    f"agent {self.id}: visits to {earlier.station_id} and "
                    f"{later.station_id} overlap"
                )
        object.__setattr__(self, "itinerary", tuple(ordered))


@dataclass(frozen=True)
class Scenario:
    name: str
    stations: tuple[Station, ...]
    agents: tuple[Agent, ...]
    horizon: tuple[int, int]
    link: LinkBudget = LinkBudget()
    seed: int = 0

    def __post_init__(self):
        ids = [s.id for s in self.stations]
        if len(ids) != len(set(ids)):
            raise ScenarioError("station ids must be unique")
        agent_ids = [a.id for a in self.agents]
        if len(agent_ids) != len(set(agent_ids)):
            raise ScenarioError("agent ids must be unique")
        start, end = self.horizon
        if end <= start:
            raise ScenarioError("horizon end must be after start")

    def with_seed(self, seed: int) -> "Scenario":
        return replace(self, seed=seed)

    def station(self, station_id: str) -> Station | None:
        for s in self.stations:
            if s.id == station_id:
                return s
        return None


@dataclass
class SimulationResult:
    scenario: Scenario
    captures: dict[str, list[CaptureRecord]]  # station id -> sorted records
    tek_registry: dict[str, list[TemporaryExposureKey]]  # agent id -> per-day TEKs

    def all_captures(self) -> list[CaptureRecord]:
        merged = [rec for records in self.captures.values() for rec in records]
        merged.sort(key=_record_order)
        return merged

    def diagnosed_teks(self) -> dict[str, list[TemporaryExposureKey]]:
        return {
            agent.id: self.tek_registry[agent.id]
            for agent in self.scenario.agents
            if agent.diagnosed
        }


def _record_order(rec: CaptureRecord):
    return (rec.timestamp, rec.station_id, rec.rpi)


def _agent_rng(seed: int, agent_id: str) -> random.Random:
    digest = hashlib.sha256(f"gap-lab:{seed}:{agent_id}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def _day_starts(horizon: tuple[int, int]) -> list[int]:
    first = interval_number(horizon[0])
    last = interval_number(horizon[1] - 1)
    first_day = first - first % INTERVALS_PER_DAY
    days = []
    day = first_day
    while day <= last:
        days.append(day)
        day += INTERVALS_PER_DAY
    return days


def run_scenario(scenario: Scenario) -> SimulationResult:
    """Emit, propagate, and capture every beacon of the scenario.

    For each agent, a per-day TEK is drawn first from the agent's own seeded
    stream, then the itinerary is walked chronologically: one beacon every
    ``advertise_period_s``, heard by every station whose range covers the
    visited station's position, each capture gated by that station's receive
    probability.
    """
    day_starts = _day_starts(scenario.horizon)
    cadence = scenario.link.advertise_period_s
    captures: dict[str, list[CaptureRecord]] = {s.id: [] for s in scenario.stations}
    tek_registry: dict[str, list[TemporaryExposureKey]] = {}

    for agent in scenario.agents:
        rng = _agent_rng(scenario.seed, agent.id)
        teks = [
            generate_tek(rng, day, agent.transmission_risk_level)
            for day in day_starts
        ]
        tek_registry[agent.id] = teks
        schedule = _beacon_schedule(teks)

        for visit in agent.itinerary:
            _check_within_horizon(scenario, agent, visit)
            place = scenario.station(visit.station_id)
            receivers = []
            if place is not None:
                for station in scenario.stations:
                    if station.distance_to(place.x, place.y) <= station.range_m:
                        prob = station.rx_fraction
                        if prob is None:
                            prob = scenario.link.rx_fraction
                        distance = station.distance_to(place.x, place.y)
                        receivers.append((station, prob, distance))

            beat = 0
            while True:
                t = visit.arrive + beat * cadence
                if t >= visit.depart:
                    break
                beat += 1
                timestamp = int(t)
                payload = schedule.get(interval_number(timestamp))
                if payload is None:
                    continue
                rpi, aem = payload
                for station, prob, distance in receivers:
                    if prob < 1.0 and rng.random() >= prob:
                        continue
                    noise = rng.gauss(0.0, RSSI_NOISE_SIGMA_DB)
                    rssi = round(
                        BASE_RSSI_DBM - RSSI_ATTENUATION_DB_PER_M * distance + noise)
                    captures[station.id].append(
                        CaptureRecord(station.id, timestamp, rpi, aem, rssi))

    for records in captures.values():
        records.sort(key=_record_order)
    return SimulationResult(scenario, captures, tek_registry)


def _beacon_schedule(teks) -> dict[int, tuple[bytes, bytes]]:
    """interval -> (rpi, aem) for the whole TEK schedule of one device."""
    schedule = {}
    for tek in teks:
        aemk = derive_aemk(tek)
        for rpi in expand_tek(tek):
            schedule[rpi.interval] = (
                rpi.value, encrypt_aem(aemk, rpi, DEFAULT_METADATA))
    return schedule


def _check_within_horizon(scenario, agent, visit):
    start, end = scenario.horizon
    if visit.arrive < start or visit.depart > end:
        raise ScenarioError(
            f"agent {agent.id}: visit to {visit.station_id} leaves the "
            f"scenario horizon"
        )


# --- scenario definition files ------------------------------------------------

def load_scenario(path) -> Scenario:
    """Read a declarative scenario file (TOML; see scenarios/fig5.toml)."""
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    try:
        meta = raw["scenario"]
        link_raw = raw.get("link", {})
        link = LinkBudget(
            range_m=float(link_raw.get("range_m", 6.0)),
            rx_fraction=float(link_raw.get("rx_fraction", 0.043)),
            advertise_period_s=float(link_raw.get("advertise_period_s", 2.0)),
        )
        stations = tuple(
            Station(
                id=str(s["id"]),
                label=str(s.get("label", "")),
                x=float(s.get("x", 0.0)),
                y=float(s.get("y", 0.0)),
                range_m=float(s.get("range_m", link.range_m)),
                rx_fraction=(
                    float(s["rx_fraction"]) if "rx_fraction" in s else None),
            )
            for s in raw.get("stations", [])
        )
        agents = tuple(
            Agent(
                id=str(a["id"]),
                itinerary=tuple(
                    Visit(str(v[0]), int(v[1]), int(v[2])) for v in a["itinerary"]),
                transmission_risk_level=int(a.get("transmission_risk_level", 0)),
                diagnosed=bool(a.get("diagnosed", False)),
            )
            for a in raw.get("agents", [])
        )
        return Scenario(
            name=str(meta.get("name", "unnamed")),
            stations=stations,
            agents=agents,
            horizon=(int(meta["start"]), int(meta["end"])),
            link=link,
            seed=int(meta.get("seed", 0)),
        )
    except KeyError as exc:
        raise ScenarioError(f"scenario file {path}: missing key {exc}") from exc


# --- canned scenarios ----------------------------------------------------------

DAY_UTC_20200707 = 1594080000  # 00:00 UTC, interval 2656800 (144-aligned)


def _hm(day_start: int, hours: int, minutes: int = 0) -> int:
    return day_start + hours * 3600 + minutes * 60


def fig5_scenario() -> Scenario:
    """Six downtown sniffer stations and two app users on intersecting routes.

    User 1 tours A (residential), D (clinic/pharmacy), C (police station),
    B (city hall), E (pub), and returns to A; User 2 appears at B, joins
    User 1 at the pub E, and ends at F. They leave B at the same minute and
    arrive at and leave E together, so a co-location edge over {B, E} is the
    ground truth.
    """
    d = DAY_UTC_20200707
    labels = {
        "A": "Residential area",
        "B": "City hall",
        "C": "Police station",
        "D": "Clinic and pharmacy",
        "E": "Outside a pub",
        "F": "Outside a head shop and a sports gambling bookmaker",
    }
    stations = tuple(
        Station(id=sid, label=labels[sid], x=1000.0 * i, y=0.0,
                range_m=6.0, rx_fraction=1.0)
        for i, sid in enumerate("ABCDEF")
    )
    user1 = Agent(
        id="user1",
        diagnosed=True,
        itinerary=(
            Visit("A", _hm(d, 8, 0), _hm(d, 9, 0)),
            Visit("D", _hm(d, 9, 30), _hm(d, 10, 0)),
            Visit("C", _hm(d, 10, 30), _hm(d, 11, 0)),
            Visit("B", _hm(d, 11, 30), _hm(d, 12, 30)),
            Visit("E", _hm(d, 13, 0), _hm(d, 14, 0)),
            Visit("A", _hm(d, 15, 0), _hm(d, 16, 0)),
        ),
    )
    user2 = Agent(
        id="user2",
        diagnosed=True,
        itinerary=(
            Visit("B", _hm(d, 11, 40), _hm(d, 12, 30)),
            Visit("E", _hm(d, 13, 0), _hm(d, 14, 0)),
            Visit("F", _hm(d, 14, 30), _hm(d, 15, 0)),
        ),
    )
    return Scenario(
        name="fig5",
        stations=stations,
        agents=(user1, user2),
        horizon=(d, d + 86400),
        link=LinkBudget(range_m=6.0, rx_fraction=1.0, advertise_period_s=2.0),
        seed=7,
    )


def two_site_scenario() -> Scenario:
    """Two stations 40 km apart: a later-diagnosed carrier dwells at X for
    20 minutes while the victim waits at Y — no physical contact is possible."""
    d = DAY_UTC_20200707
    stations = (
        Station(id="X", label="Site X", x=0.0, y=0.0, range_m=6.0, rx_fraction=1.0),
        Station(id="Y", label="Site Y", x=40000.0, y=0.0, range_m=6.0, rx_fraction=1.0),
    )
    carrier = Agent(
        id="carrier",
        diagnosed=True,
        itinerary=(Visit("X", _hm(d, 10, 0), _hm(d, 10, 20)),),
    )
    victim = Agent(
        id="victim",
        itinerary=(Visit("Y", _hm(d, 10, 0), _hm(d, 14, 0)),),
    )
    return Scenario(
        name="two-site",
        stations=stations,
        agents=(carrier, victim),
        horizon=(d, d + 86400),
        link=LinkBudget(range_m=6.0, rx_fraction=1.0, advertise_period_s=2.0),
        seed=11,
    )


def commuter_scenario() -> Scenario:
    """Two days of traffic: a commuter repeats the same morning route A -> B
    while a second user wanders differently each day. Cross-day linking should
    pair the commuter's two TEK-day identities."""
    d1 = DAY_UTC_20200707
    d2 = d1 + 86400
    stations = tuple(
        Station(id=sid, label=f"Stop {sid}", x=500.0 * i, y=0.0,
                range_m=6.0, rx_fraction=1.0)
        for i, sid in enumerate("ABCD")
    )
    commuter = Agent(
        id="commuter",
        diagnosed=True,
        itinerary=(
            Visit("A", _hm(d1, 8, 0), _hm(d1, 8, 30)),
            Visit("B", _hm(d1, 9, 0), _hm(d1, 17, 0)),
            Visit("A", _hm(d2, 8, 0), _hm(d2, 8, 30)),
            Visit("B", _hm(d2, 9, 0), _hm(d2, 17, 0)),
        ),
    )
    wanderer = Agent(
        id="wanderer",
        diagnosed=True,
        itinerary=(
            Visit("C", _hm(d1, 10, 0), _hm(d1, 11, 0)),
            Visit("D", _hm(d1, 12, 0), _hm(d1, 13, 0)),
            Visit("D", _hm(d2, 9, 0), _hm(d2, 9, 30)),
            Visit("C", _hm(d2, 14, 0), _hm(d2, 15, 0)),
        ),
    )
    return Scenario(
        name="commuter",
        stations=stations,
        agents=(commuter, wanderer),
        horizon=(d1, d2 + 86400),
        link=LinkBudget(range_m=6.0, rx_fraction=1.0, advertise_period_s=2.0),
        seed=5,
    )


BUILTIN_SCENARIOS = {
    "fig5": fig5_scenario,
    "two-site": two_site_scenario,
    "commuter": commuter_scenario,
}


def resolve_scenario(name_or_path) -> Scenario:
    """A path to a scenario file, or the name of a canned scenario.

    Files win when they exist; otherwise the name (with any ``.toml`` suffix
    stripped) is looked up among the built-ins.
    """
    import os

    text = os.fspath(name_or_path)
    if os.path.exists(text):
        return load_scenario(text)
    key = text[:-5] if text.endswith(".toml") else text
    if key in BUILTIN_SCENARIOS:
        return BUILTIN_SCENARIOS[key]()
    raise ScenarioError(
        f"{text!r} is neither a scenario file nor one of "
        f"{sorted(BUILTIN_SCENARIOS)}"
    )
