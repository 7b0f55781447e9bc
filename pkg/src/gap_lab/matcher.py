"""Client-side exposure detection.

Expands downloaded diagnosis keys, matches them against the device's local
sighting store, and computes a risk result. Two hard rules drive everything:
a sighting matches an RPI only if it was observed within the +/- two-hour
tolerance around the RPI's nominal 10-minute window (boundary closed at
exactly 120 minutes), and windows shorter than 10 minutes score zero.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Iterable, Sequence

from .captures import CaptureRecord
from .crypto import (
    AEM_LENGTH,
    INTERVAL_SECONDS,
    RPI_LENGTH,
    TemporaryExposureKey,
    decrypt_aem,
    derive_aemk,
    expand_tek,
)

TOLERANCE_S = 7200
MERGE_GAP_S = 600
MIN_WINDOW_S = 600
HIGH_RISK_THRESHOLD = 10.0


def interval_distance_s(timestamp: int, interval: int) -> int:
    """Seconds between a sighting and an interval's nominal window.

    Zero while the sighting falls inside [600*j, 600*(j+1)); otherwise the
    gap to the nearer edge. The tolerance check is symmetric — the source
    material does not pin down whether real implementations accept early
    sightings, so both sides are allowed (and both boundaries are closed).
    """
    start = interval * INTERVAL_SECONDS
    end = start + INTERVAL_SECONDS
    if timestamp < start:
        return start - timestamp
    if timestamp >= end:
        return timestamp - end
    return 0


def within_tolerance(timestamp: int, interval: int, tolerance_s: int = TOLERANCE_S) -> bool:
    return interval_distance_s(timestamp, interval) <= tolerance_s


@dataclass(frozen=True)
class Sighting:
    rpi: bytes
    aem: bytes
    timestamp: int
    rssi: int


class SightingStore:
    """Append-only record of advertisements one device has observed."""

    def __init__(self):
        self._records: list[Sighting] = []
        self._seen: set[tuple[bytes, int]] = set()

    def __len__(self):
        return len(self._records)

    def __iter__(self):
        return iter(self._records)

    def ingest(self, rpi: bytes, aem: bytes, timestamp: int, rssi: int) -> bool:
        """Append one sighting; exact (rpi, timestamp) repeats are dropped.

        Returns True if the record was stored. Timestamps must be monotone
        non-decreasing — a device's clock only moves forward.
        """
        if len(rpi) != RPI_LENGTH or len(aem) != AEM_LENGTH:
            raise ValueError("sighting must carry a 16-byte RPI and 4-byte AEM")
        if self._records and timestamp < self._records[-1].timestamp:
            raise ValueError(
                f"out-of-order timestamp {timestamp} < {self._records[-1].timestamp}"
            )
        key = (rpi, timestamp)
        if key in self._seen:
            return False
        self._seen.add(key)
        self._records.append(Sighting(rpi, aem, timestamp, rssi))
        return True

    @classmethod
    def from_capture_records(cls, records: Iterable[CaptureRecord]) -> "SightingStore":
        """Treat a capture log as the device's own observation history."""
        store = cls()
        for rec in sorted(records, key=lambda r: r.timestamp):
            store.ingest(rec.rpi, rec.aem, rec.timestamp, rec.rssi)
        return store


@dataclass
class ExposureWindow:
    """One coalesced run of sightings attributable to a single diagnosed TEK."""

    tek: TemporaryExposureKey
    day: str
    first_match: int
    last_match: int
    matched_count: int
    min_rssi: int
    max_rssi: int
    # decrypted broadcast metadata: reported alongside the window but never
    # weighted into the default score
    tx_power_dbm: int | None = None
    attenuation_db: float | None = None

    @property
    def duration_s(self) -> int:
        return self.last_match - self.first_match

    def score_contribution(self) -> float:
        """Duration in minutes weighted by transmission risk; 0 under 10 min.

        Risk level 0 means "unknown" and is treated as the lowest positive
        weight so that long encounters still register.
        """
        if self.duration_s < MIN_WINDOW_S:
            return 0.0
        weight = max(self.tek.transmission_risk_level, 1)
        return (self.duration_s / 60.0) * weight


@dataclass
class RiskResult:
    windows: list[ExposureWindow]
    score: float
    high_risk: bool


def _day_of(tek: TemporaryExposureKey) -> str:
    start = tek.rolling_start * INTERVAL_SECONDS
    return datetime.fromtimestamp(start, tz=timezone.utc).date().isoformat()


def match(store: SightingStore, teks: Sequence[TemporaryExposureKey],
          tolerance_s: int = TOLERANCE_S,
          merge_gap_s: int = MERGE_GAP_S) -> list[ExposureWindow]:
    """Find sightings explained by diagnosed TEKs and coalesce them.

    A sighting (rpi, t) matches TEK k iff rpi is one of k's expanded RPIs at
    some interval j and t lies within ``tolerance_s`` of j's nominal window.
    Matched sightings of one TEK merge into a window while consecutive gaps
    stay within ``merge_gap_s``.
    """
    index: dict[bytes, tuple[int, int]] = {}
    for tek_idx, tek in enumerate(teks):
        for rpi in expand_tek(tek):
            index[rpi.value] = (tek_idx, rpi.interval)

    matched: dict[int, list[Sighting]] = {}
    for sighting in store:
        hit = index.get(sighting.rpi)
        if hit is None:
            continue
        tek_idx, interval = hit
        if within_tolerance(sighting.timestamp, interval, tolerance_s):
            matched.setdefault(tek_idx, []).append(sighting)

    windows: list[ExposureWindow] = []
    for tek_idx in sorted(matched):
        tek = teks[tek_idx]
        run: list[Sighting] = []
        for sighting in sorted(matched[tek_idx], key=lambda s: s.timestamp):
            if run and sighting.timestamp - run[-1].timestamp > merge_gap_s:
                windows.append(_window_from_run(tek, run))
                run = []
            run.append(sighting)
        if run:
            windows.append(_window_from_run(tek, run))
    windows.sort(key=lambda w: (w.first_match, w.tek.key))
    return windows


def _window_from_run(tek: TemporaryExposureKey, run: list[Sighting]) -> ExposureWindow:
    mean_rssi = sum(s.rssi for s in run) / len(run)
    metadata = decrypt_aem(derive_aemk(tek), run[0].rpi, run[0].aem)
    tx_power = int.from_bytes(metadata[1:2], "big", signed=True)
    return ExposureWindow(
        tek=tek,
        day=_day_of(tek),
        first_match=run[0].timestamp,
        last_match=run[-1].timestamp,
        matched_count=len(run),
        min_rssi=min(s.rssi for s in run),
        max_rssi=max(s.rssi for s in run),
        tx_power_dbm=tx_power,
        attenuation_db=tx_power - mean_rssi,
    )


def score(windows: Sequence[ExposureWindow],
          high_risk_threshold: float = HIGH_RISK_THRESHOLD) -> RiskResult:
    """Total the per-window contributions and flag high risk at the threshold."""
    total = sum(w.score_contribution() for w in windows)
    return RiskResult(
        windows=list(windows),
        score=total,
        high_risk=total >= high_risk_threshold,
    )


def write_windows_csv(windows: Sequence[ExposureWindow], path) -> None:
    """Emit windows as CSV: tek_hex, day, first, last, count, duration_s, score."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["tek_hex", "day", "first", "last", "count", "duration_s", "score"])
        for w in windows:
            writer.writerow([
                w.tek.key.hex(), w.day, w.first_match, w.last_match,
                w.matched_count, w.duration_s, f"{w.score_contribution():.2f}",
            ])
