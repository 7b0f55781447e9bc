"""Attacker-side analytics over published diagnosis keys.

Everything here consumes public data only: diagnosis bundles (downloadable by
anyone) and the attacker's own capture logs. Expanding the published TEKs
yields an exact-byte index of every RPI a diagnosed person broadcast; matching
that index against multi-station logs reconstructs visit timelines, routes,
co-location pairs, and — via route similarity — candidate identities spanning
several days of rotating keys.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Iterable, Sequence

from .captures import CaptureRecord
from .crypto import INTERVAL_SECONDS, TemporaryExposureKey, expand_tek
from .keyserver import DiagnosisBundle
from .matcher import within_tolerance

MERGE_GAP_S = 600
MIN_OVERLAP_S = 60
TIME_OF_DAY_WINDOW_S = 4 * 3600


@dataclass(frozen=True)
class Subject:
    """A TEK-day identity: all the profiler can name without cross-day linking."""

    tek: TemporaryExposureKey

    @property
    def id(self) -> str:
        return self.tek.key.hex()

    @property
    def day(self) -> str:
        start = self.tek.rolling_start * INTERVAL_SECONDS
        return datetime.fromtimestamp(start, tz=timezone.utc).date().isoformat()


@dataclass(frozen=True)
class AttributedSighting:
    station_id: str
    timestamp: int
    rssi: int
    interval: int


@dataclass(frozen=True)
class VisitSegment:
    """One reconstructed stay: subject seen at a station from first to last."""

    subject: Subject
    station_id: str
    first_seen: int
    last_seen: int
    sighting_count: int

    @property
    def duration_s(self) -> int:
        return self.last_seen - self.first_seen


@dataclass(frozen=True)
class SocialEdge:
    subject_a: Subject
    subject_b: Subject
    stations: frozenset[str]
    overlap_s: int


@dataclass(frozen=True)
class SubjectLink:
    subject_a: Subject
    subject_b: Subject
    similarity: float


class IndexCollision(RuntimeError):
    """Two distinct TEKs expanded to the same RPI — astronomically unlikely."""


def build_index(bundles: Iterable[DiagnosisBundle]) -> dict[bytes, tuple[Subject, int]]:
    """RPI -> (subject, interval) over every TEK in the published bundles."""
    index: dict[bytes, tuple[Subject, int]] = {}
    for bundle in bundles:
        for tek in bundle.teks:
            subject = Subject(tek)
            for rpi in expand_tek(tek):
                clash = index.get(rpi.value)
                if clash is not None and clash[0].tek is not tek:
                    raise IndexCollision(
                        f"RPI {rpi.value.hex()} derived from two TEKs "
                        f"({clash[0].id} and {subject.id})")
                index[rpi.value] = (subject, rpi.interval)
    return index


def match_logs(index: dict[bytes, tuple[Subject, int]],
               records: Iterable[CaptureRecord]) -> dict[Subject, list[AttributedSighting]]:
    """Attribute capture records to diagnosed subjects.

    A record counts only when its RPI hits the index and its timestamp lies
    within the same +/- two-hour tolerance the official matcher applies;
    everything else stays anonymous noise and is discarded.
    """
    sightings: dict[Subject, list[AttributedSighting]] = {}
    for rec in records:
        hit = index.get(rec.rpi)
        if hit is None:
            continue
        subject, interval = hit
        if not within_tolerance(rec.timestamp, interval):
            continue
        sightings.setdefault(subject, []).append(
            AttributedSighting(rec.station_id, rec.timestamp, rec.rssi, interval))
    for lst in sightings.values():
        lst.sort(key=lambda s: (s.timestamp, s.station_id))
    return sightings


def build_timeline(subject: Subject, sightings: Sequence[AttributedSighting],
                   merge_gap_s: int = MERGE_GAP_S) -> list[VisitSegment]:
    """Merge chronological sightings into per-station visit segments."""
    segments: list[VisitSegment] = []
    run: list[AttributedSighting] = []
    for sighting in sorted(sightings, key=lambda s: (s.timestamp, s.station_id)):
        if run and (sighting.station_id != run[-1].station_id
                    or sighting.timestamp - run[-1].timestamp > merge_gap_s):
            segments.append(_segment(subject, run))
            run = []
        run.append(sighting)
    if run:
        segments.append(_segment(subject, run))
    return segments


def _segment(subject: Subject, run: Sequence[AttributedSighting]) -> VisitSegment:
    return VisitSegment(
        subject=subject,
        station_id=run[0].station_id,
        first_seen=run[0].timestamp,
        last_seen=run[-1].timestamp,
        sighting_count=len(run),
    )


def route(timeline: Sequence[VisitSegment]) -> list[str]:
    """Chronological station sequence of a timeline."""
    return [seg.station_id for seg in sorted(timeline, key=lambda s: s.first_seen)]


def _overlap(a: VisitSegment, b: VisitSegment) -> int:
    return max(0, min(a.last_seen, b.last_seen) - max(a.first_seen, b.first_seen))


def co_location(timelines: dict[Subject, list[VisitSegment]],
                min_overlap_s: int = MIN_OVERLAP_S) -> list[SocialEdge]:
    """Pairs of subjects whose segments overlap at shared stations.

    Overlap is summed per pair across all stations; pairs at or above the
    threshold become edges. Symmetric by construction.
    """
    subjects = sorted(timelines, key=lambda s: (s.day, s.id))
    edges = []
    for i, a in enumerate(subjects):
        for b in subjects[i + 1:]:
            total = 0
            stations = set()
            for seg_a in timelines[a]:
                for seg_b in timelines[b]:
                    if seg_a.station_id != seg_b.station_id:
                        continue
                    shared = _overlap(seg_a, seg_b)
                    if shared > 0:
                        total += shared
                        stations.add(seg_a.station_id)
            if total >= min_overlap_s and stations:
                edges.append(SocialEdge(a, b, frozenset(stations), total))
    edges.sort(key=lambda e: (-e.overlap_s, e.subject_a.id, e.subject_b.id))
    return edges


def _time_of_day(segment: VisitSegment) -> int:
    return segment.first_seen % 86400


def _route_similarity(a: Sequence[VisitSegment], b: Sequence[VisitSegment],
                      tod_window_s: int) -> float:
    """Longest-common-subsequence weight over station routes.

    A pair of segments contributes only when the stations match, scaled down
    linearly as their times of day drift apart; the best subsequence weight
    is normalized by the longer route's length.
    """
    if not a or not b:
        return 0.0
    rows, cols = len(a), len(b)
    table = [[0.0] * (cols + 1) for _ in range(rows + 1)]
    for i in range(1, rows + 1):
        for j in range(1, cols + 1):
            best = max(table[i - 1][j], table[i][j - 1])
            if a[i - 1].station_id == b[j - 1].station_id:
                drift = abs(_time_of_day(a[i - 1]) - _time_of_day(b[j - 1]))
                weight = max(0.0, 1.0 - drift / tod_window_s)
                best = max(best, table[i - 1][j - 1] + weight)
            table[i][j] = best
    return table[rows][cols] / max(rows, cols)


def cross_day_link(timelines: dict[Subject, list[VisitSegment]],
                   tod_window_s: int = TIME_OF_DAY_WINDOW_S) -> list[SubjectLink]:
    """Rank subject pairs from different days by route similarity.

    TEK rotation severs identities at midnight; similar day routes (the
    commute effect) stitch them back together. Pairs are returned sorted
    most-similar first.
    """
    subjects = sorted(timelines, key=lambda s: (s.day, s.id))
    links = []
    for i, a in enumerate(subjects):
        for b in subjects[i + 1:]:
            if a.day == b.day:
                continue
            sim = _route_similarity(
                sorted(timelines[a], key=lambda s: s.first_seen),
                sorted(timelines[b], key=lambda s: s.first_seen),
                tod_window_s,
            )
            links.append(SubjectLink(a, b, sim))
    links.sort(key=lambda l: (-l.similarity, l.subject_a.id, l.subject_b.id))
    return links


# --- whole-pipeline convenience and report emission ------------------------------

@dataclass
class ProfileReport:
    sightings: dict[Subject, list[AttributedSighting]]
    timelines: dict[Subject, list[VisitSegment]]
    routes: dict[Subject, list[str]]
    edges: list[SocialEdge]
    links: list[SubjectLink]

    def subjects(self) -> list[Subject]:
        return sorted(self.timelines, key=lambda s: (s.day, s.id))


def profile_captures(bundles: Iterable[DiagnosisBundle],
                     records: Iterable[CaptureRecord],
                     merge_gap_s: int = MERGE_GAP_S,
                     min_overlap_s: int = MIN_OVERLAP_S) -> ProfileReport:
    """Run the full pipeline: index, attribute, segment, relate, link."""
    index = build_index(bundles)
    sightings = match_logs(index, records)
    timelines = {
        subject: build_timeline(subject, subject_sightings, merge_gap_s)
        for subject, subject_sightings in sightings.items()
    }
    return ProfileReport(
        sightings=sightings,
        timelines=timelines,
        routes={subject: route(tl) for subject, tl in timelines.items()},
        edges=co_location(timelines, min_overlap_s),
        links=cross_day_link(timelines),
    )


REPORT_FILES = ("timeline.csv", "routes.txt", "social.dot", "plotdata.csv")


def emit_report(report: ProfileReport, out_dir) -> list[str]:
    """Write the four report artifacts; returns the paths written."""
    os.makedirs(out_dir, exist_ok=True)
    paths = [os.path.join(out_dir, name) for name in REPORT_FILES]
    timeline_path, routes_path, dot_path, plot_path = paths

    with open(timeline_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["subject", "day", "station", "first_seen", "last_seen", "sightings"])
        for subject in report.subjects():
            for seg in report.timelines[subject]:
                writer.writerow([
                    subject.id, subject.day, seg.station_id,
                    seg.first_seen, seg.last_seen, seg.sighting_count,
                ])

    with open(routes_path, "w", encoding="utf-8") as fh:
        for subject in report.subjects():
            stations = " -> ".join(report.routes[subject]) or "(no sightings)"
            fh.write(f"{subject.id} [{subject.day}]: {stations}\n")

    with open(dot_path, "w", encoding="utf-8") as fh:
        fh.write("graph colocation {\n")
        for edge in report.edges:
            stations = ",".join(sorted(edge.stations))
            fh.write(
                f'  "{edge.subject_a.id}" -- "{edge.subject_b.id}" '
                f'[label="{stations} ({edge.overlap_s}s)"];\n')
        fh.write("}\n")

    with open(plot_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject", "station", "timestamp", "rssi"])
        for subject in report.subjects():
            for sighting in report.sightings[subject]:
                writer.writerow([
                    subject.id, sighting.station_id,
                    sighting.timestamp, sighting.rssi,
                ])

    return paths
