"""Capture-log file format.

One sighting per line, tab-separated: station id, unix timestamp, RPI hex,
AEM hex, RSSI in dBm. First line is the header ``#gap-lab-captures v1``.
Hex is lowercase everywhere; round-tripping through export/import is lossless.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterable, Iterator

from .crypto import AEM_LENGTH, RPI_LENGTH

CAPTURE_HEADER = "#gap-lab-captures v1"


class CaptureFormatError(ValueError):
    """Malformed capture log; message carries the file and line number."""


@dataclass(frozen=True)
class CaptureRecord:
    """One sniffed advertisement: where, when, what, how loud."""

    station_id: str
    timestamp: int
    rpi: bytes
    aem: bytes
    rssi: int

    def __post_init__(self):
        if len(self.rpi) != RPI_LENGTH:
            raise ValueError(f"RPI must be {RPI_LENGTH} bytes")
        if len(self.aem) != AEM_LENGTH:
            raise ValueError(f"AEM must be {AEM_LENGTH} bytes")
        if "\t" in self.station_id or "\n" in self.station_id or not self.station_id:
            raise ValueError("station id must be non-empty and tab/newline free")

    def to_line(self) -> str:
        return "\t".join([
            self.station_id,
            str(self.timestamp),
            self.rpi.hex(),
            self.aem.hex(),
            str(self.rssi),
        ])


def export_captures(records: Iterable[CaptureRecord], path) -> None:
    """Write records to ``path`` in the v1 capture format."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(CAPTURE_HEADER + "\n")
        for record in records:
            fh.write(record.to_line() + "\n")


def _parse_line(line: str, source: str, lineno: int) -> CaptureRecord:
    fields = line.split("\t")
    if len(fields) != 5:
        raise CaptureFormatError(
            f"{source}:{lineno}: expected 5 tab-separated fields, got {len(fields)}"
        )
    station_id, ts, rpi_hex, aem_hex, rssi = fields
    try:
        return CaptureRecord(
            station_id=station_id,
            timestamp=int(ts),
            rpi=bytes.fromhex(rpi_hex),
            aem=bytes.fromhex(aem_hex),
            rssi=int(rssi),
        )
    except ValueError as exc:
        raise CaptureFormatError(f"{source}:{lineno}: {exc}") from exc


def read_captures(path) -> list[CaptureRecord]:
    """Parse one capture-log file; malformed lines raise with their position."""
    source = os.fspath(path)
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n")
        if first != CAPTURE_HEADER:
            raise CaptureFormatError(f"{source}:1: missing header {CAPTURE_HEADER!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            records.append(_parse_line(line, source, lineno))
    return records


def read_capture_dir(directory) -> Iterator[CaptureRecord]:
    """All records from every ``*.captures`` file under ``directory``."""
    names = sorted(n for n in os.listdir(directory) if n.endswith(".captures"))
    for name in names:
        yield from read_captures(os.path.join(directory, name))
