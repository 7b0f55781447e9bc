"""Exposure-notification key schedule.

Implements the Google/Apple derivation chain: a daily Temporary Exposure Key
(TEK, formerly "Daily Tracing Key") yields two purpose keys via HKDF-SHA256
(info strings ``EN-RPIK`` / ``EN-AEMK``, empty salt, 16 bytes), from which the
per-interval Rolling Proximity Identifiers and the Associated Encrypted
Metadata are produced:

    RPI(j)  = AES-128(RPIK, "EN-RPI" || 0x00*6 || uint32le(j))
    AEM(j)  = AES-128-CTR(AEMK, counter=RPI(j)) XOR metadata

where j counts 10-minute epochs since the Unix epoch. All functions here are
pure; ``generate_tek`` takes an injected entropy source so runs are
reproducible under a fixed seed.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass

from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

INTERVAL_SECONDS = 600
INTERVALS_PER_DAY = 144
TEK_LENGTH = 16
RPI_LENGTH = 16
AEM_LENGTH = 4

RPIK_INFO = b"EN-RPIK"
AEMK_INFO = b"EN-AEMK"
RPI_PADDING = b"EN-RPI" + b"\x00" * 6

# Nominal broadcast metadata: version 0x40, tx power 0 dBm, two reserved bytes.
DEFAULT_METADATA = b"\x40\x00\x00\x00"


def interval_number(unix_seconds) -> int:
    """10-minute epoch count since the Unix epoch (ENIntervalNumber)."""
    if unix_seconds < 0:
        raise ValueError(f"unix timestamp must be non-negative, got {unix_seconds}")
    return int(unix_seconds // INTERVAL_SECONDS)


def interval_start(interval: int) -> int:
    """Unix second at which the given interval begins."""
    return interval * INTERVAL_SECONDS


def day_start_interval(interval: int) -> int:
    """First interval of the UTC day containing ``interval``."""
    return interval - interval % INTERVALS_PER_DAY


@dataclass(frozen=True)
class TemporaryExposureKey:
    """Daily 16-byte secret; the unit of diagnosis publication."""

    key: bytes
    rolling_start: int
    rolling_period: int = INTERVALS_PER_DAY
    transmission_risk_level: int = 0

    def __post_init__(self):
        if len(self.key) != TEK_LENGTH:
            raise ValueError(f"TEK must be {TEK_LENGTH} bytes, got {len(self.key)}")
        if self.rolling_period <= 0:
            raise ValueError("rolling_period must be positive")
        if self.rolling_start < 0 or self.rolling_start % self.rolling_period:
            raise ValueError(
                f"rolling_start {self.rolling_start} is not aligned to the "
                f"rolling period of {self.rolling_period} intervals"
            )
        if not 0 <= self.transmission_risk_level <= 8:
            raise ValueError("transmission_risk_level must be in 0..8")

    @property
    def intervals(self) -> range:
        """Validity range [rolling_start, rolling_start + rolling_period)."""
        return range(self.rolling_start, self.rolling_start + self.rolling_period)

    def covers(self, interval: int) -> bool:
        return self.rolling_start <= interval < self.rolling_start + self.rolling_period


@dataclass(frozen=True)
class DerivedKey:
    """Purpose-bound 16-byte key derived from a TEK (RPIK or AEMK)."""

    purpose: str
    key: bytes

    def __post_init__(self):
        if self.purpose not in ("RPIK", "AEMK"):
            raise ValueError(f"unknown key purpose {self.purpose!r}")
        if len(self.key) != TEK_LENGTH:
            raise ValueError("derived keys are 16 bytes")


@dataclass(frozen=True)
class RollingProximityIdentifier:
    """16-byte pseudonym broadcast during one 10-minute interval."""

    value: bytes
    interval: int


def generate_tek(rng: random.Random, day_start: int,
                 transmission_risk_level: int = 0) -> TemporaryExposureKey:
    """Draw a fresh day-aligned TEK from the injected entropy source.

    Pass ``random.SystemRandom()`` for real use; a seeded ``random.Random``
    makes simulations reproducible.
    """
    if day_start % INTERVALS_PER_DAY:
        raise ValueError(
            f"day_start {day_start} is not aligned to {INTERVALS_PER_DAY} intervals"
        )
    return TemporaryExposureKey(
        key=rng.randbytes(TEK_LENGTH),
        rolling_start=day_start,
        transmission_risk_level=transmission_risk_level,
    )


def _hkdf16(ikm: bytes, info: bytes) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=16, salt=None, info=info).derive(ikm)


def derive_rpik(tek: TemporaryExposureKey) -> DerivedKey:
    """RPI key: HKDF-SHA256(TEK, salt=empty, info="EN-RPIK", 16)."""
    return DerivedKey("RPIK", _hkdf16(tek.key, RPIK_INFO))


def derive_aemk(tek: TemporaryExposureKey) -> DerivedKey:
    """Metadata key: HKDF-SHA256(TEK, salt=empty, info="EN-AEMK", 16)."""
    return DerivedKey("AEMK", _hkdf16(tek.key, AEMK_INFO))


def _padded_data(interval: int) -> bytes:
    return RPI_PADDING + struct.pack("<I", interval)


def derive_rpi(rpik: DerivedKey, interval: int) -> RollingProximityIdentifier:
    """Encrypt the padded interval block with AES-128 under the RPIK."""
    if rpik.purpose != "RPIK":
        raise ValueError(f"need an RPIK, got {rpik.purpose}")
    enc = Cipher(algorithms.AES(rpik.key), modes.ECB()).encryptor()
    return RollingProximityIdentifier(
        value=enc.update(_padded_data(interval)) + enc.finalize(),
        interval=interval,
    )


def _rpi_bytes(rpi) -> bytes:
    value = rpi.value if isinstance(rpi, RollingProximityIdentifier) else bytes(rpi)
    if len(value) != RPI_LENGTH:
        raise ValueError(f"RPI must be {RPI_LENGTH} bytes, got {len(value)}")
    return value


def encrypt_aem(aemk: DerivedKey, rpi, metadata: bytes) -> bytes:
    """AES-CTR over the 4 metadata bytes, initial counter block = the RPI."""
    if aemk.purpose != "AEMK":
        raise ValueError(f"need an AEMK, got {aemk.purpose}")
    if len(metadata) != AEM_LENGTH:
        raise ValueError(f"metadata must be {AEM_LENGTH} bytes")
    enc = Cipher(algorithms.AES(aemk.key), modes.CTR(_rpi_bytes(rpi))).encryptor()
    return enc.update(metadata) + enc.finalize()


def decrypt_aem(aemk: DerivedKey, rpi, aem: bytes) -> bytes:
    """Inverse of encrypt_aem (CTR mode is its own inverse)."""
    if len(aem) != AEM_LENGTH:
        raise ValueError(f"AEM must be {AEM_LENGTH} bytes")
    return encrypt_aem(aemk, rpi, aem)


def recover_metadata(tek: TemporaryExposureKey, rpi, aem: bytes) -> bytes:
    """Metadata plaintext behind a published (TEK, RPI, AEM) triple.

    Anyone holding a diagnosed TEK can decrypt the metadata of every
    advertisement that key produced; this is the oracle used to pin the
    broadcast metadata of captured or published beacons.
    """
    return decrypt_aem(derive_aemk(tek), rpi, aem)


def expand_tek(tek: TemporaryExposureKey) -> list[RollingProximityIdentifier]:
    """All RPIs of a TEK, ordered by interval.

    Batches the rolling_period padded blocks into a single AES-ECB call, so
    expanding even tens of thousands of keys stays cheap.
    """
    rpik = derive_rpik(tek)
    blocks = b"".join(_padded_data(j) for j in tek.intervals)
    enc = Cipher(algorithms.AES(rpik.key), modes.ECB()).encryptor()
    stream = enc.update(blocks) + enc.finalize()
    return [
        RollingProximityIdentifier(
            value=stream[k * RPI_LENGTH:(k + 1) * RPI_LENGTH],
            interval=tek.rolling_start + k,
        )
        for k in range(tek.rolling_period)
    ]
