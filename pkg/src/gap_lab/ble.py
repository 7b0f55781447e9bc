"""BLE advertisement codec and airtime model for exposure-notification beacons.

The wire codec emits standard length-prefixed AD structures (a 16-bit Service
UUID list followed by Service Data carrying RPI || AEM), which sums to 28
bytes. The airtime model instead uses the published accounting for a full
beacon on air: 26-byte service payload, 39-byte advertisement, 47-byte packet
data unit. The two figures are not reconcilable byte-by-byte from public
material; the 26/39/47 constants are kept normative for throughput arithmetic
while the codec stays parseable.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .crypto import AEM_LENGTH, RPI_LENGTH

EXPOSURE_SERVICE_UUID = 0xFD6F
DP3T_SERVICE_UUID = 0xFD68  # prestandard frames carry this UUID instead

AD_TYPE_SERVICE_UUIDS_16 = 0x03
AD_TYPE_SERVICE_DATA_16 = 0x16

SERVICE_PAYLOAD_LENGTH = RPI_LENGTH + AEM_LENGTH  # 20


def hex_dump(data: bytes) -> str:
    """Colon-separated lowercase byte dump, the audit-log rendering of frames."""
    return ":".join(f"{b:02x}" for b in data)


class MalformedFrame(ValueError):
    """Advertising payload violates the AD structure grammar."""


class NotExposureService(ValueError):
    """Well-formed frame, but its service data belongs to a foreign service."""


@dataclass(frozen=True)
class Advertisement:
    """One beacon as broadcast on air: RPI, AEM, and the service it claims."""

    rpi: bytes
    aem: bytes
    service_uuid: int = EXPOSURE_SERVICE_UUID

    def __post_init__(self):
        if len(self.rpi) != RPI_LENGTH:
            raise ValueError(f"RPI must be {RPI_LENGTH} bytes, got {len(self.rpi)}")
        if len(self.aem) != AEM_LENGTH:
            raise ValueError(f"AEM must be {AEM_LENGTH} bytes, got {len(self.aem)}")
        if not 0 <= self.service_uuid <= 0xFFFF:
            raise ValueError("service UUID must be a 16-bit identifier")

    @property
    def service_data(self) -> bytes:
        return self.rpi + self.aem

    def hex_dump(self) -> str:
        """RPI || AEM as colon-separated bytes (93:86:be:...)."""
        return hex_dump(self.service_data)


def encode_advertisement(adv: Advertisement) -> bytes:
    """Serialize to AD structures: Service-UUID list, then Service Data."""
    uuid = adv.service_uuid.to_bytes(2, "little")
    service_uuids = bytes([3, AD_TYPE_SERVICE_UUIDS_16]) + uuid
    service_data = (
        bytes([1 + 2 + SERVICE_PAYLOAD_LENGTH, AD_TYPE_SERVICE_DATA_16])
        + uuid
        + adv.rpi
        + adv.aem
    )
    return service_uuids + service_data


def decode_advertisement(data: bytes, *, service_uuid: int | None = None) -> Advertisement:
    """Parse an advertising payload back into an Advertisement.

    Walks the AD structures, skipping any it does not recognize, and returns
    the first 16-bit service-data entry carrying a 20-byte exposure payload.
    ``service_uuid`` restricts acceptance to one service; by default both the
    standard and the prestandard UUID are accepted.
    """
    offset = 0
    seen_foreign = False
    while offset < len(data):
        length = data[offset]
        if length == 0:
            break
        structure = data[offset + 1:offset + 1 + length]
        if len(structure) != length:
            raise MalformedFrame(
                f"structure at offset {offset} declares {length} bytes, "
                f"only {len(structure)} present"
            )
        ad_type = structure[0]
        if ad_type == AD_TYPE_SERVICE_DATA_16 and len(structure) >= 3:
            uuid = int.from_bytes(structure[1:3], "little")
            payload = structure[3:]
            wanted = (uuid == service_uuid) if service_uuid is not None else (
                uuid in (EXPOSURE_SERVICE_UUID, DP3T_SERVICE_UUID))
            if wanted:
                if len(payload) != SERVICE_PAYLOAD_LENGTH:
                    raise MalformedFrame(
                        f"service data payload is {len(payload)} bytes, "
                        f"expected {SERVICE_PAYLOAD_LENGTH}"
                    )
                return Advertisement(
                    rpi=payload[:RPI_LENGTH],
                    aem=payload[RPI_LENGTH:],
                    service_uuid=uuid,
                )
            seen_foreign = True
        offset += 1 + length
    if seen_foreign:
        raise NotExposureService("frame carries service data for a foreign service")
    raise MalformedFrame("no exposure service data structure found")


@dataclass(frozen=True)
class AirtimeModel:
    """Published byte accounting of one beacon at the 1 Mbps PHY."""

    payload_bytes: int = 26
    advertisement_bytes: int = 39
    pdu_bytes: int = 47
    phy_rate: int = 1_000_000  # bits/s
    inter_frame_space_us: int = 150

    def __post_init__(self):
        if self.pdu_bytes != self.advertisement_bytes + 8:
            raise ValueError("PDU adds exactly 8 bytes of preamble/AA/CRC framing")
        if self.phy_rate <= 0:
            raise ValueError("phy_rate must be positive")


@dataclass(frozen=True)
class LinkBudget:
    """Receiver-side budget: range, received fraction, beacon cadence."""

    range_m: float = 6.0
    rx_fraction: float = 0.043
    advertise_period_s: float = 2.0

    def __post_init__(self):
        if not 0 < self.rx_fraction <= 1:
            raise ValueError("rx_fraction must be in (0, 1]")
        if self.advertise_period_s <= 0:
            raise ValueError("advertise_period_s must be positive")
        if self.range_m < 0:
            raise ValueError("range_m must be non-negative")


def _exact(x) -> Fraction:
    # Fraction(str(float)) keeps decimal inputs like 0.043 exact.
    return x if isinstance(x, Fraction) else Fraction(str(x))


def on_air_us(model: AirtimeModel) -> Fraction:
    """Microseconds one PDU occupies the channel (376 for 47 B at 1 Mbps)."""
    return Fraction(model.pdu_bytes * 8 * 10**6, model.phy_rate)


def max_adverts_per_second(model: AirtimeModel) -> Fraction:
    """Theoretical packet rate: 10^6 / (on-air time + inter-frame space)."""
    return Fraction(10**6) / (on_air_us(model) + model.inter_frame_space_us)


def effective_adverts_per_second(model: AirtimeModel, budget: LinkBudget) -> Fraction:
    """Theoretical rate scaled by the fraction a real receiver captures."""
    return max_adverts_per_second(model) * _exact(budget.rx_fraction)
