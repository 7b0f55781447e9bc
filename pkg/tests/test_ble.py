"""Advertisement codec and airtime model."""

import math
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gap_lab.ble import (
    Advertisement,
    AirtimeModel,
    DP3T_SERVICE_UUID,
    LinkBudget,
    MalformedFrame,
    NotExposureService,
    decode_advertisement,
    effective_adverts_per_second,
    encode_advertisement,
    max_adverts_per_second,
    on_air_us,
)

PAPER_RPI = bytes.fromhex("9386bead6a0212d6205c665db64ccfe4")
PAPER_AEM = bytes.fromhex("a4e4489c")


def test_round_trip():
    adv = Advertisement(rpi=PAPER_RPI, aem=PAPER_AEM)
    assert decode_advertisement(encode_advertisement(adv)) == adv


def test_encoded_frame_carries_contiguous_payload():
    # published full payload: 93:86:...:e4:a4:e4:48:9c
    frame = encode_advertisement(Advertisement(rpi=PAPER_RPI, aem=PAPER_AEM))
    assert PAPER_RPI + PAPER_AEM in frame


def test_encoded_structures_sum_to_28_and_model_accounts_26():
    # The codec's two AD structures total 4 + 24 = 28 bytes; the published
    # payload accounting (26) is kept as the airtime-model constant.
    frame = encode_advertisement(Advertisement(rpi=PAPER_RPI, aem=PAPER_AEM))
    assert len(frame) == 28
    assert AirtimeModel().payload_bytes == 26


def test_prestandard_uuid_round_trips():
    adv = Advertisement(rpi=PAPER_RPI, aem=PAPER_AEM, service_uuid=DP3T_SERVICE_UUID)
    decoded = decode_advertisement(encode_advertisement(adv))
    assert decoded.service_uuid == DP3T_SERVICE_UUID


def test_decode_skips_unknown_leading_structures():
    flags = bytes([2, 0x01, 0x1A])
    frame = flags + encode_advertisement(Advertisement(rpi=PAPER_RPI, aem=PAPER_AEM))
    assert decode_advertisement(frame).rpi == PAPER_RPI


def test_foreign_service_rejected():
    adv = Advertisement(rpi=PAPER_RPI, aem=PAPER_AEM, service_uuid=0x180F)
    with pytest.raises(NotExposureService):
        decode_advertisement(encode_advertisement(adv))


def test_truncated_frame_rejected():
    frame = encode_advertisement(Advertisement(rpi=PAPER_RPI, aem=PAPER_AEM))
    with pytest.raises(MalformedFrame):
        decode_advertisement(frame[:10])


def test_field_length_validation():
    with pytest.raises(ValueError):
        Advertisement(rpi=b"\x00" * 15, aem=PAPER_AEM)
    with pytest.raises(ValueError):
        Advertisement(rpi=PAPER_RPI, aem=b"\x00" * 5)


@settings(max_examples=300)
@given(data=st.binary(max_size=64))
def test_decoder_never_crashes_on_noise(data):
    try:
        decode_advertisement(data)
    except (MalformedFrame, NotExposureService):
        pass


@settings(max_examples=50)
@given(rpi=st.binary(min_size=16, max_size=16),
       aem=st.binary(min_size=4, max_size=4))
def test_round_trip_property(rpi, aem):
    adv = Advertisement(rpi=rpi, aem=aem)
    assert decode_advertisement(encode_advertisement(adv)) == adv


# --- airtime -----------------------------------------------------------------------

def test_published_airtime_chain():
    model = AirtimeModel()
    assert on_air_us(model) == 376
    rate = max_adverts_per_second(model)
    assert math.floor(rate) == 1901
    effective = effective_adverts_per_second(model, LinkBudget())
    assert round(float(effective)) == 82


def test_on_air_time_scales_with_phy_rate():
    assert on_air_us(AirtimeModel(phy_rate=2_000_000)) == 188


def test_zero_ifs_rate():
    model = AirtimeModel(inter_frame_space_us=0)
    assert math.floor(max_adverts_per_second(model)) == 2659


def test_halving_phy_rate_doubles_airtime_and_reduces_throughput():
    # Throughput falls, but by less than half: the inter-frame space is fixed.
    base = AirtimeModel()
    slow = AirtimeModel(phy_rate=500_000)
    assert on_air_us(slow) == 2 * on_air_us(base)
    assert max_adverts_per_second(slow) < max_adverts_per_second(base)
    assert max_adverts_per_second(slow) > max_adverts_per_second(base) / 2


def test_effective_rate_full_reception_equals_theoretical():
    model = AirtimeModel()
    budget = LinkBudget(rx_fraction=1.0)
    assert effective_adverts_per_second(model, budget) == max_adverts_per_second(model)


def test_rx_fraction_bounds():
    with pytest.raises(ValueError):
        LinkBudget(rx_fraction=0)
    with pytest.raises(ValueError):
        LinkBudget(rx_fraction=1.5)


def test_pdu_invariant_enforced():
    with pytest.raises(ValueError):
        AirtimeModel(advertisement_bytes=39, pdu_bytes=48)


def test_effective_rate_exact_fraction():
    effective = effective_adverts_per_second(AirtimeModel(), LinkBudget())
    assert effective == Fraction(10**6, 526) * Fraction(43, 1000)
