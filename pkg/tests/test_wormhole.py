"""Relay attack: broker fan-out, dedup, expiry, and the full two-site run."""

import os
import socket
import struct
import time

import pytest

from gap_lab.ble import Advertisement, encode_advertisement
from gap_lab.wormhole import (
    Broker,
    BrokerLink,
    ProtocolError,
    WormholeMessage,
    encode_frame,
    read_frame,
    rebroadcast_frames,
    rebroadcast_times,
    run_end_to_end,
    sniff_messages,
)


def message(seq=0, origin="node-a", captured_at=1000.0, window=7200.0,
            payload=None) -> WormholeMessage:
    return WormholeMessage(
        payload=payload or os.urandom(20),
        captured_at=captured_at,
        expires_at=captured_at + window,
        origin_id=origin,
        seq=seq,
    )


@pytest.fixture
def broker():
    b = Broker()
    b.start()
    yield b
    b.stop()


# --- framing -----------------------------------------------------------------------

def test_frame_round_trip():
    m = message()
    framed = encode_frame(m.to_json())
    import io

    assert WormholeMessage.from_json(read_frame(io.BytesIO(framed))) == m


def test_oversized_frame_rejected():
    import io

    bogus = struct.pack(">I", 1 << 24) + b"x"
    with pytest.raises(ProtocolError):
        read_frame(io.BytesIO(bogus))


def test_message_expiry_must_follow_capture():
    with pytest.raises(ValueError):
        WormholeMessage(payload=os.urandom(20), captured_at=100.0,
                        expires_at=50.0, origin_id="a", seq=0)


# --- broker -------------------------------------------------------------------------

def test_fan_out_excludes_origin(broker):
    n1 = BrokerLink(broker.address, "node-1")
    n2 = BrokerLink(broker.address, "node-2")
    n3 = BrokerLink(broker.address, "node-3")
    try:
        m = message(origin="node-1")
        n1.publish(m)
        assert n2.wait_for(1)[0] == m
        assert n3.wait_for(1)[0] == m
        time.sleep(0.2)
        assert n1.received == []
    finally:
        for link in (n1, n2, n3):
            link.close()


def test_reconnect_no_duplicates(broker):
    n1 = BrokerLink(broker.address, "node-1")
    n2 = BrokerLink(broker.address, "node-2")
    try:
        first = message(seq=0, origin="node-1")
        n1.publish(first)
        n2.wait_for(1)
        n2.close()

        n2b = BrokerLink(broker.address, "node-2")
        try:
            second = message(seq=1, origin="node-1")
            n1.publish(second)
            got = n2b.wait_for(2)  # backlog replay + live message, deduped
            assert {m.key for m in got} == {("node-1", 0), ("node-1", 1)}
            time.sleep(0.2)
            assert len(n2b.received) == 2
        finally:
            n2b.close()
    finally:
        n1.close()
        n2.close()


def test_broker_republish_same_key_dropped(broker):
    n1 = BrokerLink(broker.address, "node-1")
    n2 = BrokerLink(broker.address, "node-2")
    try:
        m = message(seq=5, origin="node-1")
        n1.publish(m)
        n1.publish(m)
        n2.wait_for(1)
        time.sleep(0.2)
        assert len(n2.received) == 1
    finally:
        n1.close()
        n2.close()


def test_malformed_frame_drops_connection_but_broker_survives(broker):
    n2 = BrokerLink(broker.address, "node-2")
    try:
        with socket.create_connection(broker.address, timeout=5) as bad:
            bad.sendall(encode_frame({"hello": {"node_id": "node-bad"}}))
            bad.sendall(struct.pack(">I", 7) + b"not-jso")
            reply = read_frame(bad.makefile("rb"))
            assert reply is not None and "error" in reply

        n3 = BrokerLink(broker.address, "node-3")
        try:
            n3.publish(message(origin="node-3"))
            assert len(n2.wait_for(1)) == 1
        finally:
            n3.close()
    finally:
        n2.close()


def test_payload_bytes_preserved_end_to_end(broker):
    payload = os.urandom(20)
    n1 = BrokerLink(broker.address, "node-1")
    n2 = BrokerLink(broker.address, "node-2")
    try:
        n1.publish(message(payload=payload, origin="node-1"))
        assert n2.wait_for(1)[0].payload == payload
    finally:
        n1.close()
        n2.close()


# --- sniffer ------------------------------------------------------------------------

def frames_for(adv: Advertisement, times):
    raw = encode_advertisement(adv)
    return [(t, raw) for t in times]


def test_sniffer_wraps_and_stamps():
    adv = Advertisement(rpi=os.urandom(16), aem=os.urandom(4))
    messages = list(sniff_messages("node-x", frames_for(adv, [1000]), 7200))
    assert len(messages) == 1
    m = messages[0]
    assert m.payload == adv.service_data
    assert m.captured_at == 1000
    assert m.expires_at == 8200
    assert m.origin_id == "node-x"


def test_sniffer_dedups_within_validity():
    adv = Advertisement(rpi=os.urandom(16), aem=os.urandom(4))
    messages = list(sniff_messages("x", frames_for(adv, [1000, 1002, 1004]), 7200))
    assert len(messages) == 1
    # after expiry the same payload is published again
    messages = list(sniff_messages("x", frames_for(adv, [1000, 9000]), 7200))
    assert len(messages) == 2


def test_sniffer_skips_foreign_and_malformed():
    foreign = encode_advertisement(
        Advertisement(rpi=os.urandom(16), aem=os.urandom(4), service_uuid=0x180F))
    garbage = b"\x02\x01"
    assert list(sniff_messages("x", [(0, foreign), (1, garbage)], 7200)) == []


def test_sniffer_seq_monotone():
    advs = [Advertisement(rpi=os.urandom(16), aem=os.urandom(4)) for _ in range(3)]
    frames = [(i, encode_advertisement(a)) for i, a in enumerate(advs)]
    seqs = [m.seq for m in sniff_messages("x", frames, 7200)]
    assert seqs == [0, 1, 2]


# --- rebroadcast schedule --------------------------------------------------------------

def test_default_window_and_cadence_yield_3600_emissions():
    m = message(captured_at=0.0, window=7200.0)
    times = list(rebroadcast_times(m, start_at=0.0, cadence_s=2.0))
    assert len(times) == 3600
    assert times[0] == 0.0
    assert times[-1] == 7198.0


def test_expired_message_never_emitted():
    m = message(captured_at=0.0, window=7200.0)
    assert list(rebroadcast_times(m, start_at=7200.0)) == []
    assert list(rebroadcast_times(m, start_at=99999.0)) == []


def test_no_emission_at_or_after_expiry():
    m = message(captured_at=0.0, window=100.0)
    for start in (0.0, 13.7, 99.9):
        for t in rebroadcast_times(m, start_at=start, cadence_s=2.0):
            assert t < m.expires_at


def test_amplification_ratio_is_window_over_cadence():
    m = message(captured_at=0.0, window=7200.0)
    emissions = len(list(rebroadcast_times(m, 0.0, 2.0)))
    assert emissions == int(7200 / 2.0)  # one broker message, 3600 victim frames


def test_rebroadcast_frames_decode_back_to_capture():
    from gap_lab.ble import decode_advertisement

    m = message(captured_at=0.0, window=10.0)
    for _t, frame in rebroadcast_frames(m, 0.0, 2.0):
        adv = decode_advertisement(frame)
        assert adv.service_data == m.payload


def test_emitted_payloads_subset_of_captured():
    advs = [Advertisement(rpi=os.urandom(16), aem=os.urandom(4)) for _ in range(5)]
    frames = [(i * 3, encode_advertisement(a)) for i, a in enumerate(advs)]
    captured = {a.service_data for a in advs}
    for m in sniff_messages("x", frames, 7200):
        for _t, frame in rebroadcast_frames(m, m.captured_at, 600.0):
            from gap_lab.ble import decode_advertisement

            assert decode_advertisement(frame).service_data in captured


# --- node config and live replay loop ---------------------------------------------

def test_node_config_validation():
    from gap_lab.wormhole import NodeConfig

    config = NodeConfig(node_id="n1", broker=("127.0.0.1", 7575))
    assert config.sniffs and config.rebroadcasts
    with pytest.raises(ValueError):
        NodeConfig(node_id="n1", broker=("h", 1), role="listener")
    with pytest.raises(ValueError):
        NodeConfig(node_id="", broker=("h", 1))
    with pytest.raises(ValueError):
        NodeConfig(node_id="n1", broker=("h", 1), replay_cadence_s=0)


def test_node_logs_use_four_column_style(broker, caplog):
    import logging

    with caplog.at_level(logging.INFO, logger="gap_lab.wormhole"):
        n1 = BrokerLink(broker.address, "node-1")
        n2 = BrokerLink(broker.address, "node-2")
        try:
            n1.publish(message(origin="node-1"))
            n2.wait_for(1)
        finally:
            n1.close()
            n2.close()
    text = caplog.text
    assert "[wormhole-out] [INFO] [node-1]" in text
    assert "[wormhole-in ] [INFO] [node-2]" in text
    # payload rendered as colon-separated bytes
    assert any(line.count(":") >= 19 for line in text.splitlines())


def test_live_rebroadcast_loop_respects_expiry(broker):
    from gap_lab.wormhole import RebroadcastNode

    emitted = []
    receiver = BrokerLink(broker.address, "node-y")
    sender = BrokerLink(broker.address, "node-x")
    node = RebroadcastNode(receiver, emitted.append, cadence_s=0.05)
    try:
        now = time.time()
        live = message(origin="node-x", captured_at=now, window=0.6)
        sender.publish(live)
        node.start()
        time.sleep(1.2)  # past expiry
        count_at_expiry = len(emitted)
        assert count_at_expiry >= 1
        time.sleep(0.3)
        assert len(emitted) == count_at_expiry  # nothing after expires_at
    finally:
        node.stop()
        sender.close()
        receiver.close()


# --- end-to-end ---------------------------------------------------------------------

def test_end_to_end_attack_control_and_late_replay():
    attack = run_end_to_end(seed=11)
    assert attack.relayed_messages >= 1
    assert len(attack.windows) >= 1
    longest = max(w.duration_s for w in attack.windows)
    assert longest >= 600
    assert attack.score > 0
    assert attack.high_risk

    control = run_end_to_end(wormhole_enabled=False, seed=11)
    assert control.windows == []
    assert control.score == 0

    late = run_end_to_end(seed=11, replay_delay_s=3 * 3600,
                          replay_window_s=4 * 3600)
    assert late.injected_sightings > 0  # frames do reach the victim ...
    assert late.windows == []           # ... but the matcher rejects them all


def test_end_to_end_latency_bounded():
    report = run_end_to_end(seed=11, network_delay_s=0.02, use_tcp=False)
    assert report.relay_latencies_s
    assert all(lat == pytest.approx(0.02) for lat in report.relay_latencies_s)
