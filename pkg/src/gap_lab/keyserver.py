"""Central diagnosis-key service.

Uploads are gated by single-use TANs issued against an admin credential;
accepted bundles (up to 14 day-aligned TEKs, none older than 14 days at
submission) are persisted to an append-only event log and served back as an
Ed25519-signed aggregate. Retention is 14 days, enforced by purge().

Wire protocol: newline-delimited JSON over TCP, requests shaped
``{"op": ..., "payload": {...}}`` and responses ``{"ok": true, "payload"}``
or ``{"ok": false, "error", "message"}``.
"""

from __future__ import annotations

import json
import os
import secrets
import socket
import socketserver
import threading
import time
from dataclasses import dataclass

from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .crypto import INTERVAL_SECONDS, TemporaryExposureKey

MAX_BUNDLE_TEKS = 14
RETENTION_DAYS = 14
RETENTION_S = RETENTION_DAYS * 86400


class KeyServerError(Exception):
    """Base class; subclass names double as wire error codes."""


class Unauthorized(KeyServerError):
    pass


class InvalidTan(KeyServerError):
    pass


class ReplayedTan(KeyServerError):
    pass


class MalformedBundle(KeyServerError):
    pass


# --- JSON shapes ----------------------------------------------------------------

def tek_to_json(tek: TemporaryExposureKey) -> dict:
    return {
        "key": tek.key.hex(),
        "rolling_start": tek.rolling_start,
        "rolling_period": tek.rolling_period,
        "transmission_risk_level": tek.transmission_risk_level,
    }


def tek_from_json(obj: dict) -> TemporaryExposureKey:
    try:
        return TemporaryExposureKey(
            key=bytes.fromhex(obj["key"]),
            rolling_start=int(obj["rolling_start"]),
            rolling_period=int(obj.get("rolling_period", 144)),
            transmission_risk_level=int(obj.get("transmission_risk_level", 0)),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise MalformedBundle(f"bad TEK entry: {exc}") from exc


@dataclass(frozen=True)
class DiagnosisBundle:
    """The signed unit of publication: one diagnosed user's recent TEKs."""

    teks: tuple[TemporaryExposureKey, ...]
    submitted_at: int

    def validate(self) -> None:
        if not self.teks:
            raise MalformedBundle("bundle contains no TEKs")
        if len(self.teks) > MAX_BUNDLE_TEKS:
            raise MalformedBundle(
                f"bundle carries {len(self.teks)} TEKs, limit is {MAX_BUNDLE_TEKS}")
        days = [t.rolling_start for t in self.teks]
        if len(days) != len(set(days)):
            raise MalformedBundle("bundle TEKs must cover mutually distinct days")
        for tek in self.teks:
            start_s = tek.rolling_start * INTERVAL_SECONDS
            if start_s > self.submitted_at:
                raise MalformedBundle(
                    f"TEK day start {start_s} is in the submitter's future")
            if start_s < self.submitted_at - RETENTION_S:
                raise MalformedBundle(
                    f"TEK day start {start_s} is older than {RETENTION_DAYS} days "
                    f"at submission time {self.submitted_at}")

    def to_json(self) -> dict:
        return {
            "submitted_at": self.submitted_at,
            "teks": [tek_to_json(t) for t in self.teks],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DiagnosisBundle":
        try:
            teks = tuple(tek_from_json(t) for t in obj["teks"])
            submitted_at = int(obj["submitted_at"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedBundle(f"bad bundle: {exc}") from exc
        return cls(teks=teks, submitted_at=submitted_at)


def write_bundles(bundles, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"bundles": [b.to_json() for b in bundles]}, fh, indent=2)
        fh.write("\n")


def load_bundles(path) -> list[DiagnosisBundle]:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    return [DiagnosisBundle.from_json(b) for b in raw["bundles"]]


def bundle_teks(bundles) -> list[TemporaryExposureKey]:
    return [tek for bundle in bundles for tek in bundle.teks]


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


# --- server core ----------------------------------------------------------------

@dataclass
class Tan:
    token: str
    issued_at: int
    used: bool = False


class KeyServer:
    """In-process diagnosis service; the TCP front-end is a thin wrapper.

    Mutations are serialized through one lock; reads take a snapshot under
    the same lock, so concurrent clients always see consistent aggregates.
    """

    def __init__(self, admin_credential: str, store_path=None,
                 signing_key: Ed25519PrivateKey | None = None,
                 clock=time.time):
        self._admin = admin_credential
        self._clock = clock
        self._lock = threading.Lock()
        self._tans: dict[str, Tan] = {}
        self._bundles: list[DiagnosisBundle] = []
        self._store_path = store_path
        self._signing_key = signing_key or Ed25519PrivateKey.generate()
        if store_path and os.path.exists(store_path):
            self._replay_store(store_path)

    # -- persistence (append-only events, compacted on purge) --

    def _replay_store(self, path) -> None:
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                event = json.loads(line)
                kind = event["event"]
                if kind == "tan":
                    tan = Tan(event["token"], event["issued_at"], event["used"])
                    self._tans[tan.token] = tan
                elif kind == "tan_used":
                    self._tans[event["token"]].used = True
                elif kind == "bundle":
                    self._bundles.append(DiagnosisBundle.from_json(event["bundle"]))

    def _append_event(self, event: dict) -> None:
        if not self._store_path:
            return
        with open(self._store_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")

    def _compact(self) -> None:
        if not self._store_path:
            return
        tmp = f"{self._store_path}.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            for tan in self._tans.values():
                fh.write(json.dumps({
                    "event": "tan", "token": tan.token,
                    "issued_at": tan.issued_at, "used": tan.used,
                }, sort_keys=True) + "\n")
            for bundle in self._bundles:
                fh.write(json.dumps(
                    {"event": "bundle", "bundle": bundle.to_json()},
                    sort_keys=True) + "\n")
        os.replace(tmp, self._store_path)

    # -- operations --

    def issue_tan(self, credential: str) -> Tan:
        if credential != self._admin:
            raise Unauthorized("bad admin credential")
        with self._lock:
            tan = Tan(token=secrets.token_hex(16), issued_at=int(self._clock()))
            self._tans[tan.token] = tan
            self._append_event({
                "event": "tan", "token": tan.token,
                "issued_at": tan.issued_at, "used": False,
            })
            return tan

    def upload(self, bundle: DiagnosisBundle, tan_token: str) -> int:
        """Persist a bundle against a fresh TAN; returns the TEK count."""
        bundle.validate()
        with self._lock:
            tan = self._tans.get(tan_token)
            if tan is None:
                raise InvalidTan("unknown TAN")
            if tan.used:
                raise ReplayedTan("TAN already spent")
            tan.used = True
            self._bundles.append(bundle)
            self._append_event({"event": "tan_used", "token": tan.token})
            self._append_event({"event": "bundle", "bundle": bundle.to_json()})
            return len(bundle.teks)

    def download(self, since: int = 0) -> dict:
        """Signed aggregate of every bundle submitted after ``since``."""
        with self._lock:
            selected = [b.to_json() for b in self._bundles
                        if b.submitted_at > since]
            aggregate = {
                "since": since,
                "generated_at": int(self._clock()),
                "bundles": selected,
            }
        signature = self._signing_key.sign(_canonical(aggregate))
        return {"aggregate": aggregate, "signature": signature.hex()}

    def purge(self, now: int) -> int:
        """Drop TEKs older than the retention window; idempotent."""
        cutoff = now - RETENTION_S
        removed = 0
        with self._lock:
            kept_bundles = []
            for bundle in self._bundles:
                kept = tuple(
                    t for t in bundle.teks
                    if t.rolling_start * INTERVAL_SECONDS >= cutoff)
                removed += len(bundle.teks) - len(kept)
                if kept:
                    kept_bundles.append(
                        DiagnosisBundle(teks=kept, submitted_at=bundle.submitted_at))
            if removed:
                self._bundles = kept_bundles
                self._compact()
        return removed

    # -- key material --

    def public_key_pem(self) -> bytes:
        return self._signing_key.public_key().public_bytes(
            encoding=serialization.Encoding.PEM,
            format=serialization.PublicFormat.SubjectPublicKeyInfo,
        )


def verify_download(envelope: dict, public_key_pem: bytes) -> list[DiagnosisBundle]:
    """Check the aggregate signature, then parse the bundles.

    Raises InvalidSignature when any byte of the aggregate was tampered with.
    """
    public_key = serialization.load_pem_public_key(public_key_pem)
    if not isinstance(public_key, Ed25519PublicKey):
        raise ValueError("server key must be an Ed25519 public key")
    public_key.verify(
        bytes.fromhex(envelope["signature"]), _canonical(envelope["aggregate"]))
    return [DiagnosisBundle.from_json(b) for b in envelope["aggregate"]["bundles"]]


def load_signing_key(path) -> Ed25519PrivateKey:
    with open(path, "rb") as fh:
        key = serialization.load_pem_private_key(fh.read(), password=None)
    if not isinstance(key, Ed25519PrivateKey):
        raise ValueError(f"{path} is not an Ed25519 private key")
    return key


def init_signing_key(path) -> Ed25519PrivateKey:
    """Load the signing key, generating it (plus ``<path>.pub``) at first boot."""
    if os.path.exists(path):
        return load_signing_key(path)
    key = Ed25519PrivateKey.generate()
    pem = key.private_bytes(
        encoding=serialization.Encoding.PEM,
        format=serialization.PrivateFormat.PKCS8,
        encryption_algorithm=serialization.NoEncryption(),
    )
    with open(path, "wb") as fh:
        fh.write(pem)
    with open(f"{path}.pub", "wb") as fh:
        fh.write(key.public_key().public_bytes(
            encoding=serialization.Encoding.PEM,
            format=serialization.PublicFormat.SubjectPublicKeyInfo,
        ))
    return key


# --- TCP front-end ----------------------------------------------------------------

class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        server: KeyServer = self.server.key_server  # type: ignore[attr-defined]
        for line in self.rfile:
            line = line.strip()
            if not line:
                continue
            try:
                request = json.loads(line)
                response = self._dispatch(server, request)
            except KeyServerError as exc:
                response = {"ok": False, "error": type(exc).__name__,
                            "message": str(exc)}
            except (ValueError, KeyError, TypeError) as exc:
                response = {"ok": False, "error": "BadRequest", "message": str(exc)}
            self.wfile.write(json.dumps(response).encode() + b"\n")
            self.wfile.flush()

    def _dispatch(self, server: KeyServer, request: dict) -> dict:
        op = request.get("op")
        payload = request.get("payload") or {}
        if op == "issue-tan":
            tan = server.issue_tan(str(payload.get("credential", "")))
            return {"ok": True, "payload": {"token": tan.token,
                                            "issued_at": tan.issued_at}}
        if op == "upload":
            count = server.upload(
                DiagnosisBundle.from_json(payload["bundle"]),
                str(payload.get("tan", "")))
            return {"ok": True, "payload": {"accepted": True, "teks": count}}
        if op == "download":
            return {"ok": True, "payload": server.download(int(payload.get("since", 0)))}
        if op == "purge":
            if payload.get("credential") != server._admin:
                raise Unauthorized("bad admin credential")
            removed = server.purge(int(payload["now"]))
            return {"ok": True, "payload": {"removed": removed}}
        raise ValueError(f"unknown op {op!r}")


class KeyServerTCP(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: tuple[str, int], key_server: KeyServer):
        super().__init__(address, _Handler)
        self.key_server = key_server


def serve(listen: tuple[str, int], key_server: KeyServer) -> KeyServerTCP:
    """Start serving in a background thread; caller shuts the server down."""
    tcp = KeyServerTCP(listen, key_server)
    thread = threading.Thread(target=tcp.serve_forever, daemon=True)
    thread.start()
    return tcp


# --- client helpers ----------------------------------------------------------------

def request(address: tuple[str, int], op: str, payload: dict) -> dict:
    """One request/response exchange; raises the server's error classes."""
    with socket.create_connection(address, timeout=10) as sock:
        sock.sendall(json.dumps({"op": op, "payload": payload}).encode() + b"\n")
        fh = sock.makefile("rb")
        line = fh.readline()
    if not line:
        raise ConnectionError("server closed the connection without replying")
    response = json.loads(line)
    if response.get("ok"):
        return response["payload"]
    error = response.get("error", "KeyServerError")
    message = response.get("message", "")
    cls = {
        "Unauthorized": Unauthorized,
        "InvalidTan": InvalidTan,
        "ReplayedTan": ReplayedTan,
        "MalformedBundle": MalformedBundle,
    }.get(error, KeyServerError)
    raise cls(message)


def issue_tan_remote(address, credential: str) -> str:
    return request(address, "issue-tan", {"credential": credential})["token"]


def upload_remote(address, bundle: DiagnosisBundle, tan: str) -> int:
    return request(address, "upload", {"bundle": bundle.to_json(), "tan": tan})["teks"]


def download_remote(address, since: int = 0,
                    public_key_pem: bytes | None = None) -> list[DiagnosisBundle]:
    envelope = request(address, "download", {"since": since})
    if public_key_pem is not None:
        return verify_download(envelope, public_key_pem)
    return [DiagnosisBundle.from_json(b) for b in envelope["aggregate"]["bundles"]]
