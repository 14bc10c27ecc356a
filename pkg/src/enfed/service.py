"""Backend node: upload endpoint, feed endpoints and background cadences.

Endpoints are written against :class:`Request` / :class:`Response`. Two
bindings exist: :class:`InProcessNetwork` (identities injected directly, used
by the simulator and tests) and :class:`HttpBinding` (sockets, optionally
mutual TLS, identity taken from the verified client certificate).
"""
from __future__ import annotations

import http.client
import logging
import ssl
import struct
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable, Optional, Union
from urllib.parse import urlsplit

import yaml

from .consumer import (
    DEFAULT_POLL_INTERVAL,
    FORBIDDEN,
    GONE,
    NATIVE_FORMAT,
    NEWEST_HEADER,
    NO_CONTENT,
    NOT_FOUND,
    OK,
    OLDEST_HEADER,
    Consumer,
    ConsumerError,
    GoneBatch,
    PeerConfig,
    PeerState,
    PeerStateJournal,
    ReplicationType,
    Response,
)
from .crypto import SigningKey
from .domain import SECONDS_PER_DAY, DiagnosisKey, RegionId
from .keystore import (
    DiagnosisKeyUpload,
    KeyStore,
    MalformedUpload,
    RetentionPolicy,
    StaticCodeVerifier,
    UnauthorizedUpload,
)
from .producer import DEFAULT_CHUNK_SIZE, End, FeedKind, Gone, Producer, UnknownFeed, parse_feed_path
from .registry import AccessControlList, CertChain, NotFound, Registry, authorize_feed

log = logging.getLogger(__name__)

BAD_REQUEST, UNAUTHORIZED, METHOD_NOT_ALLOWED = 400, 401, 405

UPLOAD_MAGIC = b"ENUP"
_UP_HEAD = struct.Struct(">4sBB")
_UP_KEY = struct.Struct(">16sI")


# -- upload wire format ------------------------------------------------
def encode_upload(upload: DiagnosisKeyUpload) -> bytes:
    """magic, version, n keys, keys, n regions, regions, testing region, code."""
    regions = sorted(upload.declared_regions)
    code = upload.authorization_code.encode()
    return b"".join([
        _UP_HEAD.pack(UPLOAD_MAGIC, 1, len(upload.keys)),
        b"".join(_UP_KEY.pack(dk.key, dk.valid_day) for dk in upload.keys),
        bytes([len(regions)]), b"".join(r.code.encode() for r in regions),
        upload.testing_region.code.encode(),
        struct.pack(">H", len(code)), code,
    ])


def decode_upload(body: bytes, upload_time: int) -> DiagnosisKeyUpload:
    try:
        magic, version, n = _UP_HEAD.unpack_from(body)
        if magic != UPLOAD_MAGIC or version != 1:
            raise MalformedUpload("bad upload header")
        off = _UP_HEAD.size
        keys = [DiagnosisKey.of(*_UP_KEY.unpack_from(body, off + i * _UP_KEY.size)) for i in range(n)]
        off += n * _UP_KEY.size
        nreg = body[off]
        off += 1
        regions = [RegionId(body[off + 2 * i: off + 2 * i + 2].decode("ascii")) for i in range(nreg)]
        off += 2 * nreg
        testing = RegionId(body[off:off + 2].decode("ascii"))
        (clen,) = struct.unpack_from(">H", body, off + 2)
        code = body[off + 4: off + 4 + clen].decode()
        if off + 4 + clen != len(body):
            raise MalformedUpload("trailing or missing bytes")
    except (struct.error, IndexError, UnicodeDecodeError, ValueError) as exc:
        if isinstance(exc, MalformedUpload):
            raise
        raise MalformedUpload(str(exc)) from exc
    return DiagnosisKeyUpload(keys, frozenset(regions), testing, upload_time, code)


# -- requests and clocks ---------------------------------------------------
@dataclass(frozen=True)
class Request:
    method: str
    path: str
    body: bytes = b""
    identity: Optional[CertChain] = None


class SimulatedClock:
    def __init__(self, t: int = 0):
        self.t = t

    def __call__(self) -> int:
        return self.t

    def advance(self, seconds: int) -> None:
        self.t += seconds


def real_clock() -> int:
    return int(time.time())


# -- configuration --------------------------------------------------------
@dataclass(frozen=True)
class PeerSpec:
    """A peer to pull from; resolved to a PeerConfig through the registry
    unless ``url`` is given."""
    region: RegionId
    replication: ReplicationType
    url: Optional[str] = None
    verification_keys: Optional[frozenset] = None
    format: str = NATIVE_FORMAT


@dataclass
class BackendNodeConfig:
    region: RegionId
    signing_key: SigningKey
    identity: Optional[CertChain] = None
    cluster: Optional[str] = None
    retention: RetentionPolicy = field(default_factory=RetentionPolicy)
    chunk_size: int = DEFAULT_CHUNK_SIZE
    poll_interval: int = DEFAULT_POLL_INTERVAL
    build_interval: int = 3600
    purge_interval: int = SECONDS_PER_DAY
    peers: list = field(default_factory=list)
    acl: AccessControlList = field(default_factory=AccessControlList)
    upload_codes: tuple = ()
    listen: Optional[str] = None
    data_dir: Optional[Path] = None
    tls: Optional["TlsCredential"] = None

    @classmethod
    def from_yaml(cls, path: Union[str, Path], region: Optional[str] = None) -> "BackendNodeConfig":
        """Load a node config file. Keys mirror the dataclass fields; the
        signing key is a hex seed (``signing_key_seed``)."""
        raw = yaml.safe_load(Path(path).read_text()) or {}
        reg = RegionId(region or raw["region"])
        acl = AccessControlList()
        for feed_path, subjects in (raw.get("acl") or {}).items():
            acl.allow(parse_feed_path(feed_path)[0], subjects)
        peers = [PeerSpec(RegionId(p["region"]), ReplicationType(p.get("replication", "partial")),
                          p.get("url"),
                          frozenset(bytes.fromhex(k) for k in p["verification_keys"])
                          if p.get("verification_keys") else None)
                 for p in raw.get("peers") or []]
        seed = raw.get("signing_key_seed")
        key = SigningKey.from_seed(bytes.fromhex(seed)) if seed else SigningKey.generate()
        return cls(
            region=reg, signing_key=key, cluster=raw.get("cluster"),
            retention=RetentionPolicy(int(raw.get("retention_days", 30))),
            chunk_size=int(raw.get("chunk_size", DEFAULT_CHUNK_SIZE)),
            poll_interval=int(raw.get("poll_interval", DEFAULT_POLL_INTERVAL)),
            build_interval=int(raw.get("build_interval", 3600)),
            peers=peers, acl=acl, upload_codes=tuple(raw.get("upload_codes") or ()),
            listen=raw.get("listen"),
            data_dir=Path(raw["data_dir"]) if raw.get("data_dir") else None,
        )


# -- the node ---------------------------------------------------------------
class BackendNode:
    """Composition of keystore, producer, consumer and registry for one region."""

    def __init__(self, config: BackendNodeConfig, registry: Registry, transport,
                 clock: Callable[[], int] = real_clock,
                 on_event: Optional[Callable[..., None]] = None):
        self.config = config
        self.region = config.region
        self.registry = registry
        self.clock = clock
        self.on_event = on_event
        data = config.data_dir
        if data is not None:
            data.mkdir(parents=True, exist_ok=True)
        self.store = KeyStore(data / "keys.journal" if data else None,
                              StaticCodeVerifier(config.upload_codes))
        acl_regions = [f.region for f in config.acl.entries if f.region is not None]
        self.producer = Producer(self.store, config.signing_key, config.region, config.chunk_size,
                                 config.retention, acl_regions,
                                 data / "feeds.state" if data else None)
        self.state_journal = PeerStateJournal(data / "peers.journal") if data else None
        self.peer_states: dict[RegionId, PeerState] = self.state_journal.load() if self.state_journal else {}
        self.consumer = Consumer(config.region, self.store, transport, config.poll_interval,
                                 on_batch=self._batch_done)
        self.peers: dict[RegionId, PeerConfig] = {}
        self.errors: list[tuple[int, RegionId, str]] = []
        self._next_build = None
        self._next_purge = None
        self._lock = threading.Lock()

    # -- wiring ------------------------------------------------------------
    def resolve_peers(self) -> None:
        """Build PeerConfigs for every configured peer, via registry lookups."""
        for spec in self.config.peers:
            if spec.url is not None:
                url, keys = spec.url, spec.verification_keys
            else:
                record = self.registry.lookup(spec.region)
                if spec.replication not in record.replication_offered:
                    raise ValueError(f"{spec.region} does not offer {spec.replication.value}")
                url, keys = record.base_url, frozenset({record.feed_verification_key})
            credential = self.config.tls or self.config.identity
            self.peers[spec.region] = PeerConfig(spec.region, url, spec.replication, spec.format,
                                                 credential, keys)
            self.peer_states.setdefault(spec.region, PeerState())

    def _emit(self, kind: str, **data) -> None:
        if self.on_event is not None:
            self.on_event(kind, node=self.region, **data)

    def _batch_done(self, peer: RegionId, state: PeerState, batch, ingested: int) -> None:
        self.peer_states[peer] = state
        if self.state_journal is not None:
            self.state_journal.record(peer, state)
        self._emit("ingest", peer=peer, batch_id=batch.batch_id, keys=len(batch.keys),
                   new=ingested, at=self.clock())

    # -- endpoints ---------------------------------------------------------
    def handle(self, request: Request) -> Response:
        if request.path.rstrip("/") == "/v1/keys" and request.method == "POST":
            return self.handle_upload(request.body)
        if request.method != "GET":
            return Response(METHOD_NOT_ALLOWED)
        try:
            kind, chunk = parse_feed_path(request.path)
        except (UnknownFeed, ValueError):
            return Response(NOT_FOUND)
        return self.handle_feed(kind, chunk, request.identity)

    def handle_upload(self, body: bytes) -> Response:
        now = self.clock()
        try:
            upload = decode_upload(body, now)
            receipt = self.store.ingest_local(upload, now)
        except UnauthorizedUpload:
            return Response(UNAUTHORIZED)
        except MalformedUpload as exc:
            return Response(BAD_REQUEST, str(exc).encode())
        self._emit("upload", stored=receipt.stored, at=now)
        return Response(OK, str(receipt.stored).encode())

    def handle_feed(self, kind: FeedKind, chunk_num: Optional[int],
                    identity: Optional[CertChain]) -> Response:
        # authorization happens before any feed or datastore read
        if not authorize_feed(self.config.acl, kind, identity, self.registry):
            return Response(FORBIDDEN)
        if kind.region is not None and kind.region != self.region:
            self.producer.add_region(kind.region)
        try:
            found = self.producer.serve_encoded(kind, chunk_num)
        except UnknownFeed:
            return Response(NOT_FOUND)
        if isinstance(found, End):
            return Response(NO_CONTENT, b"", ((NEWEST_HEADER, str(found.newest_batch_id)),))
        if isinstance(found, Gone):
            headers = [(NEWEST_HEADER, str(found.newest_batch_id))]
            if found.oldest_batch_id is not None:
                headers.append((OLDEST_HEADER, str(found.oldest_batch_id)))
            return Response(GONE, b"", tuple(headers))
        return Response(OK, found)

    # -- cadences ----------------------------------------------------------
    def build_if_due(self, now: Optional[int] = None) -> dict:
        now = self.clock() if now is None else now
        if self._next_build is not None and now < self._next_build:
            return {}
        self._next_build = now + self.config.build_interval
        made = self.producer.build_chunks(now)
        if any(made.values()):
            self._emit("build", batches={str(k): n for k, n in made.items() if n}, at=now)
        return made

    def purge_if_due(self, now: Optional[int] = None) -> int:
        now = self.clock() if now is None else now
        if self._next_purge is not None and now < self._next_purge:
            return 0
        self._next_purge = now + self.config.purge_interval
        n = self.store.purge_expired(self.config.retention, now)
        b = self.producer.purge_expired(now)
        if n or b:
            self._emit("purge", keys=n, batches=b, at=now)
        return n

    def poll_due(self, now: Optional[int] = None) -> int:
        now = self.clock() if now is None else now
        total = 0
        for region in sorted(self.peers):
            state = self.peer_states.get(region, PeerState())
            if not state.due(now):
                continue
            total += self.poll_one(region, now)
        return total

    def poll_one(self, region: RegionId, now: int) -> int:
        config = self.peers[region]
        state = self.peer_states.get(region, PeerState())
        try:
            try:
                n, state = self.consumer.poll_peer(config, state, now)
            except GoneBatch as exc:
                n = exc.ingested
                state = self.consumer.resync_after_gone(config, exc.state)
                self._emit("resync", peer=region, last_batch_id=state.last_batch_id, at=now)
        except ConsumerError as exc:
            self.errors.append((now, region, f"{type(exc).__name__}: {exc}"))
            self._emit("poll_error", peer=region, error=type(exc).__name__, at=now)
            n = exc.ingested
            state = exc.state or state
            state = PeerState(state.last_batch_id, now + self.config.poll_interval)
        self.peer_states[region] = state
        if self.state_journal is not None:
            self.state_journal.record(region, state)
        return n

    def tick(self, now: Optional[int] = None) -> None:
        now = self.clock() if now is None else now
        with self._lock:
            self.build_if_due(now)
            self.poll_due(now)
            self.purge_if_due(now)


# -- in-process binding --------------------------------------------------
class InProcessNetwork:
    """Routes requests to nodes by base URL and accounts bytes per requester."""

    def __init__(self):
        self.nodes: dict[str, BackendNode] = {}
        self.down: set[str] = set()
        self.observers: list[Callable[..., None]] = []

    def attach(self, base_url: str, node: BackendNode) -> None:
        self.nodes[base_url] = node

    def request(self, base_url: str, request: Request, requester: Optional[str] = None) -> Response:
        node = self.nodes.get(base_url)
        if node is None or base_url in self.down:
            raise ConnectionError(f"no route to {base_url}")
        resp = node.handle(request)
        who = requester or (request.identity.subject if request.identity else "anonymous")
        for obs in self.observers:
            obs(who, node.region, request, resp)
        return resp

    def get(self, base_url: str, path: str, identity: Optional[CertChain]) -> Response:
        return self.request(base_url, Request("GET", path, b"", identity))

    def post(self, base_url: str, path: str, body: bytes) -> Response:
        return self.request(base_url, Request("POST", path, body))


# -- socket binding ---------------------------------------------------------
@dataclass(frozen=True)
class TlsCredential:
    """Files for one side of a mutually authenticated TLS connection."""
    cert_file: str
    key_file: str
    ca_file: str


def server_tls_context(cred: TlsCredential) -> ssl.SSLContext:
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
    ctx.load_cert_chain(cred.cert_file, cred.key_file)
    ctx.load_verify_locations(cred.ca_file)
    # client certificates optional so the public feed stays anonymous
    ctx.verify_mode = ssl.CERT_OPTIONAL
    return ctx


def client_tls_context(cred: TlsCredential) -> ssl.SSLContext:
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
    ctx.load_verify_locations(cred.ca_file)
    ctx.load_cert_chain(cred.cert_file, cred.key_file)
    ctx.check_hostname = False
    return ctx


def identity_from_peercert(peercert: Optional[dict], registry: Registry) -> Optional[CertChain]:
    """Map a verified client certificate (CN ``region:XX``) to its registered chain."""
    if not peercert:
        return None
    for rdn in peercert.get("subject", ()):
        for name, value in rdn:
            if name == "commonName" and value.startswith("region:"):
                try:
                    return registry.chain_for(RegionId(value[7:]))
                except (NotFound, ValueError):
                    return None
    return None


class HttpBinding:
    """Serve a node over HTTP(S) with a ThreadingHTTPServer."""

    def __init__(self, node: BackendNode, host: str = "127.0.0.1", port: int = 0,
                 tls: Optional[TlsCredential] = None):
        self.node = node
        binding = self

        class Handler(BaseHTTPRequestHandler):
            def _dispatch(self, method: str) -> None:
                identity = None
                if isinstance(self.connection, ssl.SSLSocket):
                    identity = identity_from_peercert(self.connection.getpeercert(), node.registry)
                length = int(self.headers.get("Content-Length") or 0)
                body = self.rfile.read(length) if length else b""
                resp = binding.node.handle(Request(method, self.path, body, identity))
                self.send_response(resp.status)
                for k, v in resp.headers:
                    self.send_header(k, v)
                if resp.status != NO_CONTENT:
                    self.send_header("Content-Length", str(len(resp.body)))
                self.end_headers()
                if resp.body and resp.status != NO_CONTENT:
                    self.wfile.write(resp.body)

            def do_GET(self):
                self._dispatch("GET")

            def do_POST(self):
                self._dispatch("POST")

            def log_message(self, fmt, *args):
                log.debug("%s " + fmt, self.address_string(), *args)

        self.server = ThreadingHTTPServer((host, port), Handler)
        self.server.daemon_threads = True
        if tls is not None:
            self.server.socket = server_tls_context(tls).wrap_socket(self.server.socket, server_side=True)
        self.scheme = "https" if tls else "http"
        self._thread: Optional[threading.Thread] = None

    @property
    def url(self) -> str:
        host, port = self.server.server_address[:2]
        return f"{self.scheme}://{host}:{port}"

    def start(self) -> None:
        self._thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self.server.shutdown()
        self.server.server_close()
        if self._thread is not None:
            self._thread.join()


class HttpTransport:
    """Consumer-side transport; the identity passed per request is a
    :class:`TlsCredential` (or None for plain HTTP)."""

    def __init__(self, timeout: float = 10.0):
        self.timeout = timeout

    def get(self, base_url: str, path: str, identity: Optional[TlsCredential]) -> Response:
        parts = urlsplit(base_url)
        if parts.scheme == "https":
            ctx = client_tls_context(identity) if identity is not None else ssl.create_default_context()
            conn = http.client.HTTPSConnection(parts.hostname, parts.port, timeout=self.timeout, context=ctx)
        else:
            conn = http.client.HTTPConnection(parts.hostname, parts.port, timeout=self.timeout)
        try:
            conn.request("GET", parts.path.rstrip("/") + path)
            r = conn.getresponse()
            return Response(r.status, r.read(), tuple(r.getheaders()))
        finally:
            conn.close()


# -- running a node ----------------------------------------------------------
class NodeHandle:
    def __init__(self, node: BackendNode, binding: Optional[HttpBinding], tick_seconds: float):
        self.node = node
        self.binding = binding
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, args=(tick_seconds,), daemon=True)

    def _loop(self, tick_seconds: float) -> None:
        while not self._stop.is_set():
            try:
                self.node.tick()
            except Exception:
                log.exception("background tick failed")
            self._stop.wait(tick_seconds)

    def start(self) -> "NodeHandle":
        if self.binding is not None:
            self.binding.start()
        self._thread.start()
        return self

    def stop(self) -> None:
        """Stop cadences (waiting for an in-flight tick) and then the listener."""
        self._stop.set()
        self._thread.join()
        if self.binding is not None:
            self.binding.stop()


def run_node(config: BackendNodeConfig, registry: Registry, transport=None,
             clock: Callable[[], int] = real_clock, tls: Optional[TlsCredential] = None,
             tick_seconds: float = 1.0) -> NodeHandle:
    if config.region not in registry:
        raise ValueError(f"{config.region} is not registered; peers could not pull from it")
    if config.identity is None:
        config.identity = registry.chain_for(config.region)
    node = BackendNode(config, registry, transport or HttpTransport(), clock)
    node.resolve_peers()
    binding = None
    if config.listen:
        host, _, port = config.listen.rpartition(":")
        binding = HttpBinding(node, host or "127.0.0.1", int(port), tls)
    return NodeHandle(node, binding, tick_seconds).start()
