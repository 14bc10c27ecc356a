"""Interoperability consumer: pulls a2a or per-region feeds from producer peers."""
from __future__ import annotations

import enum
import logging
import os
import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Protocol, Union

from .domain import DiagnosisKey, RegionId
from .keystore import KeyStore
from .producer import Batch, FeedKind, MalformedBatch, decode_batch, verify_batch

log = logging.getLogger(__name__)

DEFAULT_POLL_INTERVAL = 300
NATIVE_FORMAT = "native"

# Status codes of the feed contract, shared by every transport binding.
OK, NO_CONTENT, FORBIDDEN, NOT_FOUND, GONE = 200, 204, 403, 404, 410
NEWEST_HEADER = "X-Newest-Batch-Id"
OLDEST_HEADER = "X-Oldest-Batch-Id"
NEXT_POLL_HEADER = "X-Recommended-Next-Poll-Time"


class ConsumerError(Exception):
    def __init__(self, message: str, state: "PeerState" = None, ingested: int = 0):
        super().__init__(message)
        self.state = state
        self.ingested = ingested


class PeerUnreachable(ConsumerError):
    pass


class BadSignature(ConsumerError):
    pass


class FormatError(ConsumerError):
    pass


class GoneBatch(ConsumerError):
    pass


class ReplicationType(enum.Enum):
    ALL_TO_ALL = "a2a"
    PARTIAL = "partial"


@dataclass(frozen=True)
class PeerConfig:
    region_id: RegionId
    remote_region_url: str
    replication_type: ReplicationType
    format: str
    tls_consumer_certificate: object
    verification_keys: Optional[frozenset] = None

    def __post_init__(self):
        if not self.remote_region_url:
            raise ValueError("remote_region_url is required")
        if self.verification_keys is not None:
            object.__setattr__(self, "verification_keys", frozenset(self.verification_keys))


@dataclass(frozen=True)
class PeerState:
    last_batch_id: int = 0
    recommended_next_poll_time: Optional[int] = None

    def due(self, now: int) -> bool:
        return self.recommended_next_poll_time is None or now >= self.recommended_next_poll_time


@dataclass(frozen=True)
class Response:
    status: int
    body: bytes = b""
    headers: tuple = ()

    def header(self, name: str) -> Optional[str]:
        for k, v in self.headers:
            if k.lower() == name.lower():
                return v
        return None


class Transport(Protocol):
    def get(self, base_url: str, path: str, identity: object) -> Response: ...


def select_feed_path(config: PeerConfig, own_region: RegionId) -> str:
    if config.replication_type is ReplicationType.ALL_TO_ALL:
        return FeedKind.a2a().path
    return FeedKind.per_region(own_region).path


def feed_kind_for(config: PeerConfig, own_region: RegionId) -> FeedKind:
    if config.replication_type is ReplicationType.ALL_TO_ALL:
        return FeedKind.a2a()
    return FeedKind.per_region(own_region)


Decoder = Callable[[bytes, Optional[RegionId]], Batch]
FORMATS: dict[str, Decoder] = {NATIVE_FORMAT: decode_batch}


class Consumer:
    """Polls producers and stores what they serve in the remote partition.

    ``on_batch`` is called after each batch is ingested, with the peer region
    and the advanced state; the node uses it to persist state.
    """

    def __init__(self, own_region: RegionId, store: KeyStore, transport: Transport,
                 poll_interval: int = DEFAULT_POLL_INTERVAL,
                 on_batch: Optional[Callable[[RegionId, PeerState, Batch, int], None]] = None):
        self.own_region = own_region
        self.store = store
        self.transport = transport
        self.poll_interval = poll_interval
        self.on_batch = on_batch

    def select_feed_path(self, config: PeerConfig) -> str:
        return select_feed_path(config, self.own_region)

    def _get(self, config: PeerConfig, path: str, state: PeerState, ingested: int) -> Response:
        try:
            resp = self.transport.get(config.remote_region_url, path, config.tls_consumer_certificate)
        except (OSError, ConnectionError) as exc:
            raise PeerUnreachable(f"{config.region_id}: {exc}", state, ingested) from exc
        if resp.status in (FORBIDDEN, NOT_FOUND):
            raise PeerUnreachable(f"{config.region_id}: {path} answered {resp.status}", state, ingested)
        return resp

    def _next_poll(self, resp: Response, now: int) -> int:
        hint = resp.header(NEXT_POLL_HEADER)
        return int(hint) if hint is not None else now + self.poll_interval

    def poll_peer(self, config: PeerConfig, state: PeerState, now: int) -> tuple[int, PeerState]:
        decoder = FORMATS.get(config.format)
        if decoder is None:
            raise FormatError(f"no decoder for format {config.format!r}", state)
        kind = feed_kind_for(config, self.own_region)
        base = kind.path
        ingested = 0
        while True:
            wanted = state.last_batch_id + 1
            resp = self._get(config, f"{base}/{wanted}", state, ingested)
            if resp.status == NO_CONTENT:
                state = replace(state, recommended_next_poll_time=self._next_poll(resp, now))
                return ingested, state
            if resp.status == GONE:
                raise GoneBatch(f"{config.region_id}: batch {wanted} is gone", state, ingested)
            if resp.status != OK:
                raise PeerUnreachable(f"{config.region_id}: status {resp.status}", state, ingested)
            try:
                batch = decoder(resp.body, kind.region)
            except MalformedBatch as exc:
                raise FormatError(f"{config.region_id}: {exc}", state, ingested) from exc
            if batch.feed_kind != kind or batch.batch_id != wanted:
                raise FormatError(f"{config.region_id}: expected {kind} #{wanted}, "
                                  f"got {batch.feed_kind} #{batch.batch_id}", state, ingested)
            if config.verification_keys is not None and not verify_batch(batch, config.verification_keys):
                raise BadSignature(f"{config.region_id}: batch {wanted} failed verification",
                                   state, ingested)
            n = self.store.ingest_remote((DiagnosisKey.of(k, d) for k, d in batch.keys),
                                         config.region_id, now)
            ingested += n
            state = replace(state, last_batch_id=wanted)
            if self.on_batch is not None:
                self.on_batch(config.region_id, state, batch, n)

    def resync_after_gone(self, config: PeerConfig, state: PeerState) -> PeerState:
        """Jump the cursor to just before the producer's oldest retained batch."""
        kind = feed_kind_for(config, self.own_region)
        resp = self._get(config, kind.path, state, 0)
        if resp.status == OK:
            decoder = FORMATS.get(config.format, decode_batch)
            try:
                oldest = decoder(resp.body, kind.region).batch_id
            except MalformedBatch as exc:
                raise FormatError(str(exc), state) from exc
            target = oldest - 1
        elif resp.status == NO_CONTENT:
            target = int(resp.header(NEWEST_HEADER) or 0)
        else:
            raise PeerUnreachable(f"{config.region_id}: status {resp.status}", state)
        if target <= state.last_batch_id:
            return state
        log.warning("%s: skipping batches %d..%d lost to producer retention",
                    config.region_id, state.last_batch_id + 1, target)
        return replace(state, last_batch_id=target)


class PeerStateJournal:
    """Append-only ``PEER|<region>|<last_batch_id>|<next_poll>`` lines; last line wins."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self._lock = threading.Lock()

    def load(self) -> dict[RegionId, PeerState]:
        states: dict[RegionId, PeerState] = {}
        if not self.path.exists():
            return states
        for line in self.path.read_text().splitlines():
            parts = line.split("|")
            # a torn final line from a crash mid-write is ignored
            if len(parts) != 4 or parts[0] != "PEER":
                continue
            try:
                region = RegionId(parts[1])
                states[region] = PeerState(int(parts[2]), int(parts[3]) if parts[3] else None)
            except ValueError:
                continue
        return states

    def record(self, region: RegionId, state: PeerState) -> None:
        nxt = "" if state.recommended_next_poll_time is None else str(state.recommended_next_poll_time)
        with self._lock, open(self.path, "a") as fh:
            fh.write(f"PEER|{region}|{state.last_batch_id}|{nxt}\n")
            fh.flush()
            os.fsync(fh.fileno())
