"""Data Prep engine: signed, chunked public / a2a / per-region feeds.

Wire format of a batch (all integers big-endian)::

    magic    4s   b"ENDK"
    version  B    1
    kind     B    0 public, 1 a2a, 2 per-region
    batch_id Q
    produced q    seconds since epoch
    count    I
    count x (key 16s, valid_day I)
    signature 64s  Ed25519 over everything before it

The per-region feed's region is never written into the batch; it is implied
by the URL the batch is served under.
"""
from __future__ import annotations

import enum
import logging
import re
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

from .crypto import SIGNATURE_LEN, SigningKey, verify
from .domain import RegionId
from .keystore import KeyStore, RetentionPolicy, StoredKey

log = logging.getLogger(__name__)

MAGIC = b"ENDK"
VERSION = 1
DEFAULT_CHUNK_SIZE = 1000

_HEADER = struct.Struct(">4sBBQqI")
_RECORD = struct.Struct(">16sI")


class ProducerError(Exception):
    pass


class MalformedBatch(ProducerError):
    pass


class UnknownFeed(ProducerError):
    pass


class SigningFailure(ProducerError):
    pass


class Kind(enum.IntEnum):
    PUBLIC = 0
    A2A = 1
    REGION = 2


@dataclass(frozen=True, order=True)
class FeedKind:
    kind: Kind
    region: Optional[RegionId] = None

    def __post_init__(self):
        if (self.kind is Kind.REGION) != (self.region is not None):
            raise ValueError("only per-region feeds carry a region")

    @classmethod
    def public(cls) -> "FeedKind":
        return cls(Kind.PUBLIC)

    @classmethod
    def a2a(cls) -> "FeedKind":
        return cls(Kind.A2A)

    @classmethod
    def per_region(cls, region: RegionId) -> "FeedKind":
        return cls(Kind.REGION, region)

    @property
    def path(self) -> str:
        if self.kind is Kind.PUBLIC:
            return "/v1/keys"
        if self.kind is Kind.A2A:
            return "/v1/a2a/keys"
        return f"/v1/{self.region}/keys"

    def __str__(self) -> str:
        return self.path


_PATH_RE = re.compile(r"/v1(?:/(?P<scope>a2a|[A-Z]{2}))?/keys(?:/(?P<chunk>\d+))?/?")


def parse_feed_path(path: str) -> tuple[FeedKind, Optional[int]]:
    """Map a feed URL path to its feed kind and optional chunk number."""
    m = _PATH_RE.fullmatch(path)
    if m is None:
        raise UnknownFeed(f"not a feed path: {path}")
    scope, chunk = m.group("scope"), m.group("chunk")
    if scope is None:
        kind = FeedKind.public()
    elif scope == "a2a":
        kind = FeedKind.a2a()
    else:
        kind = FeedKind.per_region(RegionId(scope))
    return kind, int(chunk) if chunk is not None else None


@dataclass(frozen=True)
class Batch:
    feed_kind: FeedKind
    batch_id: int
    produced_at: int
    keys: tuple
    signature: bytes = b""

    def __post_init__(self):
        object.__setattr__(self, "keys", tuple((bytes(k), int(d)) for k, d in self.keys))


@dataclass(frozen=True)
class End:
    """No batch with the requested number exists yet."""
    newest_batch_id: int


@dataclass(frozen=True)
class Gone:
    """The requested batch was dropped by retention."""
    oldest_batch_id: Optional[int]
    newest_batch_id: int


def signed_bytes(batch: Batch) -> bytes:
    head = _HEADER.pack(MAGIC, VERSION, int(batch.feed_kind.kind), batch.batch_id,
                        batch.produced_at, len(batch.keys))
    return head + b"".join(_RECORD.pack(k, d) for k, d in batch.keys)


def encode_batch(batch: Batch) -> bytes:
    if batch.signature and len(batch.signature) != SIGNATURE_LEN:
        raise ValueError("signature must be 64 bytes")
    return signed_bytes(batch) + batch.signature


def decode_batch(data: bytes, region: Optional[RegionId] = None) -> Batch:
    """Decode wire bytes. ``region`` names the per-region feed the bytes came from."""
    if len(data) < _HEADER.size:
        raise MalformedBatch("truncated header")
    magic, version, kind, batch_id, produced_at, count = _HEADER.unpack_from(data)
    if magic != MAGIC or version != VERSION:
        raise MalformedBatch("bad magic or version")
    try:
        kind = Kind(kind)
    except ValueError:
        raise MalformedBatch(f"unknown feed kind {kind}") from None
    body_end = _HEADER.size + count * _RECORD.size
    sig = data[body_end:]
    if len(data) < body_end or len(sig) not in (0, SIGNATURE_LEN):
        raise MalformedBatch("length does not match key count")
    if kind is Kind.REGION:
        if region is None:
            raise MalformedBatch("per-region batch decoded without its region")
        feed = FeedKind.per_region(region)
    else:
        feed = FeedKind(kind)
    keys = tuple(_RECORD.iter_unpack(data[_HEADER.size:body_end]))
    return Batch(feed, batch_id, produced_at, keys, bytes(sig))


def verify_batch(batch: Batch, public_keys: Iterable[bytes]) -> bool:
    msg = signed_bytes(batch)
    return any(verify(pk, batch.signature, msg) for pk in public_keys)


@dataclass
class _Built:
    batch: Batch
    encoded: bytes
    oldest_stored_at: int
    key_set: frozenset


@dataclass
class _Feed:
    kind: FeedKind
    cursor: int = 0
    next_id: int = 1
    batches: dict = field(default_factory=dict)

    @property
    def newest_id(self) -> int:
        return self.next_id - 1


class Producer:
    """Builds feeds from a :class:`KeyStore` and serves them by chunk number.

    The public feed carries local and remote keys. The a2a feed and the
    per-region feeds carry local keys only, so replication is never transitive.
    """

    def __init__(self, store: KeyStore, signing_key: SigningKey, own_region: RegionId,
                 max_chunk_size: int = DEFAULT_CHUNK_SIZE,
                 retention: RetentionPolicy = RetentionPolicy(),
                 extra_regions: Iterable[RegionId] = (),
                 state_path: Optional[Union[str, Path]] = None):
        if max_chunk_size < 1:
            raise ValueError("max_chunk_size must be positive")
        self.store = store
        self.signing_key = signing_key
        self.own_region = own_region
        self.max_chunk_size = max_chunk_size
        self.retention = retention
        self._lock = threading.RLock()
        self._feeds: dict[FeedKind, _Feed] = {}
        self._known_regions: set[RegionId] = set()
        self._region_scan_cursor = 0
        for kind in (FeedKind.public(), FeedKind.a2a()):
            self._feeds[kind] = _Feed(kind)
        for r in extra_regions:
            self.add_region(r)
        self.state_path = Path(state_path) if state_path else None
        if self.state_path and self.state_path.exists():
            self._load_state()

    @property
    def public_key(self) -> bytes:
        return self.signing_key.public_bytes

    def add_region(self, region: RegionId) -> None:
        """Materialize the per-region feed for ``region`` (idempotent)."""
        if region == self.own_region:
            return
        with self._lock:
            self._known_regions.add(region)
            kind = FeedKind.per_region(region)
            if kind not in self._feeds:
                self._feeds[kind] = _Feed(kind)

    def feeds(self) -> list[FeedKind]:
        with self._lock:
            return sorted(self._feeds)

    # -- building ----------------------------------------------------
    def _pending(self, feed: _Feed) -> list[StoredKey]:
        if feed.kind.kind is Kind.PUBLIC:
            return self.store.read_since(feed.cursor)
        if feed.kind.kind is Kind.A2A:
            return self.store.read_local_since(feed.cursor)
        return self.store.read_local_for_region(feed.kind.region, feed.cursor)

    def _sign(self, batch: Batch) -> Batch:
        try:
            sig = self.signing_key.sign(signed_bytes(batch))
        except Exception as exc:
            raise SigningFailure(str(exc)) from exc
        return Batch(batch.feed_kind, batch.batch_id, batch.produced_at, batch.keys, sig)

    def build_chunks(self, now: int) -> dict[FeedKind, int]:
        """Cut new batches for every feed; returns new batch counts per feed."""
        with self._lock:
            for sk in self.store.read_local_since(self._region_scan_cursor):
                for r in sk.origin.declared_regions:
                    self.add_region(r)
            self._region_scan_cursor = self.store.last_seq
            made = {}
            new_lines = []
            for kind in sorted(self._feeds):
                feed = self._feeds[kind]
                pending = self._pending(feed)
                count = 0
                for i in range(0, len(pending), self.max_chunk_size):
                    chunk = pending[i:i + self.max_chunk_size]
                    batch = self._sign(Batch(kind, feed.next_id, now,
                                             [(sk.key.key, sk.key.valid_day) for sk in chunk]))
                    built = _Built(batch, encode_batch(batch),
                                   min(sk.stored_at for sk in chunk),
                                   frozenset(sk.key.key for sk in chunk))
                    feed.batches[batch.batch_id] = built
                    feed.next_id += 1
                    count += 1
                    new_lines.append(self._state_line(built))
                feed.cursor = self.store.last_seq
                made[kind] = count
            self._append_state(new_lines)
            return made

    def purge_expired(self, now: int) -> int:
        """Drop every batch holding a key past retention; returns batches dropped."""
        cutoff = self.retention.cutoff(now)
        dropped = 0
        with self._lock:
            for feed in self._feeds.values():
                for bid in [b for b, built in feed.batches.items()
                            if built.oldest_stored_at <= cutoff]:
                    del feed.batches[bid]
                    dropped += 1
            if dropped:
                self._rewrite_state()
        return dropped

    # -- serving -----------------------------------------------------
    def _feed(self, kind: FeedKind) -> _Feed:
        feed = self._feeds.get(kind)
        if feed is None:
            raise UnknownFeed(f"no feed {kind}")
        return feed

    def _lookup(self, kind: FeedKind, chunk_num: Optional[int]) -> Union[_Built, End, Gone]:
        with self._lock:
            feed = self._feed(kind)
            retained = sorted(feed.batches)
            if chunk_num is None:
                if not retained:
                    return End(feed.newest_id)
                return feed.batches[retained[0]]
            if chunk_num > feed.newest_id:
                return End(feed.newest_id)
            if chunk_num in feed.batches:
                return feed.batches[chunk_num]
            return Gone(retained[0] if retained else None, feed.newest_id)

    def serve_chunk(self, kind: FeedKind, chunk_num: Optional[int] = None) -> Union[Batch, End, Gone]:
        found = self._lookup(kind, chunk_num)
        return found.batch if isinstance(found, _Built) else found

    def serve_encoded(self, kind: FeedKind, chunk_num: Optional[int] = None) -> Union[bytes, End, Gone]:
        found = self._lookup(kind, chunk_num)
        return found.encoded if isinstance(found, _Built) else found

    def newest_batch_id(self, kind: FeedKind) -> int:
        with self._lock:
            return self._feed(kind).newest_id

    # -- persistence -------------------------------------------------
    # One line per retained batch: BATCH|<region or ->|<oldest_stored_at>|<hex encoding>.
    # Feed cursors are recovered from which stored keys the batches already hold.
    def _state_line(self, built: _Built) -> str:
        region = built.batch.feed_kind.region or "-"
        return f"BATCH|{region}|{built.oldest_stored_at}|{built.encoded.hex()}"

    def _append_state(self, lines: list[str]) -> None:
        if self.state_path and lines:
            with open(self.state_path, "a") as fh:
                fh.write("\n".join(lines) + "\n")

    def _rewrite_state(self) -> None:
        if not self.state_path:
            return
        lines = [f"NEXT|{f.kind.path}|{f.next_id}" for f in self._feeds.values()]
        lines += [self._state_line(b) for f in self._feeds.values()
                  for _, b in sorted(f.batches.items())]
        tmp = self.state_path.with_suffix(".tmp")
        tmp.write_text("".join(line + "\n" for line in lines))
        tmp.replace(self.state_path)

    def _load_state(self) -> None:
        for line in self.state_path.read_text().splitlines():
            if not line.strip():
                continue
            if line.startswith("NEXT|"):
                _, path, next_id = line.split("|")
                kind, _ = parse_feed_path(path)
                if kind.region is not None:
                    self.add_region(kind.region)
                self._feeds[kind].next_id = max(self._feeds[kind].next_id, int(next_id))
                continue
            tag, region, oldest, hexdata = line.split("|")
            if tag != "BATCH":
                raise ProducerError(f"bad producer state line: {line[:40]}")
            region_id = None if region == "-" else RegionId(region)
            batch = decode_batch(bytes.fromhex(hexdata), region_id)
            if region_id is not None:
                self.add_region(region_id)
            feed = self._feeds[batch.feed_kind]
            feed.batches[batch.batch_id] = _Built(batch, bytes.fromhex(hexdata), int(oldest),
                                                  frozenset(k for k, _ in batch.keys))
            feed.next_id = max(feed.next_id, batch.batch_id + 1)
        for feed in self._feeds.values():
            served = set().union(*(b.key_set for b in feed.batches.values())) if feed.batches else set()
            for sk in self.store:
                if sk.key.key in served:
                    feed.cursor = max(feed.cursor, sk.seq)
        self._region_scan_cursor = 0
