"""Diagnosis key datastore split into 'local' (uploaded) and 'remote' (replicated) parts."""
from __future__ import annotations

import logging
import os
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional, Union

from .domain import (
    MAX_KEYS_PER_UPLOAD,
    SECONDS_PER_DAY,
    DiagnosisKey,
    RegionId,
)

log = logging.getLogger(__name__)


class KeystoreError(Exception):
    pass


class UnauthorizedUpload(KeystoreError):
    pass


class MalformedUpload(KeystoreError):
    pass


class InvalidCursor(KeystoreError):
    pass


@dataclass(frozen=True)
class DiagnosisKeyUpload:
    keys: tuple
    declared_regions: frozenset
    testing_region: RegionId
    upload_time: int
    authorization_code: str

    def __post_init__(self):
        object.__setattr__(self, "keys", tuple(self.keys))
        object.__setattr__(self, "declared_regions", frozenset(self.declared_regions))

    def validate(self) -> None:
        if not 1 <= len(self.keys) <= MAX_KEYS_PER_UPLOAD:
            raise MalformedUpload(f"upload must carry 1..{MAX_KEYS_PER_UPLOAD} keys, got {len(self.keys)}")
        if self.testing_region not in self.declared_regions:
            raise MalformedUpload("testing region missing from declared regions")
        if len({dk.key for dk in self.keys}) != len(self.keys):
            raise MalformedUpload("duplicate key in upload")


@dataclass(frozen=True)
class LocalOrigin:
    declared_regions: frozenset
    testing_region: RegionId


@dataclass(frozen=True)
class RemoteOrigin:
    source_region: RegionId


@dataclass(frozen=True)
class StoredKey:
    key: DiagnosisKey
    origin: Union[LocalOrigin, RemoteOrigin]
    stored_at: int
    seq: int

    @property
    def is_local(self) -> bool:
        return isinstance(self.origin, LocalOrigin)


@dataclass(frozen=True)
class RetentionPolicy:
    t_days: int = 30

    def __post_init__(self):
        if self.t_days < 1:
            raise ValueError("retention must be at least one day")

    def cutoff(self, now: int) -> int:
        """Keys stored at or before this instant are expired."""
        return now - self.t_days * SECONDS_PER_DAY


@dataclass(frozen=True)
class UploadReceipt:
    stored: int


class StaticCodeVerifier:
    """Accepts any code from a fixed list; codes may be reused."""

    def __init__(self, codes: Iterable[str]):
        self.codes = frozenset(codes)

    def __call__(self, code: str) -> bool:
        return code in self.codes


def _fmt_local(sk: StoredKey) -> str:
    o = sk.origin
    regions = ",".join(sorted(r.code for r in o.declared_regions))
    return f"LOCAL|{sk.key.key.hex()}|{sk.key.valid_day}|{regions}|{o.testing_region}|{sk.stored_at}"


def _fmt_remote(sk: StoredKey) -> str:
    return f"REMOTE|{sk.key.key.hex()}|{sk.key.valid_day}|{sk.origin.source_region}|{sk.stored_at}"


def format_journal_line(sk: StoredKey) -> str:
    return _fmt_local(sk) if sk.is_local else _fmt_remote(sk)


class KeyStore:
    """Thread-safe in-memory store with an optional append-only journal.

    Every stored key gets a monotonically increasing sequence number; a cursor
    is the last sequence number a reader has seen. Purging compacts the
    journal so expired key material does not linger on disk.
    """

    def __init__(self, journal: Optional[Union[str, Path]] = None,
                 verifier: Optional[Callable[[str], bool]] = None):
        self._lock = threading.RLock()
        self._by_key: dict[bytes, StoredKey] = {}
        self._order: dict[int, StoredKey] = {}
        self._seq = 0
        self.verifier = verifier or StaticCodeVerifier(())
        self.journal = Path(journal) if journal else None
        if self.journal and self.journal.exists():
            self._replay()

    # -- persistence -------------------------------------------------
    def _replay(self) -> None:
        for lineno, line in enumerate(self.journal.read_text().splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("|")
            try:
                if parts[0] == "LOCAL" and len(parts) == 6:
                    dk = DiagnosisKey.of(bytes.fromhex(parts[1]), int(parts[2]))
                    regions = frozenset(RegionId(c) for c in parts[3].split(","))
                    origin = LocalOrigin(regions, RegionId(parts[4]))
                    stored_at = int(parts[5])
                elif parts[0] == "REMOTE" and len(parts) == 5:
                    dk = DiagnosisKey.of(bytes.fromhex(parts[1]), int(parts[2]))
                    origin = RemoteOrigin(RegionId(parts[3]))
                    stored_at = int(parts[4])
                else:
                    raise ValueError(parts[0])
            except ValueError as exc:
                raise KeystoreError(f"{self.journal}:{lineno}: bad journal record") from exc
            self._insert(dk, origin, stored_at, persist=False)

    def _append(self, lines: list[str]) -> None:
        if self.journal is None or not lines:
            return
        with open(self.journal, "a") as fh:
            fh.write("\n".join(lines) + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def _rewrite(self) -> None:
        if self.journal is None:
            return
        tmp = self.journal.with_suffix(self.journal.suffix + ".tmp")
        tmp.write_text("".join(format_journal_line(sk) + "\n" for sk in self._order.values()))
        os.replace(tmp, self.journal)

    def _insert(self, dk: DiagnosisKey, origin, stored_at: int, persist: bool = True) -> Optional[StoredKey]:
        if dk.key in self._by_key:
            return None
        self._seq += 1
        sk = StoredKey(dk, origin, stored_at, self._seq)
        self._by_key[dk.key] = sk
        self._order[self._seq] = sk
        return sk

    # -- ingest ------------------------------------------------------
    def ingest_local(self, upload: DiagnosisKeyUpload, now: int) -> UploadReceipt:
        if not self.verifier(upload.authorization_code):
            raise UnauthorizedUpload("authorization code rejected")
        upload.validate()
        origin = LocalOrigin(upload.declared_regions, upload.testing_region)
        with self._lock:
            added = [sk for dk in upload.keys
                     if (sk := self._insert(dk, origin, now)) is not None]
            self._append([format_journal_line(sk) for sk in added])
        return UploadReceipt(len(added))

    def ingest_remote(self, keys: Iterable[DiagnosisKey], source: RegionId, now: int) -> int:
        origin = RemoteOrigin(source)
        with self._lock:
            added = [sk for dk in keys if (sk := self._insert(dk, origin, now)) is not None]
            self._append([format_journal_line(sk) for sk in added])
        return len(added)

    # -- reads -------------------------------------------------------
    @property
    def last_seq(self) -> int:
        return self._seq

    def _check_cursor(self, cursor: int) -> None:
        if not isinstance(cursor, int) or cursor < 0 or cursor > self._seq:
            raise InvalidCursor(f"cursor {cursor!r} outside [0, {self._seq}]")

    def read_since(self, cursor: int) -> list[StoredKey]:
        """All keys (local and remote) stored after ``cursor``."""
        with self._lock:
            self._check_cursor(cursor)
            return [sk for seq, sk in self._order.items() if seq > cursor]

    def read_local_since(self, cursor: int) -> list[StoredKey]:
        return [sk for sk in self.read_since(cursor) if sk.is_local]

    def read_local_for_region(self, region: RegionId, cursor: int) -> list[StoredKey]:
        return [sk for sk in self.read_local_since(cursor)
                if region in sk.origin.declared_regions]

    def get(self, key: bytes) -> Optional[StoredKey]:
        with self._lock:
            return self._by_key.get(key)

    def __len__(self) -> int:
        return len(self._by_key)

    def __iter__(self):
        with self._lock:
            return iter(list(self._order.values()))

    def counts(self) -> dict[str, int]:
        with self._lock:
            local = sum(1 for sk in self._order.values() if sk.is_local)
            return {"local": local, "remote": len(self._order) - local}

    # -- retention ---------------------------------------------------
    def purge_expired(self, policy: RetentionPolicy, now: int) -> int:
        cutoff = policy.cutoff(now)
        with self._lock:
            doomed = [seq for seq, sk in self._order.items() if sk.stored_at <= cutoff]
            for seq in doomed:
                sk = self._order.pop(seq)
                del self._by_key[sk.key.key]
            if doomed:
                self._rewrite()
        if doomed:
            log.info("purged %d expired keys", len(doomed))
        return len(doomed)
