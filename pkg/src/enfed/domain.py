"""Identifiers, key material and region classification.

Time is integer seconds since a fixed simulation epoch. Day ``k`` owns the
15-minute intervals ``[96k, 96k + 95]``.

Rolling proximity identifiers are derived as::

    HMAC-SHA256(key=tek, msg=b"EN-RPI" || uint32_be(interval))[:16]

This is not the GAEN AES construction and does not interoperate with real
devices; it only needs to be deterministic and collision resistant.
"""
from __future__ import annotations

import enum
import hashlib
import hmac
import re
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Optional, Sequence

SECONDS_PER_INTERVAL = 15 * 60
INTERVALS_PER_DAY = 96
SECONDS_PER_DAY = SECONDS_PER_INTERVAL * INTERVALS_PER_DAY
KEY_LEN = 16
METADATA_LEN = 4
MAX_KEYS_PER_UPLOAD = 14
ROAMING_EXPIRY_DAYS = 14
BASE_WINDOW_DAYS = 14

RPI_LABEL = b"EN-RPI"

_REGION_RE = re.compile(r"[A-Z]{2}")


class DomainError(ValueError):
    pass


class MalformedRegionId(DomainError):
    pass


class InvalidHistory(DomainError):
    pass


def interval_of(t: int) -> int:
    return t // SECONDS_PER_INTERVAL


def day_of(t: int) -> int:
    return t // SECONDS_PER_DAY


@dataclass(frozen=True, order=True)
class RegionId:
    code: str

    def __post_init__(self):
        if not isinstance(self.code, str) or not _REGION_RE.fullmatch(self.code):
            raise MalformedRegionId(f"malformed region id: {self.code!r}")

    def __str__(self) -> str:
        return self.code


def validate_region_id(raw: str) -> RegionId:
    return RegionId(raw)


@dataclass(frozen=True)
class VendorId:
    name: str

    def __post_init__(self):
        if not self.name:
            raise DomainError("vendor name must be non-empty")


@dataclass(frozen=True)
class ClusterId:
    name: str
    members: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if not self.name or not self.name.isascii():
            raise DomainError("cluster name must be non-empty ASCII")
        object.__setattr__(self, "members", frozenset(self.members))


def check_cluster_partition(clusters: Iterable[ClusterId]) -> None:
    """Raise if any region belongs to more than one cluster."""
    owner: dict[RegionId, str] = {}
    for cluster in clusters:
        for region in cluster.members:
            if region in owner and owner[region] != cluster.name:
                raise DomainError(
                    f"{region} is in both {owner[region]} and {cluster.name}")
            owner[region] = cluster.name


@dataclass(frozen=True)
class TemporaryExposureKey:
    key: bytes
    valid_day: int

    def __post_init__(self):
        if len(self.key) != KEY_LEN:
            raise DomainError(f"TEK must be {KEY_LEN} bytes, got {len(self.key)}")
        if self.valid_day < 0:
            raise DomainError("valid_day must be non-negative")

    @property
    def first_interval(self) -> int:
        return self.valid_day * INTERVALS_PER_DAY


@dataclass(frozen=True)
class RollingProximityId:
    rpi: bytes
    interval: int

    def __post_init__(self):
        if len(self.rpi) != KEY_LEN:
            raise DomainError(f"RPI must be {KEY_LEN} bytes")


@dataclass(frozen=True)
class ContactEvent:
    observed_id: RollingProximityId
    metadata: bytes
    observed_at: int

    def __post_init__(self):
        if len(self.metadata) != METADATA_LEN:
            raise DomainError(f"metadata must be {METADATA_LEN} bytes")

    @property
    def tx_power(self) -> int:
        return self.metadata[0]


@dataclass(frozen=True)
class DiagnosisKey:
    tek: TemporaryExposureKey

    @property
    def key(self) -> bytes:
        return self.tek.key

    @property
    def valid_day(self) -> int:
        return self.tek.valid_day

    @classmethod
    def of(cls, key: bytes, valid_day: int) -> "DiagnosisKey":
        return cls(TemporaryExposureKey(key, valid_day))


def rolling_id(tek_bytes: bytes, interval: int) -> bytes:
    msg = RPI_LABEL + interval.to_bytes(4, "big")
    return hmac.new(tek_bytes, msg, hashlib.sha256).digest()[:KEY_LEN]


_cached_rolling_id = lru_cache(maxsize=1 << 18)(rolling_id)


@lru_cache(maxsize=65536)
def _derive(tek_bytes: bytes, valid_day: int) -> tuple:
    first = valid_day * INTERVALS_PER_DAY
    return tuple(RollingProximityId(rolling_id(tek_bytes, first + j), first + j)
                 for j in range(INTERVALS_PER_DAY))


def derive_rolling_ids(tek: TemporaryExposureKey) -> list[RollingProximityId]:
    return list(_derive(tek.key, tek.valid_day))


class RegionKind(enum.Enum):
    BASE = "base"
    ROAMING = "roaming"
    NONE = "none"


@dataclass(frozen=True)
class RegionClassification:
    kind: RegionKind
    expires_at: Optional[int] = None

    def __post_init__(self):
        if (self.kind is RegionKind.ROAMING) != (self.expires_at is not None):
            raise DomainError("only roaming classifications carry an expiry")


@dataclass(frozen=True)
class Visit:
    region: RegionId
    enter: int
    exit: int


def _check_history(visits: Sequence[Visit]) -> list[Visit]:
    ordered = sorted(visits, key=lambda v: (v.enter, v.exit))
    for v in ordered:
        if v.exit < v.enter:
            raise InvalidHistory(f"visit to {v.region} exits before it enters")
    for prev, cur in zip(ordered, ordered[1:]):
        if cur.enter < prev.exit:
            raise InvalidHistory(
                f"visits to {prev.region} and {cur.region} overlap")
    return ordered


def classify_region(visit_history: Iterable, region: RegionId, now: int) -> RegionClassification:
    """Classify ``region`` for a user with the given visit history at ``now``.

    Base: every closed 14-day window inside ``[first enter, now]`` intersects a
    visit to the region. Histories shorter than one window are Base as soon as
    they contain any visit. Roaming: not Base and ``now < last exit + 14d``.
    Visits still in progress at ``now`` count as exiting at ``now``.
    """
    visits = _check_history([v if isinstance(v, Visit) else Visit(*v)
                             for v in visit_history])
    visits = [Visit(v.region, v.enter, min(v.exit, now))
              for v in visits if v.enter <= now]
    if not visits:
        return RegionClassification(RegionKind.NONE)
    start = visits[0].enter
    mine = [v for v in visits if v.region == region]
    if not mine:
        return RegionClassification(RegionKind.NONE)

    window = BASE_WINDOW_DAYS * SECONDS_PER_DAY
    if now - start < window:
        return RegionClassification(RegionKind.BASE)
    gaps_ok = (
        mine[0].enter - start <= window
        and all(b.enter - a.exit <= window for a, b in zip(mine, mine[1:]))
        and now - mine[-1].exit <= window
    )
    if gaps_ok:
        return RegionClassification(RegionKind.BASE)

    expires = mine[-1].exit + ROAMING_EXPIRY_DAYS * SECONDS_PER_DAY
    if now < expires:
        return RegionClassification(RegionKind.ROAMING, expires)
    return RegionClassification(RegionKind.NONE)


def match_exposures(contacts: Sequence[ContactEvent],
                    keys: Sequence[DiagnosisKey]) -> list[tuple[ContactEvent, DiagnosisKey]]:
    """Pairs of contacts and the diagnosis keys whose rolling ids they observed.

    Only exact (id, interval) matches; there is no risk scoring. A contact can
    only match keys valid on the day its interval falls in, so each candidate
    costs one derivation at that interval rather than all 96.
    """
    by_day: dict[int, list[DiagnosisKey]] = {}
    for dk in dict.fromkeys(keys):
        by_day.setdefault(dk.valid_day, []).append(dk)
    out = []
    for c in contacts:
        iv = c.observed_id.interval
        for dk in by_day.get(iv // INTERVALS_PER_DAY, ()):
            if _cached_rolling_id(dk.key, iv) == c.observed_id.rpi:
                out.append((c, dk))
    return out
