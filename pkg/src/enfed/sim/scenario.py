"""Scenario files: topology, users, itineraries, contacts and infections.

Scenarios are YAML documents::

    name: f1_alice_bob
    seed: 7
    horizon_days: 8          # events must fall inside [0, horizon)
    settle_hours: 24         # cadences keep running this long afterwards
    cadence: {step: 900, build: 900, poll: 300, download: 3600}
    regions:
      - {id: CH, vendor: v1, cluster: EU}
    clusters:
      - {name: EU, replication: partial}      # or a2a
    links:                                     # optional per-pair overrides
      - {producer: IT, consumer: CH, mode: a2a}   # a2a | partial | none
    users:
      - id: alice
        base: [CH]
        listen: roaming                         # roaming (default) | home
        trips: [{region: IT, enter: 2d08:00, exit: 3d18:00}]
    contacts:
      - {users: [alice, bob], region: CH, at: 2d10:00}
    infections:
      - {user: bob, at: 4d09:00}                # optional tested_in: XX

Times are integer seconds or ``<days>d[HH:MM]``. A user is in their first
base region whenever they are not on a trip. Regions without a cluster
replicate partially with everyone; regions in the same cluster use the
cluster's mode.
"""
from __future__ import annotations

import random
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import yaml

from ..consumer import ReplicationType
from ..domain import BASE_WINDOW_DAYS, SECONDS_PER_DAY, RegionId, Visit

_TIME_RE = re.compile(r"(?P<d>\d+)d(?:(?P<h>\d{1,2}):(?P<m>\d{2}))?")


class InvalidScenario(ValueError):
    pass


def parse_time(raw: Union[int, str]) -> int:
    if isinstance(raw, int):
        return raw
    m = _TIME_RE.fullmatch(str(raw).strip())
    if m is None:
        raise InvalidScenario(f"bad time {raw!r}")
    return (int(m["d"]) * SECONDS_PER_DAY + int(m["h"] or 0) * 3600 + int(m["m"] or 0) * 60)


def format_time(t: int) -> str:
    d, rem = divmod(t, SECONDS_PER_DAY)
    h, rem = divmod(rem, 3600)
    return f"{d}d{h:02d}:{rem // 60:02d}"


@dataclass(frozen=True)
class RegionSpec:
    id: RegionId
    vendor: str = "native"
    cluster: Optional[str] = None


@dataclass(frozen=True)
class Trip:
    region: RegionId
    enter: int
    exit: int


@dataclass(frozen=True)
class UserSpec:
    id: str
    base: tuple
    trips: tuple = ()
    listen: str = "roaming"

    @property
    def home(self) -> RegionId:
        return self.base[0]

    def location(self, t: int) -> RegionId:
        for trip in self.trips:
            if trip.enter <= t < trip.exit:
                return trip.region
        return self.home

    def visits(self, until: int) -> list[Visit]:
        """Trips plus time at home as a gap-free visit history over
        [-14d, until]; users are assumed to have been home before the epoch."""
        out, cursor = [], -BASE_WINDOW_DAYS * SECONDS_PER_DAY
        for trip in sorted(self.trips, key=lambda tr: tr.enter):
            if trip.enter > cursor:
                out.append(Visit(self.home, cursor, trip.enter))
            out.append(Visit(trip.region, trip.enter, trip.exit))
            cursor = trip.exit
        if cursor < until:
            out.append(Visit(self.home, cursor, until))
        return out


@dataclass(frozen=True)
class ContactSpec:
    a: str
    b: str
    region: RegionId
    at: int


@dataclass(frozen=True)
class InfectionSpec:
    user: str
    at: int
    tested_in: Optional[RegionId] = None


@dataclass(frozen=True)
class Cadence:
    step: int = 900
    build: int = 900
    poll: int = 300
    download: int = 3600


@dataclass(frozen=True)
class Scenario:
    name: str
    regions: tuple
    users: tuple
    contacts: tuple = ()
    infections: tuple = ()
    clusters: tuple = ()          # (name, mode) pairs
    links: tuple = ()             # (producer, consumer, mode or None) overrides
    horizon_days: int = 14
    settle_hours: int = 24
    seed: int = 0
    cadence: Cadence = field(default_factory=Cadence)
    upload_keys: int = 14

    # -- derived views ---------------------------------------------------
    @property
    def end(self) -> int:
        return self.horizon_days * SECONDS_PER_DAY + self.settle_hours * 3600

    def region_ids(self) -> list[RegionId]:
        return sorted(r.id for r in self.regions)

    def user(self, uid: str) -> UserSpec:
        for u in self.users:
            if u.id == uid:
                return u
        raise InvalidScenario(f"unknown user {uid!r}")

    def cluster_of(self, region: RegionId) -> Optional[str]:
        for r in self.regions:
            if r.id == region:
                return r.cluster
        raise InvalidScenario(f"unknown region {region}")

    def link_mode(self, producer: RegionId, consumer: RegionId) -> Optional[ReplicationType]:
        """How ``consumer`` pulls from ``producer`` (None: not at all)."""
        for p, c, mode in self.links:
            if p == producer and c == consumer:
                return mode
        cp, cc = self.cluster_of(producer), self.cluster_of(consumer)
        if cp is not None and cp == cc:
            return dict(self.clusters).get(cp, ReplicationType.PARTIAL)
        return ReplicationType.PARTIAL

    def with_listen(self, listen: str) -> "Scenario":
        return replace(self, users=tuple(replace(u, listen=listen) for u in self.users))

    def with_mode(self, mode: ReplicationType) -> "Scenario":
        """Same scenario with every link forced to ``mode``."""
        rids = self.region_ids()
        links = tuple((p, c, mode) for p in rids for c in rids if p != c)
        return replace(self, links=links)

    # -- validation --------------------------------------------------------
    def validate(self) -> "Scenario":
        rids = set(self.region_ids())
        if len(rids) != len(self.regions):
            raise InvalidScenario("duplicate region id")
        owners: dict = {}
        for r in self.regions:
            if r.cluster is not None:
                owners.setdefault(r.cluster, set()).add(r.id)
        for name, _ in self.clusters:
            if name not in owners:
                raise InvalidScenario(f"cluster {name} has no member regions")
        for p, c, _ in self.links:
            if p not in rids or c not in rids or p == c:
                raise InvalidScenario(f"bad link {p}->{c}")
        ids = [u.id for u in self.users]
        if len(set(ids)) != len(ids):
            raise InvalidScenario("duplicate user id")
        if not 1 <= self.upload_keys <= 14:
            raise InvalidScenario("upload_keys must be within 1..14")
        horizon = self.horizon_days * SECONDS_PER_DAY
        for u in self.users:
            if not u.base or any(b not in rids for b in u.base):
                raise InvalidScenario(f"user {u.id}: unknown or missing base region")
            if u.listen not in ("roaming", "home"):
                raise InvalidScenario(f"user {u.id}: listen must be roaming or home")
            trips = sorted(u.trips, key=lambda tr: tr.enter)
            for tr in trips:
                if tr.region not in rids:
                    raise InvalidScenario(f"user {u.id}: trip to unknown region {tr.region}")
                if not 0 <= tr.enter < tr.exit:
                    raise InvalidScenario(f"user {u.id}: trip to {tr.region} has bad times")
            for a, b in zip(trips, trips[1:]):
                if b.enter < a.exit:
                    raise InvalidScenario(f"user {u.id}: overlapping trips")
        users = {u.id: u for u in self.users}
        for c in self.contacts:
            if c.a not in users or c.b not in users or c.a == c.b:
                raise InvalidScenario(f"contact references unknown users {c.a}, {c.b}")
            if not 0 <= c.at < horizon:
                raise InvalidScenario("contact outside horizon")
            for uid in (c.a, c.b):
                if users[uid].location(c.at) != c.region:
                    raise InvalidScenario(
                        f"{uid} is not in {c.region} at {format_time(c.at)}")
        for inf in self.infections:
            if inf.user not in users:
                raise InvalidScenario(f"infection of unknown user {inf.user}")
            if not 0 <= inf.at < horizon:
                raise InvalidScenario("infection outside horizon")
            if inf.tested_in is not None and inf.tested_in not in rids:
                raise InvalidScenario(f"unknown testing region {inf.tested_in}")
        return self


# -- file I/O ----------------------------------------------------------------
def _mode(raw: Optional[str]) -> Optional[ReplicationType]:
    if raw in (None, "none"):
        return None
    try:
        return ReplicationType(raw)
    except ValueError:
        raise InvalidScenario(f"unknown replication mode {raw!r}") from None


def scenario_from_dict(d: dict) -> Scenario:
    try:
        regions = tuple(RegionSpec(RegionId(r["id"]), r.get("vendor", "native"), r.get("cluster"))
                        for r in d["regions"])
        clusters = tuple((c["name"], _mode(c.get("replication", "partial")))
                         for c in d.get("clusters") or ())
        links = tuple((RegionId(ln["producer"]), RegionId(ln["consumer"]), _mode(ln.get("mode")))
                      for ln in d.get("links") or ())
        users = tuple(
            UserSpec(u["id"], tuple(RegionId(b) for b in u["base"]),
                     tuple(Trip(RegionId(t["region"]), parse_time(t["enter"]), parse_time(t["exit"]))
                           for t in u.get("trips") or ()),
                     u.get("listen", "roaming"))
            for u in d["users"])
        contacts = tuple(ContactSpec(c["users"][0], c["users"][1], RegionId(c["region"]),
                                     parse_time(c["at"]))
                         for c in d.get("contacts") or ())
        infections = tuple(InfectionSpec(i["user"], parse_time(i["at"]),
                                         RegionId(i["tested_in"]) if i.get("tested_in") else None)
                           for i in d.get("infections") or ())
        cad = d.get("cadence") or {}
        cadence = Cadence(**{k: int(v) for k, v in cad.items()})
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, InvalidScenario):
            raise
        raise InvalidScenario(f"malformed scenario: {exc}") from exc
    return Scenario(
        name=str(d.get("name", "scenario")), regions=regions, users=users, contacts=contacts,
        infections=infections, clusters=clusters, links=links,
        horizon_days=int(d.get("horizon_days", 14)), settle_hours=int(d.get("settle_hours", 24)),
        seed=int(d.get("seed", 0)), cadence=cadence, upload_keys=int(d.get("upload_keys", 14)),
    ).validate()


def load_scenario(path: Union[str, Path]) -> Scenario:
    return scenario_from_dict(yaml.safe_load(Path(path).read_text()))


# -- random scenarios -------------------------------------------------------
def random_scenario(seed: int, n_regions: int = 3, n_users: int = 30, horizon_days: int = 10,
                    n_contacts: int = 60, n_infections: int = 6, trip_prob: float = 0.5,
                    cluster_mode: Optional[ReplicationType] = ReplicationType.ALL_TO_ALL,
                    cadence: Cadence = Cadence(), name: Optional[str] = None) -> Scenario:
    """Random but valid scenario; regions form one cluster unless ``cluster_mode`` is None."""
    rng = random.Random(seed)
    letters = [chr(ord("A") + i) for i in range(26)]
    rids = [RegionId(f"R{letters[i]}") for i in range(n_regions)]
    regions = tuple(RegionSpec(r, "native", "C1" if cluster_mode else None) for r in rids)
    clusters = (("C1", cluster_mode),) if cluster_mode else ()
    horizon = horizon_days * SECONDS_PER_DAY
    users = []
    for i in range(n_users):
        home = rng.choice(rids)
        trips, t = [], rng.randrange(0, 2 * SECONDS_PER_DAY, 900)
        while rng.random() < trip_prob and t < horizon - SECONDS_PER_DAY:
            dest = rng.choice([r for r in rids if r != home])
            length = rng.randrange(4 * 3600, 3 * SECONDS_PER_DAY, 900)
            trips.append(Trip(dest, t, min(t + length, horizon)))
            t = trips[-1].exit + rng.randrange(3600, 3 * SECONDS_PER_DAY, 900)
        users.append(UserSpec(f"u{i:04d}", (home,), tuple(trips)))
    contacts = []
    for _ in range(n_contacts * 20):
        if len(contacts) >= n_contacts:
            break
        at = rng.randrange(0, horizon - SECONDS_PER_DAY, 900)
        a, b = rng.sample(users, 2)
        if a.location(at) == b.location(at):
            contacts.append(ContactSpec(a.id, b.id, a.location(at), at))
    contacts.sort(key=lambda c: (c.at, c.a, c.b))
    infected = rng.sample(users, min(n_infections, n_users))
    infections = sorted((InfectionSpec(u.id, rng.randrange(SECONDS_PER_DAY, horizon, 900))
                         for u in infected), key=lambda i: (i.at, i.user))
    return Scenario(name or f"random-{seed}", regions, tuple(users), tuple(contacts),
                    tuple(infections), clusters, (), horizon_days, 24, seed, cadence).validate()
