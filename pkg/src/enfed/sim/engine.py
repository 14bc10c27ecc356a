"""Deterministic multi-region simulation over in-process backend nodes.

Each 15-minute step runs, in order: scripted contacts, scripted uploads,
producer builds on every node, consumer polls on every node, retention
purges, then user downloads from subscribed public feeds and local matching.
Nodes are visited in region order so a run is fully reproducible.
"""
from __future__ import annotations

import hashlib
import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Optional

from ..consumer import GONE, NEWEST_HEADER, OK, ReplicationType
from ..crypto import SigningKey
from ..domain import (
    SECONDS_PER_DAY,
    ContactEvent,
    DiagnosisKey,
    RegionId,
    RegionKind,
    RollingProximityId,
    VendorId,
    classify_region,
    day_of,
    interval_of,
    match_exposures,
    rolling_id,
)
from ..keystore import DiagnosisKeyUpload
from ..producer import FeedKind, decode_batch
from ..registry import (
    AccessControlList,
    BackendRecord,
    CertChain,
    Registry,
    cluster_subject,
    issue,
    region_subject,
    self_signed_root,
)
from ..service import (
    BackendNode,
    BackendNodeConfig,
    InProcessNetwork,
    PeerSpec,
    Request,
    SimulatedClock,
    encode_upload,
)
from .scenario import InvalidScenario, Scenario, UserSpec, format_time

log = logging.getLogger(__name__)

UPLOAD_CODE = "SIM-POSITIVE"
ROOT_NAME = "WHO"


def base_url(region: RegionId) -> str:
    return f"sim://{region.code.lower()}"


def tek_bytes(seed: int, user: str, day: int) -> bytes:
    return hashlib.sha256(f"{seed}/tek/{user}/{day}".encode()).digest()[:16]


def subscriptions(user: UserSpec, t: int, listen: Optional[str] = None) -> frozenset:
    """Regions whose public feeds the user listens to at ``t``.

    ``roaming``: base regions plus every region whose classification from the
    visit history is Base or unexpired Roaming. ``home``: base regions only.
    """
    listen = listen or user.listen
    regions = set(user.base)
    if listen == "roaming":
        history = user.visits(t)
        for r in {tr.region for tr in user.trips if tr.enter <= t}:
            if classify_region(history, r, t).kind is not RegionKind.NONE:
                regions.add(r)
    return frozenset(regions)


def declared_regions(user: UserSpec, t: int) -> frozenset:
    """The set S an infected user declares at upload time."""
    return subscriptions(user, t, "roaming")


def requirement_of(exposed: UserSpec, infected: UserSpec, region: RegionId) -> str:
    x_local, y_local = region in exposed.base, region in infected.base
    if x_local and y_local:
        return "local"
    if x_local:
        return "F1"
    if y_local:
        return "F2"
    return "F3"


@dataclass
class UserAgent:
    spec: UserSpec
    seed: int
    contacts: list = field(default_factory=list)
    contact_index: dict = field(default_factory=lambda: defaultdict(list))
    cursors: dict = field(default_factory=dict)
    keys: dict = field(default_factory=dict)
    checked_contacts: int = 0
    bytes_down: int = 0

    @property
    def id(self) -> str:
        return self.spec.id

    def tek(self, day: int) -> bytes:
        return tek_bytes(self.seed, self.id, day)

    def broadcast(self, t: int) -> RollingProximityId:
        iv = interval_of(t)
        return RollingProximityId(rolling_id(self.tek(day_of(t)), iv), iv)

    def record(self, seen: RollingProximityId, t: int, contact_idx: int, partner: str) -> None:
        ev = ContactEvent(seen, bytes([0xC8, 0, 0, 0]), t)
        if ev not in self.contact_index:
            self.contacts.append(ev)
        self.contact_index[ev].append((contact_idx, partner))


@dataclass(frozen=True)
class Verdict:
    requirement: str
    exposed: str
    infected: str
    region: str
    contact: int
    contact_at: str
    upload_at: Optional[str]
    expected: Optional[bool]
    observed: bool
    status: str
    reason: str = ""
    trace: tuple = ()


@dataclass
class SimulationReport:
    scenario: str
    seed: int
    verdicts: list
    link_traffic: dict
    user_bytes: dict
    key_counts: dict
    uploads: list
    timeline: list
    observed: list
    download_digests: dict

    @property
    def violations(self) -> list:
        return [v for v in self.verdicts if v.status == "violation"]

    @property
    def passed(self) -> bool:
        return not self.violations

    def match_set(self) -> frozenset:
        """(exposed, infected, contact index) for every observed notification."""
        return frozenset((o["exposed"], o["infected"], o["contact"]) for o in self.observed)

    def summary(self) -> dict:
        counts: dict = defaultdict(lambda: defaultdict(int))
        for v in self.verdicts:
            counts[v.requirement][v.status] += 1
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "passed": self.passed,
            "violations": len(self.violations),
            "verdicts": {k: dict(sorted(c.items())) for k, c in sorted(counts.items())},
            "notifications": len(self.observed),
            "uploads": len(self.uploads),
            "link_traffic": self.link_traffic,
            "user_bytes_total": sum(self.user_bytes.values()),
            "key_counts": self.key_counts,
        }

    def to_json(self) -> str:
        doc = {"summary": self.summary(),
               "verdicts": [asdict(v) for v in self.verdicts],
               "uploads": self.uploads,
               "observed": self.observed,
               "user_bytes": self.user_bytes,
               "download_digests": self.download_digests,
               "timeline": self.timeline}
        return json.dumps(doc, sort_keys=True, indent=1, default=list)

    def to_text(self) -> str:
        s = self.summary()
        out = [f"scenario {self.scenario} seed {self.seed}: "
               f"{'PASS' if self.passed else 'FAIL'} ({s['violations']} violations)", "", "verdicts:"]
        for v in self.verdicts:
            exp = {True: "expected", False: "not-expected", None: "indeterminate"}[v.expected]
            out.append(f"  [{v.status}] {v.requirement} {v.exposed}<-{v.infected} in {v.region} "
                       f"at {v.contact_at} upload {v.upload_at or '-'}: {exp}, "
                       f"{'notified' if v.observed else 'not notified'}"
                       + (f" ({v.reason})" if v.reason else ""))
            for line in v.trace:
                out.append(f"      {line}")
        out += ["", "replication traffic (producer->consumer bytes/keys/requests):"]
        for link, tr in sorted(self.link_traffic.items()):
            out.append(f"  {link}: {tr['bytes']} B, {tr['keys']} keys, {tr['requests']} req")
        out += ["", "backend key counts:"]
        for region, c in sorted(self.key_counts.items()):
            out.append(f"  {region}: local {c['local']} remote {c['remote']}")
        out += ["", f"user download bytes: total {s['user_bytes_total']}", "", "timeline:"]
        for ev in self.timeline:
            out.append("  " + " ".join(str(x) for x in ev))
        return "\n".join(out) + "\n"


class Simulation:
    def __init__(self, scenario: Scenario, capture_wire: bool = False):
        self.scenario = scenario.validate()
        self.clock = SimulatedClock(0)
        self.network = InProcessNetwork()
        self.network.observers.append(self._account)
        self.capture_wire = capture_wire
        self.wire: list = []
        self.timeline: list = []
        self.link_traffic: dict = defaultdict(lambda: {"bytes": 0, "keys": 0, "requests": 0})
        self.uploads: list = []
        self.observed: dict = {}
        self.key_owner: dict = {}
        self._batch_cache: dict = {}
        self._build_federation()
        self.users = {u.id: UserAgent(u, scenario.seed) for u in scenario.users}

    # -- setup ---------------------------------------------------------------
    def _key(self, label: str) -> SigningKey:
        return SigningKey.from_seed(f"{self.scenario.seed}/{label}".encode())

    def _build_federation(self) -> None:
        sc = self.scenario
        root_key = self._key("root")
        root = self_signed_root(ROOT_NAME, root_key)
        self.registry = Registry(root_key.public_bytes)
        cluster_certs = {}
        cluster_keys = {}
        for name in sorted({r.cluster for r in sc.regions if r.cluster}):
            k = self._key(f"cluster/{name}")
            cluster_keys[name] = k
            cluster_certs[name] = issue(cluster_subject(name), k.public_bytes, root.subject, root_key)
        self.nodes: dict[RegionId, BackendNode] = {}
        chains = {}
        feed_keys = {}
        for spec in sorted(sc.regions, key=lambda r: r.id):
            region_key = self._key(f"region/{spec.id}")
            if spec.cluster:
                cert = issue(region_subject(spec.id), region_key.public_bytes,
                             cluster_certs[spec.cluster].subject, cluster_keys[spec.cluster])
                chain = CertChain(root, cert, cluster_certs[spec.cluster])
            else:
                cert = issue(region_subject(spec.id), region_key.public_bytes, root.subject, root_key)
                chain = CertChain(root, cert)
            feed_keys[spec.id] = self._key(f"feed/{spec.id}")
            record = BackendRecord(spec.id, VendorId(spec.vendor), base_url(spec.id),
                                   feed_keys[spec.id].public_bytes,
                                   frozenset(ReplicationType), spec.cluster).signed_by(region_key)
            verdict = self.registry.register_backend(record, chain)
            if not verdict:
                raise InvalidScenario(f"registration of {spec.id} failed: {verdict.reason}")
            chains[spec.id] = chain
        rids = sc.region_ids()
        for rid in rids:
            acl = AccessControlList()
            a2a_consumers = [c for c in rids
                             if c != rid and sc.link_mode(rid, c) is ReplicationType.ALL_TO_ALL]
            if a2a_consumers:
                acl.allow(FeedKind.a2a(), [region_subject(c) for c in a2a_consumers])
            peers = [PeerSpec(p, sc.link_mode(p, rid)) for p in rids
                     if p != rid and sc.link_mode(p, rid) is not None]
            cfg = BackendNodeConfig(
                region=rid, signing_key=feed_keys[rid], identity=chains[rid],
                cluster=sc.cluster_of(rid), poll_interval=sc.cadence.poll,
                build_interval=sc.cadence.build, peers=peers, acl=acl,
                upload_codes=(UPLOAD_CODE,))
            node = BackendNode(cfg, self.registry, self.network, self.clock, self._event)
            self.network.attach(base_url(rid), node)
            self.nodes[rid] = node
        for node in self.nodes.values():
            node.resolve_peers()

    # -- observers -----------------------------------------------------------
    def _event(self, kind: str, node: RegionId, at: int, **data) -> None:
        if kind == "ingest" and data.get("keys") == 0:
            return
        detail = " ".join(f"{k}={v}" for k, v in sorted(data.items()))
        self.timeline.append((format_time(at), kind, str(node), detail))

    def _account(self, who: str, region: RegionId, request: Request, resp) -> None:
        if request.method != "GET":
            return
        if self.capture_wire:
            self.wire.append((str(region), request.path, resp.status, resp.body))
        if who.startswith("region:"):
            link = self.link_traffic[f"{region}->{who[7:]}"]
            link["requests"] += 1
            link["bytes"] += len(resp.body)
            if resp.status == OK and resp.body:
                link["keys"] += int.from_bytes(resp.body[22:26], "big")
        elif who.startswith("user:"):
            self.users[who[5:]].bytes_down += len(resp.body)

    # -- step phases ---------------------------------------------------------
    def _do_contacts(self, batch) -> None:
        for idx, c in batch:
            a, b = self.users[c.a], self.users[c.b]
            a.record(b.broadcast(c.at), c.at, idx, b.id)
            b.record(a.broadcast(c.at), c.at, idx, a.id)

    def _do_infection(self, inf) -> None:
        user = self.users[inf.user]
        spec = user.spec
        tested = inf.tested_in or spec.home
        s = declared_regions(spec, inf.at)
        entry = {"user": spec.id, "at": format_time(inf.at), "backend": str(spec.home),
                 "declared": sorted(r.code for r in s)}
        if tested not in spec.base:
            entry["status"] = "unsupported-roaming-upload"
            self.uploads.append(entry)
            self.timeline.append((format_time(inf.at), "upload-unsupported", str(tested), spec.id))
            return
        d = day_of(inf.at)
        days = range(max(0, d - self.scenario.upload_keys + 1), d + 1)
        keys = [DiagnosisKey.of(user.tek(day), day) for day in days]
        for dk in keys:
            self.key_owner[dk.key] = spec.id
        upload = DiagnosisKeyUpload(keys, s, spec.home, inf.at, UPLOAD_CODE)
        resp = self.network.post(base_url(spec.home), "/v1/keys", encode_upload(upload))
        entry["status"] = "stored" if resp.status == OK else f"http-{resp.status}"
        entry["keys"] = len(keys)
        self.uploads.append(entry)

    def _fetch(self, user: UserAgent, region: RegionId, path: str):
        return self.network.request(base_url(region), Request("GET", path), requester=f"user:{user.id}")

    def _download(self, user: UserAgent, t: int) -> None:
        fresh = []
        for region in sorted(subscriptions(user.spec, t)):
            cursor = user.cursors.get(region, 0)
            while True:
                resp = self._fetch(user, region, f"/v1/keys/{cursor + 1}")
                if resp.status == OK:
                    ck = (region, cursor + 1)
                    if ck not in self._batch_cache:
                        self._batch_cache[ck] = decode_batch(resp.body).keys
                    for k, d in self._batch_cache[ck]:
                        if k not in user.keys:
                            user.keys[k] = dk = DiagnosisKey.of(k, d)
                            fresh.append(dk)
                    cursor += 1
                elif resp.status == GONE:
                    oldest = self._fetch(user, region, "/v1/keys")
                    if oldest.status == OK:
                        cursor = decode_batch(oldest.body).batch_id - 1
                    else:
                        cursor = int(oldest.header(NEWEST_HEADER) or 0)
                else:
                    break
            user.cursors[region] = cursor
        old = user.contacts[:user.checked_contacts]
        new = user.contacts[user.checked_contacts:]
        user.checked_contacts = len(user.contacts)
        # GAEN-style matching: every contact against every held key, done incrementally
        hits = match_exposures(old, fresh) if fresh else []
        if new:
            hits += match_exposures(new, list(user.keys.values()))
        for ev, dk in hits:
            owner = self.key_owner.get(dk.key, "?")
            for idx, partner in user.contact_index[ev]:
                k = (user.id, idx)
                if k not in self.observed:
                    self.observed[k] = {"exposed": user.id, "infected": owner, "partner": partner,
                                        "contact": idx, "at": format_time(t)}

    # -- main loop -----------------------------------------------------------
    def run(self) -> SimulationReport:
        sc = self.scenario
        step = sc.cadence.step
        contacts = defaultdict(list)
        for idx, c in enumerate(sc.contacts):
            contacts[c.at // step].append((idx, c))
        infections = defaultdict(list)
        for inf in sc.infections:
            infections[inf.at // step].append(inf)
        horizon = sc.horizon_days * SECONDS_PER_DAY
        order = sorted(self.nodes)
        users = sorted(self.users)
        for t in range(0, sc.end, step):
            self.clock.t = t
            k = t // step
            if t < horizon:
                self._do_contacts(contacts.get(k, ()))
                for inf in infections.get(k, ()):
                    self.clock.t = max(t, inf.at)
                    self._do_infection(inf)
                    self.clock.t = t
            for r in order:
                self.nodes[r].build_if_due(t)
            for r in order:
                self.nodes[r].poll_due(t)
            for r in order:
                self.nodes[r].purge_if_due(t)
            if t % sc.cadence.download == 0:
                for uid in users:
                    self._download(self.users[uid], t)
        return self._report()

    def _report(self) -> SimulationReport:
        observed = sorted(self.observed.values(), key=lambda o: (o["contact"], o["exposed"]))
        verdicts = compute_verdicts(self.scenario, self.observed, self)
        digests = {uid: hashlib.sha256(b"".join(sorted(u.keys))).hexdigest()[:16]
                   for uid, u in sorted(self.users.items())}
        return SimulationReport(
            scenario=self.scenario.name, seed=self.scenario.seed, verdicts=verdicts,
            link_traffic={k: dict(v) for k, v in sorted(self.link_traffic.items())},
            user_bytes={uid: u.bytes_down for uid, u in sorted(self.users.items())},
            key_counts={str(r): n.store.counts() for r, n in sorted(self.nodes.items())},
            uploads=self.uploads, timeline=[list(e) for e in self.timeline],
            observed=observed, download_digests=digests)

    def uploaded_keys(self) -> frozenset:
        return frozenset(self.key_owner)


def holders(scenario: Scenario, home: RegionId, declared: frozenset) -> frozenset:
    """Backends that end up serving an upload's keys on their public feed."""
    out = {home}
    for r in scenario.region_ids():
        if r == home:
            continue
        mode = scenario.link_mode(home, r)
        if mode is ReplicationType.ALL_TO_ALL or (mode is ReplicationType.PARTIAL and r in declared):
            out.add(r)
    return frozenset(out)


def compute_verdicts(scenario: Scenario, observed: dict, sim: Optional[Simulation] = None) -> list:
    """Compare scripted expectations with observed notifications.

    The expectation is derived from the scenario alone: which backends must
    hold the infected user's keys, and whether the exposed user listens to
    one of them once replication has had time to settle.
    """
    cad = scenario.cadence
    latency = 2 * cad.build + cad.poll + 2 * cad.step + cad.download
    grid = range(0, scenario.end, cad.download)
    infections = defaultdict(list)
    for inf in scenario.infections:
        infections[inf.user].append(inf)
    subs_cache: dict = {}

    def subs(user: UserSpec, t: int) -> frozenset:
        key = (user.id, t)
        if key not in subs_cache:
            subs_cache[key] = subscriptions(user, t)
        return subs_cache[key]

    verdicts = []
    seen_pairs = set()
    for idx, c in enumerate(scenario.contacts):
        for x_id, y_id in ((c.a, c.b), (c.b, c.a)):
            x, y = scenario.user(x_id), scenario.user(y_id)
            if not infections.get(y_id):
                continue
            seen_pairs.add((x_id, idx))
            req = requirement_of(x, y, c.region)
            obs = (x_id, idx) in observed
            covering = [inf for inf in infections[y_id]
                        if day_of(inf.at) - scenario.upload_keys + 1 <= day_of(c.at) <= day_of(inf.at)]
            if not covering:
                verdicts.append(Verdict(req, x_id, y_id, str(c.region), idx, format_time(c.at), None,
                                        False, obs, "violation" if obs else "not-expected",
                                        "contact outside every uploaded key window"))
                continue
            inf = covering[0]
            tested = inf.tested_in or y.home
            if tested not in y.base:
                verdicts.append(Verdict(req, x_id, y_id, str(c.region), idx, format_time(c.at),
                                        format_time(inf.at), False, obs,
                                        "violation" if obs else "expected-miss",
                                        "roaming upload (F4) unsupported in phase I"))
                continue
            declared = declared_regions(y, inf.at)
            held = holders(scenario, y.home, declared)
            after = [t for t in grid if t >= inf.at + latency]
            during = [t for t in grid if inf.at <= t < inf.at + latency]
            if any(subs(x, t) & held for t in after):
                expected = True
            elif any(subs(x, t) & held for t in during):
                expected = None
            else:
                expected = False
            if expected is None:
                status = "indeterminate"
            elif expected == obs:
                status = "notified" if obs else ("expected-miss" if c.region not in declared
                                                 else "not-expected")
            else:
                status = "violation"
            reason = ""
            if expected is False:
                reason = ("contact region not declared by infected user" if c.region not in declared
                          else "exposed user does not listen to any backend holding the keys")
            trace = ()
            if status == "violation":
                trace = _trace(scenario, sim, x, y, c, inf, declared, held, after)
            verdicts.append(Verdict(req, x_id, y_id, str(c.region), idx, format_time(c.at),
                                    format_time(inf.at), expected, obs, status, reason, trace))
    for (x_id, idx), o in sorted(observed.items()):
        if (x_id, idx) not in seen_pairs or o["infected"] != o["partner"]:
            c = scenario.contacts[idx]
            verdicts.append(Verdict("spurious", x_id, o["infected"], str(c.region), idx,
                                    format_time(c.at), None, False, True, "violation",
                                    "notification without a matching scripted contact"))
    return verdicts


def _trace(scenario, sim, x, y, c, inf, declared, held, after) -> tuple:
    lines = [f"{y.id} uploaded at {format_time(inf.at)} to {y.home} declaring "
             f"{','.join(sorted(r.code for r in declared))}",
             f"backends expected to hold the keys: {','.join(sorted(r.code for r in held))}"]
    if after:
        lines.append(f"{x.id} listens at {format_time(after[0])} to "
                     f"{','.join(sorted(r.code for r in subscriptions(x, after[0])))}")
    if sim is not None:
        tek = tek_bytes(scenario.seed, y.id, day_of(c.at))
        for r in sorted(held):
            present = sim.nodes[r].store.get(tek) is not None
            lines.append(f"backend {r} {'stores' if present else 'lacks'} the contact-day key")
        lines.append(f"{x.id} downloaded the contact-day key: {tek in sim.users[x.id].keys}")
    return tuple(lines)


def run_scenario(scenario: Scenario, capture_wire: bool = False) -> SimulationReport:
    return Simulation(scenario, capture_wire).run()


@dataclass(frozen=True)
class Alt2Result:
    applicable: bool
    equivalent: Optional[bool]
    reason: str = ""
    base_matches: frozenset = frozenset()
    alt2_matches: frozenset = frozenset()


def check_alt2_equivalence(scenario: Scenario) -> Alt2Result:
    """Roaming-feed listening vs home-feed-only listening on an a2a cluster."""
    rids = scenario.region_ids()
    clusters = {scenario.cluster_of(r) for r in rids}
    if len(clusters) != 1 or None in clusters:
        return Alt2Result(False, None, "regions do not form a single cluster")
    for p in rids:
        for c in rids:
            if p != c and scenario.link_mode(p, c) is not ReplicationType.ALL_TO_ALL:
                return Alt2Result(False, None, f"link {p}->{c} is not all-to-all")
    base = run_scenario(scenario.with_listen("roaming")).match_set()
    alt2 = run_scenario(scenario.with_listen("home")).match_set()
    return Alt2Result(True, base == alt2, "" if base == alt2 else "match sets differ", base, alt2)


def measure_replication_traffic(report: SimulationReport) -> dict:
    """Bytes and keys per producer->consumer link, as recorded during the run."""
    return {link: {"bytes": t["bytes"], "keys": t["keys"]} for link, t in report.link_traffic.items()}


@dataclass(frozen=True)
class TrafficComparison:
    partial: dict
    a2a: dict
    partial_bytes: int
    a2a_bytes: int
    partial_keys: int
    a2a_keys: int

    @property
    def partial_le_a2a(self) -> bool:
        return self.partial_bytes <= self.a2a_bytes and self.partial_keys <= self.a2a_keys


def compare_replication_modes(scenario: Scenario) -> TrafficComparison:
    partial = measure_replication_traffic(run_scenario(scenario.with_mode(ReplicationType.PARTIAL)))
    a2a = measure_replication_traffic(run_scenario(scenario.with_mode(ReplicationType.ALL_TO_ALL)))
    return TrafficComparison(partial, a2a,
                             sum(v["bytes"] for v in partial.values()),
                             sum(v["bytes"] for v in a2a.values()),
                             sum(v["keys"] for v in partial.values()),
                             sum(v["keys"] for v in a2a.values()))
