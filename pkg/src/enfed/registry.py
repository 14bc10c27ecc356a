"""Backend directory with a root -> cluster -> region certificate hierarchy.

Certificates are self-contained canonical records, not X.509. A deployment
would map each record onto an X.509 certificate issued by the same CA tree.
"""
from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Union

from .consumer import ReplicationType
from .crypto import SigningKey, verify
from .domain import RegionId, VendorId
from .producer import FeedKind, Kind

FILE_MAGIC = "ENREG 1"


class NotFound(KeyError):
    pass


class RegistryFileError(ValueError):
    pass


def root_subject(name: str) -> str:
    return f"root:{name}"


def cluster_subject(name: str) -> str:
    return f"cluster:{name}"


def region_subject(region: RegionId) -> str:
    return f"region:{region}"


@dataclass(frozen=True)
class Certificate:
    subject: str
    issuer: str
    public_key: bytes
    signature: bytes = b""

    def tbs(self) -> bytes:
        return f"CERT|{self.subject}|{self.issuer}|{self.public_key.hex()}".encode()

    def to_json(self) -> dict:
        return {"subject": self.subject, "issuer": self.issuer,
                "public_key": self.public_key.hex(), "signature": self.signature.hex()}

    @classmethod
    def from_json(cls, d: Mapping) -> "Certificate":
        return cls(d["subject"], d["issuer"], bytes.fromhex(d["public_key"]),
                   bytes.fromhex(d["signature"]))


def issue(subject: str, public_key: bytes, issuer: str, issuer_key: SigningKey) -> Certificate:
    unsigned = Certificate(subject, issuer, public_key)
    return Certificate(subject, issuer, public_key, issuer_key.sign(unsigned.tbs()))


def self_signed_root(name: str, key: SigningKey) -> Certificate:
    subject = root_subject(name)
    return issue(subject, key.public_bytes, subject, key)


@dataclass(frozen=True)
class CertChain:
    root_cert: Certificate
    region_cert: Certificate
    cluster_cert: Optional[Certificate] = None

    @property
    def subject(self) -> str:
        return self.region_cert.subject

    @property
    def issuers(self) -> tuple:
        """Every CA subject above the leaf, nearest first."""
        if self.cluster_cert is None:
            return (self.root_cert.subject,)
        return (self.cluster_cert.subject, self.root_cert.subject)

    def to_json(self) -> dict:
        return {"root": self.root_cert.to_json(),
                "cluster": self.cluster_cert.to_json() if self.cluster_cert else None,
                "region": self.region_cert.to_json()}

    @classmethod
    def from_json(cls, d: Mapping) -> "CertChain":
        return cls(Certificate.from_json(d["root"]), Certificate.from_json(d["region"]),
                   Certificate.from_json(d["cluster"]) if d.get("cluster") else None)


@dataclass(frozen=True)
class ChainVerdict:
    valid: bool
    broken_link: Optional[str] = None
    reason: Optional[str] = None

    def __bool__(self) -> bool:
        return self.valid


def _link_ok(cert: Certificate, issuer: Certificate) -> bool:
    return cert.issuer == issuer.subject and verify(issuer.public_key, cert.signature, cert.tbs())


def verify_chain(chain: CertChain, trusted_root: bytes) -> ChainVerdict:
    root, cluster, leaf = chain.root_cert, chain.cluster_cert, chain.region_cert
    if root.public_key != trusted_root:
        return ChainVerdict(False, "root", "root key is not the trusted root")
    if not _link_ok(root, root):
        return ChainVerdict(False, "root", "root self-signature invalid")
    parent = root
    if cluster is not None:
        if not cluster.subject.startswith("cluster:"):
            return ChainVerdict(False, "cluster", "cluster subject malformed")
        if not _link_ok(cluster, root):
            return ChainVerdict(False, "cluster", "cluster cert not signed by root")
        parent = cluster
    if not leaf.subject.startswith("region:"):
        return ChainVerdict(False, "region", "region subject malformed")
    if not _link_ok(leaf, parent):
        return ChainVerdict(False, "region", f"region cert not signed by {parent.subject}")
    return ChainVerdict(True)


@dataclass(frozen=True)
class BackendRecord:
    region: RegionId
    vendor: VendorId
    base_url: str
    feed_verification_key: bytes
    replication_offered: frozenset
    cluster: Optional[str] = None
    signature: bytes = b""

    def __post_init__(self):
        object.__setattr__(self, "replication_offered", frozenset(self.replication_offered))

    def tbs(self) -> bytes:
        body = {"region": self.region.code, "cluster": self.cluster, "vendor": self.vendor.name,
                "base_url": self.base_url, "feed_verification_key": self.feed_verification_key.hex(),
                "replication_offered": sorted(r.value for r in self.replication_offered)}
        return json.dumps(body, sort_keys=True, separators=(",", ":")).encode()

    def signed_by(self, key: SigningKey) -> "BackendRecord":
        return BackendRecord(self.region, self.vendor, self.base_url, self.feed_verification_key,
                             self.replication_offered, self.cluster, key.sign(self.tbs()))

    def to_json(self) -> dict:
        d = json.loads(self.tbs())
        d["signature"] = self.signature.hex()
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "BackendRecord":
        return cls(RegionId(d["region"]), VendorId(d["vendor"]), d["base_url"],
                   bytes.fromhex(d["feed_verification_key"]),
                   frozenset(ReplicationType(v) for v in d["replication_offered"]),
                   d.get("cluster"), bytes.fromhex(d["signature"]))


@dataclass(frozen=True)
class RegistrationVerdict:
    accepted: bool
    reason: Optional[str] = None

    def __bool__(self) -> bool:
        return self.accepted


def check_record(record: BackendRecord, chain: CertChain, trusted_root: bytes) -> RegistrationVerdict:
    verdict = verify_chain(chain, trusted_root)
    if not verdict:
        return RegistrationVerdict(False, f"chain broken at {verdict.broken_link}: {verdict.reason}")
    if chain.region_cert.subject != region_subject(record.region):
        return RegistrationVerdict(False, "certificate subject does not match record region")
    if record.cluster is not None and (chain.cluster_cert is None
                                       or chain.cluster_cert.subject != cluster_subject(record.cluster)):
        return RegistrationVerdict(False, "record cluster does not match chain")
    if not verify(chain.region_cert.public_key, record.signature, record.tbs()):
        return RegistrationVerdict(False, "record signature invalid")
    return RegistrationVerdict(True)


class Registry:
    """Signed flat-file directory of backends, keyed by region."""

    def __init__(self, trusted_root: bytes):
        self.trusted_root = trusted_root
        self._records: dict[RegionId, tuple[BackendRecord, CertChain]] = {}
        self._lock = threading.Lock()

    def register_backend(self, record: BackendRecord, chain: CertChain) -> RegistrationVerdict:
        verdict = check_record(record, chain, self.trusted_root)
        if verdict:
            with self._lock:
                self._records[record.region] = (record, chain)
        return verdict

    def lookup(self, region: RegionId) -> BackendRecord:
        try:
            return self._records[region][0]
        except KeyError:
            raise NotFound(str(region)) from None

    def chain_for(self, region: RegionId) -> CertChain:
        try:
            return self._records[region][1]
        except KeyError:
            raise NotFound(str(region)) from None

    def regions(self) -> list[RegionId]:
        return sorted(self._records)

    def __contains__(self, region: RegionId) -> bool:
        return region in self._records

    # -- file format ---------------------------------------------------
    def dumps(self) -> str:
        lines = [FILE_MAGIC, f"ROOT {self.trusted_root.hex()}"]
        for region in self.regions():
            record, chain = self._records[region]
            entry = {"record": record.to_json(), "chain": chain.to_json()}
            lines.append("RECORD " + json.dumps(entry, sort_keys=True, separators=(",", ":")))
        return "\n".join(lines) + "\n"

    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(self.dumps())
        tmp.replace(path)

    @classmethod
    def parse(cls, text: str, strict: bool = True) -> tuple["Registry", list[str]]:
        """Parse a registry file; returns the registry and a list of rejected entries.

        With ``strict`` any rejected entry raises instead.
        """
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0] != FILE_MAGIC:
            raise RegistryFileError("missing registry header")
        if len(lines) < 2 or not lines[1].startswith("ROOT "):
            raise RegistryFileError("missing trusted root line")
        reg = cls(bytes.fromhex(lines[1][5:]))
        problems = []
        for n, line in enumerate(lines[2:], 3):
            try:
                if not line.startswith("RECORD "):
                    raise ValueError("unknown line type")
                entry = json.loads(line[7:])
                record = BackendRecord.from_json(entry["record"])
                chain = CertChain.from_json(entry["chain"])
            except (ValueError, KeyError, TypeError) as exc:
                problems.append(f"line {n}: unparseable ({exc})")
                continue
            verdict = reg.register_backend(record, chain)
            if not verdict:
                problems.append(f"line {n}: {record.region} rejected: {verdict.reason}")
        if strict and problems:
            raise RegistryFileError("; ".join(problems))
        return reg, problems

    @classmethod
    def load(cls, path: Union[str, Path], strict: bool = True) -> "Registry":
        return cls.parse(Path(path).read_text(), strict)[0]


@dataclass
class AccessControlList:
    """Per-feed allow lists of certificate subjects (leaf or issuing CA).

    Feeds without an explicit entry fall back to defaults: the public feed is
    open, a per-region feed admits only the backend registered for that
    region, and the a2a feed admits nobody.
    """
    entries: dict = field(default_factory=dict)

    def allow(self, feed: FeedKind, subjects: Iterable[str]) -> None:
        self.entries.setdefault(feed, set()).update(subjects)

    def listed(self, feed: FeedKind) -> Optional[set]:
        return self.entries.get(feed)


def authorize_feed(acl: AccessControlList, feed: FeedKind, identity: Optional[CertChain],
                   registry: Optional[Registry] = None) -> bool:
    if feed.kind is Kind.PUBLIC:
        return True
    if identity is None:
        return False
    if registry is not None and not verify_chain(identity, registry.trusted_root):
        return False
    listed = acl.listed(feed)
    if listed is not None:
        return identity.subject in listed or any(ca in listed for ca in identity.issuers)
    if feed.kind is Kind.REGION:
        if identity.subject != region_subject(feed.region):
            return False
        if registry is None:
            return True
        try:
            registered = registry.chain_for(feed.region)
        except NotFound:
            return False
        return registered.region_cert.public_key == identity.region_cert.public_key
    return False
