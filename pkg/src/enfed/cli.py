"""``en``: run a backend node, manage the registry file, drive the simulator.

Exit codes: 0 success, 1 runtime error, 2 usage error, 3 the simulator
found a requirement violation (or non-equivalent listening modes).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import secrets
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .consumer import ReplicationType
from .crypto import SigningKey
from .domain import DomainError, RegionId, VendorId
from .registry import (
    BackendRecord,
    CertChain,
    Registry,
    RegistryFileError,
    cluster_subject,
    issue,
    region_subject,
    self_signed_root,
)
from .service import BackendNodeConfig, SimulatedClock, TlsCredential, real_clock, run_node
from .sim import check_alt2_equivalence, estimate_bandwidth, load_scenario, run_scenario

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_VERDICT = 0, 1, 2, 3

log = logging.getLogger("enfed")


class UsageError(Exception):
    pass


def region_arg(raw: str) -> RegionId:
    try:
        return RegionId(raw)
    except DomainError:
        raise argparse.ArgumentTypeError(f"not a two-letter upper-case region id: {raw!r}") from None


def positive(raw: str) -> float:
    try:
        value = float(raw)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {raw!r}") from None
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be positive: {raw!r}")
    return value


# Key files hold a hex seed; SigningKey.from_seed turns it into the Ed25519 key,
# which matches the ``signing_key_seed`` field of node config files.
def read_key(path: Path) -> SigningKey:
    return SigningKey.from_seed(bytes.fromhex(Path(path).read_text().strip()))


def new_key(path: Path) -> SigningKey:
    seed = secrets.token_bytes(32)
    path = Path(path)
    path.write_text(seed.hex() + "\n")
    os.chmod(path, 0o600)
    return SigningKey.from_seed(seed)


def load_or_create_key(path: Path) -> SigningKey:
    return read_key(path) if Path(path).exists() else new_key(path)


# -- serve -------------------------------------------------------------------
def cmd_serve(args) -> int:
    config = BackendNodeConfig.from_yaml(args.config, args.region.code if args.region else None)
    if args.listen:
        config.listen = args.listen
    registry = Registry.load(args.registry)
    tls = None
    if args.tls_cert:
        if not (args.tls_key and args.tls_ca):
            raise UsageError("--tls-cert needs --tls-key and --tls-ca")
        tls = TlsCredential(args.tls_cert, args.tls_key, args.tls_ca)
        config.tls = tls
    clock = SimulatedClock(0) if args.clock == "simulated" else real_clock
    handle = run_node(config, registry, clock=clock, tls=tls, tick_seconds=args.tick)
    where = handle.binding.url if handle.binding else "(no listener)"
    print(f"backend {config.region} serving on {where}", flush=True)
    deadline = None if args.duration is None else time.monotonic() + args.duration
    try:
        while deadline is None or time.monotonic() < deadline:
            time.sleep(args.tick)
            if isinstance(clock, SimulatedClock):
                clock.advance(args.sim_step)
    except KeyboardInterrupt:
        pass
    finally:
        handle.stop()
    return EXIT_OK


# -- registry ----------------------------------------------------------------
def cmd_registry_init(args) -> int:
    path = Path(args.file)
    if path.exists() and not args.force:
        raise UsageError(f"{path} exists (use --force to overwrite)")
    root_key = load_or_create_key(Path(args.root_key))
    Registry(root_key.public_bytes).save(path)
    print(f"initialised {path} with root {args.root_name} ({root_key.public_bytes.hex()})")
    return EXIT_OK


def _chain_for_new_backend(args, region_key: SigningKey) -> CertChain:
    root_key = read_key(Path(args.root_key))
    root = self_signed_root(args.root_name, root_key)
    if args.cluster:
        if not args.cluster_key:
            raise UsageError("--cluster needs --cluster-key")
        ck = load_or_create_key(Path(args.cluster_key))
        ccert = issue(cluster_subject(args.cluster), ck.public_bytes, root.subject, root_key)
        cert = issue(region_subject(args.region), region_key.public_bytes, ccert.subject, ck)
        return CertChain(root, cert, ccert)
    cert = issue(region_subject(args.region), region_key.public_bytes, root.subject, root_key)
    return CertChain(root, cert)


def cmd_registry_add(args) -> int:
    registry = Registry.load(args.file)
    if args.entry:
        entry = json.loads(Path(args.entry).read_text())
        record = BackendRecord.from_json(entry["record"])
        chain = CertChain.from_json(entry["chain"])
    else:
        missing = [f for f in ("region", "url", "root_key", "backend_key") if getattr(args, f) is None]
        if missing:
            raise UsageError("without --entry, these are required: "
                             + ", ".join("--" + m.replace("_", "-") for m in missing))
        region_key = load_or_create_key(Path(args.backend_key))
        chain = _chain_for_new_backend(args, region_key)
        modes = frozenset(ReplicationType(m) for m in args.replication)
        record = BackendRecord(args.region, VendorId(args.vendor), args.url,
                               region_key.public_bytes, modes, args.cluster).signed_by(region_key)
    verdict = registry.register_backend(record, chain)
    if not verdict:
        print(f"rejected: {verdict.reason}", file=sys.stderr)
        return EXIT_RUNTIME
    registry.save(args.file)
    print(f"registered {record.region} at {record.base_url}")
    return EXIT_OK


def cmd_registry_verify(args) -> int:
    registry, problems = Registry.parse(Path(args.file).read_text(), strict=False)
    for p in problems:
        print(p)
    print(f"{len(registry.regions())} valid records, {len(problems)} rejected")
    return EXIT_RUNTIME if problems else EXIT_OK


def cmd_registry_list(args) -> int:
    registry = Registry.load(args.file, strict=False)
    for region in registry.regions():
        r = registry.lookup(region)
        modes = ",".join(sorted(m.value for m in r.replication_offered))
        print(f"{region}\t{r.vendor.name}\t{r.cluster or '-'}\t{modes}\t{r.base_url}")
    return EXIT_OK


# -- sim -----------------------------------------------------------------------
def _scenario(args):
    scenario = load_scenario(args.file)
    if args.seed is not None:
        scenario = replace(scenario, seed=args.seed)
    return scenario


def cmd_sim_run(args) -> int:
    report = run_scenario(_scenario(args))
    text = report.to_json() if args.format == "json" else report.to_text()
    if args.report:
        Path(args.report).write_text(text)
        print(f"{report.scenario}: {'PASS' if report.passed else 'FAIL'}; report written to {args.report}")
    else:
        sys.stdout.write(text)
    return EXIT_OK if report.passed else EXIT_VERDICT


def cmd_sim_check_alt2(args) -> int:
    result = check_alt2_equivalence(_scenario(args))
    if not result.applicable:
        print(f"not applicable: {result.reason}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"roaming listening: {len(result.base_matches)} matches; "
          f"home listening: {len(result.alt2_matches)} matches; "
          f"{'equivalent' if result.equivalent else 'DIFFERENT'}")
    return EXIT_OK if result.equivalent else EXIT_VERDICT


def cmd_sim_bandwidth(args) -> int:
    est = estimate_bandwidth(args.keys, args.key_bytes, args.infections, args.population)
    doc = {"per_user_bytes_per_day": est.per_user_bytes_per_day,
           "aggregate_bytes_per_day": est.aggregate_bytes_per_day,
           "sustained_bits_per_second": est.sustained_bits_per_second,
           **est.rounded()}
    if args.json:
        print(json.dumps(doc, sort_keys=True))
    else:
        for k, v in doc.items():
            print(f"{k}: {int(v) if float(v).is_integer() else v}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------
def build_parser(prog: str = "en") -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog=prog, description="Federated exposure-notification backend tools.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="subcommands:\n"
               "  serve\n"
               "  registry init | add | verify | list\n"
               "  sim run | check-alt2 | estimate-bandwidth\n\n"
               "exit codes: 0 ok, 1 runtime error, 2 usage error, 3 verdict failure")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--log-level", default="WARNING",
                   choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    p.add_argument("--clock", choices=["real", "simulated"], default="real",
                   help="time source for serve (the simulator always uses simulated time)")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("serve", help="run a backend node")
    s.add_argument("--region", type=region_arg, help="overrides the config's region")
    s.add_argument("--config", required=True, help="node YAML config")
    s.add_argument("--registry", required=True, help="registry file")
    s.add_argument("--listen", help="host:port to bind")
    s.add_argument("--tls-cert")
    s.add_argument("--tls-key")
    s.add_argument("--tls-ca")
    s.add_argument("--tick", type=positive, default=1.0, help="seconds between cadence checks")
    s.add_argument("--sim-step", type=int, default=900,
                   help="simulated seconds per tick with --clock simulated")
    s.add_argument("--duration", type=positive, help="stop after this many seconds")
    s.set_defaults(func=cmd_serve)

    r = sub.add_parser("registry", help="manage the signed backend registry file")
    rsub = r.add_subparsers(dest="registry_command", required=True, metavar="ACTION")
    ri = rsub.add_parser("init", help="create an empty registry trusting a root key")
    ri.add_argument("file")
    ri.add_argument("--root-key", required=True, help="root key file (created if missing)")
    ri.add_argument("--root-name", default="ROOT")
    ri.add_argument("--force", action="store_true")
    ri.set_defaults(func=cmd_registry_init)

    ra = rsub.add_parser("add", help="register a backend")
    ra.add_argument("file")
    ra.add_argument("--entry", help="JSON file with a pre-signed record and chain")
    ra.add_argument("--region", type=region_arg)
    ra.add_argument("--url")
    ra.add_argument("--vendor", default="native")
    ra.add_argument("--cluster")
    ra.add_argument("--replication", nargs="+", choices=["a2a", "partial"],
                    default=["a2a", "partial"])
    ra.add_argument("--root-key")
    ra.add_argument("--root-name", default="ROOT")
    ra.add_argument("--cluster-key", help="cluster CA key file (created if missing)")
    ra.add_argument("--backend-key", help="backend key file (created if missing)")
    ra.set_defaults(func=cmd_registry_add)

    rv = rsub.add_parser("verify", help="check every record and chain in a registry file")
    rv.add_argument("file")
    rv.set_defaults(func=cmd_registry_verify)

    rl = rsub.add_parser("list", help="list registered backends")
    rl.add_argument("file")
    rl.set_defaults(func=cmd_registry_list)

    m = sub.add_parser("sim", help="run the simulator")
    msub = m.add_subparsers(dest="sim_command", required=True, metavar="ACTION")
    mr = msub.add_parser("run", help="run a scenario and report verdicts")
    mr.add_argument("file")
    mr.add_argument("--seed", type=int)
    mr.add_argument("--report", help="write the report here instead of stdout")
    mr.add_argument("--format", choices=["text", "json"], default="text")
    mr.set_defaults(func=cmd_sim_run)

    ma = msub.add_parser("check-alt2", help="compare roaming and home-only listening")
    ma.add_argument("file")
    ma.add_argument("--seed", type=int)
    ma.set_defaults(func=cmd_sim_check_alt2)

    mb = msub.add_parser("estimate-bandwidth", help="download cost of global key distribution")
    mb.add_argument("--keys", type=positive, default=14)
    mb.add_argument("--key-bytes", type=positive, default=16)
    mb.add_argument("--infections", type=positive, required=True)
    mb.add_argument("--population", type=positive, default=1)
    mb.add_argument("--json", action="store_true")
    mb.set_defaults(func=cmd_sim_bandwidth)
    return p


def main(argv: Optional[Sequence[str]] = None, prog: str = "en") -> int:
    parser = build_parser(prog)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{prog}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError, RegistryFileError) as exc:
        print(f"{prog}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def sim_main(argv: Optional[Sequence[str]] = None) -> int:
    """``en-sim ...`` is shorthand for ``en sim ...``."""
    argv = list(sys.argv[1:] if argv is None else argv)
    return main(["sim", *argv], prog="en")


def entry() -> None:
    sys.exit(main())


def sim_entry() -> None:
    sys.exit(sim_main())


if __name__ == "__main__":
    entry()
