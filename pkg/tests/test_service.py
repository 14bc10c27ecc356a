import http.client
import ssl
import time

import pytest

from enfed.consumer import FORBIDDEN, GONE, NO_CONTENT, NOT_FOUND, OK, PeerState, ReplicationType
from enfed.domain import SECONDS_PER_DAY, RegionId
from enfed.keystore import DiagnosisKeyUpload, MalformedUpload
from enfed.producer import FeedKind, decode_batch, verify_batch
from enfed.service import (
    BAD_REQUEST,
    METHOD_NOT_ALLOWED,
    UNAUTHORIZED,
    BackendNode,
    BackendNodeConfig,
    HttpBinding,
    HttpTransport,
    PeerSpec,
    Request,
    SimulatedClock,
    TlsCredential,
    decode_upload,
    encode_upload,
    run_node,
)
from pki import Federation
from world import CODE, World, keys, upload_body
from x509util import make_pki

CH, IT, FR = RegionId("CH"), RegionId("IT"), RegionId("FR")
DAY = SECONDS_PER_DAY


def test_upload_codec_round_trip():
    up = DiagnosisKeyUpload(keys(3, 1), frozenset({CH, IT}), CH, 5, "abc")
    assert decode_upload(encode_upload(up), 5) == up
    with pytest.raises(MalformedUpload):
        decode_upload(encode_upload(up)[:-1], 5)


def test_upload_endpoint():
    w = World()
    body = upload_body(keys(14, 1), {CH, IT}, CH)
    r = w.post(CH, body)
    assert (r.status, r.body) == (OK, b"14")
    assert w.post(CH, body).body == b"0"
    assert w.post(CH, upload_body(keys(2, 2), {CH}, CH, code="bad")).status == UNAUTHORIZED
    assert w.post(CH, b"junk").status == BAD_REQUEST
    assert w.net.request("mem://CH", Request("PUT", "/v1/keys")).status == METHOD_NOT_ALLOWED


def test_feed_endpoints_and_default_acl():
    w = World()
    w.post(CH, upload_body(keys(3, 1), {CH, IT}, CH))
    w.nodes[CH].build_if_due(0)
    pub = w.get(CH, "/v1/keys")
    assert pub.status == OK and len(decode_batch(pub.body).keys) == 3
    assert w.get(CH, "/v1/IT/keys/1", IT).status == OK
    assert w.get(CH, "/v1/FR/keys/1", IT).status == FORBIDDEN
    assert w.get(CH, "/v1/IT/keys/1").status == FORBIDDEN
    assert w.get(CH, "/v1/a2a/keys/1", IT).status == FORBIDDEN
    assert w.get(CH, "/v1/keys/2").status == NO_CONTENT
    assert w.get(CH, "/v1/nope").status == NOT_FOUND


def test_denied_request_touches_no_feed_data(monkeypatch):
    w = World()
    w.post(CH, upload_body(keys(3, 1), {CH, IT}, CH))
    w.nodes[CH].build_if_due(0)
    calls = []
    for name in ("serve_encoded", "serve_chunk", "add_region"):
        monkeypatch.setattr(w.nodes[CH].producer, name, lambda *a, _n=name: calls.append(_n))
    monkeypatch.setattr(w.nodes[CH].store, "read_since", lambda *a: calls.append("read"))
    assert w.get(CH, "/v1/IT/keys/1", FR).status == FORBIDDEN
    assert w.get(CH, "/v1/a2a/keys/1").status == FORBIDDEN
    assert calls == []


def test_partial_replication_end_to_end():
    w = World(peers={CH: [IT, FR], IT: [CH, FR], FR: [CH, IT]})
    w.post(IT, upload_body(keys(14, 7), {CH, IT}, IT))
    w.post(IT, upload_body(keys(5, 8), {IT}, IT))
    w.run(1800)
    assert w.nodes[CH].store.counts() == {"local": 0, "remote": 14}
    assert len(w.nodes[FR].store) == 0
    # CH re-exports nothing it learnt from IT
    w.run(1800)
    assert len(w.nodes[FR].store) == 0
    served = w.nodes[CH].producer.serve_chunk(FeedKind.public(), 1)
    assert verify_batch(served, [w.fed.feed_keys[CH].public_bytes])


def test_all_to_all_end_to_end():
    w = World(peers={CH: [IT, FR], IT: [CH, FR], FR: [CH, IT]}, a2a=True)
    w.post(IT, upload_body(keys(4, 7), {IT}, IT))
    w.post(CH, upload_body(keys(3, 9), {CH}, CH))
    w.run(1800)
    assert w.nodes[FR].store.counts() == {"local": 0, "remote": 7}
    assert w.nodes[IT].store.counts() == {"local": 4, "remote": 3}


def test_unreachable_peer_recorded_and_retried():
    w = World()
    w.net.down.add("mem://IT")
    w.run(900)
    assert any(region == IT for _, region, _ in w.nodes[CH].errors)
    w.net.down.clear()
    w.post(IT, upload_body(keys(2, 3), {CH, IT}, IT))
    w.run(1800)
    assert len(w.nodes[CH].store) == 2


def test_retention_purges_store_and_feeds():
    w = World()
    w.post(IT, upload_body(keys(3, 3), {CH, IT}, IT))
    w.run(1800)
    w.clock.advance(31 * DAY)
    w.run(900)
    assert len(w.nodes[IT].store) == 0 and len(w.nodes[CH].store) == 0
    assert w.get(IT, "/v1/CH/keys/1", CH).status == GONE
    assert w.get(IT, "/v1/keys/1").status == GONE


def test_restart_from_data_dir_resumes_without_duplicates(tmp_path):
    w = World(tmp_path)
    w.post(IT, upload_body(keys(5, 3), {CH, IT}, IT))
    w.run(1800)
    before = w.nodes[CH].peer_states[IT]
    assert before.last_batch_id >= 1
    ch = w.boot(CH)                       # crash + restart of CH from disk
    assert ch.peer_states[IT].last_batch_id == before.last_batch_id
    assert len(ch.store) == 5
    w.post(IT, upload_body(keys(2, 4), {CH, IT}, IT))
    w.run(1800)
    assert len(ch.store) == 7
    lines = (tmp_path / "CH" / "keys.journal").read_text().splitlines()
    assert len(lines) == 7
    newest = w.nodes[IT].producer.newest_batch_id(FeedKind.per_region(CH))
    it = w.boot(IT)
    assert it.producer.newest_batch_id(FeedKind.per_region(CH)) == newest
    assert w.get(IT, f"/v1/CH/keys/{newest + 1}", CH).status == NO_CONTENT


def test_node_with_no_peers_still_serves():
    w = World(peers={CH: [], IT: [], FR: []})
    w.post(FR, upload_body(keys(1, 1), {FR}, FR))
    w.run(900)
    assert w.get(FR, "/v1/keys/1").status == OK
    assert all(len(n.store) == (1 if r == FR else 0) for r, n in w.nodes.items())


def test_config_from_yaml(tmp_path):
    cfg = tmp_path / "node.yaml"
    cfg.write_text(
        "region: CH\ncluster: EU\nsigning_key_seed: '00ff'\nretention_days: 21\n"
        "upload_codes: [A, B]\nacl:\n  /v1/a2a/keys: ['cluster:EU']\n"
        "peers:\n  - {region: IT, replication: a2a, url: 'http://127.0.0.1:9'}\n")
    c = BackendNodeConfig.from_yaml(cfg)
    assert c.region == CH and c.retention.t_days == 21 and c.upload_codes == ("A", "B")
    assert c.peers[0].replication is ReplicationType.ALL_TO_ALL
    assert c.acl.listed(FeedKind.a2a()) == {"cluster:EU"}
    assert BackendNodeConfig.from_yaml(cfg, "IT").region == IT


# -- sockets -------------------------------------------------------------------
def http_post(url, path, body):
    host, port = url.split("//")[1].split(":")
    conn = http.client.HTTPConnection(host, int(port), timeout=5)
    conn.request("POST", path, body)
    r = conn.getresponse()
    return r.status, r.read()


def test_run_node_over_http_builds_after_upload():
    fed = Federation()
    reg = fed.registry()
    fed.enrol(reg, CH, "http://127.0.0.1:0")
    clock = SimulatedClock(0)
    cfg = BackendNodeConfig(region=CH, signing_key=fed.feed_keys[CH], upload_codes=(CODE,),
                            build_interval=900, listen="127.0.0.1:0")
    handle = run_node(cfg, reg, clock=clock, tick_seconds=0.02)
    try:
        url = handle.binding.url
        assert http_post(url, "/v1/keys", upload_body(keys(3, 1), {CH}, CH)) == (OK, b"3")
        clock.advance(900)
        deadline = time.time() + 5
        resp = HttpTransport().get(url, "/v1/keys/1", None)
        while resp.status != OK and time.time() < deadline:
            time.sleep(0.02)
            resp = HttpTransport().get(url, "/v1/keys/1", None)
        assert resp.status == OK and len(decode_batch(resp.body).keys) == 3
    finally:
        handle.stop()


def test_run_node_requires_registration():
    fed = Federation()
    cfg = BackendNodeConfig(region=CH, signing_key=fed.feed_keys.setdefault(CH, fed.root_key))
    with pytest.raises(ValueError):
        run_node(cfg, fed.registry())


def test_mutual_tls_identity_gates_per_region_feed(tmp_path):
    fed = Federation()
    reg = fed.registry()
    fed.enrol(reg, CH)
    fed.enrol(reg, IT)
    creds = make_pki(tmp_path, ["region:CH", "region:IT", "server"])
    clock = SimulatedClock(0)
    it_cfg = BackendNodeConfig(region=IT, signing_key=fed.feed_keys[IT], upload_codes=(CODE,))
    it_node = BackendNode(it_cfg, reg, HttpTransport(), clock)
    binding = HttpBinding(it_node, tls=creds["server"])
    binding.start()
    try:
        it_node.handle_upload(upload_body(keys(2, 5), {CH, IT}, IT))
        it_node.build_if_due(0)
        t = HttpTransport()
        assert t.get(binding.url, "/v1/CH/keys/1", creds["region:CH"]).status == OK
        assert t.get(binding.url, "/v1/CH/keys/1", creds["region:IT"]).status == FORBIDDEN
        (tmp_path / "other").mkdir()
        stranger = make_pki(tmp_path / "other", ["region:CH"])["region:CH"]
        forged = TlsCredential(stranger.cert_file, stranger.key_file, creds["server"].ca_file)
        with pytest.raises((ssl.SSLError, ConnectionError)):
            t.get(binding.url, "/v1/CH/keys/1", forged)     # client cert from an unknown CA
        # a CH backend consuming over TLS ingests the batch
        ch_cfg = BackendNodeConfig(region=CH, signing_key=fed.feed_keys[CH], tls=creds["region:CH"],
                                   peers=[PeerSpec(IT, ReplicationType.PARTIAL, binding.url,
                                                   frozenset([fed.feed_keys[IT].public_bytes]))])
        ch_node = BackendNode(ch_cfg, reg, HttpTransport(), clock)
        ch_node.resolve_peers()
        assert ch_node.poll_one(IT, 0) == 2
        assert ch_node.peer_states[IT] == PeerState(1, 300)
    finally:
        binding.stop()
