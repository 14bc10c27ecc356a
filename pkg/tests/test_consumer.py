import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from enfed.consumer import (
    BadSignature,
    Consumer,
    FormatError,
    GoneBatch,
    PeerConfig,
    PeerState,
    PeerStateJournal,
    PeerUnreachable,
    ReplicationType,
    select_feed_path,
)
from enfed.crypto import SigningKey
from enfed.domain import SECONDS_PER_DAY, DiagnosisKey, RegionId
from enfed.keystore import DiagnosisKeyUpload, KeyStore, RetentionPolicy, StaticCodeVerifier
from enfed.producer import FeedKind, Producer
from feedfixture import ProducerTransport
from strategies import declarations

CH, IT, FR = RegionId("CH"), RegionId("IT"), RegionId("FR")
SK = SigningKey.from_seed(b"peer-it")
CODE = "C"


def k(i):
    return DiagnosisKey.of(i.to_bytes(16, "big"), 0)


def producer(n_batches=3, chunk=2, retention=30):
    store = KeyStore(verifier=StaticCodeVerifier([CODE]))
    p = Producer(store, SK, IT, max_chunk_size=chunk, retention=RetentionPolicy(retention))
    for i in range(n_batches * chunk):
        store.ingest_remote([k(i)], FR, 0)
    p.build_chunks(0)
    return p


def config(mode=ReplicationType.PARTIAL, keys=True):
    return PeerConfig(IT, "mem://it", mode, "native", None,
                      frozenset([SK.public_bytes]) if keys else None)


def test_feed_path_selection():
    assert select_feed_path(config(ReplicationType.ALL_TO_ALL), CH) == "/v1/a2a/keys"
    assert select_feed_path(config(ReplicationType.PARTIAL), CH) == "/v1/CH/keys"
    with pytest.raises(ValueError):
        select_feed_path(config(), RegionId("C1"))


def a2a_producer():
    store = KeyStore(verifier=StaticCodeVerifier([CODE]))
    p = Producer(store, SK, IT, max_chunk_size=2)
    for i in range(3):
        store.ingest_local(DiagnosisKeyUpload([k(2 * i), k(2 * i + 1)], {IT}, IT, 0, CODE), 0)
    p.build_chunks(0)
    return p


def test_poll_ingests_all_batches_then_idles():
    store = KeyStore()
    c = Consumer(CH, store, ProducerTransport(a2a_producer()), poll_interval=60)
    n, state = c.poll_peer(config(ReplicationType.ALL_TO_ALL), PeerState(), 100)
    assert (n, state.last_batch_id, state.recommended_next_poll_time) == (6, 3, 160)
    n2, state2 = c.poll_peer(config(ReplicationType.ALL_TO_ALL), state, 200)
    assert n2 == 0 and state2.last_batch_id == 3 and state2.recommended_next_poll_time == 260
    assert store.counts() == {"local": 0, "remote": 6}


def test_corrupt_signature_stops_after_first_batch():
    p = a2a_producer()
    flip = lambda d: d[:-1] + bytes([d[-1] ^ 1])
    c = Consumer(CH, KeyStore(), ProducerTransport(p, {(FeedKind.a2a(), 2): flip}))
    with pytest.raises(BadSignature) as info:
        c.poll_peer(config(ReplicationType.ALL_TO_ALL), PeerState(), 0)
    assert info.value.ingested == 2 and info.value.state.last_batch_id == 1


def test_wrong_batch_number_is_format_error():
    p = a2a_producer()
    t = ProducerTransport(p, {(FeedKind.a2a(), 1): lambda d: p.serve_encoded(FeedKind.a2a(), 2)})
    with pytest.raises(FormatError):
        Consumer(CH, KeyStore(), t).poll_peer(config(ReplicationType.ALL_TO_ALL), PeerState(), 0)


def test_unknown_format_rejected():
    cfg = PeerConfig(IT, "mem://it", ReplicationType.PARTIAL, "protobuf", None)
    with pytest.raises(FormatError):
        Consumer(CH, KeyStore(), ProducerTransport(a2a_producer())).poll_peer(cfg, PeerState(), 0)


def test_unreachable_peer_keeps_state():
    t = ProducerTransport(a2a_producer())
    t.fail_after = 0
    with pytest.raises(PeerUnreachable) as info:
        Consumer(CH, KeyStore(), t).poll_peer(config(), PeerState(4), 0)
    assert info.value.state == PeerState(4)


def test_gone_then_resync():
    day = SECONDS_PER_DAY
    # batches 1..9 stored on day 0, 10..12 on day 20; purge on day 35 keeps 10..12
    store = KeyStore(verifier=StaticCodeVerifier([CODE]))
    p = Producer(store, SK, IT, max_chunk_size=1)
    for i in range(12):
        at = (0 if i < 9 else 20) * day
        store.ingest_local(DiagnosisKeyUpload([k(i)], {CH, IT}, IT, at, CODE), at)
        p.build_chunks(at)
    p.purge_expired(35 * day)
    c = Consumer(CH, KeyStore(), ProducerTransport(p))
    with pytest.raises(GoneBatch):
        c.poll_peer(config(), PeerState(3), 35 * day)
    state = c.resync_after_gone(config(), PeerState(3))
    assert state.last_batch_id == 9
    n, state = c.poll_peer(config(), state, 35 * day)
    assert n == 3 and state.last_batch_id == 12
    assert c.resync_after_gone(config(), PeerState(12)) == PeerState(12)


def test_resync_cases_without_loss():
    c = Consumer(CH, KeyStore(), ProducerTransport(a2a_producer()))
    cfg = config(ReplicationType.ALL_TO_ALL)
    assert c.resync_after_gone(cfg, PeerState(1)) == PeerState(1)
    empty = Producer(KeyStore(), SK, IT)
    assert Consumer(CH, KeyStore(), ProducerTransport(empty)).resync_after_gone(cfg, PeerState()) == PeerState(0)


def test_partial_consumer_ingests_exactly_declaring_keys():
    store = KeyStore(verifier=StaticCodeVerifier([CODE]))
    p = Producer(store, SK, IT, max_chunk_size=3)
    store.ingest_local(DiagnosisKeyUpload([k(1), k(2)], {CH, IT}, IT, 0, CODE), 0)
    store.ingest_local(DiagnosisKeyUpload([k(3)], {IT}, IT, 0, CODE), 0)
    store.ingest_local(DiagnosisKeyUpload([k(4)], {IT, FR}, IT, 0, CODE), 0)
    store.ingest_remote([k(5)], RegionId("AT"), 0)
    p.build_chunks(0)
    mine = KeyStore()
    Consumer(CH, mine, ProducerTransport(p)).poll_peer(config(), PeerState(), 0)
    assert {sk.key.key for sk in mine} == {k(1).key, k(2).key}
    assert all(not sk.is_local for sk in mine)


def test_state_journal_last_line_wins_and_ignores_torn_tail(tmp_path):
    j = PeerStateJournal(tmp_path / "peers")
    j.record(IT, PeerState(3, 100))
    j.record(FR, PeerState(1))
    j.record(IT, PeerState(5, 200))
    with open(tmp_path / "peers", "a") as fh:
        fh.write("PEER|IT|9")
    assert j.load() == {IT: PeerState(5, 200), FR: PeerState(1, None)}


# -- crash / restart ---------------------------------------------------------
actions = st.lists(st.one_of(
    st.tuples(st.just("upload"), st.integers(1, 5), declarations([CH, IT, FR])),
    st.tuples(st.just("build")),
    st.tuples(st.just("poll"), st.integers(0, 6), st.booleans()),  # crash after n requests, or in commit
    st.tuples(st.just("advance"), st.integers(1, 20)),   # days; producer purges
), max_size=30)


@settings(max_examples=150)
@given(actions, st.integers(1, 4))
def test_crash_restart_is_exactly_once(tmp_path_factory, script, chunk):
    tmp = tmp_path_factory.mktemp("crash")
    pstore = KeyStore(verifier=StaticCodeVerifier([CODE]))
    prod = Producer(pstore, SK, IT, max_chunk_size=chunk)
    transport = ProducerTransport(prod)
    cfg = config(ReplicationType.PARTIAL)
    journal = PeerStateJournal(tmp / "peers")

    commit_crash = [False]

    class Died(Exception):
        pass

    def commit(region, st_, batch, n):
        if commit_crash[0]:
            raise Died()            # keys are ingested but the cursor is not yet recorded
        journal.record(region, st_)

    def boot():
        store = KeyStore(tmp / "keys")
        consumer = Consumer(CH, store, transport, on_batch=commit)
        return store, consumer, journal.load().get(IT, PeerState())

    store, consumer, state = boot()
    now, counter = 0, 0
    declared_ch = set()
    cursor_log = [state.last_batch_id]
    for act in script:
        if act[0] == "upload":
            _, n, (s, b) = act
            ks = [k(counter + i) for i in range(n)]
            counter += n
            if CH in s:
                declared_ch |= {x.key for x in ks}
            pstore.ingest_local(DiagnosisKeyUpload(ks, s, b, now, CODE), now)
        elif act[0] == "build":
            prod.build_chunks(now)
        elif act[0] == "advance":
            now += act[1] * SECONDS_PER_DAY
            prod.purge_expired(now)
            pstore.purge_expired(prod.retention, now)
        else:
            transport.fail_after = act[1]
            commit_crash[0] = act[2]
            try:
                try:
                    _, state = consumer.poll_peer(cfg, state, now)
                except GoneBatch as exc:
                    state = consumer.resync_after_gone(cfg, exc.state)
                    journal.record(IT, state)
            except (PeerUnreachable, Died):
                # the process dies; everything is rebuilt from disk
                transport.fail_after = None
                store, consumer, state = boot()
            transport.fail_after = None
            commit_crash[0] = False
        cursor_log.append(state.last_batch_id)
        assert all(not sk.is_local for sk in store)
        lines = [ln for ln in (tmp / "keys").read_text().splitlines()] if (tmp / "keys").exists() else []
        assert len(lines) == len({ln.split("|")[1] for ln in lines})
    # cursor only moves forwards (resync also only moves it forwards here)
    assert cursor_log == sorted(cursor_log)
    # a final clean poll catches up with every declaring key still retained
    prod.build_chunks(now)
    try:
        consumer.poll_peer(cfg, state, now)
    except GoneBatch as exc:
        consumer.poll_peer(cfg, consumer.resync_after_gone(cfg, exc.state), now)
    got = [sk.key.key for sk in store]
    assert len(got) == len(set(got))
    assert set(got) <= declared_ch
    still_served = set()
    feed = FeedKind.per_region(CH)
    if feed in prod.feeds():
        for n in range(1, prod.newest_batch_id(feed) + 1):
            batch = prod.serve_chunk(feed, n)
            if hasattr(batch, "keys"):
                still_served |= {kk for kk, _ in batch.keys}
    assert still_served <= set(got)
