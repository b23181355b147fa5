import itertools
import random
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from mvdssm import secagg
from mvdssm.secagg import (
    AbortError,
    IntegrityError,
    Kind,
    Message,
    Phase,
    ProtocolError,
    SimBus,
    decode,
    default_threshold,
    dump_transcript,
    encode,
    lagrange_eval,
    load_transcript,
    replay,
    secure_sum,
    setup,
    shamir_reconstruct,
    shamir_share,
    unmask_and_sum,
)


def test_shamir_roundtrip_and_threshold():
    rnd = random.Random(0)
    secret = 123456789012345678901234567890
    shares = shamir_share(secret, 7, 4, rnd)
    for subset in itertools.combinations(shares, 4):
        assert shamir_reconstruct(subset, 4) == secret
    assert shamir_reconstruct(shares, 4) == secret
    with pytest.raises(AbortError):
        shamir_reconstruct(shares[:3], 4)
    bad = shares[:4] + [(shares[4][0], (shares[4][1] + 1) % secagg.PRIME)]
    with pytest.raises(IntegrityError):
        shamir_reconstruct(bad, 4)
    with pytest.raises(ValueError):
        shamir_share(1, 3, 4, rnd)


def test_t_minus_one_shares_leave_every_secret_equally_likely():
    """Exhaustive count over GF(13): every candidate secret is consistent with exactly p^0 = 1 polynomial."""
    p, n, t = 13, 5, 3
    shares = shamir_share(7, n, t, random.Random(1), prime=p)
    seen = shares[: t - 1]
    counts = {s: 0 for s in range(p)}
    for a1, a2 in itertools.product(range(p), repeat=2):
        for s in range(p):
            if all((s + a1 * x + a2 * x * x) % p == y for x, y in seen):
                counts[s] += 1
    assert set(counts.values()) == {1}
    # with t shares the secret is pinned down
    assert lagrange_eval(shares[:t], 0, p) == 7


def test_fixed_point_roundtrip():
    v = np.array([-3.5, 0.0, 1e-5, 2.0**10, -(2.0**10)])
    for bits in (32, 64):
        back = decode(encode(v, bits=bits), bits=bits)
        assert np.abs(back - v).max() <= 2.0**-16


def test_no_overflow_for_1024_clients_at_full_range():
    n, scale = 1024, secagg.SCALE_BITS
    v = np.array([2.0**10, -(2.0**10), 2.0**10 - 2.0**-scale])
    total = np.zeros(3, dtype=np.uint64)
    for _ in range(n):
        total = total + encode(v)
    np.testing.assert_allclose(decode(total), n * v, rtol=0, atol=n * 2.0**-16)


def test_two_parties_masks_cancel():
    parts, info = setup([3, 8], threshold=2, seed=5, dim=4)
    assert parts[3]._pair_seeds[8] == parts[8]._pair_seeds[3]
    a = parts[3].mask(np.array([1.0, 2.0, 0.0, -1.0]))
    b = parts[8].mask(np.array([3.0, 4.0, 0.5, 1.0]))
    pair_3 = secagg.prg(parts[3]._pair_seeds[8], 4)
    self_sum = secagg.prg(parts[3]._self_seed, 4) + secagg.prg(parts[8]._self_seed, 4)
    assert decode(a + b - self_sum).tolist() == [4.0, 6.0, 0.5, 0.0]
    assert (a - secagg.prg(parts[3]._self_seed, 4) - pair_3 == encode(np.array([1.0, 2.0, 0.0, -1.0]))).all()


def test_single_participant_mask_is_encoding_plus_self_stream():
    p = secagg.Participant(1, [1], 3)
    p._self_seed = 99
    out = p.mask(np.array([0.25, -1.0, 2.0]))
    np.testing.assert_array_equal(out - secagg.prg(99, 3), encode(np.array([0.25, -1.0, 2.0])))


def test_no_dropout_sum():
    total, survivors = secure_sum({0: np.array([1.0, 2.0]), 1: np.array([3.0, 4.0])}, threshold=2)
    assert survivors == [0, 1]
    np.testing.assert_allclose(total, [4.0, 6.0], atol=2.0**-15)


def test_one_of_five_drops_after_masking():
    rng = np.random.default_rng(0)
    vecs = {c: rng.uniform(-1, 1, 6) for c in range(5)}
    bus = SimBus({2: Phase.MASKED_INPUT})
    total, survivors = secure_sum(vecs, threshold=3, bus=bus, seed=11)
    assert survivors == [0, 1, 3, 4]
    np.testing.assert_allclose(total, sum(vecs[c] for c in survivors), atol=1e-3)


def test_drop_during_unmasking_still_counts_its_input():
    rng = np.random.default_rng(1)
    vecs = {c: rng.uniform(-1, 1, 3) for c in range(5)}
    total, survivors = secure_sum(vecs, threshold=3, bus=SimBus({4: Phase.UNMASK_REQUEST}))
    assert survivors == list(range(5))
    np.testing.assert_allclose(total, sum(vecs.values()), atol=1e-3)


def test_threshold_rules():
    with pytest.raises(ValueError):
        setup(3, threshold=4)
    with pytest.raises(ValueError):
        setup(3, threshold=1)
    assert default_threshold(10) == 7
    vecs = {c: np.ones(2) for c in range(4)}
    with pytest.raises(AbortError):
        secure_sum(vecs, threshold=3, bus=SimBus({0: Phase.MASKED_INPUT, 1: Phase.MASKED_INPUT}))


def random_schedule(rng, n):
    sched = {}
    for c in range(n):
        r = rng.random()
        if r < 0.15:
            sched[c] = Phase.KEY_SHARE
        elif r < 0.3:
            sched[c] = Phase.MASKED_INPUT
        elif r < 0.4:
            sched[c] = Phase.UNMASK_REQUEST
    return sched


def run_drop_schedules(n_schedules=200, n=10, t=7, seed=0):
    """Returns (max abs error over recovered rounds, #recovered, #aborts, #wrong outcomes)."""
    rng = np.random.default_rng(seed)
    worst, ok, aborted, wrong = 0.0, 0, 0, 0
    for k in range(n_schedules):
        vecs = {c: rng.uniform(-4, 4, 8) for c in range(n)}
        sched = random_schedule(rng, n)
        inputs_in = [c for c in range(n) if sched.get(c, Phase.DONE) > Phase.MASKED_INPUT]
        responders = [c for c in range(n) if sched.get(c, Phase.DONE) > Phase.UNMASK_REQUEST]
        should_abort = len(inputs_in) < t or len(responders) < t
        try:
            total, survivors = secure_sum(vecs, threshold=t, seed=k, bus=SimBus(sched))
        except AbortError:
            aborted += 1
            wrong += not should_abort
            continue
        if should_abort or survivors != inputs_in:
            wrong += 1
            continue
        ok += 1
        worst = max(worst, float(np.abs(total - sum(vecs[c] for c in survivors)).max()))
    return worst, ok, aborted, wrong


def test_random_drop_schedules():
    worst, ok, aborted, wrong = run_drop_schedules()
    assert wrong == 0
    assert ok > 20 and aborted > 20  # both branches exercised
    assert worst <= 1e-3


def test_masked_coordinates_look_uniform():
    n, dim = 3, 100_000
    rng = np.random.default_rng(2)
    parts, _ = setup(n, threshold=2, seed=3, dim=dim, bits=32)
    masked = parts[1].mask(rng.uniform(-1, 1, dim))
    counts = np.bincount((masked >> np.uint64(24)).astype(np.int64), minlength=256)
    assert stats.chisquare(counts).pvalue > 0.01


def test_masked_input_independent_of_plaintext():
    dim = 20_000
    a, _ = setup(3, threshold=2, seed=4, dim=dim)
    b, _ = setup(3, threshold=2, seed=5, dim=dim)
    small = a[0].mask(np.zeros(dim)).astype(np.float64)
    large = b[0].mask(np.full(dim, 900.0)).astype(np.float64)
    assert stats.ks_2samp(small, large).pvalue > 0.01


def test_state_machine_and_isolation():
    parts, _ = setup(3, threshold=2, seed=0, dim=2)
    parts[0].mask(np.zeros(2))
    with pytest.raises(ProtocolError):
        parts[0].mask(np.zeros(2))
    with pytest.raises(ProtocolError):
        parts[0].receive_shares([])
    with pytest.raises(ProtocolError):
        parts[0].respond_unmask([1], [1])
    with pytest.raises(ValueError):
        parts[1].mask(np.zeros(3))
    with pytest.raises(ProtocolError):
        parts[2].respond_unmask([0, 1, 2], [])
    resp = parts[0].respond_unmask([0, 1], [2])
    # self seeds only for live peers, pairwise seeds only for the dropped one
    assert {(s.owner, s.which) for s in resp} == {(0, 0), (1, 0), (2, 1)}


def test_tampered_share_is_detected():
    vecs = {c: np.ones(2) for c in range(4)}
    parts, info = setup(list(vecs), threshold=3, seed=1, dim=2)
    masked = {c: parts[c].mask(v) for c, v in vecs.items()}
    responses = {c: parts[c].respond_unmask(list(vecs), []) for c in vecs}
    s = responses[0][0]
    responses[0][0] = secagg.Share(s.owner, s.peer, s.which, s.x, (s.y + 1) % secagg.PRIME)
    with pytest.raises(IntegrityError):
        unmask_and_sum(info, masked, responses)


def test_setup_is_deterministic():
    a, ia = setup(4, seed=9, dim=3)
    b, ib = setup(4, seed=9, dim=3)
    assert ia.commitments == ib.commitments
    assert all(a[c]._self_seed == b[c]._self_seed for c in a)


def test_framing_and_replay():
    vecs = {c: np.arange(3, dtype=float) * c for c in range(4)}
    bus = SimBus({3: Phase.MASKED_INPUT})
    total, _ = secure_sum(vecs, threshold=3, seed=2, bus=bus, round_no=7)
    blob = dump_transcript(bus.transcript)
    msgs = load_transcript(blob)
    assert [m.kind for m in msgs] == [m.kind for m in bus.transcript]
    first = msgs[0]
    length, sender, receiver, rnd, kind = struct.unpack_from("<IIIIB", blob, 0)
    assert (sender, receiver, rnd, kind) == (secagg.DEALER, first.receiver, 7, Kind.SHARES)
    assert length == len(first.payload)
    _, info = setup([0, 1, 2, 3], threshold=3, seed=2, dim=3)
    np.testing.assert_array_equal(replay(info, blob), total)
    with pytest.raises(ProtocolError):
        load_transcript(blob[:-1])


def test_bus_delivers_once_and_respects_drops():
    bus = SimBus({5: Phase.MASKED_INPUT})
    msg = Message(1, secagg.SERVER, 0, Kind.PLAIN, b"x")
    assert bus.send(msg, Phase.MASKED_INPUT)
    assert not bus.send(Message(5, secagg.SERVER, 0, Kind.PLAIN, b"y"), Phase.MASKED_INPUT)
    assert bus.send(Message(5, secagg.SERVER, 0, Kind.PLAIN, b"z"), Phase.KEY_SHARE)
    assert [m.payload for m in bus.deliver(secagg.SERVER)] == [b"x", b"z"]
    assert bus.deliver(secagg.SERVER) == []


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**32 - 1), st.sampled_from([32, 64]))
def test_sum_property(n, seed, bits):
    rng = np.random.default_rng(seed)
    vecs = {c: rng.uniform(-8, 8, 5) for c in range(n)}
    total, _ = secure_sum(vecs, threshold=default_threshold(n), seed=seed, bits=bits)
    np.testing.assert_allclose(total, sum(vecs.values()), atol=n * 2.0**-15)
