import copy
import math

import numpy as np
import pytest

from notp.analysis import leak_report
from notp.entropy import SeededEntropy
from notp.keys import KeyBuffer, KeyStarvation
from notp.physics import NoiseParams
from notp.protocol import (ConditionError, KeyTooShort, LeakageLedger, ProtocolError, RekeyNeeded, Role,
                           RotationError, abandon_pending, apply_discard, consume_batch, exchange,
                           init_session, mac_tag, mac_verify, otp_decrypt, otp_encrypt, produce_batch,
                           producer_of, rotate, session_pair)
from notp.shuffle import ShuffleConfig

P = NoiseParams.from_exponent(100, 11)
SHUFFLE = ShuffleConfig(32, bytes(range(32)))


def genesis(n=1024, seed=1):
    return KeyBuffer(SeededEntropy(seed).bits(n))


def run_cycles(a, b, count, cycles, seed=7):
    ent = SeededEntropy(seed)
    for _ in range(cycles):
        prod, cons = (a, b) if a.cycle % 2 == 0 else (b, a)
        exchange(prod, cons, count, ent)


def test_init_budget_and_split():
    s = init_session(genesis(), P, SHUFFLE)
    assert s.ledger.budget == math.floor(leak_report(P).length_limit) == 1301
    assert s.reserve.remaining == 96 and s.basis_key.remaining == 1024 - 96
    assert s.basis_key.genesis and s.cycle == 0


def test_init_leaves_genesis_untouched():
    g = genesis()
    before = g.bits.copy()
    a, b = session_pair(g, P, SHUFFLE)
    run_cycles(a, b, 128, 2)
    assert np.array_equal(g.bits, before)


def test_init_errors():
    with pytest.raises(KeyTooShort):
        init_session(genesis(32), P)
    with pytest.raises(ConditionError):
        init_session(genesis(), NoiseParams(100, 0.1))
    init_session(genesis(), NoiseParams(100, 0.1), unsafe=True)


def test_turn_order():
    assert producer_of(0) is Role.INITIATOR and producer_of(1) is Role.RESPONDER
    a, b = session_pair(genesis(), P)
    with pytest.raises(ProtocolError):
        produce_batch(b, 16, SeededEntropy(1))


@pytest.mark.parametrize("shuffle", [None, SHUFFLE], ids=["plain", "shuffled"])
def test_cycles_agree_and_alternate(shuffle):
    a, b = session_pair(genesis(), P, shuffle)
    run_cycles(a, b, 256, 3)
    assert a.cycle == b.cycle == 3
    assert len(a.harvested) == 3
    for x, y in zip(a.harvested, b.harvested):
        assert np.array_equal(x.bits, y.bits)
    assert a.ledger.emitted == b.ledger.emitted == 768
    assert a.ledger.discarded == 3


def test_new_basis_key_is_harvested_head():
    a, b = session_pair(genesis(), P, SHUFFLE)
    run_cycles(a, b, 256, 1)
    k1 = a.harvested[0].bits
    assert np.array_equal(a.basis_key.unspent()[:k1.size], k1)


def test_shuffle_hides_order_on_the_wire():
    a, b = session_pair(genesis(), P, SHUFFLE)
    batch, sent = produce_batch(a, 256, SeededEntropy(3))
    truth = a.last_truth
    assert truth.selector is not None
    assert not np.array_equal(truth.data, truth.fresh)
    assert np.array_equal(consume_batch(b, batch).bits, sent.bits)


def test_rekey_at_boundary_emits_nothing():
    a, b = session_pair(genesis(), P)
    run_cycles(a, b, 256, 5)
    assert a.ledger.emitted == 1280
    snapshot = (a.basis_key.remaining, a.reserve.remaining, a.ledger.emitted)
    with pytest.raises(RekeyNeeded):
        produce_batch(b if b.cycle % 2 else a, 256, SeededEntropy(2))
    assert (a.basis_key.remaining, a.reserve.remaining, a.ledger.emitted) == snapshot
    # what is left of the budget can still be used
    run_cycles(a, b, a.ledger.remaining, 1)
    assert a.ledger.emitted == a.ledger.budget


def test_consume_rejects_wrong_cycle_and_grid():
    a, b = session_pair(genesis(), P)
    batch, _ = produce_batch(a, 8, SeededEntropy(1))
    bad = type(batch)(batch.cycle + 1, batch.samples, batch.adc_bits)
    with pytest.raises(ProtocolError):
        consume_batch(b, bad)
    out_of_grid = type(batch)(0, np.full(8, 1 << 16), 16)
    with pytest.raises(ValueError):
        consume_batch(b, out_of_grid)


def test_abandon_pending_refund():
    a, _ = session_pair(genesis(), P)
    produce_batch(a, 100, SeededEntropy(1))
    abandon_pending(a, refund=True)
    assert a.ledger.emitted == 0 and a.pending is None
    produce_batch(a, 100, SeededEntropy(1))
    abandon_pending(a, refund=False)
    assert a.ledger.emitted == 100


def test_rotate_requires_matching_pending():
    a, _ = session_pair(genesis(), P)
    with pytest.raises(RotationError):
        rotate(a, KeyBuffer(np.zeros(4, np.uint8)))
    _, sent = produce_batch(a, 16, SeededEntropy(1))
    with pytest.raises(RotationError):
        rotate(a, KeyBuffer(1 - sent.bits))


def test_discard_count_arithmetic():
    ledger = LeakageLedger(1295.8, 1295)
    assert ledger.discard_count(1295) == 1
    assert ledger.discard_count(1296) == 2
    assert LeakageLedger(math.inf, 10).discard_count(500) == 0


def test_discard_is_shared():
    key = KeyBuffer(SeededEntropy(3).bits(3000))
    secret = SeededEntropy(4).bits(200)
    x = apply_discard(key, LeakageLedger(1301.18, 1301), KeyBuffer(secret.copy()))
    y = apply_discard(key, LeakageLedger(1301.18, 1301), KeyBuffer(secret.copy()))
    assert len(x) == 3000 - 3
    assert np.array_equal(x.bits, y.bits)


def test_ledger_charge_and_refund():
    ledger = LeakageLedger(100.5, 100)
    ledger.charge(60)
    with pytest.raises(RekeyNeeded):
        ledger.charge(41)
    assert ledger.emitted == 60
    ledger.refund(10)
    assert ledger.remaining == 50
    with pytest.raises(ValueError):
        ledger.refund(100)


def test_otp_roundtrip_and_starvation():
    a, b = session_pair(genesis(), P)
    run_cycles(a, b, 256, 2)
    msg = b"attack at dawn"
    ct = otp_encrypt(msg, a)
    assert ct != msg and otp_decrypt(ct, b) == msg
    with pytest.raises(KeyStarvation):
        otp_encrypt(bytes(1000), a)


def test_mac_roundtrip_and_tamper():
    a, b = session_pair(genesis(), P)
    run_cycles(a, b, 256, 2)
    tag = mac_tag(b"hello", a)
    assert len(tag) == 32
    assert mac_verify(b"hello", tag, copy.deepcopy(b))
    assert not mac_verify(b"hellp", tag, b)
