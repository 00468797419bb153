"""Chained key distribution between two parties.

Each cycle one party draws fresh bits, encodes bit ``j`` in the basis given
by the next unspent bit of the shared basis key and sends the recorded
phases.  The peer decodes with the same basis bits.  Once both hold the new
bits, a small fraction is discarded, a few bits top up a private reserve and
the rest becomes both harvested key material and the head of the next basis
key.  Cycles alternate direction: the initiator produces on even cycles.

Key material lives in three places:

* ``basis_key``: bases for emissions (starts as the genesis key minus the reserve);
* ``reserve``: private bits for shuffle selectors and discard-position seeds;
  never exported and never used for anything else;
* ``harvested``: keys handed to the application for one-time pad and MAC use.

A harvested key is also the head of the next basis key.  That reuse is what
makes the chain work, and also what a known-plaintext attacker exploits; the
shuffle exists to break it.

The leakage ledger caps the total number of emissions since the genesis key
at ``floor(L)``; crossing it raises :class:`RekeyNeeded` before anything is
emitted.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import math
from dataclasses import dataclass, field

import numpy as np

from .analysis import PROTOCOL_REPETITIONS, check_condition, leak_report
from .entropy import EntropyStream
from .keys import KeyBuffer, KeyStarvation, as_bits, pack_bits
from .physics import NoiseParams, decode_many, encode_with_noise, phrg_bits, sample_noise
from .shuffle import ShuffleConfig, WordStream, select_permutation, selector_from_bits

MIN_GENESIS_BITS = 64
DEFAULT_BUDGET_CAP = 2 ** 32
RESERVE_BASE_BITS = 64
MAC_KEY_BITS = 256
DISCARD_SEED_BITS = 64


class ProtocolError(RuntimeError):
    pass


class RekeyNeeded(ProtocolError):
    """The chain rooted at the current genesis key may not emit any further."""


class ConditionError(ProtocolError):
    pass


class KeyTooShort(ProtocolError):
    pass


class InsufficientSecret(ProtocolError):
    pass


class RotationError(ProtocolError):
    pass


class Role(enum.Enum):
    INITIATOR = "initiator"
    RESPONDER = "responder"

    @property
    def peer(self) -> "Role":
        return Role.RESPONDER if self is Role.INITIATOR else Role.INITIATOR


def producer_of(cycle: int) -> Role:
    return Role.INITIATOR if cycle % 2 == 0 else Role.RESPONDER


@dataclass
class LeakageLedger:
    """Emission count since genesis against the budget ``floor(L)``."""

    limit: float
    budget: int
    emitted: int = 0
    discarded: int = 0

    @classmethod
    def for_params(cls, params: NoiseParams, repetitions: int = PROTOCOL_REPETITIONS,
                   cap: int = DEFAULT_BUDGET_CAP) -> "LeakageLedger":
        limit = leak_report(params, repetitions).length_limit
        budget = cap if math.isinf(limit) else min(cap, math.floor(limit))
        return cls(limit, budget)

    @property
    def remaining(self) -> int:
        return self.budget - self.emitted

    def charge(self, n: int) -> None:
        if n > self.remaining:
            raise RekeyNeeded(
                f"{n} emissions requested, {self.remaining} left of budget {self.budget}"
            )
        self.emitted += n

    def refund(self, n: int) -> None:
        """Undo a charge for a batch that never left this party."""
        if not 0 <= n <= self.emitted:
            raise ValueError("refund exceeds charged emissions")
        self.emitted -= n

    def discard_count(self, length: int) -> int:
        if length <= 0 or math.isinf(self.limit):
            return 0
        return math.ceil(length / self.limit)


@dataclass
class Batch:
    """Wire-visible content of one emission batch."""

    cycle: int
    samples: np.ndarray
    adc_bits: int = 16

    def __len__(self):
        return int(self.samples.size)


@dataclass
class EmissionTruth:
    """Producer-side secrets behind a batch; for test harnesses only."""

    cycle: int
    fresh: np.ndarray
    data: np.ndarray
    bases: np.ndarray
    selector: int | None


@dataclass
class SessionState:
    role: Role
    params: NoiseParams
    basis_key: KeyBuffer
    reserve: KeyBuffer
    ledger: LeakageLedger
    shuffle: ShuffleConfig
    reserve_target: int
    harvested: list[KeyBuffer] = field(default_factory=list)
    cycle: int = 0
    pending: KeyBuffer | None = None
    last_truth: EmissionTruth | None = field(default=None, repr=False)
    truth_log: list[EmissionTruth] | None = field(default=None, repr=False)  # harness-only record

    @property
    def harvested_bits(self) -> int:
        return sum(len(k) for k in self.harvested)

    @property
    def unspent_harvest(self) -> int:
        return sum(k.remaining for k in self.harvested)

    def max_batch(self) -> int:
        """Largest batch the next cycle could carry."""
        return max(0, min(self.basis_key.remaining, self.ledger.remaining))


def init_session(genesis_key: KeyBuffer, params: NoiseParams, shuffle: ShuffleConfig | None = None,
                 role: Role = Role.INITIATOR, *, unsafe: bool = False,
                 repetitions: int = PROTOCOL_REPETITIONS, budget_cap: int = DEFAULT_BUDGET_CAP,
                 reserve_bits: int | None = None) -> SessionState:
    """Start a session from the shared genesis key.

    The genesis key is copied, never modified.  Its last ``reserve_bits``
    bits seed the private reserve; the rest is the first basis key.
    """
    shuffle = shuffle if shuffle is not None else ShuffleConfig.disabled()
    genesis = genesis_key.unspent()
    if genesis.size < MIN_GENESIS_BITS:
        raise KeyTooShort(f"genesis key has {genesis.size} bits, need >= {MIN_GENESIS_BITS}")
    if not unsafe:
        cond = check_condition(params)
        if not cond.passed:
            raise ConditionError(
                f"operating condition fails: (pi/2)/sigma={cond.ratio_left:.3g}, "
                f"sigma/dphi={cond.ratio_right:.3g}, guard={params.guard_ratio}"
            )
    if reserve_bits is None:
        reserve_bits = RESERVE_BASE_BITS + (shuffle.selector_bits if shuffle.enabled else 0)
    if genesis.size <= reserve_bits:
        raise KeyTooShort(f"genesis key must exceed the {reserve_bits}-bit reserve")
    split = genesis.size - reserve_bits
    return SessionState(
        role=Role(role),
        params=params,
        basis_key=KeyBuffer(genesis[:split], "K0", genesis=True),
        reserve=KeyBuffer(genesis[split:], "reserve"),
        ledger=LeakageLedger.for_params(params, repetitions, budget_cap),
        shuffle=shuffle,
        reserve_target=reserve_bits,
    )


def _check_capacity(state: SessionState, count: int) -> None:
    if count > state.ledger.remaining:
        raise RekeyNeeded(
            f"budget exhausted: {state.ledger.emitted} of {state.ledger.budget} emitted, {count} requested"
        )
    if count > state.basis_key.remaining:
        raise RekeyNeeded(f"basis key exhausted: {state.basis_key.remaining} bits left, {count} requested")
    need = state.shuffle.selector_bits if state.shuffle.enabled else 0
    if state.ledger.discard_count(count):
        need += DISCARD_SEED_BITS
    if state.reserve.remaining < need:
        raise RekeyNeeded(f"reserve holds {state.reserve.remaining} bits, the cycle needs {need}")


def _draw_permutation(state: SessionState, count: int) -> tuple[np.ndarray | None, int | None]:
    if not state.shuffle.enabled:
        return None, None
    selector = selector_from_bits(state.reserve.take(state.shuffle.selector_bits))
    perm = select_permutation(selector, state.shuffle.list_seed, count, state.shuffle.selector_bits)
    return perm, selector


def produce_batch(state: SessionState, count: int, entropy: EntropyStream) -> tuple[Batch, KeyBuffer]:
    """Emit ``count`` fresh bits in the current basis key.

    Returns the wire batch and the pending (unshuffled) fresh key.
    """
    if producer_of(state.cycle) is not state.role:
        raise ProtocolError(f"cycle {state.cycle} is the {state.role.peer.value}'s turn to produce")
    if state.pending is not None:
        raise ProtocolError("previous batch not rotated yet")
    if count < 0:
        raise ValueError("count must be >= 0")
    adc = state.params.adc_bits
    if count == 0:
        return Batch(state.cycle, np.zeros(0, np.int64), adc), KeyBuffer(np.zeros(0, np.uint8), "empty")
    _check_capacity(state, count)
    # draw all entropy before touching key material so exhaustion leaves the state intact
    fresh = phrg_bits(count, entropy).bits
    noise = sample_noise(state.params, entropy, count)
    perm, selector = _draw_permutation(state, count)
    data = fresh if perm is None else fresh[perm]
    bases = state.basis_key.take(count)
    samples = encode_with_noise(data, bases, noise, state.params)
    state.ledger.charge(count)
    pending = KeyBuffer(fresh, f"K{state.cycle + 1}")
    state.pending = pending.copy()
    state.last_truth = EmissionTruth(state.cycle, fresh.copy(), data.copy(), bases, selector)
    if state.truth_log is not None:
        state.truth_log.append(state.last_truth)
    return Batch(state.cycle, samples, adc), pending


def consume_batch(state: SessionState, batch: Batch) -> KeyBuffer:
    """Decode a peer's batch with the shared basis key, undoing any shuffle."""
    if producer_of(state.cycle) is state.role:
        raise ProtocolError(f"cycle {state.cycle} is this party's turn to produce")
    if state.pending is not None:
        raise ProtocolError("previous batch not rotated yet")
    if batch.cycle != state.cycle:
        raise ProtocolError(f"batch for cycle {batch.cycle}, session at cycle {state.cycle}")
    samples = np.asarray(batch.samples, dtype=np.int64)
    count = samples.size
    if count == 0:
        return KeyBuffer(np.zeros(0, np.uint8), "empty")
    if samples.min() < 0 or samples.max() >= state.params.grid_size:
        raise ValueError("sample index outside the ADC grid")
    _check_capacity(state, count)
    perm, _ = _draw_permutation(state, count)
    bases = state.basis_key.take(count)
    decoded = decode_many(samples, bases, state.params)
    if perm is None:
        fresh = decoded
    else:
        fresh = np.empty_like(decoded)
        fresh[perm] = decoded
    state.ledger.charge(count)
    key = KeyBuffer(fresh, f"K{state.cycle + 1}")
    state.pending = key.copy()
    return key


def apply_discard(key: KeyBuffer, ledger: LeakageLedger, shared_secret: KeyBuffer) -> KeyBuffer:
    """Drop ``ceil(len/L)`` bits at positions derived from ``shared_secret``.

    One rotation consumes :data:`DISCARD_SEED_BITS` secret bits, expanded
    with SHAKE-256 and rejection-sampled into positions, so both parties
    remove the same bits and the reserve cost per cycle is fixed.
    """
    bits = key.unspent()
    removals = ledger.discard_count(bits.size)
    if removals == 0:
        return KeyBuffer(bits.copy(), key.origin)
    if removals >= bits.size:
        raise InsufficientSecret("discard would remove the whole key")
    try:
        seed = pack_bits(shared_secret.take(DISCARD_SEED_BITS))
    except KeyStarvation as exc:
        raise InsufficientSecret("not enough shared secret bits to place discards") from exc
    words = WordStream(b"notp-discard\x00" + seed)
    keep = list(range(bits.size))
    for _ in range(removals):
        del keep[words.below(len(keep))]
    ledger.discarded += removals
    return KeyBuffer(bits[np.asarray(keep, dtype=np.int64)], key.origin)


def rotate(state: SessionState, new_key: KeyBuffer) -> SessionState:
    """Accept the agreed key of the current cycle and chain it in."""
    if state.pending is None:
        raise RotationError("no completed batch to rotate in")
    if not np.array_equal(state.pending.bits, new_key.bits):
        raise RotationError("key does not match this party's pending key")
    origin = f"K{state.cycle + 1}"
    trimmed = apply_discard(new_key, state.ledger, state.reserve).bits
    refill = min(max(0, state.reserve_target - state.reserve.remaining), trimmed.size)
    state.reserve.extend(trimmed[:refill])
    kept = trimmed[refill:]
    state.harvested.append(KeyBuffer(kept, origin))
    state.basis_key = KeyBuffer(np.concatenate([kept, state.basis_key.unspent()]), origin)
    state.cycle += 1
    state.pending = None
    return state


def abandon_pending(state: SessionState, refund: bool) -> None:
    """Drop an unagreed batch; ``refund`` when the batch never left this party."""
    if state.pending is not None and refund:
        state.ledger.refund(len(state.pending))
    state.pending = None


def _take_harvest(state: SessionState, nbits: int) -> np.ndarray:
    if nbits > state.unspent_harvest:
        raise KeyStarvation(f"{nbits} key bits needed, {state.unspent_harvest} unspent")
    out = []
    need = nbits
    for key in state.harvested:
        if need == 0:
            break
        n = min(need, key.remaining)
        if n:
            out.append(key.take(n))
            need -= n
    return np.concatenate(out) if out else np.zeros(0, np.uint8)


def xor_with_key(message: bytes, key_bits) -> bytes:
    pad = np.frombuffer(pack_bits(key_bits), dtype=np.uint8)
    return (np.frombuffer(message, dtype=np.uint8) ^ pad[:len(message)]).tobytes()


def hmac_tag(message: bytes, key_bits) -> bytes:
    return hmac.new(pack_bits(as_bits(key_bits)), message, hashlib.sha256).digest()


def otp_encrypt(message: bytes, state: SessionState) -> bytes:
    """XOR ``message`` with the next unspent harvested bits (also decrypts)."""
    if not message:
        return b""
    return xor_with_key(message, _take_harvest(state, 8 * len(message)))


otp_decrypt = otp_encrypt


def mac_tag(message: bytes, state: SessionState, key_bits: int = MAC_KEY_BITS) -> bytes:
    """HMAC-SHA256 tag under ``key_bits`` freshly consumed harvested bits."""
    return hmac_tag(message, _take_harvest(state, key_bits))


def mac_verify(message: bytes, tag: bytes, state: SessionState, key_bits: int = MAC_KEY_BITS) -> bool:
    expected = mac_tag(message, state, key_bits)
    return hmac.compare_digest(expected, bytes(tag))


def exchange(producer: SessionState, consumer: SessionState, count: int,
             entropy: EntropyStream) -> tuple[Batch, KeyBuffer, KeyBuffer]:
    """One in-process cycle: produce, consume, and rotate both sides on agreement.

    Returns the batch, the producer's key and the consumer's key.  On
    disagreement nothing is rotated and :class:`ProtocolError` is raised.
    """
    batch, sent = produce_batch(producer, count, entropy)
    if count == 0:
        return batch, sent, sent
    got = consume_batch(consumer, batch)
    if not np.array_equal(sent.bits, got.bits):
        abandon_pending(producer, refund=False)
        abandon_pending(consumer, refund=False)
        raise ProtocolError(f"cycle {batch.cycle}: recovered key differs from sent key")
    rotate(producer, sent)
    rotate(consumer, got)
    return batch, sent, got


def session_pair(genesis: KeyBuffer, params: NoiseParams, shuffle: ShuffleConfig | None = None,
                 **kw) -> tuple[SessionState, SessionState]:
    """Initiator and responder sessions sharing one genesis key."""
    return (init_session(genesis, params, shuffle, Role.INITIATOR, **kw),
            init_session(genesis, params, shuffle, Role.RESPONDER, **kw))
