"""Eavesdropper simulators scored against hidden ground truth.

Attackers only receive what crosses the wire (recorded phase samples, i.e.
:class:`~notp.protocol.Batch` objects) plus explicitly declared side
information such as a known plaintext.  Truth is used by the harness for
scoring and never reaches the attack functions themselves.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp
from statsmodels.stats.proportion import proportion_confint

from .entropy import EntropyStream
from .keys import KeyBuffer, unpack_bits
from .physics import TWO_PI, NoiseParams, decode_many, dequantize, record_many, sigma_phi
from .protocol import Batch, SessionState, exchange, otp_encrypt, session_pair
from .shuffle import ShuffleConfig, select_permutation

CONFIDENCE = 0.99
REPORT_HEADER = ("attack", "params", "trials", "correct", "accuracy", "ci_low", "ci_high", "reference_value")


@dataclass(frozen=True)
class AttackOutcome:
    trials: int
    correct: int
    accuracy: float
    wilson_interval: tuple[float, float]

    @classmethod
    def from_counts(cls, correct: int, trials: int, confidence: float = CONFIDENCE) -> "AttackOutcome":
        if trials <= 0 or not 0 <= correct <= trials:
            raise ValueError("need 0 <= correct <= trials and trials > 0")
        low, high = proportion_confint(correct, trials, alpha=1 - confidence, method="wilson")
        return cls(int(trials), int(correct), correct / trials, (float(low), float(high)))

    @property
    def error_rate(self) -> float:
        return 1.0 - self.accuracy

    def contains(self, p: float) -> bool:
        low, high = self.wilson_interval
        return low <= p <= high


def _wrapped_logpdf(phase, centre, sigma, period=TWO_PI, terms=None):
    """Log density of a Gaussian wrapped onto a circle of length ``period``.

    By default enough aliases are kept that the first dropped one sits more
    than 12 sigma away (relative weight below 1e-31).
    """
    if terms is None:
        terms = max(1, math.ceil(12.0 * sigma / period))
    d = np.mod(np.asarray(phase) - centre + period / 2, period) - period / 2
    shifts = np.arange(-terms, terms + 1) * period
    z = (d[..., None] + shifts) / sigma
    return logsumexp(-0.5 * z * z, axis=-1) - math.log(sigma * math.sqrt(2 * math.pi))


def bit_log_likelihoods(samples, params: NoiseParams) -> tuple[np.ndarray, np.ndarray]:
    """Log-likelihood of bit 0 and bit 1 when the basis is unknown (uniform)."""
    phase = dequantize(np.asarray(samples), params)
    sigma = sigma_phi(params)
    dphi = params.delta_phi
    half = math.log(0.5)
    # bit 0 sits at 0 (basis 0) or pi + dphi (basis 1); bit 1 at pi or dphi
    ll0 = np.logaddexp(_wrapped_logpdf(phase, 0.0, sigma), _wrapped_logpdf(phase, math.pi + dphi, sigma)) + half
    ll1 = np.logaddexp(_wrapped_logpdf(phase, math.pi, sigma), _wrapped_logpdf(phase, dphi, sigma)) + half
    return ll0, ll1


def ml_bits(samples, params: NoiseParams) -> np.ndarray:
    """Maximum-likelihood bit guesses without basis knowledge; ties to 0."""
    ll0, ll1 = bit_log_likelihoods(samples, params)
    return (ll1 > ll0).astype(np.uint8)


def eavesdrop_ml(batches: Sequence[Batch] | np.ndarray, truth, params: NoiseParams) -> AttackOutcome:
    """Score per-emission ML guesses against the transmitted bits."""
    if isinstance(batches, np.ndarray):
        samples = batches
    else:
        samples = np.concatenate([np.asarray(b.samples) for b in batches]) if batches else np.zeros(0, np.int64)
    truth = np.asarray(truth, dtype=np.uint8)
    if truth.size != samples.size:
        raise ValueError("truth and traffic differ in length")
    guesses = ml_bits(samples, params)
    return AttackOutcome.from_counts(int(np.sum(guesses == truth)), truth.size)


def basis_llr(samples, params: NoiseParams) -> np.ndarray:
    """Per-sample log-likelihood ratio of basis 1 over basis 0 (data bit unknown).

    Within a basis the two codewords are pi apart, so each hypothesis is a
    Gaussian wrapped with period pi.
    """
    phase = dequantize(np.asarray(samples), params)
    sigma = sigma_phi(params)
    return (_wrapped_logpdf(phase, params.delta_phi, sigma, period=math.pi)
            - _wrapped_logpdf(phase, 0.0, sigma, period=math.pi))


def estimate_basis_block(block, params: NoiseParams) -> tuple[int, float]:
    """Guess the single basis bit shared by every emission in ``block``.

    Returns the guess and its posterior probability under equal priors.
    """
    llr = float(np.sum(basis_llr(block, params)))
    guess = 1 if llr > 0 else 0
    return guess, 1.0 / (1.0 + math.exp(-abs(llr)))


def basis_block_trials(params: NoiseParams, block_len: int, trials: int, entropy: EntropyStream,
                       chunk_samples: int = 2_000_000) -> AttackOutcome:
    """Monte-Carlo accuracy of :func:`estimate_basis_block` on fresh blocks."""
    correct = 0
    per_chunk = max(1, chunk_samples // block_len)
    done = 0
    while done < trials:
        m = min(per_chunk, trials - done)
        basis = entropy.bits(m)
        data = entropy.bits(m * block_len)
        samples = record_many(data, np.repeat(basis, block_len), params, entropy)
        llr = basis_llr(samples, params).reshape(m, block_len).sum(axis=1)
        guesses = (llr > 0).astype(np.uint8)
        correct += int(np.sum(guesses == basis))
        done += m
    return AttackOutcome.from_counts(correct, trials)


def eavesdrop_trials(params: NoiseParams, trials: int, entropy: EntropyStream) -> AttackOutcome:
    """Random bits in random bases, attacked one emission at a time."""
    bits = entropy.bits(trials)
    bases = entropy.bits(trials)
    samples = record_many(bits, bases, params, entropy)
    return eavesdrop_ml(samples, bits, params)


@dataclass
class KpaResult:
    recovered: list[np.ndarray]
    known: list[np.ndarray] = field(default_factory=list)  # positions each guess actually covers
    outcomes: list[AttackOutcome] = field(default_factory=list)

    @property
    def outcome(self) -> AttackOutcome:
        """Score of the first key recovered from traffic (the second key of the chain)."""
        return self.outcomes[0]


def run_kpa(traffic: Sequence[Batch], known_plaintext: bytes, ciphertext: bytes, params: NoiseParams,
            *, truth: Sequence[np.ndarray] | None = None,
            leaked: dict[int, tuple[int, bytes]] | None = None) -> KpaResult:
    """Known-plaintext chain attack.

    ``ciphertext ^ known_plaintext`` exposes the pad, i.e. the head of the
    key used as basis for ``traffic[1]``.  Each later recording is decoded
    with the previously recovered key as basis.  ``leaked`` maps a traffic
    index to a ``(selector, list_seed)`` pair the attacker has learned, which
    lets it undo the shuffle of that batch.  ``truth[i]`` is the real key
    carried by ``traffic[i + 1]`` and is only used for scoring.
    """
    if len(known_plaintext) != len(ciphertext):
        raise ValueError("plaintext and ciphertext lengths differ")
    pad = bytes(a ^ b for a, b in zip(known_plaintext, ciphertext))
    basis = unpack_bits(pad, 8 * len(pad))
    recovered = [basis]
    known = [np.arange(basis.size)]
    leaked = leaked or {}
    for idx in range(1, len(traffic)):
        samples = np.asarray(traffic[idx].samples)
        n = min(samples.size, basis.size)
        decoded = decode_many(samples[:n], basis[:n], params)
        where = np.arange(n)
        if idx in leaked:
            selector, seed = leaked[idx]
            where = select_permutation(selector, seed, samples.size)[:n]
            full = np.zeros(samples.size, np.uint8)
            full[where] = decoded
            decoded = full
            where = np.sort(where)
        recovered.append(decoded)
        known.append(where)
        basis = decoded
    result = KpaResult(recovered, known)
    if truth is not None:
        for guess, where, real in zip(recovered[1:], known[1:], truth):
            real = np.asarray(real, dtype=np.uint8)
            where = where[where < real.size]
            result.outcomes.append(AttackOutcome.from_counts(int(np.sum(guess[where] == real[where])), where.size))
    return result


@dataclass
class KpaExperiment:
    result: KpaResult
    traffic: list[Batch]
    truth: list[np.ndarray]
    selectors: list[int | None]
    initiator: SessionState
    responder: SessionState


def run_kpa_experiment(params: NoiseParams, genesis: KeyBuffer, batch_sizes: Sequence[int],
                       plaintext_bits: int, shuffle: ShuffleConfig, entropy: EntropyStream,
                       leak_selectors: bool = False) -> KpaExperiment:
    """Run real protocol cycles, encrypt a known plaintext with the first
    harvested key, then attack the recorded traffic."""
    a, b = session_pair(genesis, params, shuffle)
    traffic, truth, selectors = [], [], []
    for i, count in enumerate(batch_sizes):
        prod, cons = (a, b) if i % 2 == 0 else (b, a)
        batch, sent, _ = exchange(prod, cons, count, entropy.spawn(i) if hasattr(entropy, "spawn") else entropy)
        traffic.append(batch)
        truth.append(sent.bits)
        selectors.append(prod.last_truth.selector)
    plaintext = entropy.random_bytes(plaintext_bits // 8)
    ciphertext = otp_encrypt(plaintext, a)
    leaked = None
    if leak_selectors and shuffle.enabled:
        leaked = {i: (selectors[i], shuffle.list_seed) for i in range(1, len(traffic))}
    result = run_kpa(traffic, plaintext, ciphertext, params, truth=truth[1:], leaked=leaked)
    return KpaExperiment(result, traffic, truth, selectors, a, b)


def format_params(params: NoiseParams) -> str:
    return f"n={params.mean_photon_number:g};dphi={params.delta_phi:.12g};adc={params.adc_bits}"


def report_csv(rows: Sequence[tuple[str, str, AttackOutcome, float]]) -> str:
    """CSV attack report; each row is ``(attack, params, outcome, reference)``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for attack, params, out, ref in rows:
        low, high = out.wilson_interval
        w.writerow([attack, params, out.trials, out.correct, format(out.accuracy, ".12g"),
                    format(low, ".12g"), format(high, ".12g"), format(ref, ".12g")])
    return buf.getvalue()
