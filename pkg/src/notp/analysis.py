"""Closed-form security analysis: attacker error, leaked entropy, length budget.

All entropies are in bits.  The protocol sends each fresh bit twice (once as
data, once as basis information for the next batch), which the analysis
models as one measurement at ``repetitions * <n>``.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from scipy.stats import norm

from .physics import NoiseParams, sigma_phi

PROTOCOL_REPETITIONS = 2
CSV_HEADER = ("n_mean", "delta_phi", "p_error", "delta_h", "length_limit", "condition_pass")


class DomainError(ValueError):
    """Argument outside the mathematical domain of a formula."""


@dataclass(frozen=True)
class LeakReport:
    p_error: float
    p_success: float
    h_success: float
    delta_h: float
    length_limit: float
    leak_prob_per_bit: float


@dataclass(frozen=True)
class ConditionReport:
    sigma: float
    ratio_left: float
    ratio_right: float
    passed: bool


def helstrom_error(overlap: float) -> float:
    """Minimum error for telling two pure states apart given ``|<a|b>|**2``."""
    if not 0.0 <= overlap <= 1.0:
        raise DomainError(f"overlap {overlap} outside [0, 1]")
    return 0.5 * (1.0 - math.sqrt(1.0 - overlap))


def attacker_error(params: NoiseParams, repetitions: int = PROTOCOL_REPETITIONS) -> float:
    """Attacker's basis/bit error after ``repetitions`` exposures of each bit."""
    if repetitions < 1:
        raise DomainError("repetitions must be >= 1")
    x = repetitions * params.mean_photon_number / 4.0 * params.delta_phi ** 2
    # 1 - exp(-x) via expm1 so tiny exponents keep their digits
    return 0.5 * (1.0 - math.sqrt(-math.expm1(-x)))


def entropy_leak(p_error: float) -> float:
    """Entropy change ``1 - H_s`` with ``H_s = -P_s log2 P_s``."""
    if not 0.0 <= p_error <= 0.5:
        raise DomainError(f"p_error {p_error} outside [0, 1/2]")
    p_s = 1.0 - p_error
    return 1.0 + p_s * math.log2(p_s)


def length_limit(delta_h: float) -> float:
    """Emission budget ``L`` solving ``L * (delta_h - 1/2) = 1``."""
    if not 0.5 <= delta_h <= 1.0:
        raise DomainError(f"delta_h {delta_h} outside [1/2, 1]")
    excess = delta_h - 0.5
    return math.inf if excess == 0.0 else 1.0 / excess


def leak_report(params: NoiseParams, repetitions: int = PROTOCOL_REPETITIONS) -> LeakReport:
    p_e = attacker_error(params, repetitions)
    p_s = 1.0 - p_e
    h_s = -p_s * math.log2(p_s)
    dh = entropy_leak(p_e)
    limit = length_limit(dh)
    return LeakReport(p_e, p_s, h_s, dh, limit, 0.0 if math.isinf(limit) else 1.0 / limit)


def check_condition(params: NoiseParams) -> ConditionReport:
    """Check ``pi/2 >> sigma >> dphi`` with ">>" meaning ratio >= guard."""
    sigma = sigma_phi(params)
    left = math.inf if sigma == 0 else (math.pi / 2) / sigma
    right = math.inf if params.delta_phi == 0 else sigma / params.delta_phi
    guard = params.guard_ratio
    return ConditionReport(sigma, left, right, left >= guard and right >= guard)


def classical_ml_error(params: NoiseParams, repetitions: int = 1) -> float:
    """Error of the best phase-threshold receiver between two Gaussians.

    Separation ``dphi``, width ``sigma / sqrt(repetitions)``: ``Q(dphi sqrt(r) / 2 sigma)``.
    """
    if repetitions < 1:
        raise DomainError("repetitions must be >= 1")
    sigma = sigma_phi(params)
    if params.delta_phi == 0:
        return 0.5
    if sigma == 0:
        return 0.0
    return float(norm.sf(params.delta_phi * math.sqrt(repetitions) / (2.0 * sigma)))


@dataclass(frozen=True)
class SweepRow:
    n_mean: float
    delta_phi: float
    p_error: float = math.nan
    delta_h: float = math.nan
    length_limit: float = math.nan
    condition_pass: bool = False
    error: str | None = None

    @property
    def valid(self) -> bool:
        return self.error is None


def evaluate_point(n_mean: float, delta_phi: float, adc_bits: int = 16, guard_ratio: float = 5.0,
                   repetitions: int = PROTOCOL_REPETITIONS) -> SweepRow:
    try:
        params = NoiseParams(n_mean, delta_phi, adc_bits, guard_ratio)
    except ValueError as exc:
        return SweepRow(n_mean, delta_phi, error=str(exc))
    rep = leak_report(params, repetitions)
    return SweepRow(n_mean, delta_phi, rep.p_error, rep.delta_h, rep.length_limit,
                    check_condition(params).passed)


def sweep(n_values: Sequence[float], dphi_values: Sequence[float], adc_bits: int = 16,
          guard_ratio: float = 5.0, repetitions: int = PROTOCOL_REPETITIONS) -> list[SweepRow]:
    """Evaluate the grid ``n_values x dphi_values`` (n outer, dphi inner).

    Invalid points are kept and flagged through ``SweepRow.error``.
    """
    return [evaluate_point(n, d, adc_bits, guard_ratio, repetitions)
            for n, d in itertools.product(n_values, dphi_values)]


def format_number(x: float) -> str:
    """12 significant digits; ``inf`` and ``nan`` spelled literally."""
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if math.isnan(x):
        return "nan"
    return format(x, ".12g")


def rows_to_csv(rows: Iterable[SweepRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in rows:
        flag = "invalid" if not r.valid else ("true" if r.condition_pass else "false")
        writer.writerow([format_number(r.n_mean), format_number(r.delta_phi), format_number(r.p_error),
                         format_number(r.delta_h), format_number(r.length_limit), flag])
    return buf.getvalue()
