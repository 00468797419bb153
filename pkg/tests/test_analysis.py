import math

import pytest

from notp.analysis import (CSV_HEADER, DomainError, SweepRow, attacker_error, check_condition,
                           classical_ml_error, entropy_leak, evaluate_point, format_number,
                           helstrom_error, leak_report, length_limit, rows_to_csv, sweep)
from notp.physics import NoiseParams, state_overlap
import oracles as O

P11 = NoiseParams.from_exponent(100, 11)
P01 = NoiseParams(100, 0.1)


def test_helstrom_oracle():
    assert helstrom_error(0.77880) == pytest.approx(O.HELSTROM_07788, rel=1e-12)


def test_attacker_error_oracles():
    assert attacker_error(P01) == pytest.approx(O.ATTACKER_100_01, rel=1e-12)
    assert attacker_error(P11) == pytest.approx(O.ATTACKER_100_2M11, rel=1e-12)


def test_attacker_error_uses_doubled_intensity():
    # two exposures of the same bit at <n> look like one at 2<n>
    assert attacker_error(P01, 2) == pytest.approx(attacker_error(NoiseParams(200, 0.1), 1), rel=1e-14)
    assert attacker_error(P01, 2) <= attacker_error(P01, 1)


def test_entropy_leak_oracles():
    assert entropy_leak(0.18640) == pytest.approx(O.LEAK_018640, rel=1e-12)
    assert entropy_leak(attacker_error(P01)) == pytest.approx(O.LEAK_ATTACKER_100_01, rel=1e-12)


def test_leak_report_chain():
    rep = leak_report(P11)
    assert rep.delta_h == pytest.approx(O.DELTA_H_100_2M11, rel=1e-12)
    assert rep.length_limit == pytest.approx(O.LENGTH_100_2M11, rel=1e-9)
    assert math.floor(rep.length_limit) == 1301
    assert rep.p_success == pytest.approx(1 - rep.p_error)
    assert rep.leak_prob_per_bit == pytest.approx(1 / rep.length_limit)
    assert rep.length_limit * (rep.delta_h - 0.5) == pytest.approx(1.0, rel=1e-12)


def test_condition_check():
    c = check_condition(P11)
    assert c.passed
    assert c.ratio_left == pytest.approx(O.RATIO_LEFT_100, rel=1e-12)
    assert c.ratio_right == pytest.approx(O.RATIO_RIGHT_100_2M11, rel=1e-12)
    assert not check_condition(NoiseParams(100, 0.1)).passed  # sigma/dphi = 1.41
    assert not check_condition(NoiseParams(10, 0.01)).passed  # (pi/2)/sigma = 3.5


def test_classical_ml_error():
    assert classical_ml_error(P01) == pytest.approx(O.ML_100_01, rel=1e-12)
    assert classical_ml_error(P01, 2) == pytest.approx(O.ML_100_01_R2, rel=1e-12)
    with pytest.raises(DomainError):
        classical_ml_error(P01, 0)


def test_limiting_cases():
    flat = NoiseParams.unchecked(100, 0.0)
    assert attacker_error(flat) == 0.5
    assert entropy_leak(0.5) == 0.5
    assert length_limit(0.5) == math.inf
    assert helstrom_error(0.0) == 0.0
    assert helstrom_error(1.0) == 0.5
    assert classical_ml_error(flat) == 0.5


@pytest.mark.parametrize("fn,arg", [
    (helstrom_error, -0.1), (helstrom_error, 1.1),
    (entropy_leak, -0.01), (entropy_leak, 0.51),
    (length_limit, 0.49), (length_limit, 1.01),
])
def test_domain_errors(fn, arg):
    with pytest.raises(DomainError):
        fn(arg)


def test_entropy_leak_strictly_decreasing():
    xs = [i / 1000 for i in range(1, 500)]
    ys = [entropy_leak(x) for x in xs]
    assert all(a > b for a, b in zip(ys, ys[1:]))


def test_helstrom_of_exact_overlap_is_below_ml():
    for (n, d), (ml, hel) in O.GRID.items():
        p = NoiseParams(n, d)
        assert helstrom_error(state_overlap(p)) == pytest.approx(hel, rel=1e-9)
        assert classical_ml_error(p) == pytest.approx(ml, rel=1e-9)
        assert hel < ml


def test_sweep_order_and_size():
    ns = [20, 50, 100, 200, 500]
    ds = [2.0 ** -k for k in range(7, 12)]
    rows = sweep(ns, ds)
    assert len(rows) == 25
    assert [(r.n_mean, r.delta_phi) for r in rows] == [(n, d) for n in ns for d in ds]


def test_delta_h_nondecreasing_in_n():
    ds = [2.0 ** -k for k in (8, 10)]
    rows = sweep([20, 50, 100, 400], ds)
    for d in ds:
        col = [r.delta_h for r in rows if r.delta_phi == d]
        assert all(a <= b for a, b in zip(col, col[1:]))


def test_invalid_points_are_flagged():
    row = evaluate_point(100, 0.0)
    assert not row.valid
    assert "invalid" in rows_to_csv([row])


def test_csv_format():
    text = rows_to_csv([evaluate_point(100, 2 ** -11), SweepRow(1.0, 0.0, 0.5, 0.5, math.inf, False)])
    lines = text.split("\n")
    assert lines[0] == ",".join(CSV_HEADER)
    assert "\r" not in text and text.endswith("\n")
    assert lines[1].endswith(",true")
    assert lines[2].split(",")[4] == "inf"


def test_format_number():
    assert format_number(math.inf) == "inf"
    assert format_number(math.nan) == "nan"
    assert format_number(1301.18160589806) == "1301.1816059"
