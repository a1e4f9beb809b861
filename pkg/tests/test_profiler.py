import json
from decimal import Decimal, localcontext

import pytest

from ibimhav.profiler import cost_report, flops_ibmsa, flops_msa, window_counts

CONFIGS = [
    (32, 32, 24, 128, 4),
    (1, 1, 1, 1, 1),
    (8, 8, 8, 16, 4),
    (16, 16, 12, 256, 4),
    (64, 48, 40, 96, 8),
]


def big_msa(h, w, d, C):
    # factored form evaluated with exact decimals
    with localcontext() as ctx:
        ctx.prec = 80
        L = Decimal(h) * Decimal(w) * Decimal(d)
        return int(Decimal(2) * L * Decimal(C) * (Decimal(2) * Decimal(C) + L))


def big_ibmsa(h, w, d, C, S):
    with localcontext() as ctx:
        ctx.prec = 80
        L = Decimal(h) * Decimal(w) * Decimal(d)
        return int(Decimal(2) * L * Decimal(C) * (Decimal(2) * Decimal(C) + Decimal(S) ** 3))


@pytest.mark.parametrize("h,w,d,C,S", CONFIGS)
def test_formulas_match_big_integer_evaluation(h, w, d, C, S):
    assert flops_msa(h, w, d, C) == big_msa(h, w, d, C)
    assert flops_ibmsa(h, w, d, C, S, S, S) == big_ibmsa(h, w, d, C, S)


def test_reference_configuration_literal():
    assert flops_msa(32, 32, 24, 128) == 4 * 24576 * 16384 + 2 * 24576 ** 2 * 128
    assert flops_ibmsa(32, 32, 24, 128, 4, 4, 4) == 4 * 24576 * 16384 + 2 * 64 * 24576 * 128


def test_unit_case():
    assert flops_msa(1, 1, 1, 1) == 6


def test_channel_doubling():
    a, b = flops_msa(4, 4, 4, 8), flops_msa(4, 4, 4, 16)
    L = 64
    assert b - a == 3 * 4 * L * 8 * 8 + 2 * L * L * 8


def test_full_window_equals_global():
    assert flops_ibmsa(6, 4, 2, 12, 6, 4, 2) == flops_msa(6, 4, 2, 12)


@pytest.mark.parametrize("h,w,d,C,S", [c for c in CONFIGS if c[4] ** 3 < c[0] * c[1] * c[2]])
def test_windowed_cheaper(h, w, d, C, S):
    assert flops_ibmsa(h, w, d, C, S, S, S) < flops_msa(h, w, d, C)


def test_invalid_dims():
    with pytest.raises(ValueError):
        flops_msa(0, 4, 4, 4)


def test_window_counts():
    assert window_counts((8, 8, 8), (4, 4, 4)) == (8, 27, 8)
    assert window_counts((4, 4, 4), (4, 4, 4)) == (1, 8, 1)
    assert window_counts((32, 32, 24), (4, 4, 4)) == (384, 9 * 9 * 7, 384)
    with pytest.raises(ValueError):
        window_counts((6, 8, 8), (4, 4, 4))


def test_report():
    r = cost_report((32, 32, 24), 128, (4, 4, 4))
    d = json.loads(r.to_json())
    assert d["flops_msa"] == flops_msa(32, 32, 24, 128)
    assert d["windows_naive_shifted"] == 567
    assert 0 < d["ratio"] < 0.02
    assert "window IB-MSA" in r.table()
