import pytest

from gaprouter.costmodel import (
    PriceSheet, TokenCounts, hybrid_input_tokens, load_price_sheet, parse_price_sheet, per_thousand,
    routed_cost, routed_cost_pico, single_cost, single_cost_pico, to_picodollars,
)
from gaprouter.errors import InvalidInput
from gaprouter.route import RoutingDecision

PRICES = PriceSheet.from_dollars("1e-6", "2e-6", "2e-6", "8e-6")
DEFERRED = RoutingDecision(1, "guardian", 2, True, 2, 4)
ALONE = RoutingDecision(0, "primary", 1, False, 0, 4)


def test_single_cost_examples(tokens):
    assert single_cost(tokens, PRICES, "primary") == 2.0e-4
    assert single_cost(TokenCounts(), PRICES, "primary") == 0
    assert single_cost(tokens, PriceSheet(0, 0, 0, 0), "guardian") == 0
    with pytest.raises(InvalidInput):
        single_cost(None, PRICES, "primary")


def test_hybrid_input_tokens():
    assert hybrid_input_tokens(100, 2, 4) == 75
    assert hybrid_input_tokens(101, 3, 3) == 101
    assert hybrid_input_tokens(0, 1, 4) == 0
    assert hybrid_input_tokens(7, 1, 4) == 4  # floor(7 * 0.625)
    for m, n in ((0, 4), (5, 4)):
        with pytest.raises(InvalidInput):
            hybrid_input_tokens(100, m, n)


def test_hybrid_monotone_and_bounded():
    for full in range(0, 300, 7):
        for n in range(1, 8):
            vals = [hybrid_input_tokens(full, m, n) for m in range(1, n + 1)]
            assert vals == sorted(vals) and vals[-1] == full


def test_routed_cost(tokens):
    assert routed_cost(tokens, PRICES, ALONE) == single_cost(tokens, PRICES, "primary")
    expected_pico = (100 * 10**6 + 50 * 2 * 10**6) + (75 * 2 * 10**6 + 50 * 8 * 10**6)
    assert routed_cost_pico(tokens, PRICES, DEFERRED) == expected_pico
    assert routed_cost(tokens, PRICES, DEFERRED) == pytest.approx(2.0e-4 + 75 * 2e-6 + 50 * 8e-6, abs=0)
    assert routed_cost(tokens, PRICES, DEFERRED) >= routed_cost(tokens, PRICES, ALONE)


def test_linear_in_prices(tokens):
    doubled = PRICES.scaled(2)
    for d in (ALONE, DEFERRED):
        assert routed_cost_pico(tokens, doubled, d) == 2 * routed_cost_pico(tokens, PRICES, d)
    assert single_cost_pico(tokens, doubled, "guardian") == 2 * single_cost_pico(tokens, PRICES, "guardian")


def test_picodollars():
    assert to_picodollars("1e-7") == 100_000
    assert to_picodollars(2e-6) == 2_000_000
    for bad in ("-1", "nan", "1e-13", "abc"):
        with pytest.raises(InvalidInput):
            to_picodollars(bad)
    assert per_thousand([10**6, 3 * 10**6]) == 2e-3


def test_price_sheet_file(tmp_path, monkeypatch):
    text = "# dollars per token\nprimary_in_price = 1e-7\nprimary_out_price: 4e-7\n" \
           "guardian_in_price = 2e-6\nguardian_out_price = 8e-6\n"
    sheet = parse_price_sheet(text)
    assert sheet == PriceSheet.from_dollars("1e-7", "4e-7", "2e-6", "8e-6")
    path = tmp_path / "prices.txt"
    path.write_text(text)
    monkeypatch.setenv("GAPROUTER_PRICE_SHEET", str(path))
    assert load_price_sheet() == sheet
    monkeypatch.delenv("GAPROUTER_PRICE_SHEET")
    assert load_price_sheet() is None
    with pytest.raises(InvalidInput):
        parse_price_sheet("primary_in_price = 1e-7\n")
    with pytest.raises(InvalidInput):
        parse_price_sheet(text + "bogus = 1\n")


def test_token_counts_validation():
    with pytest.raises(InvalidInput):
        TokenCounts(primary_in=-1)
    with pytest.raises(InvalidInput):
        TokenCounts(full_in=1.5)
