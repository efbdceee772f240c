"""Token-based dollar accounting for single-model and routed calls.

Prices are dollars per token. Internally every price is converted to an
integer number of picodollars (1e-12 $) so that costs are exact integers
and aggregates never drift; dollars are only produced at the edges.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Iterable, Literal

from .errors import InvalidInput

PICO_PER_DOLLAR = 10**12
PRICE_SHEET_ENV = "GAPROUTER_PRICE_SHEET"

Model = Literal["primary", "guardian"]


@dataclass(frozen=True)
class TokenCounts:
    """Prompt/completion token usage logged for one instance."""

    primary_in: int = 0
    primary_out: int = 0
    guardian_in: int = 0
    guardian_out: int = 0
    full_in: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 0:
                raise InvalidInput(f"token count {f.name} must be a non-negative integer, got {v!r}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def to_picodollars(price: float | str | Decimal) -> int:
    """Convert a dollar amount to an exact integer of picodollars."""
    try:
        d = Decimal(str(price)) if not isinstance(price, Decimal) else price
    except InvalidOperation as exc:
        raise InvalidInput(f"not a price: {price!r}") from exc
    if not d.is_finite() or d < 0:
        raise InvalidInput(f"price must be finite and non-negative, got {price!r}")
    scaled = d.scaleb(12)
    if scaled != scaled.to_integral_value():
        raise InvalidInput(f"price {price!r} is finer than 1e-12 dollars per token")
    return int(scaled)


def pico_to_dollars(pico: int) -> float:
    return pico / PICO_PER_DOLLAR


@dataclass(frozen=True)
class PriceSheet:
    """Per-token prices in dollars, stored exactly as picodollar integers."""

    primary_in_price: int
    primary_out_price: int
    guardian_in_price: int
    guardian_out_price: int

    @classmethod
    def from_dollars(cls, primary_in, primary_out, guardian_in, guardian_out) -> "PriceSheet":
        return cls(
            to_picodollars(primary_in),
            to_picodollars(primary_out),
            to_picodollars(guardian_in),
            to_picodollars(guardian_out),
        )

    def scaled(self, factor: int) -> "PriceSheet":
        return PriceSheet(*(factor * getattr(self, f.name) for f in fields(self)))

    def prices_for(self, model: Model) -> tuple[int, int]:
        if model == "primary":
            return self.primary_in_price, self.primary_out_price
        if model == "guardian":
            return self.guardian_in_price, self.guardian_out_price
        raise InvalidInput(f"unknown model {model!r}")

    def to_dict(self) -> dict:
        return {f.name: str(Decimal(getattr(self, f.name)).scaleb(-12).normalize()) for f in fields(self)}


_SHEET_KEYS = ("primary_in_price", "primary_out_price", "guardian_in_price", "guardian_out_price")


def parse_price_sheet(text: str) -> PriceSheet:
    """Parse ``key = value`` (or ``key: value``) lines; ``#`` starts a comment."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else ":"
        if sep not in line:
            raise InvalidInput(f"price sheet line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split(sep, 1))
        if key not in _SHEET_KEYS:
            raise InvalidInput(f"price sheet line {lineno}: unknown key {key!r}")
        values[key] = value
    missing = [k for k in _SHEET_KEYS if k not in values]
    if missing:
        raise InvalidInput(f"price sheet missing keys: {', '.join(missing)}")
    return PriceSheet(*(to_picodollars(values[k]) for k in _SHEET_KEYS))


def load_price_sheet(path: str | os.PathLike | None = None) -> PriceSheet | None:
    """Read a price sheet; falls back to ``$GAPROUTER_PRICE_SHEET``, else None."""
    if path is None:
        path = os.environ.get(PRICE_SHEET_ENV)
        if not path:
            return None
    p = Path(path)
    if not p.is_file():
        raise InvalidInput(f"price sheet not found: {p}")
    return parse_price_sheet(p.read_text(encoding="utf-8"))


def single_cost_pico(tokens: TokenCounts, prices: PriceSheet, model: Model) -> int:
    c_in, c_out = prices.prices_for(model)
    if model == "primary":
        return c_in * tokens.primary_in + c_out * tokens.primary_out
    return c_in * tokens.guardian_in + c_out * tokens.guardian_out


def single_cost(tokens: TokenCounts | None, prices: PriceSheet, model: Model) -> float:
    """Dollar cost of one call to ``model``: c_in * t_in + c_out * t_out."""
    if tokens is None:
        raise InvalidInput(f"token counts required for {model} cost")
    return pico_to_dollars(single_cost_pico(tokens, prices, model))


def hybrid_input_tokens(full_in: int, m: int, n: int) -> int:
    """Prompt tokens charged when only ``m`` of ``n`` options go to the Guardian.

    ``floor(full_in * (0.5 + 0.5 * m / n))``, evaluated in integers.
    """
    if n < 1 or m < 1 or m > n:
        raise InvalidInput(f"need 1 <= m <= n, got m={m}, n={n}")
    if full_in < 0:
        raise InvalidInput("full_in must be non-negative")
    return (full_in * (n + m)) // (2 * n)


def routed_cost_pico(tokens: TokenCounts | None, prices: PriceSheet, decision) -> int:
    if tokens is None:
        raise InvalidInput("token counts required for routed cost")
    cost = single_cost_pico(tokens, prices, "primary")
    if decision.deferred:
        g_in, g_out = prices.guardian_in_price, prices.guardian_out_price
        shown = hybrid_input_tokens(tokens.full_in, decision.menu_size, decision.action_count)
        cost += g_in * shown + g_out * tokens.guardian_out
    return cost


def routed_cost(tokens: TokenCounts | None, prices: PriceSheet, decision) -> float:
    """Primary cost, plus the conservative Guardian estimate when deferred."""
    return pico_to_dollars(routed_cost_pico(tokens, prices, decision))


def per_thousand(costs_pico: Iterable[int]) -> float:
    """Average cost per 1000 instances in dollars, from exact integer costs."""
    costs = list(costs_pico)
    if not costs:
        return 0.0
    return float(Decimal(sum(costs) * 1000) / Decimal(len(costs)) / PICO_PER_DOLLAR)
