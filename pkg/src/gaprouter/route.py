"""Deployment-time routing between the Primary and the Guardian."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Literal

from .core import ScoredInstance, ScoreVector, argmax_lowest, as_scores, candidate_set, score_gap
from .errors import InvalidInput

Variant = Literal["restricted", "unrestricted"]
GuardianProvider = Callable[[ScoredInstance], "ScoreVector | list[float]"]

DEFER = "defer"


@dataclass(frozen=True)
class RoutingPolicy:
    lambda_hat: float
    variant: Variant = "restricted"

    def __post_init__(self):
        if not (math.isfinite(self.lambda_hat) and self.lambda_hat >= 0):
            raise InvalidInput(f"lambda_hat must be finite and >= 0, got {self.lambda_hat}")
        if self.variant not in ("restricted", "unrestricted"):
            raise InvalidInput(f"unknown routing variant {self.variant!r}")


@dataclass(frozen=True)
class RoutingDecision:
    """Outcome of routing one instance.

    ``menu_size`` is the number of actions shown to the Guardian (the
    candidate count for the restricted variant, every action otherwise);
    it is 0 when the Primary acts alone.
    """

    chosen_index: int
    actor: Literal["primary", "guardian"]
    candidate_count: int
    deferred: bool
    menu_size: int
    action_count: int

    def to_dict(self) -> dict:
        return {
            "chosen_index": self.chosen_index,
            "actor": self.actor,
            "candidate_count": self.candidate_count,
            "deferred": self.deferred,
            "menu_size": self.menu_size,
        }


def decide(
    instance: ScoredInstance,
    policy: RoutingPolicy,
    guardian: GuardianProvider | None = None,
) -> RoutingDecision:
    """Route one instance with a calibrated threshold.

    Guardian scores are taken from the instance, or requested from
    ``guardian`` only when the instance is actually deferred.
    """
    k = instance.n_actions
    cs = candidate_set(instance.primary_scores, policy.lambda_hat)
    if len(cs) == 1:
        return RoutingDecision(cs.indices[0], "primary", 1, False, 0, k)

    g = instance.guardian_scores
    if g is None:
        if guardian is None:
            raise InvalidInput(f"{instance.id}: deferred but no Guardian scores or provider")
        g = as_scores(guardian(instance))
        if len(g) != k:
            raise InvalidInput(f"{instance.id}: provider returned {len(g)} scores for {k} actions")
    if policy.variant == "restricted":
        menu = cs.indices
    else:
        menu = tuple(range(k))
    best = menu[argmax_lowest(g[i] for i in menu)]
    return RoutingDecision(best, "guardian", len(cs), True, len(menu), k)


def gap_route(instance: ScoredInstance, lam: float) -> int | str:
    """Act with the Primary's top action when its score gap is at least ``lam``.

    Returns the action index, or ``DEFER``.
    """
    if not lam >= 0:
        raise InvalidInput(f"lambda must be >= 0, got {lam}")
    p = instance.primary_scores
    if score_gap(p) >= lam:
        return argmax_lowest(p.values)
    return DEFER


def primary_choice(instance: ScoredInstance) -> int:
    return argmax_lowest(instance.primary_scores.values)


def guardian_choice(instance: ScoredInstance) -> int:
    return argmax_lowest(instance.require_guardian().values)
