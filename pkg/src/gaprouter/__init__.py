"""Calibrated score-gap routing between a Primary and a Guardian scorer."""

from .calibrate import CalibrationResult, LambdaGrid, empirical_risk, fit_lambda, risk_curve
from .core import (
    CandidateSet,
    Labels,
    RiskBudget,
    ScoredInstance,
    ScoreVector,
    binarize_guardian,
    candidate_set,
    normalize_scores,
    residual_loss,
    score_gap,
)
from .costmodel import PriceSheet, TokenCounts, hybrid_input_tokens, routed_cost, single_cost
from .errors import BudgetInfeasible, InvalidInput, ScorerUnavailable
from .route import DEFER, RoutingDecision, RoutingPolicy, decide, gap_route

__version__ = "0.1.0"

__all__ = [
    "BudgetInfeasible", "CalibrationResult", "CandidateSet", "DEFER", "InvalidInput", "Labels",
    "LambdaGrid", "PriceSheet", "RiskBudget", "RoutingDecision", "RoutingPolicy", "ScoreVector",
    "ScoredInstance", "ScorerUnavailable", "TokenCounts", "binarize_guardian", "candidate_set",
    "decide", "empirical_risk", "fit_lambda", "gap_route", "hybrid_input_tokens", "normalize_scores",
    "residual_loss", "risk_curve", "routed_cost", "score_gap", "single_cost",
]
