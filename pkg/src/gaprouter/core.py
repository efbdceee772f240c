"""Score, candidate-set and loss primitives.

Everything here is a pure function of immutable values. A Primary scorer
ranks actions; the lambda-relaxed candidate set keeps every action whose
Primary score is within lambda of the top one; the residual loss is how
much Guardian score is lost by restricting the Guardian to that set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .costmodel import TokenCounts
from .errors import InvalidInput

# Membership slack so that analytically tied scores survive float noise.
MEMBERSHIP_EPS = 1e-12
NORMALIZED_TOL = 1e-9


@dataclass(frozen=True)
class ScoreVector:
    """One real score per action. Entries are always finite."""

    values: tuple[float, ...]
    normalized: bool = False

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        if not vals:
            raise InvalidInput("score vector must have at least one entry")
        if not all(math.isfinite(v) for v in vals):
            raise InvalidInput(f"score vector has non-finite entries: {vals}")
        if self.normalized:
            if min(vals) < 0 or abs(math.fsum(vals) - 1.0) > NORMALIZED_TOL:
                raise InvalidInput("normalized score vector must be non-negative and sum to 1")

    def __len__(self) -> int:
        return len(self.values)

    def __iter__(self):
        return iter(self.values)

    def __getitem__(self, i):
        return self.values[i]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)


def as_scores(scores: ScoreVector | Sequence[float]) -> ScoreVector:
    return scores if isinstance(scores, ScoreVector) else ScoreVector(tuple(scores))


@dataclass(frozen=True)
class Labels:
    correct_index: int | None = None
    severities: tuple[int, ...] | None = None
    helpful_index: int | None = None

    def to_dict(self) -> dict:
        out = {}
        if self.correct_index is not None:
            out["correct_index"] = self.correct_index
        if self.severities is not None:
            out["severities"] = list(self.severities)
        if self.helpful_index is not None:
            out["helpful_index"] = self.helpful_index
        return out


@dataclass(frozen=True)
class ScoredInstance:
    """A context with its actions and both scorers' outputs.

    ``guardian_scores`` may be None when Guardian scores are fetched lazily
    at routing time. ``meta`` carries free-form string attributes such as a
    subject name used for stratified splits.
    """

    id: str
    actions: tuple[str, ...]
    primary_scores: ScoreVector
    guardian_scores: ScoreVector | None = None
    labels: Labels = field(default_factory=Labels)
    tokens: TokenCounts | None = None
    meta: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(str(a) for a in self.actions))
        object.__setattr__(self, "primary_scores", as_scores(self.primary_scores))
        if self.guardian_scores is not None:
            object.__setattr__(self, "guardian_scores", as_scores(self.guardian_scores))
        if isinstance(self.meta, dict):
            object.__setattr__(self, "meta", tuple(sorted((str(k), str(v)) for k, v in self.meta.items())))
        k = len(self.actions)
        if k < 1:
            raise InvalidInput(f"{self.id}: at least one action required")
        if len(self.primary_scores) != k:
            raise InvalidInput(f"{self.id}: primary_scores has {len(self.primary_scores)} entries for {k} actions")
        if self.guardian_scores is not None and len(self.guardian_scores) != k:
            raise InvalidInput(f"{self.id}: guardian_scores has {len(self.guardian_scores)} entries for {k} actions")
        lab = self.labels
        for name in ("correct_index", "helpful_index"):
            idx = getattr(lab, name)
            if idx is not None and not 0 <= idx < k:
                raise InvalidInput(f"{self.id}: labels.{name}={idx} out of range for {k} actions")
        if lab.severities is not None:
            if len(lab.severities) != k:
                raise InvalidInput(f"{self.id}: labels.severities has {len(lab.severities)} entries for {k} actions")
            if any(s not in (0, 1, 2, 3) for s in lab.severities):
                raise InvalidInput(f"{self.id}: severities must lie in {{0,1,2,3}}")

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    def meta_value(self, key: str) -> str | None:
        return dict(self.meta).get(key)

    def require_guardian(self) -> ScoreVector:
        if self.guardian_scores is None:
            raise InvalidInput(f"{self.id}: guardian_scores required")
        return self.guardian_scores


@dataclass(frozen=True)
class CandidateSet:
    indices: tuple[int, ...]
    lambda_used: float

    def __len__(self) -> int:
        return len(self.indices)

    def __contains__(self, i) -> bool:
        return i in self.indices


@dataclass(frozen=True)
class RiskBudget:
    """User risk budget ``alpha`` and the loss bound ``B``."""

    alpha: float
    loss_bound_b: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and self.alpha > 0):
            raise InvalidInput(f"alpha must be positive and finite, got {self.alpha}")
        if not (math.isfinite(self.loss_bound_b) and self.loss_bound_b > 0):
            raise InvalidInput(f"loss bound B must be positive and finite, got {self.loss_bound_b}")


def argmax_lowest(values: Iterable[float]) -> int:
    """Index of the maximum, ties broken to the lowest index."""
    best_i, best_v = -1, -math.inf
    for i, v in enumerate(values):
        if best_i < 0 or v > best_v:
            best_i, best_v = i, v
    if best_i < 0:
        raise InvalidInput("empty score vector")
    return best_i


def primary_gaps(primary_scores: ScoreVector | Sequence[float]) -> np.ndarray:
    """Distance of every action's Primary score below the top score."""
    p = as_scores(primary_scores).as_array()
    return p.max() - p


def _check_lambda(lam: float) -> float:
    lam = float(lam)
    if not (lam >= 0 and math.isfinite(lam)):
        raise InvalidInput(f"lambda must be finite and >= 0, got {lam}")
    return lam


def candidate_set(primary_scores: ScoreVector | Sequence[float], lam: float) -> CandidateSet:
    """All actions whose Primary score is at least ``max p - lam``."""
    lam = _check_lambda(lam)
    gaps = primary_gaps(primary_scores)
    idx = np.flatnonzero(gaps <= lam + MEMBERSHIP_EPS)
    return CandidateSet(tuple(int(i) for i in idx), lam)


def score_gap(primary_scores: ScoreVector | Sequence[float]) -> float:
    """Top Primary score minus the runner-up; ``inf`` for a single action."""
    p = as_scores(primary_scores).values
    if len(p) == 1:
        return math.inf
    top = argmax_lowest(p)
    return p[top] - max(v for i, v in enumerate(p) if i != top)


def residual_loss(instance: ScoredInstance, lam: float) -> float:
    """Guardian's best score overall minus its best inside the candidate set."""
    g = instance.require_guardian().values
    cs = candidate_set(instance.primary_scores, lam)
    return max(g) - max(g[i] for i in cs.indices)


def binarize_guardian(instance: ScoredInstance) -> ScoredInstance:
    """Replace Guardian scores by a 0/1 correctness vector.

    1 at the Guardian's top-ranked action when that action is the labelled
    correct one; otherwise every entry is 0.
    """
    correct = instance.labels.correct_index
    if correct is None:
        raise InvalidInput(f"{instance.id}: binarization needs labels.correct_index")
    top = argmax_lowest(instance.require_guardian().values)
    g = [0.0] * instance.n_actions
    if top == correct:
        g[top] = 1.0
    return replace(instance, guardian_scores=ScoreVector(tuple(g)))


def normalize_scores(raw: Sequence[float]) -> ScoreVector:
    """Scale non-negative scores to sum to one; all-zero input becomes uniform."""
    vals = [float(v) for v in raw]
    if not vals:
        raise InvalidInput("cannot normalize an empty score list")
    if any(not math.isfinite(v) or v < 0 for v in vals):
        raise InvalidInput(f"scores must be finite and non-negative: {vals}")
    total = math.fsum(vals)
    if total == 0:
        return ScoreVector(tuple(1.0 / len(vals) for _ in vals), normalized=True)
    out = [v / total for v in vals]
    # Division can leave the sum a few ulps off; never beyond the tolerance.
    return ScoreVector(tuple(out), normalized=True)
