"""Where scores come from: logged record files, a remote scorer, tie fixes.

Record files hold one JSON object per line::

    {"id": "q1", "actions": ["A", "B"], "primary_scores": [0.7, 0.3],
     "guardian_scores": [0.1, 0.9], "labels": {"correct_index": 1},
     "tokens": {"primary_in": 120, "primary_out": 9, "guardian_in": 120,
                "guardian_out": 11, "full_in": 120}, "meta": {"subject": "law"}}

``guardian_scores``, ``labels``, ``tokens`` and ``meta`` are optional.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

import httpx
import numpy as np

from .core import Labels, ScoredInstance, ScoreVector, normalize_scores
from .costmodel import TokenCounts
from .errors import InvalidInput, ScorerUnavailable

log = logging.getLogger(__name__)

TIE_STEP = 0.01


class RecordError(InvalidInput):
    def __init__(self, lineno: int, field: str, message: str):
        self.lineno = lineno
        self.field = field
        super().__init__(f"line {lineno}: field '{field}': {message}")


def _real_list(obj: dict, key: str, lineno: int) -> list[float]:
    value = obj[key]
    if not isinstance(value, list) or not value:
        raise RecordError(lineno, key, "expected a non-empty list of numbers")
    out = []
    for v in value:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise RecordError(lineno, key, f"non-numeric or non-finite entry {v!r}")
        out.append(float(v))
    return out


def _int_field(obj: dict, key: str, lineno: int, where: str) -> int:
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise RecordError(lineno, f"{where}.{key}", f"expected an integer, got {v!r}")
    return v


def record_to_instance(obj: Any, lineno: int = 0) -> ScoredInstance:
    """Validate one decoded record and build the instance."""
    if not isinstance(obj, dict):
        raise RecordError(lineno, "<record>", "expected a JSON object")
    for key in ("id", "actions", "primary_scores"):
        if key not in obj:
            raise RecordError(lineno, key, "missing")
    actions = obj["actions"]
    if not isinstance(actions, list) or not actions:
        raise RecordError(lineno, "actions", "expected a non-empty list")
    k = len(actions)
    primary = _real_list(obj, "primary_scores", lineno)
    if len(primary) != k:
        raise RecordError(lineno, "primary_scores", f"{len(primary)} scores for {k} actions")
    guardian = None
    if obj.get("guardian_scores") is not None:
        guardian = _real_list(obj, "guardian_scores", lineno)
        if len(guardian) != k:
            raise RecordError(lineno, "guardian_scores", f"{len(guardian)} scores for {k} actions")

    labels = Labels()
    raw_labels = obj.get("labels") or {}
    if not isinstance(raw_labels, dict):
        raise RecordError(lineno, "labels", "expected an object")
    correct = helpful = sev = None
    if raw_labels.get("correct_index") is not None:
        correct = _int_field(raw_labels, "correct_index", lineno, "labels")
        if not 0 <= correct < k:
            raise RecordError(lineno, "labels.correct_index", f"{correct} out of range")
    if raw_labels.get("helpful_index") is not None:
        helpful = _int_field(raw_labels, "helpful_index", lineno, "labels")
        if not 0 <= helpful < k:
            raise RecordError(lineno, "labels.helpful_index", f"{helpful} out of range")
    if raw_labels.get("severities") is not None:
        sev = raw_labels["severities"]
        if not isinstance(sev, list) or len(sev) != k:
            raise RecordError(lineno, "labels.severities", f"expected {k} integers")
        if any(isinstance(s, bool) or s not in (0, 1, 2, 3) for s in sev):
            raise RecordError(lineno, "labels.severities", "entries must lie in {0,1,2,3}")
        sev = tuple(int(s) for s in sev)
    labels = Labels(correct, sev, helpful)

    tokens = None
    raw_tokens = obj.get("tokens")
    if raw_tokens is not None:
        if not isinstance(raw_tokens, dict):
            raise RecordError(lineno, "tokens", "expected an object")
        counts = {}
        for key in ("primary_in", "primary_out", "guardian_in", "guardian_out", "full_in"):
            if key in raw_tokens:
                counts[key] = _int_field(raw_tokens, key, lineno, "tokens")
                if counts[key] < 0:
                    raise RecordError(lineno, f"tokens.{key}", "must be non-negative")
        unknown = set(raw_tokens) - set(counts)
        if unknown:
            raise RecordError(lineno, "tokens", f"unknown keys {sorted(unknown)}")
        tokens = TokenCounts(**counts)

    meta = obj.get("meta") or {}
    if not isinstance(meta, dict):
        raise RecordError(lineno, "meta", "expected an object")

    return ScoredInstance(
        id=str(obj["id"]),
        actions=tuple(str(a) for a in actions),
        primary_scores=ScoreVector(tuple(primary)),
        guardian_scores=None if guardian is None else ScoreVector(tuple(guardian)),
        labels=labels,
        tokens=tokens,
        meta=meta,
    )


def instance_to_record(inst: ScoredInstance) -> dict:
    rec: dict[str, Any] = {
        "id": inst.id,
        "actions": list(inst.actions),
        "primary_scores": list(inst.primary_scores.values),
    }
    if inst.guardian_scores is not None:
        rec["guardian_scores"] = list(inst.guardian_scores.values)
    labels = inst.labels.to_dict()
    if labels:
        rec["labels"] = labels
    if inst.tokens is not None:
        rec["tokens"] = inst.tokens.to_dict()
    if inst.meta:
        rec["meta"] = dict(inst.meta)
    return rec


def load_records(path: str | os.PathLike) -> list[ScoredInstance]:
    """Read a record file in order. Blank lines are skipped."""
    p = Path(path)
    if not p.is_file():
        raise InvalidInput(f"record file not found: {p}")
    out = []
    with p.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordError(lineno, "<line>", f"invalid JSON ({exc.msg})") from None
            try:
                out.append(record_to_instance(obj, lineno))
            except RecordError:
                raise
            except InvalidInput as exc:
                raise RecordError(lineno, "<record>", str(exc)) from None
    if not out:
        log.warning("record file %s contains no instances", p)
    return out


def save_records(instances: Iterable[ScoredInstance], path: str | os.PathLike) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(instance_to_record(inst), sort_keys=True) + "\n")


@dataclass(frozen=True)
class ScorerEndpoint:
    """A remote scorer accepting ``{"context", "actions"}`` and returning ``{"scores"}``."""

    url: str
    timeout_ms: int = 10_000
    retries: int = 2
    backoff_s: float = 0.0

    def __post_init__(self):
        if self.timeout_ms <= 0:
            raise InvalidInput("scorer timeout must be positive")
        if self.retries < 0:
            raise InvalidInput("retry count must be non-negative")


def uniform(k: int) -> ScoreVector:
    return ScoreVector(tuple(1.0 / k for _ in range(k)), normalized=True)


def parse_scores(payload: Any, k: int) -> ScoreVector:
    """Normalized scores from a scorer reply; any defect gives the uniform vector."""
    try:
        if isinstance(payload, (bytes, str)):
            payload = json.loads(payload)
        scores = payload["scores"]
        if not isinstance(scores, list) or len(scores) != k:
            raise ValueError("length mismatch")
        if any(isinstance(s, bool) or not isinstance(s, (int, float)) for s in scores):
            raise ValueError("non-numeric score")
        return normalize_scores(scores)
    except (ValueError, KeyError, TypeError, InvalidInput) as exc:
        log.info("unusable scorer reply (%s); falling back to uniform", exc)
        return uniform(k)


def fetch_scores(
    endpoint: ScorerEndpoint,
    context: str,
    actions: Sequence[str],
    client: httpx.Client | None = None,
) -> ScoreVector:
    """POST one context to a remote scorer and return normalized scores.

    Content problems (bad JSON, wrong length, negative values) degrade to
    uniform scores so calibration and test data stay exchangeable. Only
    transport failures that persist through every retry raise.
    """
    k = len(actions)
    if k < 1:
        raise InvalidInput("at least one action required")
    body = {"context": context, "actions": list(actions)}
    own = client is None
    if own:
        client = httpx.Client(timeout=endpoint.timeout_ms / 1000)
    try:
        last_exc: Exception | None = None
        for attempt in range(endpoint.retries + 1):
            try:
                resp = client.post(endpoint.url, json=body, timeout=endpoint.timeout_ms / 1000)
                if resp.status_code >= 500:
                    raise httpx.HTTPStatusError(
                        f"server error {resp.status_code}", request=resp.request, response=resp
                    )
            except httpx.HTTPError as exc:
                last_exc = exc
                if attempt < endpoint.retries and endpoint.backoff_s:
                    time.sleep(endpoint.backoff_s * 2**attempt)
                continue
            if resp.status_code >= 400:
                log.info("scorer returned %s; falling back to uniform", resp.status_code)
                return uniform(k)
            return parse_scores(resp.content, k)
        raise ScorerUnavailable(
            f"scorer at {endpoint.url} failed after {endpoint.retries + 1} attempts: {last_exc}"
        )
    finally:
        if own:
            client.close()


def remote_guardian(endpoint: ScorerEndpoint, client: httpx.Client | None = None):
    """A Guardian provider for ``route.decide`` backed by a remote scorer.

    The instance id doubles as the context string.
    """

    def provide(instance: ScoredInstance) -> ScoreVector:
        return fetch_scores(endpoint, instance.id, instance.actions, client)

    return provide


def perturb_ties(scores: ScoreVector | Sequence[float], rng: np.random.Generator) -> ScoreVector:
    """Separate exactly equal scores by +/-0.01 until all entries differ.

    Within each group of equal entries one member is held fixed (one that
    was never tied, if present, else the highest index) and the others are
    nudged, alternating signs from a random first sign. Groups of more than
    three may need several passes.
    """
    vals = [float(v) for v in scores]
    counts: dict[float, int] = {}
    for v in vals:
        counts[v] = counts.get(v, 0) + 1
    never_tied = [counts[v] == 1 for v in vals]
    while True:
        groups: dict[float, list[int]] = {}
        for i, v in enumerate(vals):
            groups.setdefault(v, []).append(i)
        tied = [idx for idx in groups.values() if len(idx) > 1]
        if not tied:
            break
        for idx in sorted(tied):
            keep = next((i for i in idx if never_tied[i]), idx[-1])
            sign = 1.0 if rng.random() < 0.5 else -1.0
            for i in idx:
                if i == keep:
                    continue
                vals[i] = vals[i] + sign * TIE_STEP
                sign = -sign
    return ScoreVector(tuple(vals))
