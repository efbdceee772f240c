import sys
import numpy as np
import pytest

from gaprouter.core import Labels, ScoredInstance
from gaprouter.costmodel import TokenCounts


def inst(p, g=None, id="x", correct=None, severities=None, helpful=None, tokens=None, meta=None):
    return ScoredInstance(
        id=id,
        actions=tuple(f"a{i}" for i in range(len(p))),
        primary_scores=tuple(p),
        guardian_scores=None if g is None else tuple(g),
        labels=Labels(correct, None if severities is None else tuple(severities), helpful),
        tokens=tokens,
        meta=meta or {},
    )


def step_instance(d, id="s"):
    """Two actions whose residual loss is 1{lam < d}."""
    return inst([1.0, 1.0 - d], [0.0, 1.0], id=id)


def random_instance(rng, k=None, id="r"):
    k = k or int(rng.integers(1, 6))
    p = rng.random(k)
    if k > 1 and rng.random() < 0.2:
        p[1] = p[0]  # exact ties exercise the membership guard
    return inst(np.round(p, 3), rng.random(k), id=id)


@pytest.fixture
def step_fixture():
    return [step_instance(d, f"s{i}") for i, d in enumerate([0.2, 0.4, 0.6, 0.8])]


@pytest.fixture
def tokens():
    return TokenCounts(primary_in=100, primary_out=50, guardian_in=100, guardian_out=50, full_in=100)


PRICES_4_1 = dict(primary_in="1e-7", primary_out="4e-7", guardian_in="2e-6", guardian_out="8e-6")


def multiple_choice_dataset(rng, size, k=4, primary_skill=1.2, guardian_skill=2.6, subjects=None):
    """Synthetic replay log: a weak Primary, a strong Guardian, token counts."""
    out = []
    for i in range(size):
        c = int(rng.integers(k))
        bump = np.zeros(k)
        bump[c] = 1.0
        p = np.exp(rng.normal(size=k) + primary_skill * bump)
        g = np.exp(rng.normal(size=k) + guardian_skill * bump)
        prompt = int(rng.integers(120, 200))
        tok = TokenCounts(prompt, int(rng.integers(15, 25)), prompt, int(rng.integers(15, 25)), prompt)
        meta = {"subject": f"sub{i % subjects}"} if subjects else None
        out.append(inst((p / p.sum()).tolist(), (g / g.sum()).tolist(), id=f"q{i}", correct=c,
                        tokens=tok, meta=meta))
    return out


@pytest.fixture
def mc_dataset():
    return multiple_choice_dataset(np.random.default_rng(7), 300)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
