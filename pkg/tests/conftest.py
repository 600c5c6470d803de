from __future__ import annotations

import random

import pytest

from blendsched.cost_model import HardwareConfig, ModelConfig, load_hardware_config, load_model_config
from blendsched.prefix_tree import Request


@pytest.fixture(scope="session")
def mc() -> ModelConfig:
    return load_model_config()


@pytest.fixture(scope="session")
def hc() -> HardwareConfig:
    return load_hardware_config()


def random_requests(rng: random.Random, n: int, vocab: int = 4, max_len: int = 12,
                    max_out: int = 40, known_frac: float = 0.0) -> list[Request]:
    """Small-alphabet prompts so that random requests share prefixes often."""
    out = []
    for i in range(n):
        p = tuple(rng.randrange(vocab) for _ in range(rng.randint(1, max_len)))
        out.append(Request(i, p, rng.randint(0, max_out), known_output=rng.random() < known_frac))
    return out


def grouped_requests(groups: int, per_group: int, shared: int, tail: int, out_lens,
                     start_id: int = 0, base_token: int = 1000) -> list[Request]:
    """``groups`` disjoint shared prefixes of ``shared`` tokens, each with unique tails."""
    reqs = []
    rid = start_id
    for g in range(groups):
        prefix = tuple(base_token + g * 100_000 + k for k in range(shared))
        for j in range(per_group):
            tail_toks = tuple(base_token + g * 100_000 + 50_000 + j * tail + k for k in range(tail))
            d = out_lens(g, j) if callable(out_lens) else out_lens
            reqs.append(Request(rid, prefix + tail_toks, d))
            rid += 1
    return reqs


# acceptance criteria register one line each; they are echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
