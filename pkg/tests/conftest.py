from __future__ import annotations

import numpy as np
import pytest

from nstr.corpus import Passage, Query, build_vocab, tokenize_collection
from nstr.model import EncoderParams


def write_lines(path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


@pytest.fixture
def tiny_passages():
    texts = [
        "the capital of france is paris",
        "berlin is the capital of germany",
        "rome is an old city in italy",
        "the river seine flows through paris",
        "madrid hosts the prado museum",
    ]
    return {i: Passage(i, t) for i, t in enumerate(texts)}


@pytest.fixture
def tiny_queries():
    return {
        10: Query(10, "capital of france", ("paris",)),
        11: Query(11, "capital of germany", ("berlin",)),
        12: Query(12, "museum in madrid", ("prado",)),
    }


@pytest.fixture
def tiny_qrels():
    return {10: {0: 1}, 11: {1: 1}, 12: {4: 1}}


@pytest.fixture
def tiny_vocab(tiny_passages, tiny_queries):
    return build_vocab(tiny_passages, tiny_queries)


@pytest.fixture
def tiny_tokens(tiny_passages, tiny_vocab):
    return tokenize_collection(tiny_passages, tiny_vocab, 128)


def random_params(rng, vocab_size, d, positional_scale=0.0, dtype=np.float64):
    emb = rng.normal(size=(vocab_size, d)).astype(dtype)
    emb[0] = 0.0
    return EncoderParams(emb, positional_scale)


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion that ran."""
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, ok = results[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {title}")
