import itertools
import time
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tsrnnt.errors import ConfigError, ContractError, DegenerateInputError
from tsrnnt.evaluation import (
    DEFAULT_GRID,
    EvalReport,
    align_counts,
    decode_samples,
    edit_count_table,
    sir_sweep,
    wer,
)
from tsrnnt.model import TSRNNT, ModelConfig
from tsrnnt.toy import ToyConfig, ToyWorld


def levenshtein(a, b):
    """Plain memoised recursion, independent of the vectorised implementation."""
    a, b = tuple(a), tuple(b)

    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))


def all_sequences(max_len, alphabet=(1, 2, 3)):
    for n in range(max_len + 1):
        yield from itertools.product(alphabet, repeat=n)


def test_examples():
    assert wer([[1, 2, 3]], [[1, 2, 3]])[0] == 0.0
    rate, c = wer([[1, 2, 3]], [[1, 3]])
    assert rate == pytest.approx(1 / 3) and (c.substitutions, c.insertions, c.deletions) == (0, 0, 1)
    rate, c = wer([[1]], [[2, 3]])
    assert rate == 2.0 and c.substitutions == 1 and c.insertions == 1
    rate, c = wer([[1, 2], [3]], [[], [3]])
    assert rate == pytest.approx(2 / 3) and c.deletions == 2


def test_error_cases():
    with pytest.raises(DegenerateInputError):
        wer([[]], [[1]])
    with pytest.raises(ContractError):
        wer([[1]], [])


def exhaustive_distances(seqs):
    """Edit distance for every pair, filled from shorter pairs upward.

    Prefixes of a sequence in ``seqs`` are again in ``seqs``, so the table is
    closed under the recursion and each entry costs O(1).
    """
    d = {}
    for a in seqs:
        for b in seqs:
            if not a or not b:
                d[a, b] = len(a) + len(b)
            else:
                d[a, b] = min(d[a[:-1], b] + 1, d[a, b[:-1]] + 1, d[a[:-1], b[:-1]] + (a[-1] != b[-1]))
    return d


def test_exhaustive_agreement_with_oracle():
    seqs = list(all_sequences(6))  # sorted by length, so prefixes come first
    refs = [r for r in seqs for _ in seqs]
    hyps = [h for _ in seqs for h in seqs]
    start = time.perf_counter()
    table = edit_count_table(refs, hyps)
    elapsed = time.perf_counter() - start
    oracle = exhaustive_distances(seqs)
    expected = np.array([oracle[r, h] for r, h in zip(refs, hyps)])
    S, I, D, M, N = table.T
    assert np.array_equal(S + I + D, expected)
    assert np.array_equal(S + D + M, N)
    assert np.array_equal(S + I + M, [len(h) for h in hyps])
    assert elapsed < 10.0
    # spot-check the recursive oracle against the table-filled one
    for r, h in itertools.islice(zip(refs, hyps), 0, len(refs), 997):
        assert levenshtein(r, h) == oracle[r, h]


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(1, 3), max_size=6), st.lists(st.integers(1, 3), max_size=6))
def test_random_pairs_match_oracle(r, h):
    (c,) = align_counts([r], [h])
    assert c.edits == levenshtein(r, h)
    assert min(c.substitutions, c.insertions, c.deletions, c.matches) >= 0


def test_report_grid_and_render():
    world = ToyWorld(ToyConfig())

    def cheat(samples):
        return [world.cheat_decode(s.clean_command, s.target_speaker) for s in samples]

    rep = sir_sweep({"oracle": cheat}, ToyConfig(), seed=1, samples_per_cell=5)
    rep.check_complete()
    assert rep.grid == list(DEFAULT_GRID) and len(rep.cells) == 22
    assert all(c.wer == 0.0 for c in rep.cells.values())
    text = rep.render()
    assert "oracle" in text and "overlapping" in text and "clean" in text
    with pytest.raises(ConfigError):
        sir_sweep({}, ToyConfig())
    partial = EvalReport({k: v for k, v in list(rep.cells.items())[:-1]})
    with pytest.raises(ContractError):
        partial.check_complete()


def test_identical_seeds_identical_reports(tmp_path):
    cfg = ToyConfig(n_speakers=3, feat_dim=8, vocab_tokens=5)
    m = TSRNNT(ModelConfig(variant="robust", feat_dim=8, d_model=8, attention_heads=2, encoder_heads=2,
                           vocab_size=cfg.vocab_size), seed=0)
    a = sir_sweep({"robust": m}, cfg, seed=3, grid=(5.0, -5.0), samples_per_cell=4)
    b = sir_sweep({"robust": m}, cfg, seed=3, grid=(5.0, -5.0), samples_per_cell=4)
    assert a.to_jsonl() == b.to_jsonl()
    a.write(tmp_path / "t.txt")
    assert (tmp_path / "t.jsonl").read_text() == a.to_jsonl()


def test_batched_decode_matches_single():
    cfg = ToyConfig(n_speakers=3, feat_dim=8, vocab_tokens=5)
    m = TSRNNT(ModelConfig(variant="attentive", feat_dim=8, d_model=8, attention_heads=2, encoder_heads=2,
                           vocab_size=cfg.vocab_size), seed=2)
    from tsrnnt.toy import generate_toy_corpus

    samples = generate_toy_corpus(cfg, 0, 12)
    assert decode_samples(m, samples) == [decode_samples(m, [s])[0] for s in samples]
