import math

import numpy as np
import pytest

from tsrnnt import tensor as tt
from tsrnnt.errors import ContractError, NumericError
from tsrnnt.transducer import (
    GreedyDecoder,
    Lattice,
    count_alignments,
    greedy_decode_stream,
    iter_greedy_events,
    rnnt_loss,
    rnnt_loss_bruteforce,
)


def random_lattice(rng, T, U, V):
    logits = rng.standard_normal((T, U + 1, V)) * 2.0
    lp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    return Lattice(lp, rng.integers(1, V, size=U))


def test_single_mandatory_blank():
    lp = np.log(np.array([[[0.3, 0.7]]]))
    loss = rnnt_loss(Lattice(lp, np.zeros(0, dtype=int)))
    assert float(loss.data) == pytest.approx(-math.log(0.3), abs=1e-15)


def test_two_frames_one_label_uniform():
    lat = Lattice(np.full((2, 2, 2), math.log(0.5)), [1])
    assert float(rnnt_loss(lat).data) == pytest.approx(2 * math.log(2), abs=1e-14)
    assert rnnt_loss_bruteforce(lat) == pytest.approx(2 * math.log(2), abs=1e-14)


@pytest.mark.parametrize("T,U,expected", [(1, 0, 1), (2, 1, 2), (3, 2, 6), (6, 4, 126)])
def test_alignment_count(T, U, expected):
    assert count_alignments(T, U) == expected


def test_bruteforce_rejects_large_instances():
    with pytest.raises(ContractError):
        rnnt_loss_bruteforce(random_lattice(np.random.default_rng(0), 7, 1, 3))


def test_loss_matches_bruteforce_on_larger_grid():
    rng = np.random.default_rng(11)
    for T in range(1, 7):
        for U in range(0, 5):
            lat = random_lattice(rng, T, U, 3)
            assert abs(float(rnnt_loss(lat).data) - rnnt_loss_bruteforce(lat)) <= 1e-10


def test_batched_loss_equals_per_item():
    rng = np.random.default_rng(5)
    lats = [random_lattice(rng, 3, 2, 4) for _ in range(4)]
    batch = Lattice(np.stack([l.log_probs.data for l in lats]), np.stack([l.targets for l in lats]))
    per = rnnt_loss(batch, reduction="none").data
    np.testing.assert_allclose(per, [float(rnnt_loss(l).data) for l in lats], atol=1e-12)
    assert float(rnnt_loss(batch, reduction="mean").data) == pytest.approx(per.mean())


def test_loss_gradient():
    rng = np.random.default_rng(2)
    lat = random_lattice(rng, 4, 3, 4)
    lp = tt.parameter(lat.log_probs.data)
    err = tt.grad_check(lambda: rnnt_loss(Lattice(lp, lat.targets, check=False)), [lp], 1e-5)
    assert err <= 1e-6


def test_loss_nonnegative_and_zero_when_deterministic():
    rng = np.random.default_rng(4)
    for _ in range(50):
        assert float(rnnt_loss(random_lattice(rng, 3, 2, 3)).data) >= 0.0
    # one valid alignment: emit y1 at (0,0), then blanks; everything else impossible
    T, U, V = 2, 1, 3
    lp = np.full((T, U + 1, V), -np.inf)
    lp[0, 0, 2] = 0.0
    lp[0, 1, 0] = 0.0
    lp[1, 1, 0] = 0.0
    lp[1, 0, 0] = 0.0
    assert float(rnnt_loss(Lattice(lp, [2], check=False)).data) == pytest.approx(0.0, abs=1e-15)


def test_lattice_validation():
    with pytest.raises(NumericError):
        Lattice(np.full((1, 1, 2), np.nan), np.zeros(0, dtype=int))
    with pytest.raises(ContractError):
        Lattice(np.zeros((1, 1, 2)), np.zeros(0, dtype=int))  # not normalised
    with pytest.raises(ContractError):
        Lattice(np.full((2, 2, 2), math.log(0.5)), [1, 1])  # U mismatch


class TableScorer:
    """Joint whose argmax depends only on (frame, number of emitted tokens)."""

    blank_id = 0

    def __init__(self, table, V=5):
        self.table, self.V = table, V

    def prediction_start(self):
        return np.array([0.0]), 0

    def prediction_step(self, state, token):
        return np.array([float(state + 1)]), state + 1

    def joint_logits(self, z_t, g_u):
        out = np.zeros(self.V)
        out[self.table.get((int(z_t[0]), int(g_u[0])), 0)] = 1.0
        return out


def test_always_blank_gives_empty_hypothesis():
    hyp = greedy_decode_stream(np.arange(5.0)[:, None], TableScorer({}))
    assert hyp.tokens == [] and hyp.frames == []


def test_hand_traced_two_frames():
    # frame 0: token 3, then blank; frame 1: blank
    hyp = greedy_decode_stream(np.array([[0.0], [1.0]]), TableScorer({(0, 0): 3}))
    assert hyp.tokens == [3] and hyp.frames == [0]


def test_symbol_cap_per_frame():
    scorer = TableScorer({(0, u): 2 for u in range(10)})
    hyp = greedy_decode_stream(np.array([[0.0], [1.0]]), scorer, max_symbols_per_frame=3)
    assert hyp.tokens == [2, 2, 2]
    with pytest.raises(ContractError):
        GreedyDecoder(scorer, 0)


def test_ties_break_to_lowest_id():
    class Flat(TableScorer):
        def joint_logits(self, z_t, g_u):
            out = np.zeros(self.V)
            out[[2, 4]] = 1.0 if g_u[0] == 0 else -1.0
            return out

    assert greedy_decode_stream(np.zeros((1, 1)), Flat({})).tokens == [2]


def test_incremental_events_match_batch():
    rng = np.random.default_rng(0)
    table = {(t, u): int(rng.integers(0, 5)) for t in range(8) for u in range(12)}
    frames = np.arange(8.0)[:, None]
    batch = greedy_decode_stream(frames, TableScorer(table))
    events = list(iter_greedy_events(iter(frames), TableScorer(table)))
    assert events == batch.events()
    assert all(a <= b for a, b in zip(batch.frames, batch.frames[1:]))
    assert 0 not in batch.tokens
