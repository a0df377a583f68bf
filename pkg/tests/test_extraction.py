import numpy as np
import pytest
from hypothesis import given, strategies as st

from poiaudit.extraction import (Beam, CountingModel, LocExtractConfig, TrajExtractConfig, draw_query_locations,
                                 loc_extract, rank_candidates, top_k_ids, traj_extract, user_rng)
from poiaudit.model.network import ModelConfig, PoiModel
from reference import exhaustive_ranking, reference_logits

TINY = ModelConfig(user_embed_dim=4, loc_embed_dim=4, hidden_dim=6, seed=11)


def _soft_oracle(model, user, cfg, locs):
    """Average each query's logits (or probabilities) one query at a time."""
    rows = []
    for l in locs:
        z = reference_logits(model, user, [int(l)], [cfg.query_timestamp])
        if cfg.aggregate == "probs":
            z = np.exp(z - z.max())
            z = z / z.sum()
        rows.append(z)
    mean = np.mean(rows, axis=0)
    return sorted(range(len(mean)), key=lambda i: (-mean[i], i))[:cfg.top_k]


@pytest.mark.parametrize("aggregate", ["logits", "probs"])
def test_soft_voting_matches_per_query_oracle(aggregate):
    m = PoiModel(5, 12, TINY)
    cfg = LocExtractConfig(query_budget=8, top_k=3, aggregate=aggregate, seed=2)
    for u in range(5):
        locs = draw_query_locations(12, 8, user_rng(2, u))
        assert loc_extract(m, u, cfg) == _soft_oracle(m, u, cfg, locs)


def test_hard_voting_counts_argmax_winners():
    m = PoiModel(3, 9, TINY)
    locs = np.array([0, 1, 2, 3, 4, 5])
    cfg = LocExtractConfig(query_budget=6, top_k=2, voting="hard")
    winners = [int(np.argmax(reference_logits(m, 1, [l], [0.5]))) for l in locs]
    counts = np.bincount(winners, minlength=9)
    want = sorted(range(9), key=lambda i: (-counts[i], i))[:2]
    assert loc_extract(m, 1, cfg, query_locations=locs) == want


def test_locextract_issues_exactly_q_queries():
    m = CountingModel(PoiModel(3, 20, TINY))
    loc_extract(m, 0, LocExtractConfig(query_budget=17))
    assert m.queries == 17


def test_query_locations_without_replacement_up_to_vocabulary():
    rng = np.random.default_rng(0)
    q = draw_query_locations(30, 30, rng)
    assert sorted(q.tolist()) == list(range(30))
    assert len(draw_query_locations(5, 12, rng)) == 12


def test_top_k_ties_go_to_lower_index():
    assert top_k_ids(np.array([1.0, 3.0, 3.0, 0.0, 3.0]), 2) == [1, 2]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_full_width_beam_equals_exhaustive_enumeration(seed):
    m = PoiModel(2, 6, ModelConfig(user_embed_dim=3, loc_embed_dim=3, hidden_dim=5, seed=seed))
    got = traj_extract(m, 1, 4, TrajExtractConfig(beam_width=36, target_length=3, query_timestamp=0.3))
    want = exhaustive_ranking(m, 1, 4, 3, 0.3)
    assert [s for s, _ in got] == [s for _, s in want]
    np.testing.assert_allclose([p for _, p in got], [p for p, _ in want], rtol=1e-10)


def test_beam_ties_are_lexicographic():
    m = PoiModel(2, 6, ModelConfig(user_embed_dim=3, loc_embed_dim=3, hidden_dim=5, zero_output_init=True))
    got = traj_extract(m, 0, 2, TrajExtractConfig(beam_width=36, target_length=3))
    assert [s for s, _ in got] == [(2, a, b) for a in range(6) for b in range(6)]


def test_beam_keeps_width_and_query_count():
    m = CountingModel(PoiModel(2, 60, TINY))
    out = traj_extract(m, 0, 1, TrajExtractConfig(beam_width=50, target_length=4))
    assert len(out) == 50
    assert m.queries == 1 + 50 * (4 - 2)
    ppl = [p for _, p in out]
    assert ppl == sorted(ppl)


def test_top_beta_out_truncates():
    m = PoiModel(2, 10, TINY)
    out = traj_extract(m, 0, 1, TrajExtractConfig(beam_width=8, target_length=3, top_beta_out=3))
    assert len(out) == 3


def test_argument_validation():
    with pytest.raises(ValueError):
        LocExtractConfig(query_budget=0)
    with pytest.raises(ValueError):
        LocExtractConfig(query_timestamp=1.5)
    with pytest.raises(ValueError):
        TrajExtractConfig(target_length=1)
    with pytest.raises(ValueError):
        TrajExtractConfig(beam_width=4, top_beta_out=5)
    m = PoiModel(2, 10, TINY)
    with pytest.raises(IndexError):
        traj_extract(m, 0, 10)
    with pytest.raises(ValueError):
        Beam(np.zeros((3, 1), dtype=np.int64), np.zeros(3), 2)


@given(st.lists(st.tuples(st.floats(0, 5), st.lists(st.integers(0, 3), min_size=2, max_size=2)),
                min_size=1, max_size=20))
def test_rank_candidates_is_a_ppl_then_lexicographic_sort(cands):
    ppl = np.array([c[0] for c in cands])
    seqs = np.array([c[1] for c in cands])
    order = rank_candidates(seqs, ppl)
    keyed = sorted(range(len(cands)), key=lambda i: (ppl[i], tuple(seqs[i]), i))
    assert [(ppl[i], tuple(seqs[i])) for i in order] == [(ppl[i], tuple(seqs[i])) for i in keyed]
