import numpy as np
import pytest
from hypothesis import given, strategies as st

from poiaudit.data import TRAIN, VALID, Trajectory, synth_generate
from poiaudit.model import _backend
from poiaudit.model.network import LOG_FLOOR, ModelConfig, PoiModel, SequenceBatch
from poiaudit.model.training import (TrainConfig, TrainingError, evaluate_topk, prefix_examples, target_ranks,
                                     train)
from reference import central_difference, reference_log_probs, reference_logits, relative_error

SMALL = ModelConfig(user_embed_dim=5, loc_embed_dim=6, hidden_dim=7, seed=3)


def _traj(user, locs, times=None, split=TRAIN):
    times = times or [i / (len(locs) + 1) for i in range(len(locs))]
    return Trajectory(user, tuple(locs), tuple(times), split)


def _toy_trajs():
    return [_traj(0, [1, 2, 3]), _traj(1, [4, 0]), _traj(2, [5, 6, 7, 8, 9]), _traj(0, [9, 9, 1, 2])]


def test_query_matches_stepwise_reference():
    m = PoiModel(4, 10, SMALL)
    rng = np.random.default_rng(0)
    for _ in range(10):
        n = int(rng.integers(1, 6))
        locs = rng.integers(0, 10, n).tolist()
        times = rng.random(n).tolist()
        u = int(rng.integers(4))
        np.testing.assert_allclose(m.query([u], [locs], [times])[0], reference_logits(m, u, locs, times),
                                   rtol=1e-12, atol=1e-12)


def test_padded_batch_equals_individual_queries():
    m = PoiModel(4, 10, ModelConfig(hidden_dim=6, seed=1, time_encoding="sinusoidal-2"))
    seqs = [[1], [2, 3, 4], [5, 6]]
    times = [[0.1], [0.2, 0.3, 0.4], [0.5, 0.6]]
    batch = m.query([0, 1, 2], seqs, times)
    for b in range(3):
        np.testing.assert_allclose(batch[b], m.query([b], [seqs[b]], [times[b]])[0], rtol=1e-13, atol=1e-13)


def test_step_log_probs_match_reference_and_floor():
    m = PoiModel(3, 10, SMALL)
    locs, times = [3, 1, 4, 1], [0.1, 0.2, 0.3, 0.4]
    want = [reference_log_probs(m, 2, locs[:i], times[:i])[locs[i]] for i in range(1, 4)]
    np.testing.assert_allclose(m.step_log_probs(2, locs, times), want, rtol=1e-12)
    m.params["out_b"][1] = -1e4  # drives p(1) far below the floor
    assert m.step_log_probs(2, locs, times)[0] == LOG_FLOOR
    assert m.loss(2, locs[:1], times[:1], 1) == -LOG_FLOOR


@pytest.mark.parametrize("cfg,mask", [
    (SMALL, False),
    (ModelConfig(user_embed_dim=4, loc_embed_dim=3, hidden_dim=8, time_encoding="sinusoidal-2", seed=5), False),
    (SMALL, True),
])
def test_gradient_matches_finite_differences(cfg, mask):
    m = PoiModel(3, 10, cfg, mask_token=mask)
    trajs = _toy_trajs()
    if mask:
        trajs.append(_traj(1, [m.mask_id, 3, m.mask_id]))
    batch = SequenceBatch.from_trajectories(trajs, m.mask_id)
    _, g = m.loss_and_grad(batch)
    fd = central_difference(lambda: m.loss_and_grad(batch)[0], m.flat)
    for name in m.PARAM_NAMES:
        a, b = m.offsets[name]
        assert relative_error(g[a:b], fd[a:b]) < 1e-6, name


def test_per_example_gradients_match_finite_differences():
    m = PoiModel(3, 10, SMALL)
    examples = prefix_examples(_toy_trajs())[:6]
    _, per = m.loss_and_grad(SequenceBatch.from_examples(examples), per_example=True)
    for b, ex in enumerate(examples):
        single = SequenceBatch.from_examples([ex])
        fd = central_difference(lambda: m.loss_and_grad(single)[0], m.flat)
        assert relative_error(per[b], fd) < 1e-6
    # the batch gradient is the mean of the rows when every row has one target
    _, g = m.loss_and_grad(SequenceBatch.from_examples(examples))
    np.testing.assert_allclose(g, per.mean(axis=0), rtol=1e-10, atol=1e-14)


def test_fully_masked_data_is_rejected():
    m = PoiModel(2, 10, SMALL, mask_token=True)
    batch = SequenceBatch.from_trajectories([_traj(0, [1, m.mask_id])], m.mask_id)
    assert (batch.targets == -1).all()
    with pytest.raises(TrainingError):
        train(m, [_traj(0, [1, m.mask_id])], TrainConfig(epochs=1))


def test_mask_row_is_drawn_last():
    a = PoiModel(3, 10, SMALL)
    b = PoiModel(3, 10, SMALL, mask_token=True)
    for name in a.PARAM_NAMES:
        np.testing.assert_array_equal(a.params[name], b.params[name][: a.params[name].shape[0]])


@pytest.mark.skipif("cython" not in _backend.available_backends(), reason="compiled extension not built")
def test_backends_agree():
    cy, py = _backend.load_backend("cython"), _backend.load_backend("python")
    rng = np.random.default_rng(7)
    T, B, H = 6, 5, 4
    A = rng.normal(size=(T, B, 3 * H))
    h0 = np.tanh(rng.normal(size=(B, H)))
    Wh = rng.normal(size=(H, 3 * H))
    mask = (np.arange(T)[:, None] < rng.integers(1, T + 1, B)[None, :]).astype(float)
    fc, fp = cy.gru_forward(A, h0, Wh, mask), py.gru_forward(A, h0, Wh, mask)
    for x, y in zip(fc, fp):
        np.testing.assert_allclose(x, y, rtol=1e-12, atol=1e-13)
    dHs = rng.normal(size=(T, B, H))
    for x, y in zip(cy.gru_backward(dHs, *fc, Wh, mask), py.gru_backward(dHs, *fp, Wh, mask)):
        np.testing.assert_allclose(x, y, rtol=1e-11, atol=1e-12)
    w1, g = rng.normal(size=50), rng.normal(size=50)
    m1, v1 = np.zeros(50), np.zeros(50)
    w2, m2, v2 = w1.copy(), m1.copy(), v1.copy()
    for t in (1, 2, 3):
        cy.adam_step(w1, g, m1, v1, 1e-3, 0.9, 0.999, 1e-8, t)
        py.adam_step(w2, g, m2, v2, 1e-3, 0.9, 0.999, 1e-8, t)
    np.testing.assert_allclose(w1, w2, rtol=1e-13)


def test_extreme_preactivations_stay_finite():
    m = PoiModel(2, 10, SMALL)
    m.params["gru_Wx"][...] *= 1e4
    m.params["loc_emb"][...] *= 1e3
    out = m.query([0, 1], [[1, 2, 3], [4, 5, 6]], [[0.1] * 3, [0.9] * 3])
    assert np.isfinite(out).all()


def test_padded_steps_carry_hidden_state():
    A = np.random.default_rng(1).normal(size=(3, 1, 6))
    h0 = np.full((1, 2), 0.3)
    mask = np.array([[1.0], [0.0], [0.0]])
    Hs = _backend.gru_forward(A, h0, np.zeros((2, 6)), mask)[0]
    np.testing.assert_array_equal(Hs[1], Hs[3])


def test_checkpoint_round_trip_is_byte_stable(tmp_path):
    m = PoiModel(3, 10, SMALL, mask_token=True)
    m.save(tmp_path / "a.ckpt")
    r = PoiModel.load(tmp_path / "a.ckpt")
    np.testing.assert_array_equal(r.flat, m.flat)
    assert r.mask_id == m.mask_id
    r.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_index_errors():
    m = PoiModel(3, 10, SMALL)
    with pytest.raises(IndexError):
        m.query([3], [[1]], [[0.0]])
    with pytest.raises(IndexError):
        m.query([0], [[10]], [[0.0]])
    with pytest.raises(ValueError):
        m.forward(0, [], [])


def test_training_is_seed_deterministic_and_learns():
    ds, _ = synth_generate(12, 15, 20, seed=2)
    runs = []
    for _ in range(2):
        m = PoiModel(ds.n_users, ds.n_locations, ModelConfig(hidden_dim=16, seed=4))
        res = train(m, ds, TrainConfig(epochs=15, seed=4, snapshot_epochs=(3,), lr=1e-2))
        runs.append((m.flat.copy(), res))
    np.testing.assert_array_equal(runs[0][0], runs[1][0])
    hist = runs[0][1].history
    assert hist[-1].train_loss < hist[0].train_loss
    assert set(runs[0][1].snapshots) == {3}
    assert not np.array_equal(runs[0][1].snapshots[3], runs[0][0])


def test_early_stopping_restores_best_weights():
    ds, _ = synth_generate(12, 15, 20, seed=2)
    m = PoiModel(ds.n_users, ds.n_locations, ModelConfig(hidden_dim=16, seed=4))
    res = train(m, ds, TrainConfig(epochs=60, seed=4, lr=3e-2, early_stop_patience=2))
    assert res.stopped_early
    best = max(r.val_top10 for r in res.history)
    assert evaluate_topk(m, ds.split(VALID), (10,))[10] == pytest.approx(best)


def test_sgd_momentum_and_weight_decay_run():
    ds, _ = synth_generate(8, 10, 10, seed=1)
    m = PoiModel(ds.n_users, ds.n_locations, SMALL)
    res = train(m, ds, TrainConfig(epochs=2, optimizer="sgd-momentum", lr=0.05, weight_decay=1e-2))
    assert len(res.history) == 2 and np.isfinite(res.history[-1].train_loss)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ValueError):
        ModelConfig(hidden_dim=0)
    with pytest.raises(ValueError):
        ModelConfig(time_encoding="fourier")
    with pytest.raises(TrainingError):
        train(PoiModel(2, 5, SMALL), [], TrainConfig(epochs=1))


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=12), st.data())
def test_target_ranks_against_sort(scores, data):
    s = np.array([scores])
    t = data.draw(st.integers(0, len(scores) - 1))
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    assert target_ranks(s, np.array([t]))[0] == order.index(t)


@given(st.lists(st.lists(st.integers(0, 9), min_size=2, max_size=6), min_size=1, max_size=5))
def test_prefix_examples_count(seqs):
    trajs = [_traj(0, s) for s in seqs]
    ex = prefix_examples(trajs)
    assert len(ex) == sum(len(s) - 1 for s in seqs)
    assert all(len(e[1]) >= 1 and e[3] == s[len(e[1])] for e, s in zip(ex, [s for s in seqs for _ in s[1:]]))
