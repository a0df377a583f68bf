import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.integrate import quad

from poiaudit.data import TEST, TRAIN, VALID, haversine_km, synth_generate
from poiaudit.defenses import (DefenseError, DpConfig, DpSgdHook, ProtectedSet, _invert_radial, clip_rows,
                               geo_ind_perturb, GeoIndConfig, jft_train, offset_coords, overfit_controls,
                               planar_laplace_radial_cdf, planar_laplace_radius, protected_set, redact,
                               sensitive_items, snap_to_poi)
from poiaudit.model.network import ModelConfig
from poiaudit.model.training import TrainConfig, prefix_examples

TINY = ModelConfig(user_embed_dim=4, loc_embed_dim=4, hidden_dim=6, seed=2)


@pytest.fixture(scope="module")
def ds():
    return synth_generate(10, 25, 15, seed=6)[0]


def test_sigma_formula():
    for eps, delta in [(1.0, 1e-3), (5.0, 1e-5), (0.5, 0.1)]:
        assert DpConfig(eps, delta).sigma == pytest.approx(math.sqrt(2 * math.log(1.25 / delta)) / eps, rel=1e-15)
    with pytest.raises(ValueError):
        DpConfig(0.0)
    with pytest.raises(ValueError):
        DpConfig(1.0, delta=1.0)


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 30)),
              elements=st.floats(-1e6, 1e6)), st.floats(1e-3, 1e3))
def test_clipped_norms_never_exceed_bound(g, c):
    out = clip_rows(g, c)
    assert (np.linalg.norm(out, axis=1) <= c).all()
    small = np.linalg.norm(g, axis=1) <= c
    np.testing.assert_array_equal(out[small], g[small])


def test_hook_averages_clipped_rows_plus_seeded_noise():
    cfg = DpConfig(5.0, clip_norm=1.0, seed=4)
    g = np.array([[3.0, 4.0], [0.3, 0.4]])
    a, b = DpSgdHook(cfg), DpSgdHook(cfg)
    out = a(g)
    np.testing.assert_array_equal(out, b(g))
    noise = out - np.array([[0.6, 0.8], [0.3, 0.4]]).mean(axis=0)
    ref = np.random.default_rng([4, 0xD9]).normal(0.0, cfg.sigma * 1.0 / 2, 2)
    np.testing.assert_allclose(noise, ref, rtol=1e-12)
    with pytest.raises(DefenseError):
        a(np.array([[np.nan, 0.0]]))


def test_overfit_controls():
    c = overfit_controls(TrainConfig(), weight_decay=1e-2, early_stop_patience=5)
    assert c.weight_decay == 1e-2 and c.early_stop_patience == 5


@pytest.mark.parametrize("kind", ["common-location", "user-location", "location-sequence", "trajectory"])
def test_protected_set_scope_sizes(ds, kind):
    every = sensitive_items(ds, kind)
    assert len(protected_set(ds, kind, "all")) == len(every)
    t = protected_set(ds, kind, "targeted", 0.3, seed=1)
    assert len(t) == round(0.3 * len(every)) and t.items <= set(every)
    assert t == protected_set(ds, kind, "targeted", 0.3, seed=1)


def test_redaction_masks_locations_and_drops_trajectories(ds):
    trajs = ds.split(TRAIN)
    loc = protected_set(ds, "user-location", "targeted", 0.5, seed=0)
    red = redact(trajs, loc, mask_id=99)
    assert len(red) == len(trajs)
    for a, b in zip(trajs, red):
        for x, y in zip(a.locations, b.locations):
            assert y == (99 if (a.user_id, x) in loc.items else x)
    seq = protected_set(ds, "trajectory", "targeted", 0.5, seed=0)
    kept = redact(trajs, seq, mask_id=99)
    assert len(kept) == len(trajs) - len(seq)
    assert not any(seq.covers_trajectory(t) for t in kept)
    with pytest.raises(ValueError):
        ProtectedSet("favourite-colour")


def test_jft_runs_both_phases(ds):
    prot = protected_set(ds, "common-location", "all")
    r = jft_train(ds, prot, DpConfig(5.0), TrainConfig(epochs=2), TrainConfig(epochs=1), TINY)
    assert r.model.mask_token and r.phase2 is not None and len(r.phase2.history) == 1
    masked = [l for t in r.redacted for l in t.locations if l == r.model.mask_id]
    assert len(masked) == sum(1 for t in ds.split(TRAIN) for l in t.locations if (t.user_id, l) in prot.items)
    only1 = jft_train(ds, prot, DpConfig(5.0), TrainConfig(epochs=1), None, TINY)
    assert only1.phase2 is None


def test_radial_cdf_matches_integrated_density():
    eps = 0.01
    for r in (1.0, 50.0, 100.0, 300.0, 1000.0):
        integral = quad(lambda x: eps ** 2 * x * math.exp(-eps * x), 0.0, r)[0]
        assert float(planar_laplace_radial_cdf(r, eps)) == pytest.approx(integral, rel=1e-10)


@given(st.floats(1e-9, 1 - 1e-9), st.floats(1e-4, 10.0))
def test_lambert_inverse_round_trips(p, eps):
    r = float(planar_laplace_radius(p, eps)[0])
    assert float(planar_laplace_radial_cdf(r, eps)) == pytest.approx(p, rel=1e-9)
    assert r == pytest.approx(_invert_radial(p, eps), rel=1e-6)


def test_small_probability_radius_follows_series():
    # CDF = x^2/2 - x^3/3 + O(x^4) with x = eps r, so x = s + s^2/3 + O(s^3) for s = sqrt(2p)
    for p in (1e-14, 1e-10, 1e-7):
        s = math.sqrt(2 * p)
        assert planar_laplace_radius(p, 0.01)[0] == pytest.approx((s + s * s / 3) / 0.01, rel=1e-6)


def test_offset_distance_and_snapping():
    lat, lon = offset_coords(40.7, -74.0, 250.0, 0.7)
    assert haversine_km(40.7, -74.0, lat, lon) * 1000 == pytest.approx(250.0, rel=1e-3)
    coords = np.array([[40.7, -74.0], [40.71, -74.0], [40.7, -73.98]])
    assert snap_to_poi(coords, [40.709, 40.7001], [-74.0, -73.981]).tolist() == [1, 2]


def test_geo_ind_touches_only_protected_train_checkins(ds):
    prot = protected_set(ds, "common-location", "all")
    out = geo_ind_perturb(ds, prot, GeoIndConfig(0.01, seed=3))
    changed = 0
    for a, b in zip(ds.trajectories, out.trajectories):
        if a.split != TRAIN:
            assert a == b
            continue
        for x, y in zip(a.locations, b.locations):
            if (a.user_id, x) not in prot.items:
                assert x == y
            changed += x != y
            assert 0 <= y < ds.n_locations
    assert changed > 0
    assert out.split(VALID) == ds.split(VALID) and out.split(TEST) == ds.split(TEST)
    assert prefix_examples(out.split(TRAIN))
