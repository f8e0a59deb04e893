import numpy as np
import pytest

from conftest import TINY, blob_frames
from sqair import autodiff as ad
from sqair import inference as inf
from sqair.autodiff import Rng, Tensor
from sqair.distributions import bernoulli_logpmf
from sqair.generative import joint_terms
from sqair.inference import (ForcedSampler, NoiseBank, RandomSampler, air_mode_infer, discover_step, encode_latents,
                             infer_sequence, make_sampler, propagate_object, propose_glimpse_location, replay_log_q)
from sqair.learning import OptState, TrainConfig, train_step
from sqair.model import SQAIR


def sampler(model, T, P, seed=0):
    return make_sampler(model, T, Rng(seed), P=P)


def const_sampler(model, T, P, u):
    r = Rng(0).child("normals")
    return RandomSampler(NoiseBank(r.normal((P, T, 2, model.N, 4 + model.A)), np.full((P, T, 2, model.N), u)))


# ---------------------------------------------------------------- proposal

def test_proposal_starts_at_previous_location(tiny_model):
    r = Rng(1)
    where, h = r.normal((3, 4)), r.normal((3, 16))
    prop = propose_glimpse_location(tiny_model, where, h).values.data
    expected = inf.WhereParams.from_raw(where).values.data
    np.testing.assert_array_equal(prop, expected)
    np.testing.assert_array_equal(prop, propose_glimpse_location(tiny_model, where, h).values.data)


def test_proposal_gradient_reaches_temporal_state(tiny_model):
    last = tiny_model.proposal.layers[-1]
    last.w.data = 0.3 * Rng(2).normal(last.w.shape)
    where = Rng(3).normal((2, 4))
    h0 = Rng(4).normal((2, 16))
    weights = Rng(5).normal((2, 4))
    f = lambda h: (propose_glimpse_location(tiny_model, where, h).values * weights).sum()
    h = Tensor(h0, requires_grad=True)
    f(h).backward()
    num = np.zeros_like(h0)
    eps = 1e-6
    for i in np.ndindex(h0.shape):
        hp, hm = h0.copy(), h0.copy()
        hp[i] += eps
        hm[i] -= eps
        num[i] = (f(Tensor(hp)).data - f(Tensor(hm)).data) / (2 * eps)
    assert np.abs(h.grad).max() > 0
    np.testing.assert_allclose(h.grad, num, rtol=1e-5, atol=1e-9)


# ---------------------------------------------------------------- propagation

def _prop_inputs(P=4, seed=6):
    r = Rng(seed)
    return dict(what_prev=r.normal((P, 4)), where_prev=r.normal((P, 4)), h_temporal=r.normal((P, 16)),
                h_rel=np.zeros((P, 16)), prev_what=r.normal((P, 4)), prev_where=r.normal((P, 4)))


def test_propagate_absent_object_raises(tiny_model):
    x = Tensor(blob_frames(1, 4)[0])
    with pytest.raises(ValueError):
        propagate_object(tiny_model, x, sampler=sampler(tiny_model, 1, 4), t=0, slot=0,
                         present=np.zeros(4), **_prop_inputs())


def test_propagate_presence_and_its_score(tiny_model):
    x = Tensor(blob_frames(1, 4)[0])
    present = np.array([1.0, 1.0, 0.0, 1.0])
    o = propagate_object(tiny_model, x, sampler=sampler(tiny_model, 1, 4), t=0, slot=0, present=present,
                         **_prop_inputs())
    assert set(np.unique(o["pres"])) <= {0.0, 1.0}
    assert o["pres"][2] == 0 and o["log_q"].data[2] == 0
    expect = bernoulli_logpmf(o["pres"][:, None], o["q_pres"])[:, 0].data * present
    np.testing.assert_array_equal(o["log_q_pres"].data, expect)


def test_propagation_depends_on_earlier_objects(tiny_model):
    x = Tensor(blob_frames(1, 4)[0])
    a_in = _prop_inputs()
    b_in = dict(a_in, prev_what=a_in["prev_what"][::-1].copy(), prev_where=a_in["prev_where"][::-1].copy())
    run = lambda kw: propagate_object(tiny_model, x, sampler=sampler(tiny_model, 1, 4), t=0, slot=0,
                                      present=np.ones(4), **kw)
    a, b = run(a_in), run(b_in)
    assert np.abs(a["h_rel"].data - b["h_rel"].data).max() > 0
    assert np.abs(a["q_where"].mean.data - b["q_where"].mean.data).max() > 0


# ---------------------------------------------------------------- latent summary

def test_encode_latents_properties(tiny_model):
    r = Rng(7)
    what, where = r.normal((2, 2, 4)), r.normal((2, 2, 4))
    np.testing.assert_array_equal(encode_latents(tiny_model, what, where, np.zeros((2, 2))).data, 0.0)
    pres = np.array([[1.0, 1.0], [1.0, 0.0]])
    base = encode_latents(tiny_model, what, where, pres).data
    swapped = encode_latents(tiny_model, what[:, ::-1], where[:, ::-1], pres[:, ::-1]).data
    np.testing.assert_allclose(base, swapped, atol=1e-12)
    dup_what = np.repeat(what[:, :1], 2, axis=1)
    dup_where = np.repeat(where[:, :1], 2, axis=1)
    one = encode_latents(tiny_model, dup_what, dup_where, np.array([[1.0, 0.0]] * 2)).data
    two = encode_latents(tiny_model, dup_what, dup_where, np.ones((2, 2))).data
    np.testing.assert_allclose(two, 2 * one, atol=1e-12)


# ---------------------------------------------------------------- discovery

def test_discovery_skipped_when_full(tiny_model):
    x = Tensor(blob_frames(1, 3)[0])
    d = discover_step(tiny_model, x, np.zeros((3, 2, 4)), np.zeros((3, 2, 4)), np.ones((3, 2)),
                      sampler(tiny_model, 1, 3), 0)
    assert d["mask"].sum() == 0 and d["pres"].sum() == 0
    np.testing.assert_array_equal(d["log_q"].data, 0.0)


def test_discovery_stops_at_first_absent(tiny_model):
    x = Tensor(blob_frames(1, 3)[0])
    recs = []
    d = discover_step(tiny_model, x, np.zeros((3, 2, 4)), np.zeros((3, 2, 4)), np.zeros((3, 2)),
                      const_sampler(tiny_model, 1, 3, 1.0), 0, recs)
    assert d["pres"].sum() == 0
    np.testing.assert_array_equal(d["mask"], [[1, 0]] * 3)
    logit = recs[0].params[0][:, 0]
    np.testing.assert_allclose(d["log_q"].data, -np.logaddexp(0, logit), atol=1e-12)


def test_discovery_with_saturated_presence_fills_capacity(tiny_model):
    last = tiny_model.disc_q_pres.layers[-1]
    last.w.data[:] = 0.0
    last.b.data[:] = 15.0
    x = Tensor(blob_frames(1, 500)[0])
    d = discover_step(tiny_model, x, np.zeros((500, 2, 4)), np.zeros((500, 2, 4)), np.zeros((500, 2)),
                      sampler(tiny_model, 1, 500, seed=8), 0)
    assert (d["pres"].sum(1) == 2).all()


# ---------------------------------------------------------------- whole sequences

def test_single_frame_is_pure_discovery_and_matches_air_mode(tiny_model):
    x = blob_frames(1, 6)
    a = infer_sequence(tiny_model, x, sampler(tiny_model, 1, 6, seed=9))
    b = air_mode_infer(tiny_model, x[0], sampler(tiny_model, 1, 6, seed=9))
    assert a.states[0].prop_mask.sum() == 0
    np.testing.assert_array_equal(a.log_q.data, b.log_q.data)
    np.testing.assert_array_equal(a.log_weight.data, b.log_weight.data)
    assert np.isfinite(b.log_q.data).all()


def test_replay_reproduces_log_q(tiny_model):
    x = blob_frames(4, 8)
    tr = infer_sequence(tiny_model, x, sampler(tiny_model, 4, 8, seed=10), record=True)
    assert any(fb.prop_mask.any() for fb in tr.states)
    np.testing.assert_allclose(replay_log_q(tr), tr.log_q.data, rtol=0, atol=1e-10)


def test_forced_replay_and_joint_agree(tiny_model):
    x = blob_frames(3, 6)
    tr = infer_sequence(tiny_model, x, sampler(tiny_model, 3, 6, seed=11))
    again = infer_sequence(tiny_model, x, ForcedSampler(tr.states))
    np.testing.assert_allclose(again.log_q.data, tr.log_q.data, atol=1e-10)
    jt = joint_terms(tiny_model, x, tr.states)
    np.testing.assert_allclose(jt.log_prior.data, tr.log_prior.data, atol=1e-9)
    np.testing.assert_allclose(jt.log_lik.data, tr.log_lik.data, atol=1e-9)


def test_seeds_change_samples_not_initial_parameters(tiny_model):
    x = blob_frames(2, 5)
    a = infer_sequence(tiny_model, x, sampler(tiny_model, 2, 5, seed=12), record=True)
    b = infer_sequence(tiny_model, x, sampler(tiny_model, 2, 5, seed=13), record=True)
    np.testing.assert_array_equal(a.records[0].params[0], b.records[0].params[0])
    assert not np.array_equal(a.log_q.data, b.log_q.data)


def test_structural_invariants_over_many_particles(monkeypatch):
    model = SQAIR(TINY, seed=5)
    calls = []
    real = inf.propagate_object

    def spy(model_, x, what_prev, where_prev, h_temporal, h_rel, prev_what, prev_where, sampler_, t, slot,
            present, records=None):
        calls.append((t, slot, present.copy()))
        return real(model_, x, what_prev, where_prev, h_temporal, h_rel, prev_what, prev_where, sampler_, t,
                    slot, present, records)

    monkeypatch.setattr(inf, "propagate_object", spy)
    x = blob_frames(4, 200, seed=3)
    tr = infer_sequence(model, x, sampler(model, 4, 200, seed=14))
    N = model.N
    for t, fb in enumerate(tr.states):
        assert (fb.n_discovered() <= N - fb.n_propagated()).all()
        assert ((fb.prop_pres > 0) <= (fb.prop_mask > 0)).all()
        prev_present = tr.states[t - 1].counts() if t else np.zeros(200)
        assert (fb.prop_mask.sum(1) == prev_present).all()
    assert calls
    for t, slot, present in calls:
        prev = tr.states[t - 1]
        alive = np.concatenate([prev.prop_pres, prev.disc_pres], 1).sum(1) > slot
        np.testing.assert_array_equal(present > 0, alive)


def test_infer_sequence_input_checks(tiny_model):
    with pytest.raises(ad.ShapeError):
        infer_sequence(tiny_model, np.zeros((2, 16, 16)), sampler(tiny_model, 2, 1))
    with pytest.raises(TypeError):
        NoiseBank.draw(Rng(0), 1, 2, 4)


def test_air_mode_counts_zero_on_blank_after_training():
    model = SQAIR(TINY, seed=0)
    cfg = TrainConfig(K=5, batch=8, lr=1e-2, mode="air")
    opt = OptState(lr=cfg.lr)
    blank = np.zeros((1, 8, 16, 16))
    for step in range(400):
        train_step(model, blank, opt, cfg, Rng(step), counts=np.zeros((1, 8)))
    with ad.no_grad():
        tr = air_mode_infer(model, np.zeros((200, 16, 16)), sampler(model, 1, 200, seed=15))
    assert tr.counts().max() == 0
