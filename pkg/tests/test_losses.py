import numpy as np
import pytest

from npbml import ad
from npbml.checks import check_batch_invariance, check_loss_recovery, hand_wired_support_net
from npbml.inner import InnerConfig, adapt
from npbml.losses import (EpisodeContext, base_loss, layer_stats, loss_input_extents, meta_loss_terms,
                          per_instance_base_loss, query_inputs, regularized_layers, regularizer_inputs,
                          support_inputs)
from npbml.model import EncoderSpec, Variant, forward, init_meta_params, initial_theta
from npbml.tasks import ClusterFamily, SinusoidFamily, TaskSpec, episode_rng, prototype_relation_scores, sample_episode


def _setup(variant=Variant(), n_way=3):
    fam = ClusterFamily(12, 6, 6, dim=6, radius=2.0, seed=1)
    ts = TaskSpec("classification", n_way, 2, 4, 6)
    spec = EncoderSpec.mlp(6, [8, 5])
    ext = loss_input_extents("classification", n_way, len(regularized_layers(spec)))
    params = init_meta_params(spec, variant, loss_inputs=ext, seed=2, dtype=np.float64)
    ep = sample_episode(fam, ts, episode_rng(0, 0))
    return params, spec, ep


def test_input_extents():
    assert loss_input_extents("classification", 5, 2) == {"support": 11, "query": 11, "reg": 8}
    assert loss_input_extents("regression", 1, 3) == {"support": 3, "query": 3, "reg": 12}


def test_base_losses_match_numpy():
    rng = np.random.default_rng(0)
    z, y = rng.normal(size=(6, 4)), rng.integers(0, 4, 6)
    logp = z - np.log(np.exp(z).sum(1, keepdims=True))
    assert base_loss(ad.constant(z), y, "cross_entropy").item() == pytest.approx(-logp[np.arange(6), y].mean())
    t = rng.normal(size=(6, 4))
    assert base_loss(ad.constant(z), t, "squared").item() == pytest.approx(((z - t) ** 2).mean())
    with pytest.raises(ValueError):
        per_instance_base_loss(ad.constant(z), y, "hinge")


def test_support_input_layout():
    z = ad.constant(np.random.default_rng(1).normal(size=(4, 3)))
    y = np.array([0, 2, 1, 2])
    inp = support_inputs(z, y, "classification").value
    assert inp.shape == (4, 7)
    np.testing.assert_array_equal(inp[:, :3], np.eye(3)[y])
    np.testing.assert_allclose(inp[:, 3:6].sum(1), 1.0)
    np.testing.assert_allclose(inp[:, 6], -np.log(inp[np.arange(4), 3 + y]))


def test_query_inputs_check_relation_shape():
    z = ad.constant(np.zeros((4, 3)))
    assert query_inputs(z, np.full((4, 3), 1 / 3), "classification").shape == (4, 7)
    with pytest.raises(ad.ShapeError):
        query_inputs(z, np.zeros((4, 2)), "classification")


def test_layer_stats_match_numpy():
    w = np.random.default_rng(2).normal(size=(5, 4))
    s = layer_stats(w).value
    np.testing.assert_allclose(s, [w.mean(), w.std(), np.abs(w).sum(), np.linalg.norm(w)], rtol=1e-10)
    r = regularizer_inputs({"a": ad.constant(w)}, ["a"]).value
    np.testing.assert_allclose(r[0], [w.mean(), w.std(), np.abs(w).sum() / 20, np.linalg.norm(w) / np.sqrt(20)],
                               rtol=1e-10)


def test_zero_phi_recovers_base_loss_exactly():
    assert check_loss_recovery(n_episodes=20).passed


def test_missing_relation_scores_raise():
    params, spec, ep = _setup()
    ctx = EpisodeContext(ep, np.float64, relation=None)
    with pytest.raises(ValueError):
        meta_loss_terms(params, ctx, initial_theta(params, 3), spec)


def test_hand_wired_regularizer_is_weight_norm_penalty():
    params, spec, ep = _setup(Variant(False, False, False, False, True))
    lam = 0.3
    p = params.map(lambda g, n, v: np.zeros_like(v) if g == "phi" else v.copy())
    layers = regularized_layers(spec)
    theta0 = initial_theta(p, 3)
    for i, name in enumerate(layers):
        p.phi["reg.0.weight"][0, 4 * i + 3] = lam * np.sqrt(theta0[name].size)
    p.phi["reg.1.weight"][0, 0] = 1.0
    p.phi["reg.2.weight"][0, 0] = 1.0
    ctx = EpisodeContext(ep, np.float64)
    with ad.no_record():
        terms = meta_loss_terms(p, ctx, theta0, spec)
    expected = sum(np.linalg.norm(theta0[n].value) for n in layers) * lam
    assert terms.reg.item() == pytest.approx(expected, rel=1e-10)
    # the inner trajectory then equals SGD on base + lam * sum of L2 norms
    traj = adapt(p, ctx, InnerConfig(alpha=0.1, steps=3), spec)
    theta = {k: v.value.copy() for k, v in theta0.items()}
    for j in range(3):
        with ad.Tape() as tape:
            vs = {k: tape.watch(v) for k, v in theta.items()}
            loss = base_loss(forward(p, vs, ad.constant(ep.x_support), spec), ep.y_support, "cross_entropy")
            for n in layers:
                loss = ad.add(loss, ad.scale(ad.sqrt(ad.add_scalar(ad.sum(ad.square(vs[n])), 1e-12)), lam))
            gs = dict(zip(vs, ad.grad(loss, list(vs.values()))))
        theta = {k: theta[k] - 0.1 * gs[k].value for k in theta}
        for k in theta:
            np.testing.assert_allclose(traj.snapshot(j + 1)[k], theta[k], atol=1e-10)


def test_hand_wired_support_loss_scales_base_loss():
    params, spec, ep = _setup(Variant(False, False, True, False, False))
    p = hand_wired_support_net(params, c=3.0)
    ctx = EpisodeContext(ep, np.float64)
    with ad.no_record():
        t = meta_loss_terms(p, ctx, initial_theta(p, 3), spec)
    assert t.total.item() == pytest.approx(3.0 * t.base.item(), rel=1e-12)


def test_batch_invariance():
    assert check_batch_invariance(n_episodes=5).passed


def test_regression_meta_loss_runs():
    fam = SinusoidFamily()
    ts = TaskSpec("regression", 1, 5, 15, 1)
    spec = EncoderSpec.mlp(1, [10, 10])
    params = init_meta_params(spec, Variant(), loss_inputs=loss_input_extents("regression", 1, 3),
                              seed=0, dtype=np.float64)
    ep = sample_episode(fam, ts, episode_rng(1))
    from npbml.tasks import kernel_smoother_scores
    ctx = EpisodeContext(ep, np.float64, kernel_smoother_scores(ep))
    with ad.no_record():
        t = meta_loss_terms(params, ctx, initial_theta(params, 1), spec)
    assert np.isfinite(t.total.item()) and t.query is not None and t.support is not None


def test_permuted_support_gives_same_meta_loss():
    params, spec, ep = _setup()
    rel = prototype_relation_scores(ep)
    perm = np.random.default_rng(3).permutation(len(ep.x_support))
    ep2 = type(ep)(ep.x_support[perm], ep.y_support[perm], ep.x_query, ep.y_query, ep.kind, ep.n_way, ep.classes)
    theta = initial_theta(params, 3)
    with ad.no_record():
        a = meta_loss_terms(params, EpisodeContext(ep, np.float64, rel), theta, spec).total.item()
        b = meta_loss_terms(params, EpisodeContext(ep2, np.float64, rel), theta, spec).total.item()
    assert a == pytest.approx(b, abs=1e-12)
