import json

import numpy as np
import pytest

from npbml import ad
from npbml.inner import InnerConfig
from npbml.losses import loss_input_extents
from npbml.model import EncoderSpec, MetaParams, Variant, init_meta_params
from npbml.outer import (AdamState, AllEpisodesDiverged, MetaConfig, adam_update, global_norm, meta_gradient,
                         meta_objective, meta_step, meta_train, trainable_keys)
from npbml.outer import episode_objective
from npbml.tasks import ClusterFamily, RelationEmbedder, TaskSpec, episode_rng, sample_episode

FAM = ClusterFamily(12, 6, 6, dim=6, radius=2.0, seed=1)
TS = TaskSpec("classification", 3, 2, 4, 6)


def _params(variant=Variant(), spec=None, seed=0):
    spec = spec or EncoderSpec.mlp(6, [8, 5])
    ext = loss_input_extents("classification", 3, len(spec.adapted_layers) + 1)
    return init_meta_params(spec, variant, loss_inputs=ext, seed=seed, dtype=np.float64), spec


def _episodes(n, seed=0, split="train"):
    return [sample_episode(FAM, TS, episode_rng(seed, i), split) for i in range(n)]


def test_meta_gradient_matches_finite_differences_on_sampled_coordinates():
    params, spec = _params()
    eps = _episodes(2)
    emb = RelationEmbedder()
    inner = InnerConfig(alpha=0.1, steps=2)
    _, grads, _ = meta_gradient(params, eps, inner, spec, emb)
    flat = params.flat()
    rng = np.random.default_rng(0)
    for key in ("theta/enc.1.weight", "omega/warp.1", "phi/support.0.weight", "psi/film.enc.1.weight"):
        idx = rng.choice(flat[key].size, 2, replace=False)

        def f(a, key=key):
            fl = {k: np.asarray(v, dtype=np.longdouble) for k, v in flat.items()}
            fl[key] = np.asarray(a, dtype=np.longdouble)
            return meta_objective(MetaParams.from_flat(fl), eps, inner, spec, emb)

        fd = ad.finite_diff(f, flat[key], eps=1e-4, coords=idx, order=4)
        np.testing.assert_allclose(grads[key].reshape(-1)[idx], fd, rtol=1e-4, atol=1e-8)


def test_frozen_layers_are_not_trainable():
    spec = EncoderSpec.mlp(6, [8, 5], adapt_policy=(-1,), freeze_unadapted=True)
    params, spec = _params(Variant.maml(), spec)
    keys = trainable_keys(params, spec)
    assert "theta/enc.0.weight" not in keys and "theta/enc.1.weight" in keys
    state = AdamState.zeros(params, keys)
    new, _, _ = meta_step(params, state, _episodes(2), InnerConfig(alpha=0.1, steps=1),
                          MetaConfig(eta=1e-2), spec)
    np.testing.assert_array_equal(new.theta["enc.0.weight"], params.theta["enc.0.weight"])
    assert not np.allclose(new.theta["enc.1.weight"], params.theta["enc.1.weight"])


def test_adam_update_matches_formula():
    p = MetaParams(theta={"w": np.array([1.0, -2.0])})
    state = AdamState.zeros(p)
    g = {"theta/w": np.array([0.5, -0.1])}
    cfg = MetaConfig(eta=0.1)
    p1, s1 = adam_update(p, state, g, cfg)
    # first Adam step moves each coordinate by eta * sign(g) (up to eps)
    np.testing.assert_allclose(p1.theta["w"], [0.9, -1.9], atol=1e-6)
    assert s1.step == 1


def test_clipping_and_non_finite_skip(monkeypatch):
    params, spec = _params(Variant.maml())
    state = AdamState.zeros(params, trainable_keys(params, spec))
    import npbml.outer as outer

    def fake(*a, **k):
        return 1.0, {kk: np.full_like(v, 100.0) for kk, v in state.m.items()}, [None]
    monkeypatch.setattr(outer, "meta_gradient", fake)
    _, _, info = meta_step(params, state, [], InnerConfig(), MetaConfig(clip_norm=10.0), spec)
    assert info["clipped"] and not info["skipped"]

    def bad(*a, **k):
        return 1.0, {kk: np.full_like(v, np.nan) for kk, v in state.m.items()}, [None]
    monkeypatch.setattr(outer, "meta_gradient", bad)
    p2, s2, info = meta_step(params, state, [], InnerConfig(), MetaConfig(), spec)
    assert info["skipped"] and p2 is params and s2 is state


def test_global_norm():
    assert global_norm({"a": np.array([3.0]), "b": np.array([[4.0]])}) == pytest.approx(5.0)


def test_all_diverged_raises():
    params, spec = _params(Variant.maml())
    with pytest.raises(AllEpisodesDiverged):
        meta_gradient(params, _episodes(2), InnerConfig(alpha=1e9, steps=3), spec)


def test_final_query_loss_obeys_divergence_threshold():
    from npbml.inner import DivergenceError
    params, spec = _params(Variant.maml())
    ep = _episodes(1)[0]
    # zero inner steps: only the check on the final query loss can fire
    value = episode_objective(params, ep, InnerConfig(steps=0), spec, with_grad=False).loss
    for with_grad in (False, True):
        with pytest.raises(DivergenceError):
            episode_objective(params, ep, InnerConfig(steps=0, divergence_threshold=value / 2), spec,
                              with_grad=with_grad)


def test_meta_training_reduces_query_loss():
    params, spec = _params(Variant.maml(), seed=3)
    inner = InnerConfig(alpha=0.1, steps=3)
    val = _episodes(20, seed=5, split="val")
    before = meta_objective(params, val, inner, spec)
    trained, records = meta_train(params, spec, inner, MetaConfig(eta=3e-3, meta_batch=2, steps=60,
                                                                  val_interval=30, val_episodes=20),
                                  lambda s, i: sample_episode(FAM, TS, episode_rng(7, s, i)), val)
    assert meta_objective(trained, val, inner, spec) < before
    assert records[0]["step"] == 0 and records[-1]["step"] == 60
    assert {"step", "meta_loss", "val_loss", "val_accuracy", "grad_norm", "clipped_flag"} <= set(records[-1])


def test_resume_reproduces_uninterrupted_run(tmp_path):
    params, spec = _params(Variant(), seed=4)
    inner = InnerConfig(alpha=0.1, steps=2)
    val = _episodes(4, seed=5, split="val")
    emb = RelationEmbedder()

    def sample(s, i):
        return sample_episode(FAM, TS, episode_rng(8, s, i))

    full_cfg = MetaConfig(eta=1e-3, meta_batch=2, steps=6, val_interval=3, val_episodes=4)
    full, _ = meta_train(params, spec, inner, full_cfg, sample, val, emb, out_dir=tmp_path / "a")
    half = MetaConfig(eta=1e-3, meta_batch=2, steps=3, val_interval=3, val_episodes=4)
    meta_train(params, spec, inner, half, sample, val, emb, out_dir=tmp_path / "b")
    resumed, records = meta_train(params, spec, inner, full_cfg, sample, val, emb, out_dir=tmp_path / "b")
    for k, v in full.flat().items():
        np.testing.assert_array_equal(resumed.flat()[k], v)
    lines = (tmp_path / "b" / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(line)["step"] for line in lines] == list(range(7))
    assert (tmp_path / "b" / "best.npz").exists()
