"""Property and oracle suite. Each check returns a :class:`CheckResult`; the
``check`` CLI verb and the acceptance tests both run them."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import tempfile
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np

from . import ad
from .config import ExperimentConfig, load_config
from .experiment import NPBMLLearner, evaluate, evaluate_learner, initial_params, run
from .inner import InnerConfig, adapt, diagonal_precondition_step
from .losses import (base_loss, loss_input_extents, meta_loss, query_inputs,
                     query_loss, support_inputs, support_loss)
from .model import (EncoderSpec, MetaParams, Variant, encode, forward, init_meta_params,
                    initial_theta, save_checkpoint)
from .outer import meta_gradient, meta_objective
from .tasks import (ClusterFamily, RelationEmbedder, TaskSpec, episode_rng, prototype_relation_scores,
                    sample_episode)


@dataclass
class CheckResult:
    criterion: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.criterion:>2} {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(criterion: int, name: str, budget: float | None = None):
    """Wrap a ``(passed, detail)`` check into a CheckResult; a ``budget`` in
    seconds turns an overrun into a failure."""
    def wrap(fn: Callable[..., tuple[bool, str]]):
        def inner(*args, **kw) -> CheckResult:
            t0 = time.perf_counter()
            ok, detail = fn(*args, **kw)
            seconds = time.perf_counter() - t0
            if budget is not None and seconds > budget:
                ok, detail = False, f"{detail}; over the {budget:.0f}s budget"
            return CheckResult(criterion, name, bool(ok), detail, seconds)
        inner.__name__ = fn.__name__
        inner.__doc__ = fn.__doc__
        return inner
    return wrap


def desk_config(name: str) -> ExperimentConfig:
    """One of the bundled desk-scale configs ("sinusoid", "cluster", "tiny")."""
    ref = resources.files("npbml") / "configs" / f"{name}.yaml"
    with resources.as_file(ref) as path:
        return load_config(path)


# -- the frozen tiny instance -----------------------------------------------

def tiny_instance(variant: Variant = Variant(), seed: int = 3):
    family = ClusterFamily(6, 3, 3, dim=4, radius=2.0, noise=1.0, seed=0)
    ts = TaskSpec("classification", 2, 1, 15, 4)
    spec = EncoderSpec.mlp(4, [8, 4])
    ext = loss_input_extents("classification", 2, len(spec.adapted_layers) + 1)
    params = init_meta_params(spec, variant, loss_inputs=ext, seed=seed, dtype=np.float64)
    episode = sample_episode(family, ts, episode_rng(0, 1))
    return family, ts, spec, params, episode


@_timed(1, "meta-gradient vs finite differences", budget=120)
def check_meta_gradient(n_per_group: int = 15, seed: int = 0):
    """AD meta-gradient (double) against a 4th-order central difference with
    step 1e-4 whose function values are computed in extended precision."""
    _, _, spec, params, episode = tiny_instance()
    embedder = RelationEmbedder()
    inner = InnerConfig(alpha=0.1, steps=2)
    _, grads, _ = meta_gradient(params, [episode], inner, spec, embedder)
    flat = params.flat()
    rng = np.random.default_rng(seed)
    wide = {k: np.asarray(v, dtype=np.longdouble) for k, v in flat.items()}
    worst, fails, n = 0.0, [], 0
    for group in ("theta", "omega", "phi", "psi"):
        keys = [k for k in flat if k.startswith(group + "/")]
        sizes = np.array([flat[k].size for k in keys])
        picks = rng.choice(int(sizes.sum()), size=n_per_group, replace=False)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        for pick in picks:
            j = int(np.searchsorted(offsets, pick, side="right") - 1)
            key, idx = keys[j], int(pick - offsets[j])

            def f(a, key=key):
                fl = dict(wide)
                fl[key] = np.asarray(a, dtype=np.longdouble)
                return meta_objective(MetaParams.from_flat(fl), [episode], inner, spec, embedder)

            fd = ad.finite_diff(f, flat[key], eps=1e-4, coords=[idx], order=4)[0]
            g = float(grads[key].reshape(-1)[idx])
            n += 1
            if abs(g) < 1e-8:
                err, ok = abs(g - fd), abs(g - fd) <= 1e-7
            else:
                err = abs(g - fd) / abs(g)
                ok = err <= 1e-4
                worst = max(worst, err)
            if not ok:
                fails.append(f"{key}[{idx}] ad={g:.3e} fd={fd:.3e}")
    detail = f"{n} coordinates, worst relative error {worst:.2e}"
    if fails:
        detail += f", {len(fails)} over tolerance: " + "; ".join(fails[:3])
    return not fails, detail


# -- plain MAML reference (numpy, hand-written backprop) ----------------------

def _relu(z):
    return np.maximum(z, 0.0)


def reference_maml(theta: dict, x: np.ndarray, y: np.ndarray, n_way: int, n_layers: int,
                   alpha: float, steps: int) -> list[dict]:
    """SGD on mean cross-entropy for a ReLU MLP whose head is the single
    vector copied into ``n_way`` columns. Returns theta_0 .. theta_J with the
    head stored as its (n_way, feat) expansion."""
    p = {k: np.array(v, dtype=np.float64) for k, v in theta.items()}
    p["head.weight"] = np.tile(p["head.weight"], (n_way, 1))
    p["head.bias"] = np.full(n_way, float(p["head.bias"][0]))
    out = [{k: v.copy() for k, v in p.items()}]
    onehot = np.eye(n_way)[y]
    n = len(x)
    for _ in range(steps):
        acts, pre = [x], []
        for i in range(n_layers):
            z = acts[-1] @ p[f"enc.{i}.weight"].T + p[f"enc.{i}.bias"]
            pre.append(z)
            acts.append(_relu(z))
        logits = acts[-1] @ p["head.weight"].T + p["head.bias"]
        logits = logits - logits.max(axis=1, keepdims=True)
        prob = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        d = (prob - onehot) / n
        g = {"head.weight": d.T @ acts[-1], "head.bias": d.sum(axis=0)}
        dh = d @ p["head.weight"]
        for i in reversed(range(n_layers)):
            dz = dh * (pre[i] > 0)
            g[f"enc.{i}.weight"] = dz.T @ acts[i]
            g[f"enc.{i}.bias"] = dz.sum(axis=0)
            dh = dz @ p[f"enc.{i}.weight"]
        p = {k: p[k] - alpha * g[k] for k in p}
        out.append({k: v.copy() for k, v in p.items()})
    return out


def _max_traj_diff(traj, ref) -> float:
    worst = 0.0
    for j, snap in enumerate(ref):
        got = traj.snapshot(j)
        for k, v in snap.items():
            worst = max(worst, float(np.max(np.abs(got[k] - v))))
    return worst


def _neutral(params: MetaParams) -> MetaParams:
    """omega = I, psi = 0, phi = 0."""
    def f(g, n, v):
        v = np.asarray(v)
        if g == "omega":
            return np.eye(v.shape[0], dtype=v.dtype)
        if g in ("phi", "psi"):
            return np.zeros_like(v)
        return v.copy()
    return params.map(f)


@_timed(2, "MAML equivalence")
def check_maml_equivalence(n_episodes: int = 5, steps: int = 5, alpha: float = 0.1):
    family = ClusterFamily(12, 6, 6, dim=8, radius=2.0, noise=1.0, seed=1)
    ts = TaskSpec("classification", 3, 2, 5, 8)
    spec = EncoderSpec.mlp(8, [16, 8])
    ext = loss_input_extents("classification", 3, 3)
    inner = InnerConfig(alpha=alpha, steps=steps)
    worst = 0.0
    for e in range(n_episodes):
        ep = sample_episode(family, ts, episode_rng(11, e))
        for variant in (Variant.maml(), Variant()):
            params = _neutral(init_meta_params(spec, variant, loss_inputs=ext, seed=e, dtype=np.float64))
            relation = prototype_relation_scores(ep)
            traj = adapt(params, ep, inner, spec, relation)
            ref = reference_maml(params.theta, ep.x_support, ep.y_support, 3, 2, alpha, steps)
            worst = max(worst, _max_traj_diff(traj, ref))
    return worst <= 1e-6, f"max per-parameter deviation {worst:.2e} over {n_episodes} episodes x 2 variants"


# -- preconditioner identity ---------------------------------------------------

def _single_layer(omega, theta_w, theta_b, x, y, alpha):
    """One implicit step of the warped single-layer model; returns the
    effective (weight, bias) before and after."""
    spec = EncoderSpec(((x.shape[1], theta_w.shape[0]),), warped_layers=(0,), activations=("identity",))
    params = MetaParams(omega={"warp.0": omega})
    with ad.Tape() as tape:
        w, b = tape.watch(theta_w), tape.watch(theta_b)
        out = encode(params, {"enc.0.weight": w, "enc.0.bias": b}, ad.constant(x), spec)
        loss = base_loss(out, y, "squared")
        gw, gb = ad.grad(loss, [w, b])
    w1, b1 = theta_w - alpha * gw.value, theta_b - alpha * gb.value
    return (omega @ theta_w, omega @ theta_b), (omega @ w1, omega @ b1)


@_timed(3, "preconditioner identity")
def check_preconditioner(n_omega: int = 20, seed: int = 0):
    rng = np.random.default_rng(seed)
    d_in, d, n, alpha = 5, 4, 12, 0.05
    x, y = rng.normal(size=(n, d_in)), rng.normal(size=(n, d))
    worst = 0.0
    for _ in range(n_omega):
        omega = rng.normal(size=(d, d))
        tw, tb = rng.normal(size=(d, d_in)), rng.normal(size=d)
        (W, b), (W1, b1) = _single_layer(omega, tw, tb, x, y, alpha)
        # explicit: gradient w.r.t. the effective weights, preconditioned by omega omega^T
        r = 2.0 * (x @ W.T + b - y) / (n * d)
        gW, gb = r.T @ x, r.sum(axis=0)
        P = omega @ omega.T
        worst = max(worst, np.abs(W1 - (W - alpha * P @ gW)).max(), np.abs(b1 - (b - alpha * P @ gb)).max())
    # omega = sqrt(c) I scales the effective step by c
    c = 3.0
    tw, tb = rng.normal(size=(d, d_in)), rng.normal(size=d)
    (W, b), (W1, b1) = _single_layer(np.eye(d), tw, tb, x, y, alpha)
    s = math.sqrt(c)
    (Wc, bc), (Wc1, bc1) = _single_layer(s * np.eye(d), tw / s, tb / s, x, y, alpha)
    scale_err = max(np.abs((Wc1 - Wc) - c * (W1 - W)).max(), np.abs((bc1 - bc) - c * (b1 - b)).max())
    ok = worst <= 1e-6 and scale_err <= 1e-6
    return ok, f"max deviation {worst:.2e} over {n_omega} omegas; sqrt(c)I scaling error {scale_err:.2e}"


# -- loss recovery ---------------------------------------------------------------

def hand_wired_support_net(params: MetaParams, c: float) -> MetaParams:
    """phi whose inductive network outputs (c - 1) times the per-instance
    cross-entropy (its last input), so that M = c * base loss."""
    p = params.copy()
    for k in list(p.phi):
        p.phi[k] = np.zeros_like(p.phi[k])
    for k in list(p.psi):
        p.psi[k] = np.zeros_like(p.psi[k])
    w0 = p.phi["support.0.weight"]
    w0[0, -1] = 1.0
    p.phi["support.1.weight"][0, 0] = 1.0
    p.phi["support.2.weight"][0, 0] = c - 1.0
    return p


@_timed(4, "loss recovery")
def check_loss_recovery(n_episodes: int = 100, c: float = 2.5, alpha: float = 0.05):
    family = ClusterFamily(15, 5, 5, dim=6, radius=2.0, noise=1.0, seed=2)
    ts = TaskSpec("classification", 5, 3, 4, 6)
    spec = EncoderSpec.mlp(6, [10, 6])
    ext = loss_input_extents("classification", 5, 3)
    full = init_meta_params(spec, Variant(), loss_inputs=ext, seed=4, dtype=np.float64)
    zero_phi = full.map(lambda g, n, v: np.zeros_like(v) if g == "phi" else np.array(v))
    worst = 0.0
    for e in range(n_episodes):
        ep = sample_episode(family, ts, episode_rng(21, e))
        theta = initial_theta(zero_phi, 5)
        with ad.no_record():
            m = meta_loss(zero_phi, ep, theta, spec, prototype_relation_scores(ep)).item()
            logits = forward(zero_phi, theta, ad.constant(ep.x_support), spec)
            b = base_loss(logits, ep.y_support, "cross_entropy").item()
        worst = max(worst, abs(m - b))
    wired = hand_wired_support_net(init_meta_params(spec, Variant(False, False, True, False, False),
                                                    loss_inputs=ext, seed=5, dtype=np.float64), c)
    plain = MetaParams(theta={k: v.copy() for k, v in wired.theta.items()})
    traj_err = 0.0
    for e in range(5):
        ep = sample_episode(family, ts, episode_rng(22, e))
        a = adapt(wired, ep, InnerConfig(alpha=alpha, steps=5), spec)
        b = adapt(plain, ep, InnerConfig(alpha=c * alpha, steps=5), spec)
        traj_err = max(traj_err, max(float(np.abs(a.snapshot(j)[k] - b.snapshot(j)[k]).max())
                                     for j in range(len(a)) for k in a.snapshot(j)))
    ok = worst <= 1e-7 and traj_err <= 1e-6
    return ok, (f"|M(phi=0) - base| max {worst:.2e} over {n_episodes} episodes; "
                f"hand-wired trajectory vs SGD(c*alpha) max {traj_err:.2e}")


@_timed(5, "diagonal preconditioning special case")
def check_metasgd(steps: int = 5, alpha: float = 0.07):
    family = ClusterFamily(12, 6, 6, dim=8, radius=2.0, noise=1.0, seed=1)
    ts = TaskSpec("classification", 3, 2, 5, 8)
    spec = EncoderSpec.mlp(8, [16, 8])
    params = init_meta_params(spec, Variant.maml(), seed=7, dtype=np.float64)
    worst = 0.0
    for e in range(5):
        ep = sample_episode(family, ts, episode_rng(31, e))
        ref = adapt(params, ep, InnerConfig(alpha=alpha, steps=steps), spec)
        theta = {k: v.value.copy() for k, v in initial_theta(params, 3).items()}
        for j in range(steps):
            with ad.Tape() as tape:
                vs = {k: tape.watch(v) for k, v in theta.items()}
                loss = base_loss(forward(params, vs, ad.constant(ep.x_support), spec), ep.y_support,
                                 "cross_entropy")
                gs = dict(zip(vs, ad.grad(loss, list(vs.values()))))
            theta = {k: diagonal_precondition_step(theta[k], gs[k].value, np.full_like(theta[k], alpha))
                     for k in theta}
            snap = ref.snapshot(j + 1)
            worst = max(worst, max(float(np.abs(theta[k] - snap[k]).max()) for k in theta))
    return worst <= 1e-7, f"max deviation from scalar-lr SGD {worst:.2e}"


# -- permutation and batch invariances ------------------------------------------

def label_symmetric_variant() -> Variant:
    """Every component whose inputs do not depend on label order."""
    return Variant(use_warp=True, use_film=True, support_loss=False, query_loss=False, regularizer=True)


@_timed(6, "permutation invariance")
def check_permutation(n_episodes: int = 100):
    family = ClusterFamily(15, 5, 10, dim=8, radius=1.5, noise=1.0, seed=3)
    ts = TaskSpec("classification", 5, 2, 6, 8)
    spec = EncoderSpec.mlp(8, [16, 8])
    ext = loss_input_extents("classification", 5, 3)
    inner = InnerConfig(alpha=0.2, steps=5)
    rng = np.random.default_rng(0)
    mismatches, total = 0, 0
    for variant in (Variant.maml(), label_symmetric_variant()):
        params = init_meta_params(spec, variant, loss_inputs=ext, seed=8, dtype=np.float64)
        params = params.map(lambda g, n, v: v + 0.2 * rng.normal(size=v.shape) if g == "omega" else v)
        learner = NPBMLLearner(params, spec, inner, dtype=np.float64)
        for e in range(n_episodes):
            ep = sample_episode(family, ts, episode_rng(41, e), "test")
            perm = rng.permutation(5)
            a, _ = learner(ep)
            b, _ = learner(ep.relabel(perm))
            total += 1
            mismatches += a != b
    return mismatches == 0, f"{mismatches} accuracy mismatches in {total} relabeled episodes"


@_timed(7, "batch invariances")
def check_batch_invariance(n_episodes: int = 20):
    family = ClusterFamily(15, 5, 5, dim=6, radius=2.0, noise=1.0, seed=2)
    ts = TaskSpec("classification", 5, 3, 4, 6)
    spec = EncoderSpec.mlp(6, [10, 6])
    ext = loss_input_extents("classification", 5, 3)
    params = init_meta_params(spec, Variant(), loss_inputs=ext, seed=9, dtype=np.float64)
    theta = initial_theta(params, 5)
    rng = np.random.default_rng(1)

    def losses(xs, ys, xq, relation):
        with ad.no_record():
            ls = forward(params, theta, ad.constant(xs), spec)
            lq = forward(params, theta, ad.constant(xq), spec)
            s = support_loss(params, support_inputs(ls, ys, "classification")).item()
            q = query_loss(params, query_inputs(lq, relation, "classification")).item()
        return s, q

    worst = 0.0
    for e in range(n_episodes):
        ep = sample_episode(family, ts, episode_rng(51, e))
        rel = prototype_relation_scores(ep)
        s0, q0 = losses(ep.x_support, ep.y_support, ep.x_query, rel)
        ps, pq = rng.permutation(len(ep.x_support)), rng.permutation(len(ep.x_query))
        s1, q1 = losses(ep.x_support[ps], ep.y_support[ps], ep.x_query[pq], rel[pq])
        s2, q2 = losses(np.concatenate([ep.x_support] * 2), np.concatenate([ep.y_support] * 2),
                        np.concatenate([ep.x_query] * 2), np.concatenate([rel] * 2))
        worst = max(worst, abs(s1 - s0), abs(q1 - q0), abs(s2 - s0), abs(q2 - q0))
    return worst <= 1e-6, f"max change under permutation/duplication {worst:.2e}"


# -- statistical plumbing ----------------------------------------------------

@_timed(10, "confidence-interval plumbing")
def check_ci_scaling(sizes=(100, 400, 1600)):
    cfg = desk_config("tiny")
    params = initial_params(cfg, 0)
    widths, reproduced = [], 0.0
    with tempfile.TemporaryDirectory() as tmp:
        ckpt = save_checkpoint(Path(tmp) / "init.npz", params, spec={"config": cfg.to_dict()}, seed=0)
        for n in sizes:
            report, records = evaluate(ckpt, n_tasks=n, seed=0)
            widths.append(report.half_width)
            path = Path(tmp) / f"records_{n}.csv"
            from .experiment import write_records
            write_records(path, records)
            with open(path, newline="") as fh:
                acc = np.array([float(r["accuracy"]) for r in csv.DictReader(fh)])
            recomputed = 1.96 * acc.std(ddof=1) / math.sqrt(len(acc))
            reproduced = max(reproduced, abs(recomputed - report.half_width))
    ratios = [widths[i] / widths[i + 1] / math.sqrt(sizes[i + 1] / sizes[i]) for i in range(len(sizes) - 1)]
    ok = all(abs(r - 1) <= 0.2 for r in ratios) and reproduced <= 1e-12
    return ok, (f"half-widths {', '.join(f'{w:.4f}' for w in widths)}; ratio/expected "
                f"{', '.join(f'{r:.3f}' for r in ratios)}; CSV recomputation error {reproduced:.1e}")


# -- directional experiments ----------------------------------------------------

def regression_improvement(cfg: ExperimentConfig, seed: int, out_dir, n_eval: int = 100):
    """(mse0, mse1, diverged0, diverged1): query MSE after adaptation at
    meta-initialization and after meta-training on ``n_eval`` shared test tasks.
    Diverged tasks are counted and left out of the means."""
    cfg = cfg.with_seed(seed).replace(eval=dataclasses.replace(cfg.eval, n_tasks=n_eval))
    params0 = initial_params(cfg, seed)
    before = evaluate_learner(NPBMLLearner(params0, cfg.encoder_spec(), cfg.inner, _embedder(cfg), cfg.dtype),
                              cfg.family(), cfg.task_spec(), n_eval, seed)
    res = run(cfg, Path(out_dir) / f"seed_{seed}", seed)
    losses = np.array([r.loss for r in before], dtype=float)
    return float(np.nanmean(losses)), res.report.mean, int(np.isnan(losses).sum()), res.report.diverged


def _embedder(cfg):
    from .experiment import build_embedder
    return build_embedder(cfg)


def _clip_rate(run_dir) -> float:
    lines = (Path(run_dir) / "metrics.jsonl").read_text().splitlines()
    recs = [json.loads(line) for line in lines]
    steps = [r for r in recs if r["step"] > 0]
    return sum(bool(r["clipped_flag"]) for r in steps) / max(len(steps), 1)


@_timed(8, "directional learning (regression)", budget=1800)
def check_regression(out_dir, seeds=(0, 1, 2, 3, 4), cfg: ExperimentConfig | None = None):
    cfg = cfg or desk_config("sinusoid")
    t0 = time.perf_counter()
    ratios, clips, diverged = [], [], [0, 0]
    for s in seeds:
        mse0, mse1, d0, d1 = regression_improvement(cfg, s, out_dir)
        ratios.append(mse1 / mse0)
        diverged[0] += d0
        diverged[1] += d1
        clips.append(_clip_rate(Path(out_dir) / f"seed_{s}"))
    elapsed = time.perf_counter() - t0
    wins = sum(r <= 0.5 for r in ratios)
    return wins >= 4, (f"trained/initial MSE ratios {', '.join(f'{r:.3f}' for r in ratios)}; "
                       f"{wins}/{len(seeds)} at or below 0.5; diverged tasks {diverged[0]} before, {diverged[1]} after; clipped steps {100 * max(clips):.1f}% at most; "
                       f"{elapsed / 60:.1f} min")


@_timed(9, "directional ablation ordering")
def check_ablation_order(out_dir, cfg: ExperimentConfig | None = None):
    from .experiment import ablation
    cfg = cfg or desk_config("cluster")
    table = {t["row"]: t for t in ablation(cfg, out_dir, rows=(1, 5))}
    r1, r5 = table[1], table[5]
    if r1["status"] != "ok" or r5["status"] != "ok":
        return False, f"row failed: {r1.get('error') or r5.get('error')}"
    margin = r5["seed_mean"] - r1["seed_mean"]
    hw = r1["seed_mean_half_width"]
    return margin >= -hw, (f"variant (5) {100 * r5['seed_mean']:.2f}% vs variant (1) "
                           f"{100 * r1['seed_mean']:.2f}% +- {100 * hw:.2f}%; margin {100 * margin:+.2f} points")


FAST_CHECKS = (check_meta_gradient, check_maml_equivalence, check_preconditioner, check_loss_recovery,
               check_metasgd, check_permutation, check_batch_invariance, check_ci_scaling)


def run_checks(full: bool = False, out_dir=None) -> list[CheckResult]:
    results = [c() for c in FAST_CHECKS]
    if full:
        out = Path(out_dir or tempfile.mkdtemp(prefix="npbml-check-"))
        results.append(check_regression(out / "regression"))
        results.append(check_ablation_order(out / "ablation"))
    return sorted(results, key=lambda r: r.criterion)
