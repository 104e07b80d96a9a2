"""Meta-training: meta-batches of episodes, final query losses, Adam on all
meta-parameters."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import ad
from .inner import DivergenceError, InnerConfig, adapt
from .losses import EpisodeContext, base_loss
from .model import EncoderSpec, MetaParams, forward, load_checkpoint, save_checkpoint
from .tasks import Episode

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetaConfig:
    eta: float = 1e-3
    meta_batch: int = 4
    steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 10.0
    val_interval: int = 100
    val_episodes: int = 50
    seed: int = 0

    def __post_init__(self):
        if not self.eta >= 0:
            raise ValueError("eta must be non-negative")
        if self.meta_batch < 1:
            raise ValueError("meta_batch must be >= 1")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros(cls, params: MetaParams, keys: Sequence[str] | None = None) -> AdamState:
        flat = params.flat()
        keys = flat.keys() if keys is None else keys
        return cls({k: np.zeros_like(flat[k]) for k in keys},
                   {k: np.zeros_like(flat[k]) for k in keys}, 0)


class AllEpisodesDiverged(RuntimeError):
    pass


def trainable_keys(params: MetaParams, spec: EncoderSpec) -> list[str]:
    """Flat keys updated by the outer loop (frozen encoder layers excluded)."""
    frozen = {f"theta/enc.{i}.{p}" for i in spec.frozen_layers for p in ("weight", "bias")}
    return [k for k in params.flat() if k not in frozen]


@dataclass
class EpisodeResult:
    loss: float
    accuracy: float | None
    grads: dict | None = None


def query_accuracy(logits: np.ndarray, episode: Episode) -> float | None:
    if episode.kind != "classification":
        return None
    return float((np.argmax(logits, axis=1) == episode.y_query).mean())


def episode_objective(params: MetaParams, episode: Episode, inner: InnerConfig, spec: EncoderSpec,
                      relation=None, keys: Sequence[str] | None = None,
                      with_grad: bool = True) -> EpisodeResult:
    """Final query loss of one episode after adaptation, and optionally its
    gradient w.r.t. the meta-parameters named by ``keys``."""
    dtype = np.asarray(params.theta["head.weight"]).dtype
    ctx = EpisodeContext(episode, dtype, relation)
    if not with_grad:
        traj = adapt(params, ctx, inner, spec)
        with ad.no_record():
            logits = forward(params, traj.final, ad.constant(episode.x_query, dtype), spec)
            loss = base_loss(logits, ctx.y_query, ctx.base_kind)
        _check_final(loss.item(), inner)
        return EpisodeResult(loss.item(), query_accuracy(logits.value, episode))

    keys = list(params.flat()) if keys is None else list(keys)
    wanted = set(keys)
    with ad.Tape() as tape:
        leaves = {}

        def watch(g, n, v):
            k = f"{g}/{n}"
            if k in wanted:
                leaves[k] = tape.watch(v)
                return leaves[k]
            return v

        tracked = params.map(watch)
        traj = adapt(tracked, ctx, inner, spec)
        logits = forward(tracked, traj.final, ad.constant(episode.x_query, dtype), spec)
        loss = base_loss(logits, ctx.y_query, ctx.base_kind)
        value = loss.item()
        _check_final(value, inner)
        grads = ad.grad(loss, [leaves[k] for k in keys])
    return EpisodeResult(value, query_accuracy(logits.value, episode),
                         {k: g.value for k, g in zip(keys, grads)})


def _check_final(value: float, inner: InnerConfig) -> None:
    # the query loss after adaptation obeys the same threshold as the inner loop
    if not math.isfinite(value) or abs(value) > inner.divergence_threshold:
        raise DivergenceError(inner.steps, value)


Embedder = Callable[[Episode], np.ndarray]


def _relation(embedder: Embedder | None, episode: Episode):
    return None if embedder is None else embedder(episode)


def meta_objective(params: MetaParams, episodes: Sequence[Episode], inner: InnerConfig,
                   spec: EncoderSpec, embedder: Embedder | None = None) -> float:
    """Mean final query loss over ``episodes`` (diverged episodes dropped)."""
    if not episodes:
        raise ValueError("meta_objective needs at least one episode")
    losses = []
    for ep in episodes:
        try:
            losses.append(episode_objective(params, ep, inner, spec, _relation(embedder, ep),
                                            with_grad=False).loss)
        except DivergenceError as err:
            log.warning("dropping episode: %s", err)
    if not losses:
        raise AllEpisodesDiverged("every episode in the meta-batch diverged")
    return float(np.mean(losses))


def meta_gradient(params: MetaParams, episodes: Sequence[Episode], inner: InnerConfig,
                  spec: EncoderSpec, embedder: Embedder | None = None,
                  keys: Sequence[str] | None = None) -> tuple[float, dict, list[EpisodeResult]]:
    """Mean query loss and its gradient, reduced over per-episode tapes."""
    keys = trainable_keys(params, spec) if keys is None else list(keys)
    results = []
    for ep in episodes:
        try:
            # overflow inside a runaway inner loop is caught as DivergenceError below
            with np.errstate(over="ignore", invalid="ignore"):
                results.append(episode_objective(params, ep, inner, spec, _relation(embedder, ep), keys))
        except DivergenceError as err:
            log.warning("dropping episode: %s", err)
    if not results:
        raise AllEpisodesDiverged("every episode in the meta-batch diverged")
    grads = {k: np.mean([r.grads[k] for r in results], axis=0) for k in keys}
    return float(np.mean([r.loss for r in results])), grads, results


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def adam_update(params: MetaParams, state: AdamState, grads: dict, meta: MetaConfig) -> tuple[MetaParams, AdamState]:
    flat = params.copy().flat()
    m, v = dict(state.m), dict(state.v)
    t = state.step + 1
    b1, b2 = meta.beta1, meta.beta2
    for k, g in grads.items():
        m[k] = b1 * m[k] + (1 - b1) * g
        v[k] = b2 * v[k] + (1 - b2) * g * g
        mhat = m[k] / (1 - b1 ** t)
        vhat = v[k] / (1 - b2 ** t)
        flat[k] = (flat[k] - meta.eta * mhat / (np.sqrt(vhat) + meta.eps)).astype(flat[k].dtype)
    return MetaParams.from_flat(flat), AdamState(m, v, t)


def meta_step(params: MetaParams, state: AdamState, episodes: Sequence[Episode], inner: InnerConfig,
              meta: MetaConfig, spec: EncoderSpec, embedder: Embedder | None = None):
    """One outer update. Returns (params', state', info)."""
    keys = list(state.m)
    loss, grads, results = meta_gradient(params, episodes, inner, spec, embedder, keys)
    norm = global_norm(grads)
    info = {"meta_loss": loss, "grad_norm": norm, "clipped": False, "skipped": False,
            "episodes_used": len(results)}
    if not math.isfinite(norm):
        log.warning("non-finite meta-gradient; update skipped")
        info["skipped"] = True
        return params, state, info
    if meta.clip_norm and norm > meta.clip_norm:
        factor = meta.clip_norm / norm
        grads = {k: g * factor for k, g in grads.items()}
        info["clipped"] = True
    new_params, new_state = adam_update(params, state, grads, meta)
    return new_params, new_state, info


def evaluate_episodes(params: MetaParams, episodes: Sequence[Episode], inner: InnerConfig,
                      spec: EncoderSpec, embedder: Embedder | None = None) -> list[EpisodeResult]:
    out = []
    for ep in episodes:
        try:
            out.append(episode_objective(params, ep, inner, spec, _relation(embedder, ep),
                                         with_grad=False))
        except DivergenceError as err:
            log.warning("evaluation episode diverged: %s", err)
            out.append(EpisodeResult(float("nan"), 0.0 if ep.kind == "classification" else None))
    return out


def _summary(results: list[EpisodeResult]) -> tuple[float, float | None]:
    losses = [r.loss for r in results if math.isfinite(r.loss)]
    accs = [r.accuracy for r in results if r.accuracy is not None]
    return (float(np.mean(losses)) if losses else float("nan"),
            float(np.mean(accs)) if accs else None)


def meta_train(params: MetaParams, spec: EncoderSpec, inner: InnerConfig, meta: MetaConfig,
               sample_train: Callable[[int, int], Episode], val_episodes: Sequence[Episode],
               embedder: Embedder | None = None, out_dir=None, resume: bool = True,
               header: dict | None = None) -> tuple[MetaParams, list[dict]]:
    """Run ``meta.steps`` outer updates with periodic validation.

    ``sample_train(step, i)`` returns the i-th episode of meta-step ``step``,
    so a resumed run sees the same task stream. With ``out_dir`` the best
    validation checkpoint goes to ``best.npz``, resumable state to
    ``state.npz`` and the step log to ``metrics.jsonl``.
    """
    out = Path(out_dir) if out_dir is not None else None
    state = AdamState.zeros(params, trainable_keys(params, spec))
    records: list[dict] = []
    best_val = math.inf
    start = 0
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume and (out / "state.npz").exists():
            params, state, start, best_val, records = _load_state(out / "state.npz", out / "metrics.jsonl")

    def validate(p):
        return _summary(evaluate_episodes(p, val_episodes, inner, spec, embedder))

    def write_state(step):
        if out is None:
            return
        extra = {f"adam_m/{k}": v for k, v in state.m.items()}
        extra.update({f"adam_v/{k}": v for k, v in state.v.items()})
        extra["adam_step"] = np.array(state.step)
        extra["next_step"] = np.array(step)
        extra["best_val"] = np.array(best_val)
        save_checkpoint(out / "state.npz", params, spec=header, seed=meta.seed, extra=extra)
        with open(out / "metrics.jsonl", "w") as fh:
            for r in records:
                fh.write(json.dumps(r) + "\n")

    if start == 0:
        val_loss, val_acc = validate(params)
        records.append({"step": 0, "meta_loss": None, "val_loss": val_loss, "val_accuracy": val_acc,
                        "grad_norm": None, "clipped_flag": False})
        best_val = val_loss
        if out is not None:
            save_checkpoint(out / "best.npz", params, spec=header, seed=meta.seed)
        write_state(0)

    for step in range(start, meta.steps):
        episodes = [sample_train(step, i) for i in range(meta.meta_batch)]
        try:
            params, state, info = meta_step(params, state, episodes, inner, meta, spec, embedder)
        except AllEpisodesDiverged as err:
            log.warning("meta-step %d skipped: %s", step, err)
            info = {"meta_loss": float("nan"), "grad_norm": float("nan"), "clipped": False,
                    "skipped": True, "episodes_used": 0}
        rec = {"step": step + 1, "meta_loss": info["meta_loss"], "val_loss": None,
               "val_accuracy": None, "grad_norm": info["grad_norm"], "clipped_flag": info["clipped"],
               "episodes_used": info["episodes_used"], "skipped": info["skipped"]}
        last = step + 1 == meta.steps
        if meta.val_interval and ((step + 1) % meta.val_interval == 0 or last):
            rec["val_loss"], rec["val_accuracy"] = validate(params)
            if rec["val_loss"] < best_val:
                best_val = rec["val_loss"]
                if out is not None:
                    save_checkpoint(out / "best.npz", params, spec=header, seed=meta.seed)
        records.append(rec)
        if out is not None and (rec["val_loss"] is not None or last):
            write_state(step + 1)
    return params, records


def _load_state(path: Path, metrics_path: Path):
    params, _, extra = load_checkpoint(path)
    m = {k[len("adam_m/"):]: v for k, v in extra.items() if k.startswith("adam_m/")}
    v = {k[len("adam_v/"):]: val for k, val in extra.items() if k.startswith("adam_v/")}
    state = AdamState(m, v, int(extra["adam_step"]))
    records = []
    if metrics_path.exists():
        records = [json.loads(line) for line in metrics_path.read_text().splitlines() if line.strip()]
    return params, state, int(extra["next_step"]), float(extra["best_val"]), records
