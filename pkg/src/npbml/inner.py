"""Differentiable base-learning: J unrolled steps of the meta-learned update rule."""

from __future__ import annotations

import math
from contextlib import nullcontext
from dataclasses import dataclass, field

import numpy as np

from . import ad
from .ad import Var
from .losses import EpisodeContext, meta_loss_terms
from .model import EncoderSpec, MetaParams, adapted_names, initial_theta
from .tasks import Episode


class DivergenceError(RuntimeError):
    def __init__(self, step: int, value: float):
        self.step = step
        self.value = value
        super().__init__(f"inner loop diverged at step {step}: loss={value!r}")


@dataclass(frozen=True)
class InnerConfig:
    alpha: float = 0.01
    steps: int = 5
    momentum: float = 0.0
    nesterov: bool = True
    weight_decay: float = 0.0
    first_order: bool = False
    divergence_threshold: float = 1e6

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")


@dataclass
class Trajectory:
    """theta_0 .. theta_J plus the support losses seen at each step."""

    thetas: list[dict[str, Var]] = field(default_factory=list)
    base_losses: list[float] = field(default_factory=list)
    meta_losses: list[float] = field(default_factory=list)

    @property
    def final(self) -> dict[str, Var]:
        return self.thetas[-1]

    def snapshot(self, j: int) -> dict[str, np.ndarray]:
        return {k: np.array(v.value) for k, v in self.thetas[j].items()}

    def __len__(self):
        return len(self.thetas)


def materialize_preconditioner(omega) -> np.ndarray:
    """The block ``omega @ omega.T`` that a fixed warp layer induces."""
    w = np.asarray(getattr(omega, "value", omega))
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValueError(f"warp matrix must be square, got {w.shape}")
    return w @ w.T


def diagonal_precondition_step(theta, grad, per_param_lr):
    """``theta - lr * grad`` elementwise (MetaSGD-style diagonal step)."""
    if isinstance(theta, Var) or isinstance(grad, Var) or isinstance(per_param_lr, Var):
        lr = per_param_lr if isinstance(per_param_lr, Var) else ad.constant(per_param_lr, theta.dtype)
        return ad.sub(theta, ad.mul(lr, grad))
    theta, grad, lr = np.asarray(theta), np.asarray(grad), np.asarray(per_param_lr)
    if not theta.shape == grad.shape == lr.shape:
        raise ad.ShapeError("diagonal_precondition_step", theta.shape, grad.shape, lr.shape)
    return theta - lr * grad


def _is_tracked(params: MetaParams) -> bool:
    return any(isinstance(v, Var) and v.node is not None for _, _, v in params.items())


def adapt(params: MetaParams, episode: Episode | EpisodeContext, config: InnerConfig,
          spec: EncoderSpec, relation=None, *, create_graph: bool | None = None) -> Trajectory:
    """Run the inner loop on the support set of one episode.

    omega, phi and psi stay fixed; only the adapted layers of theta move. When
    ``params`` are tracked on the active tape the whole trajectory stays
    differentiable with respect to them (unless ``first_order``).
    ``create_graph`` defaults to exactly that condition.
    """
    tracked = _is_tracked(params)
    if create_graph is None:
        create_graph = tracked and not config.first_order
    dtype = np.asarray(getattr(params.theta["head.weight"], "value",
                               params.theta["head.weight"])).dtype
    ctx = episode if isinstance(episode, EpisodeContext) else EpisodeContext(episode, dtype, relation)

    scope = nullcontext(ad.active_tape()) if ad.active_tape() is not None else ad.Tape()
    with scope as tape:
        theta = initial_theta(params, ctx.episode.n_out)
        names = adapted_names(spec)
        for n in names:
            if theta[n].node is None:
                theta[n] = tape.watch(theta[n].value)
        traj = Trajectory(thetas=[dict(theta)])
        buffers: dict[str, Var] = {}
        for j in range(config.steps):
            terms = meta_loss_terms(params, ctx, theta, spec)
            value = terms.total.item()
            if not math.isfinite(value) or abs(value) > config.divergence_threshold:
                raise DivergenceError(j, value)
            traj.base_losses.append(terms.base.item())
            traj.meta_losses.append(value)
            grads = ad.grad(terms.total, [theta[n] for n in names], create_graph=create_graph)
            new = dict(theta)
            for n, g in zip(names, grads):
                p = theta[n]
                if config.weight_decay:
                    g = ad.add(g, ad.scale(p, config.weight_decay))
                if config.momentum:
                    buf = g if n not in buffers else ad.add(ad.scale(buffers[n], config.momentum), g)
                    buffers[n] = buf
                    g = ad.add(g, ad.scale(buf, config.momentum)) if config.nesterov else buf
                new[n] = ad.sub(p, ad.scale(g, config.alpha))
            theta = new
            traj.thetas.append(dict(theta))
    return traj
