"""Meta-learned loss: base loss plus the inductive, transductive and
weight-regularizer networks, each optionally FiLM-modulated."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import ad
from .ad import Var
from .model import EncoderSpec, MetaParams, film, film_generator, forward
from .tasks import Episode

LOSS_NETS = ("support", "query", "reg")
STAT_EPS = 1e-12


def _var(v) -> Var:
    return v if isinstance(v, Var) else Var(np.asarray(v))


def loss_input_extents(kind: str, n_way: int, n_reg_layers: int) -> dict[str, int]:
    """Input widths of the three networks for a task of the given kind."""
    width = 2 * n_way + 1 if kind == "classification" else 3
    return {"support": width, "query": width, "reg": 4 * n_reg_layers}


def per_instance_base_loss(predictions: Var, targets, kind: str) -> Var:
    """(n, 1) column of per-instance losses."""
    n = predictions.shape[0]
    if kind == "cross_entropy":
        onehot = targets if isinstance(targets, Var) else ad.one_hot(targets, predictions.shape[1],
                                                                     predictions.dtype)
        nll = ad.neg(ad.sum(ad.mul(onehot, ad.log_softmax(predictions, 1)), axis=1))
        return ad.reshape(nll, (n, 1))
    if kind == "squared":
        diff = ad.sub(predictions, _var(targets))
        return ad.reshape(ad.mean(ad.square(diff), axis=1), (n, 1))
    raise ValueError(f"unknown base loss {kind!r}")


def base_loss(predictions: Var, targets, kind: str) -> Var:
    """Mean-reduced cross-entropy (logits vs labels) or squared error."""
    return ad.mean(per_instance_base_loss(predictions, targets, kind))


def loss_network(params: MetaParams, net: str, inputs: Var) -> Var:
    """Apply one loss network row-wise: (n, in) -> (n, 1).

    Hidden layers are linear -> FiLM (when allocated) -> ReLU; the output
    layer is linear with identity activation.
    """
    h = inputs
    k = 0
    while f"{net}.{k + 1}.weight" in params.phi:
        w = params.phi[f"{net}.{k}.weight"]
        if h.shape[1] != np.shape(getattr(w, "value", w))[1]:
            raise ad.ShapeError(f"{net} loss network", h.shape, np.shape(getattr(w, "value", w)))
        h = ad.linear(h, _var(w), _var(params.phi[f"{net}.{k}.bias"]))
        gen = film_generator(params, f"film.{net}.{k}")
        if gen is not None:
            h = film(h, gen)
        h = ad.relu(h)
        k += 1
    return ad.linear(h, _var(params.phi[f"{net}.{k}.weight"]), _var(params.phi[f"{net}.{k}.bias"]))


def support_inputs(predictions: Var, targets, kind: str) -> Var:
    """Per support instance: [target, prediction, base loss]."""
    if kind == "classification":
        onehot = targets if isinstance(targets, Var) else ad.one_hot(targets, predictions.shape[1],
                                                                     predictions.dtype)
        probs = ad.softmax(predictions, 1)
        loss = per_instance_base_loss(predictions, onehot, "cross_entropy")
        return ad.concat([onehot, probs, loss], axis=1)
    t = _var(targets)
    return ad.concat([t, predictions, per_instance_base_loss(predictions, t, "squared")], axis=1)


def query_inputs(predictions: Var, relation, kind: str) -> Var:
    """Per query instance: [prediction, relation scores, squared distance].

    Relation scores are constants; no gradient reaches the embedder.
    """
    rel = ad.constant(relation, predictions.dtype)
    pred = ad.softmax(predictions, 1) if kind == "classification" else predictions
    if rel.shape != pred.shape:
        raise ad.ShapeError("query loss inputs", pred.shape, rel.shape)
    return ad.concat([pred, rel, per_instance_base_loss(pred, rel, "squared")], axis=1)


def layer_stats(weight) -> Var:
    """[mean, std, L1, L2] of a weight tensor, shape (4,). Population std."""
    w = _var(weight)
    mu = ad.mean(w)
    centred = ad.sub(w, ad.fill(ad.reshape(mu, (1,) * w.ndim), w.shape))
    std = ad.sqrt(ad.add_scalar(ad.mean(ad.square(centred)), STAT_EPS))
    l1 = ad.sum(ad.abs(w))
    l2 = ad.sqrt(ad.add_scalar(ad.sum(ad.square(w)), STAT_EPS))
    return ad.concat([ad.reshape(s, (1,)) for s in (mu, std, l1, l2)], axis=0)


def regularizer_inputs(theta: Mapping[str, Var], layers: Sequence[str]) -> Var:
    """(1, 4L) row of layer statistics with the norms divided by their
    value at unit-magnitude weights (L1 by n, L2 by sqrt(n)).

    Raw norms of a wide layer are in the hundreds, which the quadratic FiLM
    layers of the network turn into a divergent inner loop.
    """
    stats = []
    for name in layers:
        n = theta[name].size
        norm = np.array([1.0, 1.0, 1.0 / n, 1.0 / np.sqrt(n)], dtype=theta[name].dtype)
        stats.append(ad.mul(layer_stats(theta[name]), Var(norm)))
    return ad.reshape(ad.concat(stats, axis=0), (1, 4 * len(layers)))


def support_loss(params: MetaParams, inputs: Var) -> Var:
    return ad.mean(loss_network(params, "support", inputs))


def query_loss(params: MetaParams, inputs: Var) -> Var:
    return ad.mean(loss_network(params, "query", inputs))


def weight_regularizer(params: MetaParams, theta: Mapping[str, Var], layers: Sequence[str]) -> Var:
    return ad.mean(loss_network(params, "reg", regularizer_inputs(theta, layers)))


def regularized_layers(spec: EncoderSpec) -> list[str]:
    """Weight tensors summarised for the regularizer: adapted layers and head."""
    return [f"enc.{i}.weight" for i in spec.adapted_layers] + ["head.weight"]


def has_net(params: MetaParams, net: str) -> bool:
    return f"{net}.0.weight" in params.phi


@dataclass
class LossTerms:
    total: Var
    base: Var
    support: Var | None = None
    query: Var | None = None
    reg: Var | None = None


class EpisodeContext:
    """Constants of one episode prepared once for repeated loss evaluation."""

    def __init__(self, episode: Episode, dtype, relation=None):
        self.episode = episode
        self.kind = episode.kind
        self.n_support = len(episode.x_support)
        self.x_all = ad.constant(np.concatenate([episode.x_support, episode.x_query]), dtype)
        if episode.kind == "classification":
            self.base_kind = "cross_entropy"
            self.y_support = ad.one_hot(episode.y_support, episode.n_way, dtype)
            self.y_query = ad.one_hot(episode.y_query, episode.n_way, dtype)
        else:
            self.base_kind = "squared"
            self.y_support = ad.constant(episode.y_support, dtype)
            self.y_query = ad.constant(episode.y_query, dtype)
        self.relation = None if relation is None else np.asarray(relation, dtype=dtype)

    def split(self, logits: Var) -> tuple[Var, Var]:
        n = self.n_support
        return logits[:n], logits[n:]


def meta_loss_terms(params: MetaParams, ctx: EpisodeContext, theta: Mapping[str, Var],
                    spec: EncoderSpec) -> LossTerms:
    logits = forward(params, theta, ctx.x_all, spec)
    ls, lq = ctx.split(logits)
    base = base_loss(ls, ctx.y_support, ctx.base_kind)
    terms = LossTerms(total=base, base=base)
    total = base
    if has_net(params, "support"):
        terms.support = support_loss(params, support_inputs(ls, ctx.y_support, ctx.kind))
        total = ad.add(total, terms.support)
    if has_net(params, "query"):
        if ctx.relation is None:
            raise ValueError("query loss network needs relation scores for the episode")
        terms.query = query_loss(params, query_inputs(lq, ctx.relation, ctx.kind))
        total = ad.add(total, terms.query)
    if has_net(params, "reg"):
        terms.reg = weight_regularizer(params, theta, regularized_layers(spec))
        total = ad.add(total, terms.reg)
    terms.total = total
    return terms


def meta_loss(params: MetaParams, episode: Episode, theta: Mapping[str, Var], spec: EncoderSpec,
              relation=None) -> Var:
    """Base loss on the support set plus every allocated learned term."""
    dtype = np.asarray(getattr(theta["head.weight"], "value", theta["head.weight"])).dtype
    return meta_loss_terms(params, EpisodeContext(episode, dtype, relation), theta, spec).total
