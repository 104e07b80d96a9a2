"""Episodic task distributions, relation-score surrogates and encoder pre-training."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ad
from .model import EncoderSpec, MetaParams, encode

SPLITS = ("train", "val", "test")


class TaskError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "classification"
    n_way: int = 5
    k_shot: int = 5
    query_per_class: int = 15
    input_dim: int = 32

    def __post_init__(self):
        if self.kind not in ("classification", "regression"):
            raise TaskError(f"unknown task kind {self.kind!r}")
        if self.kind == "classification" and self.n_way < 2:
            raise TaskError("classification needs n_way >= 2")
        if self.k_shot < 1 or self.query_per_class < 1:
            raise TaskError("k_shot and query_per_class must be positive")

    @property
    def n_out(self) -> int:
        return self.n_way if self.kind == "classification" else 1


@dataclass
class Episode:
    """One task: disjoint support and query draws.

    Classification targets are local labels 0..N-1; ``classes`` maps them
    back to the family's global ids. Regression targets are (n, 1) floats.
    """

    x_support: np.ndarray
    y_support: np.ndarray
    x_query: np.ndarray
    y_query: np.ndarray
    kind: str = "classification"
    n_way: int = 1
    classes: np.ndarray | None = None
    task_params: dict = field(default_factory=dict)

    @property
    def n_out(self) -> int:
        return self.n_way if self.kind == "classification" else 1

    def astype(self, dtype) -> Episode:
        ys = self.y_support if self.kind == "classification" else self.y_support.astype(dtype)
        yq = self.y_query if self.kind == "classification" else self.y_query.astype(dtype)
        return Episode(self.x_support.astype(dtype), ys, self.x_query.astype(dtype), yq,
                       self.kind, self.n_way, self.classes, dict(self.task_params))

    def relabel(self, perm) -> Episode:
        """Same task with local label c renamed to perm[c]."""
        if self.kind != "classification":
            raise TaskError("only classification episodes can be relabelled")
        perm = np.asarray(perm)
        classes = None
        if self.classes is not None:
            classes = np.empty_like(self.classes)
            classes[perm] = self.classes
        return Episode(self.x_support, perm[self.y_support], self.x_query, perm[self.y_query],
                       self.kind, self.n_way, classes, dict(self.task_params))


@dataclass(frozen=True)
class SinusoidFamily:
    amplitude: tuple[float, float] = (0.1, 5.0)
    phase: tuple[float, float] = (0.0, float(np.pi))
    x_range: tuple[float, float] = (-5.0, 5.0)
    noise: float = 0.1

    def __post_init__(self):
        for name in ("amplitude", "phase", "x_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise TaskError(f"degenerate {name} range {(lo, hi)}")

    kind = "regression"


class ClusterFamily:
    """Gaussian classes with means on a scaled hypersphere.

    The ``n_classes`` pool is partitioned into disjoint train/val/test
    class sets. Immutable after construction.
    """

    kind = "classification"

    def __init__(self, n_train: int = 60, n_val: int = 16, n_test: int = 20, dim: int = 32,
                 radius: float = 3.0, noise: float = 1.0, seed: int = 1234):
        self.n_train, self.n_val, self.n_test = int(n_train), int(n_val), int(n_test)
        self.dim, self.radius, self.noise, self.seed = int(dim), float(radius), float(noise), int(seed)
        total = self.n_train + self.n_val + self.n_test
        rng = np.random.default_rng(seed)
        dirs = rng.normal(size=(total, self.dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        self._means = dirs * self.radius
        self._means.setflags(write=False)
        order = rng.permutation(total)
        self._pools = {
            "train": np.sort(order[:self.n_train]),
            "val": np.sort(order[self.n_train:self.n_train + self.n_val]),
            "test": np.sort(order[self.n_train + self.n_val:]),
        }
        for p in self._pools.values():
            p.setflags(write=False)

    @property
    def n_classes(self) -> int:
        return len(self._means)

    @property
    def means(self) -> np.ndarray:
        return self._means

    def pool(self, split: str) -> np.ndarray:
        if split not in self._pools:
            raise TaskError(f"unknown split {split!r}")
        return self._pools[split]

    def draw(self, classes, n_each: int, rng) -> np.ndarray:
        """(len(classes) * n_each, dim) points, grouped by class."""
        classes = np.asarray(classes)
        mu = np.repeat(self._means[classes], n_each, axis=0)
        return mu + self.noise * rng.normal(size=mu.shape)

    def to_dict(self) -> dict:
        return {"name": "cluster", "n_train": self.n_train, "n_val": self.n_val,
                "n_test": self.n_test, "dim": self.dim, "radius": self.radius,
                "noise": self.noise, "seed": self.seed}


def sample_episode(family, spec: TaskSpec, rng: np.random.Generator, split: str = "train") -> Episode:
    if isinstance(family, SinusoidFamily):
        if spec.kind != "regression" or spec.input_dim != 1:
            raise TaskError("sinusoid tasks need kind=regression and input_dim=1")
        amp = rng.uniform(*family.amplitude)
        phase = rng.uniform(*family.phase)
        n_s, n_q = spec.k_shot, spec.query_per_class
        x = rng.uniform(*family.x_range, size=(n_s + n_q, 1))
        y = amp * np.sin(x - phase) + family.noise * rng.normal(size=x.shape)
        return Episode(x[:n_s], y[:n_s], x[n_s:], y[n_s:], "regression", 1,
                       task_params={"amplitude": amp, "phase": phase})
    if isinstance(family, ClusterFamily):
        if spec.kind != "classification" or spec.input_dim != family.dim:
            raise TaskError(f"cluster tasks need kind=classification and input_dim={family.dim}")
        pool = family.pool(split)
        if len(pool) < spec.n_way:
            raise TaskError(f"{split} pool has {len(pool)} classes, need {spec.n_way}")
        classes = rng.choice(pool, size=spec.n_way, replace=False)
        k, q = spec.k_shot, spec.query_per_class
        xs = family.draw(classes, k, rng)
        xq = family.draw(classes, q, rng)
        ys = np.repeat(np.arange(spec.n_way), k)
        yq = np.repeat(np.arange(spec.n_way), q)
        return Episode(xs, ys, xq, yq, "classification", spec.n_way, classes)
    raise TaskError(f"unsupported family {type(family).__name__}")


def episode_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for one (seed, stream...) coordinate."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, stream)]))


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def plain_encode(theta: dict, x: np.ndarray, spec: EncoderSpec) -> np.ndarray:
    """Numpy-only encoder pass without warp or FiLM layers."""
    with ad.no_record():
        return encode(MetaParams(), {k: ad.constant(v) for k, v in theta.items()},
                      ad.constant(x), spec).value


def prototype_relation_scores(episode: Episode, encoder_params: dict | None = None,
                              spec: EncoderSpec | None = None) -> np.ndarray:
    """Softmax over negative squared distances from each query point to the
    class prototypes (mean support embeddings). Shape (n_query, N)."""
    if episode.kind != "classification":
        raise TaskError("prototype scores need a classification episode")
    xs, xq = episode.x_support, episode.x_query
    if encoder_params is not None:
        xs = plain_encode(encoder_params, xs, spec)
        xq = plain_encode(encoder_params, xq, spec)
    protos = np.stack([xs[episode.y_support == c].mean(axis=0) for c in range(episode.n_way)])
    d2 = ((xq[:, None, :] - protos[None, :, :]) ** 2).sum(axis=-1)
    return _softmax_rows(-d2)


def kernel_smoother_scores(episode: Episode, bandwidth: float = 1.0) -> np.ndarray:
    """Regression counterpart of the relation scores: a Nadaraya-Watson
    estimate of each query target from the support set. Shape (n_query, 1)."""
    d2 = ((episode.x_query[:, None, :] - episode.x_support[None, :, :]) ** 2).sum(axis=-1)
    w = _softmax_rows(-d2 / (2 * bandwidth ** 2))
    return w @ episode.y_support.reshape(len(episode.y_support), -1)


class RelationEmbedder:
    """Pluggable source of the per-query relation inputs of the query loss."""

    def __init__(self, encoder_params: dict | None = None, spec: EncoderSpec | None = None,
                 bandwidth: float = 1.0):
        self.encoder_params = encoder_params
        self.spec = spec
        self.bandwidth = bandwidth

    def __call__(self, episode: Episode) -> np.ndarray:
        if episode.kind == "classification":
            return prototype_relation_scores(episode, self.encoder_params, self.spec)
        return kernel_smoother_scores(episode, self.bandwidth)


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 500
    batch_size: int = 128
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005


def pretrain_encoder(family: ClusterFamily, spec: EncoderSpec, config: PretrainConfig = PretrainConfig(),
                     seed: int = 0, init: dict | None = None) -> tuple[dict, dict]:
    """Train the encoder plus a temporary all-classes head with cross-entropy
    on the meta-train pool. Returns (encoder weights, info)."""
    if not isinstance(family, ClusterFamily):
        raise TaskError("pre-training needs a classification family")
    rng = episode_rng(seed, 7_000)
    if init is None:
        from .model import Variant, init_meta_params
        init = {k: v for k, v in init_meta_params(spec, Variant.maml(), seed=seed,
                                                    dtype=np.float64).theta.items()
                if k.startswith("enc.")}
    theta = {k: np.array(v, dtype=np.float64) for k, v in init.items()}
    pool = family.pool("train")
    C, feat = len(pool), spec.feature_dim
    head_w = rng.normal(0, 1 / np.sqrt(feat), (C, feat))
    head_b = np.zeros(C)
    names = sorted(theta)
    bufs: dict[str, np.ndarray] = {}
    losses = []
    for step in range(config.steps):
        labels = rng.integers(0, C, size=config.batch_size)
        x = family.means[pool[labels]] + family.noise * rng.normal(size=(config.batch_size, family.dim))
        with ad.Tape() as tape:
            vs = {k: tape.watch(theta[k]) for k in names}
            hw, hb = tape.watch(head_w), tape.watch(head_b)
            z = encode(MetaParams(), vs, ad.constant(x), spec)
            logits = ad.linear(z, hw, hb)
            loss = -ad.mean(ad.sum(ad.mul(ad.one_hot(labels, C), ad.log_softmax(logits, 1)), axis=1))
            grads = ad.grad(loss, [vs[k] for k in names] + [hw, hb])
        losses.append(loss.item())
        current = [theta[k] for k in names] + [head_w, head_b]
        keys = names + ["__head_w", "__head_b"]
        for key, p, g in zip(keys, current, grads):
            g = g.value + config.weight_decay * p
            buf = bufs[key] = g if key not in bufs else config.momentum * bufs[key] + g
            p -= config.lr * (g + config.momentum * buf)

    # accuracy of the C-way problem on fresh draws
    labels = rng.integers(0, C, size=2000)
    x = family.means[pool[labels]] + family.noise * rng.normal(size=(2000, family.dim))
    logits = plain_encode(theta, x, spec) @ head_w.T + head_b
    acc = float((logits.argmax(axis=1) == labels).mean())
    return theta, {"accuracy": acc, "final_loss": losses[-1] if losses else None, "steps": config.steps}
