"""Base learner: fully connected encoder with warp and FiLM layers plus a
permutation-invariant head, and the container for all meta-parameters."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from . import ad
from .ad import Var

CHECKPOINT_VERSION = 1
GROUPS = ("theta", "omega", "phi", "psi")
PSI_STD = 0.1  # N(0, 1e-2) is a variance of 1e-2
PHI_STD = 0.1

ACTIVATIONS = {
    "relu": ad.relu,
    "leaky_relu": ad.leaky_relu,
    "identity": ad.identity,
}


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class Variant:
    """Which procedural biases are meta-learned beyond the initialization.

    All flags off is MAML with a single-vector head.
    """

    use_warp: bool = True
    use_film: bool = True
    support_loss: bool = True
    query_loss: bool = True
    regularizer: bool = True

    @property
    def use_meta_loss(self) -> bool:
        return self.support_loss or self.query_loss or self.regularizer

    @classmethod
    def maml(cls) -> Variant:
        return cls(False, False, False, False, False)


@dataclass(frozen=True)
class EncoderSpec:
    """Layer layout of the encoder.

    Layer indices are 0-based; negative indices count from the end.
    ``adapt_policy`` of None adapts every layer. Layers outside the policy
    are also excluded from the outer loop when ``freeze_unadapted`` is set.
    """

    layer_dims: tuple[tuple[int, int], ...]
    warped_layers: tuple[int, ...] = (-1,)
    activations: tuple[str, ...] | None = None
    adapt_policy: tuple[int, ...] | None = None
    freeze_unadapted: bool = False

    def __post_init__(self):
        dims = tuple(tuple(int(v) for v in d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if not dims:
            raise ModelError("encoder needs at least one layer")
        for (_, out), (nxt, _) in zip(dims, dims[1:]):
            if out != nxt:
                raise ModelError(f"layer dims do not chain: {dims}")
        L = len(dims)
        acts = self.activations if self.activations is not None else ("relu",) * L
        if len(acts) != L or any(a not in ACTIVATIONS for a in acts):
            raise ModelError(f"need {L} activations from {sorted(ACTIVATIONS)}, got {acts}")
        object.__setattr__(self, "activations", tuple(acts))
        object.__setattr__(self, "warped_layers", self._norm(self.warped_layers))
        if self.adapt_policy is not None:
            object.__setattr__(self, "adapt_policy", self._norm(self.adapt_policy))

    def _norm(self, layers) -> tuple[int, ...]:
        L = len(self.layer_dims)
        out = set()
        for i in layers:
            i = int(i)
            if not -L <= i < L:
                raise ModelError(f"layer index {i} out of range for {L} layers")
            out.add(i % L)
        return tuple(sorted(out))

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0][0]

    @property
    def feature_dim(self) -> int:
        return self.layer_dims[-1][1]

    @property
    def adapted_layers(self) -> tuple[int, ...]:
        if self.adapt_policy is None:
            return tuple(range(len(self.layer_dims)))
        return self.adapt_policy

    @property
    def frozen_layers(self) -> tuple[int, ...]:
        if not self.freeze_unadapted:
            return ()
        return tuple(i for i in range(len(self.layer_dims)) if i not in self.adapted_layers)

    @classmethod
    def mlp(cls, input_dim: int, hidden: list[int], **kw) -> EncoderSpec:
        sizes = [input_dim, *hidden]
        return cls(tuple(zip(sizes[:-1], sizes[1:])), **kw)


@dataclass
class MetaParams:
    """All outer-loop state, split into the four disjoint groups.

    Values are numpy arrays, or Vars while a tape is tracking them.
    """

    theta: dict = field(default_factory=dict)
    omega: dict = field(default_factory=dict)
    phi: dict = field(default_factory=dict)
    psi: dict = field(default_factory=dict)

    def items(self) -> Iterator[tuple[str, str, object]]:
        for group in GROUPS:
            for name, value in getattr(self, group).items():
                yield group, name, value

    def flat(self) -> dict[str, object]:
        return {f"{g}/{n}": v for g, n, v in self.items()}

    def map(self, fn) -> MetaParams:
        return MetaParams(**{g: {n: fn(g, n, v) for n, v in getattr(self, g).items()}
                             for g in GROUPS})

    def copy(self) -> MetaParams:
        return self.map(lambda g, n, v: np.array(_value(v), copy=True))

    def numpy(self) -> MetaParams:
        return self.map(lambda g, n, v: _value(v))

    def num_parameters(self) -> int:
        return int(np.sum([np.size(_value(v)) for _, _, v in self.items()]))

    @classmethod
    def from_flat(cls, flat: Mapping[str, np.ndarray]) -> MetaParams:
        out = cls()
        for key, value in flat.items():
            group, name = key.split("/", 1)
            if group not in GROUPS:
                raise ModelError(f"unknown parameter group {group!r}")
            getattr(out, group)[name] = value
        return out


def _value(v):
    return v.value if isinstance(v, Var) else v


def _var(v) -> Var:
    return v if isinstance(v, Var) else Var(np.asarray(v))


@dataclass(frozen=True)
class FilmGenerator:
    """Maps an activation of extent d to [gamma, beta], each of extent d."""

    weight: object  # (2d, d)
    bias: object    # (2d,)

    @property
    def dim(self) -> int:
        return _value(self.weight).shape[1]


def film(x, gen: FilmGenerator) -> Var:
    """``(gamma(x) + 1) * x + beta(x)`` with gamma, beta generated from x."""
    x = _var(x)
    d = gen.dim
    w, b = _var(gen.weight), _var(gen.bias)
    if w.shape != (2 * d, d) or b.shape != (2 * d,):
        raise ModelError(f"FiLM generator shapes {w.shape}, {b.shape} are not (2d, d), (2d,)")
    squeeze = x.ndim == 1
    if squeeze:
        x = ad.reshape(x, (1, x.shape[0]))
    if x.shape[1] != d:
        raise ModelError(f"FiLM expects activations of extent {d}, got {x.shape[1]}")
    gb = ad.linear(x, w, b)
    gamma = gb[:, :d]
    beta = gb[:, d:]
    out = ad.add(ad.mul(ad.add_scalar(gamma, 1.0), x), beta)
    if squeeze:
        out = ad.reshape(out, (d,))
    return out


def expand_head(theta_head, n: int) -> Var:
    """Duplicate the single head vector into an (in, n) matrix."""
    if n < 1:
        raise ModelError(f"head needs at least one output, got {n}")
    h = _var(theta_head)
    ones = Var(np.ones((1, n), dtype=h.dtype))
    return ad.matmul(ad.reshape(h, (h.shape[0], 1)), ones)


def initial_theta(params: MetaParams, n_out: int) -> dict[str, Var]:
    """Starting point of the inner loop: theta with the head expanded.

    The head weight is held as (n_out, in) so it feeds ``ad.linear``.
    """
    theta = {name: _var(v) for name, v in params.theta.items() if not name.startswith("head.")}
    theta["head.weight"] = ad.transpose(expand_head(params.theta["head.weight"], n_out))
    theta["head.bias"] = ad.fill(_var(params.theta["head.bias"]), (n_out,))
    return theta


def adapted_names(spec: EncoderSpec) -> list[str]:
    names = []
    for i in spec.adapted_layers:
        names += [f"enc.{i}.weight", f"enc.{i}.bias"]
    return names + ["head.weight", "head.bias"]


def init_meta_params(spec: EncoderSpec, variant: Variant = Variant(), *,
                     loss_inputs: Mapping[str, int] | None = None,
                     loss_hidden: tuple[int, ...] = (40, 40),
                     pretrained_theta: Mapping[str, np.ndarray] | None = None,
                     seed: int = 0, dtype=np.float32) -> MetaParams:
    """Build the initial meta-parameters.

    Warp layers start at the identity, FiLM generators and loss networks at
    N(0, 1e-2), and encoder weights either from ``pretrained_theta`` or a
    fan-in scaled uniform draw. ``loss_inputs`` gives the input extent of
    each enabled loss network ("support", "query", "reg").
    """
    rng = np.random.default_rng(seed)
    params = MetaParams()
    for i, (fan_in, fan_out) in enumerate(spec.layer_dims):
        bound = 1.0 / np.sqrt(fan_in)
        params.theta[f"enc.{i}.weight"] = rng.uniform(-bound, bound, (fan_out, fan_in))
        params.theta[f"enc.{i}.bias"] = rng.uniform(-bound, bound, (fan_out,))
    feat = spec.feature_dim
    params.theta["head.weight"] = rng.uniform(-1, 1, (feat,)) / np.sqrt(feat)
    params.theta["head.bias"] = np.zeros((1,))

    if pretrained_theta is not None:
        for name, value in pretrained_theta.items():
            if name not in params.theta:
                raise ModelError(f"pretrained tensor {name!r} has no slot in the encoder")
            if np.shape(value) != params.theta[name].shape:
                raise ModelError(f"pretrained {name!r} has shape {np.shape(value)}, "
                                 f"expected {params.theta[name].shape}")
            params.theta[name] = np.array(value, copy=True)

    for i in spec.warped_layers:
        d = spec.layer_dims[i][1]
        if variant.use_warp:
            params.omega[f"warp.{i}"] = np.eye(d)
        if variant.use_film:
            params.psi[f"film.enc.{i}.weight"] = rng.normal(0, PSI_STD, (2 * d, d))
            params.psi[f"film.enc.{i}.bias"] = rng.normal(0, PSI_STD, (2 * d,))

    loss_inputs = dict(loss_inputs or {})
    enabled = {"support": variant.support_loss, "query": variant.query_loss,
               "reg": variant.regularizer}
    for net, on in enabled.items():
        if not on:
            continue
        if net not in loss_inputs:
            raise ModelError(f"loss network {net!r} enabled but its input extent is unknown")
        sizes = [loss_inputs[net], *loss_hidden, 1]
        for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            params.phi[f"{net}.{k}.weight"] = rng.normal(0, PHI_STD, (b, a))
            params.phi[f"{net}.{k}.bias"] = rng.normal(0, PHI_STD, (b,))
            if variant.use_film and k < len(loss_hidden):
                params.psi[f"film.{net}.{k}.weight"] = rng.normal(0, PSI_STD, (2 * b, b))
                params.psi[f"film.{net}.{k}.bias"] = rng.normal(0, PSI_STD, (2 * b,))
    return params.map(lambda g, n, v: np.asarray(v, dtype=dtype))


def zero_film(params: MetaParams) -> MetaParams:
    """Copy of ``params`` with every FiLM generator zeroed (exact identity)."""
    return params.map(lambda g, n, v: np.zeros_like(_value(v)) if g == "psi"
                      else np.array(_value(v), copy=True))


def film_generator(params: MetaParams, prefix: str) -> FilmGenerator | None:
    w = params.psi.get(f"{prefix}.weight")
    if w is None:
        return None
    return FilmGenerator(w, params.psi[f"{prefix}.bias"])


def encode(params: MetaParams, theta: Mapping[str, Var], x, spec: EncoderSpec) -> Var:
    """Encoder pass: linear -> warp -> FiLM -> activation per layer."""
    h = _var(x)
    for i, act in enumerate(spec.activations):
        h = ad.linear(h, theta[f"enc.{i}.weight"], theta[f"enc.{i}.bias"])
        omega = params.omega.get(f"warp.{i}")
        if omega is not None:
            h = ad.linear(h, _var(omega))
        gen = film_generator(params, f"film.enc.{i}")
        if gen is not None:
            h = film(h, gen)
        h = ACTIVATIONS[act](h)
    return h


def forward(params: MetaParams, theta: Mapping[str, Var], x, spec: EncoderSpec,
            mode: str = "train") -> Var:
    """Logits of the base learner for the batch ``x``.

    ``theta`` holds the (possibly adapted) encoder weights and the expanded
    head from :func:`initial_theta`. ``mode`` is accepted for interface
    symmetry; without batch statistics train and eval coincide.
    """
    if mode not in ("train", "eval"):
        raise ModelError(f"unknown mode {mode!r}")
    x = _var(x)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ModelError(f"input shape {x.shape} does not match encoder input {spec.input_dim}")
    z = encode(params, theta, x, spec)
    return ad.linear(z, theta["head.weight"], theta["head.bias"])


def save_checkpoint(path, params: MetaParams, *, spec: dict | None = None, seed: int | None = None,
                    extra: Mapping[str, np.ndarray] | None = None) -> Path:
    """Write named arrays plus a JSON header into one ``.npz`` file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format_version": CHECKPOINT_VERSION, "spec": spec or {}, "seed": seed}
    arrays = {k: np.asarray(_value(v)) for k, v in params.flat().items()}
    for k, v in (extra or {}).items():
        arrays[f"extra/{k}"] = np.asarray(v)
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[MetaParams, dict, dict]:
    """Return (params, header, extra arrays)."""
    with np.load(Path(path)) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ModelError(f"unsupported checkpoint version {header.get('format_version')}")
        flat, extra = {}, {}
        for key in data.files:
            if key == "__header__":
                continue
            if key.startswith("extra/"):
                extra[key[len("extra/"):]] = data[key]
            else:
                flat[key] = data[key]
    return MetaParams.from_flat(flat), header, extra


def spec_to_dict(spec: EncoderSpec) -> dict:
    d = asdict(spec)
    d["layer_dims"] = [list(x) for x in spec.layer_dims]
    return d
