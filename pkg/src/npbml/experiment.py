"""Experiment runner: pretrain -> meta-train -> evaluate, evaluation reports
with confidence intervals, and the ablation matrix."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import plotting
from .config import ExperimentConfig, from_dict
from .inner import DivergenceError, InnerConfig
from .losses import loss_input_extents, regularized_layers
from .model import MetaParams, Variant, init_meta_params, load_checkpoint
from .outer import EpisodeResult, episode_objective, meta_train
from .tasks import (ClusterFamily, Episode, RelationEmbedder, episode_rng, pretrain_encoder,
                    sample_episode)

log = logging.getLogger(__name__)

Z95 = 1.96
TRAIN_STREAM, VAL_STREAM, TEST_STREAM = 1, 2, 3


class SplitError(ValueError):
    """Evaluation would touch classes the checkpoint was meta-trained on."""


# -- evaluation records and reports -----------------------------------------

@dataclass(frozen=True)
class TaskRecord:
    task_index: int
    accuracy: float | None
    loss: float
    seed: int


def half_width(values) -> float:
    """1.96 * sample std / sqrt(n)."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        return float("nan")
    return float(Z95 * v.std(ddof=1) / math.sqrt(len(v)))


@dataclass
class EvalReport:
    metric: str  # "accuracy" or "mse"
    mean: float
    half_width: float
    task_count: int
    mean_loss: float
    per_seed: list[dict] = field(default_factory=list)
    diverged: int = 0  # tasks whose inner loop blew up (loss not finite)

    @classmethod
    def from_records(cls, records: Sequence[TaskRecord]) -> EvalReport:
        if not records:
            raise ValueError("no evaluation records")
        classification = records[0].accuracy is not None
        metric = "accuracy" if classification else "mse"

        def values(rs):
            # a diverged classification task scores 0; a diverged regression
            # task has no finite loss to average and is only counted
            if classification:
                return [r.accuracy for r in rs]
            return [r.loss for r in rs if math.isfinite(r.loss)]

        per_seed = []
        for seed in sorted({r.seed for r in records}):
            rs = [r for r in records if r.seed == seed]
            per_seed.append({"seed": seed, "mean": float(np.mean(values(rs))),
                             "half_width": half_width(values(rs)),
                             "mean_loss": float(np.nanmean([r.loss for r in rs])),
                             "task_count": len(rs),
                             "diverged": sum(not math.isfinite(r.loss) for r in rs)})
        vals = values(records)
        return cls(metric, float(np.mean(vals)) if vals else float("nan"), half_width(vals),
                   len(records), float(np.nanmean([r.loss for r in records])), per_seed,
                   sum(not math.isfinite(r.loss) for r in records))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def format(self) -> str:
        scale = 100.0 if self.metric == "accuracy" else 1.0
        unit = "%" if self.metric == "accuracy" else ""
        return (f"{self.metric}: {self.mean * scale:.2f}{unit} +- {self.half_width * scale:.2f}{unit}"
                f" over {self.task_count} tasks"
                + (f" ({self.diverged} diverged)" if self.diverged else ""))


def write_records(path, records: Sequence[TaskRecord]) -> Path:
    return plotting.write_csv(path, ["task_index", "accuracy", "loss", "seed"],
                              [(r.task_index, r.accuracy, r.loss, r.seed) for r in records])


def read_records(path) -> list[TaskRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            acc = float(row["accuracy"]) if row["accuracy"] != "" else None
            out.append(TaskRecord(int(row["task_index"]), acc, float(row["loss"]), int(row["seed"])))
    return out


# -- learners ---------------------------------------------------------------

Learner = Callable[[Episode], tuple[float | None, float]]


class NPBMLLearner:
    """Adapt on the support set, score the query set: (accuracy, loss)."""

    def __init__(self, params: MetaParams, spec, inner: InnerConfig, embedder=None, dtype=np.float32):
        self.params, self.spec, self.inner = params, spec, inner
        self.embedder = embedder
        self.dtype = dtype

    def __call__(self, episode: Episode):
        ep = episode.astype(self.dtype)
        relation = None if self.embedder is None else self.embedder(ep)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                res = episode_objective(self.params, ep, self.inner, self.spec, relation, with_grad=False)
        except DivergenceError as err:
            log.warning("evaluation task diverged: %s", err)
            res = EpisodeResult(float("nan"), 0.0 if ep.kind == "classification" else None)
        return res.accuracy, res.loss


def evaluate_learner(learner: Learner, family, task_spec, n_tasks: int = 600, seed: int = 0,
                     split: str = "test") -> list[TaskRecord]:
    """Run ``learner`` on ``n_tasks`` episodes of ``split``. Episode t of a
    seed is the same for every learner, so rows stay comparable."""
    if split == "train":
        raise SplitError("evaluation on the meta-train split")
    stream = TEST_STREAM if split == "test" else VAL_STREAM
    records = []
    for t in range(n_tasks):
        ep = sample_episode(family, task_spec, episode_rng(seed, stream, t), split)
        acc, loss = learner(ep)
        records.append(TaskRecord(t, acc, float(loss), seed))
    return records


# -- single runs ------------------------------------------------------------

def _family_header(cfg: ExperimentConfig) -> dict:
    fam = cfg.family()
    d = {"config": cfg.to_dict()}
    if isinstance(fam, ClusterFamily):
        d["train_classes"] = fam.pool("train").tolist()
    return d


def build_embedder(cfg: ExperimentConfig, encoder_params=None):
    if not cfg.variant.query_loss:
        return None
    if cfg.kind == "regression":
        return RelationEmbedder(bandwidth=cfg.task.kernel_bandwidth)
    if encoder_params is None:
        return RelationEmbedder()
    enc = {k: np.asarray(v, dtype=np.float64) for k, v in encoder_params.items() if k.startswith("enc.")}
    return RelationEmbedder(enc, cfg.encoder_spec())


def pretrained_encoder(cfg: ExperimentConfig, seed: int, cache: Path | None = None):
    """Pre-trained encoder weights (or None), cached on disk when asked."""
    if not cfg.pretrain.enabled or cfg.kind != "classification":
        return None, None
    if cache is not None and cache.exists():
        with np.load(cache) as data:
            theta = {k: data[k] for k in data.files if k != "__info__"}
            info = json.loads(bytes(data["__info__"]).decode())
        return theta, info
    theta, info = pretrain_encoder(cfg.family(), cfg.encoder_spec(), cfg.pretrain_config(), seed)
    if cache is not None:
        _save_encoder(cache, theta, info)
    return theta, info


def _save_encoder(path: Path, theta: dict, info: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, __info__=np.frombuffer(json.dumps(info).encode(), np.uint8), **theta)
    tmp.replace(path)


def initial_params(cfg: ExperimentConfig, seed: int, pretrained=None) -> MetaParams:
    spec = cfg.encoder_spec()
    ts = cfg.task_spec()
    extents = loss_input_extents(cfg.kind, ts.n_out, len(regularized_layers(spec)))
    return init_meta_params(spec, cfg.variant, loss_inputs=extents, loss_hidden=tuple(cfg.loss_hidden),
                            pretrained_theta=pretrained, seed=seed, dtype=cfg.dtype)


@dataclass
class RunResult:
    seed: int
    out_dir: Path
    report: EvalReport
    records: list[TaskRecord]
    metrics: list[dict]
    pretrain: dict | None = None


def run(cfg: ExperimentConfig, out_dir, seed: int | None = None, *, pretrain_cache: Path | None = None,
        resume: bool = True) -> RunResult:
    """One seed: optional pre-training, meta-training, evaluation on the test split."""
    seed = cfg.seeds[0] if seed is None else int(seed)
    cfg = cfg.with_seed(seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.resolved.yaml")

    family, ts, spec = cfg.family(), cfg.task_spec(), cfg.encoder_spec()
    theta0, pre_info = pretrained_encoder(cfg, seed, pretrain_cache)
    if theta0 is not None:  # kept beside the checkpoint for later evaluation
        _save_encoder(out / "pretrain.npz", theta0, pre_info)
    params = initial_params(cfg, seed, theta0)
    embedder = build_embedder(cfg, theta0)

    def sample_train(step, i):
        return sample_episode(family, ts, episode_rng(seed, TRAIN_STREAM, step, i), "train").astype(cfg.dtype)

    val = [sample_episode(family, ts, episode_rng(seed, VAL_STREAM, t), "val").astype(cfg.dtype)
           for t in range(cfg.meta.val_episodes)]
    header = _family_header(cfg)
    params, metrics = meta_train(params, spec, cfg.inner, cfg.meta, sample_train, val, embedder,
                                 out_dir=out, resume=resume, header=header)
    best, _, _ = load_checkpoint(out / "best.npz")
    plotting.learning_curve(metrics, out)

    learner = NPBMLLearner(best, spec, cfg.inner, embedder, cfg.dtype)
    records = evaluate_learner(learner, family, ts, cfg.eval.n_tasks, seed, "test")
    report = EvalReport.from_records(records)
    write_records(out / "records.csv", records)
    (out / "eval_report.json").write_text(json.dumps(report.to_dict(), indent=2))
    if pre_info is not None:
        (out / "pretrain.json").write_text(json.dumps(pre_info, indent=2))
    return RunResult(seed, out, report, records, metrics, pre_info)


def _run_worker(args):
    cfg_dict, out, seed, cache = args
    res = run(from_dict(cfg_dict), out, seed, pretrain_cache=cache)
    return res.seed, res.records


def run_all(cfg: ExperimentConfig, out_dir=None, workers: int | None = None) -> EvalReport:
    """Every seed of the config in its own directory; pooled report at the top."""
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.resolved.yaml")
    jobs = [(cfg.to_dict(), out / f"seed_{s}", s, out / "pretrain" / f"seed_{s}.npz") for s in cfg.seeds]
    results = _map(_run_worker, jobs, workers or cfg.workers)
    records = [r for _, recs in results for r in recs]
    report = EvalReport.from_records(records)
    write_records(out / "records.csv", records)
    (out / "eval_report.json").write_text(json.dumps(report.to_dict(), indent=2))
    return report


def _map(fn, jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def evaluate(checkpoint, cfg: ExperimentConfig | None = None, n_tasks: int | None = None,
             seed: int = 0, split: str = "test", family=None) -> tuple[EvalReport, list[TaskRecord]]:
    """Evaluate a saved checkpoint. The config defaults to the one stored in it."""
    params, header, _ = load_checkpoint(checkpoint)
    stored = header.get("spec", {})
    if cfg is None:
        if "config" not in stored:
            raise ValueError(f"{checkpoint} carries no experiment config; pass one explicitly")
        cfg = from_dict(stored["config"])
    family = cfg.family() if family is None else family
    if split == "train":
        raise SplitError("evaluation on the meta-train split")
    if isinstance(family, ClusterFamily) and "train_classes" in stored:
        seen = set(stored["train_classes"])
        overlap = seen & set(family.pool(split).tolist())
        if overlap:
            raise SplitError(f"{len(overlap)} evaluation classes were used in meta-training")
    cache = Path(checkpoint).parent / "pretrain.npz"
    theta0, _ = pretrained_encoder(cfg, int(header.get("seed") or 0), cache)
    embedder = build_embedder(cfg, theta0)
    learner = NPBMLLearner(params, cfg.encoder_spec(), cfg.inner, embedder, cfg.dtype)
    records = evaluate_learner(learner, family, cfg.task_spec(), n_tasks or cfg.eval.n_tasks, seed, split)
    return EvalReport.from_records(records), records


# -- ablation ---------------------------------------------------------------

@dataclass(frozen=True)
class AblationRow:
    row: int
    table: str
    label: str
    variant: Variant
    reuses: int | None = None


ABLATION_ROWS = (
    AblationRow(1, "components", "init only (MAML)", Variant.maml()),
    AblationRow(2, "components", "+ optimizer", Variant(True, False, False, False, False)),
    AblationRow(3, "components", "+ loss", Variant(False, False, True, True, True)),
    AblationRow(4, "components", "+ optimizer + loss", Variant(True, False, True, True, True)),
    AblationRow(5, "components", "+ task-adaptive", Variant(True, True, True, True, True)),
    AblationRow(6, "loss", "base loss only", Variant.maml(), reuses=1),
    AblationRow(7, "loss", "+ inductive", Variant(False, False, True, False, False)),
    AblationRow(8, "loss", "+ transductive", Variant(False, False, False, True, False)),
    AblationRow(9, "loss", "+ regularizer", Variant(False, False, False, False, True)),
    AblationRow(10, "loss", "all loss terms", Variant(False, False, True, True, True), reuses=3),
)


def _ablation_worker(args):
    cfg_dict, out, seed, cache = args
    try:
        res = run(from_dict(cfg_dict), out, seed, pretrain_cache=cache)
        return res.records, None
    except Exception as err:  # a failed row is reported, not fatal
        log.exception("ablation run %s failed", out)
        return None, f"{type(err).__name__}: {err}"


def ablation(cfg: ExperimentConfig, out_dir=None, rows: Sequence[int] | None = None,
             workers: int | None = None) -> list[dict]:
    """Run the ten-row ablation matrix on shared seeds. Rows that reuse
    another row's artifacts are filled from it without a second run."""
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.resolved.yaml")
    wanted = set(rows) if rows is not None else {r.row for r in ABLATION_ROWS}
    selected = [r for r in ABLATION_ROWS if r.row in wanted]
    needed = sorted({r.reuses or r.row for r in selected})
    by_row = {r.row: r for r in ABLATION_ROWS}

    jobs, keys = [], []
    for row in needed:
        rcfg = cfg.replace(variant=by_row[row].variant)
        for s in cfg.seeds:
            jobs.append((rcfg.to_dict(), out / f"row_{row}" / f"seed_{s}", s,
                         out / "pretrain" / f"seed_{s}.npz"))
            keys.append((row, s))
    # shared pre-training first so concurrent rows never race on it
    for s in cfg.seeds:
        pretrained_encoder(cfg, s, out / "pretrain" / f"seed_{s}.npz")
    results = dict(zip(keys, _map(_ablation_worker, jobs, workers or cfg.workers)))

    table = []
    for r in selected:
        src = r.reuses or r.row
        recs, errors = [], []
        for s in cfg.seeds:
            got, err = results[(src, s)]
            if err:
                errors.append(f"seed {s}: {err}")
            else:
                recs.extend(got)
        entry = {"row": r.row, "table": r.table, "label": r.label, "reuses": r.reuses,
                 "variant": dataclasses.asdict(r.variant), "status": "failed" if errors else "ok",
                 "error": "; ".join(errors) or None, "mean": None, "half_width": None,
                 "seed_mean_half_width": None, "per_seed": []}
        if recs and not errors:
            rep = EvalReport.from_records(recs)
            entry.update(mean=rep.mean, half_width=rep.half_width, metric=rep.metric,
                         per_seed=rep.per_seed,
                         seed_mean=float(np.mean([p["mean"] for p in rep.per_seed])),
                         seed_mean_half_width=float(np.mean([p["half_width"] for p in rep.per_seed])))
        table.append(entry)

    metric = next((t.get("metric") for t in table if t.get("metric")), "accuracy")
    (out / "ablation.json").write_text(json.dumps(table, indent=2))
    plotting.write_csv(out / "ablation.csv", ["row", "table", "label", "reuses", "status", "mean",
                                              "half_width"],
                       [(t["row"], t["table"], t["label"], t["reuses"], t["status"], t["mean"],
                         t["half_width"]) for t in table])
    (out / "ablation.txt").write_text(format_table(table, metric) + "\n")
    plotting.ablation_chart(table, out, metric)
    return table


def format_table(table: list[dict], metric: str = "accuracy") -> str:
    scale = 100.0 if metric == "accuracy" else 1.0
    lines = [f"{'row':>4}  {'table':<10}  {'variant':<22}  {metric:>18}"]
    for t in table:
        if t["status"] != "ok":
            cell = "FAILED"
        else:
            cell = f"{t['mean'] * scale:.2f} +- {t['half_width'] * scale:.2f}"
        note = f"  (= row {t['reuses']})" if t["reuses"] else ""
        lines.append(f"{t['row']:>4}  {t['table']:<10}  {t['label']:<22}  {cell:>18}{note}")
    return "\n".join(lines)
