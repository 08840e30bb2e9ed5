"""Training strategies: AS, ES, loss-based SPL, SPL-BC and CPL-BC.

All strategies share one epoch loop. A stage trains one or two models on the
same shuffled batches; a *weigher* turns the models' per-object statistics
into per-object loss weights for every model. CPL-BC hands each model the
weights computed from its peer's confidences; SPL-BC uses a model's own.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autograd as ag
from .curriculum import (CONF_KIND, MinimizerSpec, ScheduleSpec, minimizer_weights,
                         object_confidences, quantile_threshold, schedule_quantile, schedule_xi)
from .detector import forward, init_weights
from .loss import anchor_loss_map, batch_objective, build_targets
from .optim import AdamState, adam_step, collect_grads, zero_grads
from .scenes import Dataset, easy_subset

log = logging.getLogger(__name__)

STRATEGIES = ("as", "es", "spl-hard", "spl-linear", "spl-log", "spl-poly", "spl-bc", "cpl-bc")
PRIORS = ("esp", "asp")
WEIGHT_SOURCES = ("fresh", "cached")


class TrainingDiverged(RuntimeError):
    def __init__(self, stage: str, epoch: int, batch: int, op: str):
        super().__init__(f"training diverged in {stage} at epoch {epoch}, batch {batch} (op {op!r})")
        self.diagnostic = {"stage": stage, "epoch": epoch, "batch": batch, "op": op}


@dataclass
class Hyper:
    T0: int = 10
    T1: int = 40
    lr: float = 1e-3
    lr_decay: float = 0.95
    batch_size: int = 8
    alpha: float = 5.0
    n_fixed: float = 16.0
    xi0: float = 0.8
    e1: float = 0.1
    e2: float = 0.9
    m: int = 3
    es_threshold: float = 0.5
    conf_agg: str = "max"
    q_start: float = 0.5
    q_end: float = 1.0
    poly_t: float = 3.0
    init_std: float = 0.1
    conf_threshold: float = 0.5
    nms_iou: float = 0.5

    @property
    def schedule(self) -> ScheduleSpec:
        return ScheduleSpec(xi0=self.xi0, e1=self.e1, e2=self.e2,
                            q_start=self.q_start, q_end=self.q_end)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class StrategyConfig:
    strategy: str = "as"
    prior: Optional[str] = None
    weight_source: str = "fresh"
    seed_f: int = 1
    seed_g: int = 2
    order_seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.strategy in ("as", "es"):
            self.prior = None
        elif self.prior is None:
            self.prior = "esp"
        if self.prior is not None and self.prior not in PRIORS:
            raise ValueError(f"unknown prior {self.prior!r}")
        if self.weight_source not in WEIGHT_SOURCES:
            raise ValueError(f"unknown weight source {self.weight_source!r}")
        if self.strategy == "cpl-bc" and self.seed_f == self.seed_g:
            raise ValueError("cpl-bc needs two distinct init seeds")

    @property
    def label(self) -> str:
        return self.strategy if self.prior is None else f"{self.strategy}/{self.prior}"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def minimizer_for(strategy: str, hyper: Hyper) -> MinimizerSpec:
    kinds = {"spl-hard": "hard", "spl-linear": "linear", "spl-log": "log", "spl-poly": "poly"}
    if strategy in kinds:
        return MinimizerSpec(kinds[strategy], t=hyper.poly_t)
    return MinimizerSpec(CONF_KIND, m=hyper.m)


# -- data and model containers --------------------------------------------------------

@dataclass
class TrainData:
    images: np.ndarray  # [n, C, H, W] float32
    targets: list  # ImageTargets per scene
    n_objects: np.ndarray  # per scene
    scene_ids: np.ndarray

    @classmethod
    def from_dataset(cls, dataset: Dataset, n_fixed: float = 16.0) -> "TrainData":
        images = dataset.images()
        grid = (images.shape[2] // 2, images.shape[3] // 2)
        targets = [build_targets(s.gt_boxes, grid, n_fixed) for s in dataset.scenes]
        return cls(images=images, targets=targets,
                   n_objects=np.array([t.n_objects for t in targets], dtype=np.int64),
                   scene_ids=np.arange(len(targets)))

    def __len__(self):
        return len(self.targets)

    @property
    def total_objects(self) -> int:
        return int(self.n_objects.sum())

    @property
    def object_offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.n_objects)])


@dataclass
class ModelState:
    weights: dict
    adam: AdamState
    init_seed: int
    name: str = "f"

    @classmethod
    def fresh(cls, seed: int, c_in: int, std: float, name: str = "f") -> "ModelState":
        w = init_weights(seed, c_in, std)
        return cls(weights=w, adam=AdamState.zeros_like(w), init_seed=seed, name=name)

    def copy(self) -> "ModelState":
        return ModelState(weights={k: ag.Tensor(v.data.copy(), requires_grad=True)
                                   for k, v in self.weights.items()},
                          adam=self.adam.copy(), init_seed=self.init_seed, name=self.name)


@dataclass
class EpochRecord:
    epoch: int  # global, 1-based
    stage: str
    ep: Optional[float] = None
    threshold: Optional[float] = None  # xi or lambda
    objects_weighted: Optional[int] = None
    mean_weight: Optional[float] = None
    train_loss_f: Optional[float] = None
    train_loss_g: Optional[float] = None
    lr: float = 0.0

    def row(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Trace:
    epochs: list = field(default_factory=list)
    # per curriculum epoch, per model: concatenated weights in batch order
    weight_history: list = field(default_factory=list)
    selection_history: list = field(default_factory=list)

    def rows(self) -> list:
        return [e.row() for e in self.epochs]


@dataclass
class StrategyResult:
    config: StrategyConfig
    models: dict  # name -> ModelState
    trace: Trace
    hyper: Hyper


def epoch_order(order_seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([int(order_seed) & (2**64 - 1), int(epoch)]))
    return rng.permutation(n)


def lr_at(hyper: Hyper, epoch0: int) -> float:
    return hyper.lr * hyper.lr_decay ** epoch0


# -- per-batch statistics -------------------------------------------------------------

@dataclass
class BatchStats:
    """Per-model statistics for the objects of one batch, in batch order."""

    confidences: list  # per image: array of object confidences
    mean_losses: list  # per image: array of object loss / positive-anchor count
    total_loss: float


def _batch_stats(out, loss_map, conf_part, reg_part, targets, alpha, agg) -> BatchStats:
    confs, losses, totals = [], [], []
    conf = out.conf.data
    al = conf_part + alpha * reg_part
    for i, tg in enumerate(targets):
        n = tg.n_objects
        confs.append(object_confidences(conf[i], tg.labels, n, agg))
        if n:
            flat = tg.labels.reshape(-1)
            sel = flat >= 0
            sums = np.bincount(flat[sel], weights=al[i].reshape(-1)[sel], minlength=n)
            counts = np.bincount(flat[sel], minlength=n)
            losses.append(sums / counts)
        else:
            losses.append(np.zeros(0))
        totals.append(al[i].sum() / tg.n_norm)
    return BatchStats(confidences=confs, mean_losses=losses, total_loss=float(np.mean(totals)))


# Weigher(context, batch_index, batch_scene_ids, [BatchStats per model]) -> per model, per image weights
Weigher = Callable


def _ones_weigher(ctx, b, ids, stats):
    return [[np.ones(len(c)) for c in s.confidences] for s in stats]


def train_stage(models: list, data: TrainData, epochs: int, epoch_offset: int, hyper: Hyper,
                order_seed: int, trace: Trace, stage: str, weigher: Weigher = _ones_weigher,
                on_epoch_start: Optional[Callable] = None, on_epoch_end: Optional[Callable] = None,
                record_weights: bool = False) -> None:
    """Run ``epochs`` epochs over ``data`` updating every model in ``models``.

    ``on_epoch_start(t)`` returns a context dict passed to the weigher and
    stored (``threshold`` / ``ep`` keys) in the trace.
    """
    n = len(data)
    bs = hyper.batch_size
    for t in range(1, epochs + 1):
        e0 = epoch_offset + t - 1
        lr = lr_at(hyper, e0)
        ctx = on_epoch_start(t) if on_epoch_start else {}
        order = epoch_order(order_seed, e0, n)
        epoch_losses = [[] for _ in models]
        epoch_weights = [[] for _ in models]
        epoch_stats = [[] for _ in models]
        for b, start in enumerate(range(0, n, bs)):
            ids = order[start:start + bs]
            x = data.images[ids]
            tg = [data.targets[i] for i in ids]
            tapes, maps, stats = [], [], []
            try:
                for ms in models:
                    tape = ag.Tape()
                    with tape:
                        out = forward(ms.weights, x)
                        lm, cp, rp = anchor_loss_map(out, tg, hyper.alpha)
                    tapes.append(tape)
                    maps.append(lm)
                    stats.append(_batch_stats(out, lm, cp, rp, tg, hyper.alpha, hyper.conf_agg))
                weights = weigher(ctx, b, ids, stats)
                for k, ms in enumerate(models):
                    obj = batch_objective(maps[k], tg, weights[k])
                    zero_grads(ms.weights)
                    ag.backward(obj)
                    adam_step(ms.weights, collect_grads(ms.weights), ms.adam, lr)
                    epoch_losses[k].append(float(obj.data))
            except ag.NonFiniteError as exc:
                raise TrainingDiverged(stage, epoch_offset + t, b, exc.op) from exc
            for k in range(len(models)):
                epoch_weights[k].extend(weights[k])
                epoch_stats[k].append((ids, stats[k]))
        rec = EpochRecord(epoch=epoch_offset + t, stage=stage, lr=lr,
                          ep=ctx.get("ep"), threshold=ctx.get("threshold"),
                          train_loss_f=float(np.mean(epoch_losses[0])))
        if len(models) > 1:
            rec.train_loss_g = float(np.mean(epoch_losses[1]))
        wf = np.concatenate(epoch_weights[0]) if epoch_weights[0] else np.zeros(0)
        rec.objects_weighted = int((wf > 0).sum())
        rec.mean_weight = float(wf.mean()) if wf.size else 0.0
        trace.epochs.append(rec)
        if record_weights:
            hist = [np.concatenate(w) if w else np.zeros(0) for w in epoch_weights]
            trace.weight_history.append(hist)
        if on_epoch_end:
            on_epoch_end(t, epoch_stats)


def _guard(models):
    for ms in models:
        for k, p in ms.weights.items():
            if not np.isfinite(p.data).all():
                raise TrainingDiverged("check", -1, -1, k)


# -- stages ------------------------------------------------------------------------------

def run_prior_stage(model: ModelState, data: TrainData, T0: int, hyper: Hyper, order_seed: int,
                    trace: Optional[Trace] = None, stage: str = "prior") -> ModelState:
    """T0 epochs of unweighted training; returns the model (updated in place)."""
    if T0 < 1:
        raise ValueError(f"prior stage needs T0 >= 1, got {T0}")
    trace = trace if trace is not None else Trace()
    train_stage([model], data, T0, 0, hyper, order_seed, trace, stage)
    return model


def infer_stats(model: ModelState, data: TrainData, hyper: Hyper) -> tuple:
    """Per-scene object confidences and mean losses under frozen weights."""
    confs, losses = [None] * len(data), [None] * len(data)
    bs = 32
    for start in range(0, len(data), bs):
        ids = np.arange(start, min(start + bs, len(data)))
        tg = [data.targets[i] for i in ids]
        out = forward({k: ag.Tensor(v.data) for k, v in model.weights.items()}, data.images[ids])
        lm, cp, rp = anchor_loss_map(out, tg, hyper.alpha)
        st = _batch_stats(out, lm, cp, rp, tg, hyper.alpha, hyper.conf_agg)
        for j, i in enumerate(ids):
            confs[i] = st.confidences[j]
            losses[i] = st.mean_losses[j]
    return confs, losses


class _StatCache:
    """Per-scene statistics from the previous epoch, per model."""

    def __init__(self, n_models: int, n_scenes: int):
        self.conf = [[None] * n_scenes for _ in range(n_models)]
        self.loss = [[None] * n_scenes for _ in range(n_models)]

    def fill(self, k: int, confs, losses):
        self.conf[k] = list(confs)
        self.loss[k] = list(losses)

    def update(self, epoch_stats):
        for k, per_batch in enumerate(epoch_stats):
            for ids, st in per_batch:
                for j, i in enumerate(ids):
                    self.conf[k][i] = st.confidences[j]
                    self.loss[k][i] = st.mean_losses[j]

    def all_losses(self, k: int) -> np.ndarray:
        parts = [x for x in self.loss[k] if x is not None and len(x)]
        return np.concatenate(parts) if parts else np.zeros(0)


def run_curriculum_stage(models: list, data: TrainData, T1: int, epoch_offset: int, hyper: Hyper,
                         order_seed: int, trace: Trace, minimizer: MinimizerSpec,
                         peer: bool, weight_source: str = "fresh",
                         weight_override: Optional[float] = None, stage: str = "curriculum") -> None:
    """Shared engine for SPL-loss, SPL-BC and CPL-BC.

    With ``peer`` each model is weighted by the other model's statistics
    (two models required); otherwise each model weights itself.
    """
    if peer and len(models) != 2:
        raise ValueError("co-paced training needs exactly two models")
    if T1 < 1:
        raise ValueError("curriculum stage needs T1 >= 1")
    schedule = hyper.schedule
    cache = _StatCache(len(models), len(data))
    for k, ms in enumerate(models):
        cache.fill(k, *infer_stats(ms, data, hyper))
    source = [1, 0] if peer else list(range(len(models)))
    loss_norm = [1.0] * len(models)

    def on_start(t):
        ep = (t - 1) / T1
        ctx = {"ep": ep}
        if minimizer.loss_based:
            q = schedule_quantile(schedule, ep)
            ctx["lambda"] = []
            for k in range(len(models)):
                prev = cache.all_losses(source[k])
                if minimizer.kind == "log":
                    loss_norm[k] = float(prev.max()) if prev.size and prev.max() > 0 else 1.0
                    prev = prev / loss_norm[k]
                lam = quantile_threshold(prev, q)
                if minimizer.kind == "log":
                    lam = min(max(lam, 1e-6), 1.0 - 1e-6)
                ctx["lambda"].append(lam)
            ctx["threshold"] = ctx["lambda"][0]
            ctx["q"] = q
        else:
            ctx["threshold"] = schedule_xi(schedule, ep)
        return ctx

    def weigher(ctx, b, ids, stats):
        per_model = []
        for k in range(len(models)):
            src = source[k]
            row = []
            for j, i in enumerate(ids):
                if weight_override is not None:
                    row.append(np.full(int(data.n_objects[i]), float(weight_override)))
                    continue
                if minimizer.loss_based:
                    stat = stats[src].mean_losses[j] if weight_source == "fresh" else cache.loss[src][i]
                    stat = np.asarray(stat) / loss_norm[k]
                    if minimizer.kind == "log":
                        stat = np.minimum(stat, 1.0)
                    row.append(minimizer_weights(minimizer, ctx["lambda"][k], stat))
                else:
                    stat = stats[src].confidences[j] if weight_source == "fresh" else cache.conf[src][i]
                    row.append(minimizer_weights(minimizer, ctx["threshold"], stat))
            per_model.append(row)
        return per_model

    def on_end(t, epoch_stats):
        cache.update(epoch_stats)

    train_stage(models, data, T1, epoch_offset, hyper, order_seed, trace, stage,
                weigher=weigher, on_epoch_start=on_start, on_epoch_end=on_end, record_weights=True)


def run_cpl_bc(model_f: ModelState, model_g: ModelState, data: TrainData, T1: int, hyper: Hyper,
               order_seed: int, trace: Optional[Trace] = None, epoch_offset: int = 0,
               weight_source: str = "fresh", weight_override: Optional[float] = None) -> tuple:
    """Co-paced stage: f's confidences weight g's loss and vice versa."""
    trace = trace if trace is not None else Trace()
    run_curriculum_stage([model_f, model_g], data, T1, epoch_offset, hyper, order_seed, trace,
                         MinimizerSpec(CONF_KIND, m=hyper.m), peer=True,
                         weight_source=weight_source, weight_override=weight_override,
                         stage="cpl-bc")
    return model_f, model_g


def run_spl_bc(model: ModelState, data: TrainData, T1: int, hyper: Hyper, order_seed: int,
               trace: Optional[Trace] = None, epoch_offset: int = 0,
               weight_source: str = "fresh") -> ModelState:
    trace = trace if trace is not None else Trace()
    run_curriculum_stage([model], data, T1, epoch_offset, hyper, order_seed, trace,
                         MinimizerSpec(CONF_KIND, m=hyper.m), peer=False,
                         weight_source=weight_source, stage="spl-bc")
    return model


def run_spl_loss(model: ModelState, data: TrainData, T1: int, minimizer: MinimizerSpec,
                 hyper: Hyper, order_seed: int, trace: Optional[Trace] = None,
                 epoch_offset: int = 0, weight_source: str = "fresh") -> ModelState:
    if not minimizer.loss_based:
        raise ValueError(f"run_spl_loss needs a loss-based minimizer, got {minimizer.kind!r}")
    trace = trace if trace is not None else Trace()
    run_curriculum_stage([model], data, T1, epoch_offset, hyper, order_seed, trace, minimizer,
                         peer=False, weight_source=weight_source, stage=f"spl-{minimizer.kind}")
    return model


# -- dispatcher ------------------------------------------------------------------------

@dataclass
class PreparedData:
    full: TrainData
    easy: TrainData

    @classmethod
    def from_dataset(cls, dataset: Dataset, hyper: Hyper) -> "PreparedData":
        return cls(full=TrainData.from_dataset(dataset, hyper.n_fixed),
                   easy=TrainData.from_dataset(easy_subset(dataset, hyper.es_threshold), hyper.n_fixed))


def run_strategy(config: StrategyConfig, dataset, hyper: Hyper) -> StrategyResult:
    """Train one strategy end to end; ``dataset`` is a Dataset or PreparedData."""
    data = dataset if isinstance(dataset, PreparedData) else PreparedData.from_dataset(dataset, hyper)
    c_in = data.full.images.shape[1]
    trace = Trace()
    s = config.strategy
    f = ModelState.fresh(config.seed_f, c_in, hyper.init_std, "f")
    total = hyper.T0 + hyper.T1

    if s in ("as", "es"):
        d = data.full if s == "as" else data.easy
        train_stage([f], d, total, 0, hyper, config.order_seed, trace, s)
        return StrategyResult(config, {"f": f}, trace, hyper)

    prior_data = data.easy if config.prior == "esp" else data.full
    run_prior_stage(f, prior_data, hyper.T0, hyper, config.order_seed, trace, f"prior-{config.prior}")
    if s == "cpl-bc":
        g = ModelState.fresh(config.seed_g, c_in, hyper.init_std, "g")
        trace_g = Trace()
        run_prior_stage(g, prior_data, hyper.T0, hyper, config.order_seed, trace_g, f"prior-{config.prior}")
        for rec_f, rec_g in zip(trace.epochs, trace_g.epochs):
            rec_f.train_loss_g = rec_g.train_loss_f
        run_cpl_bc(f, g, data.full, hyper.T1, hyper, config.order_seed, trace,
                   epoch_offset=hyper.T0, weight_source=config.weight_source)
        return StrategyResult(config, {"f": f, "g": g}, trace, hyper)
    if s == "spl-bc":
        run_spl_bc(f, data.full, hyper.T1, hyper, config.order_seed, trace,
                   epoch_offset=hyper.T0, weight_source=config.weight_source)
    else:
        run_spl_loss(f, data.full, hyper.T1, minimizer_for(s, hyper), hyper, config.order_seed,
                     trace, epoch_offset=hyper.T0, weight_source=config.weight_source)
    return StrategyResult(config, {"f": f}, trace, hyper)
