"""Single runs and strategy x seed matrices, with on-disk artifacts."""

from __future__ import annotations

import logging
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint as ckpt
from .detector import check_weights
from .autograd import Tensor
from .metrics import evaluate
from .report import RunReport, SeedResult, trace_csv, write_json
from .scenes import Dataset
from .strategies import Hyper, PreparedData, StrategyConfig, TrainingDiverged, run_strategy

log = logging.getLogger(__name__)


def derive_seeds(run_seed: int) -> dict:
    """Init seeds for models f and g plus the batch-order seed of one run.

    Every strategy run with the same run seed shares f's initialisation and
    the batch order, so strategies are compared on paired runs.
    """
    f, g, order = np.random.SeedSequence([int(run_seed), 0x5EED]).generate_state(3, dtype=np.uint32)
    return {"seed_f": int(f), "seed_g": int(g), "order_seed": int(order)}


def parse_strategy(label: str) -> tuple:
    """``"cpl-bc/esp"`` -> ("cpl-bc", "esp"); a bare curriculum strategy defaults to esp."""
    name, _, prior = label.partition("/")
    return name, (prior or None)


def strategy_config(label: str, run_seed: int, weight_source: str = "fresh") -> StrategyConfig:
    name, prior = parse_strategy(label)
    return StrategyConfig(strategy=name, prior=prior, weight_source=weight_source,
                          **derive_seeds(run_seed))


def checkpoint_meta(cfg: StrategyConfig, hyper: Hyper, model_name: str, init_seed: int,
                    c_in: int, run_seed: int) -> dict:
    return {"strategy": cfg.strategy, "prior": cfg.prior, "model": model_name,
            "run_seed": run_seed, "init_seed": init_seed, "epoch": hyper.T0 + hyper.T1,
            "c_in": c_in, "hyper": hyper.to_dict(), "strategy_config": cfg.to_dict()}


def run_one(label: str, run_seed: int, train: Dataset, test: Optional[Dataset], hyper: Hyper,
            out_dir=None, weight_source: str = "fresh", prepared: Optional[PreparedData] = None) -> SeedResult:
    """Train one (strategy, seed), evaluate model f on ``test``, and write artifacts."""
    cfg = strategy_config(label, run_seed, weight_source)
    t0 = time.perf_counter()
    result = run_strategy(cfg, prepared if prepared is not None else train, hyper)
    wall = time.perf_counter() - t0
    metrics = {}
    if test is not None:
        ev = evaluate(result.models["f"].weights, test, hyper.conf_threshold, hyper.nms_iou)
        metrics = {k: getattr(ev, k) for k in ("ap50", "ap75", "ap", "fdr")}
    seed_res = SeedResult(seed=run_seed, metrics=metrics, trace=result.trace.rows(), wall_time=wall)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        c_in = train.images().shape[1] if prepared is None else prepared.full.images.shape[1]
        for name, ms in result.models.items():
            path = out / f"model_{name}.ckpt"
            ckpt.save_checkpoint(ckpt.model_tensors(ms.weights, ms.adam),
                                 checkpoint_meta(cfg, hyper, name, ms.init_seed, c_in, run_seed), path)
            seed_res.checkpoints[name] = ckpt.file_checksum(path)
        (out / "trace.csv").write_text(trace_csv(seed_res.trace))
        report = RunReport(strategy=cfg.strategy, prior=cfg.prior,
                           config={"hyper": hyper.to_dict(), "strategy": cfg.to_dict(),
                                   "dataset": train.config}, seeds=[seed_res])
        write_json(report.to_dict(), out / "report.json")
    return seed_res


def load_weights(path, c_in: Optional[int] = None) -> tuple:
    """Checkpoint -> (weights dict of Tensors, meta); checks the architecture when ``c_in`` is given."""
    tensors, meta = ckpt.load_checkpoint(path)
    arrays, _, _, _ = ckpt.split_tensors(tensors)
    weights = {k: Tensor(v) for k, v in arrays.items()}
    if c_in is not None:
        check_weights(weights, c_in)
    return weights, meta


# -- matrix -------------------------------------------------------------------------------

def _matrix_job(args):
    label, seed, train, test, hyper, run_dir, weight_source = args
    try:
        return label, run_one(label, seed, train, test, hyper, run_dir, weight_source)
    except TrainingDiverged as exc:
        return label, SeedResult(seed=seed, metrics={}, error={"message": str(exc), **exc.diagnostic})
    except Exception as exc:  # a failed run is recorded and the matrix continues
        return label, SeedResult(seed=seed, metrics={}, error={"message": f"{type(exc).__name__}: {exc}",
                                                                "traceback": traceback.format_exc()})


def worker_count() -> int:
    raw = os.environ.get("CPL_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"CPL_THREADS must be a positive integer, got {raw!r}") from None


def run_matrix(labels: list, seeds: list, train: Dataset, test: Optional[Dataset], hyper: Hyper,
               out_dir=None, weight_source: str = "fresh", workers: Optional[int] = None) -> list:
    """Run every (strategy, seed) pair; returns one RunReport per strategy label."""
    if not seeds:
        raise ValueError("seed list must be nonempty")
    jobs = []
    for label in labels:
        for seed in seeds:
            run_dir = None
            if out_dir is not None:
                run_dir = Path(out_dir) / "runs" / f"{label.replace('/', '_')}_seed{seed}"
            jobs.append((label, seed, train, test, hyper, run_dir, weight_source))
    workers = worker_count() if workers is None else workers
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_matrix_job, jobs))
    else:
        results = [_matrix_job(j) for j in jobs]
    reports = {}
    for label in labels:
        name, prior = parse_strategy(label)
        cfg = StrategyConfig(strategy=name, prior=prior, seed_f=1, seed_g=2)
        reports[label] = RunReport(strategy=cfg.strategy, prior=cfg.prior,
                                   config={"hyper": hyper.to_dict(), "weight_source": weight_source,
                                           "dataset": train.config, "label": label})
    for label, res in results:
        reports[label].seeds.append(res)
    return list(reports.values())
