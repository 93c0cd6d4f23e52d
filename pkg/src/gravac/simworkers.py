"""Synchronous N-worker data-parallel training loop.

One logical model is shared by all workers (perfect aggregation); workers
differ only in their data shards, rng substreams and error-feedback
residuals. Three modes: adaptive compression ("gravac"), a fixed factor
("static-cf") and uncompressed ("dense"). Volume counters in the trace are
per worker per iteration.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from .compressors import CompressorKind, aggregate, aggregate_dense, compress
from .controller import ControllerConfig, ControllerState, run_iteration
from .costmodel import (CostModelParams, allreduce_time, dense_message_words,
                        sparse_message_words)
from .feedback import ResidualStore, apply_feedback, update_residual
from .gradcore import GradientVector, SeededRng, ewma_lambda_from_workers, squared_l2_norm
from .metrics import GainTracker, ThroughputTable, compression_gain_raw, update_step

GRAVAC = "gravac"
STATIC = "static-cf"
DENSE_MODE = "dense"
MODES = (GRAVAC, STATIC, DENSE_MODE)

DIVERGENCE_FACTOR = 1e6

# top-level rng subtrees: data, controller/compression, init, eval
_RNG_DATA = 1
_RNG_CONTROL = 2
_RNG_INIT = 3
_RNG_EVAL = 4


class DivergenceError(RuntimeError):
    """Raised when the training loss blows past the divergence guard."""


@dataclass
class OptimizerState:
    """Momentum SGD with coupled weight decay.

    buffer <- momentum*buffer + (grad + weight_decay*w); w <- w - lr*buffer.
    """

    weights: np.ndarray
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    buffer: np.ndarray | None = None
    lr_decay_iters: tuple[int, ...] = ()
    lr_decay_factor: float = 10.0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be >= 0, got {self.weight_decay}")
        if self.buffer is None:
            self.buffer = np.zeros_like(self.weights)
        elif self.buffer.shape != self.weights.shape:
            raise ValueError("momentum buffer must match weight shape")


def sgd_update(opt: OptimizerState, grad: GradientVector) -> OptimizerState:
    """Apply one momentum-SGD step with the aggregated gradient."""
    if grad.length != opt.weights.size:
        raise ValueError(f"gradient length {grad.length} != weights {opt.weights.size}")
    g = grad.values.astype(np.float64)
    if opt.weight_decay:
        g = g + opt.weight_decay * opt.weights
    if opt.momentum:
        opt.buffer = opt.momentum * opt.buffer + g
    else:
        opt.buffer = g
    opt.weights = opt.weights - opt.lr * opt.buffer
    return opt


@dataclass
class IterationRecord:
    """One trace row; field order is the wire order."""

    iter: int
    cf: float
    gain_min: float
    gain_c: float
    t_o: float
    t_compress: float
    t_s: float
    t_iter: float
    tsys: float
    tcomp: float
    loss: float
    floats_sent: int
    words_sent: int
    choice: str
    theta_min: float

    def to_dict(self) -> dict:
        return asdict(self)


REQUIRED_TRACE_FIELDS = ("iter", "cf", "gain_min", "gain_c", "t_o", "t_compress",
                         "t_s", "t_iter", "tsys", "tcomp", "loss",
                         "floats_sent", "words_sent")


@dataclass
class RunTrace:
    """Per-iteration records of a run, JSON-lines serializable."""

    records: list[IterationRecord] = field(default_factory=list)

    def append(self, record: IterationRecord) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[IterationRecord]:
        return iter(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.asarray([getattr(r, name) for r in self.records])

    def total(self, name: str):
        values = self.column(name)
        return values.sum().item() if len(values) else 0

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_dict()) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, path) -> "RunTrace":
        records = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                row = json.loads(line)
                missing = [f for f in REQUIRED_TRACE_FIELDS if f not in row]
                if missing:
                    raise ValueError(f"trace record missing fields {missing}")
                records.append(IterationRecord(**row))
        return cls(records)


@dataclass
class TrainingResult:
    trace: RunTrace
    weights: np.ndarray
    initial_loss: float
    final_loss: float
    metric_name: str
    metric_value: float


def local_gradient(task, weights: np.ndarray, worker: int, iteration: int,
                   rng: SeededRng) -> tuple[GradientVector, float]:
    """Mean mini-batch gradient and loss on the worker's shard."""
    return task.gradient(weights, worker, iteration, rng)


def run_training(task, optimizer: OptimizerState, cost: CostModelParams,
                 mode: str, iterations: int, seed: int,
                 controller_config: ControllerConfig | None = None,
                 compressor: CompressorKind | None = None,
                 static_cf: float | None = None,
                 eval_samples: int = 2048) -> TrainingResult:
    """Run the full synchronous training loop and return its trace.

    Deterministic given (task, optimizer settings, cost, mode, seed): every
    random draw flows from substreams of the run seed.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}, expected one of {MODES}")
    if mode == STATIC and (static_cf is None or static_cf < 1.0):
        raise ValueError("static-cf mode requires a compression factor >= 1")
    if mode == STATIC and compressor is None:
        raise ValueError("static-cf mode requires a compressor kind")
    if mode == GRAVAC and controller_config is None:
        raise ValueError("gravac mode requires a controller config")
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")

    root = SeededRng(seed)
    data_rng = root.split(_RNG_DATA)
    control_rng = root.split(_RNG_CONTROL)
    n_workers = cost.workers
    length = task.parameter_count
    batch_size = task.batch_size

    opt = optimizer
    opt.weights = np.asarray(task.initial_weights(root.split(_RNG_INIT)), dtype=np.float64)
    opt.buffer = np.zeros_like(opt.weights)

    stores = [ResidualStore(length) for _ in range(n_workers)]
    state = None
    gains = None
    table = ThroughputTable()
    if mode == GRAVAC:
        state = ControllerState.fresh(controller_config, n_workers)
        table = state.table
    elif mode == STATIC:
        gains = GainTracker(ewma_lambda_from_workers(n_workers))

    trace = RunTrace()
    initial_loss = None
    decay_points = set(opt.lr_decay_iters)

    for i in range(1, iterations + 1):
        if i in decay_points:
            opt.lr = opt.lr / opt.lr_decay_factor

        grads = []
        losses = []
        for w in range(n_workers):
            g, loss = local_gradient(task, opt.weights, w, i, data_rng)
            grads.append(g)
            losses.append(loss)
        loss = float(np.mean(losses))
        if initial_loss is None:
            initial_loss = loss
        if not np.isfinite(loss) or (initial_loss > 0 and loss > DIVERGENCE_FACTOR * initial_loss):
            raise DivergenceError(
                f"iteration {i}: loss {loss:.6g} exceeded {DIVERGENCE_FACTOR:.0e} x "
                f"initial loss {initial_loss:.6g}")

        if mode == GRAVAC:
            result = run_iteration(state, grads, stores, cost, control_rng, batch_size)
            decision = result.decision
            if decision.choice == "dense":
                agg = aggregate_dense(result.sent)
            else:
                agg = aggregate(result.sent)
            record = IterationRecord(
                iter=i, cf=float(decision.cf), gain_min=decision.delta_min,
                gain_c=decision.delta_c, t_o=result.t_compute,
                t_compress=result.t_compress, t_s=result.t_sync,
                t_iter=result.t_iter, tsys=table.t_sys[decision.cf],
                tcomp=table.t_compress[decision.cf], loss=loss,
                floats_sent=result.floats_sent, words_sent=result.words_sent,
                choice=decision.choice, theta_min=result.theta_min)
        elif mode == STATIC:
            g_efs = [apply_feedback(g, r) for g, r in zip(grads, stores)]
            parts = []
            t_compress = 0.0
            for w, g_ef in enumerate(g_efs):
                part, secs = compress(compressor, g_ef, static_cf,
                                      control_rng.split(i, w), cost.compression_latency)
                parts.append(part)
                t_compress = secs
            raws = []
            for g_ef, part, store in zip(g_efs, parts, stores):
                ef_norm = squared_l2_norm(g_ef)
                if ef_norm > 0:
                    raws.append(min(1.0, compression_gain_raw(part, None, ef_norm)))
                update_residual(g_ef, part, store)
            delta = gains.observe(static_cf, float(np.mean(raws))) if raws else 1.0
            agg = aggregate(parts)
            words = sparse_message_words(parts[0])
            t_s = allreduce_time(words, cost)
            t_iter = cost.t_compute + t_compress + t_s
            cf = float(static_cf)
            update_step(table, cf, delta, t_iter, n_workers, batch_size)
            record = IterationRecord(
                iter=i, cf=cf, gain_min=delta, gain_c=delta, t_o=cost.t_compute,
                t_compress=t_compress, t_s=t_s, t_iter=t_iter,
                tsys=table.t_sys[cf], tcomp=table.t_compress[cf], loss=loss,
                floats_sent=parts[0].kept, words_sent=words,
                choice="static", theta_min=cf)
        else:
            agg = aggregate_dense(grads)
            words = dense_message_words(length)
            t_s = allreduce_time(words, cost)
            t_iter = cost.t_compute + t_s
            update_step(table, 1.0, 1.0, t_iter, n_workers, batch_size)
            record = IterationRecord(
                iter=i, cf=1.0, gain_min=1.0, gain_c=1.0, t_o=cost.t_compute,
                t_compress=0.0, t_s=t_s, t_iter=t_iter,
                tsys=table.t_sys[1.0], tcomp=table.t_compress[1.0], loss=loss,
                floats_sent=length, words_sent=words,
                choice="dense", theta_min=1.0)

        sgd_update(opt, agg)
        trace.append(record)

    metrics = task.evaluate(opt.weights, root.split(_RNG_EVAL), eval_samples)
    metric_name = task.metric_name
    return TrainingResult(trace=trace, weights=opt.weights,
                          initial_loss=initial_loss,
                          final_loss=trace.records[-1].loss,
                          metric_name=metric_name,
                          metric_value=float(metrics[metric_name]))
