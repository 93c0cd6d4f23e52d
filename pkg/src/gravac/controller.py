"""Adaptive compression-factor controller.

Every iteration two compressed views of the gradient are produced: one at
the minimum CF and one at the candidate CF (minimum times the current step
factor). Their smoothed gains gate which of the two -- or the uncompressed
gradient as a last resort -- is actually communicated. At every window
boundary the step factor advances along a scaling policy, the minimum CF
escalates when both gains agree within tolerance, and the search freezes on
an ideal CF once the top two compression throughputs saturate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .compressors import CompressorKind, SparseGradient, compress, compress_further
from .costmodel import (CostModelParams, allreduce_time, dense_message_words,
                        iteration_time, sparse_message_words)
from .feedback import ResidualStore, apply_feedback, clear_residual, update_residual
from .gradcore import (GradientVector, SeededRng, ewma_lambda_from_workers,
                       squared_l2_norm)
from .metrics import GainTracker, ThroughputTable, compression_gain_raw, update_step

EXPONENTIAL = "exponential"
GEOMETRIC = "geometric"
POLICIES = (EXPONENTIAL, GEOMETRIC)

CANDIDATE = "candidate"
MINIMUM = "minimum"
DENSE = "dense"

# rng substream tags for the two compression stages
_STAGE_MIN = 0
_STAGE_STEP = 1


@dataclass(frozen=True)
class ControllerConfig:
    theta_min: float = 10.0
    theta_max: float = 1000.0
    epsilon: float = 0.7
    omega: float = 0.01
    window: int = 500
    policy: str = EXPONENTIAL
    compressor: CompressorKind = CompressorKind("topk")

    def __post_init__(self):
        if self.theta_min < 1.0:
            raise ValueError(f"theta_min must be >= 1, got {self.theta_min}")
        if self.theta_max < self.theta_min:
            raise ValueError(f"theta_max must be >= theta_min, got {self.theta_max}")
        if not (0.0 < self.epsilon < 1.0):
            raise ValueError(f"epsilon out of (0,1): {self.epsilon}")
        if not (0.0 < self.omega < 1.0):
            raise ValueError(f"omega out of (0,1): {self.omega}")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}, expected one of {POLICIES}")


@dataclass
class CfDecision:
    """Which gradient view was communicated and the gains behind the choice."""

    choice: str
    cf: float
    gain: float
    delta_min: float
    delta_c: float


def select_cf(delta_c: float, delta_min: float, epsilon: float,
              candidate_cf: float | None = None,
              minimum_cf: float | None = None) -> CfDecision:
    """Gate the candidate CF, then the minimum CF, then fall back to dense."""
    if delta_c >= epsilon:
        return CfDecision(CANDIDATE, candidate_cf, delta_c, delta_min, delta_c)
    if delta_min >= epsilon:
        return CfDecision(MINIMUM, minimum_cf, delta_min, delta_min, delta_c)
    return CfDecision(DENSE, 1.0, 1.0, delta_min, delta_c)


def scaling_policy(policy: str, step: int, theta_min_initial: float,
                   theta_max: float, theta_min_current: float | None = None) -> float:
    """Step factor for policy step ``step``, capped so the candidate CF
    (factor times the current minimum) never exceeds theta_max.

    Step 0 is 1.0: the minimum CF itself is evaluated first. Exponential
    scaling doubles the exponent each step (2^1, 2^2, 2^4, 2^8, ...);
    geometric scaling doubles the factor (2^step).
    """
    if step < 0:
        raise ValueError(f"policy step must be >= 0, got {step}")
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    current = theta_min_initial if theta_min_current is None else theta_min_current
    cap = theta_max / current
    if step == 0:
        return min(1.0, cap)
    exponent = 2 ** (step - 1) if policy == EXPONENTIAL else step
    if exponent >= 1024:  # would overflow float64; the cap applies anyway
        return cap
    return min(2.0 ** exponent, cap)


@dataclass
class ControllerState:
    """Evolving controller state; one instance drives one training run."""

    config: ControllerConfig
    gains: GainTracker
    table: ThroughputTable
    theta_min: float
    theta_min_initial: float
    theta_s: float = 1.0
    step: int = 0
    iteration: int = 0
    frozen: bool = False
    theta_ideal: float | None = None
    # set when the saturation rule picked the CF with the *larger* throughput
    # rank but the *higher* CF value; logged, never acted on
    saturation_picked_higher_cf: bool = False

    @classmethod
    def fresh(cls, config: ControllerConfig, workers: int) -> "ControllerState":
        lam = ewma_lambda_from_workers(workers)
        return cls(config=config, gains=GainTracker(lam), table=ThroughputTable(),
                   theta_min=config.theta_min, theta_min_initial=config.theta_min)

    @property
    def candidate_cf(self) -> float:
        return self.theta_s * self.theta_min


def check_gravac(state: ControllerState, iteration: int,
                 delta_min: float | None, delta_c: float | None) -> ControllerState:
    """Window-boundary evaluation: advance the step factor, escalate the
    minimum CF when the two gains agree within omega, and freeze on the
    ideal CF once the top two compression throughputs are within omega.

    No-op off window boundaries and after the ideal CF is frozen (the
    candidate CF must stay constant from then on). Gains may be None when
    no compressed send has happened yet; escalation is skipped then.
    """
    cfg = state.config
    if state.frozen or iteration % cfg.window != 0:
        return state

    # Escalate the minimum CF to the candidate evaluated in the window that
    # just closed (pre-advance step factor): the move is gain-verified, since
    # the candidate's smoothed gain sat within omega of the minimum's.
    if delta_min is not None and delta_c is not None and delta_min > 0:
        if cfg.omega >= abs(delta_min - delta_c) / delta_min:
            state.theta_min = min(cfg.theta_max, state.theta_s * state.theta_min)

    state.step += 1
    state.theta_s = scaling_policy(cfg.policy, state.step, state.theta_min_initial,
                                   cfg.theta_max, state.theta_min)

    top = state.table.top_two()
    if top is not None:
        (cf_first, v_first), (cf_second, v_second) = top
        if v_second > 0 and abs(v_first - v_second) / v_second <= cfg.omega:
            state.theta_ideal = cf_second
            state.frozen = True
            if cf_second > cf_first:
                state.saturation_picked_higher_cf = True
            state.theta_s = max(1.0, state.theta_ideal / state.theta_min)
    return state


@dataclass
class IterationResult:
    """Everything one controller step produced, ready for aggregation and tracing."""

    sent: Sequence[SparseGradient] | Sequence[GradientVector]
    decision: CfDecision
    t_compute: float
    t_compress: float
    t_sync: float
    t_iter: float
    floats_sent: int
    words_sent: int
    gain_min_raw: float
    gain_c_raw: float
    candidate_cf: float
    theta_min: float


def run_iteration(state: ControllerState, gradients, residuals,
                  cost: CostModelParams, rng: SeededRng,
                  batch_size: int = 1) -> IterationResult:
    """One full adaptive step over per-worker gradients.

    ``gradients`` and ``residuals`` may be single objects (one worker) or
    equal-length worker-ascending sequences. Mutates the controller state
    and the residual stores in place. Volume counters are per worker.
    """
    cfg = state.config
    grads = [gradients] if isinstance(gradients, GradientVector) else list(gradients)
    stores = [residuals] if isinstance(residuals, ResidualStore) else list(residuals)
    if len(grads) != len(stores):
        raise ValueError(f"{len(grads)} gradients for {len(stores)} residual stores")

    state.iteration += 1
    i = state.iteration
    theta_min = state.theta_min
    candidate_cf = state.candidate_cf
    t_compute = cost.t_compute
    length = grads[0].length

    g_efs = [apply_feedback(g, r) for g, r in zip(grads, stores)]
    ef_norms = [squared_l2_norm(g) for g in g_efs]

    if all(n == 0.0 for n in ef_norms):
        # vanished gradient: dense no-op, no compression work or gain update
        for store in stores:
            clear_residual(store)
        t_sync = allreduce_time(dense_message_words(length), cost)
        decision = CfDecision(DENSE, 1.0, 1.0, 1.0, 1.0)
        t_iter = iteration_time(decision, t_compute, 0.0, t_sync)
        update_step(state.table, 1.0, 1.0, t_iter, cost.workers, batch_size)
        d_min = state.gains.value(theta_min) if state.gains.has(theta_min) else None
        d_c = state.gains.value(candidate_cf) if state.gains.has(candidate_cf) else None
        check_gravac(state, i, d_min, d_c)
        return IterationResult(g_efs, decision, t_compute, 0.0, t_sync, t_iter,
                               length, dense_message_words(length), 1.0, 1.0,
                               candidate_cf, theta_min)

    g_mins = []
    t_min = 0.0
    for w, g_ef in enumerate(g_efs):
        part, secs = compress(cfg.compressor, g_ef, theta_min,
                              rng.split(i, w, _STAGE_MIN), cost.compression_latency)
        g_mins.append(part)
        t_min = secs  # identical modeled cost per worker; they run in parallel

    raw_min = _mean_raw_gain(g_mins, ef_norms)
    delta_min = state.gains.observe(theta_min, raw_min)

    g_cs = []
    t_step = 0.0
    for w, part in enumerate(g_mins):
        stepped, secs = compress_further(cfg.compressor, part, state.theta_s,
                                         rng.split(i, w, _STAGE_STEP),
                                         cost.compression_latency)
        g_cs.append(stepped)
        t_step = secs

    raw_c = _mean_raw_gain(g_cs, ef_norms)
    delta_c = state.gains.observe(candidate_cf, raw_c)
    t_compress = t_min + t_step

    decision = select_cf(delta_c, delta_min, cfg.epsilon,
                         candidate_cf=candidate_cf, minimum_cf=theta_min)

    if decision.choice == DENSE:
        for store in stores:
            clear_residual(store)
        sent = g_efs
        floats = length
        words = dense_message_words(length)
    else:
        parts = g_cs if decision.choice == CANDIDATE else g_mins
        for g_ef, part, store in zip(g_efs, parts, stores):
            update_residual(g_ef, part, store)
        sent = parts
        floats = parts[0].kept
        words = sparse_message_words(parts[0])

    t_sync = allreduce_time(words, cost)
    t_iter = iteration_time(decision, t_compute, t_compress, t_sync)
    update_step(state.table, decision.cf, decision.gain, t_iter, cost.workers, batch_size)
    check_gravac(state, i, delta_min, delta_c)

    return IterationResult(sent, decision, t_compute,
                           0.0 if decision.choice == DENSE else t_compress,
                           t_sync, t_iter, floats, words, raw_min, raw_c,
                           candidate_cf, theta_min)


def _mean_raw_gain(parts: list[SparseGradient], ef_norms: list[float]) -> float:
    """Mean per-worker gain ratio, clamped to 1 per worker; zero-norm workers skipped."""
    gains = [min(1.0, compression_gain_raw(p, None, n))
             for p, n in zip(parts, ef_norms) if n > 0.0]
    return sum(gains) / len(gains)
