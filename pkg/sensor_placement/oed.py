#!/usr/bin/env python3
"""
A-optimal sensor selection under the total-error model.

Two estimators of the expected posterior trace over a set of training data:
- eig:   low-rank generalized eigen-decomposition at every training MAP point,
         giving tr(C_post) - tr(C_pr) exactly when all data-informed
         directions are kept
- trace: randomized quadratic-form estimator with prior-distributed probes

The greedy optimizer adds one sensor at a time, evaluating every remaining
candidate. Candidate evaluations are split into (candidate, training sample)
jobs and run over a worker pool.
"""

import logging
import threading
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from config import Config
from forward_bae import ErrorModel, ForwardModel, TrainingSet
from inversion import BayesianInversion, Design, MapResult, restrict
from numkit import (ContractViolation, ConvergenceError, cg_solve, parallel_map,
                    random_stream)
from prior import GaussianFieldPrior

logger = logging.getLogger(__name__)

OBJECTIVE_KINDS = ('eig', 'trace')


class GreedyAbort(RuntimeError):
    """Every candidate of a greedy step failed to evaluate"""


class InvalidEvaluation(RuntimeError):
    """A MAP solve or probe solve did not converge for one training sample"""


@dataclass
class OedObjectiveConfig:
    kind: str
    training: TrainingSet
    error_model: ErrorModel
    r_fixed: int = 0  # 0 selects the number of active sensors
    n_tr: int = 30
    seed: int = field(default_factory=lambda: Config.MASTER_SEED)
    warm_start: bool = True
    workers: Optional[int] = None

    def __post_init__(self):
        if self.kind not in OBJECTIVE_KINDS:
            raise ValueError(f"objective kind must be one of {OBJECTIVE_KINDS}, got {self.kind!r}")
        if self.kind == 'trace' and self.n_tr < 1:
            raise ValueError(f"n_tr must be >= 1 for the trace objective, got {self.n_tr}")
        if len(self.training) < 1:
            raise ValueError("the objective needs at least one training sample")
        if self.r_fixed < 0:
            raise ValueError(f"r_fixed must be nonnegative, got {self.r_fixed}")

    @property
    def n_d(self) -> int:
        return len(self.training)

    def rank_for(self, design: Design) -> int:
        return self.r_fixed if self.r_fixed > 0 else design.n_act


@dataclass
class SampleTerm:
    """Objective contribution of one training sample at one design"""
    value: float
    valid: bool
    map_point: Optional[np.ndarray] = None
    message: str = ''


@dataclass
class Evaluation:
    design: Design
    value: float
    valid: bool
    per_sample: List[float]
    map_points: List[Optional[np.ndarray]]
    message: str = ''


@dataclass
class GreedyTrace:
    picks: List[int]
    objective_values: List[float]
    evaluations: int
    skipped: int = 0
    kind: str = 'eig'
    step_values: List[Dict[int, float]] = field(default_factory=list, repr=False)

    def design(self, n_s: int) -> Design:
        return Design.from_indices(self.picks, n_s)

    def to_record(self) -> dict:
        return {
            'picks': [int(j) for j in self.picks],
            'objective_values': [float(v) for v in self.objective_values],
            'evaluations': int(self.evaluations),
            'skipped': int(self.skipped),
            'objective': self.kind,
        }


class OedObjective:
    """Expected posterior-trace objective over the training set"""

    def __init__(self, forward: ForwardModel, prior: GaussianFieldPrior, cfg: OedObjectiveConfig):
        if cfg.error_model.n_s != forward.n_s:
            raise ValueError(f"error model has {cfg.error_model.n_s} sensors, forward model has {forward.n_s}")
        self.forward = forward
        self.prior = prior
        self.cfg = cfg
        self._probes: Optional[List[np.ndarray]] = None
        self._lock = threading.Lock()
        self.evaluations = 0

    @property
    def n_s(self) -> int:
        return self.forward.n_s

    def trace_probes(self) -> List[np.ndarray]:
        """z_j ~ N(0, C_pr), drawn once and shared by every design"""
        with self._lock:
            if self._probes is None:
                mean = self.prior.mean.values
                self._probes = [
                    self.prior.sample(random_stream(self.cfg.seed, 'trace-probe', j)).values - mean
                    for j in range(self.cfg.n_tr)
                ]
            return self._probes

    def sample_term(self, design: Design, i: int, init: Optional[np.ndarray] = None) -> SampleTerm:
        """MAP solve for training sample i followed by the objective's trace term"""
        try:
            inversion = BayesianInversion(self.forward, self.prior, restrict(self.cfg.error_model, design))
            map_result = inversion.solve_map(self.cfg.training[i].y, init=init)
            if not map_result.converged:
                raise InvalidEvaluation(
                    f"MAP solve did not converge (|g|={map_result.final_gradient_norm:.3e})")
            if self.cfg.kind == 'eig':
                value = self._eig_term(inversion, map_result, design)
            else:
                value = self._trace_term(inversion, map_result)
            return SampleTerm(value=value, valid=True, map_point=map_result.m_map.values)
        except (InvalidEvaluation, ConvergenceError, ContractViolation, np.linalg.LinAlgError) as e:
            return SampleTerm(value=np.nan, valid=False, message=f"sample {i}: {e}")

    def _eig_term(self, inversion: BayesianInversion, map_result: MapResult, design: Design) -> float:
        posterior = inversion.posterior_lowrank(map_result, r=self.cfg.rank_for(design))
        return -posterior.trace_reduction()

    def _trace_term(self, inversion: BayesianInversion, map_result: MapResult) -> float:
        lin = map_result.linearization
        hessian = lambda x: inversion.gn_hessian_apply(lin, x, include_prior=True)
        M = self.prior.M
        total = 0.0
        for z in self.trace_probes():
            c = cg_solve(hessian, self.prior.precision_dual(z), precond=self.prior.covariance_dual,
                         tag='trace-probe')
            total += float(z @ (M @ c))
        return total / self.cfg.n_tr

    def combine(self, design: Design, terms: List[SampleTerm]) -> Evaluation:
        """Average per-sample terms in index order; any invalid term invalidates the design"""
        with self._lock:
            self.evaluations += 1
        invalid = [t.message for t in terms if not t.valid]
        values = [t.value for t in terms]
        if invalid:
            return Evaluation(design, np.nan, False, values, [None] * len(terms), "; ".join(invalid))
        value = float(np.sum(values) / len(values))
        return Evaluation(design, value, True, values, [t.map_point for t in terms])

    def evaluate(self, design: Design, warm: Optional[List[Optional[np.ndarray]]] = None) -> Evaluation:
        warm = warm or [None] * self.cfg.n_d
        terms = parallel_map(lambda i: self.sample_term(design, i, warm[i]), self.cfg.n_d,
                             self.cfg.workers, show_progress=False)
        return self.combine(design, terms)

    def phi_eig(self, design: Design) -> float:
        """-(1/n_d) sum_i sum_k lam_ik/(1+lam_ik) s_ik^T M s_ik"""
        if self.cfg.kind != 'eig':
            raise ValueError("phi_eig needs an objective configured with kind='eig'")
        return self._value(design)

    def phi_trace(self, design: Design) -> float:
        """(1/(n_tr n_d)) sum_ij z_j^T M c_ij with (H + P) c_ij = P z_j"""
        if self.cfg.kind != 'trace':
            raise ValueError("phi_trace needs an objective configured with kind='trace'")
        return self._value(design)

    def _value(self, design: Design) -> float:
        evaluation = self.evaluate(design)
        if not evaluation.valid:
            raise InvalidEvaluation(evaluation.message)
        return evaluation.value

    def __call__(self, design: Design) -> float:
        return self._value(design)


def greedy(K: int, objective: OedObjective, show_progress: bool = True) -> GreedyTrace:
    """Add the sensor with the lowest objective value, K times"""
    n_s, n_d = objective.n_s, objective.cfg.n_d
    if not 1 <= K <= n_s:
        raise ValueError(f"K must lie in [1, {n_s}], got {K}")

    design = Design.empty(n_s)
    remaining = list(range(n_s))
    warm: List[Optional[np.ndarray]] = [None] * n_d
    trace = GreedyTrace(picks=[], objective_values=[], evaluations=0, kind=objective.cfg.kind)

    for step in range(K):
        candidates = [design.with_sensor(j) for j in remaining]
        jobs = [(c, i) for c in range(len(candidates)) for i in range(n_d)]
        terms = parallel_map(
            lambda t: objective.sample_term(candidates[jobs[t][0]], jobs[t][1], warm[jobs[t][1]]),
            len(jobs), objective.cfg.workers, desc=f'Greedy step {step + 1}/{K}',
            show_progress=show_progress)

        best: Optional[Tuple[int, float, list]] = None
        step_values: Dict[int, float] = {}
        for c, j in enumerate(remaining):
            evaluation = objective.combine(candidates[c], terms[c * n_d:(c + 1) * n_d])
            trace.evaluations += 1
            if not evaluation.valid:
                trace.skipped += 1
                logger.warning(f"Skipping candidate sensor {j} at step {step + 1}: {evaluation.message}")
                continue
            step_values[j] = evaluation.value
            if best is None or evaluation.value < best[1]:
                best = (j, evaluation.value, evaluation.map_points)

        if best is None:
            raise GreedyAbort(f"all {len(remaining)} candidates failed at greedy step {step + 1}")

        j, value, map_points = best
        design = design.with_sensor(j)
        remaining.remove(j)
        trace.picks.append(j)
        trace.objective_values.append(value)
        trace.step_values.append(step_values)
        if objective.cfg.warm_start:
            warm = list(map_points)
        logger.info(f"Greedy step {step + 1}/{K}: sensor {j}, objective {value:.6e}")

    logger.info(f"Greedy finished: picks={trace.picks}, evaluations={trace.evaluations}, "
                f"skipped={trace.skipped}")
    return trace


def expected_evaluations(K: int, n_s: int) -> int:
    """K n_s - K (K - 1) / 2"""
    return K * n_s - K * (K - 1) // 2


def exhaustive_singletons(objective: OedObjective) -> np.ndarray:
    """Objective value of every single-sensor design (nan where invalid)"""
    values = np.full(objective.n_s, np.nan)
    for j in range(objective.n_s):
        evaluation = objective.evaluate(Design.from_indices([j], objective.n_s))
        if evaluation.valid:
            values[j] = evaluation.value
    return values


def unaware_error_model(sigma: float, n_s: int) -> ErrorModel:
    """eps0 = 0, Gamma_eps = 0: the noise-only likelihood"""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    return ErrorModel(np.zeros(n_s), np.zeros((n_s, n_s)), sigma, n_mc_used=0)


def random_design(K: int, stream: np.random.Generator, n_s: int) -> Design:
    """Uniform K-subset of the candidates"""
    if not 0 <= K <= n_s:
        raise ValueError(f"K must lie in [0, {n_s}], got {K}")
    return Design.from_indices(stream.choice(n_s, size=K, replace=False), n_s)
