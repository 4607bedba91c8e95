#!/usr/bin/env python3
"""
Post-hoc design diagnostics on held-out validation data.

For a design w and n_v validation triples (m_true, xi, eta) the data
d = G(m_true, xi) + eta are inverted, and two averages are reported:
- V_bar: expected posterior variance, the low-rank tr(C_post M)
- E_map_bar: expected relative M-norm error of the MAP point
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from config import Config
from forward_bae import ErrorModel, ForwardModel, TrainingSet, make_training_set
from inversion import BayesianInversion, Design, restrict
from numkit import ContractViolation, ConvergenceError, parallel_map, random_stream
from oed import OedObjective, OedObjectiveConfig, greedy, random_design, unaware_error_model
from prior import GaussianFieldPrior

logger = logging.getLogger(__name__)

INVERSION_MODES = ('aware', 'unaware')


@dataclass
class ValidationRow:
    index: int
    trace: float
    rel_error: float
    converged: bool
    message: str = ''


@dataclass
class ValidationReport:
    design: Design
    V_bar: float
    E_map_bar: float
    per_sample: List[ValidationRow]
    n_v: int
    inversion_mode: str
    n_failed: int = 0
    trusted: bool = True

    @property
    def V_std_error(self) -> float:
        """Standard error of V_bar over the converged samples"""
        traces = [r.trace for r in self.per_sample if r.converged]
        if len(traces) < 2:
            return np.nan
        return float(np.std(traces, ddof=1) / np.sqrt(len(traces)))

    def summary(self) -> dict:
        return {
            'active': [int(j) for j in self.design.active],
            'V_bar': float(self.V_bar),
            'V_std_error': self.V_std_error,
            'E_map_bar': float(self.E_map_bar),
            'n_v': self.n_v,
            'n_failed': self.n_failed,
            'trusted': self.trusted,
            'inversion_mode': self.inversion_mode,
        }


def validation_set(forward: ForwardModel, n_v: int, seed: int) -> TrainingSet:
    """Held-out triples drawn from streams disjoint from BAE and training data"""
    return make_training_set(forward, n_v, seed, purpose='validation')


def _validate_sample(forward: ForwardModel, prior: GaussianFieldPrior, rl, sample) -> ValidationRow:
    try:
        inversion = BayesianInversion(forward, prior, rl)
        map_result = inversion.solve_map(sample.y)
        if not map_result.converged:
            return ValidationRow(sample.index, np.nan, np.nan, False, "MAP solve did not converge")
        posterior = inversion.posterior_lowrank(map_result, r=rl.n_act)
        m_true = sample.m.values
        diff = map_result.m_map.values - m_true
        rel_error = np.sqrt((diff @ (prior.M @ diff)) / (m_true @ (prior.M @ m_true)))
        return ValidationRow(sample.index, posterior.posterior_trace(), float(rel_error), True)
    except (ConvergenceError, ContractViolation, np.linalg.LinAlgError) as e:
        logger.error(f"Validation sample {sample.index} failed: {e}")
        return ValidationRow(sample.index, np.nan, np.nan, False, str(e))


def validate(forward: ForwardModel, prior: GaussianFieldPrior, design: Design, n_v: int,
             mode: str, seed: int, error_model: ErrorModel,
             data: Optional[TrainingSet] = None, workers: Optional[int] = None,
             show_progress: bool = True) -> ValidationReport:
    """Average posterior trace and MAP error of a design over validation data.

    `error_model` is the aware total-error model; mode='unaware' replaces it
    with the noise-only model for the inversions while keeping the same data.
    """
    if n_v < 1:
        raise ValueError(f"n_v must be >= 1, got {n_v}")
    if mode not in INVERSION_MODES:
        raise ValueError(f"inversion mode must be one of {INVERSION_MODES}, got {mode!r}")
    data = data if data is not None else validation_set(forward, n_v, seed)
    if len(data) < n_v:
        raise ValueError(f"validation set holds {len(data)} samples, {n_v} requested")

    model = error_model if mode == 'aware' else unaware_error_model(forward.sigma, forward.n_s)
    rl = restrict(model, design)
    rows = parallel_map(lambda i: _validate_sample(forward, prior, rl, data[i]), n_v, workers,
                        desc=f'Validating ({mode}, {design.n_act} sensors)', show_progress=show_progress)

    ok = [r for r in rows if r.converged]
    n_failed = n_v - len(ok)
    trusted = n_failed <= Config.MAX_FAILURE_FRACTION * n_v
    if not trusted:
        logger.warning(f"{n_failed}/{n_v} validation inversions failed; report marked untrusted")
    V_bar = float(np.mean([r.trace for r in ok])) if ok else np.nan
    E_bar = float(np.mean([r.rel_error for r in ok])) if ok else np.nan
    return ValidationReport(design, V_bar, E_bar, rows, n_v, mode, n_failed, trusted)


def compare_designs(forward: ForwardModel, prior: GaussianFieldPrior, error_model: ErrorModel,
                    designs: Dict[str, Sequence[Design]], n_v: int, seed: int,
                    workers: Optional[int] = None,
                    mode: str = 'aware') -> Tuple[List[dict], List[ValidationReport]]:
    """Cloud table (design_kind, K, V_bar, E_map_bar) on one shared validation set.

    Every design is inverted in the given mode. Returns the table rows and the
    full report of every row, in the same order.
    """
    data = validation_set(forward, n_v, seed)
    rows, reports = [], []
    for kind, group in designs.items():
        for design in tqdm(group, desc=f'Validating {kind} designs', disable=len(group) < 2):
            report = validate(forward, prior, design, n_v, mode, seed, error_model,
                              data=data, workers=workers, show_progress=False)
            rows.append({'design_kind': kind, 'K': design.n_act,
                         'V_bar': report.V_bar, 'E_map_bar': report.E_map_bar})
            reports.append(report)
            logger.info(f"{kind} design (K={design.n_act}): V_bar={report.V_bar:.6e}, "
                        f"E_map_bar={report.E_map_bar:.4f}")
    return rows, reports


def random_designs(K: int, count: int, seed: int, n_s: int) -> List[Design]:
    return [random_design(K, random_stream(seed, 'random-design', i), n_s) for i in range(count)]


def nd_study(forward: ForwardModel, prior: GaussianFieldPrior, error_model: ErrorModel,
             nd_values: Sequence[int], K: int, seed: int, validation_seed: int, n_v: int,
             kind: str = 'eig', n_tr: int = 30, workers: Optional[int] = None) -> List[dict]:
    """V_bar at the greedy-optimal design for each training-set size"""
    if not nd_values:
        raise ValueError("nd_values must not be empty")
    data = validation_set(forward, n_v, validation_seed)
    table = []
    for n_d in nd_values:
        training_seed = int(random_stream(seed, 'nd-study', n_d).integers(2 ** 31))
        training = make_training_set(forward, n_d, training_seed)
        cfg = OedObjectiveConfig(kind=kind, training=training, error_model=error_model,
                                 n_tr=n_tr, seed=seed, workers=workers)
        trace = greedy(K, OedObjective(forward, prior, cfg))
        report = validate(forward, prior, trace.design(forward.n_s), n_v, 'aware', validation_seed,
                          error_model, data=data, workers=workers, show_progress=False)
        table.append({'n_d': n_d, 'V_bar': report.V_bar, 'V_std_error': report.V_std_error,
                      'E_map_bar': report.E_map_bar, 'picks': trace.picks})
        logger.info(f"n_d={n_d}: V_bar={report.V_bar:.6e}, picks={trace.picks}")
    return table


def unaware_hazard(forward: ForwardModel, prior: GaussianFieldPrior, error_model: ErrorModel,
                   design: Design, n_v: int, seeds: Sequence[int],
                   workers: Optional[int] = None) -> dict:
    """Compare aware and unaware inversions on identical data per replicate seed.

    The hazard shows as a smaller reported posterior trace together with a
    larger MAP error for the unaware inversion.
    """
    replicates = []
    for seed in seeds:
        data = validation_set(forward, n_v, seed)
        aware = validate(forward, prior, design, n_v, 'aware', seed, error_model,
                         data=data, workers=workers, show_progress=False)
        unaware = validate(forward, prior, design, n_v, 'unaware', seed, error_model,
                           data=data, workers=workers, show_progress=False)
        replicates.append({
            'seed': seed,
            'V_bar_aware': aware.V_bar, 'V_bar_unaware': unaware.V_bar,
            'E_map_bar_aware': aware.E_map_bar, 'E_map_bar_unaware': unaware.E_map_bar,
            'hazard': bool(unaware.V_bar < aware.V_bar and unaware.E_map_bar > aware.E_map_bar),
        })
    votes = sum(r['hazard'] for r in replicates)
    return {'replicates': replicates, 'votes': votes, 'majority': votes > len(replicates) / 2}
