#!/usr/bin/env python3
"""
Uncertainty-Aware Sensor Placement Pipeline

Command-line driver for the full experiment:
1. bae          Monte Carlo statistics of the approximation error (eps0, Gamma_nu)
2. oed          greedy A-optimal sensor selection (aware or unaware error model)
3. invert       MAP point and low-rank posterior for one design and data vector
4. validate     expected posterior variance / MAP error of stored and random designs
5. hazard       aware vs unaware inversion of the same data over seed replicates
6. nd-study     effect of the training-set size on the selected designs
7. sandbox-check  dense identity checks on random linear models

Every command reads one run file (see RunConfig) and writes plain CSV/JSON.
"""

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from config import Config, ConfigError, RunConfig
from forward_bae import ErrorModel, ForwardModel, estimate_bae, make_training_set
from inversion import BayesianInversion, Design, restrict
from linear_sandbox import sandbox_checks
from mesh_fem import Mesh, SensorGrid, build_box_mesh, field_coordinates, regular_sensor_grid
from numkit import SOLVE_LEDGER, ContractViolation, ConvergenceError, gaussian_vector, random_stream
from oed import (GreedyAbort, OedObjective, OedObjectiveConfig, expected_evaluations, greedy,
                 unaware_error_model)
from prior import GaussianFieldPrior, make_m_prior, make_xi_prior
from result_store import ResultStore
from validation import compare_designs, nd_study, random_designs, unaware_hazard

logger = logging.getLogger(__name__)

ND_STUDY_VALUES = (3, 5, 10, 20, 30)
HAZARD_REPLICATES = 20


def setup_logging():
    """Configure logging for the application"""
    logging.basicConfig(
        level=getattr(logging, Config.LOG_LEVEL),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(Config.LOG_FILE),
            logging.StreamHandler(sys.stdout)
        ]
    )


@dataclass
class Problem:
    """Mesh, sensors, priors and forward model of one run"""
    run: RunConfig
    mesh: Mesh
    sensors: SensorGrid
    m_prior: GaussianFieldPrior
    xi_prior: GaussianFieldPrior
    forward: ForwardModel


def build_problem(run: RunConfig) -> Problem:
    mesh = build_box_mesh(run.nx, run.ny, run.nz)
    sensors = regular_sensor_grid(mesh, run.sensors_per_side, run.sensor_margin)
    m_prior = make_m_prior(mesh, run)
    xi_prior = make_xi_prior(mesh, run)
    forward = ForwardModel(mesh, sensors, m_prior, xi_prior, sigma=run.sigma)
    logger.info(f"Mesh {run.nx}x{run.ny}x{run.nz}: {mesh.n_nodes} nodes, "
                f"{mesh.n_bottom} Robin nodes, {sensors.n_s} candidate sensors")
    return Problem(run, mesh, sensors, m_prior, xi_prior, forward)


def error_model_for(problem: Problem, store: ResultStore, unaware: bool,
                    compute_missing: bool = False) -> ErrorModel:
    """Noise-only model when unaware, otherwise the stored (or freshly sampled) BAE model"""
    run = problem.run
    if unaware:
        return unaware_error_model(run.sigma, problem.sensors.n_s)
    try:
        model = store.load_error_model()
    except ConfigError:
        if not compute_missing:
            raise
        logger.info("No stored error model; sampling it now")
        model = estimate_bae(problem.forward, run.n_mc, run.seed, workers=run.workers)
        store.save_error_model(model)
    if model.n_s != problem.sensors.n_s:
        raise ConfigError(f"stored error model has {model.n_s} sensors, run uses {problem.sensors.n_s}")
    return model


def cmd_bae(problem: Problem, store: ResultStore) -> Dict[str, object]:
    run = problem.run
    model = estimate_bae(problem.forward, run.n_mc, run.seed, workers=run.workers)
    store.save_error_model(model)
    store.save_table('bae_sensor_stats.csv', [
        {'sensor': j, 'x': float(x), 'y': float(y), 'eps0': float(e), 'std': float(s)}
        for j, ((x, y, _), e, s) in enumerate(zip(problem.sensors.points, model.eps0, model.marginal_std()))
    ])
    np.savetxt(store.path('bae_correlation.csv'), model.correlation(), delimiter=',', fmt='%.17g')
    return {
        'n_mc': model.n_mc_used,
        'max_abs_eps0': float(np.max(np.abs(model.eps0))),
        'max_std': float(np.max(model.marginal_std())),
        'max_offdiag_correlation': model.max_offdiag_correlation(),
    }


def cmd_oed(problem: Problem, store: ResultStore, unaware: bool, compute_bae: bool) -> Dict[str, object]:
    run = problem.run
    label = 'unaware' if unaware else 'aware'
    model = error_model_for(problem, store, unaware, compute_missing=compute_bae)
    training = make_training_set(problem.forward, run.n_d, run.seed,
                                 reuse_bae_samples=run.reuse_bae_samples)
    cfg = OedObjectiveConfig(kind=run.objective, training=training, error_model=model,
                             r_fixed=run.r_fixed, n_tr=run.n_tr, seed=run.seed,
                             warm_start=run.warm_start, workers=run.workers)
    trace = greedy(run.K, OedObjective(problem.forward, problem.m_prior, cfg))

    store.save_design(f'design_{label}.txt', trace.design(problem.sensors.n_s))
    record = trace.to_record()
    record.update({'mode': label, 'seed': run.seed, 'config': run.echo()})
    store.save_json(f'greedy_{label}.json', record)
    store.save_table(f'greedy_{label}.csv', [
        {'step': k + 1, 'sensor': j, 'objective': v}
        for k, (j, v) in enumerate(zip(trace.picks, trace.objective_values))
    ])
    if trace.skipped == 0 and trace.evaluations != expected_evaluations(run.K, problem.sensors.n_s):
        logger.warning(f"Evaluation count {trace.evaluations} differs from "
                       f"{expected_evaluations(run.K, problem.sensors.n_s)}")
    return {'mode': label, 'picks': trace.picks, 'evaluations': trace.evaluations,
            'skipped': trace.skipped}


def cmd_invert(problem: Problem, store: ResultStore, unaware: bool,
               design_file: Optional[str], data_file: Optional[str]) -> Dict[str, object]:
    run = problem.run
    n_s = problem.sensors.n_s
    design = store.load_design(design_file, n_s) if design_file else Design.full(n_s)

    truth = None
    if data_file:
        y = store.load_vector(data_file, n_s)
    else:
        m_true, xi_true = problem.forward.draw(run.seed, 'truth', 0)
        eta = run.sigma * gaussian_vector(random_stream(run.seed, 'truth-noise', 0), n_s)
        y = problem.forward.forward_full(m_true, xi_true) + eta
        truth = m_true
        store.save_vector('synthetic_data.csv', y, header=f'seed={run.seed}')
        store.save_field('m_true.csv', m_true, field_coordinates(problem.mesh, 'bottom'))

    model = error_model_for(problem, store, unaware)
    inversion = BayesianInversion(problem.forward, problem.m_prior, restrict(model, design))
    map_result = inversion.solve_map(y)
    posterior = inversion.posterior_lowrank(map_result, r=run.r_fixed or design.n_act)

    coords = field_coordinates(problem.mesh, 'bottom')
    store.save_mesh(problem.mesh)
    label = 'unaware' if unaware else 'aware'
    store.save_field(f'm_map_{label}.csv', map_result.m_map, coords)
    store.save_field(f'posterior_variance_{label}.csv', posterior.pointwise_posterior_variance(), coords)
    store.save_vector(f'eigenvalues_{label}.csv', posterior.eigpairs.values)

    summary = {
        'mode': label,
        'n_act': design.n_act,
        'iterations': map_result.iterations,
        'converged': map_result.converged,
        'initial_gradient_norm': map_result.initial_gradient_norm,
        'final_gradient_norm': map_result.final_gradient_norm,
        'misfit': map_result.cost_terms[0],
        'prior_cost': map_result.cost_terms[1],
        'rank_used': posterior.rank_used,
        'posterior_trace': posterior.posterior_trace(),
        'prior_trace': problem.m_prior.trace(),
        'solves': SOLVE_LEDGER.counts(),
    }
    if truth is not None:
        diff = map_result.m_map.values - truth.values
        M = problem.m_prior.M
        summary['relative_error'] = float(np.sqrt((diff @ (M @ diff)) / (truth.values @ (M @ truth.values))))
    store.save_json(f'invert_{label}.json', summary)
    return summary


def cmd_validate(problem: Problem, store: ResultStore, design_files: List[str],
                 n_random: int, unaware: bool = False) -> Dict[str, object]:
    """Validate stored and random designs; unaware inverts the same data with the noise-only model"""
    run = problem.run
    n_s = problem.sensors.n_s
    mode = 'unaware' if unaware else 'aware'
    suffix = '_unaware' if unaware else ''
    model = error_model_for(problem, store, unaware=False)
    designs: Dict[str, List[Design]] = {}
    for name in design_files:
        designs[Path(name).stem] = [store.load_design(name, n_s)]
    if n_random:
        designs['random'] = random_designs(run.K, n_random, run.validation_seed, n_s)
    if not designs:
        raise ConfigError("validate needs at least one --designs file or --random N")

    rows, reports = compare_designs(problem.forward, problem.m_prior, model, designs, run.n_v,
                                    run.validation_seed, workers=run.workers, mode=mode)
    store.save_table(f'validation_cloud{suffix}.csv', rows)
    for row, report in zip(rows, reports):
        if row['design_kind'] == 'random':
            continue
        store.save_table(f"validation_{row['design_kind']}{suffix}.csv", [
            {'index': r.index, 'trace': r.trace, 'rel_error': r.rel_error, 'converged': r.converged}
            for r in report.per_sample
        ])
        store.save_json(f"validation_{row['design_kind']}{suffix}.json", report.summary())
    return {'mode': mode, 'designs': len(rows), 'untrusted': sum(not r.trusted for r in reports)}


def cmd_hazard(problem: Problem, store: ResultStore, design_file: Optional[str],
               replicates: int) -> Dict[str, object]:
    """Aware vs unaware inversion of aware-generated data over seed replicates"""
    run = problem.run
    if replicates < 1:
        raise ConfigError(f"hazard needs at least one replicate, got {replicates}")
    design = store.load_design(design_file or 'design_aware.txt', problem.sensors.n_s)
    model = error_model_for(problem, store, unaware=False)
    seeds = [int(random_stream(run.validation_seed, 'hazard', i).integers(2 ** 31)) for i in range(replicates)]
    result = unaware_hazard(problem.forward, problem.m_prior, model, design, run.n_v, seeds,
                            workers=run.workers)
    store.save_table('hazard.csv', result['replicates'])
    store.save_json('hazard.json', {**result, 'active': design.active, 'n_v': run.n_v})
    return {'replicates': replicates, 'votes': result['votes'], 'majority': result['majority']}


def cmd_nd_study(problem: Problem, store: ResultStore, nd_values: List[int]) -> Dict[str, object]:
    run = problem.run
    model = error_model_for(problem, store, unaware=False)
    table = nd_study(problem.forward, problem.m_prior, model, nd_values, run.K, run.seed,
                     run.validation_seed, run.n_v, kind=run.objective, n_tr=run.n_tr,
                     workers=run.workers)
    store.save_table('nd_study.csv', table)
    return {'rows': len(table)}


def cmd_sandbox_check(run: RunConfig, store: ResultStore) -> Dict[str, object]:
    table = sandbox_checks(seed=run.seed)
    store.save_table('sandbox_checks.csv', table)
    failed = [row['check'] for row in table if not row['passed']]
    if failed:
        raise ContractViolation(f"sandbox identities failed: {', '.join(failed)}")
    return {'checks': len(table), 'failed': 0}


def resolve_run_config(args) -> RunConfig:
    """Run file (or defaults) with command-line overrides applied"""
    run = (RunConfig.from_file(args.config) if args.config
           else RunConfig.from_mapping({}, use_environment=True))
    overrides = {}
    if args.seed is not None:
        overrides['seed'] = args.seed
    if args.workers is not None:
        overrides['workers'] = args.workers
    if args.objective is not None:
        overrides['objective'] = args.objective
    if args.out is not None:
        overrides['output_dir'] = args.out
    if args.unaware:
        overrides['inversion_mode'] = 'unaware'
    return dataclasses.replace(run, **overrides) if overrides else run


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Uncertainty-aware optimal sensor placement')
    parser.add_argument('command',
                        choices=['bae', 'oed', 'invert', 'validate', 'hazard', 'nd-study', 'sandbox-check'],
                        help='Pipeline stage to run')
    parser.add_argument('--config', '-c',
                        help='Run file with KEY=value lines (default: built-in settings)')
    parser.add_argument('--seed', type=int,
                        help=f'Master seed (default: {Config.MASTER_SEED})')
    parser.add_argument('--workers', '-w', type=int,
                        help='Worker threads, 0 for all cores (default: from run file)')
    parser.add_argument('--unaware', action='store_true',
                        help='Use the noise-only error model instead of the BAE model')
    parser.add_argument('--objective', choices=['eig', 'trace'],
                        help='OED objective (default: from run file)')
    parser.add_argument('--out', '-o',
                        help=f'Output directory (default: {Config.OUTPUT_DIR})')
    parser.add_argument('--compute-bae', action='store_true',
                        help='oed: sample the error model when no stored one exists')
    parser.add_argument('--design',
                        help='invert/hazard: design file (default: all sensors / design_aware.txt)')
    parser.add_argument('--data',
                        help='invert: data file (default: synthesize from a prior draw)')
    parser.add_argument('--designs', nargs='+', default=[],
                        help='validate: design files, relative to the output directory')
    parser.add_argument('--random', type=int, default=0,
                        help='validate: number of random K-sensor designs to add (e.g. 50)')
    parser.add_argument('--replicates', type=int, default=HAZARD_REPLICATES,
                        help=f'hazard: number of seed replicates (default: {HAZARD_REPLICATES})')
    parser.add_argument('--nd-values', type=int, nargs='+', default=list(ND_STUDY_VALUES),
                        help='nd-study: training-set sizes (default: 3 5 10 20 30)')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main processing function; returns 0, 2 (configuration) or 3 (numerical failure)"""
    args = build_parser().parse_args(argv)

    setup_logging()

    try:
        run = resolve_run_config(args)
    except (ConfigError, ValueError) as e:
        logger.error(f"Invalid configuration: {e}")
        return 2

    logger.info("="*60)
    logger.info(f"Sensor placement: {args.command}")
    logger.info("="*60)
    logger.info(f"Mesh: {run.nx}x{run.ny}x{run.nz}, sensors: {run.n_s}, sigma: {run.sigma}")
    logger.info(f"Seed: {run.seed}, workers: {Config.resolved_workers(run.workers)}")
    logger.info(f"Output directory: {run.output_dir}")

    store = ResultStore(run.output_dir)
    unaware = run.inversion_mode == 'unaware'
    SOLVE_LEDGER.reset()

    try:
        Path(run.output_dir).mkdir(parents=True, exist_ok=True)
        run.save(str(store.path('run.cfg')))
        if args.command == 'sandbox-check':
            result = cmd_sandbox_check(run, store)
        else:
            problem = build_problem(run)
            if args.command == 'bae':
                result = cmd_bae(problem, store)
            elif args.command == 'oed':
                result = cmd_oed(problem, store, unaware, args.compute_bae)
            elif args.command == 'invert':
                result = cmd_invert(problem, store, unaware, args.design, args.data)
            elif args.command == 'validate':
                result = cmd_validate(problem, store, args.designs, args.random, unaware)
            elif args.command == 'hazard':
                result = cmd_hazard(problem, store, args.design, args.replicates)
            else:
                result = cmd_nd_study(problem, store, args.nd_values)

    except (ConvergenceError, ContractViolation, GreedyAbort, np.linalg.LinAlgError) as e:
        logger.error(f"Numerical failure: {e}")
        return 3
    except (ConfigError, ValueError) as e:
        logger.error(f"Configuration error: {e}")
        return 2
    except Exception as e:
        logger.error(f"Unexpected error during {args.command}: {e}", exc_info=True)
        return 3

    logger.info("="*60)
    logger.info(f"{args.command} complete - Final Statistics:")
    logger.info("="*60)
    for key, value in result.items():
        logger.info(f"{key}: {value}")
    counts = SOLVE_LEDGER.counts()
    logger.info(f"Linear solves: {SOLVE_LEDGER.total()} total")
    for tag in sorted(counts):
        logger.info(f"  {tag}: {counts[tag]}")
    logger.info(f"Files written: {store.stats['files_written']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
