"""
Experiment pipeline: embed -> initialize -> integrate -> evaluate.

run_experiment() executes one ExperimentConfig and writes its artifacts
(errors.csv, solution.csv, trajectory/, manifest.json) into
<output_dir>/<name>. run_bench() runs a suite of config variants in parallel
and collects their error curves into one table.
"""

import copy
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd

from lib.config import ExperimentConfig, load_config
from lib.embedding import (UNIT_SQUARE, BoundaryKind, DiscreteBasis, IdentityBasis,
                           analytic_eigenpairs, boundary_points, eval_embedding, fourier_features,
                           load_discrete)
from lib.errors import ConfigurationError, EdnnError
from lib.fem import read_mesh
from lib.hole_inputs import HoleInputs, prepare_hole_inputs
from lib.integrate import run
from lib.network import (RAW, MlpConfig, NetQuery, Wrapper, forward, init_params, load_checkpoint,
                         save_checkpoint)
from lib.pde import (PARAM_BOX, PROBLEMS, frame_to_array, holes_problem, kdv_exact, metrics, param_grid,
                     relative_l2_error, embedding_projection_error, solution_frame, static_problem)
from lib.reference import (reference_solver_1d, reference_solver_2d, reference_solver_fem,
                           reference_static_2d)
from lib.sampling import ActiveSampler, build_candidates
from lib.train import AdamConfig, fit_initial, fit_static_residual
from lib.update import EdnnSystem

logger = logging.getLogger(__name__)

CODE_VERSION = '1.0.0'
CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'configs')


@dataclass
class RunManifest:
    name: str
    config_hash: str
    code_version: str = CODE_VERSION
    status: str = 'completed'
    message: str = ''
    timings: dict = field(default_factory=dict)
    files: list = field(default_factory=list)     # [{'path', 'sha256'}]

    def add_file(self, path, root):
        self.files.append({'path': os.path.relpath(path, root),
                           'sha256': file_digest(path)})

    def save(self, directory):
        path = os.path.join(directory, 'manifest.json')
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(asdict(self), f, indent=2)
        return path


@dataclass
class RunResult:
    manifest: RunManifest
    errors: pd.DataFrame
    theta0: np.ndarray = None
    trajectory: object = None
    directory: str = ''


def file_digest(path):
    h = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            h.update(chunk)
    return h.hexdigest()


# --------------------------------------------------------------------------
# Building blocks
# --------------------------------------------------------------------------

def make_problem(cfg):
    opts = cfg.options
    if cfg.problem in PROBLEMS:
        problem = PROBLEMS[cfg.problem]()
    elif cfg.problem in ('holes', 'holes-param'):
        if cfg.embedding.kind != 'file':
            raise ConfigurationError(f"{cfg.problem} needs a discrete embedding file (embedding.kind = 'file')")
        kwargs = {} if opts.diffusion is None else {'diffusion': opts.diffusion}
        problem = holes_problem(cfg.embedding.path, opts.velocity_file,
                                PARAM_BOX if cfg.problem == 'holes-param' else None, **kwargs)
    else:
        raise ConfigurationError(f"{cfg.problem} is not a time-dependent problem")
    if opts.T is not None:
        problem = replace(problem, T=float(opts.T))
    return problem


def make_basis(cfg, problem):
    emb = cfg.embedding
    if emb.kind == 'analytic':
        if problem.make_basis is None:
            raise ConfigurationError(f"{problem.name} has no analytic embedding")
        return problem.make_basis(emb.n_phi)
    if emb.kind == 'file':
        if problem.make_basis is not None and cfg.problem.startswith('holes'):
            return problem.make_basis(emb.n_phi)
        return load_discrete(emb.path)
    if emb.kind == 'fourier':
        return fourier_features(emb.sigma, emb.n_phi, problem.dim, emb.seed)
    return IdentityBasis(problem.dim)


def spatial_set(problem, basis):
    return basis.points if isinstance(basis, DiscreteBasis) else problem.domain


def make_wrapper(cfg, problem):
    if cfg.wrapper == 'raw':
        return RAW
    if cfg.wrapper == 'hom_dirichlet':
        return Wrapper(hom_dirichlet=True)
    if cfg.wrapper == 'lifted':
        return Wrapper(lift=problem.lift)
    return problem.wrapper()


def initial_parameters(cfg, problem, basis, net, wrapper, progress=False):
    """theta0 from a checkpoint, the training-free construction, or an ADAM fit of u0"""
    if cfg.train.checkpoint:
        saved, theta, _, _ = load_checkpoint(cfg.train.checkpoint)
        if tuple(saved.widths) != tuple(net.widths):
            raise ConfigurationError(f"checkpoint {cfg.train.checkpoint} has widths {saved.widths}, "
                                     f"config expects {net.widths}")
        return theta, wrapper, None
    if cfg.train.train_free or cfg.wrapper == 'train_free':
        theta0 = init_params(net, cfg.seed)
        return theta0, wrapper.with_train_free(problem.u0_jets, theta0), None

    points = build_candidates(spatial_set(problem, basis), problem.param_box, cfg.train.points,
                              cfg.seed + 1, basis, max_order=0)
    adam = AdamConfig(lr=cfg.train.lr, iterations=cfg.training_iterations, batch_size=cfg.train.batch_size,
                      seed=cfg.seed)
    theta0, report = fit_initial(net, problem.u0, points.query, adam, wrapper, init_params(net, cfg.seed),
                                 progress)
    return theta0, wrapper, report


def collocation(cfg, problem, basis, net, wrapper):
    """Fixed batch, or an active sampler over a candidate pool; returns (batch, sampler)"""
    s = cfg.sampling
    where = spatial_set(problem, basis)
    if s.mode == 'fixed':
        if isinstance(basis, DiscreteBasis) and s.n_points >= basis.n_points:
            # every tabulated point once, each with its own random parameter
            rng = np.random.default_rng(s.seed)
            box = np.array(problem.param_box, dtype=float).reshape(-1, 2)
            params = box[:, 0] + (box[:, 1] - box[:, 0]) * rng.random((basis.n_points, len(box)))
            emb = basis.evaluate_rows(np.arange(basis.n_points), problem.order)
            return NetQuery(basis.points, emb, params), None
        cand = build_candidates(where, problem.param_box, s.n_points, s.seed, basis, problem.order)
        return cand.query, None
    n_cand = s.n_candidates or 10 * s.n_points
    cand = build_candidates(where, problem.param_box, n_cand, s.seed, basis, problem.order)
    sampler = ActiveSampler(problem, net, wrapper, cand, s.n_points, s.criterion, s.seed + 1)
    return cand.query.take(np.arange(s.n_points)), sampler


def evaluation_times(cfg, problem):
    times = cfg.evaluation.times or problem.checkpoints
    return np.array(sorted({0.0, float(problem.T), *[float(t) for t in times if 0 < t < problem.T]}))


def reference_solution(cfg, problem, basis, times, params):
    """(x, values (n_times, n_params, n_points)) of the reference"""
    ev = cfg.evaluation
    if cfg.problem == 'kdv':
        x = np.linspace(problem.domain.a, problem.domain.b, ev.nx, endpoint=False)[:, None]
        return x, np.stack([[kdv_exact(x[:, 0], t)] for t in times])
    if cfg.problem == 'heat':
        ref = reference_solver_1d(problem, ev.nx, ev.reference_dt, times, params)
        return ref.x, ref.values
    if cfg.problem == 'advdiff':
        ref = reference_solver_2d(problem, ev.nx, ev.reference_dt, times, params)
        return ref.x, ref.values
    x = basis.points
    if cfg.options.reference_file:
        df = pd.read_csv(cfg.options.reference_file, float_precision='round_trip')
        return x, frame_to_array(df, times, params, x)
    if cfg.options.mesh:
        kwargs = {} if cfg.options.diffusion is None else {'diffusion': cfg.options.diffusion}
        ref = reference_solver_fem(problem, read_mesh(cfg.options.mesh), ev.reference_dt, times, params, **kwargs)
        if ref.x.shape != x.shape or not np.array_equal(ref.x, x):
            raise ConfigurationError("FE reference nodes differ from the embedding point set")
        return x, ref.values
    raise ConfigurationError(f"{cfg.problem} needs options.reference_file or options.mesh for evaluation")


def network_solution(net, wrapper, basis, x, times, thetas, params):
    emb = eval_embedding(basis, x, 0)
    n = len(x)
    out = np.empty((len(times), len(params), n))
    for k, alpha in enumerate(params):
        query = NetQuery(x, emb, np.broadcast_to(alpha, (n, len(alpha))).copy())
        for i, theta in enumerate(thetas):
            out[i, k] = forward(net, theta, query, wrapper)
    return out


# --------------------------------------------------------------------------
# Pipelines
# --------------------------------------------------------------------------

def prepare_inputs(cfg, progress=False):
    """Build the hole-domain input files a config with options.prepare still lacks"""
    if not cfg.options.prepare:
        return []
    written = prepare_hole_inputs(HoleInputs.from_embedding(cfg.embedding.path), progress=progress)
    if written:
        logger.info("%s: built %d input file(s)", cfg.name, len(written))
    return written


def run_experiment(cfg, progress=False, out_dir=None):
    """
    Execute one experiment and write its artifacts

    Returns:
        RunResult. Library errors propagate after the partial artifacts and a
        manifest with the error message have been written.
    """
    if cfg.problem == 'static':
        return run_static(cfg, progress, out_dir)
    prepare_inputs(cfg, progress)
    cfg.check_files()
    directory = out_dir or os.path.join(cfg.output_dir, cfg.name)
    os.makedirs(directory, exist_ok=True)
    manifest = RunManifest(cfg.name, cfg.digest())
    timings = manifest.timings
    trajectory = None
    net = None
    try:
        start = time.time()
        problem = make_problem(cfg)
        basis = make_basis(cfg, problem)
        net = MlpConfig.parse(cfg.net.widths, basis.n_features + problem.param_dim)
        wrapper = make_wrapper(cfg, problem)
        timings['setup'] = time.time() - start

        start = time.time()
        theta0, wrapper, report = initial_parameters(cfg, problem, basis, net, wrapper, progress)
        timings['training'] = time.time() - start
        ckpt = os.path.join(directory, 'theta0.ckpt')
        save_checkpoint(ckpt, net, theta0, cfg.seed, 0.0)
        manifest.add_file(ckpt, directory)
        if report is not None:
            loss_path = os.path.join(directory, 'training_loss.csv')
            pd.DataFrame({'iteration': np.arange(1, len(report.losses) + 1), 'loss': report.losses}) \
                .to_csv(loss_path, index=False)
            manifest.add_file(loss_path, directory)

        start = time.time()
        batch, sampler = collocation(cfg, problem, basis, net, wrapper)
        system = EdnnSystem(problem, net, batch, wrapper)
        times = evaluation_times(cfg, problem)
        trajectory = run(system, theta0, cfg.stepper.build(), problem.T, times[1:-1], 0.0, sampler, progress)
        timings['integration'] = time.time() - start

        start = time.time()
        params = param_grid(problem.param_box, cfg.evaluation.n_params)
        x, ref = reference_solution(cfg, problem, basis, times, params)
        timings['reference'] = time.time() - start

        start = time.time()
        nn = network_solution(net, wrapper, basis, x, trajectory.times, trajectory.thetas, params)
        report_err = metrics(nn, ref, times, problem.normalization)
        timings['evaluation'] = time.time() - start

        errors = report_err.to_frame()
        err_path = os.path.join(directory, 'errors.csv')
        errors.to_csv(err_path, index=False)
        manifest.add_file(err_path, directory)
        sol_path = os.path.join(directory, 'solution.csv')
        solution_frame(times, x, params, nn).to_csv(sol_path, index=False)
        manifest.add_file(sol_path, directory)
        logger.info("%s: final error %.3e", cfg.name, errors['eps'].iloc[-1])
        return RunResult(manifest, errors, theta0, trajectory, directory)
    except EdnnError as e:
        manifest.status, manifest.message = 'failed', str(e)
        trajectory = getattr(e, 'trajectory', trajectory)
        raise
    finally:
        if trajectory is not None and net is not None:
            for path in trajectory.save(os.path.join(directory, 'trajectory'), net, cfg.seed):
                manifest.add_file(path, directory)
        manifest.save(directory)


def static_basis(cfg):
    emb = cfg.embedding
    if emb.kind == 'analytic':
        return analytic_eigenpairs(UNIT_SQUARE, BoundaryKind.DIRICHLET, emb.n_phi)
    if emb.kind == 'fourier':
        return fourier_features(emb.sigma, emb.n_phi, 2, emb.seed)
    if emb.kind == 'file':
        return load_discrete(emb.path)
    return IdentityBasis(2)


def run_static(cfg, progress=False, out_dir=None):
    """Residual training of the static problem; error against the FD reference"""
    cfg.check_files()
    directory = out_dir or os.path.join(cfg.output_dir, cfg.name)
    os.makedirs(directory, exist_ok=True)
    manifest = RunManifest(cfg.name, cfg.digest())
    try:
        problem = static_problem()
        basis = static_basis(cfg)
        net = MlpConfig.parse(cfg.net.widths, basis.n_features)
        harmonic = cfg.embedding.kind in ('analytic', 'file')
        wrapper = Wrapper(hom_dirichlet=True) if harmonic and cfg.wrapper != 'raw' else RAW

        points = build_candidates(UNIT_SQUARE, (), cfg.train.points, cfg.seed + 1, basis, 2).query
        bc_query = None
        if not harmonic:
            bx, _, _ = boundary_points(UNIT_SQUARE, max(1, cfg.train.points // 20), cfg.seed + 2)
            bc_query = NetQuery.build(basis, bx, None, 0)
        adam = AdamConfig(lr=cfg.train.lr, iterations=cfg.training_iterations,
                          batch_size=cfg.train.batch_size, seed=cfg.seed)
        start = time.time()
        theta, report = fit_static_residual(net, problem, points, adam, bc_query, cfg.train.bc_weight, wrapper,
                                            init_params(net, cfg.seed), progress)
        manifest.timings['training'] = time.time() - start

        x, u_ref = reference_static_2d(problem, cfg.evaluation.nx)
        u_nn = forward(net, theta, NetQuery.build(basis, x, None, 0), wrapper)
        row = {'embedding': cfg.embedding.kind, 'eps': relative_l2_error(u_nn, u_ref),
               'final_loss': report.final_loss}
        if harmonic:
            row['projection_error'] = embedding_projection_error(eval_embedding(basis, x, 0).phi, u_ref) \
                / np.linalg.norm(u_ref)
        errors = pd.DataFrame([row])
        err_path = os.path.join(directory, 'errors.csv')
        errors.to_csv(err_path, index=False)
        manifest.add_file(err_path, directory)
        loss_path = os.path.join(directory, 'training_loss.csv')
        pd.DataFrame({'iteration': np.arange(1, len(report.losses) + 1), 'loss': report.losses}) \
            .to_csv(loss_path, index=False)
        manifest.add_file(loss_path, directory)
        ckpt = os.path.join(directory, 'theta.ckpt')
        save_checkpoint(ckpt, net, theta, cfg.seed)
        manifest.add_file(ckpt, directory)
        return RunResult(manifest, errors, theta, None, directory)
    except EdnnError as e:
        manifest.status, manifest.message = 'failed', str(e)
        raise
    finally:
        manifest.save(directory)


# --------------------------------------------------------------------------
# Bench suites
# --------------------------------------------------------------------------

# suite -> (base config file, [(variant label, overrides)])
SUITES = {
    'kdv': ('kdv_rb2.json', [
        ('euler h=1e-3', {'stepper': {'kind': 'euler', 'h': 1e-3}}),
        ('tsit5', {'stepper': {'kind': 'tsit5', 'h': 1e-3}}),
        ('rosenbrock23 h=1e-2', {}),
    ]),
    'heat': ('heat_trained.json', [
        ('trained 4x10 n_phi=2', {}),
        ('trained 4x20 n_phi=4', {'net': {'widths': '4x20'}, 'embedding': {'n_phi': 4}}),
        ('train-free 4x10 n_phi=2', {'train': {'train_free': True}}),
        ('train-free 4x20 n_phi=4', {'train': {'train_free': True}, 'net': {'widths': '4x20'},
                                     'embedding': {'n_phi': 4}}),
    ]),
    'advdiff': ('advdiff.json', [
        ('n_x=5000', {'sampling': {'n_points': 5000}}),
        ('n_x=10000', {'sampling': {'n_points': 10000}}),
    ]),
    'holes': ('holes.json', [
        ('n_phi=4', {'embedding': {'n_phi': 4}}),
        ('n_phi=10', {'embedding': {'n_phi': 10}}),
        ('n_phi=15', {'embedding': {'n_phi': 15}}),
    ]),
    'holes-param': ('holes_param.json', [
        ('full mesh', {'sampling': {'mode': 'fixed', 'n_points': 10 ** 9}}),
        ('active n_s=1000', {'sampling': {'mode': 'active', 'n_points': 1000}}),
        ('active n_s=500', {'sampling': {'mode': 'active', 'n_points': 500}}),
    ]),
}


def _merge(base, overrides):
    out = copy.deepcopy(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def suite_variants(suite, config_dir=CONFIG_DIR, tier=None):
    """[(label, ExperimentConfig)] for a suite; names are made unique per variant"""
    if suite not in SUITES:
        raise ConfigurationError(f"unknown bench suite {suite!r}, expected one of {sorted(SUITES)}")
    base_file, variants = SUITES[suite]
    base = load_config(os.path.join(config_dir, base_file)).to_dict()
    if tier is not None:
        base['tier'] = tier
    out = []
    for i, (label, overrides) in enumerate(variants):
        data = _merge(base, overrides)
        data['name'] = f"{base['name']}-v{i}"
        out.append((label, ExperimentConfig.from_dict(data)))
    return out


def _run_variant(label, cfg_dict, out_dir):
    """Worker entry: one isolated variant; returns (label, frame or None, error message)"""
    cfg = ExperimentConfig.from_dict(cfg_dict)
    try:
        result = run_experiment(cfg, progress=False, out_dir=os.path.join(out_dir, cfg.name))
    except Exception as e:  # recorded per variant, the suite continues
        return label, None, f"{type(e).__name__}: {e}"
    frame = result.errors[['t', 'eps']].copy()
    frame.insert(0, 'variant', label)
    return label, frame, ''


def _share_initial_fits(variants, out_dir, progress):
    """Train theta0 once per distinct (problem, embedding, net, train) group and point variants at it"""
    shared = {}
    out = []
    for label, cfg in variants:
        if cfg.train.train_free or cfg.train.checkpoint or cfg.wrapper == 'train_free':
            out.append((label, cfg))
            continue
        d = cfg.to_dict()
        key = json.dumps({k: d[k] for k in ('problem', 'embedding', 'net', 'train', 'wrapper', 'seed', 'tier',
                                            'options')}, sort_keys=True)
        if key not in shared:
            problem = make_problem(cfg)
            basis = make_basis(cfg, problem)
            net = MlpConfig.parse(cfg.net.widths, basis.n_features + problem.param_dim)
            theta0, _, _ = initial_parameters(cfg, problem, basis, net, make_wrapper(cfg, problem), progress)
            path = os.path.join(out_dir, f"theta0_{len(shared)}.ckpt")
            save_checkpoint(path, net, theta0, cfg.seed)
            shared[key] = path
        d['train']['checkpoint'] = shared[key]
        out.append((label, ExperimentConfig.from_dict(d)))
    return out


def bench_workers():
    value = os.environ.get('EDNN_THREADS')
    if value is None:
        return os.cpu_count() or 1
    try:
        n = int(value)
    except ValueError:
        raise ConfigurationError(f"EDNN_THREADS must be an integer, got {value!r}")
    if n < 1:
        raise ConfigurationError(f"EDNN_THREADS must be >= 1, got {n}")
    return n


def run_bench(suite, out_dir, config_dir=CONFIG_DIR, tier=None, workers=None, progress=False):
    """
    Run every variant of a suite, at most `workers` at a time

    Returns:
        (table with columns variant, t, eps; failures with columns variant, error)
    """
    out_dir = os.path.abspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    variants = suite_variants(suite, config_dir, tier)
    for _, cfg in variants:
        prepare_inputs(cfg, progress)
    variants = _share_initial_fits(variants, out_dir, progress)
    workers = workers or bench_workers()
    frames, failures = [], []
    if workers == 1:
        results = [_run_variant(label, cfg.to_dict(), out_dir) for label, cfg in variants]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(variants))) as pool:
            futures = [pool.submit(_run_variant, label, cfg.to_dict(), out_dir) for label, cfg in variants]
            results = [f.result() for f in as_completed(futures)]
    order = {label: i for i, (label, _) in enumerate(variants)}
    for label, frame, message in sorted(results, key=lambda r: order[r[0]]):
        if frame is None:
            logger.warning("variant %s failed: %s", label, message)
            failures.append({'variant': label, 'error': message})
        else:
            frames.append(frame)
    table = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=['variant', 't', 'eps'])
    failed = pd.DataFrame(failures, columns=['variant', 'error'])
    table.to_csv(os.path.join(out_dir, f"bench_{suite}.csv"), index=False)
    failed.to_csv(os.path.join(out_dir, f"bench_{suite}_failures.csv"), index=False)
    return table, failed
