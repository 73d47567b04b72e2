"""
Command-line front end.

    python ednn.py run --config configs/kdv_rb2.json
    python ednn.py bench kdv --out runs/bench
    python ednn.py eigs --mesh data/square_64.mesh --order 2 --nphi 10 --points nodes --out data/square_64.ednb
    python ednn.py train-init --problem heat --net 4x10 --iters 40000 --points 10000 --seed 7 --out theta0.ckpt
    python ednn.py exact kdv --t 0 --nx 1000
    python ednn.py mesh holes --h 0.0125 --out data/holes.mesh

Exit codes: 0 success, 1 numerical failure, 2 configuration error.
"""

import argparse
import logging
import os
import sys
import traceback

import numpy as np
import pandas as pd

from lib.config import load_config
from lib.embedding import save_discrete
from lib.errors import ConfigurationError, EdnnError
from lib.experiment import CONFIG_DIR, SUITES, run_bench, run_experiment, spatial_set
from lib.fem import holes_mesh, laplace_basis, read_mesh, square_mesh, write_mesh
from lib.network import MlpConfig, init_params, save_checkpoint
from lib.pde import PARAM_BOX, PROBLEMS, holes_problem, kdv_exact
from lib.sampling import build_candidates
from lib.train import AdamConfig, fit_initial

logger = logging.getLogger(__name__)


def setup_logging(verbose=False):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s', force=True)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_run(args):
    cfg = load_config(args.config)
    if args.tier:
        cfg = type(cfg).from_dict({**cfg.to_dict(), 'tier': args.tier})
    print(f"🚀 Running {cfg.name} ({cfg.problem}, {cfg.stepper.kind}, tier={cfg.tier})")
    result = run_experiment(cfg, progress=args.progress, out_dir=args.out)
    final = result.errors.iloc[-1]
    if 'eps' in final:
        print(f"📊 final relative error: {final['eps']:.4e}")
    print(f"💾 Artifacts written to {result.directory}")
    print("✅ Done")
    return 0


def cmd_bench(args):
    print(f"🚀 Bench suite {args.suite}")
    table, failed = run_bench(args.suite, args.out, args.configs, args.tier, args.workers, args.progress)
    for variant, rows in table.groupby('variant', sort=False):
        print(f"📊 {variant:28s} final eps = {rows['eps'].iloc[-1]:.4e}")
    for _, row in failed.iterrows():
        print(f"❌ {row['variant']}: {row['error']}")
    print(f"💾 {os.path.join(args.out, f'bench_{args.suite}.csv')}")
    return 0 if failed.empty else 1


def cmd_eigs(args):
    print(f"🚀 Laplace eigenbasis of {args.mesh} (P{args.order}, n_phi={args.n_phi})")
    mesh = read_mesh(args.mesh)
    basis, space, sol = laplace_basis(mesh, args.order, args.n_phi, args.tol, _eig_points(args.points),
                                      provenance={'mesh': os.path.basename(args.mesh)})
    save_discrete(basis, args.out, basis.manifest)
    print(f"📊 eigenvalues: {np.array2string(sol.eigenvalues, precision=4)}")
    print(f"💾 {args.out} ({basis.n_points} points, {space.n_dofs} dofs)")
    return 0


def _eig_points(spec):
    # 'nodes' tabulates at the mesh vertices
    if spec == 'nodes':
        return None
    if not os.path.exists(spec):
        raise ConfigurationError(f"--points must be 'nodes' or an x,y CSV file, got {spec!r}")
    df = pd.read_csv(spec, float_precision='round_trip')
    if not {'x', 'y'} <= set(df.columns):
        raise ConfigurationError(f"{spec}: expected x,y columns, got {list(df.columns)}")
    return df[['x', 'y']].to_numpy(dtype=float)


def cmd_train_init(args):
    if args.problem in PROBLEMS:
        problem = PROBLEMS[args.problem]()
        basis = problem.make_basis(args.n_phi)
    else:
        if not args.embedding:
            raise ConfigurationError(f"--embedding is required for {args.problem}")
        problem = holes_problem(args.embedding, None, PARAM_BOX if args.problem == 'holes-param' else None)
        basis = problem.make_basis(args.n_phi)
    net = MlpConfig.parse(args.net, basis.n_features + problem.param_dim)
    wrapper = problem.wrapper()
    print(f"🚀 Fitting u0 of {problem.name}: net {net.label}, {args.points} points, {args.iters} iterations")
    points = build_candidates(spatial_set(problem, basis), problem.param_box, args.points, args.seed + 1, basis, 0)
    cfg = AdamConfig(lr=args.lr, iterations=args.iters, seed=args.seed)
    theta, report = fit_initial(net, problem.u0, points.query, cfg, wrapper, init_params(net, args.seed),
                                args.progress)
    save_checkpoint(args.out, net, theta, args.seed, 0.0)
    print(f"📊 final loss {report.final_loss:.4e} (rms misfit {report.rms_misfit:.4e}, {report.wall_time:.1f}s)")
    print(f"💾 {args.out}")
    return 0 if not report.aborted else 1


def cmd_exact(args):
    if args.problem != 'kdv':
        raise ConfigurationError(f"no analytic solution for {args.problem}")
    x = np.linspace(-20.0, 20.0, args.nx)
    df = pd.DataFrame({'x': x, 'u': kdv_exact(x, args.t)})
    if args.out:
        df.to_csv(args.out, index=False)
        print(f"💾 {args.out}")
    else:
        df.to_csv(sys.stdout, index=False)
    return 0


def cmd_mesh(args):
    if args.kind == 'square':
        mesh = square_mesh(args.n, args.bc)
    else:
        mesh = holes_mesh(args.h, seed=args.seed)
    mesh.validate()
    write_mesh(mesh, args.out)
    print(f"💾 {args.out} ({mesh.n_nodes} nodes, {mesh.n_triangles} triangles)")
    return 0


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog='ednn', description='Evolutional deep neural networks')
    parser.add_argument('-v', '--verbose', action='store_true', help='debug logging')
    parser.add_argument('--progress', action='store_true', help='show progress bars')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('run', help='run one experiment config')
    p.add_argument('--config', required=True)
    p.add_argument('--out', default=None, help='output directory (default: <output_dir>/<name>)')
    p.add_argument('--tier', choices=('fast', 'full'), default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser('bench', help='run a comparison suite')
    p.add_argument('suite', choices=sorted(SUITES))
    p.add_argument('--out', default='runs/bench')
    p.add_argument('--configs', default=CONFIG_DIR)
    p.add_argument('--tier', choices=('fast', 'full'), default=None)
    p.add_argument('--workers', type=int, default=None, help='default: EDNN_THREADS or CPU count')
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser('eigs', help='FE Laplace eigenbasis of a mesh')
    p.add_argument('--mesh', required=True)
    p.add_argument('--n-phi', '--nphi', dest='n_phi', type=int, default=10)
    p.add_argument('--order', type=int, choices=(1, 2), default=1)
    p.add_argument('--tol', type=float, default=1e-9)
    p.add_argument('--points', default='nodes', help="'nodes' or a CSV file with x,y columns")
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_eigs)

    p = sub.add_parser('train-init', help='fit the network to an initial condition')
    p.add_argument('--problem', required=True, choices=sorted(PROBLEMS) + ['holes', 'holes-param'])
    p.add_argument('--net', default='4x10')
    p.add_argument('--n-phi', '--nphi', dest='n_phi', type=int, default=2)
    p.add_argument('--embedding', default=None, help='discrete basis file (hole domain)')
    p.add_argument('--iters', type=int, default=10000)
    p.add_argument('--points', type=int, default=5000)
    p.add_argument('--lr', type=float, default=1e-3)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_train_init)

    p = sub.add_parser('exact', help='tabulate an analytic solution')
    p.add_argument('problem', choices=('kdv',))
    p.add_argument('--t', type=float, default=0.0)
    p.add_argument('--nx', type=int, default=1000)
    p.add_argument('--out', default=None)
    p.set_defaults(func=cmd_exact)

    p = sub.add_parser('mesh', help='generate a triangle mesh')
    p.add_argument('kind', choices=('square', 'holes'))
    p.add_argument('--n', type=int, default=64, help='cells per side (square)')
    p.add_argument('--bc', default='dirichlet', help='boundary kind of the square')
    p.add_argument('--h', type=float, default=0.0125, help='target edge length (holes)')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_mesh)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)
    try:
        return args.func(args)
    except ConfigurationError as e:
        print(f"❌ Configuration error: {e}")
        return e.exit_code
    except EdnnError as e:
        print(f"❌ {type(e).__name__}: {e}")
        return e.exit_code
    except Exception:
        traceback.print_exc()
        return 1
