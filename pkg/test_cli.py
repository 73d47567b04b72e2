import json
import os

import numpy as np
import pandas as pd
import pytest

from lib.cli import main
from lib.config import ExperimentConfig, config_hash, load_config, save_config
from lib.embedding import load_discrete
from lib.errors import ConfigurationError
from lib.experiment import CONFIG_DIR, bench_workers, suite_variants
from lib.network import load_checkpoint
from lib.pde import kdv_exact


def test_exact_kdv_table(tmp_path):
    out = str(tmp_path / 'kdv.csv')
    assert main(['exact', 'kdv', '--t', '0.5', '--nx', '50', '--out', out]) == 0
    df = pd.read_csv(out, float_precision='round_trip')
    assert list(df.columns) == ['x', 'u'] and len(df) == 50
    np.testing.assert_allclose(df['u'], kdv_exact(df['x'].to_numpy(), 0.5))


def test_missing_config_file_exits_with_configuration_code(tmp_path):
    assert main(['run', '--config', str(tmp_path / 'nope.json')]) == 2


def test_missing_embedding_file_exits_with_configuration_code(tmp_path):
    path = tmp_path / 'holes.json'
    path.write_text(json.dumps({'name': 'holes', 'problem': 'holes',
                                'embedding': {'kind': 'file', 'path': 'missing.ednb', 'n_phi': 4}}))
    assert main(['run', '--config', str(path), '--out', str(tmp_path / 'run')]) == 2


def test_config_roundtrip_and_hash(tmp_path):
    cfg = load_config(os.path.join(CONFIG_DIR, 'heat_trained.json'))
    assert os.path.isabs(cfg.output_dir)
    path = str(tmp_path / 'copy.json')
    save_config(cfg, path)
    again = load_config(path)
    assert again == cfg
    assert config_hash(again) == cfg.digest()
    other = ExperimentConfig.from_dict({**cfg.to_dict(), 'seed': cfg.seed + 1})
    assert config_hash(other) != cfg.digest()


def test_every_shipped_config_loads():
    for name in sorted(os.listdir(CONFIG_DIR)):
        cfg = load_config(os.path.join(CONFIG_DIR, name))
        assert cfg.name


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigurationError, match='stepper.hh'):
        ExperimentConfig.from_dict({'name': 'x', 'problem': 'kdv', 'stepper': {'hh': 0.1}})
    with pytest.raises(ConfigurationError, match='colour'):
        ExperimentConfig.from_dict({'name': 'x', 'problem': 'kdv', 'colour': 'red'})


def test_invalid_values_are_rejected():
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({'name': 'x', 'problem': 'burgers'})
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({'name': 'x', 'problem': 'kdv', 'stepper': {'kind': 'leapfrog'}})
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({'name': 'x', 'problem': 'holes', 'embedding': {'kind': 'file'}})
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({'name': 'x', 'problem': 'heat', 'wrapper': 'raw',
                                    'train': {'train_free': True}})


def test_training_budget_per_tier():
    base = {'name': 'x', 'problem': 'kdv', 'train': {'iterations': 1000}}
    assert ExperimentConfig.from_dict(base).training_iterations == 100
    assert ExperimentConfig.from_dict({**base, 'tier': 'full'}).training_iterations == 1000
    fast = {'name': 'x', 'problem': 'kdv', 'train': {'iterations': 1000, 'fast_iterations': 7}}
    assert ExperimentConfig.from_dict(fast).training_iterations == 7


def test_train_init_is_deterministic(tmp_path):
    args = ['train-init', '--problem', 'heat', '--net', '2x5', '--iters', '5', '--points', '40', '--seed', '3']
    a, b = str(tmp_path / 'a.ckpt'), str(tmp_path / 'b.ckpt')
    assert main(args + ['--out', a]) == 0
    assert main(args + ['--out', b]) == 0
    net_a, theta_a, seed, t = load_checkpoint(a)
    net_b, theta_b, _, _ = load_checkpoint(b)
    assert net_a.widths == (4, 5, 5, 1) and seed == 3 and t == 0.0
    np.testing.assert_array_equal(theta_a, theta_b)


def test_holes_train_init_needs_embedding(tmp_path):
    assert main(['train-init', '--problem', 'holes', '--out', str(tmp_path / 'x.ckpt')]) == 2


def test_mesh_then_eigenbasis(tmp_path):
    mesh, basis = str(tmp_path / 'square.mesh'), str(tmp_path / 'square.ednb')
    assert main(['mesh', 'square', '--n', '8', '--out', mesh]) == 0
    assert main(['eigs', '--mesh', mesh, '--n-phi', '3', '--out', basis]) == 0
    loaded = load_discrete(basis)
    assert loaded.n_phi == 3 and loaded.n_points == 81
    assert loaded.eigenvalues[0] == pytest.approx(2 * np.pi ** 2, rel=0.1)


def test_eigs_point_options(tmp_path):
    mesh = str(tmp_path / 'square.mesh')
    assert main(['mesh', 'square', '--n', '8', '--out', mesh]) == 0
    at_nodes = str(tmp_path / 'nodes.ednb')
    assert main(['eigs', '--mesh', mesh, '--nphi', '2', '--points', 'nodes', '--out', at_nodes]) == 0
    assert load_discrete(at_nodes).n_points == 81

    table = str(tmp_path / 'points.csv')
    pd.DataFrame({'x': [0.25, 0.5, 0.7], 'y': [0.5, 0.5, 0.3]}).to_csv(table, index=False)
    at_table = str(tmp_path / 'table.ednb')
    assert main(['eigs', '--mesh', mesh, '--nphi', '2', '--points', table, '--out', at_table]) == 0
    loaded = load_discrete(at_table)
    assert loaded.n_phi == 2
    np.testing.assert_allclose(loaded.points, [[0.25, 0.5], [0.5, 0.5], [0.7, 0.3]])

    assert main(['eigs', '--mesh', mesh, '--points', 'vertices', '--out', at_table]) == 2


def test_bench_variants_are_uniquely_named():
    variants = suite_variants('kdv')
    names = [cfg.name for _, cfg in variants]
    assert len(set(names)) == len(names) == 3
    assert [cfg.stepper.kind for _, cfg in variants] == ['euler', 'tsit5', 'rosenbrock23_fixed']
    assert all(cfg.tier == 'full' for _, cfg in suite_variants('heat', tier='full'))
    with pytest.raises(ConfigurationError):
        suite_variants('burgers')


def test_bench_workers(monkeypatch):
    monkeypatch.setenv('EDNN_THREADS', '3')
    assert bench_workers() == 3
    monkeypatch.setenv('EDNN_THREADS', 'many')
    with pytest.raises(ConfigurationError):
        bench_workers()
    monkeypatch.setenv('EDNN_THREADS', '0')
    with pytest.raises(ConfigurationError):
        bench_workers()
