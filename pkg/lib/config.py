"""
Experiment configuration: JSON files loaded into frozen dataclasses.

Unknown keys are rejected, relative paths resolve against the config file's
directory, and the config hash is the SHA-256 of the canonical JSON.
"""

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from typing import Optional

from lib.errors import ConfigurationError
from lib.integrate import StepperKind, StepperSpec
from lib.update import LsmrOptions

logger = logging.getLogger(__name__)

PROBLEM_NAMES = ('kdv', 'heat', 'advdiff', 'holes', 'holes-param', 'static')
EMBEDDING_KINDS = ('analytic', 'file', 'fourier', 'none')
WRAPPERS = ('auto', 'raw', 'hom_dirichlet', 'lifted', 'train_free')
TIERS = ('fast', 'full')


@dataclass(frozen=True)
class EmbeddingSpec:
    kind: str = 'analytic'
    n_phi: int = 2
    path: Optional[str] = None     # discrete basis file (kind == 'file')
    sigma: float = 1.0             # Fourier feature scale
    seed: int = 0


@dataclass(frozen=True)
class NetSpec:
    widths: str = '4x10'           # hidden layers x units
    activation: str = 'tanh'


@dataclass(frozen=True)
class StepperConfig:
    kind: str = 'rosenbrock23_fixed'
    h: float = 1e-2
    rtol: Optional[float] = None
    atol: float = 1e-6
    h_min: float = 1e-12
    h_max: Optional[float] = None
    lsmr_atol: float = 5e-5
    lsmr_btol: float = 5e-5
    lsmr_conlim: float = 1e8
    lsmr_max_iters: Optional[int] = None

    def build(self):
        """integrate.StepperSpec for this section"""
        lsmr = LsmrOptions(self.lsmr_atol, self.lsmr_btol, self.lsmr_conlim, self.lsmr_max_iters)
        return StepperSpec(StepperKind(self.kind), self.h, self.rtol, self.atol, self.h_min,
                           float('inf') if self.h_max is None else self.h_max, lsmr)


@dataclass(frozen=True)
class SamplingSpec:
    mode: str = 'fixed'            # 'fixed' or 'active'
    n_points: int = 1000           # collocation points per step
    n_candidates: int = 0          # active sampling candidate pool (0: 10 x n_points)
    criterion: str = 'abs_rhs'
    seed: int = 0


@dataclass(frozen=True)
class TrainSpec:
    train_free: bool = False
    iterations: int = 10000
    fast_iterations: Optional[int] = None
    points: int = 5000
    lr: float = 1e-3
    batch_size: Optional[int] = None
    checkpoint: Optional[str] = None   # reuse a saved theta0 instead of training
    bc_weight: float = 1.0             # boundary loss weight of the static residual fit


@dataclass(frozen=True)
class ProblemSpec:
    velocity_file: Optional[str] = None
    reference_file: Optional[str] = None
    mesh: Optional[str] = None
    diffusion: Optional[float] = None
    T: Optional[float] = None
    prepare: bool = False              # build missing hole-domain inputs next to embedding.path


@dataclass(frozen=True)
class EvalSpec:
    times: tuple = ()                  # empty: the problem's checkpoints plus T
    n_params: int = 11                 # per parameter axis of the evaluation grid
    nx: int = 200                      # evaluation / FD reference grid cells
    reference_dt: float = 1e-4


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    problem: str
    embedding: EmbeddingSpec = field(default_factory=EmbeddingSpec)
    net: NetSpec = field(default_factory=NetSpec)
    wrapper: str = 'auto'
    stepper: StepperConfig = field(default_factory=StepperConfig)
    sampling: SamplingSpec = field(default_factory=SamplingSpec)
    train: TrainSpec = field(default_factory=TrainSpec)
    options: ProblemSpec = field(default_factory=ProblemSpec)
    evaluation: EvalSpec = field(default_factory=EvalSpec)
    output_dir: str = 'runs'
    seed: int = 0
    tier: str = 'fast'

    def __post_init__(self):
        _choice('problem', self.problem, PROBLEM_NAMES)
        _choice('embedding.kind', self.embedding.kind, EMBEDDING_KINDS)
        _choice('wrapper', self.wrapper, WRAPPERS)
        _choice('tier', self.tier, TIERS)
        _choice('stepper.kind', self.stepper.kind, tuple(k.value for k in StepperKind))
        _choice('sampling.mode', self.sampling.mode, ('fixed', 'active'))
        if self.embedding.kind == 'file' and not self.embedding.path:
            raise ConfigurationError("embedding.kind = 'file' needs embedding.path")
        if self.embedding.n_phi < 1:
            raise ConfigurationError(f"embedding.n_phi must be >= 1, got {self.embedding.n_phi}")
        if self.sampling.n_points < 1:
            raise ConfigurationError(f"sampling.n_points must be >= 1, got {self.sampling.n_points}")
        if self.train.train_free and self.wrapper not in ('auto', 'train_free'):
            raise ConfigurationError(f"train.train_free conflicts with wrapper {self.wrapper!r}")
        if self.options.prepare and not (self.problem.startswith('holes') and self.embedding.kind == 'file'):
            raise ConfigurationError("options.prepare only applies to hole-domain problems with a file embedding")

    @property
    def training_iterations(self):
        """Iterations for the configured tier: the full budget, or a tenth of it in the fast tier"""
        if self.tier == 'full':
            return self.train.iterations
        if self.train.fast_iterations is not None:
            return self.train.fast_iterations
        return max(1, self.train.iterations // 10)

    def to_dict(self):
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, data, base_dir=None):
        cfg = _build(cls, data, '')
        return cfg.resolve_paths(base_dir) if base_dir else cfg

    def resolve_paths(self, base_dir):
        """Copy with every relative path made relative to base_dir"""
        fix = lambda p: p if p is None or os.path.isabs(p) else os.path.normpath(os.path.join(base_dir, p))
        return _replace(self,
                        embedding=_replace(self.embedding, path=fix(self.embedding.path)),
                        train=_replace(self.train, checkpoint=fix(self.train.checkpoint)),
                        options=_replace(self.options, velocity_file=fix(self.options.velocity_file),
                                         reference_file=fix(self.options.reference_file),
                                         mesh=fix(self.options.mesh)),
                        output_dir=fix(self.output_dir))

    def check_files(self):
        """Every referenced input file must exist"""
        for label, path in (('embedding.path', self.embedding.path),
                            ('train.checkpoint', self.train.checkpoint),
                            ('options.velocity_file', self.options.velocity_file),
                            ('options.reference_file', self.options.reference_file),
                            ('options.mesh', self.options.mesh)):
            if path is not None and not os.path.exists(path):
                raise ConfigurationError(f"{label}: file not found: {path}")

    def digest(self):
        return config_hash(self)


def _choice(name, value, allowed):
    if value not in allowed:
        raise ConfigurationError(f"{name} must be one of {allowed}, got {value!r}")


def _replace(obj, **changes):
    values = {f.name: getattr(obj, f.name) for f in fields(obj)}
    values.update(changes)
    return type(obj)(**values)


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _build(cls, data, prefix):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{prefix or 'config'} must be a table, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigurationError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else None
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{prefix}{name}.")
        elif name == 'times':
            kwargs[name] = tuple(float(v) for v in value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigurationError(f"{prefix or 'config'}: {e}")


def load_config(path):
    """Parse a JSON experiment config; paths inside it are relative to its directory"""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path}: invalid JSON ({e})")
    cfg = ExperimentConfig.from_dict(data, os.path.dirname(os.path.abspath(path)))
    logger.debug("loaded config %s (%s)", cfg.name, path)
    return cfg


def save_config(cfg, path):
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)


def config_hash(cfg):
    canonical = json.dumps(cfg.to_dict(), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()
