"""
Input files of the hole-domain benchmarks, built on demand.

For a stem such as 'holes_coarse' in a data directory:
    <stem>.mesh                     two-hole triangle mesh
    <stem>.ednb (+ .json)           FE Laplace eigenbasis at the mesh nodes
    <stem>_velocity.csv             x, y, wx, wy on the same nodes
    <stem>_reference.csv            FE reference, fixed blob
    <stem>_param_reference.csv      FE reference on the parameter grid

prepare_hole_inputs() builds whichever of these are missing, in that order,
and leaves existing files alone.
"""

import logging
import os
from dataclasses import dataclass

from lib.embedding import load_discrete, save_discrete
from lib.errors import ConfigurationError
from lib.fem import holes_mesh, laplace_basis, read_mesh, write_mesh
from lib.pde import PARAM_BOX, VelocityField, cylinder_flow_velocity, holes_problem, param_grid
from lib.reference import reference_solver_fem

logger = logging.getLogger(__name__)

# mesh size per known stem
MESH_SIZES = {'holes_coarse': 0.025, 'holes': 0.0125}
N_PHI = 15
REFERENCE_TIMES = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6)
REFERENCE_DT = 1e-3
PARAM_POINTS = 3          # per parameter axis


@dataclass(frozen=True)
class HoleInputs:
    mesh: str
    embedding: str
    velocity: str
    reference: str
    param_reference: str

    @classmethod
    def for_stem(cls, data_dir, stem):
        p = lambda suffix: os.path.join(data_dir, stem + suffix)
        return cls(p('.mesh'), p('.ednb'), p('_velocity.csv'), p('_reference.csv'), p('_param_reference.csv'))

    @classmethod
    def from_embedding(cls, path):
        """Sibling files of an embedding path <dir>/<stem>.ednb"""
        stem, ext = os.path.splitext(os.path.basename(path))
        if ext != '.ednb':
            raise ConfigurationError(f"cannot derive hole-domain inputs from {path} (expected <stem>.ednb)")
        return cls.for_stem(os.path.dirname(path), stem)

    @property
    def stem(self):
        return os.path.splitext(os.path.basename(self.mesh))[0]

    def missing(self):
        return [path for path in (self.mesh, self.embedding, self.velocity, self.reference, self.param_reference)
                if not os.path.exists(path)]


def prepare_hole_inputs(inputs, h=None, n_phi=N_PHI, times=REFERENCE_TIMES, dt=REFERENCE_DT,
                        param_points=PARAM_POINTS, order=2, progress=False):
    """
    Build the missing files of `inputs`

    Args:
        inputs: HoleInputs
        h: mesh size; None looks the stem up in MESH_SIZES
        order: element order of the FE references

    Returns:
        list of the paths that were written
    """
    todo = inputs.missing()
    if not todo:
        return []
    written = []
    os.makedirs(os.path.dirname(inputs.mesh) or '.', exist_ok=True)

    if inputs.mesh in todo:
        if h is None:
            if inputs.stem not in MESH_SIZES:
                raise ConfigurationError(f"no mesh size known for '{inputs.stem}', pass h explicitly")
            h = MESH_SIZES[inputs.stem]
        write_mesh(holes_mesh(h, seed=0), inputs.mesh)
        written.append(inputs.mesh)
    mesh = read_mesh(inputs.mesh)

    if inputs.embedding in todo:
        basis, _, sol = laplace_basis(mesh, 1, n_phi, provenance={'mesh': os.path.basename(inputs.mesh)})
        save_discrete(basis, inputs.embedding, basis.manifest)
        logger.info("eigenbasis %s (%d eigenpairs, lambda_1 = %.4g)", inputs.embedding, n_phi, sol.eigenvalues[0])
        written.append(inputs.embedding)
    basis = load_discrete(inputs.embedding)

    if inputs.velocity in todo:
        VelocityField.tabulate(basis.points, cylinder_flow_velocity).to_csv(inputs.velocity)
        written.append(inputs.velocity)
    velocity = VelocityField.from_csv(inputs.velocity)

    jobs = [(inputs.reference, None, None),
            (inputs.param_reference, PARAM_BOX, param_grid(PARAM_BOX, param_points))]
    for path, box, params in jobs:
        if path not in todo:
            continue
        problem = holes_problem(basis=basis, velocity=velocity, alpha_box=box)
        logger.info("FE reference %s (P%d, dt=%g)", problem.name, order, dt)
        reference_solver_fem(problem, mesh, dt, times, params, order=order, progress=progress).to_csv(path)
        written.append(path)

    for path in written:
        logger.info("wrote %s", path)
    return written
