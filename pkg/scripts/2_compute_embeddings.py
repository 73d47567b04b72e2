"""
Step 2: FE Laplace eigenbases (.ednb) for the meshes of step 1.

    python scripts/2_compute_embeddings.py

The hole-domain bases carry homogeneous Dirichlet conditions on the top
side and Neumann conditions on the walls and hole boundaries.
"""

import os
import sys
import traceback

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from lib.embedding import save_discrete
from lib.fem import laplace_basis, read_mesh

DATA = './data'
JOBS = [
    # mesh, element order, n_phi, output
    ('square_64.mesh', 1, 10, 'square_64.ednb'),
    ('holes_coarse.mesh', 1, 15, 'holes_coarse.ednb'),
    ('holes.mesh', 1, 15, 'holes.ednb'),
]

try:
    for mesh_file, order, n_phi, out in JOBS:
        path = os.path.join(DATA, mesh_file)
        if not os.path.exists(path):
            print(f"⚠️  {path} missing, run scripts/1_build_meshes.py first")
            continue
        print(f"🚀 {mesh_file}: P{order}, {n_phi} eigenpairs...")
        basis, space, sol = laplace_basis(read_mesh(path), order, n_phi, provenance={'mesh': mesh_file})
        target = os.path.join(DATA, out)
        save_discrete(basis, target, basis.manifest)
        print(f"   📊 lambda = {np.array2string(sol.eigenvalues[:6], precision=3)} ...")
        print(f"   📊 max residual = {np.max(sol.residuals):.2e}")
        print(f"   💾 {target}")

    print("\n✅ Embeddings ready")
except Exception as e:
    print(f"❌ Error: {e}")
    traceback.print_exc()
    sys.exit(1)
