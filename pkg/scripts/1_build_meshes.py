"""
Step 1: triangle meshes used by the FE embeddings and references.

    python scripts/1_build_meshes.py

Writes data/square_32.mesh, data/square_64.mesh (Dirichlet unit square),
data/holes.mesh (h = 0.0125) and data/holes_coarse.mesh (h = 0.025).
"""

import os
import sys
import traceback

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from lib.fem import holes_mesh, mesh_size, square_mesh, write_mesh

DATA = './data'

try:
    os.makedirs(DATA, exist_ok=True)

    print("🚀 Building unit-square meshes...")
    for n in (32, 64):
        mesh = square_mesh(n, 'dirichlet')
        path = os.path.join(DATA, f"square_{n}.mesh")
        write_mesh(mesh, path)
        print(f"✅ {path}: {mesh.n_nodes} nodes, {mesh.n_triangles} triangles")

    print("\n🚀 Building two-hole meshes...")
    for name, h in (('holes', 0.0125), ('holes_coarse', 0.025)):
        mesh = holes_mesh(h, seed=0)
        mesh.validate()
        path = os.path.join(DATA, f"{name}.mesh")
        write_mesh(mesh, path)
        print(f"✅ {path}: {mesh.n_nodes} nodes, {mesh.n_triangles} triangles, h_max={mesh_size(mesh):.4f}")

    print("\n💾 Meshes saved in ./data/")
except Exception as e:
    print(f"❌ Error: {e}")
    traceback.print_exc()
    sys.exit(1)
