"""
Step 3: velocity field and FE reference solutions for the hole domain.

    python scripts/3_prepare_holes.py [coarse|fine]

The velocity is the two-cylinder potential-flow surrogate tabulated on the
embedding points (a Navier-Stokes field can be dropped in with the same
x,y,wx,wy columns). References are P2 implicit Euler solutions at the mesh
vertices, written as t,x,y[,alpha1,alpha2],u tables. A mesh or eigenbasis
missing from steps 1-2 is built here too; existing files are kept.
"""

import os
import sys
import time
import traceback

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from lib.hole_inputs import HoleInputs, prepare_hole_inputs

DATA = './data'

try:
    level = sys.argv[1] if len(sys.argv) > 1 else 'coarse'
    inputs = HoleInputs.for_stem(DATA, 'holes_coarse' if level == 'coarse' else 'holes')

    missing = inputs.missing()
    if not missing:
        print(f"✅ {inputs.stem}: every input already present")
        sys.exit(0)

    print(f"🚀 Building {len(missing)} missing file(s) for {inputs.stem}...")
    start = time.time()
    for path in prepare_hole_inputs(inputs, progress=True):
        print(f"💾 {path}")
    print(f"\n✅ Hole-domain inputs ready ({time.time() - start:.1f}s)")
except Exception as e:
    print(f"❌ Error: {e}")
    traceback.print_exc()
    sys.exit(1)
