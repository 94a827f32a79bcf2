"""Contract a Y-shaped tube cloud and read off its curve skeleton.

    python demos/skeleton_from_cloud.py
"""
from pathlib import Path

import numpy as np

from occskel import fixtures, skeletor

out = Path("demo_out")
out.mkdir(exist_ok=True)

cloud = fixtures.make_fixture("y_tube", 5000, seed=0)

# %% contraction: each solve pulls points toward their Laplacian centroid
result = skeletor.contract(cloud, skeletor.ContractionConfig())
a = np.array(result.total_areas)
print("solves", len(result.energies), " stalled", result.stalled)
print("one-ring area / initial:", np.round(a / a[0], 4))

# how close did the points get to the three arm axes?
d = np.stack([fixtures._dist_to_segment(result.positions, np.zeros(3), e, fixtures.Y_ARM_LENGTH)
              for e in fixtures.y_arm_directions()], axis=1).min(axis=1)
print("distance to the nearest arm axis: median %.4f, 95th pct %.4f" % (np.median(d), np.percentile(d, 95)))

# %% nodes by farthest-point sampling, edges from the original neighbourhoods
skel = skeletor.extract_skeleton(result.positions, result.graph, node_spacing=0.05)
deg = skel.degrees()
print("nodes", len(skel.nodes), " edges", len(skel.edges))
values, counts = np.unique(deg, return_counts=True)
print("degree histogram", dict(zip(values.tolist(), counts.tolist())))
junction = skel.nodes[deg == 3]
print("junction at", np.round(junction, 3))

skeletor.export_skeleton(skel, out / "y_tube_skeleton.obj")
np.savetxt(out / "y_tube_contracted.xyz", result.positions)
