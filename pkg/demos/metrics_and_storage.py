"""Chamfer / Hausdorff on perturbed clouds, and checkpoint size versus cloud size.

    python demos/metrics_and_storage.py
"""
import tempfile
from pathlib import Path

import numpy as np

from occskel import evalkit, fixtures, occnet, pcio

ref = fixtures.random_sphere(20000, seed=1)

# %% metrics grow with noise; the x100 scale makes normalized units read like percentages.
# Even at sigma 0 the two samplings differ, so the floor is set by point spacing.
for sigma in (0.0, 0.001, 0.005, 0.02):
    noisy = fixtures.make_fixture("sphere", 20000, noise_sigma=sigma, seed=2).points
    m = evalkit.metrics_report(noisy, ref)
    print(f"sigma {sigma:<6} chamfer_l1 {m.chamfer_l1:7.4f}  chamfer_l2 {m.chamfer_l2:8.5f}  "
          f"hausdorff {m.hausdorff:7.4f}")

# %% a single far outlier moves Hausdorff, barely moves Chamfer
noisy = fixtures.make_fixture("sphere", 20000, noise_sigma=0.001, seed=2).points
with_outlier = np.vstack([noisy, [[3.0, 0, 0]]])
print("outlier:", evalkit.metrics_report(with_outlier, ref))

# %% storage: a 175k-point double-precision ply against the default network
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "cloud.ply"
    pcio.save_point_cloud(path, fixtures.make_fixture("torus", 175_000))
    cloud = pcio.load_point_cloud(path)
    params = occnet.init_network(occnet.NetworkArchitecture(), 0)
    rep = evalkit.compression_report(cloud, params)
    print(rep.to_text(), end="")
    print(f"the network needs {rep.model_bytes / rep.cloud_bytes:.0%} of the cloud's bytes")
