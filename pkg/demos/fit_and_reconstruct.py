"""Fit an occupancy field to a sphere cloud and pull a mesh out of it.

Run from anywhere:  python demos/fit_and_reconstruct.py [iterations]
Outputs land in ./demo_out/.
"""
import sys
from pathlib import Path

import numpy as np

from occskel import fixtures, occnet, pcio, surfacer, trainer

out = Path("demo_out")
out.mkdir(exist_ok=True)
iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 600

# %% a noisy sphere, normalized into the unit ball
cloud = fixtures.make_fixture("sphere", 4096, noise_sigma=0.002, seed=0)
normalized, tf = pcio.normalize(cloud)
print("cloud", len(cloud), "points; center", np.round(tf.center, 4), "scale", round(tf.scale, 4))

# %% a small network keeps this to a couple of minutes on one core
cfg = trainer.TrainingConfig(iterations=iterations, batch_size=1000, hidden_width=64)


def show(rec):
    print(f"  iter {rec.iteration:5d}  pull {rec.sampling_loss:.2e}  entropy {rec.entropy_loss:+.3f}")


params, log = trainer.fit(normalized, cfg, progress=show, log_every=100)
occnet.save_checkpoint(out / "sphere.ckpt", params)

# %% the field is negative inside, positive outside
print("U at centre", occnet.margin_uncertainty(params, np.zeros(3)))
print("U at (1.05, 0, 0)", occnet.margin_uncertainty(params, np.array([1.05, 0, 0])))

# %% median isovalue over a grid that hugs the cloud
bounds = surfacer.reconstruction_bounds(normalized)
grid = surfacer.evaluate_grid(params, bounds, 64)
iso = surfacer.median_threshold(grid)
mesh = surfacer.marching_cubes(grid, iso, close_boundary=True)
print(f"iso {iso:.4f}: {len(mesh.vertices)} vertices, {len(mesh.triangles)} faces, "
      f"euler {mesh.euler_characteristic()}, watertight {mesh.is_watertight()}")

# back in the input frame, the mesh radius should hover near 1
r = np.linalg.norm(tf.inverse(mesh.vertices), axis=1)
print("mesh radius: mean %.4f  min %.4f  max %.4f" % (r.mean(), r.min(), r.max()))
mesh.vertices = tf.inverse(mesh.vertices)
surfacer.export_mesh(mesh, out / "sphere.obj")

# %% points on the zero level set by projection
pts = surfacer.sample_surface_points(params, 5000, seed=1).points
err = np.abs(np.linalg.norm(tf.inverse(pts), axis=1) - 1)
print("projected samples: median |r - 1| %.4f, 95th pct %.4f" % (np.median(err), np.percentile(err, 95)))
