import os
import subprocess
import sys

import numpy as np
import pytest

from occskel import occnet

# Reduced training budget used wherever a test needs a fitted field. The
# architecture keeps the default depth and skip layer; only width, batch and
# iteration count are scaled down so the suite runs in minutes on one core.
DESK_CONFIG = """\
# desk-scale training budget
iterations = 2000
batch_size = 1000
hidden_layers = 8
hidden_width = 64
skip_layer = 4
lambda_entropy = 0.1
learning_rate = 0.001
lr_schedule = cosine_decay
sigma_k = 50
domain_margin = 0.1
seed = 0
softplus_beta = 10.0
"""

ACCEPTANCE_LINES = []


def run_cli(*args, cwd=None, check=True):
    """Run ``python -m occskel`` in a subprocess; returns CompletedProcess."""
    proc = subprocess.run([sys.executable, "-m", "occskel", "-q", *map(str, args)],
                          cwd=cwd, capture_output=True, text=True)
    if check and proc.returncode != 0:
        raise AssertionError(f"occskel {args} exited {proc.returncode}:\n{proc.stderr}")
    return proc


def toy_params(seed=0, width=8, layers=3, skip=None, scale=1.0, bias=0.3):
    """Small random network with non-zero biases so gradients are generic."""
    arch = occnet.NetworkArchitecture(layers, width, skip, 10.0)
    p = occnet.init_network(arch, seed)
    rng = np.random.default_rng(seed + 1000)
    flat = p.flat * scale + bias * rng.standard_normal(p.flat.shape)
    return p.replace(flat)


@pytest.fixture(scope="session")
def fitted_sphere(tmp_path_factory):
    """Desk-scale fit of the 4096-point sphere fixture through the CLI."""
    d = tmp_path_factory.mktemp("sphere_fit")
    (d / "desk.cfg").write_text(DESK_CONFIG)
    run_cli("make-fixture", "sphere", "--n", 4096, "--out", d / "sphere.ply")
    run_cli("fit", d / "sphere.ply", "--config", d / "desk.cfg", "--out", d / "sphere.ckpt")
    return d


@pytest.fixture(scope="session")
def fitted_torus(tmp_path_factory):
    d = tmp_path_factory.mktemp("torus_fit")
    (d / "desk.cfg").write_text(DESK_CONFIG)
    run_cli("make-fixture", "torus", "--n", 8192, "--out", d / "torus.ply")
    run_cli("fit", d / "torus.ply", "--config", d / "desk.cfg", "--out", d / "torus.ckpt")
    return d


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def full_scale():
    return os.environ.get("OCCSKEL_FULL") == "1"
