"""Shared fixtures and numeric oracles for the test suite."""

import os
from pathlib import Path

import numpy as np
import pytest

from lampad.tensor import Tensor, backward

REPO_ROOT = Path(__file__).resolve().parent.parent

# step sizes and tolerances for central finite differences, by dtype
FD_STEP = {np.float32: 1e-3, np.float64: 1e-6}
FD_TOL = {np.float32: 1e-2, np.float64: 1e-4}


def numerical_gradient(f, arr, step, indices=None):
    """Central finite differences of scalar f w.r.t. entries of arr.

    Perturbs every element unless ``indices`` limits the check to a
    subset (a list of flat indices). Returns an array shaped like arr
    with untouched entries left at 0.
    """
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        keep = flat[i]
        flat[i] = keep + step
        up = f()
        flat[i] = keep - step
        down = f()
        flat[i] = keep
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def relative_error(analytic, numeric, indices=None, floor=1e-12):
    """Max-norm relative disagreement between two gradient arrays.

    ``floor`` bounds the denominator from below so that parameters with
    a structurally zero gradient (e.g. a conv bias immediately absorbed
    by batch normalization) compare noise against the problem's real
    gradient scale instead of against itself.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if indices is not None:
        a, n = a[indices], n[indices]
    scale = max(np.abs(n).max(), np.abs(a).max(), floor)
    return float(np.abs(a - n).max() / scale)


def gradient_scale_floor(leaves):
    """1% of the largest gradient magnitude across all checked leaves."""
    peak = max((np.abs(l.grad).max() for l in leaves.values() if l.grad is not None), default=0.0)
    return max(1e-12, 0.01 * float(peak))


def check_gradients(build_loss, leaves, dtype, indices_per_leaf=None, tol_scale=1.0):
    """Compare autodiff grads of ``build_loss()`` against finite differences.

    ``build_loss`` must construct the graph from the current leaf data
    and return the scalar loss tensor; ``leaves`` is a dict of name ->
    Tensor checked one by one. Returns the worst relative error seen.
    """
    loss = build_loss()
    for leaf in leaves.values():
        leaf.grad = None
    backward(loss)
    step = FD_STEP[dtype]
    floor = gradient_scale_floor(leaves)
    worst = 0.0
    for name, leaf in leaves.items():
        assert leaf.grad is not None, f"no gradient reached {name}"
        indices = None if indices_per_leaf is None else indices_per_leaf.get(name)
        numeric = numerical_gradient(lambda: build_loss().item(), leaf.data, step, indices)
        flat_idx = None if indices is None else list(indices)
        err = relative_error(leaf.grad, numeric, flat_idx, floor=floor)
        assert err < FD_TOL[dtype] * tol_scale, f"{name}: rel err {err:.3e} at {np.dtype(dtype)}"
        worst = max(worst, err)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_leaf(rng, shape, dtype, scale=1.0, shift=0.0):
    data = (rng.standard_normal(shape) * scale + shift).astype(dtype)
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# dataset fixtures


def mnist_dir():
    """Locate the MNIST IDX directory: env override, else the bundled subset."""
    env = os.environ.get("LAMPAD_MNIST_DIR")
    if env:
        return Path(env)
    bundled = REPO_ROOT / "data" / "mnist-mini"
    if (bundled / "train-images-idx3-ubyte").exists():
        return bundled
    return None


def require_mnist():
    d = mnist_dir()
    if d is None:
        pytest.skip("MNIST IDX files not found (set LAMPAD_MNIST_DIR or provide data/mnist-mini)")
    return d


@pytest.fixture(scope="session")
def mnist_sets():
    from lampad.data import load_idx_dir

    return load_idx_dir(require_mnist())


def write_png(path, array_hw_c):
    """Write a [H,W] or [H,W,3] float [0,1] array as PNG."""
    from PIL import Image

    arr = np.rint(np.clip(array_hw_c, 0, 1) * 255).astype(np.uint8)
    mode = "L" if arr.ndim == 2 else "RGB"
    Image.fromarray(arr, mode=mode).save(path)


@pytest.fixture
def mvtec_fixture(tmp_path):
    """Synthetic category tree: 3 good train, 2 good test, 2 defect test.

    Normal images are a flat gray field with a faint gradient; defects
    add a bright square, so a trained model separates them easily.
    """
    rng = np.random.default_rng(7)

    def normal_image(k):
        base = np.full((32, 32), 0.25, dtype=np.float64)
        base += np.linspace(0, 0.05, 32)[None, :]
        base += rng.normal(0, 0.01, size=(32, 32))
        return np.clip(base, 0, 1)

    def defect_image(k):
        img = normal_image(k)
        img[8 + k : 16 + k, 8 : 16] = 0.95
        return img

    root = tmp_path / "mvtec"
    cat = root / "widget"
    (cat / "train" / "good").mkdir(parents=True)
    (cat / "test" / "good").mkdir(parents=True)
    (cat / "test" / "scratch").mkdir(parents=True)
    for i in range(3):
        write_png(cat / "train" / "good" / f"{i:03d}.png", normal_image(i))
    for i in range(2):
        write_png(cat / "test" / "good" / f"{i:03d}.png", normal_image(10 + i))
    for i in range(2):
        write_png(cat / "test" / "scratch" / f"{i:03d}.png", defect_image(i))
    return root
