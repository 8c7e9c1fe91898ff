import numpy as np
import pytest

from stdseg import make_gaussian


@pytest.fixture(scope="session")
def kernel7():
    return make_gaussian(7, 5.0)


def random_simplex(rng, shape_hw, num_classes):
    """Random strictly-interior simplex field via normalized exponentials."""
    g = rng.exponential(1.0, size=(*shape_hw, num_classes)) + 1e-6
    return g / g.sum(axis=-1, keepdims=True)


def region_features(j, sizes=(4, 17), margin=4.0, noise=1.0):
    """Classifier-like features: blobby confident regions plus pixel noise.

    The deterministic instance family used by the acceptance suite.
    """
    from scipy import ndimage

    rng = np.random.default_rng(1000 + j)
    h = int(rng.integers(*sizes))
    w = int(rng.integers(*sizes))
    num_classes = (2, 3, 4)[j % 3]
    f = np.stack(
        [ndimage.gaussian_filter(rng.normal(size=(h, w)), 2.0, mode="reflect")
         for _ in range(num_classes)],
        axis=2,
    )
    lab = f.argmax(axis=2)
    o = np.zeros((h, w, num_classes))
    for c in range(num_classes):
        o[:, :, c] = np.where(lab == c, margin, 0.0)
    o += rng.normal(0.0, noise, o.shape)
    edge = None
    if (j // 27) % 2:
        from stdseg import edge_weight

        edge = edge_weight(rng.uniform(size=(h, w, 1)))
    return o, edge


def noise_features(j, sizes=(4, 17)):
    """Adversarial instances: iid standard-normal scores, no spatial structure."""
    rng = np.random.default_rng(5000 + j)
    h = int(rng.integers(*sizes))
    w = int(rng.integers(*sizes))
    num_classes = (2, 3, 4)[j % 3]
    o = rng.normal(size=(h, w, num_classes))
    edge = None
    if (j // 27) % 2:
        from stdseg import edge_weight

        edge = edge_weight(rng.uniform(size=(h, w, 1)))
    return o, edge


def grid_params(j):
    """The (epsilon, lambda) sweep used by the randomized energy tests."""
    eps = (0.1, 1.0, 3.0)[(j // 3) % 3]
    lam = (0.0, 0.5, 1.25)[(j // 9) % 3]
    return eps, lam
