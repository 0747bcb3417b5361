import numpy as np

from facl.data import FeatureBag
from facl.model import ModelParams, init_params
from facl.tensor import derive_rng


def scaled_params(config, seed, scale=3.0):
    """Random parameters scaled up so tanh/sigmoid/softmax leave their linear range."""
    p = init_params(config, derive_rng(seed))
    return ModelParams.unflatten(config, p.flatten() * scale)


def random_bag(rng, n, dim, label=0, slide_id="bag"):
    return FeatureBag(slide_id, rng.normal(size=(n, dim)).astype(np.float32), label)


def toy_bags(seed, n_bags, dim, num_classes=2, n_range=(3, 8)):
    """Small separable bags: class c shifts half its patches by +3 along coordinate c.

    The last coordinate is offset by +2 everywhere; the model has no bias
    terms, so a non-zero background mean is what lets it score class 0.
    """
    rng = derive_rng(seed)
    bags = []
    for i in range(n_bags):
        label = i % num_classes
        n = int(rng.integers(*n_range))
        z = rng.normal(size=(n, dim))
        z[:, -1] += 2.0
        if label:
            k = max(1, n // 2)
            z[:k, label % dim] += 3.0
        bags.append(FeatureBag(f"s{seed}_{i}", z.astype(np.float32), label))
    return bags

