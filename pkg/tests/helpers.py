import numpy as np

from layerboost.boosting import train
from layerboost.data_io import Batch, batches_from_arrays


def full_batch_stream(X, y, cfg, w=None, extra=2):
    """Enough passes over the whole dataset (one batch each) to grow every layer."""
    epochs = 1 + cfg.num_trees * cfg.max_depth + extra
    return batches_from_arrays(X, y, w, batch_size=len(y), epochs=epochs)


def full_batch_train(cfg, X, y, w=None):
    return train(cfg, full_batch_stream(X, y, cfg, w))


def whole(X, y, w=None):
    return Batch(np.asarray(X, float), np.asarray(y, float),
                 np.ones(len(y)) if w is None else np.asarray(w, float))


def checkerboard(n, seed=0, cells=4):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 1, size=(n, 2))
    y = ((np.floor(X[:, 0] * cells) + np.floor(X[:, 1] * cells)) % 2).astype(float)
    return X, y
