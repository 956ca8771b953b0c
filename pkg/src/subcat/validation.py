"""Input-validation helpers used by the estimator-style classes."""

import numbers

import numpy as np

from .errors import NotFittedError


def check_feature_matrix(X, min_samples=1, name="X"):
    """Coerce ``X`` to a 2-D float64 array with finite entries."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {X.shape}")
    if X.shape[0] < min_samples:
        raise ValueError(f"{name} needs >= {min_samples} rows, got {X.shape[0]}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X


def check_labels(y, n_samples, name="y"):
    y = np.asarray(y)
    if y.shape != (n_samples,):
        raise ValueError(f"{name} must have shape ({n_samples},), got {y.shape}")
    return y


def check_image(image):
    """Validate an RGB image array: (H, W, 3) float in [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"image must have shape (H, W, 3), got {image.shape}")
    if image.shape[0] < 1 or image.shape[1] < 1:
        raise ValueError("image must be at least 1x1")
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return image


def check_random_state(seed):
    """Return a ``numpy.random.Generator`` for ``seed``.

    Accepts None (non-reproducible entropy), an int or sequence of ints, a
    SeedSequence, or an existing Generator (returned as-is).
    """
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None or isinstance(seed, (numbers.Integral, np.random.SeedSequence)):
        return np.random.default_rng(seed)
    if isinstance(seed, (list, tuple)) and all(
        isinstance(s, numbers.Integral) for s in seed
    ):
        return np.random.default_rng(seed)
    raise TypeError(f"cannot seed a Generator with {seed!r}")


def check_is_fitted(estimator, attribute):
    if getattr(estimator, attribute, None) is None:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted; call fit() first"
        )
