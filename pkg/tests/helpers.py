"""Shared test utilities: finite-difference gradients and the reference
synthetic configuration used by the slower end-to-end tests."""

import numpy as np

from uman import Hyperparams, SyntheticSpec, UmdaMatrix


def numeric_gradient(f, arr, h=1e-4):
    """Central finite differences of scalar-valued f() w.r.t. arr, in place."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + h
        fp = f()
        arr[idx] = orig - h
        fm = f()
        arr[idx] = orig
        g[idx] = (fp - fm) / (2.0 * h)
    return g


def max_rel_err(analytic, numeric):
    """Worst per-coordinate relative error, floored to ignore ~0 entries."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom))


def random_simplex(rng, n, k):
    """n random probability vectors of length k."""
    raw = rng.exponential(size=(n, k))
    return raw / raw.sum(axis=1, keepdims=True)


# Reference setup: two sources of 5 shared + 3 private classes over a 6-class
# shared union (so 4 union classes appear in both sources and 2 in one each),
# 3 target-only classes, 16-d inputs, unit domain shift. Geometry and training
# lengths below were calibrated together; changing one number usually moves
# several of the slower end-to-end assertions at once.
def standard_matrix() -> UmdaMatrix:
    return UmdaMatrix((5, 5), (3, 3), 6, 3)


def standard_spec(seed=0, **kw) -> SyntheticSpec:
    base = dict(
        feature_dim=16,
        samples_per_class=200,
        class_center_scale=0.8,
        noise_sigma=0.35,
        domain_shift_scale=1.0,
        domain_rotation=False,
        seed=seed,
    )
    base.update(kw)
    return SyntheticSpec(**base)


def standard_hp(seed=0, **kw) -> Hyperparams:
    base = dict(
        w0=0.5,
        epsilon=0.1,
        max_steps=3750,
        batch_size=32,
        lr_features=0.1,
        lr_classifier=0.15,
        lr_discriminator=0.7,
        grl_max_lambda=0.15,
        grl_gamma=10.0,
        weight_decay=0.003,
        feature_hidden=(64,),
        feature_dim=16,
        disc_hidden=(64,),
        seed=seed,
    )
    base.update(kw)
    return Hyperparams(**base)
