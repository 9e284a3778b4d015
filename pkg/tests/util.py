"""Shared test helpers: finite-difference gradients, tolerances, and a
linear-Gaussian funnel construction with a closed-form law."""

from __future__ import annotations

import numpy as np


def finite_diff_param_grads(store, f, h=1e-5):
    """Central finite differences of the scalar ``f()`` w.r.t. every store entry.

    ``f`` must depend on ``store.values`` only (it is re-evaluated after
    each perturbation); the store is restored afterwards.
    """
    base = store.snapshot()
    g = np.zeros(store.n_params)
    for i in range(store.n_params):
        store.values[i] = base[i] + h
        fp = f()
        store.values[i] = base[i] - h
        fm = f()
        store.values[i] = base[i]
        g[i] = (fp - fm) / (2.0 * h)
    store.restore(base)
    return g


def grad_errors(analytic, fd, rtol=1e-5, atol=1e-7):
    """Return (ok, worst_abs, worst_rel) for a mixed abs/rel gradient check.

    Entries must satisfy |a - b| <= rtol * max(|a|, |b|) + atol: large
    gradients are held to the relative tolerance, near-zero ones to the
    absolute floor (central differences at h=1e-5 resolve ~1e-9).
    """
    analytic = np.asarray(analytic, dtype=float).ravel()
    fd = np.asarray(fd, dtype=float).ravel()
    diff = np.abs(analytic - fd)
    scale = np.maximum(np.abs(analytic), np.abs(fd))
    ok = bool(np.all(diff <= rtol * scale + atol))
    worst_abs = float(diff.max()) if diff.size else 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(scale > atol / rtol, diff / scale, 0.0)
    worst_rel = float(rel.max()) if rel.size else 0.0
    return ok, worst_abs, worst_rel


def randomize_params(store, rng, scale=0.4):
    """Overwrite every tensor with N(0, scale^2) entries (breaks zero init)."""
    for name in store.names():
        store.set(name, rng.normal(size=store.get(name).shape) * scale)


def affine_funnel_model(width, latent, cond, seed, clamp=2.0):
    """Single-funnel flow whose conditioners are affine with constant scale
    rows, so y | theta is exactly Gaussian.

    Returns (model, law) where law(theta) -> (mean, cov) is derived here
    independently from the generative recursion:

        z ~ N(0, I), eps ~ N(0, I)
        dropped = A_m z + B_m theta + c_m + diag(sig_d) eps
        kept    = diag(e^s) z + A_s dropped + B_s theta + c_s
    """
    from surflow.autodiff import MlpSpec, ParamStore
    from surflow.layers import FunnelLayer
    from surflow.model import FlowModel

    rng = np.random.default_rng(seed)
    n_drop = width - latent
    keep_idx = np.sort(rng.choice(width, size=latent, replace=False))
    layer = FunnelLayer(
        name="funnel",
        in_dim=width,
        out_dim=latent,
        keep_idx=keep_idx,
        kept_conditioner=MlpSpec("funnel.kept", n_drop + cond, (), 2 * latent),
        decoder=MlpSpec("funnel.dec", latent + cond, (), 2 * n_drop),
        clamp=clamp,
    )
    store = ParamStore()
    layer.init_params(store, rng)

    w_kept = rng.normal(size=(2 * latent, n_drop + cond)) * 0.4
    w_kept[latent:, :] = 0.0  # constant scale rows
    b_kept = rng.normal(size=2 * latent) * 0.4
    store.set("funnel.kept.W0", w_kept)
    store.set("funnel.kept.b0", b_kept)

    w_dec = rng.normal(size=(2 * n_drop, latent + cond)) * 0.4
    w_dec[n_drop:, :] = 0.0  # constant log-std rows
    b_dec = np.concatenate([rng.normal(size=n_drop) * 0.4, rng.uniform(-0.8, 0.3, size=n_drop)])
    store.set("funnel.dec.W0", w_dec)
    store.set("funnel.dec.b0", b_dec)

    model = FlowModel(layers=[layer], base_dim=latent, cond_dim=cond, params=store)

    a_shift = w_kept[:latent, :n_drop]
    b_shift = w_kept[:latent, n_drop:]
    c_shift = b_kept[:latent]
    s_kept = clamp * np.tanh(b_kept[latent:] / clamp)
    a_mean = w_dec[:n_drop, :latent]
    b_mean = w_dec[:n_drop, latent:]
    c_mean = b_dec[:n_drop]
    sig_d = np.exp(b_dec[n_drop:])
    drop_idx = layer.drop_idx

    def law(theta):
        theta = np.asarray(theta, dtype=float)
        mu_drop = b_mean @ theta + c_mean
        mu_keep = a_shift @ mu_drop + b_shift @ theta + c_shift
        lin = np.zeros((width, width))  # columns: [z, eps] mapped to [drop; keep] order
        lin[:n_drop, :latent] = a_mean
        lin[:n_drop, latent:] = np.diag(sig_d)
        lin[n_drop:, :latent] = np.diag(np.exp(s_kept)) + a_shift @ a_mean
        lin[n_drop:, latent:] = a_shift @ np.diag(sig_d)
        order = np.concatenate([drop_idx, keep_idx])
        mean = np.zeros(width)
        mean[order] = np.concatenate([mu_drop, mu_keep])
        cov = np.zeros((width, width))
        cov[np.ix_(order, order)] = lin @ lin.T
        return mean, cov

    return model, law
