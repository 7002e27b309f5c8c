"""Per-mouse Gaussian readout.

Each neuron reads the core feature map at a single learned 2-d position:
a small position network maps the neuron's anatomical coordinates to a
mean location in [-1, 1]^2, a shared shifter nudges all of a mouse's
positions by a trial-dependent offset computed from the pupil center,
and training-time sampling jitters the position by a learned per-neuron
uncertainty.  The feature vector at the (bilinearly interpolated)
position is combined linearly and pushed through elu+1, so outputs are
strictly positive.  Per-neuron cost is d+1 weights plus a 2-d sigma;
nothing scales with the feature-map area.
"""

from __future__ import annotations

import csv
import numpy as np

from .config import CoreConfig
from .tensor import (Tensor, bilinear_sample, broadcast_to, clip, elu_plus_one,
                     softplus, tanh, truncated_normal)


def sigma_raw_init(sigma: float) -> float:
    """Inverse softplus, so softplus(raw) equals the requested sigma."""
    return float(np.log(np.expm1(sigma)))


def _dense(params, name, n_in, n_out, rng, dtype):
    params[f"{name}.w"] = Tensor(truncated_normal(rng, (n_in, n_out), dtype=dtype), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)


def init_readout_params(params: dict, prefix: str, cfg: CoreConfig, n_neurons: int,
                        rng: np.random.Generator, dtype, bias_init: np.ndarray | None = None):
    d = cfg.embed_dim
    params[f"{prefix}.w"] = Tensor(truncated_normal(rng, (n_neurons, d), dtype=dtype), requires_grad=True)
    bias = np.zeros(n_neurons, dtype=dtype) if bias_init is None else bias_init.astype(dtype)
    params[f"{prefix}.bias"] = Tensor(bias, requires_grad=True)
    params[f"{prefix}.sigma_raw"] = Tensor(
        np.full((n_neurons, 2), sigma_raw_init(cfg.sigma_init), dtype=dtype), requires_grad=True)
    sizes = [2] + [cfg.pos_hidden_size] * cfg.pos_hidden_layers + [2]
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        _dense(params, f"{prefix}.pos.fc{i}", a, b, rng, dtype)
    if cfg.use_shifter:
        for i, (a, b) in enumerate(zip([2, 5, 5], [5, 5, 2])):
            _dense(params, f"{prefix}.shift.fc{i}", a, b, rng, dtype)


def compute_mu(coords: Tensor, params: dict, prefix: str, n_hidden_layers: int) -> Tensor:
    """Anatomical coordinates [n, 2] -> receptive-field centers in [-1, 1]^2."""
    h = coords
    for i in range(n_hidden_layers + 1):
        h = tanh(h @ params[f"{prefix}.pos.fc{i}.w"] + params[f"{prefix}.pos.fc{i}.b"])
    return h


def shifter_forward(pupil_center: Tensor, params: dict, prefix: str) -> Tensor:
    """Standardized pupil center [B, 2] -> bounded position shift [B, 2]."""
    h = pupil_center
    for i in range(3):
        h = tanh(h @ params[f"{prefix}.shift.fc{i}.w"] + params[f"{prefix}.shift.fc{i}.b"])
    return h


def gaussian_readout(features: Tensor, mu: Tensor, shift: Tensor | None,
                     sigma: Tensor, weights: Tensor, bias: Tensor,
                     train: bool, noise: np.ndarray | None = None,
                     rng: np.random.Generator | None = None) -> Tensor:
    """Sample the feature map per neuron and combine linearly.

    features [B, d, H, W]; mu [n, 2]; shift [B, 2] or None; sigma [n, 2];
    weights [n, d]; bias [n].  In train mode positions are jittered by
    sigma-scaled unit normals (pass `noise` [B, n, 2] to pin them, e.g.
    for gradient checks); eval mode uses the means directly.
    """
    b = features.shape[0]
    n = mu.shape[0]
    pos = mu.reshape(1, n, 2)
    if shift is not None:
        pos = pos + shift.reshape(b, 1, 2)
    pos = clip(pos, -1.0, 1.0)
    if train:
        if noise is None:
            noise = rng.standard_normal((b, n, 2))
        pos = clip(pos + sigma.reshape(1, n, 2) * Tensor(noise.astype(features.data.dtype)), -1.0, 1.0)
    if pos.shape[0] != b:
        pos = broadcast_to(pos, (b, n, 2))
    sampled = bilinear_sample(features, pos)
    pre = (sampled * weights.reshape(1, n, weights.shape[1])).sum(axis=-1) + bias.reshape(1, n)
    return elu_plus_one(pre)


def readout_forward(features: Tensor, params: dict, prefix: str, cfg: CoreConfig,
                    coords_std: np.ndarray, pupil_center: Tensor | None,
                    train: bool, noise: np.ndarray | None = None,
                    rng: np.random.Generator | None = None) -> Tensor:
    mu = compute_mu(Tensor(coords_std.astype(features.data.dtype)), params, prefix,
                    cfg.pos_hidden_layers)
    shift = None
    if cfg.use_shifter and pupil_center is not None:
        shift = shifter_forward(pupil_center, params, prefix)
    sigma = softplus(params[f"{prefix}.sigma_raw"])
    return gaussian_readout(features, mu, shift, sigma,
                            params[f"{prefix}.w"], params[f"{prefix}.bias"],
                            train, noise=noise, rng=rng)


def export_readout_positions(path, neuron_ids, coordinates: np.ndarray, mu: np.ndarray):
    """CSV of anatomical coordinates next to learned readout positions."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["neuron_id", "coord_x", "coord_y", "mu_x", "mu_y"])
        for i, nid in enumerate(neuron_ids):
            writer.writerow([nid, f"{coordinates[i, 0]:.6g}", f"{coordinates[i, 1]:.6g}",
                             f"{mu[i, 0]:.6g}", f"{mu[i, 1]:.6g}"])
