"""Component-wise gradient verification suite.

Every architectural piece is checked against central finite differences
in float64 at a tiny configuration.  Parameters are drawn at a
fan-in-scaled magnitude (the training-time 0.02 init starves gradient
paths, and saturated tanh/clip regions have structurally zero gradients
that finite differences cannot certify), and the readout check keeps
sample positions strictly inside the feature map for the same reason.
"""

from __future__ import annotations

import numpy as np

from .config import CoreConfig
from .encoder import bmlp_forward, encoder_block, init_block_params, init_bmlp_params, mha
from .exceptions import NumericalError
from .gradcheck import grad_check
from .model import V1TModel
from .readout import compute_mu, gaussian_readout, shifter_forward, sigma_raw_init
from .tensor import Tensor, make_rng, softplus
from .tokenizer import patch_grid, tokenize, tokenizer_in_channels, init_tokenizer_params
from .training import poisson_loss

TINY = dict(patch_size=4, patch_stride=4, embed_dim=8, n_blocks=2, n_heads=2, mlp_dim=16,
            patch_dropout=0.0, mha_dropout=0.0, mlp_dropout=0.0,
            pos_hidden_size=4)
TINY_IMAGE = (1, 12, 16)
DEFAULT_TOLERANCE = 1e-4


def _tiny_cfg(**overrides) -> CoreConfig:
    kw = dict(TINY)
    kw.update(overrides)
    return CoreConfig(mode=kw.pop("mode", "v1t"), **kw).validate()


def _scaled_params(params: dict, rng: np.random.Generator):
    """Replace initial values with fan-in-scaled draws (float64)."""
    for name, t in params.items():
        arr = t.data.astype(np.float64)
        if name.endswith(".gamma"):
            t.data = 1.0 + 0.1 * rng.normal(size=arr.shape)
        elif name.endswith(("bias", ".b", ".beta", ".pos", ".cls")):
            t.data = 0.1 * rng.normal(size=arr.shape)
        elif name.endswith("sigma_raw"):
            t.data = np.full(arr.shape, sigma_raw_init(0.2)) + 0.05 * rng.normal(size=arr.shape)
        else:
            fan_in = arr.shape[0] if arr.ndim >= 2 else arr.size
            if name.endswith(".kernel"):
                fan_in = int(np.prod(arr.shape[1:]))
            t.data = rng.normal(size=arr.shape) * (0.6 / np.sqrt(fan_in))
    return params


def _projection(rng, shape):
    return Tensor(rng.normal(size=shape), dtype=np.float64)


def check_tokenizer(method: str, seed: int = 0, h: float = 1e-5) -> float:
    cfg = _tiny_cfg(tokenizer=method,
                    patch_stride=2 if method == "cct" else TINY["patch_stride"])
    rng = make_rng(seed)
    c, hh, ww = TINY_IMAGE
    grid = patch_grid(hh, ww, cfg)
    params: dict[str, Tensor] = {}
    init_tokenizer_params(params, "tok", cfg, tokenizer_in_channels(cfg, c, 0),
                          grid, rng, np.float64)
    _scaled_params(params, rng)
    img = Tensor(rng.normal(size=(2, c, hh, ww)), requires_grad=True, dtype=np.float64)
    proj = _projection(rng, (2, grid.tokens, cfg.embed_dim))

    def f(*ts):
        z, _ = tokenize(img, None, cfg, params, "tok", None, train=False)
        return (z * proj).sum()

    return grad_check(f, [img] + [params[k] for k in sorted(params)], h=h)


def check_bmlp(seed: int = 0, h: float = 1e-5) -> float:
    cfg = _tiny_cfg()
    rng = make_rng(seed)
    params: dict[str, Tensor] = {}
    init_bmlp_params(params, "bmlp", cfg, rng, np.float64)
    _scaled_params(params, rng)
    behaviors = Tensor(rng.normal(size=(3, 5)), requires_grad=True, dtype=np.float64)
    proj = _projection(rng, (3, cfg.embed_dim))

    def f(*ts):
        return (bmlp_forward(behaviors, params, "bmlp", 0.0, None, train=False) * proj).sum()

    return grad_check(f, [behaviors] + [params[k] for k in sorted(params)], h=h)


def check_mha(lsa: bool, seed: int = 0, h: float = 1e-5) -> float:
    cfg = _tiny_cfg(lsa=lsa)
    rng = make_rng(seed)
    params: dict[str, Tensor] = {}
    init_block_params(params, "blk", cfg, rng, np.float64)
    _scaled_params(params, rng)
    z = Tensor(rng.normal(size=(2, 5, cfg.embed_dim)), requires_grad=True, dtype=np.float64)
    proj = _projection(rng, (2, 5, cfg.embed_dim))
    attn_params = [params[k] for k in sorted(params) if ".attn." in k]

    def f(*ts):
        return (mha(z, params, "blk.attn", cfg.n_heads, lsa, 0.0, None, train=False) * proj).sum()

    return grad_check(f, [z] + attn_params, h=h)


def check_encoder_block(seed: int = 0, h: float = 1e-5) -> float:
    """Two stacked blocks, behavior adjustment included."""
    cfg = _tiny_cfg()
    rng = make_rng(seed)
    params: dict[str, Tensor] = {}
    for i in range(2):
        init_bmlp_params(params, f"core.block{i}.bmlp", cfg, rng, np.float64)
        init_block_params(params, f"core.block{i}", cfg, rng, np.float64)
    _scaled_params(params, rng)
    z = Tensor(rng.normal(size=(2, 5, cfg.embed_dim)), requires_grad=True, dtype=np.float64)
    behaviors = Tensor(rng.normal(size=(2, 5)), requires_grad=True, dtype=np.float64)
    proj = _projection(rng, (2, 5, cfg.embed_dim))

    def f(*ts):
        out = z
        for i in range(2):
            out = encoder_block(out, behaviors, params, f"core.block{i}",
                                f"core.block{i}.bmlp", cfg, None, train=False)
        return (out * proj).sum()

    return grad_check(f, [z, behaviors] + [params[k] for k in sorted(params)], h=h)


def check_readout(seed: int = 0, h: float = 1e-5) -> float:
    """Gaussian readout including position network, shifter, and sigma."""
    from .readout import init_readout_params

    cfg = _tiny_cfg()
    rng = make_rng(seed)
    n, d, hh, ww = 3, cfg.embed_dim, 4, 6
    params: dict[str, Tensor] = {}
    init_readout_params(params, "ro", cfg, n, rng, np.float64)
    _scaled_params(params, rng)
    features = Tensor(rng.normal(size=(2, d, hh, ww)), requires_grad=True, dtype=np.float64)
    coords = Tensor(rng.normal(size=(n, 2)), requires_grad=True, dtype=np.float64)
    pupil = Tensor(rng.normal(size=(2, 2)), requires_grad=True, dtype=np.float64)
    noise = 0.5 * rng.normal(size=(2, n, 2))

    def positions_interior():
        mu = compute_mu(coords, params, "ro", cfg.pos_hidden_layers)
        shift = shifter_forward(pupil, params, "ro")
        sigma = softplus(params["ro.sigma_raw"])
        pos = mu.data[None] + shift.data[:, None] + sigma.data[None] * noise
        return np.abs(pos).max() < 0.98

    if not positions_interior():
        raise NumericalError("readout gradcheck positions not interior; adjust the seed")

    def f(*ts):
        mu = compute_mu(coords, params, "ro", cfg.pos_hidden_layers)
        shift = shifter_forward(pupil, params, "ro")
        sigma = softplus(params["ro.sigma_raw"])
        out = gaussian_readout(features, mu, shift, sigma, params["ro.w"],
                               params["ro.bias"], train=True, noise=noise)
        return out.sum()

    return grad_check(f, [features, coords, pupil] + [params[k] for k in sorted(params)], h=h)


def check_poisson(seed: int = 0, h: float = 1e-5) -> float:
    rng = make_rng(seed)
    r = rng.poisson(2.0, size=(4, 6)).astype(np.float64)
    o = Tensor(rng.uniform(0.5, 4.0, size=(4, 6)), requires_grad=True, dtype=np.float64)

    def f(*ts):
        return poisson_loss(r, o)

    return grad_check(f, [o], h=h)


def check_full_model(mode: str = "v1t", tokenizer: str = "sliding_window",
                     lsa: bool = False, seed: int = 0, h: float = 1e-5) -> float:
    cfg = _tiny_cfg(mode=mode, tokenizer=tokenizer, lsa=lsa)
    rng = make_rng(seed)
    mice = {"a": {"n_neurons": 3, "coords": rng.normal(size=(3, 2))}}
    model = V1TModel(cfg, TINY_IMAGE, mice, seed=seed, dtype=np.float64)
    _scaled_params(model.params, rng)
    imgs = rng.normal(size=(2, *TINY_IMAGE))
    beh = rng.normal(size=(2, 5))
    pup = rng.normal(size=(2, 2))
    resp = rng.poisson(1.0, size=(2, 3)).astype(np.float64)
    noise = 0.5 * rng.normal(size=(2, 3, 2))

    def f(*ts):
        out = model.forward("a", imgs, beh, pup, rng=None, train=True, readout_noise=noise)
        return poisson_loss(resp, out)

    return grad_check(f, [model.params[k] for k in sorted(model.params)], h=h)


def run_all(seed: int = 0, h: float = 1e-5) -> dict[str, float]:
    """Full component table; keys are component names, values max rel errors."""
    out = {}
    for method in ("sliding_window", "conv2d", "spt", "cct"):
        out[f"tokenizer_{method}"] = check_tokenizer(method, seed=seed, h=h)
    out["bmlp"] = check_bmlp(seed=seed, h=h)
    out["mha_standard"] = check_mha(False, seed=seed, h=h)
    out["mha_lsa"] = check_mha(True, seed=seed, h=h)
    out["encoder_block"] = check_encoder_block(seed=seed, h=h)
    out["gaussian_readout"] = check_readout(seed=seed, h=h)
    out["poisson_loss"] = check_poisson(seed=seed, h=h)
    out["full_model"] = check_full_model(seed=seed, h=h)
    return out
