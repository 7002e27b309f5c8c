"""Synthetic V1-like dataset generator.

Stands in for real recordings at desk scale.  Each neuron is a
unit-norm Gabor filter centered in the middle of the image; its mean
firing rate for a trial is

    rate = elu_plus_one(w_gain * <gabor, image> * gain(behaviors))

with a multiplicative behavioral gain ``1 + 0.5 * tanh(beta . behaviors)``
and a receptive field that shifts with the trial's pupil center (gaze).
Responses are Poisson draws from the rate.  Test images are repeated
``n_repeats`` times with freshly sampled behaviors and noise so that
repeat-based analyses have something to chew on.

Everything is driven by one seed; identical seeds yield bit-identical
output directories.  Ground-truth rates and filter parameters are stored
next to the data so tests can compare against the closed form.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import MouseRecord, save_dataset, _write_f32, _read_f32, _read_manifest
from .exceptions import DataError
from .validation import check_positive


def elu_plus_one_np(x: np.ndarray) -> np.ndarray:
    """Numpy twin of the tensor-level activation: x+1 above 0, e^x below."""
    return np.where(x > 0.0, x + 1.0, np.exp(np.minimum(x, 0.0)))


@dataclass
class SyntheticMouseParams:
    """Closed-form description of one synthetic mouse."""

    gabors: np.ndarray      # [n_m, h, w], unit L2 norm
    rf_centers: np.ndarray  # [n_m, 2] as (x, y) in pixels
    w_gain: np.ndarray      # [n_m]
    beta: np.ndarray        # [n_m, 5] behavioral gain weights
    gaze_gain: float        # pixels of receptive-field shift per pupil unit

    @property
    def n_neurons(self) -> int:
        return self.gabors.shape[0]


def make_gabor(h: int, w: int, cx: float, cy: float, theta: float,
               wavelength: float, sigma: float, phase: float) -> np.ndarray:
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    xr = (x - cx) * np.cos(theta) + (y - cy) * np.sin(theta)
    yr = -(x - cx) * np.sin(theta) + (y - cy) * np.cos(theta)
    env = np.exp(-(xr * xr + yr * yr) / (2.0 * sigma * sigma))
    g = env * np.cos(2.0 * np.pi * xr / wavelength + phase)
    return g / np.linalg.norm(g)


def pink_noise_images(rng: np.random.Generator, n: int, h: int, w: int,
                      exponent: float = 1.0) -> np.ndarray:
    """1/f-spectrum noise images, standardized per image."""
    white = rng.normal(size=(n, h, w))
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    f = np.sqrt(fy * fy + fx * fx)
    f[0, 0] = 1.0
    imgs = np.fft.ifft2(np.fft.fft2(white) / f ** exponent).real
    imgs -= imgs.mean(axis=(1, 2), keepdims=True)
    imgs /= imgs.std(axis=(1, 2), keepdims=True)
    return imgs


def shift_image(img: np.ndarray, dy: float, dx: float) -> np.ndarray:
    """Sample img at (y+dy, x+dx) with bilinear weights and edge clamping."""
    h, w = img.shape
    ys = np.arange(h) + dy
    xs = np.arange(w) + dx
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    fy = ys - y0
    fx = xs - x0
    y0c, y1c = np.clip(y0, 0, h - 1), np.clip(y0 + 1, 0, h - 1)
    x0c, x1c = np.clip(x0, 0, w - 1), np.clip(x0 + 1, 0, w - 1)
    rows = img[y0c] * (1 - fy)[:, None] + img[y1c] * fy[:, None]
    return rows[:, x0c] * (1 - fx) + rows[:, x1c] * fx


def behavior_gain(params: SyntheticMouseParams, behaviors: np.ndarray) -> np.ndarray:
    """[n_t, n_m] multiplicative gain, bounded in (0.5, 1.5)."""
    return 1.0 + 0.5 * np.tanh(behaviors @ params.beta.T)


def stimulus_drive(params: SyntheticMouseParams, images: np.ndarray,
                   pupil_center: np.ndarray) -> np.ndarray:
    """[n_t, n_m] gaze-shifted filter responses, scaled by w_gain."""
    n_t = images.shape[0]
    flat_g = params.gabors.reshape(params.n_neurons, -1)
    out = np.empty((n_t, params.n_neurons))
    for t in range(n_t):
        # moving the RF by +delta equals sampling the image at +delta
        dx = params.gaze_gain * pupil_center[t, 0]
        dy = params.gaze_gain * pupil_center[t, 1]
        shifted = shift_image(images[t], dy, dx)
        out[t] = flat_g @ shifted.reshape(-1)
    return out * params.w_gain


def response_rate(params: SyntheticMouseParams, images: np.ndarray,
                  behaviors: np.ndarray, pupil_center: np.ndarray) -> np.ndarray:
    """Closed-form mean rate for every (trial, neuron)."""
    drive = stimulus_drive(params, images, pupil_center)
    return elu_plus_one_np(drive * behavior_gain(params, behaviors))


def _sample_mouse_params(rng: np.random.Generator, n_neurons: int, h: int, w: int,
                         calibration_images: np.ndarray, drive_std: float,
                         gaze_gain: float) -> SyntheticMouseParams:
    # RF centers stay well inside the central third of the image
    cx = rng.uniform(0.40 * w, 0.60 * w, n_neurons)
    cy = rng.uniform(0.40 * h, 0.60 * h, n_neurons)
    theta = rng.uniform(0.0, np.pi, n_neurons)
    wavelength = rng.uniform(6.0, 14.0, n_neurons)
    sigma = rng.uniform(2.5, 4.5, n_neurons)
    phase = rng.uniform(0.0, 2.0 * np.pi, n_neurons)
    gabors = np.stack([
        make_gabor(h, w, cx[i], cy[i], theta[i], wavelength[i], sigma[i], phase[i])
        for i in range(n_neurons)
    ])
    # arousal (pupil dilation) raises gain; gaze enters geometrically, not here
    beta = np.zeros((n_neurons, 5))
    beta[:, 0] = rng.uniform(0.5, 1.1, n_neurons)
    beta[:, 1] = rng.normal(0.0, 0.3, n_neurons)
    beta[:, 4] = rng.normal(0.0, 0.4, n_neurons)
    # scale each neuron so its unshifted drive has std = drive_std
    raw = gabors.reshape(n_neurons, -1) @ calibration_images.reshape(len(calibration_images), -1).T
    w_gain = drive_std / raw.std(axis=1)
    return SyntheticMouseParams(gabors=gabors, rf_centers=np.stack([cx, cy], axis=1),
                                w_gain=w_gain, beta=beta, gaze_gain=gaze_gain)


def _save_mouse_params(directory: Path, params: SyntheticMouseParams):
    _write_f32(directory / "gt_gabors.f32", params.gabors)
    _write_f32(directory / "gt_rf_centers.f32", params.rf_centers)
    _write_f32(directory / "gt_w_gain.f32", params.w_gain)
    _write_f32(directory / "gt_beta.f32", params.beta)


def load_synthetic_params(root, mouse_id: str) -> SyntheticMouseParams:
    root = Path(root)
    manifest = _read_manifest(root / "manifest.txt")
    h, w = int(manifest["h"]), int(manifest["w"])
    n_m = int(manifest[f"mouse_{mouse_id}.n_m"])
    d = root / f"mouse_{mouse_id}"
    return SyntheticMouseParams(
        gabors=_read_f32(d / "gt_gabors.f32", (n_m, h, w)).astype(np.float64),
        rf_centers=_read_f32(d / "gt_rf_centers.f32", (n_m, 2)).astype(np.float64),
        w_gain=_read_f32(d / "gt_w_gain.f32", (n_m,)).astype(np.float64),
        beta=_read_f32(d / "gt_beta.f32", (n_m, 5)).astype(np.float64),
        gaze_gain=float(manifest["gen.gaze_gain"]),
    )


def generate_synthetic(out_dir, n_mice: int = 2, n_neurons: int = 50,
                       n_train: int = 600, n_val: int = 100,
                       n_test_images: int = 100, n_repeats: int = 10,
                       image_size=(36, 64), seed: int = 0,
                       drive_std: float = 3.0, gaze_gain: float = 2.5) -> Path:
    """Write a complete synthetic dataset directory and return its path."""
    for name, v in (("n_mice", n_mice), ("n_neurons", n_neurons), ("n_train", n_train),
                    ("n_val", n_val), ("n_test_images", n_test_images), ("n_repeats", n_repeats)):
        check_positive(name, v)
    h, w = image_size
    seeds = np.random.SeedSequence(seed).spawn(n_mice)
    records, all_params = [], []
    for m in range(n_mice):
        rng = np.random.Generator(np.random.PCG64(seeds[m]))
        n_unique = n_train + n_val + n_test_images
        unique_imgs = pink_noise_images(rng, n_unique, h, w)
        params = _sample_mouse_params(rng, n_neurons, h, w,
                                      unique_imgs[:n_train], drive_std, gaze_gain)

        image_ids = list(range(n_train + n_val))
        split = ["train"] * n_train + ["val"] * n_val
        repeat_groups: dict[str, list[int]] = {}
        for k in range(n_test_images):
            img_id = n_train + n_val + k
            gids = repeat_groups.setdefault(str(img_id), [])
            for _ in range(n_repeats):
                gids.append(len(image_ids))
                image_ids.append(img_id)
                split.append("test")
        n_trials = len(image_ids)

        behaviors = rng.normal(0.0, 1.0, (n_trials, 5))
        pupil_center = behaviors[:, 2:4].copy()
        images = unique_imgs[image_ids]
        rate = response_rate(params, images, behaviors, pupil_center)
        responses = rng.poisson(rate).astype(np.float32)

        rec = MouseRecord(
            mouse_id=f"m{m}",
            images=images[:, None, :, :].astype(np.float32),
            responses=responses,
            behaviors=behaviors.astype(np.float32),
            pupil_center=pupil_center.astype(np.float32),
            coordinates=_anatomical_coords(rng, params, h, w),
            split=np.array(split),
            repeat_groups={k: np.array(v) for k, v in repeat_groups.items()},
            ground_truth_rate=rate.astype(np.float32),
        )
        records.append(rec)
        all_params.append(params)

    extra = {"gen.seed": seed, "gen.n_train": n_train, "gen.n_val": n_val,
             "gen.n_test_images": n_test_images, "gen.n_repeats": n_repeats,
             "gen.drive_std": drive_std, "gen.gaze_gain": gaze_gain}
    save_dataset(out_dir, records, extra_manifest=extra)
    for rec, params in zip(records, all_params):
        _save_mouse_params(Path(out_dir) / f"mouse_{rec.mouse_id}", params)
    return Path(out_dir)


def _anatomical_coords(rng: np.random.Generator, params: SyntheticMouseParams,
                       h: int, w: int) -> np.ndarray:
    """Retinotopic cortical coordinates: a noisy affine image of RF centers."""
    cx = params.rf_centers[:, 0]
    cy = params.rf_centers[:, 1]
    coords = np.stack([(cx - w / 2.0) / (w / 2.0), (cy - h / 2.0) / (h / 2.0)], axis=1)
    return (coords + rng.normal(0.0, 0.02, coords.shape)).astype(np.float32)


def poisson_noise_ceiling(rate: np.ndarray) -> np.ndarray:
    """Per-neuron expected correlation between the true rate and Poisson draws.

    With r ~ Poisson(rate): cov(rate, r) = var(rate) and
    var(r) = var(rate) + mean(rate), so the attainable correlation is
    sd(rate) / sqrt(var(rate) + mean(rate)).
    """
    v = rate.var(axis=0)
    m = rate.mean(axis=0)
    denom = np.sqrt(v * (v + m))
    out = np.zeros_like(v)
    ok = denom > 0
    out[ok] = v[ok] / denom[ok]
    return out
