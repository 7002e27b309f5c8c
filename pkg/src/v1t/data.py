"""Dataset records, the on-disk binary format, and input preprocessing.

Directory layout::

    <root>/manifest.txt                key=value, UTF-8
    <root>/mouse_<ID>/images.f32       [n_trials, c, h, w] little-endian float32
    <root>/mouse_<ID>/responses.f32    [n_trials, n_m]
    <root>/mouse_<ID>/behaviors.f32    [n_trials, 5]
    <root>/mouse_<ID>/pupil_center.f32 [n_trials, 2]
    <root>/mouse_<ID>/coordinates.f32  [n_m, 2]
    <root>/mouse_<ID>/splits.txt       one of train/val/test per line;
                                       test lines carry "repeat_group=<image_id>"

All tensors are row-major (trial-major).  The manifest declares
format_version, n_mice, c, h, w and per-mouse ``mouse_<ID>.n_m`` /
``mouse_<ID>.n_trials``; loading validates every file against it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import PreprocessConfig
from .exceptions import DataError
from .validation import check_array

FORMAT_VERSION = 1
BEHAVIOR_NAMES = ("pupil_dilation", "dilation_derivative", "pupil_center_x",
                  "pupil_center_y", "running_speed")
SPLITS = ("train", "val", "test")


@dataclass
class MouseRecord:
    """One animal's stimuli, responses, behavior, and trial split."""

    mouse_id: str
    images: np.ndarray        # [n_trials, c, h, w]
    responses: np.ndarray     # [n_trials, n_m], non-negative (raw)
    behaviors: np.ndarray     # [n_trials, 5]
    pupil_center: np.ndarray  # [n_trials, 2]
    coordinates: np.ndarray   # [n_m, 2] anatomical positions
    split: np.ndarray         # [n_trials] of "train"/"val"/"test"
    repeat_groups: dict = field(default_factory=dict)  # image id -> trial indices
    ground_truth_rate: np.ndarray | None = None        # [n_trials, n_m], synthetic only

    @property
    def n_trials(self) -> int:
        return self.images.shape[0]

    @property
    def n_neurons(self) -> int:
        return self.responses.shape[1]

    def trial_indices(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise DataError(f"unknown split: {split}")
        return np.flatnonzero(self.split == split)

    def validate(self) -> "MouseRecord":
        n = self.n_trials
        check_array(f"{self.mouse_id}/images", self.images, ndim=4)
        check_array(f"{self.mouse_id}/responses", self.responses,
                    shape=(n, None), non_negative=True)
        check_array(f"{self.mouse_id}/behaviors", self.behaviors, shape=(n, 5))
        check_array(f"{self.mouse_id}/pupil_center", self.pupil_center, shape=(n, 2))
        check_array(f"{self.mouse_id}/coordinates", self.coordinates,
                    shape=(self.n_neurons, None))
        if self.n_neurons < 1:
            raise DataError(f"{self.mouse_id}: no neurons")
        if len(self.split) != n:
            raise DataError(f"{self.mouse_id}: split length {len(self.split)} != n_trials {n}")
        return self


# -- binary helpers ---------------------------------------------------------------


def _write_f32(path: Path, arr: np.ndarray):
    np.ascontiguousarray(arr, dtype="<f4").tofile(path)


def _read_f32(path: Path, shape) -> np.ndarray:
    if not path.exists():
        raise DataError(f"missing file: {path}")
    raw = np.fromfile(path, dtype="<f4")
    expected = int(np.prod(shape))
    if raw.size != expected:
        raise DataError(f"{path}: expected {expected} float32 values for shape {tuple(shape)}, found {raw.size}")
    arr = raw.reshape(shape)
    if not np.isfinite(arr).all():
        raise DataError(f"{path}: contains non-finite values")
    return arr


def _write_manifest(path: Path, entries: dict):
    lines = [f"{k}={v}" for k, v in entries.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_manifest(path: Path) -> dict:
    if not path.exists():
        raise DataError(f"manifest missing: {path}")
    out = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}: malformed manifest line {line!r}")
        key, value = line.split("=", 1)
        out[key] = value
    return out


def save_dataset(root, records: list[MouseRecord], extra_manifest: dict | None = None):
    """Write records to `root` in the directory layout above."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    c, h, w = records[0].images.shape[1:]
    manifest = {"format_version": FORMAT_VERSION, "n_mice": len(records),
                "c": c, "h": h, "w": w}
    for rec in records:
        manifest[f"mouse_{rec.mouse_id}.n_m"] = rec.n_neurons
        manifest[f"mouse_{rec.mouse_id}.n_trials"] = rec.n_trials
    if extra_manifest:
        manifest.update(extra_manifest)
    _write_manifest(root / "manifest.txt", manifest)
    for rec in records:
        rec.validate()
        d = root / f"mouse_{rec.mouse_id}"
        d.mkdir(exist_ok=True)
        _write_f32(d / "images.f32", rec.images)
        _write_f32(d / "responses.f32", rec.responses)
        _write_f32(d / "behaviors.f32", rec.behaviors)
        _write_f32(d / "pupil_center.f32", rec.pupil_center)
        _write_f32(d / "coordinates.f32", rec.coordinates)
        if rec.ground_truth_rate is not None:
            _write_f32(d / "ground_truth_rate.f32", rec.ground_truth_rate)
        lines = []
        inverse = {}
        for gid, idxs in rec.repeat_groups.items():
            for t in idxs:
                inverse[int(t)] = gid
        for t, s in enumerate(rec.split):
            if s == "test":
                gid = inverse.get(t)
                lines.append(f"test repeat_group={gid}" if gid is not None else "test")
            else:
                lines.append(str(s))
        (d / "splits.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(root) -> list[MouseRecord]:
    """Load every mouse under `root`, validating against the manifest."""
    root = Path(root)
    manifest = _read_manifest(root / "manifest.txt")
    try:
        n_mice = int(manifest["n_mice"])
        c, h, w = int(manifest["c"]), int(manifest["h"]), int(manifest["w"])
    except (KeyError, ValueError) as err:
        raise DataError(f"{root}/manifest.txt: missing or malformed header keys") from err
    mouse_ids = [k[len("mouse_"):-len(".n_m")] for k in manifest if k.startswith("mouse_") and k.endswith(".n_m")]
    if len(mouse_ids) != n_mice:
        raise DataError(f"{root}: manifest declares n_mice={n_mice} but lists {len(mouse_ids)} mice")

    records = []
    for mid in mouse_ids:
        n_m = int(manifest[f"mouse_{mid}.n_m"])
        n_trials = int(manifest[f"mouse_{mid}.n_trials"])
        d = root / f"mouse_{mid}"
        images = _read_f32(d / "images.f32", (n_trials, c, h, w))
        responses = _read_f32(d / "responses.f32", (n_trials, n_m))
        behaviors = _read_f32(d / "behaviors.f32", (n_trials, 5))
        pupil = _read_f32(d / "pupil_center.f32", (n_trials, 2))
        coords = _read_f32(d / "coordinates.f32", (n_m, 2))
        gt_path = d / "ground_truth_rate.f32"
        gt = _read_f32(gt_path, (n_trials, n_m)) if gt_path.exists() else None

        split_path = d / "splits.txt"
        if not split_path.exists():
            raise DataError(f"missing file: {split_path}")
        split, repeat_groups = [], {}
        for t, line in enumerate(split_path.read_text(encoding="utf-8").splitlines()):
            parts = line.strip().split()
            if not parts:
                continue
            label = parts[0]
            if label not in SPLITS:
                raise DataError(f"{split_path}:{t + 1}: unknown split label {label!r}")
            split.append(label)
            for tok in parts[1:]:
                if tok.startswith("repeat_group="):
                    repeat_groups.setdefault(tok.split("=", 1)[1], []).append(t)
        if len(split) != n_trials:
            raise DataError(f"{split_path}: {len(split)} lines but manifest declares {n_trials} trials")

        rec = MouseRecord(mouse_id=mid, images=images, responses=responses,
                          behaviors=behaviors, pupil_center=pupil, coordinates=coords,
                          split=np.array(split),
                          repeat_groups={k: np.array(v) for k, v in repeat_groups.items()},
                          ground_truth_rate=gt)
        records.append(rec.validate())
    return records


# -- image geometry ----------------------------------------------------------------


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize the trailing two axes with half-pixel-centered bilinear sampling."""
    *lead, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    flat = img.reshape(-1, h, w)
    v = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    u = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    v0 = np.floor(v).astype(np.intp)
    u0 = np.floor(u).astype(np.intp)
    fv = (v - v0).astype(img.dtype)
    fu = (u - u0).astype(img.dtype)
    v0c, v1c = np.clip(v0, 0, h - 1), np.clip(v0 + 1, 0, h - 1)
    u0c, u1c = np.clip(u0, 0, w - 1), np.clip(u0 + 1, 0, w - 1)
    top = flat[:, v0c][:, :, u0c] * (1 - fu) + flat[:, v0c][:, :, u1c] * fu
    bot = flat[:, v1c][:, :, u0c] * (1 - fu) + flat[:, v1c][:, :, u1c] * fu
    out = top * (1 - fv)[:, None] + bot * fv[:, None]
    return out.reshape(*lead, out_h, out_w)


def center_crop(img: np.ndarray, alpha: float) -> np.ndarray:
    """Crop the trailing two axes to round(alpha * size), centered."""
    *_, h, w = img.shape
    ch = int(np.round(alpha * h))
    cw = int(np.round(alpha * w))
    if ch < 2 or cw < 2:
        raise DataError(f"center crop {ch}x{cw} too small (alpha={alpha})")
    top = (h - ch) // 2
    left = (w - cw) // 2
    return img[..., top:top + ch, left:left + cw]


def preprocess_image(img: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    """Center-crop by alpha, then bilinear-resize to the target size."""
    cfg.validate()
    return bilinear_resize(center_crop(img, cfg.alpha), cfg.target_h, cfg.target_w)


# -- standardization -----------------------------------------------------------------


@dataclass
class MouseStandardizer:
    """Per-mouse train-split statistics plus the crop/resize geometry.

    Images and behaviors are shifted/scaled to zero mean, unit variance.
    Responses are never standardized for the loss (it needs non-negative
    targets); ``response_std`` and ``response_mean_standardized`` exist
    solely for the optional readout bias initialization.
    """

    mouse_id: str
    preprocess: PreprocessConfig
    image_mean: float
    image_std: float
    behavior_mean: np.ndarray       # [5]
    behavior_std: np.ndarray        # [5]
    pupil_mean: np.ndarray          # [2]
    pupil_std: np.ndarray           # [2]
    response_std: np.ndarray        # [n_m]
    response_mean_standardized: np.ndarray  # [n_m], mean of r / std over train

    def transform_images(self, images: np.ndarray) -> np.ndarray:
        out = preprocess_image(images, self.preprocess)
        return (out - self.image_mean) / self.image_std

    def inverse_transform_images(self, images: np.ndarray) -> np.ndarray:
        return images * self.image_std + self.image_mean

    def transform_behaviors(self, behaviors: np.ndarray) -> np.ndarray:
        return (behaviors - self.behavior_mean) / self.behavior_std

    def inverse_transform_behaviors(self, behaviors: np.ndarray) -> np.ndarray:
        return behaviors * self.behavior_std + self.behavior_mean

    def transform_pupil(self, pupil: np.ndarray) -> np.ndarray:
        return (pupil - self.pupil_mean) / self.pupil_std


def fit_standardizer(record: MouseRecord, preprocess: PreprocessConfig | None = None) -> MouseStandardizer:
    """Measure standardization statistics on the training split only."""
    pp = (preprocess or PreprocessConfig()).validate()
    train_idx = record.trial_indices("train")
    if train_idx.size == 0:
        raise DataError(f"{record.mouse_id}: empty training split")
    train_imgs = preprocess_image(record.images[train_idx], pp)
    image_mean = float(train_imgs.mean())
    image_std = float(train_imgs.std())
    behavior_mean = record.behaviors[train_idx].mean(axis=0)
    behavior_std = record.behaviors[train_idx].std(axis=0)
    pupil_mean = record.pupil_center[train_idx].mean(axis=0)
    pupil_std = record.pupil_center[train_idx].std(axis=0)
    response_std = record.responses[train_idx].std(axis=0)
    for name, std in (("images", np.array([image_std])), ("behaviors", behavior_std),
                      ("pupil_center", pupil_std), ("responses", response_std)):
        if np.any(std <= 0):
            raise DataError(f"{record.mouse_id}: degenerate {name} stream (zero train std)")
    mean_standardized = (record.responses[train_idx] / response_std).mean(axis=0)
    return MouseStandardizer(
        mouse_id=record.mouse_id, preprocess=pp,
        image_mean=image_mean, image_std=image_std,
        behavior_mean=behavior_mean.astype(np.float32), behavior_std=behavior_std.astype(np.float32),
        pupil_mean=pupil_mean.astype(np.float32), pupil_std=pupil_std.astype(np.float32),
        response_std=response_std.astype(np.float32),
        response_mean_standardized=mean_standardized.astype(np.float32),
    )


def apply_standardizer(record: MouseRecord, std: MouseStandardizer) -> MouseRecord:
    """Return a transformed copy; responses stay raw for the Poisson loss."""
    return MouseRecord(
        mouse_id=record.mouse_id,
        images=std.transform_images(record.images).astype(np.float32),
        responses=record.responses.copy(),
        behaviors=std.transform_behaviors(record.behaviors).astype(np.float32),
        pupil_center=std.transform_pupil(record.pupil_center).astype(np.float32),
        coordinates=record.coordinates.copy(),
        split=record.split.copy(),
        repeat_groups={k: v.copy() for k, v in record.repeat_groups.items()},
        ground_truth_rate=None if record.ground_truth_rate is None else record.ground_truth_rate.copy(),
    )
