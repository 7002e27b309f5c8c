"""Attention rollout and its geometry.

Rollout multiplies head-averaged attention matrices across blocks to
attribute the core's output to input patches.  By default each block's
matrix gets the residual identity added and rows renormalized before the
product; `residual=False` reproduces the bare multiply-the-averages
reading.  The per-trial map is the column relevance of the product,
averaged over target rows, reshaped to the patch grid, and min-max
normalized to [0, 1].
"""

from __future__ import annotations

import csv

import numpy as np
from scipy import special as _special

from .data import bilinear_resize
from .exceptions import DataError, DimensionError
from .tokenizer import PatchGrid


class AttentionMap:
    """Normalized per-trial attention map on the patch grid."""

    def __init__(self, grid_values: np.ndarray, trial_id=None, raw: np.ndarray | None = None):
        self.values = grid_values      # [rows, cols] in [0, 1]
        self.trial_id = trial_id
        self.raw = raw                 # pre-normalization values
        self.is_constant = bool(np.ptp(grid_values) == 0)

    def upsampled(self, out_h: int, out_w: int) -> np.ndarray:
        """Stimulus-resolution map; normalization happens after upsampling."""
        base = self.values if self.raw is None else self.raw
        up = bilinear_resize(base.astype(np.float64), out_h, out_w)
        return _minmax(up)


def _minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def rollout_matrix(trace: np.ndarray, residual: bool = True) -> np.ndarray:
    """[n_blocks, n_heads, l, l] trace -> [l, l] rollout product.

    Per block: average heads; with `residual`, add I and renormalize rows
    so the matrix stays row-stochastic; multiply left-to-right from the
    first block.
    """
    if trace.ndim != 4:
        raise DimensionError("rollout expects [n_blocks, n_heads, l, l]")
    if trace.shape[0] == 0:
        raise DataError("empty attention trace")
    l = trace.shape[-1]
    result = np.eye(l)
    for block in trace:
        a = block.mean(axis=0)
        if residual:
            a = a + np.eye(l)
            a = a / a.sum(axis=-1, keepdims=True)
        result = a @ result
    return result


def attention_rollout(trace: np.ndarray, grid: PatchGrid, residual: bool = True,
                      trial_id=None) -> AttentionMap:
    """Reduce a single-trial trace to a normalized [rows, cols] map."""
    r = rollout_matrix(trace, residual=residual)
    relevance = r.mean(axis=0)            # column relevance, averaged over targets
    if relevance.size != grid.tokens:
        raise DimensionError(f"{relevance.size} tokens do not fill grid {grid}")
    raw = relevance.reshape(grid.rows, grid.cols)
    return AttentionMap(_minmax(raw), trial_id=trial_id, raw=raw)


def center_of_mass(amap: AttentionMap | np.ndarray):
    """Intensity-weighted mean (row, col) of a map."""
    values = amap.values if isinstance(amap, AttentionMap) else np.asarray(amap, dtype=np.float64)
    total = values.sum()
    if total <= 0:
        raise DataError("center of mass undefined for an all-zero map")
    rows, cols = values.shape
    ri = np.arange(rows, dtype=np.float64)
    ci = np.arange(cols, dtype=np.float64)
    return (float((values.sum(axis=1) * ri).sum() / total),
            float((values.sum(axis=0) * ci).sum() / total))


def pearson_with_p(x: np.ndarray, y: np.ndarray):
    """Pearson r plus the two-sided p-value from the t-distribution."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.size
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if denom == 0:
        raise DataError("zero variance in a correlation input")
    r = float(np.clip((xc * yc).sum() / denom, -1.0, 1.0))
    if abs(r) == 1.0:
        return r, 0.0
    df = n - 2
    t2 = r * r * df / (1.0 - r * r)
    p = float(_special.betainc(0.5 * df, 0.5, df / (df + t2)))
    return r, p


def pupil_attention_correlation(maps: list[AttentionMap], pupil_centers: np.ndarray) -> dict:
    """Correlate map centers of mass with pupil centers, per axis.

    x pairs the CoM column with pupil x; y pairs the CoM row with pupil
    y.  Needs at least 10 trials.
    """
    if len(maps) < 10:
        raise DataError(f"pupil correlation needs >= 10 trials, got {len(maps)}")
    if len(maps) != len(pupil_centers):
        raise DataError("maps and pupil centers disagree on trial count")
    coms = np.array([center_of_mass(m) for m in maps])  # (row, col)
    corr_x, p_x = pearson_with_p(coms[:, 1], pupil_centers[:, 0])
    corr_y, p_y = pearson_with_p(coms[:, 0], pupil_centers[:, 1])
    return {"corr_x": corr_x, "p_x": p_x, "corr_y": corr_y, "p_y": p_y,
            "n_trials": len(maps)}


def export_com_series(path, trial_ids, coms: np.ndarray, pupil_centers: np.ndarray):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trial_id", "com_row", "com_col", "pupil_x", "pupil_y"])
        for tid, (row, col), (px, py) in zip(trial_ids, coms, pupil_centers):
            writer.writerow([tid, f"{row:.6f}", f"{col:.6f}", f"{px:.6f}", f"{py:.6f}"])


# -- image export ---------------------------------------------------------------------


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.round(_minmax(x.astype(np.float64)) * 255.0).astype(np.uint8)


def write_pgm(path, gray_u8: np.ndarray):
    """Binary PGM (P5), maxval 255."""
    h, w = gray_u8.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(gray_u8, dtype=np.uint8).tobytes())


def write_ppm(path, rgb_u8: np.ndarray):
    """Binary PPM (P6), maxval 255."""
    h, w, _ = rgb_u8.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb_u8, dtype=np.uint8).tobytes())


def read_pnm(path):
    """Read back P5/P6 files written by this module."""
    raw = open(path, "rb").read()
    parts = raw.split(b"\n", 3)
    magic, size, maxval, data = parts[0], parts[1], parts[2], parts[3]
    w, h = map(int, size.split())
    arr = np.frombuffer(data, dtype=np.uint8)
    if magic == b"P5":
        return arr[:h * w].reshape(h, w)
    if magic == b"P6":
        return arr[:h * w * 3].reshape(h, w, 3)
    raise DataError(f"{path}: not a P5/P6 file")


def emit_heatmap(amap: AttentionMap, stimulus: np.ndarray, out_prefix) -> tuple:
    """Write `<prefix>_map.pgm` and `<prefix>_overlay.ppm`.

    The map is bilinearly upsampled to the stimulus resolution and
    min-max normalized afterwards; the overlay carries the map in the
    red channel over the grayscale stimulus.
    """
    if stimulus.ndim == 3:
        stimulus = stimulus.mean(axis=0)
    h, w = stimulus.shape
    up = amap.upsampled(h, w)
    map_u8 = np.round(up * 255.0).astype(np.uint8)
    stim_u8 = _to_u8(stimulus)
    map_path = f"{out_prefix}_map.pgm"
    overlay_path = f"{out_prefix}_overlay.ppm"
    write_pgm(map_path, map_u8)
    overlay = np.stack([map_u8, stim_u8, stim_u8], axis=-1)
    write_ppm(overlay_path, overlay)
    return map_path, overlay_path
