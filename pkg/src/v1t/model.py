"""Shared core + per-mouse readouts, and the linear-nonlinear baseline.

The core (tokenizer + encoder stack) has a single parameter set used by
every animal; each mouse contributes its own readout.  Three modes:

  v1t    -- behavior MLP inside every encoder block, shifter readout
  vit    -- vanilla ViT core; behaviors optionally enter as constant
            image channels (pupil center stays with the shifter unless
            explicitly included)
  linear -- elu+1 ( W . [flat image, behaviors] + b ) per neuron

Checkpoints are a single file: a JSON header (config echo, epoch,
metric, blob index) followed by raw little-endian float32 blobs, which
reload bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import CoreConfig
from .data import MouseRecord, MouseStandardizer
from .encoder import (AttentionTrace, encoder_stack, init_block_params, init_bmlp_params,
                      init_final_norm_params, reshape_core_output)
from .exceptions import ConfigError, DataError
from .readout import init_readout_params, readout_forward
from .tensor import Tensor, elu_plus_one, make_rng, truncated_normal
from .tokenizer import init_tokenizer_params, patch_grid, tokenize, tokenizer_in_channels

CHECKPOINT_MAGIC = b"V1TCKPT1\n"
BEHAVIOR_CHANNEL_COLUMNS = (0, 1, 4)   # dilation, derivative, speed
ALL_BEHAVIOR_COLUMNS = (0, 1, 2, 3, 4)


class V1TModel:
    """Parameter container plus the forward pass for all three modes."""

    def __init__(self, cfg: CoreConfig, input_shape, mice: dict, seed: int = 0,
                 dtype=np.float32, init: bool = True):
        """mice maps mouse_id -> dict(n_neurons=..., coords=raw [n,2],
        bias_init=optional per-neuron vector)."""
        self.cfg = cfg.validate()
        self.input_shape = tuple(input_shape)  # (c, h, w)
        self.dtype = np.dtype(dtype).type
        self.params: dict[str, Tensor] = {}
        self.mouse_info: dict[str, dict] = {}
        c, h, w = self.input_shape
        self.grid = patch_grid(h, w, cfg) if cfg.mode != "linear" else None

        for mouse_id, info in mice.items():
            coords = np.asarray(info["coords"], dtype=np.float64)
            mean = coords.mean(axis=0)
            std = coords.std(axis=0)
            std[std == 0] = 1.0
            self.mouse_info[mouse_id] = {
                "n_neurons": int(info["n_neurons"]),
                "coords_std": ((coords - mean) / std).astype(self.dtype),
                "bias_init": None if info.get("bias_init") is None
                             else np.asarray(info["bias_init"], dtype=self.dtype),
            }

        if init:
            rng = make_rng(seed)
            if cfg.mode == "linear":
                self._init_linear(rng)
            else:
                self._init_core(rng)
                for mouse_id in self.mouse_info:
                    init_readout_params(
                        self.params, f"readout.{mouse_id}", cfg,
                        self.mouse_info[mouse_id]["n_neurons"], rng, self.dtype,
                        bias_init=self.mouse_info[mouse_id]["bias_init"])

    # -- construction ---------------------------------------------------------

    def _behavior_channel_columns(self):
        if self.cfg.mode != "vit" or not self.cfg.vit_behavior_channels:
            return ()
        if self.cfg.vit_include_pupil_channels or not self.cfg.use_shifter:
            return ALL_BEHAVIOR_COLUMNS
        return BEHAVIOR_CHANNEL_COLUMNS

    def _init_core(self, rng):
        c, h, w = self.input_shape
        in_ch = tokenizer_in_channels(self.cfg, c, len(self._behavior_channel_columns()))
        init_tokenizer_params(self.params, "core.tok", self.cfg, in_ch, self.grid, rng, self.dtype)
        if self.cfg.mode == "v1t":
            if self.cfg.bmlp_shared:
                init_bmlp_params(self.params, "core.bmlp", self.cfg, rng, self.dtype)
            else:
                last = 1 if self.cfg.bmlp_first_block_only else self.cfg.n_blocks
                for i in range(last):
                    init_bmlp_params(self.params, f"core.block{i}.bmlp", self.cfg, rng, self.dtype)
        for i in range(self.cfg.n_blocks):
            init_block_params(self.params, f"core.block{i}", self.cfg, rng, self.dtype)
        init_final_norm_params(self.params, self.cfg, self.dtype)

    def _init_linear(self, rng):
        c, h, w = self.input_shape
        n_features = c * h * w + 5
        for mouse_id, info in self.mouse_info.items():
            n = info["n_neurons"]
            self.params[f"readout.{mouse_id}.w"] = Tensor(
                truncated_normal(rng, (n_features, n), dtype=self.dtype), requires_grad=True)
            bias = np.zeros(n, dtype=self.dtype) if info["bias_init"] is None else info["bias_init"]
            self.params[f"readout.{mouse_id}.bias"] = Tensor(bias.copy(), requires_grad=True)

    @classmethod
    def from_records(cls, cfg: CoreConfig, records: list[MouseRecord],
                     standardizers: dict[str, MouseStandardizer] | None = None,
                     seed: int = 0, dtype=np.float32) -> "V1TModel":
        """Build a model sized for preprocessed records."""
        mice = {}
        for rec in records:
            bias = None
            if cfg.readout_bias_init == "mean" and standardizers is not None:
                bias = standardizers[rec.mouse_id].response_mean_standardized
            mice[rec.mouse_id] = {"n_neurons": rec.n_neurons, "coords": rec.coordinates,
                                  "bias_init": bias}
        shape = records[0].images.shape[1:]
        return cls(cfg, shape, mice, seed=seed, dtype=dtype)

    # -- forward --------------------------------------------------------------

    def forward(self, mouse_id: str, images: np.ndarray, behaviors: np.ndarray,
                pupil_center: np.ndarray, rng: np.random.Generator | None = None,
                train: bool = False, trace: AttentionTrace | None = None,
                readout_noise: np.ndarray | None = None) -> Tensor:
        """Predict [batch, n_neurons] responses (strictly positive)."""
        if mouse_id not in self.mouse_info:
            raise DataError(f"no readout for mouse {mouse_id!r}")
        if train and rng is None:
            stochastic = (self.cfg.patch_dropout > 0 or self.cfg.mha_dropout > 0
                          or self.cfg.mlp_dropout > 0 or self.cfg.stochastic_depth > 0
                          or readout_noise is None)
            if stochastic and self.cfg.mode != "linear":
                raise ConfigError("training-mode forward needs an rng")
        if self.cfg.mode == "linear":
            return self.linear_baseline_forward(mouse_id, images, behaviors)

        images = np.ascontiguousarray(images, dtype=self.dtype)
        behaviors = np.ascontiguousarray(behaviors, dtype=self.dtype)
        x = Tensor(images)
        beh = Tensor(behaviors)
        pupil = Tensor(np.ascontiguousarray(pupil_center, dtype=self.dtype))

        channel_cols = self._behavior_channel_columns()
        tok_behaviors = Tensor(behaviors[:, list(channel_cols)]) if channel_cols else None
        z, grid = tokenize(x, tok_behaviors, self.cfg, self.params, "core.tok", rng, train)
        bmlp_input = beh if self.cfg.mode == "v1t" else None
        z = encoder_stack(z, bmlp_input, self.params, self.cfg, rng, train, trace)
        if self.cfg.use_cls_token:
            z = z[:, 1:, :]
        features = reshape_core_output(z, grid)
        return readout_forward(
            features, self.params, f"readout.{mouse_id}", self.cfg,
            self.mouse_info[mouse_id]["coords_std"],
            pupil if self.cfg.use_shifter else None,
            train, noise=readout_noise, rng=rng)

    def linear_baseline_forward(self, mouse_id: str, images: np.ndarray,
                                behaviors: np.ndarray) -> Tensor:
        if mouse_id not in self.mouse_info:
            raise DataError(f"no readout for mouse {mouse_id!r}")
        b = images.shape[0]
        flat = np.concatenate(
            [np.ascontiguousarray(images, dtype=self.dtype).reshape(b, -1),
             np.ascontiguousarray(behaviors, dtype=self.dtype)], axis=1)
        x = Tensor(flat)
        pre = x @ self.params[f"readout.{mouse_id}.w"] + self.params[f"readout.{mouse_id}.bias"]
        return elu_plus_one(pre)

    # -- parameter bookkeeping ---------------------------------------------------

    def parameter_names(self):
        return sorted(self.params)

    def n_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def copy_param_data(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_param_data(self, blobs: dict[str, np.ndarray]):
        if set(blobs) != set(self.params):
            missing = set(self.params) ^ set(blobs)
            raise DataError(f"parameter set mismatch: {sorted(missing)[:5]}")
        for k, v in blobs.items():
            if v.shape != self.params[k].data.shape:
                raise DataError(f"{k}: shape {v.shape} != {self.params[k].data.shape}")
            self.params[k].data = v.astype(self.dtype).copy()


# -- checkpoint file -----------------------------------------------------------------


def save_checkpoint(path, model: V1TModel, epoch: int = 0, metric: float = 0.0,
                    extra: dict | None = None):
    """Single-file checkpoint: JSON header + float32 blobs, bit-exact reload."""
    blobs, index, offset = [], {}, 0
    items = [(f"param.{k}", v.data) for k, v in sorted(model.params.items())]
    for mouse_id, info in sorted(model.mouse_info.items()):
        items.append((f"const.{mouse_id}.coords_std", info["coords_std"]))
        if info["bias_init"] is not None:
            items.append((f"const.{mouse_id}.bias_init", info["bias_init"]))
    for name, arr in items:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index[name] = {"shape": list(arr.shape), "offset": offset}
        blobs.append(raw)
        offset += len(raw)
    header = {
        "config": asdict(model.cfg),
        "epoch": int(epoch),
        "metric": float(metric),
        "input_shape": list(model.input_shape),
        "mice": {m: {"n_neurons": info["n_neurons"]} for m, info in model.mouse_info.items()},
        "index": index,
        "extra": extra or {},
    }
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        fh.write(b"".join(blobs))


def load_checkpoint(path):
    """Returns (model, header) with parameters restored bit-exactly."""
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise DataError(f"{path}: not a checkpoint file")
    n = struct.unpack("<Q", raw[len(CHECKPOINT_MAGIC):len(CHECKPOINT_MAGIC) + 8])[0]
    start = len(CHECKPOINT_MAGIC) + 8
    header = json.loads(raw[start:start + n].decode("utf-8"))
    blob = raw[start + n:]

    def read(name):
        entry = header["index"][name]
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"])
        return arr.reshape(shape).copy()

    cfg = CoreConfig(**header["config"])
    mice = {}
    for mouse_id, info in header["mice"].items():
        coords = read(f"const.{mouse_id}.coords_std")
        bias_name = f"const.{mouse_id}.bias_init"
        mice[mouse_id] = {"n_neurons": info["n_neurons"], "coords": coords,
                          "bias_init": read(bias_name) if bias_name in header["index"] else None}
    model = V1TModel(cfg, header["input_shape"], mice, init=True, seed=0)
    # standardized coordinates are stored post-transform; restore verbatim
    for mouse_id in model.mouse_info:
        model.mouse_info[mouse_id]["coords_std"] = read(f"const.{mouse_id}.coords_std")
    model.load_param_data({k[len("param."):]: read(k) for k in header["index"]
                           if k.startswith("param.")})
    return model, header
