"""Batch command-line entry points.

Subcommands: synth, train, evaluate, rollout, gradcheck,
export-positions.  Every run writes a resolved-config echo next to its
artifacts so results are reproducible from the output directory alone.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import gradchecks
from .config import (CoreConfig, PreprocessConfig, TrainConfig, apply_overrides,
                     config_lines, read_config_file, split_overrides)
from .data import apply_standardizer, fit_standardizer, load_dataset
from .encoder import AttentionTrace, collect_bmlp_activations, export_bmlp_activations
from .evaluation import evaluate, evaluate_ensemble
from .exceptions import ConfigError, DataError, DimensionError, NumericalError, V1TError
from .model import V1TModel, load_checkpoint, save_checkpoint
from .readout import compute_mu, export_readout_positions
from .rollout import (attention_rollout, center_of_mass, emit_heatmap,
                      export_com_series, pupil_attention_correlation)
from .synth import generate_synthetic
from .tensor import Tensor
from .tokenizer import PatchGrid
from .training import curves_to_csv, fit, train_ensemble

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise _UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="v1t", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic dataset directory")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--mice", type=int, default=2)
    sp.add_argument("--neurons", type=int, default=50)
    sp.add_argument("--train-trials", type=int, default=600)
    sp.add_argument("--val-trials", type=int, default=100)
    sp.add_argument("--test-images", type=int, default=100)
    sp.add_argument("--repeats", type=int, default=10)
    sp.add_argument("--height", type=int, default=36)
    sp.add_argument("--width", type=int, default=64)

    tp = sub.add_parser("train", help="train a model (or a seed ensemble)")
    tp.add_argument("--data", required=True)
    tp.add_argument("--out", required=True)
    tp.add_argument("--config", default=None, help="key=value config file")
    tp.add_argument("--seed", type=int, default=None)
    tp.add_argument("--mode", choices=("v1t", "vit", "linear"), default=None)
    tp.add_argument("--alpha", type=float, default=None)
    tp.add_argument("--set", dest="overrides", action="append", default=[],
                    metavar="KEY=VALUE", help="config override (repeatable)")
    tp.add_argument("--ensemble", type=int, default=0,
                    help="train N seed models, keep the best half")

    ep = sub.add_parser("evaluate", help="metrics report for a checkpoint")
    ep.add_argument("--data", required=True)
    ep.add_argument("--checkpoint", required=True)
    ep.add_argument("--out", required=True)
    ep.add_argument("--split", choices=("train", "val", "test"), default="test")
    ep.add_argument("--pooled", action="store_true",
                    help="also report the pooled-correlation variant")

    rp = sub.add_parser("rollout", help="attention rollout maps and pupil correlation")
    rp.add_argument("--data", required=True)
    rp.add_argument("--checkpoint", required=True)
    rp.add_argument("--out", required=True)
    rp.add_argument("--split", choices=("train", "val", "test"), default="test")
    rp.add_argument("--no-residual", action="store_true",
                    help="plain product of head-averaged attentions")
    rp.add_argument("--heatmaps", type=int, default=8,
                    help="number of trials to export as images")

    gp = sub.add_parser("gradcheck", help="finite-difference verification table")
    gp.add_argument("--seed", type=int, default=0)
    gp.add_argument("--tolerance", type=float, default=1e-4)
    gp.add_argument("--out", default=None)

    xp = sub.add_parser("export-positions", help="readout position CSV per mouse")
    xp.add_argument("--data", required=True)
    xp.add_argument("--checkpoint", required=True)
    xp.add_argument("--out", required=True)
    return p


def _parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects KEY=VALUE, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _resolve_configs(args):
    overrides = {}
    if args.config:
        overrides.update(read_config_file(args.config))
    overrides.update(_parse_overrides(args.overrides))
    core_kv, train_kv, pp_kv = split_overrides(overrides)
    core = apply_overrides(CoreConfig(), core_kv)
    train = apply_overrides(TrainConfig(), train_kv)
    pp = apply_overrides(PreprocessConfig(), pp_kv)
    if args.mode is not None:
        core.mode = args.mode
    if args.alpha is not None:
        pp.alpha = args.alpha
    if args.seed is not None:
        train.seed = args.seed
    core.validate()
    train.validate()
    pp.validate()
    return core, train, pp


def _echo_config(out_dir: Path, *cfgs):
    (out_dir / "config_resolved.txt").write_text(config_lines(*cfgs), encoding="utf-8")


def _load_standardized(data_dir, pp: PreprocessConfig):
    records = load_dataset(data_dir)
    stds = {r.mouse_id: fit_standardizer(r, pp) for r in records}
    transformed = [apply_standardizer(r, stds[r.mouse_id]) for r in records]
    return records, transformed, stds


# -- subcommand bodies -------------------------------------------------------------


def _cmd_synth(args) -> int:
    out = Path(args.out)
    generate_synthetic(out, n_mice=args.mice, n_neurons=args.neurons,
                       n_train=args.train_trials, n_val=args.val_trials,
                       n_test_images=args.test_images, n_repeats=args.repeats,
                       image_size=(args.height, args.width), seed=args.seed)
    print(f"wrote synthetic dataset to {out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    core, train_cfg, pp = _resolve_configs(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(out, core, train_cfg, pp)
    _, transformed, stds = _load_standardized(args.data, pp)
    extra = {"alpha": pp.alpha, "target_h": pp.target_h, "target_w": pp.target_w,
             "seed": train_cfg.seed}
    mouse_ids = [r.mouse_id for r in transformed]

    if args.ensemble and args.ensemble > 1:
        result = train_ensemble(core, transformed, train_cfg, n_train=args.ensemble,
                                n_keep=max(1, args.ensemble // 2), log=print)
        for rank, i in enumerate(result.kept):
            save_checkpoint(out / f"member_{rank}.ckpt", result.members[i],
                            metric=result.member_val_corr[i],
                            extra={**extra, "seed": result.member_seeds[i]})
        report = evaluate_ensemble([result.members[i] for i in result.kept], transformed, "test")
        (out / "ensemble_summary.txt").write_text(report.summary_text(), encoding="utf-8")
        print(report.summary_text(), end="")
        return EXIT_OK

    model = V1TModel.from_records(core, transformed, standardizers=stds, seed=train_cfg.seed)
    result = fit(model, transformed, train_cfg, log=print)
    save_checkpoint(out / "model.ckpt", model, epoch=result.best_epoch,
                    metric=result.best_val_loss, extra=extra)
    curves_to_csv(out / "curves.csv", result.curves, mouse_ids)
    print(f"best val loss {result.best_val_loss:.4f} at epoch {result.best_epoch}; "
          f"artifacts in {out}")
    return EXIT_OK


def _pp_from_checkpoint(header) -> PreprocessConfig:
    extra = header.get("extra", {})
    return PreprocessConfig(alpha=float(extra.get("alpha", 1.0)),
                            target_h=int(extra.get("target_h", 36)),
                            target_w=int(extra.get("target_w", 64))).validate()


def _cmd_evaluate(args) -> int:
    model, header = load_checkpoint(args.checkpoint)
    pp = _pp_from_checkpoint(header)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(out, model.cfg, pp)
    _, transformed, _ = _load_standardized(args.data, pp)
    report = evaluate(model, transformed, split=args.split,
                      with_pupil_split=(args.split == "test"))
    report.to_csv(out / "per_neuron_correlation.csv")
    text = report.summary_text()
    if args.pooled:
        pooled = evaluate(model, transformed, split=args.split, pooled=True)
        text += f"\npooled-correlation variant: {pooled.aggregate_correlation:.4f}\n"
    if model.cfg.mode == "v1t":
        acts = collect_bmlp_activations(model, transformed, split=args.split)
        export_bmlp_activations(out / "bmlp_activations.csv", acts)
    (out / "summary.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def _cmd_rollout(args) -> int:
    model, header = load_checkpoint(args.checkpoint)
    if model.cfg.mode == "linear":
        raise ConfigError("rollout needs an attention core, not the linear baseline")
    pp = _pp_from_checkpoint(header)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(out, model.cfg, pp)
    records, transformed, _ = _load_standardized(args.data, pp)

    lines = []
    for raw, rec in zip(records, transformed):
        idx = rec.trial_indices(args.split)
        maps = []
        batch = 64
        for start in range(0, idx.size, batch):
            chunk = idx[start:start + batch]
            trace = AttentionTrace()
            model.forward(rec.mouse_id, rec.images[chunk], rec.behaviors[chunk],
                          rec.pupil_center[chunk], train=False, trace=trace)
            stacked = trace.stacked()
            for j, t in enumerate(chunk):
                maps.append(attention_rollout(stacked[:, j], model.grid,
                                              residual=not args.no_residual, trial_id=int(t)))
        coms = np.array([center_of_mass(m) for m in maps])
        pupil = rec.pupil_center[idx]
        export_com_series(out / f"com_{rec.mouse_id}.csv", [m.trial_id for m in maps],
                          coms, pupil)
        stats = pupil_attention_correlation(maps, pupil)
        lines.append(f"{rec.mouse_id}: corr_x {stats['corr_x']:+.3f} (p {stats['p_x']:.2e})  "
                     f"corr_y {stats['corr_y']:+.3f} (p {stats['p_y']:.2e})  n {stats['n_trials']}")
        for m in maps[:args.heatmaps]:
            emit_heatmap(m, raw.images[m.trial_id, 0].astype(np.float64),
                         out / f"trial_{rec.mouse_id}_{m.trial_id}")
    summary = "\n".join(lines) + "\n"
    (out / "pupil_correlation.txt").write_text(summary, encoding="utf-8")
    print(summary, end="")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    results = gradchecks.run_all(seed=args.seed)
    width = max(len(k) for k in results)
    lines = []
    ok = True
    for name, err in results.items():
        passed = err < args.tolerance
        ok &= passed
        lines.append(f"{name:<{width}}  {err:.3e}  {'PASS' if passed else 'FAIL'}")
    table = "\n".join(lines) + "\n"
    print(table, end="")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "gradcheck.txt").write_text(table, encoding="utf-8")
    if not ok:
        raise NumericalError("gradient check failed")
    return EXIT_OK


def _cmd_export_positions(args) -> int:
    model, header = load_checkpoint(args.checkpoint)
    if model.cfg.mode == "linear":
        raise ConfigError("the linear baseline has no readout positions")
    pp = _pp_from_checkpoint(header)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records, _, _ = _load_standardized(args.data, pp)
    for rec in records:
        info = model.mouse_info[rec.mouse_id]
        mu = compute_mu(Tensor(info["coords_std"]), model.params,
                        f"readout.{rec.mouse_id}", model.cfg.pos_hidden_layers).data
        export_readout_positions(out / f"positions_{rec.mouse_id}.csv",
                                 list(range(rec.n_neurons)), rec.coordinates, mu)
    print(f"wrote readout positions for {len(records)} mice to {out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {
            "synth": _cmd_synth,
            "train": _cmd_train,
            "evaluate": _cmd_evaluate,
            "rollout": _cmd_rollout,
            "gradcheck": _cmd_gradcheck,
            "export-positions": _cmd_export_positions,
        }[args.command]
        return handler(args)
    except _UsageError:
        return EXIT_USAGE
    except ConfigError as err:
        sys.stderr.write(f"v1t: config error: {err}\n")
        return EXIT_USAGE
    except (DataError, DimensionError) as err:
        sys.stderr.write(f"v1t: data error: {err}\n")
        return EXIT_DATA
    except NumericalError as err:
        sys.stderr.write(f"v1t: numerical failure: {err}\n")
        return EXIT_NUMERICAL
    except V1TError as err:
        sys.stderr.write(f"v1t: {err}\n")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
