"""Command-line interface: ``deepreg {synth,train,evaluate,predict,diagnose}``.

Every command reads an optional ``--config`` file of ``key = value`` lines
(``#`` starts a comment) and accepts ``--key value`` overrides for the same
keys.  Unknown keys are rejected.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import data_io
from .cascade import predict as predict_one
from .errors import DataError, DegenerateGeometry, InvalidArgument, NumericFailure
from .features import HogConfig
from .shapes import LandmarkLayout, ibug68_layout, normalized_errors
from .training import MODES, JOINT, TrainConfig, fit, prepare, stage_bias_variance, stage_shapes

log = logging.getLogger("deepreg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _bool(v: str) -> bool:
    v = v.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v: str) -> tuple[int, ...]:
    return tuple(int(x) for x in v.replace(" ", "").split(",") if x)


def _optional_ints(v: str):
    return None if v.strip().lower() in ("", "none", "default") else _ints(v)


LAYOUT_KEYS = {
    "layout": str,            # synthetic | ibug68 | custom
    "P": int,
    "flip_permutation": _ints,
    "left_eye": _ints,
    "right_eye": _ints,
}
DATA_KEYS = {"data_dir": str, "image_dir": str, "annotation_dir": str}

SYNTH_KEYS = {
    "out_dir": str, "count": int,
    **{f.name: type(f.default) for f in fields(data_io.SyntheticConfig)
       if f.name not in ("sample_count",)},
}
TRAIN_KEYS = {
    **DATA_KEYS, **LAYOUT_KEYS,
    "model_out": str, "log_out": str, "mode": str, "init_model": str,
    "T": int, "learning_rate": float, "momentum": float, "batch_size": int,
    "dropout_rate": float, "epsilon": float, "patch_sizes": _optional_ints,
    "patience_epochs": int, "lr_decay_factor": float, "min_lr": float,
    "pretrain_max_epochs": int, "max_epochs": int, "validation_count": int,
    "flip": _bool, "seed": int,
    "hog_resize_to": int, "hog_block_size": int, "hog_block_stride": int,
    "hog_cell_size": int, "hog_num_bins": int,
}
EVAL_KEYS = {**DATA_KEYS, "model": str, "out": str}
PREDICT_KEYS = {"model": str, "image_dir": str, "out_dir": str}
DIAGNOSE_KEYS = {**DATA_KEYS, "model": str, "out": str}

COMMANDS = {
    "synth": SYNTH_KEYS,
    "train": TRAIN_KEYS,
    "evaluate": EVAL_KEYS,
    "predict": PREDICT_KEYS,
    "diagnose": DIAGNOSE_KEYS,
}


def read_config_file(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        out[key.strip()] = value.strip()
    return out


def parse_overrides(tokens: list[str]) -> dict[str, str]:
    out = {}
    it = iter(tokens)
    for tok in it:
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            try:
                value = next(it)
            except StopIteration:
                raise UsageError(f"missing value for --{key}") from None
        out[key.replace("-", "_")] = value
    return out


def resolve(command: str, config_path: str | None, overrides: dict[str, str]) -> dict:
    schema = COMMANDS[command]
    raw = read_config_file(config_path) if config_path else {}
    raw.update(overrides)
    values = {}
    for key, text in raw.items():
        if key not in schema:
            raise UsageError(f"unknown key {key!r} for command {command}")
        try:
            values[key] = schema[key](text)
        except ValueError as e:
            raise UsageError(f"bad value for {key}: {e}") from None
    return values


def _require(cfg: dict, key: str):
    if key not in cfg:
        raise UsageError(f"missing required key {key!r}")
    return cfg[key]


def _layout(cfg: dict) -> LandmarkLayout:
    kind = cfg.get("layout", "synthetic")
    if kind == "synthetic":
        return data_io.synthetic_layout(cfg.get("P", 5))
    if kind == "ibug68":
        return ibug68_layout()
    if kind == "custom":
        perm = _require(cfg, "flip_permutation")
        return LandmarkLayout(len(perm), perm, _require(cfg, "left_eye"), _require(cfg, "right_eye"))
    raise UsageError(f"unknown layout {kind!r} (synthetic, ibug68, custom)")


def _dirs(cfg: dict) -> tuple[Path, Path]:
    base = cfg.get("data_dir")
    image_dir = cfg.get("image_dir") or (base and str(Path(base) / "images"))
    ann_dir = cfg.get("annotation_dir") or (base and str(Path(base) / "annotations"))
    if not image_dir or not ann_dir:
        raise UsageError("give data_dir or both image_dir and annotation_dir")
    return Path(image_dir), Path(ann_dir)


def _load(cfg: dict, layout: LandmarkLayout, check_p: bool = False):
    image_dir, ann_dir = _dirs(cfg)
    if check_p and ann_dir.is_dir():
        first = next(iter(sorted(ann_dir.glob("*.pts"))), None)
        if first is not None:
            n = len(data_io.read_pts(first)) // 2
            if n != layout.P:
                raise DataError(f"model has P={layout.P} landmarks but dataset has P={n} ({first.name})")
    samples, report = data_io.load_dataset(image_dir, ann_dir, layout)
    for source, reason in report:
        log.warning("rejected %s: %s", source, reason)
    if not samples:
        raise DataError(f"no samples found in {image_dir}")
    return samples


def _fmt(x) -> str:
    return repr(float(x))


def _writable_csv(path):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        return path.open("w", newline="")
    except OSError as e:
        raise DataError(f"cannot write {path}: {e}") from None


# ---------------------------------------------------------------------------


def cmd_synth(cfg: dict) -> int:
    out = Path(_require(cfg, "out_dir"))
    kwargs = {k: v for k, v in cfg.items() if k not in ("out_dir", "count")}
    syn = data_io.SyntheticConfig(sample_count=cfg.get("count", 100), **kwargs)
    try:
        out.mkdir(parents=True, exist_ok=True)
        data_io.save_dataset(data_io.generate_synthetic(syn), out)
    except OSError as e:
        raise DataError(f"cannot write dataset to {out}: {e}") from None
    log.info("wrote %d samples to %s", syn.sample_count, out)
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    model_out = Path(_require(cfg, "model_out"))
    log_out = Path(cfg.get("log_out", str(model_out.with_suffix(".csv"))))
    mode = cfg.get("mode", JOINT)
    if mode not in MODES:
        raise UsageError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    tc = TrainConfig(**{f.name: cfg[f.name] for f in fields(TrainConfig) if f.name in cfg})
    hog = HogConfig(**{k[4:]: v for k, v in cfg.items() if k.startswith("hog_")})
    init = data_io.load_model(cfg["init_model"]) if "init_model" in cfg else None
    layout = init.layout if init is not None else _layout(cfg)
    samples = _load(cfg, layout, check_p=init is not None)

    with _writable_csv(log_out) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "phase", "lr", "train_error", "validation_error"])

        def record(rec):
            writer.writerow([rec.epoch, rec.phase, _fmt(rec.lr), _fmt(rec.train_error),
                             _fmt(rec.validation_error)])

        result = fit(samples, tc, layout, hog, mode=mode, init_model=init, logger=record)
    try:
        model_out.parent.mkdir(parents=True, exist_ok=True)
        data_io.save_model(result.model, model_out)
    except OSError as e:
        raise DataError(f"cannot write {model_out}: {e}") from None
    final = result.records[-1]
    log.info("final train error %.6f, validation error %.6f", final.train_error, final.validation_error)
    return EXIT_OK


def _prepared(cfg: dict):
    model = data_io.load_model(_require(cfg, "model"))
    samples = _load(cfg, model.layout, check_p=True)
    data = prepare(samples, model.hog_cfg, model.local_cfgs, model.has_global)
    return model, data


def cmd_evaluate(cfg: dict) -> int:
    out = _require(cfg, "out")
    model, data = _prepared(cfg)
    errs = normalized_errors(stage_shapes(model, data)[-1], data.truths, data.d_pupils)
    with _writable_csv(out) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["source_id", "normalized_error"])
        writer.writerow(["ALL", _fmt(errs.mean())])
        for sid, e in zip(data.source_ids, errs):
            writer.writerow([sid, _fmt(e)])
    print(f"mean normalized error {errs.mean():.6f} over {len(errs)} samples")
    return EXIT_OK


def cmd_predict(cfg: dict) -> int:
    model = data_io.load_model(_require(cfg, "model"))
    image_dir = Path(_require(cfg, "image_dir"))
    out_dir = Path(_require(cfg, "out_dir"))
    if not image_dir.is_dir():
        raise DataError(f"not a directory: {image_dir}")
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create {out_dir}: {e}") from None
    files = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in data_io.IMAGE_SUFFIXES)
    for path in files:
        s = predict_one(model, data_io.read_gray(path))
        if not np.all(np.isfinite(s)):
            raise NumericFailure(f"non-finite prediction for {path.name}")
        data_io.write_pts(out_dir / f"{path.stem}.pts", s)
    log.info("wrote %d predictions to %s", len(files), out_dir)
    return EXIT_OK


def cmd_diagnose(cfg: dict) -> int:
    out = _require(cfg, "out")
    model, data = _prepared(cfg)
    bv = stage_bias_variance(model, data)
    with _writable_csv(out) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["stage", "mean_error", "std_error"])
        for t, (m, sd) in enumerate(bv):
            writer.writerow([t, _fmt(m), _fmt(sd)])
    return EXIT_OK


HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "diagnose": cmd_diagnose,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="deepreg", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")
    for name in COMMANDS:
        p = sub.add_parser(name, help=HANDLERS[name].__name__.replace("cmd_", ""))
        p.add_argument("--config", help="key = value configuration file")
    try:
        args, rest = parser.parse_known_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve(args.command, args.config, parse_overrides(rest))
        return HANDLERS[args.command](cfg)
    except (UsageError, InvalidArgument, TypeError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DegenerateGeometry, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericFailure as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
