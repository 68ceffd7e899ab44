"""Command-line entry point: ``freeflow <subcommand> --config run.toml [--key value ...]``.

Every subcommand reads one flat TOML document; any key can be overridden by
the matching ``--key`` flag. Each run writes ``resolved_config.toml`` next to
its outputs so the run can be repeated from that file alone.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import tomli

from . import __version__
from .core import (DomainError, apply_split, county_split, read_manifest, segments_in,
                   write_manifest)
from .evaluate import (HISTOGRAM_FIELDS, compare_variants, discrepancy_report,
                       label_histogram, predict_segments, read_predictions_csv,
                       write_comparison_csv, write_discrepancy_geojson, write_histograms_csv,
                       write_predictions_csv)
from .model import VARIANTS, ModelConfig
from .synthgen import SynthConfig, generate_dataset
from .train import Checkpoint, TrainConfig, train

log = logging.getLogger("freeflow")

SUBCOMMANDS = ("synth", "split", "train", "eval", "predict", "report", "stats")


@dataclass(frozen=True)
class Key:
    type: type
    default: object
    help: str


# key -> (type, default, help); None defaults mean "must be supplied when used"
SCHEMA: dict[str, Key] = {
    "seed": Key(int, None, "master seed for every random choice in the run"),
    "out_dir": Key(str, None, "directory receiving this run's outputs"),
    # synthetic data
    "n_segments": Key(int, 6500, "number of synthetic segments"),
    "county_grid": Key(int, 10, "counties per side of the synthetic plane"),
    "noise_mph_sd": Key(float, 0.0, "label noise standard deviation (mph)"),
    "chip_px": Key(int, 224, "rendered chip size in pixels"),
    # splitting
    "manifest": Key(str, None, "input manifest (JSONL)"),
    "test_fraction": Key(float, 0.07, "target share of segments in test counties"),
    "val_fraction": Key(float, 0.01, "validation share of the training pool"),
    # model
    "variant": Key(str, "combined", "combined | imagery_only | features_only"),
    "backbone": Key(str, "desk", "desk | external"),
    "backbone_dim": Key(int, 64, "image feature length"),
    "hidden_dim": Key(int, 512, "image dense layer width"),
    "features_hidden_dim": Key(int, 512, "metadata dense layer width (features_only)"),
    "input_px": Key(int, 224, "model input size in pixels"),
    "metadata_scaling": Key(str, "minmax", "minmax | raw"),
    # training
    "batch_size": Key(int, 16, "minibatch size"),
    "epochs": Key(int, 15, "training epochs"),
    "lr0": Key(float, 0.001, "initial learning rate"),
    "decay_factor": Key(float, 10.0, "learning-rate decay factor"),
    "decay_epochs": Key(float, 5.0, "epochs per decay period"),
    "decay_staircase": Key(bool, False, "decay in whole periods instead of continuously"),
    "l2_scale": Key(float, 0.00005, "L2 scale on dense weight matrices"),
    "adam_beta1": Key(float, 0.9, "Adam first-moment decay"),
    "adam_beta2": Key(float, 0.999, "Adam second-moment decay"),
    "adam_eps": Key(float, 1e-7, "Adam epsilon"),
    "freeze_backbone": Key(bool, False, "keep backbone tensors fixed"),
    # evaluation
    "checkpoint": Key(str, None, "checkpoint for predict/report"),
    "checkpoint_combined": Key(str, None, "combined checkpoint for eval"),
    "checkpoint_imagery_only": Key(str, None, "imagery-only checkpoint for eval"),
    "checkpoint_features_only": Key(str, None, "features-only checkpoint for eval"),
    "predictions": Key(str, None, "predictions CSV for report (optional)"),
    "eval_split": Key(str, "test", "split scored by eval/predict/report"),
    "decoder": Key(str, "argmax", "argmax | expected"),
    "within_k": Key(int, 5, "tolerance for within-k accuracy (mph)"),
    "discrepancy_threshold": Key(int, 10, "flag |predicted - limit| above this (mph)"),
}

PATH_KEYS = ("out_dir", "manifest", "checkpoint", "checkpoint_combined",
             "checkpoint_imagery_only", "checkpoint_features_only", "predictions")


class UsageError(Exception):
    pass


def _coerce(key: str, value):
    spec = SCHEMA[key]
    if spec.type is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "1", "yes"):
            return True
        if isinstance(value, str) and value.lower() in ("false", "0", "no"):
            return False
        raise DomainError(f"config key {key!r} must be a boolean, got {value!r}")
    if spec.type is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if spec.type in (int, float) and isinstance(value, str):
        try:
            return spec.type(value)
        except ValueError:
            raise DomainError(f"config key {key!r} must be {spec.type.__name__}, got {value!r}") from None
    if not isinstance(value, spec.type) or isinstance(value, bool) and spec.type is not bool:
        raise DomainError(f"config key {key!r} must be {spec.type.__name__}, got {value!r}")
    return value


def load_config(path: str | Path | None, overrides: dict) -> dict:
    """Merge a TOML file, command-line overrides and defaults into one flat dict.

    Relative paths in the file resolve against the file's directory.
    """
    raw = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
        base = path.resolve().parent
        unknown = sorted(set(raw) - set(SCHEMA))
        if unknown:
            raise DomainError(f"unknown config keys: {', '.join(unknown)}")
        for key in PATH_KEYS:
            if isinstance(raw.get(key), str) and not Path(raw[key]).is_absolute():
                raw[key] = str((base / raw[key]).resolve())
    cfg = {k: s.default for k, s in SCHEMA.items()}
    for k, v in raw.items():
        cfg[k] = _coerce(k, v)
    for k, v in overrides.items():
        if v is not None:
            cfg[k] = _coerce(k, v)
            if k in PATH_KEYS:
                cfg[k] = str(Path(cfg[k]).resolve())
    if cfg["seed"] is None:
        raise DomainError("config must set 'seed'")
    return cfg


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    return '"' + str(v).replace("\\", "\\\\").replace('"', '\\"') + '"'


def write_resolved_config(cfg: dict, out_dir: Path, command: str) -> Path:
    lines = [f"# freeflow {__version__} resolved configuration for '{command}'"]
    lines += [f"{k} = {_toml_value(v)}" for k, v in cfg.items() if v is not None]
    path = out_dir / "resolved_config.toml"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise DomainError(f"missing config keys: {', '.join(missing)}")


def _require_file(cfg: dict, key: str) -> Path:
    _require(cfg, key)
    path = Path(cfg[key])
    if not path.is_file():
        raise DomainError(f"{key}: no such file {path}")
    return path


def _out_dir(cfg: dict) -> Path:
    _require(cfg, "out_dir")
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def model_config_from(cfg: dict, K: int) -> ModelConfig:
    return ModelConfig(variant=cfg["variant"], backbone_dim=cfg["backbone_dim"],
                       hidden_dim=cfg["hidden_dim"], K=K, input_px=cfg["input_px"],
                       freeze_backbone=cfg["freeze_backbone"],
                       metadata_scaling=cfg["metadata_scaling"],
                       features_hidden_dim=cfg["features_hidden_dim"], backbone=cfg["backbone"])


def train_config_from(cfg: dict) -> TrainConfig:
    return TrainConfig(batch_size=cfg["batch_size"], epochs=cfg["epochs"], lr0=cfg["lr0"],
                       decay_factor=cfg["decay_factor"], decay_epochs=cfg["decay_epochs"],
                       decay_staircase=cfg["decay_staircase"], l2_scale=cfg["l2_scale"],
                       adam_beta1=cfg["adam_beta1"], adam_beta2=cfg["adam_beta2"],
                       adam_eps=cfg["adam_eps"], seed=cfg["seed"],
                       freeze_backbone=cfg["freeze_backbone"])


# ---------------------------------------------------------------- subcommands

def cmd_synth(cfg: dict) -> None:
    out = _out_dir(cfg)
    config = SynthConfig(n_segments=cfg["n_segments"], county_grid=cfg["county_grid"],
                         noise_mph_sd=cfg["noise_mph_sd"], master_seed=cfg["seed"],
                         chip_px=cfg["chip_px"])
    step = max(config.n_segments // 10, 1)

    def progress(i, n):
        if i % step == 0 or i == n:
            log.info("rendered %d/%d chips", i, n)

    generate_dataset(config, out, progress=progress)
    log.info("wrote %s", out / "manifest.jsonl")


def cmd_split(cfg: dict) -> None:
    manifest = _require_file(cfg, "manifest")
    out = _out_dir(cfg)
    segments = read_manifest(manifest)
    split = county_split(segments, cfg["test_fraction"], cfg["val_fraction"], cfg["seed"])
    # chip paths are rewritten relative to the new manifest's directory
    rebased = []
    for seg in apply_split(segments, split):
        if seg.chip_path is not None:
            chip = (manifest.parent / seg.chip_path).resolve()
            seg.chip_path = Path(os.path.relpath(chip, out.resolve())).as_posix()
        rebased.append(seg)
    write_manifest(out / "manifest.jsonl", rebased)
    log.info("split: train %d, val %d, test %d (%d test counties)", len(split.train),
             len(split.val), len(split.test), len(split.test_counties))


def cmd_train(cfg: dict) -> None:
    manifest = _require_file(cfg, "manifest")
    segments = read_manifest(manifest)
    for name in ("train", "val"):
        if not segments_in(segments, name):
            raise DomainError(f"manifest {manifest} has no '{name}' split")
    if cfg["variant"] not in VARIANTS:
        raise DomainError(f"unknown variant {cfg['variant']!r}")
    K = len({s.freeflow_mph for s in segments_in(segments, "train")})
    model_cfg = model_config_from(cfg, K)
    out = _out_dir(cfg)
    ckpt = train(segments, model_cfg, train_config_from(cfg), manifest.parent,
                 log_path=out / "train_log.csv")
    ckpt.save(out / "checkpoint.bin")
    log.info("best epoch %d, val within-5 %.4f -> %s", ckpt.epoch,
             ckpt.extra["val_within5"], out / "checkpoint.bin")


def cmd_eval(cfg: dict) -> None:
    manifest = _require_file(cfg, "manifest")
    pairs = []
    for variant in VARIANTS:
        key = f"checkpoint_{variant}"
        if cfg.get(key) is not None:
            pairs.append((variant, Checkpoint.load(_require_file(cfg, key))))
    if not pairs:
        raise DomainError("eval needs at least one checkpoint_<variant> key")
    out = _out_dir(cfg)
    rows = compare_variants(read_manifest(manifest), pairs, manifest.parent,
                            split=cfg["eval_split"], k=cfg["within_k"], decoder=cfg["decoder"])
    write_comparison_csv(out / "comparison.csv", rows, k=cfg["within_k"])
    for row in rows:
        log.info("%s: within-%d %.4f (n=%d)", row["variant"], cfg["within_k"],
                 row[f"within{cfg['within_k']}"], row["n"])


def _predictions(cfg: dict, manifest: Path):
    segments = read_manifest(manifest)
    subset = segments_in(segments, cfg["eval_split"])
    if not subset:
        raise DomainError(f"manifest has no {cfg['eval_split']!r} split")
    ckpt = Checkpoint.load(_require_file(cfg, "checkpoint"))
    records, errors = predict_segments(ckpt, subset, manifest.parent, cfg["decoder"])
    return segments, records, errors


def cmd_predict(cfg: dict) -> None:
    manifest = _require_file(cfg, "manifest")
    out = _out_dir(cfg)
    _, records, errors = _predictions(cfg, manifest)
    write_predictions_csv(out / "predictions.csv", records)
    log.info("predicted %d segments (%d skipped)", len(records), len(errors))


def cmd_report(cfg: dict) -> None:
    manifest = _require_file(cfg, "manifest")
    out = _out_dir(cfg)
    if cfg.get("predictions") is not None:
        segments = read_manifest(manifest)
        records = read_predictions_csv(_require_file(cfg, "predictions"))
    else:
        segments, records, _ = _predictions(cfg, manifest)
    flagged = discrepancy_report(records, cfg["discrepancy_threshold"])
    write_discrepancy_geojson(out / "discrepancies.geojson", flagged,
                              {s.id: s for s in segments})
    log.info("%d of %d segments differ from the posted limit by more than %d mph",
             len(flagged), len(records), cfg["discrepancy_threshold"])


def cmd_stats(cfg: dict) -> None:
    manifest = _require_file(cfg, "manifest")
    out = _out_dir(cfg)
    segments = read_manifest(manifest)
    hists = {f: label_histogram(segments, f) for f in HISTOGRAM_FIELDS}
    write_histograms_csv(out / "histograms.csv", hists)


COMMANDS = {"synth": cmd_synth, "split": cmd_split, "train": cmd_train, "eval": cmd_eval,
            "predict": cmd_predict, "report": cmd_report, "stats": cmd_stats}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="freeflow", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat TOML run configuration")
        p.add_argument("-v", "--verbose", action="store_true")
        for key, spec in SCHEMA.items():
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None,
                           metavar=spec.type.__name__.upper(), help=spec.help)
    return parser


def run(argv=None) -> int:
    """Run one subcommand; returns 0 on success, 1 on domain errors, 2 on usage errors."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"freeflow: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s",
                        stream=sys.stderr, force=True)
    overrides = {k: getattr(args, k) for k in SCHEMA}
    try:
        cfg = load_config(args.config, overrides)
        out = _out_dir(cfg)
        write_resolved_config(cfg, out, args.command)
        COMMANDS[args.command](cfg)
    except (DomainError, FloatingPointError, OSError, ValueError, tomli.TOMLDecodeError) as exc:
        print(f"freeflow {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
