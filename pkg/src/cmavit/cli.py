"""Command-line entry point: ``cmavit <command> [options]``.

Commands: synth, train, eval, weekly, maskout, predict. Every command
accepts --seed, --config, --dataset, --ckpt and --out. Exit codes are
0 on success, 2 for configuration errors, 3 for data errors and 4 for
numeric failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

from cmavit.dataset import GenConfig, build_dataset, load_dataset, save_dataset
from cmavit.errors import (
    CmavitError,
    ConfigError,
    DataError,
    DimensionError,
    NumericError,
    ParameterError,
    UsageError,
)
from cmavit.evaluation import SPLIT_NAMES, evaluate, predict_export, run_maskout, weekly_csv, weekly_eval
from cmavit.model import Model, ModelConfig
from cmavit.training import TrainConfig, fit_dataset

log = logging.getLogger("cmavit")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CONFIG_SECTIONS = ("gen", "model", "train")


@dataclass(frozen=True)
class RunConfig:
    gen: GenConfig
    model: ModelConfig
    train: TrainConfig


def load_run_config(path: str | None, seed: int) -> RunConfig:
    """Desk presets overridden by the optional JSON file's gen/model/train sections."""
    doc: dict = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict) or set(doc) - set(CONFIG_SECTIONS):
            raise ConfigError(f"config must be an object with sections {CONFIG_SECTIONS}")
    try:
        gen = GenConfig.from_dict(doc.get("gen", {}))
        gen.check()
        model = ModelConfig.from_dict({**ModelConfig.desk().to_dict(), **doc.get("model", {})})
        train = TrainConfig.from_dict({**TrainConfig.desk().to_dict(), **doc.get("train", {}), "seed": seed})
    except (TypeError, ParameterError) as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(gen, model, train)


def _require(value, flag: str, command: str):
    if value is None:
        raise ConfigError(f"{command} needs {flag}")
    return value


def _out_dir(args, fallback: str | None = None) -> Path:
    out = args.out or fallback
    if out is None:
        raise ConfigError(f"{args.command} needs --out")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_data(args):
    return load_dataset(_require(args.dataset, "--dataset", args.command))


def _load_model(args) -> Model:
    return Model.load(_require(args.ckpt, "--ckpt", args.command))


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")
    log.info("wrote %s", path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> None:
    target = _require(args.dataset or args.out, "--dataset", "synth")
    ds = build_dataset(args.seed, cfg.gen)
    save_dataset(target, ds)
    log.info("%d samples, %s", len(ds.samples), {s: len(ds.manifest.blocks(s)) for s in SPLIT_NAMES})


def cmd_train(args, cfg: RunConfig) -> None:
    ds = _load_data(args)
    ckpt = Path(_require(args.ckpt or args.out, "--ckpt or --out", "train"))
    model, history = fit_dataset(
        ds,
        cfg.model,
        cfg.train,
        on_epoch=lambda r: log.info("epoch %d train %.4f val %.4f", r.epoch, r.train_loss, r.val_loss),
    )
    model.save(ckpt)
    _write(_out_dir(args, str(ckpt)) / "history.csv", history.to_csv())


def cmd_eval(args, cfg: RunConfig) -> None:
    ds, model = _load_data(args), _load_model(args)
    out = _out_dir(args)
    for split in args.split or SPLIT_NAMES:
        samples = ds.split(split)
        if not samples:
            log.warning("split %s is empty, skipped", split)
            continue
        report = evaluate(model, samples, split, cfg.train.zones)
        _write(out / f"report_{split}.json", report.to_json())


def cmd_weekly(args, cfg: RunConfig) -> None:
    ds, model = _load_data(args), _load_model(args)
    out = _out_dir(args)
    for split in args.split or ["val"]:
        _write(out / f"weekly_{split}.csv", weekly_csv(weekly_eval(model, ds.split(split))))


def cmd_maskout(args, cfg: RunConfig) -> None:
    ds = _load_data(args)
    out = _out_dir(args)
    report = run_maskout(ds, cfg.model, cfg.train)
    _write(out / "maskout.csv", report.to_csv())


def cmd_predict(args, cfg: RunConfig) -> None:
    ds, model = _load_data(args), _load_model(args)
    out = _out_dir(args)
    for split in args.split or ["test"]:
        samples = ds.split(split)
        if args.limit is not None:
            samples = samples[: args.limit]
        predict_export(model, samples, out / split)


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic dataset directory"),
    "train": (cmd_train, "train a model and write a checkpoint plus history.csv"),
    "eval": (cmd_eval, "score a checkpoint on dataset splits (JSON reports)"),
    "weekly": (cmd_weekly, "per-week metric series as CSV"),
    "maskout": (cmd_maskout, "retrain without each modality and tabulate metrics"),
    "predict": (cmd_predict, "export per-pixel weekly prediction maps"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="data seed for synth, training seed otherwise")
    common.add_argument("--config", help="JSON file with optional gen/model/train sections")
    common.add_argument("--dataset", help="dataset directory")
    common.add_argument("--ckpt", help="checkpoint directory")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="cmavit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name in ("eval", "weekly", "predict"):
            p.add_argument("--split", action="append", choices=SPLIT_NAMES, help="repeatable")
        if name == "predict":
            p.add_argument("--limit", type=int, help="export only the first N samples of each split")
    return parser


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (DataError, DimensionError, OSError)):
        return EXIT_DATA
    if isinstance(exc, (ConfigError, ParameterError, UsageError)):
        return EXIT_CONFIG
    return 1


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = load_run_config(args.config, args.seed)
        COMMANDS[args.command][0](args, cfg)
    except (CmavitError, OSError) as exc:
        print(f"cmavit {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exit_code(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
