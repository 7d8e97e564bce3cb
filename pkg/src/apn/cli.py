"""Command-line entry point: ``apn generate | train | eval | ablate | gradcheck``.

Configuration comes from a flat ``key = value`` file (``#`` comments, dotted
keys such as ``train.lr`` or ``synth.n_records``) merged with command-line
flags; flags win.  Every artifact written embeds the resolved configuration.

Exit codes: 0 success, 1 usage/config, 2 data/format, 3 numeric failure,
4 gradient-check failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import diff_engine as de
from .errors import APNError, ConfigError, DataError, NumericError
from .imts_core import SynthConfig, generate_synthetic, load_dataset, normalize, save_dataset, split_dataset
from .train_harness import (
    DEFAULT_SEEDS,
    GRADCHECK_CONFIG,
    VARIANTS,
    TrainConfig,
    evaluate,
    grad_check_model,
    init_params,
    run_ablation,
    train,
)

log = logging.getLogger("apn")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3, 4

TOP_LEVEL = {
    "seed": 2024,
    "data": "",
    "out": "",
    "checkpoint": "",
    "split.seed": 2024,
    "split.ratios": (0.8, 0.1, 0.1),
    "gradcheck.tolerance": 1e-4,
    "gradcheck.h": 1e-5,
    "ablate.seeds": DEFAULT_SEEDS,
    "ablate.variants": VARIANTS,
}

FLAG_KEYS = {
    "seed": "seed",
    "data": "data",
    "out": "out",
    "checkpoint": "checkpoint",
    "variant": "train.variant",
    "patches": "train.n_patches",
    "hidden_dim": "train.hidden_dim",
    "te_dim": "train.te_dim",
    "epochs": "train.max_epochs",
    "lr": "train.lr",
    "tolerance": "gradcheck.tolerance",
}


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines into a dict of raw strings."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def _coerce(raw, default, key: str):
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            proto = default[0] if default else ""
            return tuple(_coerce(s, proto, key) for s in items)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def _known_keys() -> dict:
    known = dict(TOP_LEVEL)
    for f in dataclasses.fields(TrainConfig):
        known["train." + f.name] = f.default
    for f in dataclasses.fields(SynthConfig):
        known["synth." + f.name] = f.default
    return known


def resolve_config(config_path: str | None, overrides: dict[str, str]) -> dict:
    """Merge defaults, the config file and overrides into typed values."""
    raw: dict = {}
    if config_path:
        try:
            raw.update(parse_config_text(Path(config_path).read_text(encoding="utf-8")))
        except OSError as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from None
    raw.update(overrides)
    known = _known_keys()
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    resolved = {k: _coerce(raw[k], v, k) if k in raw else v for k, v in known.items()}
    if "train.seed" not in raw:
        resolved["train.seed"] = resolved["seed"]
    return resolved


def _section(resolved: dict, prefix: str) -> dict:
    return {k[len(prefix) + 1 :]: v for k, v in resolved.items() if k.startswith(prefix + ".")}


def make_train_config(resolved: dict) -> TrainConfig:
    return TrainConfig(**_section(resolved, "train"))


def make_synth_config(resolved: dict) -> SynthConfig:
    return SynthConfig(**_section(resolved, "synth"))


def jsonable(resolved: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(resolved.items())}


def _require(resolved: dict, key: str) -> str:
    if not resolved[key]:
        raise ConfigError(f"missing required setting '{key}' (use --{key} or the config file)")
    return resolved[key]


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _prepare_splits(resolved: dict):
    path = _require(resolved, "data")
    try:
        dataset = load_dataset(path)
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from None
    if len(dataset) == 0:
        raise DataError(f"{resolved['data']}: dataset is empty")
    # dims the data dictates unless set explicitly
    resolved.setdefault("_explicit", set())
    if "train.n_channels" not in resolved["_explicit"]:
        resolved["train.n_channels"] = dataset.n_channels
    if "train.t_obs" not in resolved["_explicit"]:
        resolved["train.t_obs"] = dataset.records[0].t_obs
    parts = split_dataset(dataset, tuple(resolved["split.ratios"]), resolved["split.seed"])
    return tuple(normalize(p) for p in parts)


# --- commands ----------------------------------------------------------------------


def cmd_generate(resolved: dict) -> int:
    out = Path(_require(resolved, "out"))
    cfg = make_synth_config(resolved)
    dataset = generate_synthetic(cfg, resolved["seed"])
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        save_dataset(dataset, out)
    except OSError as exc:
        raise ConfigError(f"cannot write {out}: {exc}") from None
    n_obs = sum(len(ch) for r in dataset.records for ch in r.channels)
    print(f"wrote {len(dataset)} records, {n_obs} observations to {out}")
    return EXIT_OK


def cmd_train(resolved: dict) -> int:
    out = Path(_require(resolved, "out"))
    train_data, val_data, test_data = _prepare_splits(resolved)
    cfg = make_train_config(resolved)
    params, train_report = train(train_data, val_data, cfg)
    test = evaluate(params, test_data, cfg)
    report = dataclasses.replace(
        train_report,
        mse=test.mse,
        mae=test.mae,
        split="test",
        n_points=test.n_points,
        config=jsonable(_public(resolved)),
    )
    out.mkdir(parents=True, exist_ok=True)
    de.save_checkpoint(params, out / "checkpoint.json", extra={"config": jsonable(_public(resolved))})
    _write_json(out / "metrics.json", report.to_dict())
    print(f"test MSE={report.mse:.6g} MAE={report.mae:.6g} epochs={report.epochs_run}")
    return EXIT_OK


def _check_dims(loaded: de.ParamStore, expected: de.ParamStore) -> None:
    if set(loaded) != set(expected):
        raise ConfigError(
            f"checkpoint parameters {sorted(set(loaded) ^ set(expected))} do not match the configured model"
        )
    for name in expected:
        if loaded[name].shape != expected[name].shape:
            raise ConfigError(
                f"{name}: checkpoint shape {loaded[name].shape} vs configured shape {expected[name].shape}"
            )


def cmd_eval(resolved: dict) -> int:
    ckpt_path = _require(resolved, "checkpoint")
    _, _, test_data = _prepare_splits(resolved)
    cfg = make_train_config(resolved)
    params = de.load_checkpoint(ckpt_path)
    _check_dims(params, init_params(cfg))
    report = evaluate(params, test_data, cfg)
    report.config = jsonable(_public(resolved))
    if resolved["out"]:
        _write_json(Path(resolved["out"]) / "eval_metrics.json", report.to_dict())
    print(f"test MSE={report.mse:.6g} MAE={report.mae:.6g}")
    return EXIT_OK


def cmd_ablate(resolved: dict) -> int:
    out = Path(_require(resolved, "out"))
    train_data, val_data, test_data = _prepare_splits(resolved)
    cfg = make_train_config(resolved)
    for v in resolved["ablate.variants"]:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r} in ablate.variants")
    table = run_ablation(
        train_data,
        val_data,
        test_data,
        cfg,
        seeds=tuple(resolved["ablate.seeds"]),
        variants=tuple(resolved["ablate.variants"]),
    )
    payload = table.to_dict()
    payload["config"] = jsonable(_public(resolved))
    _write_json(out / "ablation.json", payload)
    (out / "ablation.txt").write_text(table.to_text(), encoding="utf-8")
    print(table.to_text(), end="")
    return EXIT_OK


def cmd_gradcheck(resolved: dict) -> int:
    explicit = resolved.get("_explicit", set())
    overrides = {k[len("train.") :]: resolved[k] for k in explicit if k.startswith("train.")}
    cfg = GRADCHECK_CONFIG.replace(**overrides)
    report = grad_check_model(cfg, tolerance=resolved["gradcheck.tolerance"], h=resolved["gradcheck.h"])
    for name, err in report.max_rel_error.items():
        flag = "ok" if err < report.tolerance else "FAIL"
        print(f"{flag:<4} {name:<24} max rel err {err:.3e}")
    print(
        f"worst: {report.worst_param}{report.worst_index} rel err {report.worst_error:.3e} "
        f"(tolerance {report.tolerance:g}) -> {'PASS' if report.passed else 'FAIL'}"
    )
    if resolved["out"]:
        payload = report.to_dict()
        payload["config"] = jsonable(_public(resolved))
        _write_json(Path(resolved["out"]) / "gradcheck.json", payload)
    return EXIT_OK if report.passed else EXIT_CHECK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def _public(resolved: dict) -> dict:
    return {k: v for k, v in resolved.items() if not k.startswith("_")}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="apn", description="Adaptive patching forecaster for irregular time series")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--data")
        p.add_argument("--out")
        p.add_argument("--checkpoint")
        p.add_argument("--variant", choices=VARIANTS)
        p.add_argument("--patches", type=int)
        p.add_argument("--hidden-dim", type=int)
        p.add_argument("--te-dim", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--tolerance", type=float)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        overrides: dict = {}
        for item in args.set:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            overrides[key.strip()] = value.strip()
        for attr, key in FLAG_KEYS.items():
            value = getattr(args, attr)
            if value is not None:
                overrides[key] = value
        file_keys = set(parse_config_text(Path(args.config).read_text(encoding="utf-8"))) if args.config else set()
        resolved = resolve_config(args.config, overrides)
        resolved["_explicit"] = set(overrides) | file_keys
        return COMMANDS[args.command](resolved)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except APNError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
