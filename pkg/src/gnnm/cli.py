"""Command-line entry point: ``gnnm {gen,train,train2,eval,gradcheck,params}``.

Settings come from an optional INI-style config file (``key = value``
under ``[data]``, ``[model]``, ``[train]`` and ``[fine_tune]``), then from
flags; ``--set section.key=value`` overrides anything.  Exit codes: 0
success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .complexity import audit_network, count_gnnm_params, temporal_formula
from .errors import ConfigError, GnnmError, UsageError
from .gradcheck import check_gnnm
from .hierarchy import HierarchyConfig, build_network
from .module import PARAM_NAMES, GnnmConfig
from .synth import SynthSpec, generate, read_dataset, read_header, write_dataset
from .training import (
    TrainConfig,
    build_model,
    evaluate,
    load_training_checkpoint,
    run_two_stage,
    train,
)

log = logging.getLogger("gnnm")

OUTPUT_ENV = "GNNM_OUTPUT_ROOT"


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text: str):
    return None if str(text).strip().lower() in ("", "none") else int(text)


def _opt_float(text: str):
    return None if str(text).strip().lower() in ("", "none") else float(text)


def _multipliers(text: str) -> dict[str, float]:
    out = {}
    for item in filter(None, (s.strip() for s in str(text).split(","))):
        key, _, value = item.partition(":")
        out[key.strip()] = float(value)
    return out


# section -> key -> (parser, default, help)
KEYS: dict[str, dict[str, tuple]] = {
    "data": {
        "task": (str, "open_ended", "open_ended | count | multi_choice"),
        "d": (int, 32, "feature dimension"),
        "num_clips": (int, 2, "clips per video"),
        "frames_per_clip": (int, 4, "frames per clip"),
        "num_event_types": (_opt_int, None, "distinct events (none: 4, or num_candidates + 1 for multi_choice)"),
        "answer_vocab_size": (_opt_int, None, "open-ended answer vocabulary size (none: num_event_types)"),
        "num_candidates": (int, 5, "candidates per multiple-choice question"),
        "noise_std": (float, 0.05, "frame noise relative to signature norm"),
        "samples": (int, 300, "number of samples to generate"),
        "seed": (int, 0, "generator seed"),
    },
    "model": {
        "attention_variant": (str, "component", "component | temporal"),
        "sharing": (str, "per_module", "per_module | per_level"),
        "activation": (str, "elu", "elu | relu"),
        "precision": (str, "single", "single | double"),
        "seed": (int, 0, "initialisation seed"),
    },
    "train": {
        "learning_rate": (float, 1e-4, "base learning rate"),
        "epochs": (int, 25, "training epochs"),
        "batch_size": (int, 128, "batch size"),
        "lr_decay": (str, "halve_every_5", "halve_every_5 | halve_every_3 | none"),
        "optimizer": (str, "adam", "adam | sgd"),
        "grad_clip": (_opt_float, 5.0, "global gradient-norm clip (none to disable)"),
        "max_steps": (_opt_int, None, "stop after this many optimizer steps"),
        "seed": (int, 0, "shuffling seed"),
        "val_fraction": (float, 1 / 3, "fraction of the dataset held out for validation"),
        "multipliers": (_multipliers, {}, "per-slot lr multipliers, e.g. clip.motion:0.5"),
    },
    "fine_tune": {
        "learning_rate": (_opt_float, None, "fine-tune base lr (default: train.learning_rate)"),
        "epochs": (_opt_int, None, "fine-tune epochs (default: train.epochs)"),
        "lr_decay": (str, "halve_every_3", "fine-tune schedule"),
        "multipliers": (_multipliers, {"clip.motion": 0.05, "video.motion": 0.05},
                        "per-slot multipliers in the fine-tune stage"),
        "max_steps": (_opt_int, None, "fine-tune step cap"),
    },
}

FLAG_KEYS = {
    "task": "data.task", "d": "data.d", "samples": "data.samples", "seed": "data.seed",
    "num_clips": "data.num_clips", "frames_per_clip": "data.frames_per_clip",
    "noise_std": "data.noise_std", "num_event_types": "data.num_event_types",
    "answer_vocab_size": "data.answer_vocab_size", "num_candidates": "data.num_candidates",
    "sharing": "model.sharing", "variant": "model.attention_variant",
    "epochs": "train.epochs", "batch_size": "train.batch_size", "lr": "train.learning_rate",
    "max_steps": "train.max_steps",
}


def _format_value(value) -> str:
    if isinstance(value, dict):
        return ",".join(f"{k}:{v!r}" for k, v in value.items())
    return str(value)


class Settings:
    """Resolved configuration: defaults < config file < flags."""

    def __init__(self):
        self.values = {sec: {k: spec[1] for k, spec in keys.items()} for sec, keys in KEYS.items()}

    def set(self, dotted: str, raw) -> None:
        section, _, key = dotted.partition(".")
        if section not in KEYS or key not in KEYS[section]:
            raise UsageError(f"unknown config key {dotted!r}")
        parser = KEYS[section][key][0]
        try:
            self.values[section][key] = parser(raw) if isinstance(raw, str) else raw
        except ValueError as exc:
            raise UsageError(f"bad value for {dotted}: {exc}") from None

    def load_file(self, path: str) -> None:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        if not cp.read(path):
            raise UsageError(f"cannot read config file {path}")
        for section in cp.sections():
            for key, raw in cp.items(section):
                self.set(f"{section}.{key}", raw)

    def __getitem__(self, dotted: str):
        section, _, key = dotted.partition(".")
        return self.values[section][key]

    def render(self) -> str:
        lines = []
        for section, keys in self.values.items():
            lines.append(f"[{section}]")
            lines += [f"{k} = {_format_value(v)}" for k, v in keys.items()]
            lines.append("")
        return "\n".join(lines)


def _keys_epilog() -> str:
    lines = ["configuration keys (file sections / --set section.key=value):"]
    for section, keys in KEYS.items():
        for key, (_, default, help_) in keys.items():
            lines.append(f"  {section}.{key:<20} {help_} [default: {_format_value(default)}]")
    return "\n".join(lines)


def _output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs")).resolve()


def _resolve(args) -> Settings:
    settings = Settings()
    if getattr(args, "config", None):
        settings.load_file(args.config)
    for flag, dotted in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            settings.set(dotted, value)
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        settings.set(key.strip(), value.strip())
    return settings


def _synth_spec(s: Settings) -> SynthSpec:
    events = s["data.num_event_types"]
    if events is None:
        events = s["data.num_candidates"] + 1 if s["data.task"] == "multi_choice" else 4
    vocab = s["data.answer_vocab_size"] or events
    return SynthSpec(
        d=s["data.d"], num_clips=s["data.num_clips"], frames_per_clip=s["data.frames_per_clip"],
        num_event_types=events, task=s["data.task"], num_samples=s["data.samples"],
        answer_vocab_size=vocab, num_candidates=s["data.num_candidates"],
        noise_std=s["data.noise_std"], seed=s["data.seed"],
    )


# --------------------------------------------------------------- subcommands


def cmd_gen(args) -> int:
    s = _resolve(args)
    spec = _synth_spec(s)
    samples = generate(spec)
    out = Path(args.out) if args.out else _output_root() / "data" / spec.task
    manifest, blob = write_dataset(samples, out.resolve(), spec)
    log.info("wrote %d samples", len(samples))
    print(manifest.resolve())
    print(blob.resolve())
    return 0


def _load_split(path: str, val_fraction: float):
    samples = read_dataset(path)
    if not 0 <= val_fraction < 1:
        raise UsageError(f"val_fraction must be in [0, 1), got {val_fraction}")
    n_val = int(round(len(samples) * val_fraction))
    n_train = len(samples) - n_val
    if n_train < 1:
        raise UsageError("dataset too small to leave any training samples")
    return samples[:n_train], samples[n_train:]


def _num_answers(path: str, samples) -> int:
    header = read_header(path)
    if "spec" in header:
        return int(header["spec"]["answer_vocab_size"])
    return max(2, max(s.label for s in samples) + 1)


def _record_data(s: Settings, path: str) -> None:
    """Make the persisted ``[data]`` section describe the dataset actually used."""
    header = read_header(path)
    spec = dict(header.get("spec", {}))
    spec.setdefault("task", header["task"])
    spec.setdefault("d", header["d"])
    spec.setdefault("num_clips", header["num_clips"])
    spec.setdefault("frames_per_clip", header["frames_per_clip"])
    spec.setdefault("num_samples", header["num_samples"])
    spec["samples"] = spec.pop("num_samples")
    for key, value in spec.items():
        if key in KEYS["data"]:
            s.values["data"][key] = value


def _train_config(s: Settings, stage: str = "regular") -> TrainConfig:
    return TrainConfig(
        learning_rate=s["train.learning_rate"], epochs=s["train.epochs"], batch_size=s["train.batch_size"],
        lr_decay=s["train.lr_decay"], stage=stage, module_lr_multipliers=s["train.multipliers"],
        seed=s["train.seed"], optimizer=s["train.optimizer"], grad_clip=s["train.grad_clip"],
        max_steps=s["train.max_steps"],
    )


def _fine_config(s: Settings) -> TrainConfig:
    base = _train_config(s, "fine_tune")
    lr = s["fine_tune.learning_rate"] or base.learning_rate
    epochs = s["fine_tune.epochs"] or base.epochs
    return TrainConfig(
        learning_rate=lr, epochs=epochs, batch_size=base.batch_size, lr_decay=s["fine_tune.lr_decay"],
        stage="fine_tune", module_lr_multipliers=s["fine_tune.multipliers"], seed=base.seed,
        optimizer=base.optimizer, grad_clip=base.grad_clip, max_steps=s["fine_tune.max_steps"],
    )


class _LogFile:
    def __init__(self, path: Path, append: bool):
        self.fh = open(path, "a" if append else "w")

    def __call__(self, line: str) -> None:
        self.fh.write(line + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


def _prepare_out(args, name: str) -> Path:
    out = Path(args.out) if args.out else _output_root() / name
    out = out.resolve()
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args, two_stage: bool = False) -> int:
    s = _resolve(args)
    out = _prepare_out(args, "train2" if two_stage else "train")
    train_set, val_set = _load_split(args.data, s["train.val_fraction"])
    _record_data(s, args.data)
    (out / "config.ini").write_text(s.render())
    first = train_set[0]
    N, d, f = first.clip_frames.shape
    if args.resume:
        if two_stage:
            raise UsageError("--resume is only supported for single-stage training")
        model, state, saved_cfg = load_training_checkpoint(args.resume, s["model.precision"])
        cfg = _train_config(s)
        # the checkpoint owns everything except how long to keep going
        cfg = TrainConfig(**{**saved_cfg.to_dict(), "epochs": cfg.epochs, "max_steps": cfg.max_steps})
    else:
        hcfg = HierarchyConfig(
            d=d, num_clips=N, frames_per_clip=f, task=first.task, sharing=s["model.sharing"],
            attention_variant=s["model.attention_variant"], activation=s["model.activation"],
        )
        model = build_model(hcfg, _num_answers(args.data, train_set), s["model.seed"], s["model.precision"])
        state = None
    sink = _LogFile(out / "train.log", append=bool(args.resume))
    try:
        report = audit_network(model.network, model.decoder)
        for key, value in report.as_dict().items():
            sink(f"audit {key}={value}")
        if two_stage:
            warm = _train_config(s, "warm_up")
            state = run_two_stage(model, train_set, val_set, warm, _fine_config(s), log=sink, out_dir=out)
        else:
            state = train(model, train_set, val_set or None, _train_config(s) if state is None else cfg,
                          state=state, log=sink, out_dir=out)
    finally:
        sink.close()
    log.info("finished at step %d; best validation %s at epoch %s", state.step, state.best_metric, state.best_epoch)
    print(out / "train.log")
    for ckpt in sorted(out.rglob("*.ckpt")):
        print(ckpt)
    return 0


def cmd_eval(args) -> int:
    s = _resolve(args)
    model, _, _ = load_training_checkpoint(args.checkpoint, s["model.precision"])
    samples = read_dataset(args.data)
    metrics = evaluate(model, samples, warm_up=args.warm_up)
    for key, value in metrics.items():
        print(f"{key}={value!r}")
    return 0


def cmd_gradcheck(args) -> int:
    """One line per attention variant, covering both output modes."""
    variants = ("component", "temporal") if args.variant == "both" else (args.variant,)
    ok = True
    for variant in variants:
        reports = [check_gnnm(GnnmConfig(args.d, args.n, variant, aggregate), seed=args.seed, h=args.h,
                              tolerance=args.tolerance, corrupt=args.corrupt)
                   for aggregate in (False, True)]
        worst = max(reports, key=lambda r: r.max_error)
        failing = sorted({name for r in reports for name in r.failing()})
        line = (f"{'PASS' if not failing else 'FAIL'} variant={variant} d={args.d} n={args.n} "
                f"seed={args.seed} max_rel_err={worst.max_error:.3e} worst={worst.worst}")
        if failing:
            line += " failing=" + ",".join(failing)
            ok = False
        print(line)
    return 0 if ok else 1


def cmd_params(args) -> int:
    variant = args.variant or "temporal"
    frames = args.frames_per_clip if args.frames_per_clip is not None else 16
    clips = args.num_clips if args.num_clips is not None else 8
    d = args.d if args.d is not None else 512
    hcfg = HierarchyConfig(d=d, num_clips=clips, frames_per_clip=frames, task=args.task or "open_ended",
                           sharing=args.sharing or "per_module", attention_variant=variant)
    network = build_network(hcfg, seed=0, dtype="single")
    if args.drop_scalar:
        # test hook: shrink one tensor so enumeration disagrees with the formula
        t = network.registry.physical_sets[0].ln1_beta
        t.data = t.data[:-1]
    report = audit_network(network)
    if variant == "temporal" and count_gnnm_params(hcfg.level_config("clip")) != temporal_formula(d):
        report.mismatches.append("temporal count differs from 7d^2+6d+3")
    sys.stdout.write(report.render_kv() if args.format == "kv" else report.render_table())
    if not report.ok:
        for m in report.mismatches:
            print(f"audit mismatch: {m}", file=sys.stderr)
        print("audit FAILED", file=sys.stderr)
        return 1
    return 0


# -------------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one key")
    p.add_argument("-v", "--verbose", action="store_true")


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task", choices=("open_ended", "count", "multi_choice"))
    p.add_argument("--d", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--num-clips", dest="num_clips", type=int)
    p.add_argument("--frames-per-clip", dest="frames_per_clip", type=int)
    p.add_argument("--noise-std", dest="noise_std", type=float)
    p.add_argument("--num-event-types", dest="num_event_types", type=int)
    p.add_argument("--answer-vocab-size", dest="answer_vocab_size", type=int)
    p.add_argument("--num-candidates", dest="num_candidates", type=int)


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset base path (<name>.manifest / <name>.blob)")
    p.add_argument("--out", help=f"output directory (default: ${OUTPUT_ENV}/<subcommand>)")
    p.add_argument("--sharing", choices=("per_module", "per_level"))
    p.add_argument("--variant", choices=("component", "temporal"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-steps", dest="max_steps", type=int)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog="gnnm", description=__doc__, epilog=_keys_epilog(), formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"gnnm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic dataset", epilog=_keys_epilog(), formatter_class=fmt)
    _common(p)
    _data_flags(p)
    p.add_argument("--out", help="dataset base path")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="regular training", epilog=_keys_epilog(), formatter_class=fmt)
    _common(p)
    _train_flags(p)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train2", help="two-stage (warm-up, fine-tune) training", epilog=_keys_epilog(),
                       formatter_class=fmt)
    _common(p)
    _train_flags(p)
    p.set_defaults(func=lambda a: cmd_train(a, two_stage=True), resume=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint", epilog=_keys_epilog(), formatter_class=fmt)
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--warm-up", dest="warm_up", action="store_true", help="use the warm-up decoder")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of one module")
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--n", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--variant", choices=("component", "temporal", "both"), default="both")
    p.add_argument("--corrupt", choices=PARAM_NAMES + ("input", "context"), help=argparse.SUPPRESS)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", help="parameter count and space audit")
    p.add_argument("--d", type=int)
    p.add_argument("--variant", choices=("component", "temporal"))
    p.add_argument("--task", choices=("open_ended", "count", "multi_choice"))
    p.add_argument("--sharing", choices=("per_module", "per_level"))
    p.add_argument("--num-clips", dest="num_clips", type=int)
    p.add_argument("--frames-per-clip", dest="frames_per_clip", type=int)
    p.add_argument("--format", choices=("table", "kv"), default="table")
    p.add_argument("--drop-scalar", dest="drop_scalar", action="store_true", help=argparse.SUPPRESS)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_params)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"gnnm {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (GnnmError, OSError) as exc:
        print(f"gnnm {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
