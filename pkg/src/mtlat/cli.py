"""Command line: ``mtlat {train,bench,corrupt,attack,report}``.

Exit codes: 0 success, 2 config error, 3 data error, 4 contract violation.
``--jobs`` bounds in-process parallelism of benchmark rows; the default of 1
is the documented bit-deterministic setting.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import attacks
from .bench import emit_report, load_report, run_benchmark
from .config import load_config
from .corruptions import KINDS, export_corrupted, to_uint8
from .errors import ConfigError, DataError, MtlatError
from .models import load_checkpoint, predict, save_checkpoint
from .training import train

log = logging.getLogger("mtlat")

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".ppm")
ATTACK_METHODS = ("fgsm", "fgsm_targeted", "pgd", "pgd_ll", "mi_fgsm", "cw_l2")


def _prepare_out(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as e:
        raise ConfigError(f"output directory {path} is not writable: {e}") from e
    return path


def _config(args):
    cfg = load_config(args.config, args.set or ())
    if getattr(args, "out", None):
        cfg.output_dir = str(args.out)
    return cfg


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e


def _read_image(path: Path) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, UnidentifiedImageError) as e:
        raise DataError(f"cannot read image {path}: {e}") from e


def _write_image(path: Path, image):
    from PIL import Image

    Image.fromarray(to_uint8(image)).save(path, format="PNG")


# --------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _config(args)
    recipe = cfg.recipe()
    dataset = cfg.load_dataset()
    out = _prepare_out(cfg.output_path())
    (out / "config.resolved.yaml").write_text(cfg.snapshot())
    result = train(dataset, recipe, log_path=out / "train_log.jsonl")
    save_checkpoint(result.model, out / "model.ckpt")
    last = result.log[-1].clean_accuracy if result.log else float("nan")
    print(f"trained {recipe.mode} {recipe.arch}: clean accuracy {last:.2f}% -> {out / 'model.ckpt'}")
    return 0


def cmd_bench(args) -> int:
    cfg = _config(args)
    options = cfg.bench_options(jobs=args.jobs)
    baseline = None
    if args.baseline:
        try:
            baseline = load_report(Path(args.baseline).read_bytes())
        except (OSError, ValueError, KeyError) as e:
            raise DataError(f"cannot read baseline report {args.baseline}: {e}") from e
    victim = _load_ckpt(args.victim)
    surrogate = _load_ckpt(args.surrogate)
    dataset = cfg.load_dataset()
    out = _prepare_out(cfg.output_path())
    (out / "bench.config.resolved.yaml").write_text(cfg.snapshot())
    report_dir = _prepare_out(out / "report")
    report = run_benchmark(victim, surrogate, dataset, seed=cfg.seed, options=options)
    for fmt, ext in (("json", "json"), ("csv", "csv"), ("markdown", "md")):
        (report_dir / f"report.{ext}").write_bytes(emit_report(report, fmt, baseline))
    print(f"benchmark of {report.model_id}: clean {report.a_clean:.2f}% -> {report_dir}")
    return 0


def cmd_corrupt(args) -> int:
    cfg = _config(args)
    if args.kind not in KINDS:
        raise ConfigError(f"unknown corruption kind {args.kind!r}; expected one of {KINDS}")
    if args.severity not in range(1, 6):
        raise ConfigError(f"severity must be an integer in 1..5, got {args.severity}")
    src = Path(args.input)
    if not src.is_dir():
        raise DataError(f"input directory {src} does not exist")
    files = sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DataError(f"no images in {src}")
    images = [_read_image(p) for p in files]
    table = cfg.bench_options().severity_table
    out = _prepare_out(cfg.output_path())
    rows = export_corrupted(images, [p.name for p in files], args.kind, args.severity, cfg.seed, out, table)
    print(f"wrote {len(rows)} corrupted images to {out}")
    return 0


def cmd_attack(args) -> int:
    cfg = _config(args)
    model = _load_ckpt(args.model)
    x = _read_image(Path(args.image))[None]
    if x.shape[1:] != tuple(model.input_shape):
        raise DataError(f"image shape {x.shape[1:]} does not match model input {tuple(model.input_shape)}")
    if not 0 <= args.label < model.n_classes:
        raise ConfigError(f"label must lie in [0, {model.n_classes})")
    y = np.array([args.label])
    budget = cfg.budget()
    m = args.method
    if m == "fgsm":
        adv = attacks.fgsm_untargeted(model, x, y, budget.epsilon)
    elif m == "fgsm_targeted":
        adv = attacks.fgsm_targeted(model, x, y, budget.epsilon)
    elif m == "pgd":
        adv = attacks.pgd(model, x, y, budget)
    elif m == "pgd_ll":
        adv = attacks.pgd_ll(model, x, budget)
    elif m == "mi_fgsm":
        adv = attacks.mi_fgsm(model, x, y, budget)
    else:
        adv = attacks.cw_l2(model, x, y, iterations=budget.iterations, confidence=budget.confidence,
                            search_steps=budget.search_steps, initial_const=budget.initial_const,
                            learning_rate=budget.learning_rate)
    out = Path(args.out)
    _prepare_out(out.parent)
    _write_image(out, adv.x_adv[0])
    info = {
        "method": m, "budget": budget.to_dict(), "label": args.label,
        "clean_prediction": int(predict(model, x).argmax()),
        "adversarial_prediction": int(predict(model, adv.x_adv).argmax()),
        "success": bool(adv.success[0]),
        "linf": float(np.abs(adv.delta).max()), "l2": float(np.sqrt((adv.delta ** 2).sum())),
    }
    print(json.dumps(info, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    try:
        report = load_report(Path(args.report).read_bytes())
        baseline = load_report(Path(args.baseline).read_bytes()) if args.baseline else None
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"cannot read report: {e}") from e
    data = emit_report(report, args.format, baseline)
    if args.out:
        Path(args.out).write_bytes(data)
    else:
        sys.stdout.write(data.decode("utf-8"))
    return 0


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtlat", description="M-TLAT robustness toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="YAML run config (defaults when omitted)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config value, e.g. train.mode=standard (repeatable)")
        sp.add_argument("--out", help="output directory (overrides output_dir)")

    sp = sub.add_parser("train", help="train a model and write model.ckpt, train_log.jsonl")
    with_config(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("bench", help="run the robustness benchmark")
    with_config(sp)
    sp.add_argument("--victim", required=True, help="checkpoint under evaluation")
    sp.add_argument("--surrogate", required=True, help="checkpoint used to craft the black-box rows")
    sp.add_argument("--baseline", help="report.json to annotate scores against (+/-)")
    sp.add_argument("--jobs", type=int, default=1, help="parallel benchmark rows (default 1)")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("corrupt", help="corrupt a directory of images")
    with_config(sp)
    sp.add_argument("--input", required=True, help="directory of input images")
    sp.add_argument("--kind", required=True, help="corruption kind")
    sp.add_argument("--severity", required=True, type=int, help="severity level 1..5")
    sp.set_defaults(func=cmd_corrupt)

    sp = sub.add_parser("attack", help="attack a single image (debugging)")
    p_cfg = sp.add_argument_group("config")
    p_cfg.add_argument("--config")
    p_cfg.add_argument("--set", action="append", metavar="KEY=VALUE")
    sp.add_argument("--model", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--label", required=True, type=int, help="true label (target for fgsm_targeted)")
    sp.add_argument("--method", choices=ATTACK_METHODS, default="pgd")
    sp.add_argument("--out", required=True, help="output PNG path")
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("report", help="re-render a report.json")
    sp.add_argument("report")
    sp.add_argument("--format", choices=("json", "csv", "markdown"), default="markdown")
    sp.add_argument("--baseline")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    if args.command == "bench" and args.jobs < 1:
        print("mtlat: error: --jobs must be >= 1", file=sys.stderr)
        return ConfigError.exit_code
    try:
        return args.func(args)
    except MtlatError as e:
        print(f"mtlat: error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
