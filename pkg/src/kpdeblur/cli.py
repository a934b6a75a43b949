"""Command-line entry point: ``kpdeblur <command> [options]``.

Exit codes: 0 success, 1 oracle or check failure, 2 usage, 3 missing
prerequisite, 4 incompatible artifacts.
"""

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from kpdeblur.backbone import DeblurNetConfig
from kpdeblur.blur import load_field
from kpdeblur.data import DatasetManifest, SynthParams, load_image, load_samples, save_image, synth_dataset
from kpdeblur.errors import (
    IncompatibleArtifactError,
    MissingPrerequisiteError,
    ParameterError,
    ParseError,
    UsageError,
    ValidationError,
)
from kpdeblur.experiments import ABLATION_ROWS, ablation_table, row_flags, variant_from
from kpdeblur.metrics import psnr
from kpdeblur.numerics import get_precision, set_precision
from kpdeblur.training import EstimatorConfig, Models, TrainConfig, evaluate, restore, run_stage

log = logging.getLogger("kpdeblur")

EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_MISSING, EXIT_INCOMPATIBLE = 0, 1, 2, 3, 4


# -- configuration ------------------------------------------------------------
def _read_kv(text, source):
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{n}: expected key=value, got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key] = val
    return out


def default_config_text():
    return resources.files("kpdeblur").joinpath("default.cfg").read_text()


def _typed(val, typ, key):
    try:
        if typ in (bool, "bool"):
            if val.lower() not in ("true", "false", "1", "0"):
                raise ValueError(val)
            return val.lower() in ("true", "1")
        if typ in (int, "int"):
            return int(val)
        if typ in (float, "float"):
            return float(val)
    except ValueError:
        raise ParameterError(f"config key {key}: cannot parse {val!r} as {getattr(typ, '__name__', typ)}") from None
    return val


@dataclass
class RunConfig:
    """Resolved settings: checked-in defaults, then ``--config`` file, then flags."""

    command: str
    values: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)

    @classmethod
    def resolve(cls, args):
        values = _read_kv(default_config_text(), "default.cfg")
        if getattr(args, "config", None):
            p = Path(args.config)
            if not p.is_file():
                raise MissingPrerequisiteError(f"config file {p} not found")
            for key, val in _read_kv(p.read_text(), str(p)).items():
                if key not in values:
                    raise UsageError(f"unknown config key {key!r} in {p}")
                values[key] = val
        if getattr(args, "seed", None) is not None:
            values["seed"] = str(args.seed)
        if getattr(args, "precision", None) is not None:
            values["precision"] = str(args.precision)
        iters = getattr(args, "iterations", None)
        if iters is not None:
            stage = getattr(args, "stage", None)
            for s in ([stage] if stage else (1, 2, 3)):
                values[f"train.iterations_stage{s}"] = str(iters)
        paths = {k: str(v) for k, v in vars(args).items()
                 if k not in ("command", "config", "seed", "precision", "iterations", "func", "verbose") and v is not None}
        return cls(args.command, values, paths)

    @property
    def seed(self):
        seed = _typed(self.values["seed"], int, "seed")
        if seed < 0:
            raise ParameterError("seed must be non-negative")
        return seed

    @property
    def precision(self):
        return _typed(self.values["precision"], int, "precision")

    def section(self, prefix):
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.values.items() if k.startswith(prefix + ".")}

    def model(self):
        text = "".join(f"{k}={v}\n" for k, v in self.section("model").items())
        return DeblurNetConfig.from_text(text)

    def estimator(self):
        return EstimatorConfig(**{k: _typed(v, int, "estimator." + k) for k, v in self.section("estimator").items()})

    def synth(self):
        types = {f.name: f.type for f in fields(SynthParams)}
        return SynthParams(**{k: _typed(v, types[k], "synth." + k) for k, v in self.section("synth").items()})

    def train(self, stage, non_blind=False):
        types = {f.name: f.type for f in fields(TrainConfig)}
        sec = self.section("train")
        kw = {k: _typed(v, types[k], "train." + k) for k, v in sec.items() if k in types}
        kw["iterations"] = _typed(sec[f"iterations_stage{stage}"], int, f"train.iterations_stage{stage}")
        return TrainConfig(stage=stage, seed=self.seed, non_blind=non_blind, **kw)

    @property
    def checkpoint_every(self):
        return _typed(self.values["train.checkpoint_every"], int, "train.checkpoint_every")

    def text(self):
        lines = [f"command={self.command}"]
        lines += [f"{k}={v}" for k, v in self.values.items()]
        lines += [f"path.{k}={v}" for k, v in sorted(self.paths.items())]
        return "\n".join(lines) + "\n"

    def log_and_save(self, out_dir=None):
        log.info("resolved configuration:\n%s", self.text().rstrip())
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / f"{self.command}.resolved.cfg").write_text(self.text())


# -- helpers ------------------------------------------------------------------
def _manifest(path):
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.jsonl"
    if not p.is_file():
        raise MissingPrerequisiteError(f"manifest {p} not found")
    return DatasetManifest.load(p).validate()


def _check_k(models, samples):
    for s in samples:
        if s.field is not None and s.field.k != models.k:
            raise IncompatibleArtifactError(
                f"checkpoint expects k={models.k} but kernel field for {s.name} has k={s.field.k}")
        if s.sharp.shape[0] != models.deblur.cfg.in_channels:
            raise IncompatibleArtifactError(
                f"checkpoint expects {models.deblur.cfg.in_channels} channels, {s.name} has {s.sharp.shape[0]}")


def _split(manifest, name):
    sub = manifest.split(name)
    if not len(sub):
        raise UsageError(f"manifest has no entries in split {name!r}")
    return sub


def _mean_row(rows):
    keys = ("psnr", "ssim", "psnr_in", "ssim_in")
    return {"name": "mean", **{k: float(np.mean([r[k] for r in rows])) for k in keys}}


def _summary_table(rows, mean):
    lines = [f"{'image':<20} {'PSNR':>8} {'SSIM':>7} {'PSNR in':>8} {'SSIM in':>8}"]
    for r in rows + [mean]:
        lines.append(f"{r['name']:<20} {r['psnr']:8.3f} {r['ssim']:7.4f} {r['psnr_in']:8.3f} {r['ssim_in']:8.4f}")
    return "\n".join(lines)


# -- commands -----------------------------------------------------------------
def cmd_synth(args, rc):
    rc.log_and_save(args.out)
    model = rc.model()
    params = rc.synth()
    if args.test_count is not None:
        params.test_count = args.test_count
    manifest = synth_dataset(args.sharp_dir, args.out, k=model.k, params=params, seed=rc.seed)
    samples = load_samples(manifest)
    vals = [psnr(s.blurry, s.sharp) for s in samples]
    print(f"manifest: {Path(args.out) / 'manifest.jsonl'}")
    print(f"images: {len(manifest)} (train {len(manifest.split('train'))}, test {len(manifest.split('test'))}), "
          f"k={model.k}, blurry PSNR mean {np.mean(vals):.3f} dB (min {np.min(vals):.3f}, max {np.max(vals):.3f})")
    return EXIT_OK


def _load_or_build(rc, checkpoint, stage):
    if checkpoint is not None:
        models = Models.load(checkpoint)
        if models.deblur.cfg != rc.model() or models.est_cfg != rc.estimator():
            log.warning("architecture taken from checkpoint %s; model.* and estimator.* settings ignored", checkpoint)
        return models
    if stage > 1:
        log.info("no --checkpoint given; starting stage %d from freshly initialized weights", stage)
    return Models.build(rc.model(), rc.estimator(), seed=rc.seed)


def cmd_train(args, rc):
    out = Path(args.out)
    rc.log_and_save(out)
    cfg = rc.train(args.stage, non_blind=args.non_blind)
    models = _load_or_build(rc, args.checkpoint, args.stage)
    samples = load_samples(_split(_manifest(args.data), "train"), need_fields=args.non_blind)
    _check_k(models, samples)
    every = rc.checkpoint_every
    report = run_stage(args.stage, models, samples, cfg, checkpoint_dir=out / "checkpoints" if every else None,
                       checkpoint_every=every)
    ckpt = out / f"stage{args.stage}.ckpt"
    models.save(ckpt)
    report.write(out / f"train_stage{args.stage}.jsonl")
    print(f"checkpoint: {ckpt}")
    if report.records:
        first, last = report.records[0]["loss"], report.records[-1]["loss"]
        k = max(1, len(report.records) // 10)
        head = np.mean([r["loss"] for r in report.records[:k]])
        tail = np.mean([r["loss"] for r in report.records[-k:]])
        print(f"stage {args.stage}: {len(report.records)} iterations, loss {first:.5f} -> {last:.5f} "
              f"(first/last {k}-iteration means {head:.5f} -> {tail:.5f}), skipped steps {report.skipped_steps}")
    else:
        print(f"stage {args.stage}: 0 iterations, weights unchanged")
    return EXIT_OK


def cmd_eval(args, rc):
    out = Path(args.out)
    rc.log_and_save(out)
    models = Models.load(args.checkpoint)
    samples = load_samples(_split(_manifest(args.data), args.split), need_fields=args.non_blind)
    _check_k(models, samples)
    rows = evaluate(models, samples, non_blind=args.non_blind)
    mean = _mean_row(rows)
    tag = "nonblind" if args.non_blind else "blind"
    report = out / f"eval_{tag}.jsonl"
    report.write_text("".join(json.dumps(r) + "\n" for r in rows + [mean]))
    if args.dump_images:
        dump = Path(args.dump_images)
        dump.mkdir(parents=True, exist_ok=True)
        for s in samples:
            xh, _ = restore(models, s.blurry, args.non_blind, s.field)
            save_image(dump / f"{s.name}_{tag}.{'pgm' if xh.shape[0] == 1 else 'ppm'}", xh)
    print(_summary_table(rows, mean))
    print(f"report: {report}")
    return EXIT_OK


def cmd_deblur(args, rc):
    rc.log_and_save()
    models = Models.load(args.checkpoint)
    y = load_image(args.input)
    if y.shape[0] != models.deblur.cfg.in_channels:
        raise IncompatibleArtifactError(f"checkpoint expects {models.deblur.cfg.in_channels} channels, "
                                        f"image has {y.shape[0]}")
    gt = None
    if args.non_blind:
        if not args.field:
            raise UsageError("--non-blind needs --field with the ground-truth kernel field")
        gt = load_field(args.field)
        if (gt.H, gt.W) != y.shape[-2:]:
            raise IncompatibleArtifactError(f"kernel field is {gt.H}x{gt.W}, image is {y.shape[-2:]}")
    xh, _ = restore(models, y, args.non_blind, gt)
    save_image(args.output, xh)
    print(f"wrote {args.output}")
    return EXIT_OK


def cmd_ablate(args, rc):
    out = Path(args.out)
    rc.log_and_save(out)
    manifest = _manifest(args.data)
    train = load_samples(_split(manifest, "train"))
    test = load_samples(_split(manifest, args.split))
    est_cfg = rc.estimator()
    if args.checkpoint:
        stage1 = Models.load(args.checkpoint)
        if stage1.stage < 1:
            raise MissingPrerequisiteError(f"{args.checkpoint} holds no trained kernel estimator")
        est_cfg = stage1.est_cfg
    else:
        stage1 = Models.build(rc.model(), est_cfg, seed=rc.seed)
        _check_k(stage1, train)
        print("training the shared stage-1 kernel estimator")
        run_stage(1, stage1, train, rc.train(1))
        stage1.save(out / "stage1.ckpt")
    rows = []
    for name, flags in ABLATION_ROWS:
        cfg = DeblurNetConfig(**{**rc.model().__dict__, **flags})
        if cfg.k != stage1.k:
            raise IncompatibleArtifactError(f"model.k={cfg.k} but the stage-1 estimator has k={stage1.k}")
        m = variant_from(stage1, cfg, est_cfg, rc.seed)
        print(f"row {name}: stage 2")
        rep = run_stage(2, m, train, rc.train(2))
        rep.write(out / f"ablate_{name}.jsonl")
        ev = _mean_row(evaluate(m, test))
        rows.append({"row": name, **row_flags(cfg), "psnr": ev["psnr"], "ssim": ev["ssim"]})
    (out / "ablation.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows))
    table = ablation_table(rows)
    (out / "ablation.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_oracle(args, rc):
    from kpdeblur.oracle_suite import run_suite

    rc.log_and_save()
    results = run_suite(gradients=not args.skip_gradients)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.ok]
    total = sum(r.seconds for r in results)
    if failed:
        print(f"FAILED ({len(failed)}): {', '.join(failed)}  [{total:.1f}s]")
        return EXIT_FAILED
    print(f"all {len(results)} checks passed in {total:.1f}s")
    return EXIT_OK


def cmd_toy(args, rc):
    from kpdeblur.experiments import ToySettings, quick_settings, run_toy_experiment

    rc.log_and_save(args.out)
    settings = quick_settings(seed=rc.seed) if args.quick else ToySettings(seed=rc.seed)
    report = run_toy_experiment(args.out, settings, log=print)
    print(Path(args.out, "ablation.txt").read_text(), end="")
    for name, ok in report["checks"].items():
        print(f"{'pass' if ok else 'FAIL'}  {name}")
    return EXIT_OK if all(report["checks"].values()) else EXIT_FAILED


# -- argument parsing ---------------------------------------------------------
def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value file overriding the built-in defaults")
    common.add_argument("--seed", type=int, help="random seed (non-negative integer)")
    common.add_argument("--precision", type=int, choices=(32, 64), help="floating-point width")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    p = argparse.ArgumentParser(prog="kpdeblur", description="Kernel-prior-guided frequency-domain deblurring.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="blur a folder of sharp images into a dataset")
    s.add_argument("sharp_dir")
    s.add_argument("out")
    s.add_argument("--test-count", type=int, help="number of images in the test split")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="run one training stage")
    s.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    s.add_argument("--data", required=True, help="dataset directory or manifest.jsonl")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--checkpoint", help="checkpoint from the previous stage")
    s.add_argument("--iterations", type=int)
    s.add_argument("--non-blind", action="store_true", help="condition on ground-truth kernel fields")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="PSNR/SSIM of a checkpoint on a manifest split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--non-blind", action="store_true")
    s.add_argument("--dump-images", help="directory for restored images")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("deblur", parents=[common], help="restore a single image")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--non-blind", action="store_true")
    s.add_argument("--field", help="ground-truth kernel field (.fdt) for --non-blind")
    s.set_defaults(func=cmd_deblur)

    s = sub.add_parser("ablate", parents=[common], help="train and compare the six flag combinations")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--checkpoint", help="stage-1 checkpoint to share (trained here if absent)")
    s.add_argument("--split", default="test")
    s.add_argument("--iterations", type=int)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("oracle", parents=[common], help="run the numerical self-checks")
    s.add_argument("--skip-gradients", action="store_true")
    s.set_defaults(func=cmd_oracle)

    s = sub.add_parser("toy", parents=[common], help="run the whole toy study end to end")
    s.add_argument("out")
    s.add_argument("--quick", action="store_true", help="tiny smoke-test sizes")
    s.set_defaults(func=cmd_toy)
    return p


def _exit_code(exc):
    if isinstance(exc, MissingPrerequisiteError):
        return EXIT_MISSING
    if isinstance(exc, (IncompatibleArtifactError, ValidationError, ParseError)):
        return EXIT_INCOMPATIBLE
    if isinstance(exc, (UsageError, ParameterError)):
        return EXIT_USAGE
    return None


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    saved = get_precision()
    try:
        rc = RunConfig.resolve(args)
        set_precision(64 if args.command == "oracle" else rc.precision)
        return args.func(args, rc)
    except Exception as exc:
        code = _exit_code(exc)
        if code is None:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return code
    finally:
        set_precision(saved)


def entry():
    sys.exit(main())
