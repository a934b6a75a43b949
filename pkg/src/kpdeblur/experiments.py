"""End-to-end toy experiment: staged training, blind/non-blind and ablation comparisons.

Everything that lands in ``report.json`` and ``curves/`` is a pure function of
the settings, so two runs with the same seed produce identical files; wall
times go to ``timing.json`` and the per-iteration logs under ``logs/``.
"""

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from kpdeblur.backbone import DeblurNetConfig
from kpdeblur.data import SynthParams, load_samples, synth_dataset, write_toy_images
from kpdeblur.training import EstimatorConfig, Models, TrainConfig, evaluate, mean_ke_loss, run_stage

# (row name, flag overrides of the full configuration)
ABLATION_ROWS = [
    ("baseline", dict(kernel_prior=False)),
    ("enc", dict(use_fim_decoder=False, multiscale=False)),
    ("dec", dict(use_fim_encoder=False, multiscale=False)),
    ("enc+dec", dict(multiscale=False)),
    ("no-residual", dict(fim_residual=False)),
    ("full", dict()),
]

# rows that differ from the full configuration in exactly one flag
SINGLE_FLAG_ROWS = ("enc+dec", "no-residual")


@dataclass
class ToySettings:
    seed: int = 7
    images: int = 14
    test_count: int = 4
    size: int = 64
    k: int = 9
    max_len: float = 3.0
    channels: tuple = (8, 16, 32)
    blocks: int = 1
    kernel_channels: int = 16
    est_width: int = 16
    est_levels: int = 3
    batch_size: int = 2
    iterations: dict = field(default_factory=lambda: {1: 500, 2: 1000, 3: 300})

    def model_config(self, **flags):
        return DeblurNetConfig(channels=self.channels, enc_blocks=self.blocks, dec_blocks=self.blocks,
                               k=self.k, kernel_channels=self.kernel_channels, **flags)

    def train_config(self, stage, **kw):
        return TrainConfig(stage=stage, iterations=self.iterations[stage], batch_size=self.batch_size,
                           seed=self.seed, patch=self.size, **kw)


def row_flags(cfg):
    return {"enc": cfg.kernel_prior and cfg.use_fim_encoder, "dec": cfg.kernel_prior and cfg.use_fim_decoder,
            "res": cfg.kernel_prior and cfg.fim_residual, "multiscale": cfg.kernel_prior and cfg.multiscale}


def _summary(rows):
    return {"psnr": float(np.mean([r["psnr"] for r in rows])), "ssim": float(np.mean([r["ssim"] for r in rows])),
            "psnr_in": float(np.mean([r["psnr_in"] for r in rows])),
            "ssim_in": float(np.mean([r["ssim_in"] for r in rows])), "images": rows}


class _Run:
    """Collects curves and timings while the stages execute."""

    def __init__(self, out, log):
        self.out = Path(out)
        self.log = log
        for sub in ("curves", "logs", "checkpoints"):
            (self.out / sub).mkdir(parents=True, exist_ok=True)
        self.timing = {}

    def stage(self, tag, stage, models, samples, cfg):
        self.log(f"[{tag}] stage {stage}: {cfg.iterations} iterations")
        t = time.perf_counter()
        rep = run_stage(stage, models, samples, cfg)
        self.timing[tag] = round(time.perf_counter() - t, 2)
        rep.write(self.out / "curves" / f"{tag}.jsonl", include_time=False)
        rep.write(self.out / "logs" / f"{tag}.jsonl", include_time=True)
        self.log(f"[{tag}] done in {self.timing[tag]:.1f}s, final loss {rep.records[-1]['loss']:.5f}"
                 if rep.records else f"[{tag}] no iterations")
        return rep


def prepare_toy_data(out, s):
    out = Path(out)
    write_toy_images(out / "toy_sharp", s.images, size=s.size, seed=s.seed)
    params = SynthParams(max_len=s.max_len, test_count=s.test_count)
    manifest = synth_dataset(out / "toy_sharp", out / "dataset", k=s.k, params=params, seed=s.seed)
    return load_samples(manifest.split("train")), load_samples(manifest.split("test"))


def variant_from(stage1, cfg, est_cfg, seed):
    """Fresh deblurring net for ``cfg`` sharing the stage-1 estimator weights."""
    m = Models.build(cfg, est_cfg, seed=seed)
    for (_, dst), (_, src) in zip(m.estimator.named_parameters(), stage1.estimator.named_parameters()):
        dst.data = src.data.copy()
    m.stage = stage1.stage
    return m


def ablation(run, stage1, train, test, s, done=None):
    """Stage-2 training and blind evaluation of every ablation row."""
    done = done or {}
    rows = []
    est_cfg = stage1.est_cfg
    for name, flags in ABLATION_ROWS:
        cfg = s.model_config(**flags)
        if name in done:
            res = done[name]
        else:
            m = variant_from(stage1, cfg, est_cfg, s.seed)
            run.stage(f"ablate_{name}", 2, m, train, s.train_config(2))
            res = _summary(evaluate(m, test))
        rows.append({"row": name, **row_flags(cfg), "psnr": res["psnr"], "ssim": res["ssim"]})
    return rows


def run_toy_experiment(out, settings=None, log=print):
    """Run the whole toy study in ``out`` and return the report dict."""
    s = settings or ToySettings()
    out = Path(out)
    run = _Run(out, log)
    t_total = time.perf_counter()

    t = time.perf_counter()
    train, test = prepare_toy_data(out, s)
    run.timing["data"] = round(time.perf_counter() - t, 2)
    est_cfg = EstimatorConfig(s.est_width, s.est_levels)

    full = Models.build(s.model_config(), est_cfg, seed=s.seed)
    ke_start = mean_ke_loss(full, train)
    run.stage("stage1", 1, full, train, s.train_config(1))
    ke_end = mean_ke_loss(full, train)
    full.save(out / "checkpoints" / "stage1.ckpt")
    stage1 = Models.load(out / "checkpoints" / "stage1.ckpt")

    run.stage("stage2_full", 2, full, train, s.train_config(2))
    full.save(out / "checkpoints" / "stage2.ckpt")
    s2 = _summary(evaluate(full, test))

    run.stage("stage3", 3, full, train, s.train_config(3))
    full.save(out / "checkpoints" / "stage3.ckpt")
    s3 = _summary(evaluate(full, test))
    criterion6_time = sum(run.timing[k] for k in ("data", "stage1", "stage2_full", "stage3"))

    nb = variant_from(stage1, s.model_config(), est_cfg, s.seed)
    run.stage("stage2_nonblind", 2, nb, train, s.train_config(2, non_blind=True))
    s_nb = _summary(evaluate(nb, test, non_blind=True))

    rows = ablation(run, stage1, train, test, s, done={"full": s2})
    by_row = {r["row"]: r for r in rows}
    base = by_row["baseline"]["psnr"]

    report = {
        "settings": {**asdict(s), "channels": list(s.channels), "iterations": {str(k): v for k, v in s.iterations.items()}},
        "stage1": {"ke_start": ke_start, "ke_end": ke_end, "ratio": ke_end / ke_start},
        "stage2": s2,
        "stage3": s3,
        "blind_vs_nonblind": {"non_blind": s_nb["psnr"], "blind": s2["psnr"], "baseline": base,
                              "non_blind_ssim": s_nb["ssim"], "non_blind_images": s_nb["images"]},
        "ablation": rows,
    }
    checks = {
        "stage1_halves_ke": ke_end <= 0.5 * ke_start,
        "stage2_gain_0.5dB": s2["psnr"] - s2["psnr_in"] >= 0.5,
        "stage3_no_degradation": s3["psnr"] >= s2["psnr"] - 0.1,
        "nonblind_ge_blind": s_nb["psnr"] - s2["psnr"] >= -0.1,
        "blind_ge_baseline": s2["psnr"] - base >= -0.1,
        "full_ge_single_flag_variants": all(s2["psnr"] >= by_row[r]["psnr"] - 0.1 for r in SINGLE_FLAG_ROWS),
        "no_residual_not_above_full": by_row["no-residual"]["psnr"] <= s2["psnr"],
    }
    report["checks"] = checks
    (out / "report.json").write_text(json.dumps(report, indent=1) + "\n")
    (out / "ablation.txt").write_text(ablation_table(rows))
    run.timing["criterion6_total"] = round(criterion6_time, 2)
    run.timing["total"] = round(time.perf_counter() - t_total, 2)
    (out / "timing.json").write_text(json.dumps(run.timing, indent=1) + "\n")
    report["timing"] = run.timing
    return report


def ablation_table(rows):
    mark = lambda b: "x" if b else "-"  # noqa: E731
    lines = [f"{'row':<12} {'Enc.':>4} {'Dec.':>4} {'Res.':>4} {'Multiscale':>10}  {'PSNR':>7}  {'SSIM':>6}"]
    for r in rows:
        lines.append(f"{r['row']:<12} {mark(r['enc']):>4} {mark(r['dec']):>4} {mark(r['res']):>4} "
                     f"{mark(r['multiscale']):>10}  {r['psnr']:7.3f}  {r['ssim']:6.4f}")
    return "\n".join(lines) + "\n"


def quick_settings(**kw):
    """Tiny variant for smoke tests."""
    base = dict(images=4, test_count=2, size=32, k=5, max_len=2.0, channels=(4, 8, 8), kernel_channels=4,
                est_width=4, est_levels=2, iterations={1: 3, 2: 3, 3: 2})
    base.update(kw)
    return ToySettings(**base)

