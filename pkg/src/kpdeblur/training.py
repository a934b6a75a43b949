"""Losses, Adam, the cosine schedule and the three training stages.

Stage 1 fits the kernel estimator with the reblur loss against the sharp
image. Stage 2 freezes it and trains the deblurring network (spatial plus
frequency L1). Stage 3 trains both, adding a reblur term on the restored image.
"""

import json
import logging
import math
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from kpdeblur.backbone import DeblurNet, DeblurNetConfig
from kpdeblur.blur import PixelKernelField
from kpdeblur.data import sample_patch
from kpdeblur.errors import IncompatibleArtifactError, MissingPrerequisiteError, ParameterError, ParseError
from kpdeblur.kernel_estimator import KernelEstimatorNet, estimate_kernels, l1, loss_ke
from kpdeblur.metrics import psnr, ssim
from kpdeblur.numerics import Tensor, as_tensor, backward, fft2, no_grad, tabs
from kpdeblur.numerics.io import load_archive, save_archive

log = logging.getLogger(__name__)

# desk-scale defaults; the original schedule ran 400k / (unstated) / 200k iterations
DEFAULT_ITERATIONS = {1: 500, 2: 1000, 3: 300}


# -- losses -------------------------------------------------------------------
def loss_cont(xh, x):
    return l1(as_tensor(xh), as_tensor(x))


def loss_freq(xh, x):
    """Mean over bins of ``|dRe| + |dIm|`` between the two spectra."""
    xh, x = as_tensor(xh), as_tensor(x)
    if xh.shape != x.shape:
        raise ParameterError(f"shape mismatch: {xh.shape} vs {x.shape}")
    d = fft2(xh - x)
    return (tabs(d.real) + tabs(d.imag)).mean()


def loss_phase2(xh, x, lam=0.1):
    return loss_cont(xh, x) + lam * loss_freq(xh, x)


def loss_phase3(xh, x, y, field, lam1=0.1, lam2=0.1):
    """Phase-2 loss plus ``lam2`` times the reblur error of the *restored* image."""
    return loss_phase2(xh, x, lam1) + lam2 * loss_ke(field, xh, y)


# -- optimizer ----------------------------------------------------------------
def adam_init(params):
    return {"t": 0, "m": [np.zeros_like(p.data) for p in params], "v": [np.zeros_like(p.data) for p in params]}


def adam_step(params, grads, state, lr, betas=(0.9, 0.9), eps=1e-8):
    """One Adam update in place. Returns False (and leaves everything untouched)
    if any gradient is non-finite."""
    for g in grads:
        if g is not None and not np.all(np.isfinite(g)):
            log.warning("non-finite gradient at step %d; update skipped", state["t"] + 1)
            return False
    b1, b2 = betas
    state["t"] += 1
    t = state["t"]
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        m *= b1
        v *= b2
        if g is not None:
            m += (1 - b1) * g
            v += (1 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return True


class Adam:
    def __init__(self, params, betas=(0.9, 0.9), eps=1e-8):
        self.params = list(params)
        self.betas = betas
        self.eps = eps
        self.state = adam_init(self.params)
        self.skipped = 0

    def step(self, lr):
        ok = adam_step(self.params, [p.grad for p in self.params], self.state, lr, self.betas, self.eps)
        self.skipped += not ok
        return ok


def cosine_lr(it, total, base_lr=1e-3, min_lr=1e-7):
    if total <= 0:
        return base_lr
    if not 0 <= it <= total:
        raise ParameterError(f"iteration {it} outside [0, {total}]")
    return min_lr + 0.5 * (base_lr - min_lr) * (1 + math.cos(math.pi * it / total))


# -- configuration ------------------------------------------------------------
@dataclass
class TrainConfig:
    stage: int = 1
    iterations: int = None
    batch_size: int = 2
    lam: float = 0.1
    lam1: float = 0.1
    lam2: float = 0.1
    base_lr: float = 1e-3
    min_lr: float = 1e-7
    seed: int = 0
    patch: int = 64
    freeze_ke: bool = None
    flips: bool = True
    non_blind: bool = False

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ParameterError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.iterations is None:
            self.iterations = DEFAULT_ITERATIONS[self.stage]
        if self.freeze_ke is None:
            self.freeze_ke = self.stage == 2
        if self.stage == 2 and not self.freeze_ke:
            raise ParameterError("stage 2 trains with the kernel estimator frozen")
        if self.stage == 3 and self.freeze_ke:
            raise ParameterError("stage 3 fine-tunes the kernel estimator; freeze_ke must be false")
        for name in ("lam", "lam1", "lam2", "base_lr", "min_lr"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0")
        if self.iterations < 0 or self.batch_size < 1:
            raise ParameterError("iterations must be >= 0 and batch_size >= 1")


# -- models & checkpoints -----------------------------------------------------
@dataclass
class EstimatorConfig:
    width: int = 16
    levels: int = 3


@dataclass
class Models:
    deblur: DeblurNet
    estimator: KernelEstimatorNet
    est_cfg: EstimatorConfig = field(default_factory=EstimatorConfig)
    stage: int = 0

    @classmethod
    def build(cls, cfg=None, est_cfg=None, seed=0):
        cfg = cfg or DeblurNetConfig()
        est_cfg = est_cfg or EstimatorConfig()
        deblur = DeblurNet(cfg).initialize(seed)
        est = KernelEstimatorNet(k=cfg.k, in_channels=cfg.in_channels, width=est_cfg.width,
                                 levels=est_cfg.levels).initialize(seed, prefix="estimator.")
        return cls(deblur, est, est_cfg)

    @property
    def k(self):
        return self.deblur.cfg.k

    def named_parameters(self):
        yield from self.estimator.named_parameters("estimator.")
        yield from self.deblur.named_parameters()

    def config_text(self):
        est = "".join(f"estimator.{k}={v}\n" for k, v in asdict(self.est_cfg).items())
        model = "".join(f"model.{line}\n" for line in self.deblur.cfg.to_text().splitlines())
        return model + est + f"stage={self.stage}\n"

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_archive(path, OrderedDict((n, p.data) for n, p in self.named_parameters()))
        path.with_name(path.name + ".cfg").write_text(self.config_text())

    @classmethod
    def load(cls, path):
        path = Path(path)
        side = path.with_name(path.name + ".cfg")
        if not path.exists() or not side.exists():
            raise MissingPrerequisiteError(f"checkpoint {path} (with {side.name}) not found")
        model_lines, est_kw, stage = [], {}, 0
        for line in side.read_text().splitlines():
            if not line.strip():
                continue
            key, _, val = line.partition("=")
            if key.startswith("model."):
                model_lines.append(f"{key[6:]}={val}")
            elif key.startswith("estimator."):
                est_kw[key[10:]] = int(val)
            elif key == "stage":
                stage = int(val)
            else:
                raise ParseError(f"unknown checkpoint config key {key!r}")
        models = cls.build(DeblurNetConfig.from_text("\n".join(model_lines)), EstimatorConfig(**est_kw))
        state = load_archive(path)
        own = dict(models.named_parameters())
        if set(own) != set(state):
            raise IncompatibleArtifactError(f"checkpoint {path} does not match its config")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise IncompatibleArtifactError(f"shape mismatch for {name}")
            p.data = np.ascontiguousarray(state[name], dtype=p.dtype)
        models.stage = stage
        return models


# -- reports ------------------------------------------------------------------
@dataclass
class TrainReport:
    stage: int
    records: list = field(default_factory=list)
    skipped_steps: int = 0

    def add(self, it, lr, losses, wall):
        rec = {"iter": it, "lr": lr}
        rec.update({k: float(v) for k, v in losses.items()})
        rec["wall_time"] = round(wall, 3)
        self.records.append(rec)

    def curve(self, key="loss"):
        return [r[key] for r in self.records]

    def to_jsonl(self, include_time=True):
        drop = () if include_time else ("wall_time",)
        return "".join(json.dumps({k: v for k, v in r.items() if k not in drop}) + "\n" for r in self.records)

    def write(self, path, include_time=True):
        Path(path).write_text(self.to_jsonl(include_time))


# -- kernel fields for a batch ------------------------------------------------
def _stack_fields(fields_):
    return PixelKernelField(Tensor(np.concatenate([f.numpy() for f in fields_]), dtype=fields_[0].weights.dtype))


class FrozenKernelCache:
    """Estimator outputs for (sample, crop, flips) keys, computed one image at a time.

    Per-image evaluation keeps each entry independent of batch composition.
    """

    def __init__(self, estimator, capacity=256):
        self.estimator = estimator
        self.capacity = capacity
        self.store = OrderedDict()

    def get(self, key, blurry):
        hit = self.store.get(key)
        if hit is None:
            with no_grad():
                hit = estimate_kernels(self.estimator, Tensor(blurry[None])).numpy()
            self.store[key] = hit
            if len(self.store) > self.capacity:
                self.store.popitem(last=False)
        return hit


def _gt_fields(patches):
    if any(p.field is None for p in patches):
        raise MissingPrerequisiteError("non-blind training needs ground-truth kernel fields in the manifest")
    return _stack_fields([p.field for p in patches])


def check_prerequisites(stage, models, cfg):
    uses_estimator = models.deblur.cfg.kernel_prior and not cfg.non_blind
    if stage == 2 and uses_estimator and models.stage < 1:
        raise MissingPrerequisiteError("stage 2 needs a stage-1 kernel estimator checkpoint")
    if stage == 3 and models.stage < 2:
        raise MissingPrerequisiteError("stage 3 needs a stage-2 checkpoint")


def run_stage(stage, models, samples, cfg, checkpoint_dir=None, checkpoint_every=0, progress=None):
    """Train one stage in place and return its loss curve."""
    if cfg.stage != stage:
        raise ParameterError(f"config is for stage {cfg.stage}, asked to run stage {stage}")
    if not samples:
        raise ParameterError("no training samples")
    check_prerequisites(stage, models, cfg)
    prior = models.deblur.cfg.kernel_prior
    est, net = models.estimator, models.deblur
    if stage == 1:
        params = est.parameters()
    elif stage == 2:
        params = net.parameters()
    else:
        params = est.parameters() + net.parameters()
    for p in est.parameters() + net.parameters():
        p.grad = None
    opt = Adam(params)  # fresh moments every stage
    rng = np.random.default_rng([cfg.seed, stage])
    cache = FrozenKernelCache(est) if stage == 2 and prior and not cfg.non_blind else None
    report = TrainReport(stage)
    t0 = time.perf_counter()
    n = cfg.iterations

    for it in range(n):
        lr = cosine_lr(it, n, cfg.base_lr, cfg.min_lr)
        idx = rng.integers(0, len(samples), cfg.batch_size)
        drawn = [sample_patch(samples[i], cfg.patch, rng, cfg.flips) for i in idx]
        patches = [d[0] for d in drawn]
        x = Tensor(np.stack([p.sharp for p in patches]))
        y = Tensor(np.stack([p.blurry for p in patches]))

        if stage == 1:
            loss = loss_ke(estimate_kernels(est, y), x, y)
            losses = {"loss": loss.item(), "ke": loss.item()}
        elif stage == 2:
            if not prior:
                fld = None
            elif cfg.non_blind:
                fld = _gt_fields(patches)
            else:
                fld = PixelKernelField(Tensor(np.concatenate(
                    [cache.get((int(i),) + d[1], p.blurry) for i, d, p in zip(idx, drawn, patches)])))
            xh = net(y, fld)
            cont, freq = loss_cont(xh, x), loss_freq(xh, x)
            loss = cont + cfg.lam * freq
            losses = {"loss": loss.item(), "cont": cont.item(), "freq": freq.item()}
        else:
            b = estimate_kernels(est, y)
            fld = (_gt_fields(patches) if cfg.non_blind else b) if prior else None
            xh = net(y, fld)
            cont, freq = loss_cont(xh, x), loss_freq(xh, x)
            ke = loss_ke(b, xh, y)
            loss = cont + cfg.lam1 * freq + cfg.lam2 * ke
            losses = {"loss": loss.item(), "cont": cont.item(), "freq": freq.item(), "ke": ke.item()}

        backward(loss)
        opt.step(lr)
        for p in params:
            p.grad = None
        report.add(it, lr, losses, time.perf_counter() - t0)
        if progress is not None:
            progress(report.records[-1])
        if checkpoint_dir and checkpoint_every and (it + 1) % checkpoint_every == 0:
            models.save(Path(checkpoint_dir) / f"stage{stage}_iter{it + 1:06d}.ckpt")

    report.skipped_steps = opt.skipped
    models.stage = max(models.stage, stage)
    return report


# -- evaluation ---------------------------------------------------------------
def restore(models, blurry, non_blind=False, gt_field=None):
    """Deblur one ``[C,H,W]`` image; returns (restored, blurry-as-computed)."""
    y = Tensor(np.asarray(blurry)[None])
    with no_grad():
        fld = None
        if models.deblur.cfg.kernel_prior:
            if non_blind:
                if gt_field is None:
                    raise MissingPrerequisiteError("non-blind restoration needs a ground-truth kernel field")
                if gt_field.k != models.k:
                    raise IncompatibleArtifactError(f"kernel field k={gt_field.k}, model expects k={models.k}")
                fld = gt_field
            else:
                fld = estimate_kernels(models.estimator, y)
        xh = models.deblur(y, fld)
    return np.clip(xh.data[0].astype(np.float64), 0.0, 1.0), y.data[0].astype(np.float64)


def evaluate(models, samples, non_blind=False):
    """Per-image PSNR/SSIM of the restored and the blurry input against the sharp image."""
    rows = []
    for s in samples:
        xh, y = restore(models, s.blurry, non_blind, s.field)
        rows.append({"name": s.name, "psnr": psnr(xh, s.sharp), "ssim": ssim(xh, s.sharp),
                     "psnr_in": psnr(y, s.sharp), "ssim_in": ssim(y, s.sharp)})
    return rows


def mean_ke_loss(models, samples):
    """Reblur loss of the current estimator averaged over whole images."""
    vals = []
    with no_grad():
        for s in samples:
            y = Tensor(s.blurry[None])
            vals.append(loss_ke(estimate_kernels(models.estimator, y), Tensor(s.sharp[None]), y).item())
    return float(np.mean(vals))
