import json

import numpy as np
import pytest

from kpdeblur.backbone import DeblurNet, DeblurNetConfig
from kpdeblur.blur import reblur, synth_kernel_field
from kpdeblur.data import Sample
from kpdeblur.errors import IncompatibleArtifactError, MissingPrerequisiteError, ParameterError
from kpdeblur.experiments import ABLATION_ROWS, SINGLE_FLAG_ROWS, quick_settings, run_toy_experiment
from kpdeblur.numerics import Tensor, backward, no_grad
from kpdeblur.training import (
    Adam,
    EstimatorConfig,
    Models,
    TrainConfig,
    adam_init,
    adam_step,
    cosine_lr,
    evaluate,
    loss_cont,
    loss_freq,
    loss_phase2,
    loss_phase3,
    run_stage,
)

from kpdeblur import oracles

CFG = DeblurNetConfig(channels=(4, 8, 8), enc_blocks=1, dec_blocks=1, k=5, kernel_channels=4)
EST = EstimatorConfig(width=4, levels=2)


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def _samples(n=3, size=32, k=5, seed=0):
    r = np.random.default_rng(seed)
    out = []
    for i in range(n):
        x = np.clip(r.random((3, size, size)) * 0.5 + np.linspace(0, 0.5, size), 0, 1)
        f = synth_kernel_field(size, size, k, seed=seed + i, max_len=2.0)
        with no_grad():
            y = reblur(T(x[None]), f).data[0]
        out.append(Sample(x, y, f, seed + i, f"s{i}"))
    return out


def _params(m):
    return {n: p.data.copy() for n, p in m.named_parameters()}


def _tcfg(stage, **kw):
    return TrainConfig(stage=stage, iterations=kw.pop("iterations", 2), batch_size=2, patch=32, seed=3, **kw)


# -- losses -------------------------------------------------------------------
def test_loss_cont_matches_loop(rng):
    a, b = rng.random((2, 3, 5, 4)), rng.random((2, 3, 5, 4))
    assert abs(loss_cont(T(a), T(b)).item() - oracles.l1_loop(a, b)) < 1e-12
    assert loss_cont(T(a), T(a)).item() == 0.0


def test_loss_freq_matches_numpy_fft(rng):
    a, b = rng.random((1, 3, 6, 7)), rng.random((1, 3, 6, 7))
    d = np.fft.fft2(a - b)
    ref = np.mean(np.abs(d.real) + np.abs(d.imag))
    assert abs(loss_freq(T(a), T(b)).item() - ref) < 1e-10


def test_loss_freq_of_constant_offset():
    # a constant offset c only lands in the DC bin: |c| * H * W / (H * W)
    x = np.zeros((1, 1, 4, 4))
    assert abs(loss_freq(T(x + 0.25), T(x)).item() - 0.25) < 1e-12


def test_phase_losses_compose(rng):
    a, b = rng.random((1, 3, 8, 8)), rng.random((1, 3, 8, 8))
    expect = loss_cont(T(a), T(b)).item() + 0.3 * loss_freq(T(a), T(b)).item()
    assert abs(loss_phase2(T(a), T(b), lam=0.3).item() - expect) < 1e-12


def test_phase3_vanishes_at_the_truth():
    s = _samples(1, size=16)[0]
    x, y = T(s.sharp[None]), T(s.blurry[None])
    assert loss_phase3(x, x, y, s.field, 0.1, 0.1).item() < 1e-12


def test_phase3_penalizes_reblur_error(rng):
    s = _samples(1, size=16)[0]
    x, y = T(s.sharp[None]), T(s.blurry[None])
    xh = T(s.sharp[None] + rng.normal(size=x.shape) * 0.01)
    with_ke = loss_phase3(xh, x, y, s.field, 0.1, 1.0).item()
    without = loss_phase3(xh, x, y, s.field, 0.1, 0.0).item()
    assert with_ke > without


# -- optimizer & schedule -------------------------------------------------------
def test_adam_first_steps_match_hand_computation():
    p = T([1.0])
    state = adam_init([p])
    b1 = b2 = 0.9
    m = v = 0.0
    x = 1.0
    for t, g in enumerate([0.5, -2.0, 1.0], start=1):
        adam_step([p], [np.array([g])], state, lr=0.1, betas=(b1, b2), eps=1e-8)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= 0.1 * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + 1e-8)
        assert abs(p.data[0] - x) < 1e-12


def test_adam_quadratic_bowl():
    target = np.array([3.0, -1.0, 0.5])
    p = T(np.zeros(3), grad=True)
    opt = Adam([p])
    for it in range(400):
        loss = ((p - T(target)) ** 2).sum()
        backward(loss)
        opt.step(cosine_lr(it, 400, 0.1, 1e-4))
        p.grad = None
    assert np.max(np.abs(p.data - target)) < 1e-3


def test_adam_skips_non_finite_gradients():
    p = T([1.0, 2.0])
    opt = Adam([p])
    p.grad = np.array([np.nan, 1.0])
    assert not opt.step(0.1)
    np.testing.assert_array_equal(p.data, [1.0, 2.0])
    assert opt.skipped == 1 and opt.state["t"] == 0


def test_cosine_schedule():
    assert cosine_lr(0, 100, 1e-3, 1e-7) == 1e-3
    assert abs(cosine_lr(100, 100, 1e-3, 1e-7) - 1e-7) < 1e-18
    assert abs(cosine_lr(50, 100, 1e-3, 1e-7) - (1e-3 + 1e-7) / 2) < 1e-15
    vals = [cosine_lr(i, 100) for i in range(101)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ParameterError):
        cosine_lr(101, 100)


def test_train_config_validation():
    assert TrainConfig(stage=2).freeze_ke and not TrainConfig(stage=3).freeze_ke
    with pytest.raises(ParameterError):
        TrainConfig(stage=4)
    with pytest.raises(ParameterError):
        TrainConfig(stage=2, freeze_ke=False)
    with pytest.raises(ParameterError):
        TrainConfig(stage=1, lam=-1)


# -- stages ---------------------------------------------------------------------
def test_stage1_trains_only_the_estimator():
    m = Models.build(CFG, EST, seed=1)
    before = _params(m)
    rep = run_stage(1, m, _samples(), _tcfg(1))
    after = _params(m)
    assert len(rep.records) == 2 and m.stage == 1
    assert any(not np.array_equal(before[n], after[n]) for n in before if n.startswith("estimator."))
    assert all(np.array_equal(before[n], after[n]) for n in before if not n.startswith("estimator."))


def test_stage2_freezes_the_estimator():
    m = Models.build(CFG, EST, seed=1)
    run_stage(1, m, _samples(), _tcfg(1))
    before = _params(m)
    run_stage(2, m, _samples(), _tcfg(2, iterations=3))
    after = _params(m)
    est = [n for n in before if n.startswith("estimator.")]
    assert all(np.array_equal(before[n], after[n]) for n in est)
    assert all(p.grad is None for p in m.estimator.parameters())
    assert any(not np.array_equal(before[n], after[n]) for n in before if n not in est)


def test_stage3_moves_the_estimator():
    m = Models.build(CFG, EST, seed=1)
    s = _samples()
    run_stage(1, m, s, _tcfg(1))
    run_stage(2, m, s, _tcfg(2))
    before = _params(m)
    rep = run_stage(3, m, s, _tcfg(3, iterations=1))
    after = _params(m)
    assert set(rep.records[0]) >= {"loss", "cont", "freq", "ke"}
    assert any(not np.array_equal(before[n], after[n]) for n in before if n.startswith("estimator."))


def test_stage_prerequisites():
    s = _samples()
    with pytest.raises(MissingPrerequisiteError):
        run_stage(2, Models.build(CFG, EST), s, _tcfg(2))
    with pytest.raises(MissingPrerequisiteError):
        run_stage(3, Models.build(CFG, EST), s, _tcfg(3))
    # neither the no-prior baseline nor the non-blind variant consults the estimator
    base = Models.build(DeblurNetConfig(**{**CFG.__dict__, "kernel_prior": False}), EST)
    run_stage(2, base, s, _tcfg(2, iterations=1))
    run_stage(2, Models.build(CFG, EST), s, _tcfg(2, iterations=1, non_blind=True))
    with pytest.raises(ParameterError):
        run_stage(1, Models.build(CFG, EST), s, _tcfg(2))


def test_baseline_has_no_estimator_traffic():
    base = Models.build(DeblurNetConfig(**{**CFG.__dict__, "kernel_prior": False}), EST, seed=2)
    before = _params(base)
    run_stage(2, base, _samples(), _tcfg(2, iterations=2))
    assert base.deblur.fim is None
    assert all(p.grad is None for p in base.estimator.parameters())
    assert all(np.array_equal(before[n], p.data) for n, p in base.named_parameters() if n.startswith("estimator."))


def test_zero_iterations_leave_weights_untouched():
    m = Models.build(CFG, EST, seed=1)
    before = _params(m)
    rep = run_stage(1, m, _samples(), _tcfg(1, iterations=0))
    assert rep.records == []
    assert all(np.array_equal(before[n], p.data) for n, p in m.named_parameters())


def test_training_is_deterministic():
    reps, weights = [], []
    for _ in range(2):
        m = Models.build(CFG, EST, seed=5)
        reps.append(run_stage(1, m, _samples(), _tcfg(1, iterations=3)).to_jsonl(include_time=False))
        weights.append(_params(m))
    assert reps[0] == reps[1]
    assert all(np.array_equal(weights[0][n], weights[1][n]) for n in weights[0])


def test_report_lines_are_json():
    m = Models.build(CFG, EST, seed=1)
    rep = run_stage(1, m, _samples(), _tcfg(1))
    rows = [json.loads(line) for line in rep.to_jsonl().splitlines()]
    assert [r["iter"] for r in rows] == [0, 1]
    assert "wall_time" in rows[0] and "wall_time" not in json.loads(rep.to_jsonl(False).splitlines()[0])


# -- checkpoints ----------------------------------------------------------------
def test_checkpoint_round_trip(tmp_path):
    m = Models.build(CFG, EST, seed=4)
    run_stage(1, m, _samples(), _tcfg(1, iterations=1))
    m.save(tmp_path / "a.ckpt")
    back = Models.load(tmp_path / "a.ckpt")
    assert back.stage == 1 and back.deblur.cfg == CFG and back.est_cfg == EST
    for (n1, p1), (n2, p2) in zip(m.named_parameters(), back.named_parameters()):
        assert n1 == n2 and np.array_equal(p1.data, p2.data)


def test_checkpoint_errors(tmp_path):
    with pytest.raises(MissingPrerequisiteError):
        Models.load(tmp_path / "nope.ckpt")
    Models.build(CFG, EST).save(tmp_path / "a.ckpt")
    side = tmp_path / "a.ckpt.cfg"
    side.write_text(side.read_text().replace("channels=4,8,8", "channels=4,8,16"))
    with pytest.raises(IncompatibleArtifactError):
        Models.load(tmp_path / "a.ckpt")


def test_parameter_names_are_stable():
    names = [n for n, _ in Models.build(CFG, EST).named_parameters()]
    assert names[0].startswith("estimator.")
    assert any(n.startswith("backbone.") for n in names) and any(n.startswith("fim.") for n in names)
    assert len(names) == len(set(names))


# -- evaluation -----------------------------------------------------------------
def test_identity_checkpoint_evaluates_to_input_metrics():
    rows = evaluate(Models.build(CFG, EST, seed=3), _samples(2))
    for r in rows:
        assert r["psnr"] == r["psnr_in"] and r["ssim"] == r["ssim_in"]


def test_evaluate_non_blind_needs_fields():
    s = _samples(1)
    s[0].field = None
    with pytest.raises(MissingPrerequisiteError):
        evaluate(Models.build(CFG, EST), s, non_blind=True)


# -- ablation semantics ---------------------------------------------------------
def test_all_fim_sites_off_equals_baseline_forward(rng):
    # with the prior enabled but no FIM site active, the network must reduce to the
    # baseline exactly, even with non-zero (trained-looking) weights
    kw = {**CFG.__dict__, "zero_init": False}
    off = DeblurNet(DeblurNetConfig(**{**kw, "use_fim_encoder": False, "use_fim_decoder": False})).initialize(9)
    base = DeblurNet(DeblurNetConfig(**{**kw, "kernel_prior": False})).initialize(9)
    y = T(rng.random((1, 3, 16, 16)))
    f = _samples(1, size=16)[0].field
    with no_grad():
        np.testing.assert_array_equal(off(y, f).data, base(y).data)


def test_ablation_rows_map_onto_flags():
    names = [n for n, _ in ABLATION_ROWS]
    assert names == ["baseline", "enc", "dec", "enc+dec", "no-residual", "full"]
    full = dict(kernel_prior=True, use_fim_encoder=True, use_fim_decoder=True, fim_residual=True, multiscale=True)
    for name in SINGLE_FLAG_ROWS:
        flags = dict(ABLATION_ROWS)[name]
        assert sum(full[k] != v for k, v in flags.items()) == 1


def test_quick_toy_experiment_is_reproducible(tmp_path):
    logs = []
    a = run_toy_experiment(tmp_path / "a", quick_settings(), log=logs.append)
    run_toy_experiment(tmp_path / "b", quick_settings(), log=logs.append)
    assert set(a["checks"]) == {"stage1_halves_ke", "stage2_gain_0.5dB", "stage3_no_degradation",
                                "nonblind_ge_blind", "blind_ge_baseline", "full_ge_single_flag_variants",
                                "no_residual_not_above_full"}
    assert [r["row"] for r in a["ablation"]] == [n for n, _ in ABLATION_ROWS]
    assert all(np.isfinite(r["psnr"]) for r in a["ablation"])
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
    for curve in (tmp_path / "a" / "curves").iterdir():
        assert curve.read_bytes() == (tmp_path / "b" / "curves" / curve.name).read_bytes()
