import json
import os
import signal

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from drvc import engine
from drvc.config import ABLATABLE_TERMS, TrainingConfig
from drvc.engine import (
    Trainer,
    convert,
    first_conversion,
    load_checkpoint,
    lr_schedule,
    model_from_checkpoint,
    run_training,
    second_conversion,
    training_step,
)
from drvc.errors import ConfigError, ContractError, TrainingDivergenceError
from drvc.losses import TERMS, cycle_loss
from drvc.model import grl_lambda_schedule

from conftest import small_app_config
from harness import (
    LinearToy,
    assert_grad_close,
    break_second_exchange,
    grad_setup,
    gradient_probe,
    linear_toy_batch,
    only,
    scalar_loss,
)

# ----------------------------------------------------------------------------- linear toy


def test_linear_toy_cycle_reconstructs_exactly():
    a, b = linear_toy_batch()
    toy = LinearToy()
    batch = second_conversion(first_conversion(a, b, toy), toy)
    torch.testing.assert_close(batch.a_hat, a, rtol=0, atol=1e-14)
    torch.testing.assert_close(batch.b_hat, b, rtol=0, atol=1e-14)
    assert float(cycle_loss(a, batch.a_hat, b, batch.b_hat)) < 1e-14
    # the first exchange really swapped the styles
    torch.testing.assert_close(batch.a_tilde[..., 3:], b[..., 3:], rtol=0, atol=1e-14)
    assert torch.equal(batch.a_tilde[..., :3], a[..., :3])


def test_linear_toy_same_mel_twice_is_self_reconstruction():
    a, _ = linear_toy_batch(1)
    batch = first_conversion(a, a, LinearToy())
    torch.testing.assert_close(batch.a_tilde, a, rtol=0, atol=1e-14)


def test_linear_toy_bug_harness_detects_wiring_error(monkeypatch):
    a, b = linear_toy_batch()
    break_second_exchange(monkeypatch)
    toy = LinearToy()
    batch = second_conversion(first_conversion(a, b, toy), toy)
    assert float(cycle_loss(a, batch.a_hat, b, batch.b_hat)) > 0.1


def test_conversion_shape_mismatch():
    with pytest.raises(ContractError):
        first_conversion(torch.zeros(1, 4, 5), torch.zeros(1, 5, 5), LinearToy())


# ----------------------------------------------------------------------------- lr schedule


def test_lr_schedule_values(oracle_values):
    cfg = TrainingConfig()
    assert lr_schedule(0, cfg) == 1e-4
    assert lr_schedule(1, cfg) == pytest.approx(9.5e-5, rel=1e-12)
    assert lr_schedule(10, cfg) == pytest.approx(oracle_values["lr_epoch10"], rel=1e-12)
    assert lr_schedule(10_000, cfg) == cfg.lr_floor
    with pytest.raises(ContractError):
        lr_schedule(-1, cfg)


def test_lr_schedule_multiplicative_option():
    cfg = TrainingConfig(lr_decay_mode="multiplicative", lr_decay_per_epoch=0.1)
    assert lr_schedule(2, cfg) == pytest.approx(1e-4 * 0.81)


@given(st.integers(0, 100), st.integers(0, 100), st.sampled_from(["subtractive", "multiplicative"]),
       st.floats(1e-6, 1e-2))
@settings(max_examples=100, deadline=None)
def test_lr_schedule_non_increasing_and_floored(e1, e2, mode, lr0):
    cfg = TrainingConfig(lr_decay_mode=mode, lr_initial=lr0,
                         lr_decay_per_epoch=5e-6 if mode == "subtractive" else 0.05)
    lo, hi = sorted((e1, e2))
    assert lr_schedule(hi, cfg) <= lr_schedule(lo, cfg)
    assert lr_schedule(hi, cfg) >= cfg.lr_floor
    if mode == "subtractive":
        assert lr_schedule(e1, cfg) == pytest.approx(oracles.lr_subtractive(lr0, e1), rel=1e-12)


def test_training_config_validation():
    with pytest.raises(ConfigError):
        TrainingConfig(ablate=["style"]).validate()
    with pytest.raises(ConfigError):
        TrainingConfig(same_loss_stage="third").validate()
    with pytest.raises(ConfigError):
        TrainingConfig(same_loss_gradient="none").validate()


# ----------------------------------------------------------------------------- gradients

def test_gradient_model_is_small():
    model, *_ = grad_setup()
    assert sum(p.numel() for p in model.parameters()) <= 1000


@pytest.mark.parametrize("resolvable", [True, False])
@pytest.mark.parametrize("term", ["cycle", "identity", "same_content", "same_style", "domain"])
def test_single_loss_gradients_match_finite_differences(term, resolvable):
    probes, loss, eps = gradient_probe(term, resolvable=resolvable)
    assert any(abs(a) > 1e-6 for a, _, _ in probes)
    for analytic, numeric, _ in probes:
        assert_grad_close(analytic, numeric, loss, eps)


@pytest.mark.parametrize("mode", ["full", "stop_target"])
@pytest.mark.parametrize("term", ["same_content", "same_style"])
def test_same_loss_other_gradient_modes(term, mode):
    probes, loss, eps = gradient_probe(term, same_mode=mode, seed=3, resolvable=True)
    for analytic, numeric, _ in probes:
        assert_grad_close(analytic, numeric, loss, eps)


def test_adversarial_gradient_is_reversed_upstream_of_the_discriminator():
    lam = 0.5
    probes, loss, eps = gradient_probe("adversarial", lam=lam, n_probes=40, seed=2)
    assert {c for *_, c in probes} >= {"voice_discriminator", "generator"}
    for analytic, numeric, comp in probes:
        expected = numeric if comp == "voice_discriminator" else -lam * numeric
        assert_grad_close(analytic, expected, loss, eps)


def test_content_classifier_gradient_is_reversed():
    lam = 0.25
    probes, loss, eps = gradient_probe("domain", lam=lam, n_probes=40, seed=4, grl_placement="both")
    assert "content_encoder" in {c for *_, c in probes}
    for analytic, numeric, comp in probes:
        expected = -lam * numeric if comp == "content_encoder" else numeric
        assert_grad_close(analytic, expected, loss, eps)


def test_training_step_moves_params_along_single_loss_gradient():
    model, a, b, la, lb = grad_setup(5)
    config = only("cycle")
    before = [p.detach().clone() for p in model.parameters()]
    model.zero_grad()
    scalar_loss(model, a, b, la, lb, config, 0.0).backward()
    grads = [p.grad.clone() if p.grad is not None else torch.zeros_like(p) for p in model.parameters()]
    opt = torch.optim.SGD(model.parameters(), lr=1e-3)
    report = training_step(a, b, la, lb, model, opt, config, k=0.0)
    assert report.cycle is not None and report.identity is None
    for p0, p1, g in zip(before, model.parameters(), grads):
        torch.testing.assert_close(p1.detach() - p0, -1e-3 * g, rtol=1e-9, atol=1e-15)


def test_ablation_removes_term_from_report():
    model, a, b, la, lb = grad_setup()
    opt = torch.optim.SGD(model.parameters(), lr=0.0)
    for term in ABLATABLE_TERMS:
        report = training_step(a, b, la, lb, model, opt, TrainingConfig(ablate=[term]), k=0.3)
        key = term.replace("-", "_")
        assert getattr(report, key) is None and not report.enabled[key]
        assert all(getattr(report, t) is not None for t in TERMS if t != key)


def test_nan_parameter_raises_divergence():
    model, a, b, la, lb = grad_setup()
    with torch.no_grad():
        model.generator.net.proj.bias.fill_(float("nan"))
    opt = torch.optim.SGD(model.parameters(), lr=0.0)
    with pytest.raises(TrainingDivergenceError):
        training_step(a, b, la, lb, model, opt, TrainingConfig(), k=0.0)


# ----------------------------------------------------------------------------- trainer


@pytest.fixture
def small_cfg(tmp_path):
    return small_app_config(tmp_path / "work", batch_size=4, steps_per_epoch=3, epochs=2)


def test_grl_lambda_fed_to_step_follows_schedule(small_cfg, toy_manifest, toy_features, monkeypatch):
    seen = []
    real = engine.compute_terms

    def spy(batch, la, lb, model, config, grl_lambda):
        seen.append(grl_lambda)
        return real(batch, la, lb, model, config, grl_lambda)

    monkeypatch.setattr(engine, "compute_terms", spy)
    tr = Trainer(small_cfg, toy_manifest, toy_features)
    records = [tr.step()[1] for _ in range(tr.total_steps)]
    assert seen == [grl_lambda_schedule(i / tr.total_steps) for i in range(tr.total_steps)]
    assert [r["lambda_grl"] for r in records] == seen
    assert [r["lr"] for r in records] == [1e-4] * 3 + [9.5e-5] * 3


def test_epoch_checkpoints_and_log(small_cfg, toy_manifest, toy_features, tmp_path):
    run_training(toy_manifest, small_cfg, toy_features, tmp_path / "work")
    ckpts = tmp_path / "work" / "checkpoints"
    assert (ckpts / "epoch_0001.pt").is_file() and (ckpts / "epoch_0002.pt").is_file()
    assert (ckpts / "latest.pt").is_file()
    lines = (tmp_path / "work" / "train_log.jsonl").read_text().splitlines()
    assert [json.loads(line)["step"] for line in lines] == list(range(1, 7))
    state = load_checkpoint(ckpts / "latest.pt")
    assert state["global_step"] == 6 and state["epoch"] == 2


def test_zero_epochs_writes_initial_checkpoint(small_cfg, toy_manifest, toy_features, tmp_path):
    small_cfg.training.epochs = 0
    state = run_training(toy_manifest, small_cfg, toy_features, tmp_path / "work")
    assert state["global_step"] == 0
    assert (tmp_path / "work" / "checkpoints" / "epoch_0000.pt").is_file()


def test_checkpoint_roundtrip_gives_identical_next_step(small_cfg, toy_manifest, toy_features, tmp_path):
    tr = Trainer(small_cfg, toy_manifest, toy_features)
    tr.step()
    tr.save(tmp_path / "mid.pt")
    direct = tr.step()[0]
    resumed = Trainer.from_checkpoint(tmp_path / "mid.pt", toy_manifest, toy_features)
    assert resumed.step()[0] == direct


def test_interrupt_checkpoints_current_step(small_cfg, toy_manifest, toy_features, tmp_path):
    small_cfg.training.steps_per_epoch = 50

    def interrupt(trainer, report):
        if trainer.global_step == 4:
            os.kill(os.getpid(), signal.SIGINT)

    before = signal.getsignal(signal.SIGINT)
    tr = Trainer(small_cfg, toy_manifest, toy_features)
    tr.run(tmp_path / "ck", on_step=interrupt)
    state = load_checkpoint(tmp_path / "ck" / "latest.pt")
    assert state["global_step"] == 4
    again = Trainer.from_checkpoint(tmp_path / "ck" / "latest.pt", toy_manifest, toy_features)
    assert again.global_step == 4
    assert signal.getsignal(signal.SIGINT) is before


def test_divergence_keeps_last_good_checkpoint(small_cfg, toy_manifest, toy_features, tmp_path):
    tr = Trainer(small_cfg, toy_manifest, toy_features)

    def poison(trainer, report):
        if trainer.global_step == 4:  # the epoch-1 checkpoint is already written
            with torch.no_grad():
                trainer.model.generator.net.proj.weight.fill_(float("nan"))

    with pytest.raises(TrainingDivergenceError):
        tr.run(tmp_path / "ck", on_step=poison)
    assert (tmp_path / "ck" / "epoch_0001.pt").is_file()
    assert not (tmp_path / "ck" / "latest.pt").exists()
    model, _, _ = model_from_checkpoint(load_checkpoint(tmp_path / "ck" / "epoch_0001.pt"))
    assert all(torch.isfinite(p).all() for p in model.parameters())


def test_resume_refuses_other_speakers(small_cfg, toy_manifest, toy_features, tmp_path):
    tr = Trainer(small_cfg, toy_manifest, toy_features)
    tr.save(tmp_path / "c.pt")
    state = load_checkpoint(tmp_path / "c.pt")
    state["speakers"] = ["x", "y"]
    with pytest.raises(ContractError):
        tr.load_state_dict(state)


# ----------------------------------------------------------------------------- convert


def test_convert_contract(small_cfg, toy_manifest, toy_features):
    tr = Trainer(small_cfg, toy_manifest, toy_features)
    recs = toy_manifest.split_records("eval")
    src, tgt = toy_features[recs[0].audio_path], toy_features[recs[-1].audio_path]
    out1 = convert(src, tgt, tr.model, tr.stats)
    out2 = convert(src, tgt, tr.model, tr.stats)
    assert out1.frames.shape == src.frames.shape
    np.testing.assert_array_equal(out1.frames, out2.frames)
    with torch.no_grad():
        next(tr.model.parameters()).view(-1)[0] = float("nan")
    with pytest.raises(ContractError):
        convert(src, tgt, tr.model, tr.stats)


def test_checkpoint_version_check(small_cfg, toy_manifest, toy_features, tmp_path):
    tr = Trainer(small_cfg, toy_manifest, toy_features)
    state = tr.state_dict()
    state["version"] = 999
    engine.save_checkpoint(tmp_path / "v.pt", state)
    with pytest.raises(ContractError):
        load_checkpoint(tmp_path / "v.pt")
