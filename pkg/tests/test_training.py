import copy
import json

import pytest
import torch

from ctfgan.checkpoint import load_bundle
from ctfgan.errors import ContractError, TrainingAborted
from ctfgan.training import (
    LossRecord,
    PhaseState,
    Trainer,
    build_datasets,
    phase_switch_criterion,
    train,
)

from conftest import tiny_config


@pytest.fixture(scope="module")
def datasets():
    return build_datasets(tiny_config())


def _trainer(datasets, run_dir=None, **train_overrides):
    return Trainer(tiny_config(**train_overrides), datasets, run_dir)


def _snapshot(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def _same(a, b):
    return all(torch.equal(a[k], b[k]) for k in a)


def _params_equal(module, snap):
    state = module.state_dict()
    return all(torch.equal(state[k], snap[k]) for k in snap if not k.endswith("num_batches_tracked"))


# phase switch -------------------------------------------------------------

def test_switch_improving_never_fires_before_max():
    hist = [10.0 * 0.9 ** i for i in range(30)]
    for k in range(1, 31):
        assert not phase_switch_criterion(hist[:k], patience=3)
    assert phase_switch_criterion(hist, patience=3, phase_step=100, max_steps=100)


def test_switch_flat_fires_after_patience_evaluations():
    flat = [5.0] * 10
    fired = [phase_switch_criterion(flat[:k], patience=3) for k in range(1, 11)]
    # baseline plus three evaluations without improvement
    assert fired == [False, False, False, True, True, True, True, True, True, True]


def test_switch_improve_then_flat_fires_exactly_at_expiry():
    seq = [10, 8, 6, 5, 5, 4.99, 5.1, 6.0]
    fired = [phase_switch_criterion(seq[:k], patience=3) for k in range(1, len(seq) + 1)]
    assert fired.index(True) == 6
    assert fired == [False] * 6 + [True, True]


def test_switch_threshold_counts_only_real_improvements():
    seq = [100.0, 99.5, 99.1, 99.05]  # each within 1 % of the best
    assert phase_switch_criterion(seq, patience=3)
    # 98.9 beats 100 by 1.1 %, resetting the window
    assert not phase_switch_criterion([100.0, 99.5, 99.1, 98.9], patience=3)
    assert not phase_switch_criterion([5.0] * 3, patience=3)
    assert phase_switch_criterion([], patience=3, phase_step=10, max_steps=10)


def test_phase_state_is_monotone():
    st = PhaseState()
    st.global_step = 4
    st.enter_phase2()
    assert (st.phase, st.phase_step, st.switched_at) == (2, 0, 4)
    with pytest.raises(ContractError):
        st.enter_phase2()


def test_loss_record_stream_form():
    rec = LossRecord(3, 1, 3, 1.0, -0.5, 0.2, wall_time=1.5)
    assert "wall_time" not in rec.to_record()
    assert rec.is_finite() and not LossRecord(1, 1, 1, float("nan"), 0, 0).is_finite()


# steps --------------------------------------------------------------------

def test_phase1_step_updates_d_and_glh_only(datasets):
    tr = _trainer(datasets)
    d0, g0, a0, e0 = (_snapshot(m) for m in (tr.model.dlh, tr.model.glh, tr.model.ga, tr.model.extractor))
    rec = tr.phase1_step(tr._next_batches(1))
    assert rec.phase == 1 and rec.step == 1 and rec.is_finite()
    assert not _params_equal(tr.model.dlh, d0)
    assert not _params_equal(tr.model.glh, g0)
    assert _same(_snapshot(tr.model.ga), a0) and _same(_snapshot(tr.model.extractor), e0)


def test_zero_learning_rate_leaves_parameters_bit_identical(datasets):
    tr = _trainer(datasets)
    for opt in (tr.opt_d, tr.opt_glh, tr.opt_ga):
        for group in opt.param_groups:
            group["lr"] = 0.0
    params = {n: p.detach().clone() for n, p in tr.model.named_parameters()}
    tr.phase1_step(tr._next_batches(1))
    tr.enter_phase2()
    tr.phase2_step(tr._next_batches(1))
    for n, p in tr.model.named_parameters():
        assert torch.equal(p, params[n]), n


def test_d_steps_per_g_step_bookkeeping(datasets):
    tr = _trainer(datasets, d_steps_per_g_step=5)
    tr.phase1_step(tr._next_batches(5))
    tr.phase1_step(tr._next_batches(5))
    assert (tr.state.d_updates, tr.state.g_updates, tr.state.batches_drawn) == (10, 2, 10)
    with pytest.raises(ContractError):
        tr.phase1_step(tr._next_batches(2))


def test_phase2_freezes_glh_and_trains_ga(datasets):
    tr = _trainer(datasets)
    tr.enter_phase2()
    glh0 = _snapshot(tr.model.glh)
    ga0, d0 = _snapshot(tr.model.ga), _snapshot(tr.model.dlh)
    for _ in range(10):
        rec = tr.phase2_step(tr._next_batches(1))
        assert rec.phase == 2
    assert _same(_snapshot(tr.model.glh), glh0)
    assert not _params_equal(tr.model.ga, ga0)
    assert not _params_equal(tr.model.dlh, d0)
    with pytest.raises(ContractError):
        tr.phase1_step(tr._next_batches(1))


def test_phase2_unfrozen_moves_glh(datasets):
    tr = _trainer(datasets, freeze_glh=False)
    tr.enter_phase2()
    glh0 = _snapshot(tr.model.glh)
    tr.phase2_step(tr._next_batches(1))
    assert not _params_equal(tr.model.glh, glh0)


def test_phase2_step_gradients_reach_ga_and_d(datasets):
    tr = _trainer(datasets)
    tr.enter_phase2()
    tr.phase2_step(tr._next_batches(1))
    assert all(p.grad is not None and p.grad.norm() > 0 for p in tr.model.ga.parameters())
    assert all(p.grad is not None and p.grad.norm() > 0 for p in tr.model.dlh.parameters())


def test_ctf_ablation_runs(datasets):
    tr = _trainer(datasets, ctf_ablation=True)
    tr.enter_phase2()
    assert tr.phase2_step(tr._next_batches(1)).is_finite()
    assert tr.generate(4).shape == (4, 3, 16, 16)


def test_non_finite_loss_aborts_with_record(datasets, tmp_path):
    tr = _trainer(datasets, run_dir=tmp_path)
    with torch.no_grad():
        tr.model.glh.head.weight.fill_(float("nan"))
    with pytest.raises(TrainingAborted) as info:
        tr.run()
    assert info.value.record["kind"] == "abort"
    last = json.loads((tmp_path / "metrics.jsonl").read_text().splitlines()[-1])
    assert last["kind"] == "abort"


# runs and checkpoints -----------------------------------------------------

def test_zero_steps_emits_initial_checkpoint_only(datasets, tmp_path):
    cfg = tiny_config(phase1_max_steps=0, phase2_max_steps=0)
    tr = Trainer(cfg, datasets, tmp_path)
    saved = tr.run()
    assert [p.name for p in saved] == ["step-000000"]
    manifest, _ = load_bundle(saved[0])
    assert (manifest["step"], manifest["phase"]) == (0, 1)


def test_checkpoint_round_trip_is_bit_exact(datasets, tmp_path):
    tr = _trainer(datasets)
    tr.phase1_step(tr._next_batches(1))
    path = tr.save_checkpoint(tmp_path / "ck")
    back = Trainer.from_checkpoint(path, datasets)
    a, b = tr.state_dict(), back.state_dict()
    for key in ("model", "classifier"):
        assert a[key].keys() == b[key].keys()
        assert all(torch.equal(a[key][k], b[key][k]) for k in a[key])
    for key in ("opt_d", "opt_glh", "opt_ga"):
        for pid, moments in a[key]["state"].items():
            for name, t in moments.items():
                assert torch.equal(t, b[key]["state"][pid][name])
    assert a["phase_state"] == b["phase_state"]
    assert torch.equal(a["gen_state"], b["gen_state"]) and a["np_rng_state"] == b["np_rng_state"]


def test_runs_are_deterministic_and_resume_matches(datasets, tmp_path):
    cfg = tiny_config(checkpoint_every=2)
    first = train(cfg, datasets, tmp_path / "a")
    second = train(copy.deepcopy(cfg), datasets, tmp_path / "b")
    stream_a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    assert stream_a == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert first.report == second.report

    # continue run "a" from its step-2 checkpoint; the stream is truncated and regrown
    resumed = train(cfg, datasets, tmp_path / "a", resume_from=tmp_path / "a" / "checkpoints" / "step-000002")
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == stream_a
    assert resumed.report == first.report
    final_a = load_bundle(first.checkpoints[-1])[1]["model"]
    final_r = load_bundle(resumed.checkpoints[-1])[1]["model"]
    assert all(torch.equal(final_a[k], final_r[k]) for k in final_a)


def test_report_appended_to_stream(datasets, tmp_path):
    art = train(tiny_config(), datasets, tmp_path)
    lines = [json.loads(l) for l in art.metrics_path.read_text().splitlines()]
    kinds = [l["kind"] for l in lines]
    assert kinds[-1] == "eval" and "phase_switch" in kinds and "phase1_metric" in kinds
    assert json.loads((tmp_path / "report.json").read_text()) == lines[-1]
    assert all(l["phase"] == 1 for l in lines[: kinds.index("phase_switch")])
