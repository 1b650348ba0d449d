import pytest

from ctfgan.config import parse_config

ACCEPTANCE_KEY = pytest.StashKey[list]()


def tiny_config(**train):
    """A config small enough for per-step unit tests (4x4 LQ -> 16x16 HQ)."""
    doc = {
        "model": {
            "lq_resolution": 4, "num_blocks": 2, "glh_channels": [8, 8, 8],
            "ga_channels": [16, 8, 8], "d_channels": 8, "d_extra_blocks": 0,
            "glh_noise_dim": 4, "ga_noise_dim": 8, "embed_dim": 4,
        },
        "train": {
            "batch_size": 8, "d_steps_per_g_step": 1, "phase1_max_steps": 3,
            "phase2_max_steps": 3, "eval_every": 2, "switch_eval_samples": 16,
            "checkpoint_every": 0, **train,
        },
        "data": {"toy": {"hq_per_class": 12, "lq_per_class": 12, "eval_per_class": 12}},
        "eval": {"num_samples": 24, "is_splits": 2, "classifier_epochs": 1},
    }
    return parse_config(doc)


@pytest.fixture
def acceptance(request):
    """Record one criterion result for the end-of-session summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def record(number, name, passed, detail=""):
        lines.append((number, name, bool(passed), detail))
        print(f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {name}  {detail}")

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(lines):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {name}  {detail}")
