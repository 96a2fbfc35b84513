import pytest

from cfflow.config import RunConfig

_CRITERION_LINES: list[str] = []


def record_criterion(line: str) -> None:
    """Keep an acceptance verdict line for the end-of-run summary."""
    _CRITERION_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if _CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERION_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def tiny_config(tmp_path=None, **sections) -> RunConfig:
    """Small, fast run settings shared by the orchestration tests."""
    base = {
        "schedule": {"phase1_steps": 6, "phase2_steps": 8},
        "train": {"hidden": (8, 8), "batch_size": 32},
        "eval": {"n_samples": 40},
        "bench": {"repetitions": 30, "warmup": 2},
    }
    for name, values in sections.items():
        base.setdefault(name, {}).update(values)
    cfg = RunConfig().with_overrides(**base)
    if tmp_path is not None:
        cfg = cfg.with_overrides(out=str(tmp_path))
    return cfg


@pytest.fixture
def tiny():
    return tiny_config
