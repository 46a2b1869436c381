import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from dcube.denoiser import Denoiser, DenoiserConfig  # noqa: E402
from dcube.diffusion import make_linear_schedule  # noqa: E402


def tiny_config(num_classes: int = 3, **kw) -> DenoiserConfig:
    base = dict(
        image_size=(1, 8, 8),
        num_classes=num_classes,
        base_channels=4,
        depth=2,
        channel_mults=(1, 2),
        mid_mult=2,
        time_embed_dim=8,
        class_embed_dim=8,
    )
    base.update(kw)
    return DenoiserConfig(**base)


def tiny_denoiser(seed: int = 0, dtype=torch.float32, **kw) -> Denoiser:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = Denoiser(tiny_config(**kw))
    return model.to(dtype)


@pytest.fixture
def schedule():
    return make_linear_schedule(20)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


# small enough for a CLI pipeline in a few seconds
TINY_RUN = {
    "data": {"counts": [10, 10, 40], "image_size": [1, 16, 16], "size_range": [3, 6]},
    "schedule": {"T": 20},
    "denoiser": {"image_size": [1, 16, 16], "base_channels": 8},
    "stage1": {"steps": 5, "batch_size": 8, "fid_samples": 12},
    "scan": {"t": 10, "batch": 16},
    "stage2": {"epochs": 1, "batch_size": 8},
}


@pytest.fixture
def tiny_run_config(tmp_path):
    import json

    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY_RUN))
    return path


# --------------------------------------------------------------------------- acceptance summary

_CRITERIA: dict[int, tuple[str, str, str]] = {}


@pytest.fixture
def detail(request):
    """Attach a one-line measurement to the current acceptance criterion."""

    def note(text: str) -> None:
        request.node.user_properties.append(("detail", text))
        print(text)

    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    failed = report.failed or (report.when == "setup" and report.skipped)
    if report.when == "call" or failed:
        notes = "; ".join(v for k, v in item.user_properties if k == "detail")
        if report.failed and not notes:
            notes = report.longreprtext.strip().splitlines()[-1][:160] if report.longreprtext else ""
        _CRITERIA[number] = ("FAIL" if report.failed else "PASS" if report.passed else "SKIP", title, notes)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        verdict, title, notes = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2}  {verdict}  {title}" + (f"  [{notes}]" if notes else ""))
