from io import StringIO
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from app.schemas.config_schema import AdaptConfig, ExperimentPlan, Mode, PretrainConfig, RunSpec
from app.schemas.task_schema import TaskSpec
from app.service.pretrain import pretrain_vlm
from app.service.synthbench import generate_task

FD_STEP = 1e-6
GOLDEN_DIR = Path(__file__).parent / "golden"


def pytest_addoption(parser):
    parser.addoption(
        "--update-golden",
        action="store_true",
        default=False,
        help="record tests/golden files from the current run instead of comparing",
    )


def numeric_grad(f, x, h=FD_STEP):
    """central differences of scalar f at every entry of x"""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        plus, minus = x.copy(), x.copy()
        plus[idx] += h
        minus[idx] -= h
        grad[idx] = (f(plus) - f(minus)) / (2 * h)
    return grad


def rel_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


SMALL_TASK = dict(
    num_classes=4,
    concept_dim=8,
    input_dim=12,
    source_pairs_per_class=20,
    target_images_per_class=15,
    k_text_prompts=4,
    seed=7,
)
SMALL_PRETRAIN = dict(embed_dim=6, epochs=15, batch_size=32, lr=0.01)
SMALL_ADAPT = dict(epochs=2, batch_size=16, k_views=2, lr=1e-3)


@pytest.fixture(scope="session")
def small_spec() -> TaskSpec:
    return TaskSpec(**SMALL_TASK)


@pytest.fixture(scope="session")
def small_task(small_spec):
    return generate_task(small_spec)


@pytest.fixture(scope="session")
def pretrain_cfg() -> PretrainConfig:
    return PretrainConfig(**SMALL_PRETRAIN)


@pytest.fixture(scope="session")
def pretrained(small_task, pretrain_cfg):
    return pretrain_vlm(small_task, pretrain_cfg, seed=7)


@pytest.fixture
def adapt_cfg():
    def make(mode: Mode = Mode.pest, **overrides) -> AdaptConfig:
        return AdaptConfig(**{**SMALL_ADAPT, "mode": mode, **overrides})

    return make


@pytest.fixture
def small_plan(small_spec, pretrain_cfg, adapt_cfg, tmp_path):
    def make(modes=(Mode.st, Mode.pest)) -> ExperimentPlan:
        return ExperimentPlan(
            task=small_spec,
            pretrain=pretrain_cfg,
            adapt=adapt_cfg(),
            runs=[RunSpec(name=m.value, config=adapt_cfg(m)) for m in modes],
            out_dir=str(tmp_path / "out"),
            seed=7,
        )

    return make


def grads_agree(analytic, numeric, rtol=1e-5, atol=1e-8):
    """relative agreement, or absolute agreement when both gradients are ~0"""
    return rel_error(analytic, numeric) <= rtol or float(np.max(np.abs(analytic - numeric))) <= atol


@pytest.fixture
def golden(request):
    """compare text byte for byte against tests/golden/<name>, or record it with --update-golden"""
    update = request.config.getoption("--update-golden")

    def check(name: str, text: str) -> None:
        path = GOLDEN_DIR / name
        if update:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(text.encode("utf-8"))
            return
        if not path.exists():
            pytest.fail(f"no golden file {name}; record it with `pytest -m reference --update-golden`")
        expected = path.read_bytes().decode("utf-8")
        if name.endswith(".csv") and expected != text:
            # a readable diff before the byte comparison
            pd.testing.assert_frame_equal(pd.read_csv(StringIO(text)), pd.read_csv(StringIO(expected)))
        assert text == expected

    return check
