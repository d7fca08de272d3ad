import os

os.environ["PEFTLAB_PRECISION"] = "f64"

import numpy as np
import pytest

from peftlab import artifacts
from peftlab.trainer import TaskSpec, pretrain
from peftlab.transformer import ArchSpec, build_model, get_preset

TINY = ArchSpec(d_model=8, n_enc_layers=1, n_dec_layers=1, n_heads=2, d_ffn=16, vocab_size=12,
                max_src_len=8, max_tgt_len=8)


@pytest.fixture(scope="session")
def toy():
    return get_preset("toy-small")


@pytest.fixture
def toy_model(toy):
    return build_model(toy, seed=0)


@pytest.fixture
def tiny_model():
    return build_model(TINY, seed=0, init_std=0.3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def base_ckpt(tmp_path_factory):
    """Copy-task base model with the default pretraining recipe (seed 0), saved once per session."""
    path = tmp_path_factory.mktemp("base") / "base.ckpt"
    model, run = pretrain(get_preset("toy-small"), TaskSpec(), seed=0)
    artifacts.save_base(path, model, {"seed": 0, "copy_ter": run.metrics["copy_ter"]})
    return path


@pytest.fixture
def base_model(base_ckpt):
    model, _ = artifacts.load_base(base_ckpt)
    return model


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("tests.test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
