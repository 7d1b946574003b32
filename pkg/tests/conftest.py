import numpy as np
import pytest

from mpu.objectives import UnlearnData
from mpu.tinyformer import Batch, ModelConfig, Role, init_params

_ACCEPTANCE: dict[str, tuple[str, str]] = {}


@pytest.fixture(scope="session")
def small_cfg():
    return ModelConfig(vocab=11, d_model=16, n_layers=2, n_q_heads=4, n_kv_heads=2, d_head=4, d_ff=12, max_seq=8)


@pytest.fixture(scope="session")
def small_theta(small_cfg):
    return init_params(small_cfg, 3)


def make_data(cfg, seed=0, n_forget=3, n_retain=4, seq=6, prompt=2):
    """Small random forget/retain/preference batches."""
    g = np.random.default_rng(seed)
    ft = g.integers(0, cfg.vocab, (n_forget, seq))
    fm = np.zeros((n_forget, seq), bool)
    fm[:, prompt:] = True
    rt = g.integers(0, cfg.vocab, (n_retain, seq))
    rm = np.ones((n_retain, seq), bool)
    rm[:, 0] = False
    chosen = ft.copy()
    chosen[:, prompt:] = g.integers(0, cfg.vocab, (n_forget, seq - prompt))
    pref = Batch(chosen, fm, Role.PREFERENCE_PAIR, rejected_tokens=ft, rejected_mask=fm)
    return UnlearnData(Batch(ft, fm, Role.FORGET), Batch(rt, rm, Role.RETAIN), pref)


@pytest.fixture(scope="session")
def small_data(small_cfg):
    return make_data(small_cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_runtest_makereport(item, call):
    label = getattr(item.function, "acceptance_label", None)
    if label is None:
        return
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        status = "PASS" if call.excinfo is None else "FAIL"
        detail = getattr(item.function, "acceptance_detail", "")
        _ACCEPTANCE[label] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_ACCEPTANCE, key=lambda s: int(s.split(".")[0])):
        status, detail = _ACCEPTANCE[label]
        terminalreporter.write_line(f"{status}  {label}" + (f"  [{detail}]" if detail else ""))
