import numpy as np
import pytest

from decra import model as M
from decra.corpus import CLS, PAD, Example


def finite_difference(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (mutated in place)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def assert_grad_close(analytic, numeric, rtol, atol=1e-8):
    err = np.abs(analytic - numeric)
    bound = rtol * np.maximum(np.abs(analytic), np.abs(numeric)) + atol
    worst = np.max(err - bound) if err.size else 0.0
    assert np.all(err <= bound), f"gradient mismatch, worst excess {worst:.3e}"


@pytest.fixture
def tiny_config():
    return M.ModelConfig(vocab_size=12, max_length=6, num_classes=3, hidden=8,
                         num_layers=1, num_heads=1, dropout_rate=0.1)


def random_examples(rng, n, T, V, C, min_len=2):
    out = []
    for _ in range(n):
        length = int(rng.integers(min_len, T + 1))
        ids = [CLS] + [int(i) for i in rng.integers(4, V, length - 1)] + [PAD] * (T - length)
        out.append(Example(tuple(ids), int(rng.integers(C))))
    return out


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number n")
    config.addinivalue_line("markers", "slow: long-running experiment")
    config._criteria = {}
    config._criteria_notes = {}


@pytest.fixture
def criterion_note(request):
    """Attach a line of detail to this test's criterion in the summary."""
    n = request.node.get_closest_marker("criterion").args[0]
    return lambda text: request.config._criteria_notes.setdefault(n, []).append(text)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    key = (mark.args[0], mark.args[1])
    results = item.config._criteria
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        ok = rep.passed if not rep.skipped else None
        prev = results.get(key, True)
        results[key] = None if ok is None else (prev is not False and ok)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_criteria", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for (n, title), ok in sorted(results.items()):
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {title}")
        for text in config._criteria_notes.get(n, []):
            terminalreporter.write_line(f"    {text}")
