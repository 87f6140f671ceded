import numpy as np
import pytest

from fmrifuse import tensor as tn


@pytest.fixture(autouse=True)
def _finite_checks_on():
    with tn.check_finite(True):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def numeric_grad(f, x, eps=1e-6):
    """Central differences of a scalar numpy function, coordinate by coordinate."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        up, down = x.copy(), x.copy()
        up.flat[i] += eps
        down.flat[i] -= eps
        g.flat[i] = (f(up) - f(down)) / (2 * eps)
    return g


def reassemble_patches(tokens, shape, patch):
    """Loop-based inverse of patch extraction, written independently of the library."""
    T, H, W, D = shape
    pt, ph, pw, pd = patch
    out = np.full(shape, np.nan)
    n = 0
    for a in range(T // pt):
        for b in range(H // ph):
            for c in range(W // pw):
                for e in range(D // pd):
                    flat = 0
                    for t in range(pt):
                        for h in range(ph):
                            for w in range(pw):
                                for d in range(pd):
                                    out[a * pt + t, b * ph + h, c * pw + w, e * pd + d] = tokens[n, flat]
                                    flat += 1
                    n += 1
    return out


@pytest.fixture(scope="session")
def tiny_synth(tmp_path_factory):
    """Small two-domain dataset: 24 train / 12 test volumes of shape (2, 8, 8, 8)."""
    from fmrifuse.synth import SynthConfig, synth_dataset

    root = tmp_path_factory.mktemp("tiny")
    cfg = SynthConfig(n_samples=24, n_test=12, dims=(2, 8, 8, 8), domain_count=2, confound=1.0, meta_format="json")
    result = synth_dataset(cfg, 13, root)
    return root, result


# --- acceptance reporting: one PASS/FAIL line per tagged criterion --------------------------

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, summary): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, summary = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if report.failed:
        _CRITERIA[number] = ("FAIL", summary, detail)
    elif report.when == "call" and _CRITERIA.get(number, ("",))[0] != "FAIL":
        _CRITERIA[number] = ("PASS", summary, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, summary, detail = _CRITERIA[number]
        line = f"criterion {number:2d}: {status}  {summary}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
