import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "pkde",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("pkde")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary ---------------------------------------------------------
# Tests marked ``acceptance(n, title)`` are collected into one pass/fail line per
# criterion; a criterion passes only if every test carrying its number passed.

_ACCEPTANCE: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("acceptance")
    if m is None or (rep.when != "call" and not rep.failed):
        return
    n, title = m.args
    entry = _ACCEPTANCE.setdefault(n, {"title": title, "ok": True, "seconds": 0.0, "why": ""})
    entry["seconds"] += rep.duration
    if rep.failed:
        entry["ok"] = False
        if not entry["why"]:
            msg = str(getattr(rep.longrepr, "reprcrash", None) and rep.longrepr.reprcrash.message or rep.longrepr)
            entry["why"] = msg.splitlines()[0][:160] if msg else ""


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    tr = terminalreporter
    tr.write_sep("=", "acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        e = _ACCEPTANCE[n]
        line = f"[{'PASS' if e['ok'] else 'FAIL'}] {n:2d}. {e['title']} ({e['seconds']:.1f}s)"
        if not e["ok"] and e["why"]:
            line += f" -- {e['why']}"
        tr.write_line(line)
