import pytest

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE = {}

CRITERIA = {
    1: "CartPole robustness",
    2: "Pendulum temporal performance",
    3: "Pendulum reward bound",
    4: "Surrogate fidelity gate",
    5: "Gradient correctness",
    6: "LHS stratification",
    7: "Reliability estimator suite",
    8: "PPO objective suite",
    9: "Determinism",
}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        if n not in ACCEPTANCE:
            terminalreporter.write_line(f"criterion {n} ({title}): NOT RUN")
            continue
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} ({title}): {'PASS' if ok else 'FAIL'}  [{detail}]")


@pytest.fixture
def record():
    def _record(n, ok, detail):
        ACCEPTANCE[n] = (bool(ok), detail)
        return ok
    return _record
