import numpy as np
import pytest


class TableOracle:
    """Value oracle with fixed Q(s, a) and max-target values, keyed on state[0]."""

    def __init__(self, q=lambda s, a: 0.0, target=lambda s2: 0.0):
        self.q = q
        self.target = target

    def q_value(self, states, actions):
        states = np.atleast_2d(states)
        return np.array([self.q(s, a) for s, a in zip(states, np.asarray(actions).reshape(len(states), -1))], dtype=float)

    def target_value(self, next_states):
        return np.array([self.target(s) for s in np.atleast_2d(next_states)], dtype=float)


class LinearOracle:
    """Cheap deterministic oracle: Q = sum(s) + sum(a), target = 2 * sum(s')."""

    def q_value(self, states, actions):
        a = np.asarray(actions, dtype=float).reshape(len(states), -1)
        return np.asarray(states).sum(axis=1) + a.sum(axis=1)

    def target_value(self, next_states):
        return 2.0 * np.asarray(next_states).sum(axis=1)


@pytest.fixture
def linear_oracle():
    return LinearOracle()


@pytest.fixture
def filled_buffer():
    from ners.replay import ReplayBuffer

    rng = np.random.default_rng(0)
    buf = ReplayBuffer(128, obs_dim=3, action_dim=1, alpha=0.5, gamma=0.9)
    for t in range(100):
        buf.add(rng.normal(size=3), rng.uniform(-1, 1, size=1), rng.normal(), rng.normal(size=3), t % 17 == 0, t)
    return buf


# acceptance criteria report: one pass/fail line per criterion in the terminal summary
_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when == "teardown":
        return
    if report.when == "setup" and report.passed:
        return
    number, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    verdict = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    _criteria[number] = (title, verdict, detail, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, verdict, detail, secs = _criteria[number]
        line = f"criterion {number:>2} {verdict}  {title} ({secs:.1f} s)"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)
