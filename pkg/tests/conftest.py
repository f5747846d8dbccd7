import numpy as np
import pytest

from mcarl.morphology import default_range

# small networks and short rollouts so full pipelines run in seconds
TINY = [
    "network.actor_hidden=[32,32]", "network.critic_hidden=[32,32]", "network.teacher_hidden=[16]",
    "network.student_hidden=[16]", "network.morph_hidden=16", "network.latent=8",
    "num_envs=8", "ppo.horizon=8", "ppo.minibatches=2", "ppo.epochs=2", "curriculum.hidden=16",
    "env.episode_steps=40", "checkpoint_every=5",
]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mrange():
    return default_range()


@pytest.fixture
def tiny_overrides(tmp_path):
    def make(*extra, out="run"):
        return TINY + [f"output_dir={tmp_path / out}"] + list(extra)
    return make


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            item.user_properties.append(("criterion", mark.args[0]))


def pytest_terminal_summary(terminalreporter):
    status, detail = {}, {}
    for key in ("passed", "failed", "error", "skipped"):
        for rep in terminalreporter.stats.get(key, []):
            props = dict(getattr(rep, "user_properties", ()))
            n = props.get("criterion")
            if n is None:
                continue
            if rep.failed or rep.skipped:
                status[n] = "FAIL"
            elif rep.when == "call":
                status.setdefault(n, "PASS")
            if "detail" in props:
                detail[n] = props["detail"]
    if not status:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(status):
        extra = f"  ({detail[n]})" if n in detail else ""
        terminalreporter.write_line(f"criterion {n}: {status[n]}{extra}")
