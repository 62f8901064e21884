import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture(scope="session")
def planted():
    """A trained direct regressor on a small planted world, shared by the analysis tests."""
    from satecon.pipeline import train_direct
    from satecon.synth import SynthConfig, synth_generate

    world = synth_generate(SynthConfig(villages=800, relation="monotone", noise=0.1, seed=11))
    run = train_direct(world)
    return world, run


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1])):
        terminalreporter.write_line(line)
