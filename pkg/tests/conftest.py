import numpy as np
import pytest

from gridmarl.topology import DGSpec, LineSpec, LoadSpec, MicrogridSpec


def single_bus_spec(load_p=0.0, load_q=0.0, model="constant_power", x=0.1, r=0.0):
    """One DG behind ``r + jx`` feeding one load on its own bus.

    Built directly (skipping validation, which requires two DGs) because the
    simulator itself handles any DG count.
    """
    return MicrogridSpec(
        buses=("b1",), lines=(),
        loads=(LoadSpec("b1", load_p, load_q, model),),
        dgs=(DGSpec("b1", coupling_resistance=r, coupling_reactance=x),),
        comm_edges=(), name="single")


def two_dg_spec(load_b1=0.4, load_b2=0.0):
    dg = dict(droop_gain_p=0.0354, droop_gain_q=0.1, coupling_resistance=0.01,
              coupling_reactance=0.1)
    return MicrogridSpec(
        buses=("b1", "b2"),
        lines=(LineSpec("b1", "b2", 0.02, 0.05),),
        loads=(LoadSpec("b1", load_b1, 0.5 * load_b1), LoadSpec("b2", load_b2, 0.5 * load_b2)),
        dgs=(DGSpec("b1", **dg), DGSpec("b2", **dg)),
        comm_edges=((0, 1),), name="two-dg")


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TOY4_EPISODES = 2000


@pytest.fixture(scope="session")
def toy4_run(tmp_path_factory):
    """The seed-fixed 2000-episode toy4 training run shared by slow tests."""
    from types import SimpleNamespace
    import time

    from gridmarl.agent import TrainConfig
    from gridmarl.env import fit_normalization
    from gridmarl.topology import load_spec
    from gridmarl.training import Trainer

    spec = load_spec("toy4")
    out = tmp_path_factory.mktemp("toy4")
    t0 = time.perf_counter()
    norm = fit_normalization(spec, 200, seed=0)
    trainer = Trainer(spec, TrainConfig(), seed=0, norm=norm)
    initial = trainer.save(out / "initial.npz")
    metrics, ckpts = trainer.train(TOY4_EPISODES, checkpoint_dir=out,
                                   checkpoint_every=TOY4_EPISODES)
    return SimpleNamespace(spec=spec, trainer=trainer, norm=norm, metrics=metrics,
                           initial=initial, checkpoint=ckpts[-1],
                           seconds=time.perf_counter() - t0)
