import numpy as np
import pytest

import crossreid as cr


def pytest_terminal_summary(terminalreporter):
    """Echo the per-criterion acceptance verdicts in the final report."""
    try:
        from test_acceptance import ACCEPTANCE_LINES
    except ImportError:
        return
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def corpus():
    return cr.generate_synthetic_corpus(20, 2, 4, seed=7)


@pytest.fixture(scope="session")
def split(corpus):
    return cr.build_mlr_split(corpus, cr.MLRConfig(rng_seed=7))


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def quick_train_result(split):
    """A cheap (undertrained) full-variant run shared by plumbing tests."""
    from crossreid.trainer import desk_config, train

    config = desk_config("ftwa", seed=0, epochs=4, decay_epochs=(2, 3),
                         warmup_epochs=1, batches_per_epoch=2, deterministic=True)
    return config, train(config, split.train)
