import pytest

from s1dcnn.numerics import make_rng


@pytest.fixture
def rng():
    return make_rng(1234)


def randomise(model, rng, biases=True):
    """Give a freshly built model non-trivial biases and batch-norm statistics."""
    for blk in model.blocks:
        n = blk.bn.gamma.shape[0]
        if biases and hasattr(blk.layer, "feature_bias"):
            blk.layer.feature_bias[:] = rng.normal(0, 0.3, n)
            blk.layer.time_bias[:] = rng.normal(0, 0.3, n)
        blk.bn.gamma[:] = rng.uniform(0.5, 1.5, n)
        blk.bn.beta_shift[:] = rng.normal(0, 0.3, n)
        blk.bn.running_mean[:] = rng.normal(0, 0.3, n)
        blk.bn.running_var[:] = rng.uniform(0.5, 2.0, n)
    model.head.bias[:] = rng.normal(0, 0.3, model.head.bias.shape[0])
    return model


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
