import numpy as np
import pytest

from vmp.nn.model import LayerSpec, init_model, mlp, small_cnn


def finite_diff(f, x, h=1e-5):
    """Central differences of scalar ``f`` at array ``x`` (modified in place, then restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_mlp(rng):
    model = init_model(mlp(3, [6], 3, bottleneck=4), rng)
    for st in model.bn_state.values():
        st.running_mean[:] = rng.normal(0, 0.3, st.running_mean.shape)
        st.running_var[:] = rng.uniform(0.5, 1.5, st.running_var.shape)
    return model


@pytest.fixture
def tiny_cnn(rng):
    return init_model(small_cnn((1, 5, 5), [2], 3, bottleneck=4), rng)


def fixture_nets(seed):
    """Five small architectures covering every layer kind (all <= 1k params)."""
    r = np.random.default_rng(seed)
    archs = [
        mlp(2, [5], 3),
        mlp(4, [6, 5], 2, bottleneck=3),
        mlp(3, [4], 4, batchnorm="bottleneck", bottleneck=4),
        small_cnn((1, 4, 4), [2], 3, bottleneck=4),
        [LayerSpec("conv2d", (2, 3, 3), (3, 3, 3), kernel=(3, 3, 2, 3)),
         LayerSpec("relu", (3, 3, 3), (3, 3, 3)),
         LayerSpec("conv2d", (3, 3, 3), (2, 3, 3), kernel=(1, 2, 3, 2)),
         LayerSpec("flatten", (2, 3, 3), (18,)),
         LayerSpec("dense", (18,), (3,))],
    ]
    return [init_model(a, r) for a in archs]


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
