import numpy as np
import pytest

from stn import numerics


def random_spd(rng, n, ridge=1.0):
    b = rng.normal(size=(n, n))
    return b.T @ b + ridge * np.eye(n)


@pytest.fixture(params=numerics.available_backends())
def backend(request):
    previous = numerics.set_backend(request.param)
    yield request.param
    numerics.set_backend(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# Synthetic benchmark shared by the acceptance suite and the slow training tests.
BENCH_SEED = 0
BENCH_CLASSES = 40
BENCH_PER_CLASS = 40


@pytest.fixture(scope="session")
def default_training():
    """``meta_train`` with default settings on the seed-fixed synthetic dataset."""
    import time

    from stn.episodic import RunConfig, gen_synthetic, meta_train

    start = time.perf_counter()
    ds = gen_synthetic(BENCH_CLASSES, BENCH_PER_CLASS, seed=BENCH_SEED)
    run = RunConfig()
    gp, lp, log = meta_train(run, ds)
    return {"dataset": ds, "run": run, "global": gp, "local": lp, "log": log,
            "train_seconds": time.perf_counter() - start}
