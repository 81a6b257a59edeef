import os
import time

import numpy as np
import pytest

from ivdrip import dropnet, synthdrip, trainer

# acceptance results, printed one line per criterion at the end of the run
ACCEPTANCE: dict[str, tuple[bool, str]] = {}

DESK_SAMPLES = 2000
DESK_SEED = 0


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0])):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture(scope="session")
def desk_training():
    """Desk-config training on 2,000 balanced synthetic samples (shared by every test needing a trained net)."""
    t0 = time.perf_counter()
    data = synthdrip.materialize(synthdrip.build_dataset(DESK_SAMPLES, W=128, S=8, seed=DESK_SEED))
    net = dropnet.build(dropnet.NetConfig.desk(seed=DESK_SEED))
    cfg = trainer.TrainConfig(epochs=10, batch_size=16, lr=0.01, momentum=0.9, seed=DESK_SEED)
    net, hist = trainer.train(net, data, cfg)
    _, va = trainer.split_indices(len(data), cfg.split_ratio, cfg.seed)
    val = data.subset(va)
    return {"net": net, "history": hist, "val": val, "seconds": time.perf_counter() - t0,
            "metrics": trainer.evaluate(net, val)}


@pytest.fixture(scope="session")
def desk_net(request):
    """The trained desk net; IVDRIP_DESK_WEIGHTS may point at weights saved from the same recipe."""
    path = os.environ.get("IVDRIP_DESK_WEIGHTS")
    if path:
        return dropnet.load_weights(path).eval()
    return request.getfixturevalue("desk_training")["net"]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

