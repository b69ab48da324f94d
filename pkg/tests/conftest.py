import hashlib

import numpy as np
import pytest

from vovc.net import NetConfig, TrainConfig, load_checkpoint, save_checkpoint, train_base
from vovc.signals import gen_corpus, toy_image

TRAIN = TrainConfig(steps=3000, seed=0)
CORPUS_SEED = 0
HELDOUT_SEED = 99


def corpus_vectors(count=64, seed=CORPUS_SEED):
    return [img.ravel() for img in gen_corpus(count, 16, seed)]


def heldout(i: int) -> np.ndarray:
    return toy_image(HELDOUT_SEED, i).ravel()


@pytest.fixture(scope="session")
def trained_net(request):
    """Base net trained on the toy corpus; cached across runs in pytest's cache dir."""
    tag = hashlib.sha256(repr((TRAIN, CORPUS_SEED)).encode()).hexdigest()[:12]
    path = request.config.cache.mkdir("vovc") / f"base-{tag}.vfnn"
    if path.exists():
        return load_checkpoint(path.read_bytes())
    corpus = corpus_vectors()
    net = train_base(corpus, TRAIN, NetConfig.for_corpus(corpus))
    path.write_bytes(save_checkpoint(net))
    return net.rounded()


@pytest.fixture
def small_net():
    """A tiny random net with a non-zero output layer, for gradient work."""
    from vovc.net import VectorFieldNet

    cfg = NetConfig(input_dim=8, hidden_dims=(12, 10), time_embed_dim=4, zero_output=False, seed=3)
    net = VectorFieldNet.init(cfg)
    net.gate[:] = np.linspace(-0.2, 0.2, net.gate.size)
    return net.rounded()


# -- acceptance reporting ---------------------------------------------------
# Tests marked ``criterion(n, title)`` are tallied per criterion and printed as
# one PASS/FAIL line each at the end of the run, with any recorded measurements.

ACCEPTANCE: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


def _entry(item):
    m = item.get_closest_marker("criterion")
    if m is None:
        return None
    n, title = m.args
    return ACCEPTANCE.setdefault(n, {"title": title, "ok": True, "notes": []})


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    entry = _entry(item)
    if entry is not None and rep.failed:
        entry["ok"] = False


@pytest.fixture
def measure(request):
    """``measure("text")`` attaches a measurement to the test's criterion line."""
    entry = _entry(request.node)
    return (lambda text: entry["notes"].append(text)) if entry else (lambda text: None)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        e = ACCEPTANCE[n]
        notes = "; ".join(e["notes"])
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if e['ok'] else 'FAIL'}  {e['title']}"
                                    + (f"  [{notes}]" if notes else ""))
