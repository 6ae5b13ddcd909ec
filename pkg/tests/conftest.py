import numpy as np
import pytest

from esdnet.data import CIFAR_TEST_FILES, CIFAR_TRAIN_FILES, serialize_cifar10


def write_fake_cifar(root, per_file=20, seed=0):
    """CIFAR-10 binary batches with class-dependent mean colour plus noise."""
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    base = rng.integers(30, 220, size=(10, 3, 1, 1))
    for name in CIFAR_TRAIN_FILES + CIFAR_TEST_FILES:
        labels = np.arange(per_file) % 10
        rng.shuffle(labels)
        noise = rng.integers(-30, 31, size=(per_file, 3, 32, 32))
        pixels = np.clip(base[labels] + noise, 0, 255).astype(np.uint8)
        (root / name).write_bytes(serialize_cifar10(labels, pixels))
    return root


@pytest.fixture(scope="session")
def fake_cifar(tmp_path_factory):
    return write_fake_cifar(tmp_path_factory.mktemp("cifar") / "cifar-10-batches-bin")


# -- acceptance criteria report ---------------------------------------------------

_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")
    config.stash[_CRITERIA] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    number, title = mark.args
    results = item.config.stash[_CRITERIA]
    if rep.failed:
        crash = getattr(rep.longrepr, "reprcrash", None)
        detail = (crash.message if crash else str(rep.longrepr)).splitlines()[0]
        results[number] = (title, "FAIL", detail)
    elif number not in results or results[number][1] != "FAIL":
        results[number] = (title, "PASS" if rep.passed else "SKIP", dict(item.user_properties).get("detail", ""))


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash[_CRITERIA]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, verdict, detail = results[number]
        terminalreporter.write_line(f"criterion {number} [{verdict}] {title}: {detail}")
