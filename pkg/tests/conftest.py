import hashlib
import json
import shutil
import time
from pathlib import Path

import pytest

import semtok
from semtok import pipeline as pl
from semtok.config import config_text, load_config

ACCEPTANCE: dict[int, str] = {}
SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def acceptance_report():
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])


def _source_digest() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(semtok.__file__).parent.glob("*.py")):
        h.update(path.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="session")
def reference_runs(request):
    """Reference-profile training for every seed, cached across sessions.

    The cache key covers the resolved configuration and the package source,
    so any code or config change retrains. Returns ``{seed: (config, seconds)}``
    where ``seconds`` is the wall time of the original training.
    """
    cache = Path(request.config.cache.mkdir("semtok-reference"))
    runs = {}
    for seed in SEEDS:
        config = load_config(None, [f"seed={seed}", f"out_dir={cache / f'seed{seed}'}"], profile="reference")
        key = hashlib.sha256((config_text(config) + _source_digest()).encode()).hexdigest()
        stamp = cache / f"seed{seed}.json"
        if stamp.exists() and json.loads(stamp.read_text()).get("key") == key:
            runs[seed] = (config, json.loads(stamp.read_text())["seconds"])
            continue
        shutil.rmtree(config.paths.root, ignore_errors=True)
        start = time.perf_counter()
        train_set, _ = pl.gen_data(config)
        pl.pretrain(config, train_set)
        for regime in config.regimes:
            pl.finetune_regime(config, regime, train_set)
        seconds = time.perf_counter() - start
        stamp.write_text(json.dumps({"key": key, "seconds": seconds}))
        runs[seed] = (config, seconds)
    return runs
