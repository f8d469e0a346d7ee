import sysconfig
from pathlib import Path

import numpy as np
import pytest

CORPUS_BYTES = 1_000_000


def build_corpus(path: Path, n_bytes: int = CORPUS_BYTES) -> Path:
    """Concatenated standard-library sources: plain UTF-8 text, about 1MB."""
    buf = bytearray()
    for p in sorted(Path(sysconfig.get_paths()["stdlib"]).glob("*.py")):
        raw = p.read_bytes()
        try:
            raw.decode("utf-8")
        except UnicodeDecodeError:
            continue
        buf += raw
        if len(buf) >= n_bytes:
            break
    data = bytes(buf[:n_bytes])
    # never cut a multi-byte character in half
    while True:
        try:
            data.decode("utf-8")
            break
        except UnicodeDecodeError:
            data = data[:-1]
    path.write_bytes(data)
    return path


@pytest.fixture(scope="session")
def corpus_path(tmp_path_factory):
    return build_corpus(tmp_path_factory.mktemp("corpus") / "corpus.txt")


@pytest.fixture(scope="session")
def small_corpus_path(tmp_path_factory):
    return build_corpus(tmp_path_factory.mktemp("small") / "small.txt", 60_000)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
