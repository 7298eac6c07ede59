from pathlib import Path

import pytest

from helpers import FIXTURES
from recam.dataset import load_jsonl


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def overfit8():
    return load_jsonl(FIXTURES / "overfit8.jsonl", "train")


@pytest.fixture
def data1():
    return {name: load_jsonl(FIXTURES / "data1" / f"{name}.jsonl", name) for name in ("train", "trial", "dev", "test")}


@pytest.fixture
def data2():
    return {name: load_jsonl(FIXTURES / "data2" / f"{name}.jsonl", name, subtask="nonspecificity")
            for name in ("train", "trial", "dev", "test")}
