import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT))

from modules.codebook import load_codebook  # noqa: E402
from modules.config import config_from_dict  # noqa: E402
from modules.corpus import Corpus, Post, load_posts, parse_timestamp  # noqa: E402

DATA = ROOT / "data"
FIXTURES = DATA / "fixtures"


@pytest.fixture(scope="session")
def data_dir():
    return DATA


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def codebook():
    return load_codebook(DATA / "codebook.yaml")


@pytest.fixture
def posts_50():
    return load_posts(FIXTURES / "posts_50.jsonl", name="fixture")


def make_post(pid, body, title="", ts="2024-01-01T00:00:00Z", source="r/test"):
    return Post(id=pid, title=title, body=body, source=source, created_at=parse_timestamp(ts))


def make_corpus(*posts, name="tiny"):
    return Corpus.of(name, posts)


@pytest.fixture
def demo_config(tmp_path):
    """Offline fixture run writing into a temporary output directory."""

    def build(**overrides):
        raw = {
            "corpus": {"path": str(FIXTURES / "posts_50.jsonl"), "name": "fixture",
                       "split_at": "2024-01-01T00:00:00Z"},
            "classify": {"dataset": "DEMO", "workers": 4},
            "gold": str(FIXTURES / "gold_20.csv"),
            "prompting": {"version": "v3-single-line", "shots": [0, 2], "selections": {2: [2, 1]}},
            "backends": [{"kind": "mock-rules", "label": "mock"}],
            "evaluation": {"bootstrap_resamples": 200},
            "output": {"dir": str(tmp_path / "run")},
        }
        for section, values in overrides.items():
            if isinstance(values, dict) and isinstance(raw.get(section), dict):
                raw[section] = {**raw[section], **values}
            else:
                raw[section] = values
        return config_from_dict(raw, tmp_path)

    return build
