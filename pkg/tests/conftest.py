import json
from pathlib import Path

import pytest

from litmine.corpus import Document, HashingEmbedder, WindowingConfig, build_corpus
from litmine.index import build_index
from litmine.tags import EntityType, TagStore


def write_jsonl(path: Path, rows: list[dict]) -> Path:
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    return path


@pytest.fixture
def embedder():
    return HashingEmbedder(dim=64)


def corpus_of_texts(texts: dict[str, str], embedder=None):
    """One document per entry, one paragraph each (so one window per doc)."""
    docs = [Document(doc_id=doc_id, paragraphs=(text,)) for doc_id, text in texts.items()]
    return build_corpus(docs, WindowingConfig(window_size=5, stride=2), embedder=embedder)


def raw_index(universe: int, entries: list[tuple[str, EntityType, list[int]]]):
    """Index over synthetic postings keyed by raw entity keys."""
    return build_index(TagStore.from_postings(universe, entries))
