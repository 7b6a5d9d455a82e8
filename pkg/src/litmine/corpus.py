"""Paragraph-structured documents, overlapping retrieval windows, and
window embeddings.

A corpus file holds one JSON document per line:
``{"doc_id": ..., "paragraphs": [...], "metadata": {...}}``. Windows are
spans of ``window_size`` consecutive paragraphs generated every ``stride``
paragraphs; the final window is truncated rather than dropped so every
paragraph is covered. Embeddings come from a pluggable port, defaulting to
a deterministic feature-hashing embedder so builds are reproducible
without any model service.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import requests

from .errors import ConfigError, DataError, ParseError, TransportError

logger = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class WindowingConfig:
    """Retrieval-window geometry: span size and step, in paragraphs."""

    window_size: int = 5
    stride: int = 2

    def __post_init__(self):
        if self.window_size < 1:
            raise ConfigError(f"window_size must be >= 1, got {self.window_size}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")


@dataclass(frozen=True)
class Document:
    doc_id: str
    paragraphs: tuple[str, ...]
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.doc_id:
            raise DataError("document with empty doc_id")
        if not self.paragraphs:
            raise DataError(f"document {self.doc_id!r} has no paragraphs")


@dataclass(frozen=True)
class Window:
    """A contiguous span of paragraphs from one document.

    ``ordinal`` is the window's dense integer position within the corpus
    build; posting lists and embedding rows are addressed by it.
    """

    window_id: str
    doc_id: str
    start_para: int
    para_count: int
    text: str
    ordinal: int

    @property
    def para_range(self) -> range:
        return range(self.start_para, self.start_para + self.para_count)


def window_id_for(doc_id: str, start_para: int, para_count: int) -> str:
    return f"{doc_id}:{start_para}:{para_count}"


def window_spans(n_paragraphs: int, config: WindowingConfig) -> list[tuple[int, int]]:
    """Enumerate (start, count) spans covering ``n_paragraphs``.

    Starts advance by ``stride``; enumeration stops with the first window
    that reaches the end of the document, truncating its count if the tail
    is shorter than ``window_size``. With stride <= window_size every
    paragraph lands in at least one window.
    """
    spans: list[tuple[int, int]] = []
    start = 0
    while True:
        count = min(config.window_size, n_paragraphs - start)
        spans.append((start, count))
        if start + config.window_size >= n_paragraphs:
            break
        start += config.stride
        if start >= n_paragraphs:  # only reachable when stride > window_size
            break
    return spans


class Embedder:
    """Port for turning texts into L2-normalized fixed-dim vectors."""

    dim: int

    def embed(self, texts: list[str]) -> np.ndarray:
        """Return an array of shape (len(texts), dim), rows normalized."""
        raise NotImplementedError

    def embed_one(self, text: str) -> np.ndarray:
        return self.embed([text])[0]

    def fingerprint(self) -> str:
        return f"{type(self).__name__}:{self.dim}"


class HashingEmbedder(Embedder):
    """Deterministic bag-of-tokens embedder using signed feature hashing.

    Text is lowercased and split on alphanumeric runs; each token is
    md5-hashed into one of ``dim`` buckets with a +/-1 sign, counts are
    accumulated and the vector L2-normalized. Empty text maps to the
    all-zero vector.
    """

    def __init__(self, dim: int = 256):
        if dim < 1:
            raise ConfigError(f"embedding dim must be >= 1, got {dim}")
        self.dim = dim

    def embed(self, texts: list[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float64)
        for i, text in enumerate(texts):
            vec = out[i]
            for token in _TOKEN_RE.findall(text.lower()):
                digest = hashlib.md5(token.encode("utf-8")).digest()
                h = int.from_bytes(digest[:8], "little")
                sign = 1.0 if digest[8] & 1 else -1.0
                vec[h % self.dim] += sign
            norm = np.linalg.norm(vec)
            if norm > 0:
                vec /= norm
        return out


class HttpEmbedder(Embedder):
    """Remote embedder port: POST {"texts": [...]} -> {"vectors": [[...]]}.

    Transport failures are retried with exponential backoff and surface as
    TransportError; a vector of the wrong length is a ConfigError because
    it means the service disagrees with the build configuration.
    """

    def __init__(self, url: str, dim: int, timeout: float = 30.0,
                 retries: int = 3, backoff: float = 0.5):
        self.url = url
        self.dim = dim
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff

    def embed(self, texts: list[str]) -> np.ndarray:
        last_exc: Exception | None = None
        for attempt in range(self.retries):
            try:
                resp = requests.post(self.url, json={"texts": texts}, timeout=self.timeout)
                resp.raise_for_status()
                body = resp.json()
                vectors = body["vectors"]
                break
            except (requests.RequestException, ValueError, KeyError) as exc:
                last_exc = exc
                if attempt + 1 < self.retries:
                    time.sleep(self.backoff * (2 ** attempt))
        else:
            raise TransportError(f"embedder at {self.url} failed after {self.retries} attempts: {last_exc}")
        arr = np.asarray(vectors, dtype=np.float64)
        if arr.ndim != 2 or arr.shape != (len(texts), self.dim):
            raise ConfigError(
                f"embedder returned shape {arr.shape}, expected ({len(texts)}, {self.dim})"
            )
        norms = np.linalg.norm(arr, axis=1, keepdims=True)
        np.divide(arr, norms, out=arr, where=norms > 0)
        return arr

    def fingerprint(self) -> str:
        return f"HttpEmbedder:{self.dim}:{self.url}"


def embed_window(window: Window, embedder: Embedder) -> np.ndarray:
    """Embed one window's text through the port."""
    return embedder.embed_one(window.text)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; 0.0 if either vector is all-zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"cosine dim mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


class Corpus:
    """Immutable corpus handle: documents, windows, optional embeddings.

    Windows are ordered by document position in the source file, then by
    start paragraph; their index in that order is the window ordinal.
    """

    def __init__(self, documents: list[Document], windowing: WindowingConfig,
                 embeddings: np.ndarray | None = None,
                 embedder_fingerprint: str | None = None):
        self.windowing = windowing
        self.documents: dict[str, Document] = {}
        self.windows: list[Window] = []
        self._by_window_id: dict[str, int] = {}
        self._doc_window_ordinals: dict[str, list[int]] = {}
        for doc in documents:
            if doc.doc_id in self.documents:
                raise DataError(f"duplicate doc_id {doc.doc_id!r}")
            self.documents[doc.doc_id] = doc
            ordinals: list[int] = []
            for start, count in window_spans(len(doc.paragraphs), windowing):
                ordinal = len(self.windows)
                window = Window(
                    window_id=window_id_for(doc.doc_id, start, count),
                    doc_id=doc.doc_id,
                    start_para=start,
                    para_count=count,
                    text="\n".join(doc.paragraphs[start:start + count]),
                    ordinal=ordinal,
                )
                self.windows.append(window)
                self._by_window_id[window.window_id] = ordinal
                ordinals.append(ordinal)
            self._doc_window_ordinals[doc.doc_id] = ordinals
        self.embeddings = embeddings
        self.embedder_fingerprint = embedder_fingerprint
        if embeddings is not None and embeddings.shape[0] != len(self.windows):
            raise ConfigError(
                f"embedding matrix has {embeddings.shape[0]} rows for {len(self.windows)} windows"
            )

    def __len__(self) -> int:
        return len(self.windows)

    @property
    def window_count(self) -> int:
        return len(self.windows)

    def window(self, ordinal: int) -> Window:
        return self.windows[ordinal]

    def window_by_id(self, window_id: str) -> Window:
        try:
            return self.windows[self._by_window_id[window_id]]
        except KeyError:
            raise DataError(f"unknown window_id {window_id!r}") from None

    def window_ordinals_for_doc(self, doc_id: str) -> list[int]:
        return list(self._doc_window_ordinals.get(doc_id, ()))

    @property
    def has_embeddings(self) -> bool:
        return self.embeddings is not None

    def require_embeddings(self) -> np.ndarray:
        if self.embeddings is None:
            raise ConfigError("corpus was built without embeddings")
        return self.embeddings


def compute_embeddings(windows: list[Window], embedder: Embedder,
                       workers: int = 1, batch_size: int = 256) -> np.ndarray:
    """Embed all windows, merging chunk results by ordinal so the output
    does not depend on worker scheduling."""
    texts = [w.text for w in windows]
    if not texts:
        return np.zeros((0, embedder.dim), dtype=np.float64)
    batches = [(i, texts[i:i + batch_size]) for i in range(0, len(texts), batch_size)]
    out = np.zeros((len(texts), embedder.dim), dtype=np.float64)
    if workers <= 1 or len(batches) == 1:
        for offset, chunk in batches:
            out[offset:offset + len(chunk)] = embedder.embed(chunk)
        return out
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {pool.submit(embedder.embed, chunk): offset for offset, chunk in batches}
        for future, offset in futures.items():
            arr = future.result()
            out[offset:offset + arr.shape[0]] = arr
    return out


def parse_document(obj: dict, location: str | None = None) -> Document:
    if not isinstance(obj, dict):
        raise ParseError("document line is not a JSON object", location)
    unknown = set(obj) - {"doc_id", "paragraphs", "metadata"}
    if unknown:
        raise ParseError(f"unknown document fields {sorted(unknown)}", location)
    doc_id = obj.get("doc_id")
    paragraphs = obj.get("paragraphs")
    if not isinstance(doc_id, str) or not doc_id:
        raise ParseError("doc_id must be a non-empty string", location)
    if not isinstance(paragraphs, list) or not all(isinstance(p, str) for p in paragraphs):
        raise ParseError("paragraphs must be a list of strings", location)
    if not paragraphs:
        raise DataError(f"document {doc_id!r} has no paragraphs")
    metadata = obj.get("metadata") or {}
    if not isinstance(metadata, dict):
        raise ParseError("metadata must be an object", location)
    return Document(doc_id=doc_id, paragraphs=tuple(paragraphs),
                    metadata={str(k): str(v) for k, v in metadata.items()})


def read_documents(path: str | Path) -> list[Document]:
    """Parse a JSONL corpus file; errors name the offending line."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"corpus file not found: {path}")
    documents: list[Document] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            location = f"{path.name}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON: {exc.msg}", location) from None
            documents.append(parse_document(obj, location))
    return documents


def build_corpus(documents: list[Document], config: WindowingConfig,
                 embedder: Embedder | None = None, workers: int = 1) -> Corpus:
    corpus = Corpus(documents, config)
    if embedder is not None:
        corpus.embeddings = compute_embeddings(corpus.windows, embedder, workers=workers)
        corpus.embedder_fingerprint = embedder.fingerprint()
    return corpus


def ingest_corpus(path: str | Path, config: WindowingConfig,
                  embedder: Embedder | None = None, workers: int = 1) -> Corpus:
    """Read a corpus file, generate windows, and (optionally) embed them."""
    return build_corpus(read_documents(path), config, embedder=embedder, workers=workers)


def save_corpus(corpus: Corpus, out_dir: str | Path) -> list[Path]:
    """Write corpus artifacts (documents, windows, embeddings, meta).

    Files are byte-deterministic for a given corpus so rebuild digests can
    be compared.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    docs_path = out / "documents.jsonl"
    with docs_path.open("w", encoding="utf-8") as fh:
        for doc in corpus.documents.values():
            fh.write(json.dumps(
                {"doc_id": doc.doc_id, "paragraphs": list(doc.paragraphs),
                 "metadata": doc.metadata},
                sort_keys=True, ensure_ascii=False) + "\n")
    written.append(docs_path)

    windows_path = out / "windows.jsonl"
    with windows_path.open("w", encoding="utf-8") as fh:
        for w in corpus.windows:
            fh.write(json.dumps(
                {"window_id": w.window_id, "doc_id": w.doc_id,
                 "start_para": w.start_para, "para_count": w.para_count,
                 "ordinal": w.ordinal},
                sort_keys=True) + "\n")
    written.append(windows_path)

    meta = {
        "window_size": corpus.windowing.window_size,
        "stride": corpus.windowing.stride,
        "window_count": len(corpus.windows),
        "document_count": len(corpus.documents),
        "embedder": corpus.embedder_fingerprint,
        "dim": None if corpus.embeddings is None else int(corpus.embeddings.shape[1]),
    }
    meta_path = out / "corpus_meta.json"
    meta_path.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    written.append(meta_path)

    if corpus.embeddings is not None:
        emb_path = out / "embeddings.npy"
        np.save(emb_path, corpus.embeddings)
        written.append(emb_path)
    return written


def load_corpus(in_dir: str | Path) -> Corpus:
    """Rebuild a Corpus from artifacts written by :func:`save_corpus`."""
    src = Path(in_dir)
    meta_path = src / "corpus_meta.json"
    if not meta_path.exists():
        raise ConfigError(f"no corpus artifacts in {src}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    config = WindowingConfig(window_size=meta["window_size"], stride=meta["stride"])
    documents = read_documents(src / "documents.jsonl")
    embeddings = None
    emb_path = src / "embeddings.npy"
    if emb_path.exists():
        embeddings = np.load(emb_path)
    corpus = Corpus(documents, config, embeddings=embeddings,
                    embedder_fingerprint=meta.get("embedder"))
    if len(corpus.windows) != meta["window_count"]:
        raise DataError(
            f"corpus artifacts inconsistent: rebuilt {len(corpus.windows)} windows, "
            f"meta says {meta['window_count']}"
        )
    return corpus
