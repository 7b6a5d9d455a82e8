import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from litmine.config import load_config
from litmine.corpus import Document, HashingEmbedder, HttpEmbedder, compute_embeddings
from litmine.corpus import WindowingConfig, build_corpus
from litmine.errors import ConfigError, TransportError

from golden import write_golden_fixture


class TestLoadConfig:
    def test_golden_config_loads(self, tmp_path):
        config_path = write_golden_fixture(tmp_path)
        cfg = load_config(config_path)
        assert cfg.rng_seed == 42
        assert cfg.windowing.window_size == 5
        assert cfg.loop.precision_sample_n == 4
        assert cfg.extraction_budget == 10
        assert cfg.analysis is not None
        assert cfg.analysis.covariates == ("route",)
        cascades = cfg.load_resolvers()
        assert [r.name for r in cascades.query_order] == ["chem", "anat"]

    def test_seed_is_mandatory(self, tmp_path):
        config_path = write_golden_fixture(tmp_path)
        text = config_path.read_text(encoding="utf-8").replace("rng_seed = 42\n", "")
        config_path.write_text(text, encoding="utf-8")
        with pytest.raises(ConfigError, match="rng_seed"):
            load_config(config_path)

    def test_missing_paths_rejected(self, tmp_path):
        config_path = write_golden_fixture(tmp_path)
        (tmp_path / "chem.jsonl").unlink()
        with pytest.raises(ConfigError, match="chem"):
            load_config(config_path)

    def test_cascade_must_reference_declared_resolvers(self, tmp_path):
        config_path = write_golden_fixture(tmp_path)
        text = config_path.read_text(encoding="utf-8").replace(
            'SmallMolecule = ["chem"]', 'SmallMolecule = ["ghost"]')
        config_path.write_text(text, encoding="utf-8")
        with pytest.raises(ConfigError, match="ghost"):
            load_config(config_path).load_resolvers()

    def test_invalid_toml_rejected(self, tmp_path):
        path = tmp_path / "broken.toml"
        path.write_text("[run\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="not valid TOML"):
            load_config(path)

    def test_rubric_override(self, tmp_path):
        config_path = write_golden_fixture(tmp_path)
        from litmine.judge_axes import AXIS_KEYS, DEFAULT_RUBRIC
        cfg = load_config(config_path)
        assert cfg.load_rubric() == DEFAULT_RUBRIC
        rubric = {key: f"custom wording for {key}" for key in AXIS_KEYS}
        rubric_path = tmp_path / "rubric.json"
        rubric_path.write_text(json.dumps(rubric), encoding="utf-8")
        text = config_path.read_text(encoding="utf-8").replace(
            "[judge]\ncontext_windows = 1",
            f'[judge]\ncontext_windows = 1\nrubric_path = "{rubric_path}"')
        config_path.write_text(text, encoding="utf-8")
        assert load_config(config_path).load_rubric() == rubric
        # incomplete rubric files are rejected
        rubric_path.write_text(json.dumps({"accuracy": "only one"}), encoding="utf-8")
        with pytest.raises(ConfigError, match="missing axes"):
            load_config(config_path).load_rubric()

    def test_embedder_kinds(self, tmp_path):
        config_path = write_golden_fixture(tmp_path)
        cfg = load_config(config_path)
        assert isinstance(cfg.make_embedder(), HashingEmbedder)
        cfg.embedder_kind = "none"
        assert cfg.make_embedder() is None
        cfg.embedder_kind = "http"
        with pytest.raises(ConfigError, match="no url"):
            cfg.make_embedder()
        cfg.embedder_url = "http://example.invalid/embed"
        assert isinstance(cfg.make_embedder(), HttpEmbedder)


class TestParallelEmbedding:
    def test_worker_count_does_not_change_output(self):
        docs = [Document(doc_id=f"d{i}", paragraphs=(f"text {i} alpha", f"more {i}"))
                for i in range(40)]
        corpus = build_corpus(docs, WindowingConfig(5, 2))
        embedder = HashingEmbedder(dim=32)
        serial = compute_embeddings(corpus.windows, embedder, workers=1, batch_size=7)
        parallel = compute_embeddings(corpus.windows, embedder, workers=4, batch_size=7)
        np.testing.assert_array_equal(serial, parallel)


class _EmbedHandler(BaseHTTPRequestHandler):
    dim = 8
    fail = False

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        texts = json.loads(self.rfile.read(length))["texts"]
        if type(self).fail:
            self.send_response(500)
            self.end_headers()
            return
        vectors = []
        for text in texts:
            vec = [float(len(text) % 7)] + [1.0] * (type(self).dim - 1)
            vectors.append(vec)
        payload = json.dumps({"vectors": vectors}).encode()
        self.send_response(200)
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture
def embed_server():
    server = HTTPServer(("127.0.0.1", 0), _EmbedHandler)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    _EmbedHandler.fail = False
    yield f"http://127.0.0.1:{server.server_address[1]}/embed"
    server.shutdown()


class TestHttpEmbedder:
    def test_round_trip_normalizes(self, embed_server):
        embedder = HttpEmbedder(embed_server, dim=8, retries=2, backoff=0.01)
        out = embedder.embed(["hello", "worlds"])
        assert out.shape == (2, 8)
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-9)

    def test_dim_mismatch_is_config_error(self, embed_server):
        embedder = HttpEmbedder(embed_server, dim=16, retries=2, backoff=0.01)
        with pytest.raises(ConfigError, match="expected"):
            embedder.embed(["hello"])

    def test_failure_is_retriable_transport_error(self, embed_server):
        _EmbedHandler.fail = True
        embedder = HttpEmbedder(embed_server, dim=8, retries=2, backoff=0.01)
        with pytest.raises(TransportError, match="failed after 2 attempts"):
            embedder.embed(["hello"])
