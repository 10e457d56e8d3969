"""Provider contract tests and the dilution simulator oracle checks."""

import json
import math
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apr.embedding import (
    FixtureProvider,
    HashingProvider,
    LengthBiasResult,
    ProviderConfig,
    RemoteProvider,
    cosine,
    make_provider,
    normalize,
    simulate_dilution,
    simulate_length_bias,
)
from apr.errors import (
    DimensionMismatch,
    EmptyText,
    InvalidParams,
    IoError,
    RemoteUnavailable,
)

texts = st.text(min_size=1, max_size=40).filter(lambda s: s.strip())


class TestHashingProvider:
    def test_same_string_identical_vectors(self):
        p = HashingProvider(dimension=64, seed=0)
        a = p.embed_one("same input")
        b = p.embed_one("same input")
        assert np.array_equal(a, b)

    def test_pure_function_of_seed_and_text(self):
        a = HashingProvider(dimension=64, seed=7).embed_one("alpha")
        b = HashingProvider(dimension=64, seed=7).embed_one("alpha")
        c = HashingProvider(dimension=64, seed=8).embed_one("alpha")
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    @given(text=texts)
    @settings(max_examples=60, deadline=None)
    def test_unit_norm(self, text):
        p = HashingProvider(dimension=32, seed=3)
        vec = p.embed_one(text)
        assert vec.dtype == np.float32
        assert abs(float(np.linalg.norm(vec)) - 1.0) <= 1e-5

    def test_similar_strings_correlate(self):
        p = HashingProvider(dimension=64, seed=0)
        near = cosine(p.embed_one("acme corporation"), p.embed_one("acme corp"))
        far = cosine(p.embed_one("acme corporation"), p.embed_one("zyxw 9911"))
        assert near > far

    def test_empty_text_rejected(self):
        p = HashingProvider(dimension=16, seed=0)
        with pytest.raises(EmptyText):
            p.embed([""])
        with pytest.raises(EmptyText):
            p.embed(["ok", "   "])

    def test_batch_order_preserved(self):
        p = HashingProvider(dimension=32, seed=0)
        batch = p.embed(["one", "two", "three"])
        assert np.array_equal(batch[1], p.embed_one("two"))

    def test_call_counters(self):
        p = HashingProvider(dimension=16, seed=0)
        p.embed(["a", "b"])
        p.embed_one("c")
        assert p.calls == 2
        assert p.texts_embedded == 3


class TestFixtureProvider:
    def test_orthogonal_basis(self):
        p = FixtureProvider(vectors={"A": [1, 0, 0], "B": [0, 1, 0]})
        assert cosine(p.embed_one("A"), p.embed_one("B")) == pytest.approx(0.0)

    def test_renormalizes_on_load(self, tmp_path):
        path = tmp_path / "vecs.json"
        path.write_text(json.dumps({"A": [3.0, 4.0]}))
        p = FixtureProvider(path=str(path))
        assert float(np.linalg.norm(p.embed_one("A"))) == pytest.approx(1.0, abs=1e-6)

    def test_missing_key_is_loud(self):
        p = FixtureProvider(vectors={"A": [1, 0]})
        with pytest.raises(IoError):
            p.embed_one("unknown")

    def test_mixed_dimensions_rejected(self):
        with pytest.raises(DimensionMismatch):
            FixtureProvider(vectors={"A": [1, 0], "B": [1, 0, 0]})


class TestCosine:
    def test_self_similarity(self):
        p = HashingProvider(dimension=32, seed=0)
        v = p.embed_one("anything")
        assert cosine(v, v) == pytest.approx(1.0, abs=1e-6)

    def test_halfway_vector(self):
        # cos(e1, normalize(e1 + e2)) = 1/sqrt(2)
        e1 = np.array([1.0, 0.0, 0.0], dtype=np.float32)
        e2 = np.array([0.0, 1.0, 0.0], dtype=np.float32)
        assert cosine(e1, normalize(e1 + e2)) == pytest.approx(0.7071, abs=1e-4)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            cosine(np.ones(3), np.ones(4))

    def test_symmetry(self):
        p = HashingProvider(dimension=32, seed=1)
        a, b = p.embed_one("left"), p.embed_one("right")
        assert cosine(a, b) == pytest.approx(cosine(b, a), abs=1e-9)


class _EmbedHandler(BaseHTTPRequestHandler):
    fail_first = 0
    status = 200
    payload = None
    attempts = 0

    def do_POST(self):
        cls = type(self)
        cls.attempts += 1
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        if cls.attempts <= cls.fail_first:
            self.send_response(503)
            self.end_headers()
            return
        if cls.status != 200:
            self.send_response(cls.status)
            self.end_headers()
            return
        doc = cls.payload if cls.payload is not None else {
            "vectors": [[2.0, 0.0] for _ in body["texts"]]}
        data = json.dumps(doc).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def embed_server():
    handler = type("Handler", (_EmbedHandler,), {"attempts": 0})
    server = ThreadingHTTPServer(("127.0.0.1", 0), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}/embed", handler
    server.shutdown()


class TestRemoteProvider:
    def test_vectors_renormalized(self, embed_server):
        url, _ = embed_server
        p = RemoteProvider(url, dimension=2, backoff=0.001)
        vec = p.embed_one("x")
        assert float(np.linalg.norm(vec)) == pytest.approx(1.0, abs=1e-5)
        assert vec[0] == pytest.approx(1.0)

    def test_retries_transient_5xx(self, embed_server):
        url, handler = embed_server
        handler.fail_first = 2
        p = RemoteProvider(url, dimension=2, max_retries=2, backoff=0.001)
        assert p.embed(["a"]).shape == (1, 2)
        assert handler.attempts == 3

    def test_exhausted_retries_carry_status(self, embed_server):
        url, handler = embed_server
        handler.fail_first = 99
        p = RemoteProvider(url, dimension=2, max_retries=1, backoff=0.001)
        with pytest.raises(RemoteUnavailable) as err:
            p.embed(["a"])
        assert err.value.status == 503
        assert handler.attempts == 2

    def test_client_error_fails_fast(self, embed_server):
        url, handler = embed_server
        handler.status = 403
        p = RemoteProvider(url, dimension=2, max_retries=3, backoff=0.001)
        with pytest.raises(RemoteUnavailable) as err:
            p.embed(["a"])
        assert err.value.status == 403
        assert handler.attempts == 1

    def test_malformed_response(self, embed_server):
        url, handler = embed_server
        handler.payload = {"oops": []}
        p = RemoteProvider(url, dimension=2, backoff=0.001)
        with pytest.raises(RemoteUnavailable):
            p.embed(["a"])

    def test_wrong_shape_rejected(self, embed_server):
        url, handler = embed_server
        handler.payload = {"vectors": [[1.0, 0.0, 0.0]]}
        p = RemoteProvider(url, dimension=2, backoff=0.001)
        with pytest.raises(DimensionMismatch):
            p.embed(["a"])

    def test_connection_refused_status_none(self):
        p = RemoteProvider("http://127.0.0.1:1/embed", dimension=2,
                           max_retries=0, timeout=0.2, backoff=0.001)
        with pytest.raises(RemoteUnavailable) as err:
            p.embed(["a"])
        assert err.value.status is None


class TestMakeProvider:
    def test_kinds(self, tmp_path):
        path = tmp_path / "f.json"
        path.write_text(json.dumps({"A": [1, 0]}))
        assert isinstance(make_provider(ProviderConfig(kind="hashing")), HashingProvider)
        assert isinstance(
            make_provider(ProviderConfig(kind="fixture", dimension=2,
                                         fixture_path=str(path))),
            FixtureProvider)
        assert isinstance(
            make_provider(ProviderConfig(kind="remote", endpoint="http://x/embed")),
            RemoteProvider)

    def test_unknown_kind(self):
        with pytest.raises(InvalidParams):
            ProviderConfig(kind="psychic")


class TestDilution:
    def test_no_irrelevant_tokens_is_best(self):
        points = simulate_dilution(m=8, n_values=[8, 16, 32], sigma=0.5,
                                   trials=2000, seed=1)
        best_n, best_snr = max(points, key=lambda p: p[1])
        assert best_n == 8
        assert best_snr == points[0][1]

    def test_doubling_n_halves_snr(self):
        points = dict(simulate_dilution(m=4, n_values=[16, 32], sigma=0.5,
                                        trials=10_000, seed=2))
        ratio = points[32] / points[16]
        assert abs(ratio - 0.5) <= 0.15 * 0.5

    def test_zero_noise_gives_infinite_snr(self):
        points = simulate_dilution(m=2, n_values=[8], sigma=0.0, trials=1000, seed=0)
        assert points[0][1] == math.inf

    def test_param_validation(self):
        with pytest.raises(InvalidParams):
            simulate_dilution(m=0, n_values=[8], sigma=0.1, trials=1000)
        with pytest.raises(InvalidParams):
            simulate_dilution(m=4, n_values=[2], sigma=0.1, trials=1000)
        with pytest.raises(InvalidParams):
            simulate_dilution(m=2, n_values=[8], sigma=0.1, trials=10)
        with pytest.raises(InvalidParams):
            simulate_dilution(m=2, n_values=[8], sigma=-1.0, trials=1000)

    def test_length_bias_means(self):
        res = simulate_length_bias(m=4, n_short=8, n_long=64, sigma=0.3,
                                   trials=1000, seed=3)
        assert isinstance(res, LengthBiasResult)
        assert res.mean_short > res.mean_long
        assert 0.0 <= res.short_win_fraction <= 1.0
