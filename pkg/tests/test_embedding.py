import json
import struct
import threading

import httpx
import numpy as np
import pytest

from breachcast.embedding import (
    PMEB_HEADER,
    PRE_POOLED,
    TOKEN_LEVEL,
    EmbeddingProvider,
    FileProvider,
    HttpProvider,
    StateCache,
    SyntheticProvider,
    TableProvider,
    attention_pool,
    get_provider,
    http_fetch_pooled,
    pool_state,
    prompt_key,
    read_token_states,
    render_extraction_prompt,
    render_history_prompt,
    synthetic_token_states,
    write_token_states,
)
from breachcast.errors import (
    BadMagicError,
    DimensionMismatchError,
    DimensionOverflowError,
    EmbeddingError,
    EmptyPromptError,
    EmptyTaskError,
    InvalidConfigError,
    ProtocolError,
    TransportError,
    TruncatedFileError,
)
from breachcast.neural import Dense, DenseNet, score_network
from breachcast.trajectory import Turn


def test_extraction_prompt():
    assert render_extraction_prompt("T", "P", "C") == "[TASK]\nT\n\n[PREVIOUS_FEEDBACK]\nP\n\n[CURRENT_ACTION]\nC"
    assert render_extraction_prompt("T", "", "C") == "[TASK]\nT\n\n[PREVIOUS_FEEDBACK]\n\n\n[CURRENT_ACTION]\nC"
    with pytest.raises(EmptyTaskError):
        render_extraction_prompt("", "P", "C")


def test_history_prompt():
    a, b = Turn(0, "A", "x"), Turn(1, "B", "y")
    assert render_history_prompt("T", []) == "[TASK]\nT\n\n[HISTORY]\n"
    assert render_history_prompt("T", [a]) == "[TASK]\nT\n\n[HISTORY]\nA: x"
    assert render_history_prompt("T", [a, b]) == "[TASK]\nT\n\n[HISTORY]\nA: x\nB: y"
    with pytest.raises(EmptyTaskError):
        render_history_prompt("", [a])


def test_synthetic_states():
    first = synthetic_token_states("alpha beta gamma delta eps", 16, seed=3)
    assert first.shape == (5, 16)
    np.testing.assert_array_equal(first, synthetic_token_states("alpha beta gamma delta eps", 16, seed=3))
    assert np.all(np.abs(first) <= 1.0)
    assert not np.array_equal(first, synthetic_token_states("alpha beta gamma delta eps", 16, seed=4))


def test_synthetic_states_are_tokenwise():
    ab = synthetic_token_states("a b", 8)
    ba = synthetic_token_states("b a", 8)
    np.testing.assert_array_equal(ab[0], ba[1])
    np.testing.assert_array_equal(ab[1], ba[0])


def test_synthetic_states_errors():
    with pytest.raises(EmptyPromptError):
        synthetic_token_states("  \n ", 8)
    with pytest.raises(InvalidConfigError):
        synthetic_token_states("a", 1)


def test_pmeb_round_trip(tmp_path):
    matrix = np.arange(12, dtype=np.float64).reshape(3, 4) / 7.0
    write_token_states(matrix, tmp_path / "m.pmeb")
    back = read_token_states(tmp_path / "m.pmeb")
    np.testing.assert_array_equal(back, matrix.astype(np.float32).astype(np.float64))


def test_pmeb_bad_magic(tmp_path):
    path = tmp_path / "m.pmeb"
    path.write_bytes(struct.pack("<4sHII", b"NOPE", 1, 1, 1) + b"\0" * 4)
    with pytest.raises(BadMagicError):
        read_token_states(path)


def test_pmeb_truncated(tmp_path):
    path = tmp_path / "m.pmeb"
    path.write_bytes(PMEB_HEADER.pack(b"PMEB", 1, 10, 2) + b"\0" * (9 * 2 * 4))
    with pytest.raises(TruncatedFileError):
        read_token_states(path)
    path.write_bytes(b"PME")
    with pytest.raises(TruncatedFileError):
        read_token_states(path)


def test_pmeb_overflow(tmp_path):
    path = tmp_path / "m.pmeb"
    path.write_bytes(PMEB_HEADER.pack(b"PMEB", 1, 1 << 20, 1 << 20))
    with pytest.raises(DimensionOverflowError):
        read_token_states(path)


def constant_score_net(dim):
    return DenseNet([Dense(weights=np.zeros((1, dim)), bias=np.array([0.7]))])


def test_attention_pool_constant_scores_is_mean():
    matrix = np.random.default_rng(0).standard_normal((4, 3))
    np.testing.assert_allclose(attention_pool(matrix, constant_score_net(3)), matrix.mean(axis=0))


def test_attention_pool_single_row():
    row = np.array([[0.3, -2.0, 5.0]])
    np.testing.assert_allclose(attention_pool(row, score_network(3, 8, seed=1)), row[0])


def test_attention_pool_closed_form():
    net = DenseNet([Dense(weights=np.array([[np.log(3.0), 0.0]]), bias=np.zeros(1))])
    np.testing.assert_allclose(attention_pool(np.eye(2), net), [0.75, 0.25])


def test_attention_pool_convex_hull():
    rng = np.random.default_rng(5)
    net = score_network(4, 8, seed=2)
    for _ in range(50):
        matrix = rng.standard_normal((6, 4))
        pooled = attention_pool(matrix, net)
        assert np.all(pooled <= matrix.max(axis=0) + 1e-12)
        assert np.all(pooled >= matrix.min(axis=0) - 1e-12)


def test_attention_pool_dimension_check():
    with pytest.raises(DimensionMismatchError):
        attention_pool(np.zeros((2, 3)), score_network(4, 8))


def test_pool_state_modes():
    vector = np.array([1.0, 2.0])
    assert pool_state(vector, None) is vector
    np.testing.assert_allclose(pool_state(np.array([[1.0, 2.0], [3.0, 4.0]]), None), [2.0, 3.0])


def test_table_provider():
    states = {prompt_key("hello"): np.array([1.0, 2.0])}
    provider = TableProvider(states)
    np.testing.assert_array_equal(provider.encode("hello"), [1.0, 2.0])
    with pytest.raises(EmbeddingError):
        provider.encode("missing")


def test_file_provider(tmp_path):
    write_token_states(np.array([[1.0, 2.0, 3.0]]), tmp_path / (prompt_key("p") + ".pmeb"))
    write_token_states(np.ones((2, 3)), tmp_path / (prompt_key("q") + ".pmeb"))
    pooled = FileProvider(tmp_path)
    np.testing.assert_array_equal(pooled.encode("p"), [1.0, 2.0, 3.0])
    with pytest.raises(EmbeddingError):
        pooled.encode("q")
    with pytest.raises(EmbeddingError):
        pooled.encode("absent")
    assert FileProvider(tmp_path, mode=TOKEN_LEVEL).encode("q").shape == (2, 3)
    with pytest.raises(InvalidConfigError):
        FileProvider(tmp_path / "nowhere")


def json_handler(build):
    def handler(request):
        texts = json.loads(request.content)["texts"]
        return build(texts)
    return handler


def test_http_two_texts():
    transport = httpx.MockTransport(json_handler(
        lambda texts: httpx.Response(200, json={"embeddings": [[float(len(t)), 1.0, 0.0] for t in texts]})))
    provider = HttpProvider("http://embed.test/v1", transport=transport)
    states = http_fetch_pooled(provider, ["ab", "abc"])
    assert len(states) == 2
    assert states[0].shape == states[1].shape == (3,)
    assert states[1][0] == 3.0
    assert not provider.token_level


def test_http_count_mismatch():
    transport = httpx.MockTransport(json_handler(lambda texts: httpx.Response(200, json={"embeddings": [[1.0]]})))
    with pytest.raises(ProtocolError):
        http_fetch_pooled(HttpProvider("http://embed.test", transport=transport), ["a", "b"])


@pytest.mark.parametrize("response", [
    httpx.Response(500, json={}),
    httpx.Response(200, json={"vectors": []}),
    httpx.Response(200, json={"embeddings": [[1.0, 2.0], [1.0]]}),
    httpx.Response(200, content=b"not json"),
])
def test_http_protocol_errors(response):
    transport = httpx.MockTransport(lambda request: response)
    with pytest.raises(ProtocolError):
        http_fetch_pooled(HttpProvider("http://embed.test", transport=transport), ["a", "b"])


def test_http_unreachable_after_retries():
    calls = []

    def refuse(request):
        calls.append(request)
        raise httpx.ConnectError("connection refused", request=request)

    provider = HttpProvider("http://embed.test", retries=3, transport=httpx.MockTransport(refuse))
    with pytest.raises(TransportError) as info:
        provider.encode("a")
    assert info.value.attempts == 4
    assert len(calls) == 4


def test_get_provider(monkeypatch, tmp_path):
    monkeypatch.delenv("EMBEDDING_PROVIDER", raising=False)
    assert isinstance(get_provider(), SyntheticProvider)
    monkeypatch.setenv("EMBEDDING_PROVIDER", "file")
    assert isinstance(get_provider(directory=tmp_path), FileProvider)
    assert isinstance(get_provider("http", endpoint="http://embed.test"), HttpProvider)
    with pytest.raises(InvalidConfigError):
        get_provider("bert")
    with pytest.raises(InvalidConfigError):
        get_provider("file")


class CountingProvider(EmbeddingProvider):
    def __init__(self):
        super().__init__(PRE_POOLED)
        self.calls = 0
        self.lock = threading.Lock()

    def provider_name(self):
        return "counting"

    def _encode(self, prompts):
        with self.lock:
            self.calls += len(prompts)
        return [np.full(2, float(len(prompt))) for prompt in prompts]


def test_state_cache_encodes_once():
    provider = CountingProvider()
    cache = StateCache(provider)
    first = cache.encode_many(["a", "bb", "a"])
    second = cache.encode("bb")
    assert provider.calls == 2
    assert len(cache) == 2
    np.testing.assert_array_equal(first[1], second)
    assert not second.flags.writeable


def test_invalid_states_rejected():
    class Broken(CountingProvider):
        def _encode(self, prompts):
            return [np.array([np.nan, 1.0]) for _ in prompts]

    with pytest.raises(EmbeddingError):
        Broken().encode("a")
