"""Latent states for dialogue text.

Providers turn rendered prompts into either a token-state matrix (``token_level``) or a
single state vector (``pre_pooled``). Layer pooling across the backbone, when there is a
backbone, is the provider's job: the matrices handed to :func:`attention_pool` are already
layer-pooled.

The provider is selected with :func:`get_provider`, by name or through the
``EMBEDDING_PROVIDER`` environment variable.
"""

import hashlib
import logging
import os
import struct
import threading
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import httpx
import numpy as np

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
from breachcast.neural import DenseNet, softmax
from breachcast.trajectory import Turn

logger = logging.getLogger(__name__)

TOKEN_LEVEL = "token_level"
PRE_POOLED = "pre_pooled"

PMEB_MAGIC = b"PMEB"
PMEB_VERSION = 1
PMEB_HEADER = struct.Struct("<4sHII")
PMEB_MAX_ELEMENTS = 1 << 28


# ==============================================================================================================
# prompt templates

def render_extraction_prompt(task: str, previous: str, current: str) -> str:
    if not task:
        raise EmptyTaskError("task text is empty")
    return "[TASK]\n{}\n\n[PREVIOUS_FEEDBACK]\n{}\n\n[CURRENT_ACTION]\n{}".format(task, previous, current)


def render_history_prompt(task: str, turns: Sequence[Turn]) -> str:
    if not task:
        raise EmptyTaskError("task text is empty")
    joined = "\n".join("{}: {}".format(turn.agent, turn.content) for turn in turns)
    return "[TASK]\n{}\n\n[HISTORY]\n{}".format(task, joined)


def prompt_key(prompt: str) -> str:
    """File-system safe identifier of a prompt."""
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:32]


# ==============================================================================================================
# synthetic token states

def _hash64(token: str) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")


def synthetic_token_states(prompt: str, dim: int, seed: int = 0) -> np.ndarray:
    """Deterministic pseudo token states: one uniform(-1, 1) row per whitespace token."""
    if dim < 2:
        raise InvalidConfigError("synthetic states need dim >= 2")
    tokens = prompt.split()
    if not tokens:
        raise EmptyPromptError("prompt has no tokens")
    rows = [np.random.default_rng(_hash64(token) ^ (seed & 0xFFFFFFFFFFFFFFFF)).uniform(-1.0, 1.0, size=dim)
            for token in tokens]
    return np.stack(rows)


# ==============================================================================================================
# PMEB matrices

def write_token_states(matrix: np.ndarray, path: Union[str, Path]) -> None:
    matrix = np.atleast_2d(np.asarray(matrix))
    rows, cols = matrix.shape
    if rows < 1 or cols < 1:
        raise DimensionMismatchError("cannot store an empty matrix")
    payload = np.ascontiguousarray(matrix, dtype="<f4").tobytes()
    Path(path).write_bytes(PMEB_HEADER.pack(PMEB_MAGIC, PMEB_VERSION, rows, cols) + payload)


def decode_token_states(data: bytes, origin: str = "<bytes>") -> np.ndarray:
    if len(data) < PMEB_HEADER.size:
        raise TruncatedFileError("{}: header is incomplete".format(origin))
    magic, version, rows, cols = PMEB_HEADER.unpack_from(data)
    if magic != PMEB_MAGIC:
        raise BadMagicError("{}: bad magic {!r}".format(origin, magic))
    if version != PMEB_VERSION:
        raise EmbeddingError("{}: unsupported PMEB version {}".format(origin, version))
    if rows * cols > PMEB_MAX_ELEMENTS:
        raise DimensionOverflowError("{}: {}x{} exceeds the element limit".format(origin, rows, cols))
    expected = rows * cols * 4
    payload = data[PMEB_HEADER.size:]
    if len(payload) < expected:
        raise TruncatedFileError("{}: payload holds {} of {} bytes".format(origin, len(payload), expected))
    return np.frombuffer(payload[:expected], dtype="<f4").reshape(rows, cols).astype(np.float64)


def read_token_states(path: Union[str, Path]) -> np.ndarray:
    return decode_token_states(Path(path).read_bytes(), origin=str(path))


# ==============================================================================================================
# providers

class EmbeddingProvider(object):
    """Base class of every provider.

    :param mode: ``token_level`` when :meth:`encode` returns a token-state matrix,
        ``pre_pooled`` when it returns one state vector.

    A child class implements :meth:`_encode` and :meth:`provider_name`.
    """

    def __init__(self, mode: str):
        if mode not in (TOKEN_LEVEL, PRE_POOLED):
            raise InvalidConfigError("unknown provider mode " + mode)
        self.mode = mode

    @property
    def token_level(self) -> bool:
        return self.mode == TOKEN_LEVEL

    def provider_name(self) -> str:
        raise NotImplementedError()

    def _encode(self, prompts: List[str]) -> List[np.ndarray]:
        raise NotImplementedError()

    def encode(self, prompt: str) -> np.ndarray:
        return self.encode_many([prompt])[0]

    def encode_many(self, prompts: Sequence[str]) -> List[np.ndarray]:
        if not prompts:
            return []
        states = self._encode(list(prompts))
        for state in states:
            expected_ndim = 2 if self.token_level else 1
            if state.ndim != expected_ndim or not np.all(np.isfinite(state)):
                raise EmbeddingError("{} returned an invalid state of shape {}".format(
                    self.provider_name(), state.shape))
        return states


class SyntheticProvider(EmbeddingProvider):
    """Token states from :func:`synthetic_token_states`; needs no model."""

    def __init__(self, dim: int = 64, seed: int = 0):
        super().__init__(TOKEN_LEVEL)
        self.dim = dim
        self.seed = seed

    def provider_name(self) -> str:
        return "synthetic (dim={}, seed={})".format(self.dim, self.seed)

    def _encode(self, prompts):
        return [synthetic_token_states(prompt, self.dim, self.seed) for prompt in prompts]


class TableProvider(EmbeddingProvider):
    """Pre-computed states looked up by :func:`prompt_key`."""

    def __init__(self, states: Mapping[str, np.ndarray], mode: str = PRE_POOLED):
        super().__init__(mode)
        self.states = states

    def provider_name(self) -> str:
        return "table ({} states)".format(len(self.states))

    def _lookup(self, key: str, prompt: str) -> np.ndarray:
        try:
            return self.states[key]
        except KeyError:
            raise EmbeddingError("no state stored for prompt {}: {!r}".format(key, prompt[:60])) from None

    def _encode(self, prompts):
        return [np.asarray(self._lookup(prompt_key(prompt), prompt), dtype=np.float64) for prompt in prompts]


class FileProvider(EmbeddingProvider):
    """States read from ``<directory>/<prompt key>.pmeb``.

    In ``pre_pooled`` mode every file holds a 1 x d matrix. The files are expected to be
    layer-pooled already.
    """

    def __init__(self, directory: Union[str, Path], mode: str = PRE_POOLED):
        super().__init__(mode)
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise InvalidConfigError("states directory {} does not exist".format(self.directory))

    def provider_name(self) -> str:
        return "file ({})".format(self.directory)

    def _encode(self, prompts):
        states = []
        for prompt in prompts:
            path = self.directory / (prompt_key(prompt) + ".pmeb")
            try:
                matrix = read_token_states(path)
            except OSError as exc:
                raise EmbeddingError("cannot read {}: {}".format(path, exc)) from exc
            if not self.token_level:
                if matrix.shape[0] != 1:
                    raise EmbeddingError("{} holds {} rows, a pooled state needs 1".format(path, matrix.shape[0]))
                matrix = matrix[0]
            states.append(matrix)
        return states


class HttpProvider(EmbeddingProvider):
    """Pooled sentence vectors from an HTTP embedding service.

    The service receives ``{"texts": [...]}`` and answers ``{"embeddings": [[...], ...]}``.

    :param endpoint: URL receiving the POST.
    :param timeout: seconds per request.
    :param retries: additional attempts after a transport failure.
    :param transport: optional ``httpx`` transport, used by tests.
    """

    def __init__(self, endpoint: str, timeout: float = 30.0, retries: int = 2,
                 transport: Optional[httpx.BaseTransport] = None):
        super().__init__(PRE_POOLED)
        if not endpoint:
            raise InvalidConfigError("the http provider needs an endpoint")
        if retries < 0:
            raise InvalidConfigError("retries cannot be negative")
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries
        self.transport = transport

    def provider_name(self) -> str:
        return "http ({})".format(self.endpoint)

    def _post(self, texts: List[str]) -> httpx.Response:
        attempts = self.retries + 1
        last_error = None
        with httpx.Client(timeout=self.timeout, transport=self.transport) as client:
            for attempt in range(1, attempts + 1):
                try:
                    return client.post(self.endpoint, json={"texts": texts})
                except httpx.TransportError as exc:
                    last_error = exc
                    logger.warning("Embedding request %d/%d to %s failed: %s", attempt, attempts, self.endpoint, exc)
        raise TransportError("cannot reach {} after {} attempt(s): {}".format(
            self.endpoint, attempts, last_error), attempts=attempts) from last_error

    def _encode(self, prompts):
        return http_fetch_pooled(self, prompts)


def http_fetch_pooled(provider: HttpProvider, texts: Sequence[str]) -> List[np.ndarray]:
    """POST ``texts`` and return one pooled state per text."""
    if not texts:
        raise EmptyPromptError("nothing to embed")
    response = provider._post(list(texts))
    if response.status_code != 200:
        raise ProtocolError("{} answered HTTP {}".format(provider.endpoint, response.status_code))
    try:
        vectors = response.json()["embeddings"]
    except (ValueError, KeyError, TypeError) as exc:
        raise ProtocolError("response lacks an 'embeddings' array") from exc
    if not isinstance(vectors, list) or len(vectors) != len(texts):
        raise ProtocolError("expected {} embeddings, got {}".format(
            len(texts), len(vectors) if isinstance(vectors, list) else type(vectors).__name__))
    try:
        states = [np.asarray(vector, dtype=np.float64) for vector in vectors]
    except (ValueError, TypeError) as exc:
        raise ProtocolError("embeddings are not numeric") from exc
    dims = {state.shape for state in states}
    if len(dims) != 1 or states[0].ndim != 1 or states[0].size == 0:
        raise ProtocolError("embeddings have inconsistent shapes {}".format(sorted(dims)))
    return states


SUPPORTED_PROVIDERS = ["synthetic", "file", "http"]


def get_provider(name: Optional[str] = None, **kwargs) -> EmbeddingProvider:
    """Create the provider ``name``, or the one named by ``EMBEDDING_PROVIDER`` (default ``synthetic``).

    Keyword arguments not used by the selected provider are ignored.
    """
    name = name or os.getenv("EMBEDDING_PROVIDER", "synthetic")
    if name not in SUPPORTED_PROVIDERS:
        raise InvalidConfigError("Set EMBEDDING_PROVIDER variable. Supported: " + ", ".join(SUPPORTED_PROVIDERS))

    if name == "synthetic":
        return SyntheticProvider(dim=kwargs.get("dim") or 64, seed=kwargs.get("seed") or 0)
    if name == "file":
        directory = kwargs.get("directory")
        if directory is None:
            raise InvalidConfigError("the file provider needs a states directory")
        return FileProvider(directory, mode=kwargs.get("mode") or PRE_POOLED)
    retries = kwargs.get("retries")
    return HttpProvider(kwargs.get("endpoint") or "", timeout=kwargs.get("timeout") or 30.0,
                        retries=2 if retries is None else retries, transport=kwargs.get("transport"))


class StateCache(object):
    """Encoded states keyed by ``(provider, prompt key)``, shared between stages and threads."""

    def __init__(self, provider: EmbeddingProvider):
        self.provider = provider
        self._states: Dict[Tuple[str, str], np.ndarray] = {}
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._states)

    def encode(self, prompt: str) -> np.ndarray:
        return self.encode_many([prompt])[0]

    def encode_many(self, prompts: Sequence[str]) -> List[np.ndarray]:
        name = self.provider.provider_name()
        keys = [(name, prompt_key(prompt)) for prompt in prompts]
        missing = [(key, prompt) for key, prompt in zip(keys, prompts) if key not in self._states]
        if missing:
            unique = dict(missing)
            states = self.provider.encode_many(list(unique.values()))
            with self._lock:
                for key, state in zip(unique, states):
                    state.setflags(write=False)
                    self._states.setdefault(key, state)
        return [self._states[key] for key in keys]


# ==============================================================================================================
# attention pooling

def attention_pool_train(matrix: np.ndarray, score_net: Optional[DenseNet]):
    """Pool token rows with weights ``softmax(score_net(row))``; mean pooling without a net."""
    matrix = np.atleast_2d(matrix)
    if score_net is None:
        return matrix.mean(axis=0), None
    if score_net.input_dim != matrix.shape[1] or score_net.output_dim != 1:
        raise DimensionMismatchError("score net {}->{} for token states of width {}".format(
            score_net.input_dim, score_net.output_dim, matrix.shape[1]))
    scores, net_cache = score_net.forward_train(matrix)
    alpha = softmax(scores[:, 0])
    return alpha @ matrix, (matrix, alpha, net_cache)


def attention_pool(matrix: np.ndarray, score_net: Optional[DenseNet] = None) -> np.ndarray:
    return attention_pool_train(matrix, score_net)[0]


def attention_pool_backward(score_net: DenseNet, cache, d_out: np.ndarray) -> List[np.ndarray]:
    """Score-net gradients of a pooled state; the token states themselves stay frozen."""
    matrix, alpha, net_cache = cache
    d_alpha = matrix @ d_out
    d_scores = alpha * (d_alpha - alpha @ d_alpha)
    grads, _ = score_net.backward(net_cache, d_scores[:, None])
    return grads


def pool_state(state: np.ndarray, score_net: Optional[DenseNet]) -> np.ndarray:
    """Collapse a provider output to one state vector, whatever the provider mode."""
    return state if state.ndim == 1 else attention_pool(state, score_net)
