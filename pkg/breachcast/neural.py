"""Small dense networks with hand-written backward passes.

Only what the three fixed architectures (attention scorer, projection head,
proactive head) and their losses need: dense layers, an optional leading
layer normalization, softmax, cosine/triplet/cross-entropy losses, Adam and a
central finite-difference gradient checker.
"""

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from breachcast.errors import (
    DimensionMismatchError,
    IndexOutOfRangeError,
    InvalidConfigError,
    ShapeMismatchError,
    ZeroVectorError,
)

logger = logging.getLogger(__name__)

ACTIVATIONS = ("identity", "relu", "tanh")
LAYER_NORM_EPS = 1e-5


@dataclass
class Dense:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise InvalidConfigError("unknown activation " + self.activation)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeMismatchError("bias {} does not match weights {}".format(self.bias.shape, self.weights.shape))


@dataclass
class LayerNorm:
    gain: np.ndarray
    offset: np.ndarray
    eps: float = LAYER_NORM_EPS


class DenseNet(object):
    """Feed-forward stack of :class:`Dense` layers with an optional leading :class:`LayerNorm`.

    :param layers: dense layers, consecutive dimensions must chain.
    :param norm: per-sample standardization applied to the input before the first layer.
    """

    def __init__(self, layers: Sequence[Dense], norm: Optional[LayerNorm] = None):
        if not layers:
            raise InvalidConfigError("a network needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.weights.shape[0] != nxt.weights.shape[1]:
                raise DimensionMismatchError("layer of width {} feeds a layer expecting {}".format(
                    prev.weights.shape[0], nxt.weights.shape[1]))
        if norm is not None and norm.gain.shape != (layers[0].weights.shape[1],):
            raise DimensionMismatchError("normalization width does not match the first layer")
        self.layers = list(layers)
        self.norm = norm

    @property
    def input_dim(self) -> int:
        return self.layers[0].weights.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weights.shape[0]

    def params(self) -> List[np.ndarray]:
        out = []
        if self.norm is not None:
            out += [self.norm.gain, self.norm.offset]
        for layer in self.layers:
            out += [layer.weights, layer.bias]
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "DenseNet":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "DenseNet":
        clone = self.copy()
        if clone.norm is not None:
            clone.norm.gain = clone.norm.gain.astype(dtype)
            clone.norm.offset = clone.norm.offset.astype(dtype)
        for layer in clone.layers:
            layer.weights = layer.weights.astype(dtype)
            layer.bias = layer.bias.astype(dtype)
        return clone

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Evaluate the network on one vector or on a batch of row vectors."""
        out, _ = self.forward_train(x)
        return out[0] if np.ndim(x) == 1 else out

    def forward_train(self, x: np.ndarray):
        """Forward pass keeping what :meth:`backward` needs."""
        h = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if h.ndim != 2 or h.shape[1] != self.input_dim:
            raise DimensionMismatchError("input of shape {} for a network expecting {} features".format(
                np.shape(x), self.input_dim))

        cache = {"norm": None, "layers": []}
        if self.norm is not None:
            centered = h - h.mean(axis=1, keepdims=True)
            inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=1, keepdims=True) + self.norm.eps)
            xhat = centered * inv_std
            cache["norm"] = (xhat, inv_std)
            h = xhat * self.norm.gain + self.norm.offset

        for layer in self.layers:
            z = h @ layer.weights.T + layer.bias
            if layer.activation == "relu":
                a = np.maximum(z, 0.0)
            elif layer.activation == "tanh":
                a = np.tanh(z)
            else:
                a = z
            cache["layers"].append((h, z, a))
            h = a
        return h, cache

    def backward(self, cache, d_out: np.ndarray) -> Tuple[List[np.ndarray], np.ndarray]:
        """Back-propagate ``d_out`` (batch x output) through a cached forward pass.

        :returns: gradients in :meth:`params` order and the gradient with respect to the input.
        """
        d = np.atleast_2d(d_out)
        layer_grads = []
        for layer, (h_in, z, a) in zip(reversed(self.layers), reversed(cache["layers"])):
            if d.shape != a.shape:
                raise ShapeMismatchError("upstream gradient {} for activations {}".format(d.shape, a.shape))
            if layer.activation == "relu":
                dz = d * (z > 0.0)
            elif layer.activation == "tanh":
                dz = d * (1.0 - a * a)
            else:
                dz = d
            layer_grads.append((dz.T @ h_in, dz.sum(axis=0)))
            d = dz @ layer.weights
        layer_grads.reverse()

        grads = []
        if self.norm is not None:
            xhat, inv_std = cache["norm"]
            grads += [(d * xhat).sum(axis=0), d.sum(axis=0)]
            dxhat = d * self.norm.gain
            d = inv_std * (dxhat - dxhat.mean(axis=1, keepdims=True)
                           - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        for d_weights, d_bias in layer_grads:
            grads += [d_weights, d_bias]
        return grads, d


def glorot_dense(rng: np.random.Generator, fan_in: int, fan_out: int, activation: str) -> Dense:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Dense(weights=rng.uniform(-limit, limit, size=(fan_out, fan_in)),
                 bias=np.zeros(fan_out),
                 activation=activation)


def build_net(sizes: Sequence[int], activations: Sequence[str], seed: int, layer_norm: bool = False) -> DenseNet:
    """Create a seeded network; ``sizes`` lists every width from input to output."""
    if len(sizes) != len(activations) + 1:
        raise InvalidConfigError("need one activation per layer")
    rng = np.random.default_rng(seed)
    layers = [glorot_dense(rng, fan_in, fan_out, act)
              for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations)]
    norm = LayerNorm(gain=np.ones(sizes[0]), offset=np.zeros(sizes[0])) if layer_norm else None
    return DenseNet(layers, norm)


def score_network(dim: int, hidden: int = 128, seed: int = 42) -> DenseNet:
    """Per-token attention scorer: dense(D->hidden, tanh) -> dense(hidden->1)."""
    return build_net([dim, hidden, 1], ["tanh", "identity"], seed)


def projection_head(dim: int, hidden: int = 2048, out: int = 1024, seed: int = 42) -> DenseNet:
    """Projection into the causal space: dense(d->hidden, relu) -> dense(hidden->out)."""
    return build_net([dim, hidden, out], ["relu", "identity"], seed)


def proactive_head(dim: int, n_clusters: int, hidden: int = 512, seed: int = 42) -> DenseNet:
    """Next-prototype predictor: layer-norm -> dense(d->hidden, relu) -> dense(hidden->K)."""
    return build_net([dim, hidden, n_clusters], ["relu", "identity"], seed, layer_norm=True)


# ==============================================================================================================
# functions and losses

def softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, shifted by the maximum for stability."""
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _norm(v: np.ndarray) -> float:
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise ZeroVectorError("cosine distance of a zero vector")
    return n


def cosine_distance(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DimensionMismatchError("vectors of shape {} and {}".format(u.shape, v.shape))
    return 1.0 - float(u @ v) / (_norm(u) * _norm(v))


def cosine_distance_grad(u: np.ndarray, v: np.ndarray):
    """Return ``(D(u, v), dD/du, dD/dv)``."""
    nu, nv = _norm(u), _norm(v)
    cos = float(u @ v) / (nu * nv)
    d_u = -(v / (nu * nv) - cos * u / (nu * nu))
    d_v = -(u / (nu * nv) - cos * v / (nv * nv))
    return 1.0 - cos, d_u, d_v


def triplet_loss(anchor: np.ndarray, positive: np.ndarray, negative: np.ndarray, margin: float = 1.0) -> float:
    if margin <= 0:
        raise InvalidConfigError("triplet margin must be positive")
    return max(0.0, cosine_distance(anchor, positive) - cosine_distance(anchor, negative) + margin)


def triplet_loss_batch(anchors: np.ndarray, positives: np.ndarray, negatives: np.ndarray, margin: float = 1.0):
    """Mean triplet loss over rows and its gradient with respect to each input matrix."""
    n = anchors.shape[0]
    d_a, d_p, d_n = np.zeros_like(anchors), np.zeros_like(positives), np.zeros_like(negatives)
    total = 0.0
    for i in range(n):
        dist_ap, g_a1, g_p = cosine_distance_grad(anchors[i], positives[i])
        dist_an, g_a2, g_n = cosine_distance_grad(anchors[i], negatives[i])
        loss = dist_ap - dist_an + margin
        if loss > 0.0:
            total += loss
            d_a[i] = (g_a1 - g_a2) / n
            d_p[i] = g_p / n
            d_n[i] = -g_n / n
    return total / n, d_a, d_p, d_n


def smoothed_cross_entropy(probs: np.ndarray, target_index: int, smoothing: float = 0.1) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    k = probs.shape[-1]
    if not 0 <= target_index < k:
        raise IndexOutOfRangeError("target {} outside {} classes".format(target_index, k))
    if not 0.0 <= smoothing < 1.0:
        raise InvalidConfigError("label smoothing must lie in [0, 1)")
    q = np.full(k, smoothing / k)
    q[target_index] += 1.0 - smoothing
    return float(-(q * np.log(probs)).sum())


def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray, smoothing: float = 0.0,
                          sample_weights: Optional[np.ndarray] = None):
    """Mean (optionally weighted) label-smoothed cross-entropy of row logits and its logit gradient."""
    n, k = logits.shape
    if np.any(targets < 0) or np.any(targets >= k):
        raise IndexOutOfRangeError("targets outside {} classes".format(k))
    probs = softmax(logits)
    q = np.full((n, k), smoothing / k)
    q[np.arange(n), targets] += 1.0 - smoothing
    weights = np.ones(n) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    log_probs = np.log(np.maximum(probs, np.finfo(np.float64).tiny))
    losses = -(q * log_probs).sum(axis=1)
    loss = float((weights * losses).sum() / n)
    d_logits = weights[:, None] * (probs - q) / n
    return loss, d_logits


def l2_normalize(y: np.ndarray):
    norms = np.linalg.norm(y, axis=-1, keepdims=True)
    return y / norms, norms


def l2_normalize_backward(unit: np.ndarray, norms: np.ndarray, d_unit: np.ndarray) -> np.ndarray:
    return (d_unit - unit * (unit * d_unit).sum(axis=-1, keepdims=True)) / norms


# ==============================================================================================================
# optimization

@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_adam: float = 1e-8
    step_count: int = 0
    first_moment: List[np.ndarray] = field(default_factory=list)
    second_moment: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], learning_rate: float, **kwargs) -> "AdamState":
        return cls(learning_rate=learning_rate,
                   first_moment=[np.zeros_like(p) for p in params],
                   second_moment=[np.zeros_like(p) for p in params],
                   **kwargs)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState) -> Sequence[np.ndarray]:
    """Bias-corrected Adam update, applied in place."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ShapeMismatchError("{} parameters, {} gradients, {} moment buffers".format(
            len(params), len(grads), len(state.first_moment)))
    for p, g, m in zip(params, grads, state.first_moment):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeMismatchError("parameter {} with gradient {}".format(p.shape, g.shape))

    state.step_count += 1
    t = state.step_count
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon_adam)
    return params


# ==============================================================================================================
# gradient verification

@dataclass
class GradCheckReport:
    errors: List[float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def grad_check(params: Sequence[np.ndarray],
               objective: Callable[[], Tuple[float, List[np.ndarray]]],
               tolerance: float = 1e-4,
               perturbation: float = 1e-5,
               max_entries: Optional[int] = None,
               seed: int = 0,
               floor: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    :param params: parameter arrays, perturbed in place and restored.
    :param objective: returns ``(loss, grads)`` for the current parameter values.
    :param max_entries: check at most this many entries of each array (sampled), all when ``None``.
    :param floor: denominator floor of the relative error, keeps vanishing gradients comparable.
    """
    _, analytic = objective()
    analytic = [np.array(g, dtype=np.float64) for g in analytic]
    rng = np.random.default_rng(seed)
    errors = []
    for param, grad in zip(params, analytic):
        flat = param.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = rng.choice(flat.size, size=max_entries, replace=False)
        worst = 0.0
        for idx in indices:
            original = flat[idx]
            flat[idx] = original + perturbation
            plus, _ = objective()
            flat[idx] = original - perturbation
            minus, _ = objective()
            flat[idx] = original
            numeric = (plus - minus) / (2.0 * perturbation)
            exact = grad.reshape(-1)[idx]
            worst = max(worst, abs(exact - numeric) / max(abs(exact), abs(numeric), floor))
        errors.append(worst)
    report = GradCheckReport(errors=errors, tolerance=tolerance)
    logger.debug("Gradient check max relative error %.3e", report.max_error)
    return report
