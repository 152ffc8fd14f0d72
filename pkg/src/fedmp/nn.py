"""Minimal dense neural-network substrate.

Layered feed-forward models made of affine / relu / flatten layers, split at a
configurable index into a feature extractor and a classifier head. Forward and
backward passes are explicit so that gradients can be started or stopped at the
split point, which the federation losses rely on. Everything is float64 and
fully deterministic given a seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

AFFINE = "affine"
RELU = "relu"
FLATTEN = "flatten"


class ShapeError(ValueError):
    """Raised when an input or parameter shape does not match the network spec."""


def affine(n_in: int, n_out: int) -> tuple:
    return (AFFINE, int(n_in), int(n_out))


def relu() -> tuple:
    return (RELU,)


def flatten() -> tuple:
    return (FLATTEN,)


@dataclass(frozen=True)
class NetworkSpec:
    """Layer list plus the extractor/classifier split.

    Layers ``[0, split_index)`` form the feature extractor; layers from
    ``split_index`` onward form the classifier head. The last layer must be an
    affine layer whose output width equals ``num_classes``.
    """

    layers: tuple
    split_index: int
    num_classes: int

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("network needs at least one layer")
        if not 0 < self.split_index < len(self.layers):
            raise ShapeError(
                f"split_index {self.split_index} outside (0, {len(self.layers)})"
            )
        last = self.layers[-1]
        if last[0] != AFFINE or last[2] != self.num_classes:
            raise ShapeError("last layer must be affine with width num_classes")
        width = None
        for idx, layer in enumerate(self.layers):
            if layer[0] == AFFINE:
                if width is not None and layer[1] != width:
                    raise ShapeError(
                        f"layer {idx}: expects input width {layer[1]}, got {width}"
                    )
                width = layer[2]
            elif layer[0] not in (RELU, FLATTEN):
                raise ShapeError(f"layer {idx}: unknown kind {layer[0]!r}")

    @property
    def input_dim(self) -> int:
        for layer in self.layers:
            if layer[0] == AFFINE:
                return layer[1]
        raise ShapeError("network has no affine layer")

    def width_after(self, stop: int) -> int:
        """Output width of the sub-network formed by layers ``[0, stop)``."""
        width = self.input_dim
        for layer in self.layers[:stop]:
            if layer[0] == AFFINE:
                width = layer[2]
        return width

    @property
    def embedding_dim(self) -> int:
        return self.width_after(self.split_index)


def mlp_spec(input_dim: int, extractor_hidden, classifier_hidden, num_classes: int) -> NetworkSpec:
    """Build the default split MLP: affine-relu blocks, then the class head."""
    layers = []
    width = input_dim
    for h in extractor_hidden:
        layers += [affine(width, h), relu()]
        width = h
    split = len(layers)
    if split == 0:
        raise ShapeError("extractor needs at least one hidden layer")
    for h in classifier_hidden:
        layers += [affine(width, h), relu()]
        width = h
    layers.append(affine(width, num_classes))
    return NetworkSpec(layers=tuple(layers), split_index=split, num_classes=num_classes)


class Parameters:
    """Per-layer weight/bias tensors addressable by (layer index, kind)."""

    __slots__ = ("values",)

    def __init__(self, values: dict[tuple[int, str], np.ndarray]):
        self.values = values

    def __getitem__(self, key):
        return self.values[key]

    def __setitem__(self, key, value):
        self.values[key] = value

    def keys(self):
        return sorted(self.values.keys())

    def copy(self) -> "Parameters":
        return Parameters({k: v.copy() for k, v in self.values.items()})

    def zeros_like(self) -> "Parameters":
        return Parameters({k: np.zeros_like(v) for k, v in self.values.items()})

    def allclose(self, other: "Parameters", **kw) -> bool:
        return self.keys() == other.keys() and all(
            np.allclose(self.values[k], other.values[k], **kw) for k in self.keys()
        )

    def equal(self, other: "Parameters") -> bool:
        return self.keys() == other.keys() and all(
            np.array_equal(self.values[k], other.values[k]) for k in self.keys()
        )

    def count(self) -> int:
        return sum(v.size for v in self.values.values())

    def add_scaled(self, other: "Parameters", scale: float) -> None:
        for k in other.values:
            self.values[k] += scale * other.values[k]

    def partition(self, split_index: int) -> tuple["Parameters", "Parameters"]:
        """Split into extractor and classifier halves by layer index."""
        ext = {k: v for k, v in self.values.items() if k[0] < split_index}
        cls = {k: v for k, v in self.values.items() if k[0] >= split_index}
        return Parameters(ext), Parameters(cls)


def init_params(spec: NetworkSpec, seed: int) -> Parameters:
    """Glorot-uniform initialization, seeded."""
    rng = np.random.default_rng(seed)
    values = {}
    for idx, layer in enumerate(spec.layers):
        if layer[0] != AFFINE:
            continue
        _, n_in, n_out = layer
        a = np.sqrt(6.0 / (n_in + n_out))
        values[(idx, "W")] = rng.uniform(-a, a, size=(n_in, n_out))
        values[(idx, "b")] = np.zeros(n_out)
    return Parameters(values)


def check_params(params: Parameters, spec: NetworkSpec) -> None:
    for idx, layer in enumerate(spec.layers):
        if layer[0] != AFFINE:
            continue
        _, n_in, n_out = layer
        w = params.values.get((idx, "W"))
        b = params.values.get((idx, "b"))
        if w is None or w.shape != (n_in, n_out):
            raise ShapeError(f"layer {idx}: weight shape mismatch (want {(n_in, n_out)})")
        if b is None or b.shape != (n_out,):
            raise ShapeError(f"layer {idx}: bias shape mismatch (want {(n_out,)})")


def forward(params: Parameters, spec: NetworkSpec, x: np.ndarray,
            start: int = 0, stop: int | None = None):
    """Run layers ``[start, stop)``; returns (output, cache) for backward."""
    if stop is None:
        stop = len(spec.layers)
    out = np.asarray(x, dtype=np.float64)
    if out.ndim == 1:
        out = out[None, :]
    cache = []
    for idx in range(start, stop):
        layer = spec.layers[idx]
        kind = layer[0]
        if kind == AFFINE:
            _, n_in, n_out = layer
            if out.shape[1] != n_in:
                raise ShapeError(
                    f"layer {idx}: input width {out.shape[1]}, expected {n_in}"
                )
            cache.append((idx, out))
            out = out @ params[(idx, "W")] + params[(idx, "b")]
        elif kind == RELU:
            cache.append((idx, out))
            out = np.maximum(out, 0.0)
        else:  # flatten
            cache.append((idx, out.shape))
            out = out.reshape(out.shape[0], -1)
    return out, cache


def backward(params: Parameters, spec: NetworkSpec, cache, upstream: np.ndarray):
    """Reverse-mode pass over the layers recorded in ``cache``.

    Returns (grads, grad_input). ``grads`` only holds entries for the layers
    covered by the cache, so a classifier-only cache yields classifier-only
    gradients (nothing flows into the extractor).
    """
    grad = np.asarray(upstream, dtype=np.float64)
    grads = {}
    for entry in reversed(cache):
        idx, saved = entry
        kind = spec.layers[idx][0]
        if kind == AFFINE:
            x = saved
            if grad.shape != (x.shape[0], params[(idx, "W")].shape[1]):
                raise ShapeError(f"layer {idx}: upstream gradient shape mismatch")
            grads[(idx, "W")] = x.T @ grad
            grads[(idx, "b")] = grad.sum(axis=0)
            grad = grad @ params[(idx, "W")].T
        elif kind == RELU:
            grad = grad * (saved > 0.0)
        else:  # flatten
            grad = grad.reshape(saved)
    return Parameters(grads), grad


def forward_extractor(params: Parameters, spec: NetworkSpec, x: np.ndarray):
    return forward(params, spec, x, 0, spec.split_index)


def forward_classifier(params: Parameters, spec: NetworkSpec, u: np.ndarray):
    return forward(params, spec, u, spec.split_index, None)


def forward_full(params: Parameters, spec: NetworkSpec, x: np.ndarray):
    """Extractor then classifier; bit-for-bit the composition of the two."""
    u, cache_f = forward_extractor(params, spec, x)
    logits, cache_c = forward_classifier(params, spec, u)
    return logits, cache_f + cache_c


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood plus its exact logits gradient."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if n < 1:
        raise ValueError("batch must be nonempty")
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(n), labels].mean()
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return float(loss), grad


@dataclass
class AdamState:
    """Adam accumulators plus hyperparameters; one instance per model."""

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4
    step: int = 0
    m: Parameters | None = None
    v: Parameters | None = None

    def ensure(self, params: Parameters) -> None:
        if self.m is None:
            self.m = params.zeros_like()
            self.v = params.zeros_like()


def adam_step(params: Parameters, grads: Parameters, state: AdamState) -> None:
    """One Adam update in place; weight decay enters as an additive L2 term."""
    state.ensure(params)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for key in params.keys():
        g = grads.values.get(key)
        g = np.zeros_like(params[key]) if g is None else g
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient at {key}")
        if state.weight_decay:
            g = g + state.weight_decay * params[key]
        state.m[key] = b1 * state.m[key] + (1 - b1) * g
        state.v[key] = b2 * state.v[key] + (1 - b2) * g * g
        m_hat = state.m[key] / (1 - b1**t)
        v_hat = state.v[key] / (1 - b2**t)
        params[key] -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)


def sgd_step(params: Parameters, grads: Parameters, state: AdamState) -> None:
    """Plain SGD fallback sharing the AdamState hyperparameter container."""
    state.step += 1
    for key in params.keys():
        g = grads.values.get(key)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient at {key}")
        if state.weight_decay:
            g = g + state.weight_decay * params[key]
        params[key] -= state.learning_rate * g
