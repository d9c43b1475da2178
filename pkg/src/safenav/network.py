"""Fixed-architecture MLP with manual backpropagation and portable serialization.

This is the single network representation shared by the trainers and the
verifier: plain float64 numpy arrays, ReLU hidden layers, raw logits out.
Parameters live in one flat vector; per-layer weight matrices and bias
vectors are views into it, so optimizers can treat the network as a single
parameter vector while layer-structured code sees matrices.

Networks are safe to read from many threads once constructed; mutation
(optimizer steps, loading) requires exclusive access.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "identity")

NETWORK_FILE_VERSION = 1

OBS_SIZE = 16
N_ACTIONS = 5


class NetworkFormatError(ValueError):
    """Raised when a network file is malformed or has the wrong version."""


@dataclass(frozen=True)
class LayerSpec:
    in_width: int
    out_width: int
    activation: str

    def __post_init__(self):
        if self.in_width <= 0 or self.out_width <= 0:
            raise ValueError(
                f"layer widths must be positive, got {self.in_width}x{self.out_width}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(
                f"unknown activation {self.activation!r}, expected one of {ACTIVATIONS}"
            )


def _init_metadata(seed, method, episodes) -> dict:
    return {"seed": seed, "method": method, "episodes": episodes}


class PolicyNetwork:
    """Feedforward ReLU network  R^in -> R^out  with identity output layer.

    The default shape (16, 32, 32, 5) maps a flattened 4x4 brightness grid to
    five action logits.  The same class backs the scalar value heads
    (layer_sizes ending in 1).
    """

    def __init__(self, layer_sizes=(16, 32, 32, 5), seed: int | None = 0,
                 metadata: dict | None = None):
        if len(layer_sizes) < 2:
            raise ValueError("need at least an input and an output width")
        specs = []
        for i in range(len(layer_sizes) - 1):
            act = "identity" if i == len(layer_sizes) - 2 else "relu"
            specs.append(LayerSpec(int(layer_sizes[i]), int(layer_sizes[i + 1]), act))
        self._init_from_specs(specs)
        if seed is not None:
            rng = np.random.Generator(np.random.PCG64(seed))
            for spec, w in zip(self.layer_specs, self.weights):
                limit = np.sqrt(6.0 / (spec.in_width + spec.out_width))
                w[...] = rng.uniform(-limit, limit, size=w.shape)
        self.metadata = dict(metadata) if metadata is not None else _init_metadata(seed, "init", 0)

    def _init_from_specs(self, specs):
        for a, b in zip(specs, specs[1:]):
            if a.out_width != b.in_width:
                raise ValueError(
                    f"layer widths do not chain: {a.out_width} -> {b.in_width}"
                )
        if specs[-1].activation != "identity":
            raise ValueError("final layer activation must be identity (raw logits)")
        self.layer_specs: tuple[LayerSpec, ...] = tuple(specs)
        n = sum(s.in_width * s.out_width + s.out_width for s in specs)
        self.params = np.zeros(n)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        self._w_offsets = np.zeros(len(specs), dtype=np.int64)
        self._b_offsets = np.zeros(len(specs), dtype=np.int64)
        off = 0
        for i, s in enumerate(specs):
            self._w_offsets[i] = off
            self.weights.append(self.params[off:off + s.out_width * s.in_width]
                                .reshape(s.out_width, s.in_width))
            off += s.out_width * s.in_width
            self._b_offsets[i] = off
            self.biases.append(self.params[off:off + s.out_width])
            off += s.out_width

    # -- construction helpers -------------------------------------------------

    @classmethod
    def from_arrays(cls, weights, biases, metadata=None) -> "PolicyNetwork":
        """Build a network from explicit per-layer (out x in) matrices."""
        if len(weights) != len(biases):
            raise ValueError("weights and biases must have the same layer count")
        sizes = [np.asarray(weights[0]).shape[1]]
        for w in weights:
            sizes.append(np.asarray(w).shape[0])
        net = cls(sizes, seed=None, metadata=metadata)
        for i, (w, b) in enumerate(zip(weights, biases)):
            w = np.asarray(w, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64)
            if w.shape != net.weights[i].shape:
                raise ValueError(f"layer {i}: weight shape {w.shape} != {net.weights[i].shape}")
            if b.shape != net.biases[i].shape:
                raise ValueError(f"layer {i}: bias shape {b.shape} != {net.biases[i].shape}")
            net.weights[i][...] = w
            net.biases[i][...] = b
        return net

    def copy(self) -> "PolicyNetwork":
        dup = PolicyNetwork.__new__(PolicyNetwork)
        dup._init_from_specs(self.layer_specs)
        dup.params[...] = self.params
        dup.metadata = dict(self.metadata)
        return dup

    # -- basic properties ------------------------------------------------------

    @property
    def n_inputs(self) -> int:
        return self.layer_specs[0].in_width

    @property
    def n_outputs(self) -> int:
        return self.layer_specs[-1].out_width

    @property
    def n_params(self) -> int:
        return self.params.size

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.n_inputs,) + tuple(s.out_width for s in self.layer_specs)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.params).all())

    def kernel_pack(self):
        """Flat parameter vector plus layout arrays for the compiled kernels."""
        in_sz = np.array([s.in_width for s in self.layer_specs], dtype=np.int64)
        out_sz = np.array([s.out_width for s in self.layer_specs], dtype=np.int64)
        acts = np.array([1 if s.activation == "relu" else 0 for s in self.layer_specs],
                        dtype=np.int64)
        return self.params, self._w_offsets, self._b_offsets, in_sz, out_sz, acts

    @property
    def max_width(self) -> int:
        return max(self.layer_sizes)

    # -- evaluation ------------------------------------------------------------

    def forward(self, x) -> np.ndarray:
        """Evaluate one input vector; pure function of (params, x)."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.n_inputs,):
            raise ValueError(f"expected input of shape ({self.n_inputs},), got {x.shape}")
        if not np.isfinite(x).all():
            raise ValueError("input contains non-finite values")
        h = x
        for spec, w, b in zip(self.layer_specs, self.weights, self.biases):
            h = w @ h + b
            if spec.activation == "relu":
                h = np.maximum(h, 0.0)
        return h

    def forward_batch(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_inputs:
            raise ValueError(f"expected inputs of width {self.n_inputs}, got {X.shape[1]}")
        h = X
        for spec, w, b in zip(self.layer_specs, self.weights, self.biases):
            h = h @ w.T + b
            if spec.activation == "relu":
                h = np.maximum(h, 0.0)
        return h

    def forward_cached(self, X):
        """Batched forward pass keeping per-layer inputs and pre-activations.

        Returns (logits, cache); pass the cache to :func:`backprop`.
        """
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        inputs = [X]
        pre = []
        h = X
        for spec, w, b in zip(self.layer_specs, self.weights, self.biases):
            z = h @ w.T + b
            pre.append(z)
            h = np.maximum(z, 0.0) if spec.activation == "relu" else z
            inputs.append(h)
        return h, (inputs, pre)


class GradientTape:
    """Flat per-parameter gradient accumulator mirroring a network's layout."""

    def __init__(self, net: PolicyNetwork):
        self._specs = net.layer_specs
        self.grads = np.zeros(net.n_params)
        self.d_weights: list[np.ndarray] = []
        self.d_biases: list[np.ndarray] = []
        off = 0
        for s in self._specs:
            self.d_weights.append(self.grads[off:off + s.out_width * s.in_width]
                                  .reshape(s.out_width, s.in_width))
            off += s.out_width * s.in_width
            self.d_biases.append(self.grads[off:off + s.out_width])
            off += s.out_width

    def zero(self):
        self.grads[...] = 0.0

    def global_norm(self) -> float:
        return float(np.sqrt(np.sum(self.grads * self.grads)))

    def clip_global_norm(self, max_norm: float):
        norm = self.global_norm()
        if norm > max_norm and norm > 0.0:
            self.grads *= max_norm / norm


def backprop(net: PolicyNetwork, cache, grad_out, tape: GradientTape | None = None):
    """Backpropagate d(loss)/d(logits) through a cached forward pass.

    Accumulates parameter gradients into ``tape`` (repeated calls add up)
    and returns the gradient with respect to the network input, shape
    (batch, n_inputs).  ReLU uses the subgradient 0 at the kink.
    """
    inputs, pre = cache
    if len(pre) != len(net.layer_specs):
        raise ValueError("cache does not match network depth; run forward_cached first")
    g = np.atleast_2d(np.asarray(grad_out, dtype=np.float64))
    if g.shape != pre[-1].shape:
        raise ValueError(f"grad_out shape {g.shape} != logits shape {pre[-1].shape}")
    for i in range(len(net.layer_specs) - 1, -1, -1):
        if net.layer_specs[i].activation == "relu":
            g = g * (pre[i] > 0.0)
        if tape is not None:
            tape.d_weights[i] += g.T @ inputs[i]
            tape.d_biases[i] += g.sum(axis=0)
        g = g @ net.weights[i]
    return g


# -- policy head ----------------------------------------------------------------


def policy_distribution(logits) -> np.ndarray:
    """Softmax with max-subtraction; rows sum to 1 within 1e-12."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_policy_distribution(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def distribution_entropy(logits) -> np.ndarray:
    logp = log_policy_distribution(logits)
    p = np.exp(logp)
    return -(p * logp).sum(axis=-1)


def greedy_action(logits) -> int:
    """Lowest-index maximal logit; the tie rule the verifier relies on."""
    return int(np.argmax(logits))


def sample_action(logits, rng: np.random.Generator) -> int:
    probs = policy_distribution(logits)
    u = rng.random()
    return int(min(np.searchsorted(np.cumsum(probs), u, side="right"),
                   probs.shape[-1] - 1))


def select_action(logits, rng: np.random.Generator | None = None) -> int:
    """Greedy when rng is None, otherwise a categorical sample."""
    if rng is None:
        return greedy_action(logits)
    return sample_action(logits, rng)


# -- reference losses (value and gradient w.r.t. logits) --------------------------


def sum_logits_loss(logits):
    logits = np.atleast_2d(logits)
    return float(logits.sum()), np.ones_like(logits)


def cross_entropy_loss(logits, labels):
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(labels)
    logp = log_policy_distribution(logits)
    n = logits.shape[0]
    value = float(-logp[np.arange(n), labels].sum() / n)
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return value, grad / n


def mse_loss(pred, target):
    pred = np.atleast_2d(pred)
    target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


# -- serialization ----------------------------------------------------------------


def network_to_dict(net: PolicyNetwork) -> dict:
    return {
        "version": NETWORK_FILE_VERSION,
        "layers": [{"in": s.in_width, "out": s.out_width, "activation": s.activation}
                   for s in net.layer_specs],
        "weights": [w.reshape(-1).tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
        "metadata": net.metadata,
    }


def network_from_dict(doc: dict, source: str = "<dict>") -> PolicyNetwork:
    def fail(msg):
        raise NetworkFormatError(f"{source}: {msg}")

    if not isinstance(doc, dict):
        fail("top level must be a mapping")
    for key in ("version", "layers", "weights", "biases"):
        if key not in doc:
            fail(f"missing field '{key}'")
    if doc["version"] != NETWORK_FILE_VERSION:
        fail(f"unsupported network file version {doc['version']!r} "
             f"(expected {NETWORK_FILE_VERSION})")
    layers = doc["layers"]
    if not isinstance(layers, list) or not layers:
        fail("field 'layers' must be a non-empty list")
    specs = []
    for i, layer in enumerate(layers):
        try:
            specs.append(LayerSpec(int(layer["in"]), int(layer["out"]),
                                   str(layer["activation"])))
        except (KeyError, TypeError, ValueError) as e:
            fail(f"layers[{i}]: {e}")
    if len(doc["weights"]) != len(specs):
        fail(f"expected {len(specs)} weight arrays, got {len(doc['weights'])}")
    if len(doc["biases"]) != len(specs):
        fail(f"expected {len(specs)} bias arrays, got {len(doc['biases'])}")
    weights, biases = [], []
    for i, s in enumerate(specs):
        w = np.asarray(doc["weights"][i], dtype=np.float64)
        if w.size != s.in_width * s.out_width:
            fail(f"layers[{i}]: expected {s.in_width * s.out_width} weight values, "
                 f"got {w.size}")
        b = np.asarray(doc["biases"][i], dtype=np.float64)
        if b.size != s.out_width:
            fail(f"layers[{i}]: expected {s.out_width} bias values, got {b.size}")
        if not np.isfinite(w).all() or not np.isfinite(b).all():
            fail(f"layers[{i}]: parameter values must be finite")
        weights.append(w.reshape(s.out_width, s.in_width))
        biases.append(b)
    metadata = doc.get("metadata", {})
    if not isinstance(metadata, dict):
        fail("field 'metadata' must be a mapping")
    try:
        net = PolicyNetwork.from_arrays(weights, biases, metadata=metadata)
    except ValueError as e:
        fail(str(e))
    return net


def save_network(net: PolicyNetwork, path):
    """Write a network file; floats keep full round-trip precision."""
    from .ioutil import atomic_write_text
    atomic_write_text(path, json.dumps(network_to_dict(net), indent=1) + "\n")


def load_network(path) -> PolicyNetwork:
    name = os.fspath(path)
    try:
        with open(path, "r") as f:
            doc = json.load(f)
    except OSError as e:
        raise NetworkFormatError(f"{name}: cannot read: {e}") from e
    except json.JSONDecodeError as e:
        raise NetworkFormatError(f"{name}: not valid JSON: {e}") from e
    return network_from_dict(doc, source=name)


def validate_policy_shape(net: PolicyNetwork):
    """Deployment policies must map a 16-cell observation to 5 action logits."""
    if net.n_inputs != OBS_SIZE or net.n_outputs != N_ACTIONS:
        raise ValueError(
            f"policy network must be {OBS_SIZE} -> {N_ACTIONS}, "
            f"got {net.n_inputs} -> {net.n_outputs}"
        )
