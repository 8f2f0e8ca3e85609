"""Per-modality ReLU MLP encoders and weighted late fusion.

Layer weights are stored ``(in, out)`` so a layer computes ``x @ W + b``.
Fused logits are ``sum_m w[:, m] * logits[m]`` with per-sample weights
``w`` of shape ``(B, M)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mnl.numerics import RngStream, softmax

_MNLM_MAGIC = b"MNLM"
_MNLM_VERSION = 1


@dataclass
class EncoderParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise ValueError(f"layer {k}: W {W.shape} and b {b.shape} do not match")
            if k and W.shape[0] != self.weights[k - 1].shape[1]:
                raise ValueError(f"layer {k} input does not match layer {k - 1} output")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_classes(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def hidden(self) -> tuple[int, ...]:
        return tuple(W.shape[1] for W in self.weights[:-1])

    @property
    def is_linear(self) -> bool:
        return len(self.weights) == 1

    def arrays(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "EncoderParams":
        return EncoderParams([W.copy() for W in self.weights], [b.copy() for b in self.biases], self.activation)

    def zeros_like(self) -> "EncoderParams":
        return EncoderParams([np.zeros_like(W) for W in self.weights],
                             [np.zeros_like(b) for b in self.biases], self.activation)


def init_encoder(in_dim: int, hidden, n_classes: int, rng: RngStream) -> EncoderParams:
    """He-scaled Gaussian weights, zero biases."""
    sizes = [in_dim, *hidden, n_classes]
    Ws, bs = [], []
    for a, b in zip(sizes[:-1], sizes[1:]):
        Ws.append(rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b)))
        bs.append(np.zeros(b))
    return EncoderParams(Ws, bs)


def encoder_forward(params: EncoderParams, X: np.ndarray):
    """Return ``(logits, cache)``; cache holds each layer's input and pre-activation."""
    h = X
    cache = []
    last = len(params.weights) - 1
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        a = h @ W + b
        cache.append((h, a))
        h = a if k == last else np.maximum(a, 0.0)
    return h, cache


def encoder_backward(params: EncoderParams, cache, dlogits: np.ndarray):
    """Reverse pass; returns ``(param_grads, dX)``."""
    grads = params.zeros_like()
    delta = dlogits
    for k in range(len(params.weights) - 1, -1, -1):
        h, a = cache[k]
        if k != len(params.weights) - 1:
            delta = delta * (a > 0)
        grads.weights[k] = h.T @ delta
        grads.biases[k] = delta.sum(axis=0)
        delta = delta @ params.weights[k].T
    return grads, delta


@dataclass
class FusionSpec:
    mode: str = "static"
    weights: tuple[float, ...] | None = None
    temperature: float = 1.0

    def __post_init__(self):
        if self.mode not in ("static", "dynamic"):
            raise ValueError(f"unknown fusion mode {self.mode!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise ValueError("static fusion weights must be >= 0 and sum to 1")
            self.weights = tuple(float(v) for v in w)

    def static_weights(self, M: int) -> np.ndarray:
        if self.weights is None:
            return np.full(M, 1.0 / M)
        if len(self.weights) != M:
            raise ValueError(f"fusion has {len(self.weights)} weights for {M} modalities")
        return np.asarray(self.weights)


@dataclass
class LogitBundle:
    logits: list[np.ndarray]
    weights: np.ndarray
    fused: np.ndarray
    probs: list[np.ndarray] = field(repr=False)
    caches: list = field(default=None, repr=False)

    @property
    def n_modalities(self) -> int:
        return len(self.logits)


def dynamic_weights(probs, temperature: float) -> np.ndarray:
    """Per-sample weights proportional to ``exp(max_k P[m]_k / T)``."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    conf = np.stack([np.asarray(p).max(axis=-1) for p in probs], axis=-1) / temperature
    return softmax(conf)


def fuse(logits, weights: np.ndarray) -> np.ndarray:
    fused = weights[:, 0:1] * logits[0]
    for m in range(1, len(logits)):
        fused = fused + weights[:, m:m + 1] * logits[m]
    return fused


def forward(params, fusion: FusionSpec, X, weights: np.ndarray | None = None) -> LogitBundle:
    """Run every encoder and combine the logits.

    ``X`` is a list of per-modality matrices or a ``MultimodalBatch``.
    ``weights`` overrides the fusion weights, shape ``(B, M)``.
    """
    X = getattr(X, "X", X)
    if len(X) != len(params):
        raise ValueError(f"{len(X)} inputs for {len(params)} encoders")
    logits, caches = [], []
    for m, (p, x) in enumerate(zip(params, X)):
        if x.ndim != 2 or x.shape[1] != p.in_dim:
            raise ValueError(f"modality {m}: input {x.shape} does not match encoder dim {p.in_dim}")
        z, c = encoder_forward(p, x)
        logits.append(z)
        caches.append(c)
    probs = [softmax(z) for z in logits]
    B, M = logits[0].shape[0], len(logits)
    if weights is None:
        if fusion.mode == "static":
            weights = np.broadcast_to(fusion.static_weights(M), (B, M))
        else:
            weights = dynamic_weights(probs, fusion.temperature)
    fused = fuse(logits, weights)
    return LogitBundle(logits, weights, fused, probs, caches)


def backward(params, bundle: LogitBundle, grad_fused=None, grad_modal=None, need_inputs=False):
    """Exact parameter gradients given upstream gradients on the logits.

    The fused-logit gradient reaches modality ``m`` scaled by ``w[:, m]``;
    fusion weights are constants of the forward pass, including in dynamic
    mode. Returns a list of per-encoder gradients, plus the per-modality
    input gradients when ``need_inputs`` is set.
    """
    M = bundle.n_modalities
    shape = bundle.fused.shape
    if grad_fused is not None and np.shape(grad_fused) != shape:
        raise ValueError(f"fused gradient shape {np.shape(grad_fused)} != {shape}")
    if grad_modal is not None:
        if len(grad_modal) != M or any(g is not None and np.shape(g) != shape for g in grad_modal):
            raise ValueError("per-modality gradients must match the logit shapes")
    grads, dX = [], []
    for m in range(M):
        g = np.zeros(shape)
        if grad_fused is not None:
            g = g + bundle.weights[:, m:m + 1] * grad_fused
        if grad_modal is not None and grad_modal[m] is not None:
            g = g + grad_modal[m]
        pg, dx = encoder_backward(params[m], bundle.caches[m], g)
        grads.append(pg)
        dX.append(dx)
    return (grads, dX) if need_inputs else grads


def predict(params, fusion: FusionSpec, X) -> np.ndarray:
    return forward(params, fusion, X).fused.argmax(axis=1)


# -- checkpoint ---------------------------------------------------------------


def save_checkpoint(path, params, fusion: FusionSpec) -> None:
    M = len(params)
    mode = 0 if fusion.mode == "static" else 1
    w = fusion.static_weights(M) if fusion.weights is not None else np.full(M, np.nan)
    out = bytearray(_MNLM_MAGIC)
    out += struct.pack("<IBId", _MNLM_VERSION, mode, M, fusion.temperature)
    out += w.astype("<f8").tobytes()
    for p in params:
        out += struct.pack("<I", len(p.weights))
        for W in p.weights:
            out += struct.pack("<II", *W.shape)
    for p in params:
        for arr in p.arrays():
            out += np.ascontiguousarray(arr).astype("<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path):
    buf = Path(path).read_bytes()
    if buf[:4] != _MNLM_MAGIC:
        raise ValueError(f"{path}: not an MNLM checkpoint")
    version, mode, M, temp = struct.unpack_from("<IBId", buf, 4)
    if version != _MNLM_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 4 + struct.calcsize("<IBId")
    w = np.frombuffer(buf, "<f8", M, off).astype(np.float64)
    off += 8 * M
    shapes = []
    for _ in range(M):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        layer_shapes = []
        for _ in range(n):
            layer_shapes.append(struct.unpack_from("<II", buf, off))
            off += 8
        shapes.append(layer_shapes)
    params = []
    for layer_shapes in shapes:
        Ws, bs = [], []
        for a, b in layer_shapes:
            Ws.append(np.frombuffer(buf, "<f8", a * b, off).reshape(a, b).astype(np.float64))
            off += 8 * a * b
            bs.append(np.frombuffer(buf, "<f8", b, off).astype(np.float64))
            off += 8 * b
        params.append(EncoderParams(Ws, bs))
    if off != len(buf):
        raise ValueError(f"{path}: trailing or missing bytes")
    weights = None if np.all(np.isnan(w)) else tuple(float(v) for v in w)
    fusion = FusionSpec("static" if mode == 0 else "dynamic", weights, temp)
    return params, fusion
