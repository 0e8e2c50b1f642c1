"""Reverse-mode differentiation and the encoder/decoder/classifier model.

The tape records every op of one forward pass in creation order; backward
walks the list once in reverse. Arrays flow through in whatever dtype the
leaves carry: float32 in production, float64 when gradient-checking.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, DivergenceError, TapeError
from .fileformats import (
    MDL1_MAGIC,
    _read_exact,
    read_tns1,
    read_u32,
    write_tns1,
    write_u32,
)
from .rng import Rng


class Parameter:
    """A trainable float32 array."""

    __slots__ = ("data",)

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float32)


class Value:
    __slots__ = ("data", "grad", "parents", "backward_fn", "param")

    def __init__(self, data, parents=(), backward_fn=None, param=None):
        self.data = data
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.param = param


class Tape:
    """Op recorder for one forward pass; backward may run exactly once."""

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def leaf(self, data, param: Parameter | None = None, dtype=None) -> Value:
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        node = Value(arr, param=param)
        self.nodes.append(node)
        return node

    def watch(self, param: Parameter, dtype=None) -> Value:
        return self.leaf(param.data, param=param, dtype=dtype)

    def op(self, data, parents, backward_fn) -> Value:
        node = Value(data, parents=tuple(parents), backward_fn=backward_fn)
        self.nodes.append(node)
        return node


def _accumulate(node: Value, grad: np.ndarray) -> None:
    if node.grad is None:
        node.grad = grad.copy()
    else:
        node.grad += grad


def backward(tape: Tape, loss: Value, loss_grad: float = 1.0) -> dict:
    """Propagate from `loss`; returns {Parameter: gradient array}."""
    if tape.consumed:
        raise TapeError("backward already invoked for this tape")
    tape.consumed = True
    loss.grad = np.asarray(loss_grad, dtype=np.asarray(loss.data).dtype)
    for node in reversed(tape.nodes):
        if node.grad is None or node.backward_fn is None:
            continue
        for parent, grad in zip(node.parents, node.backward_fn(node.grad)):
            if grad is not None:
                _accumulate(parent, grad)
    grads = {}
    for node in tape.nodes:
        if node.param is not None:
            g = node.grad if node.grad is not None else np.zeros_like(node.data)
            grads[node.param] = g
    return grads


# ---------------------------------------------------------------- tape ops


def vmatmul(tape: Tape, a: Value, b: Value) -> Value:
    if a.data.shape[-1] != b.data.shape[0]:
        raise DimensionError(f"matmul: {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return tape.op(out, (a, b), bwd)


def vadd(tape: Tape, a: Value, b: Value) -> Value:
    out = a.data + b.data

    def reduce_to(g, shape):
        while g.ndim > len(shape):
            g = g.sum(axis=0)
        for axis, dim in enumerate(shape):
            if dim == 1 and g.shape[axis] != 1:
                g = g.sum(axis=axis, keepdims=True)
        return g.reshape(shape)

    def bwd(g):
        return reduce_to(g, a.data.shape), reduce_to(g, b.data.shape)

    return tape.op(out, (a, b), bwd)


def vrelu(tape: Tape, a: Value) -> Value:
    mask = a.data > 0
    return tape.op(a.data * mask, (a,), lambda g: (g * mask,))


def vsoftmax(tape: Tape, a: Value) -> Value:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dot),)

    return tape.op(p, (a,), bwd)


PROB_CLAMP = 1e-12


def vcross_entropy(tape: Tape, probs: Value, labels: np.ndarray) -> Value:
    """Mean over rows of -log p[row, label], probabilities clamped at 1e-12."""
    lab = np.asarray(labels).reshape(-1).astype(np.int64)
    p = probs.data.reshape(-1, probs.data.shape[-1])
    if np.any(lab < 0) or np.any(lab >= p.shape[1]):
        raise IndexError("label index out of range")
    picked = p[np.arange(p.shape[0]), lab]
    clamped = np.maximum(picked, PROB_CLAMP)
    loss = -np.log(clamped).mean()

    def bwd(g):
        gp = np.zeros_like(p)
        live = picked > PROB_CLAMP
        gp[np.arange(p.shape[0]), lab] = np.where(live, -g / (p.shape[0] * clamped), 0.0)
        return (gp.reshape(probs.data.shape),)

    return tape.op(np.asarray(loss, dtype=p.dtype), (probs,), bwd)


def vscale(tape: Tape, a: Value, c: float) -> Value:
    return tape.op(a.data * c, (a,), lambda g: (g * c,))


def vsum2(tape: Tape, a: Value, b: Value) -> Value:
    return tape.op(a.data + b.data, (a, b), lambda g: (g, g))


def vcustom(tape: Tape, data, parents, backward_fn) -> Value:
    """Escape hatch for ops with externally supplied gradients."""
    return tape.op(np.asarray(data), tuple(parents), backward_fn)


# ---------------------------------------------------------------- model


@dataclass
class SegModel:
    """Per-pixel encoder -> decoder -> classifier stack.

    `neighborhood` concatenates the 3x3 pixel neighborhood (edge-replicated)
    into the per-pixel input features, giving the model spatial context
    without convolutions.
    """

    encoder_layers: list
    decoder_layers: list
    classifier_layers: list
    K: int
    embed_dim: int
    in_channels: int
    neighborhood: bool = False
    activation: str = "relu"

    def parameters(self) -> list:
        out = []
        for layer_list in (self.encoder_layers, self.decoder_layers, self.classifier_layers):
            for w, b in layer_list:
                out.extend([w, b])
        return out

    @property
    def input_features(self) -> int:
        return self.in_channels * (9 if self.neighborhood else 1)


def init_model(
    in_channels: int,
    K: int,
    embed_dim: int | None = None,
    encoder_hidden=(64, 32),
    rng: Rng | None = None,
    neighborhood: bool = False,
) -> SegModel:
    """Glorot-uniform initialized model.

    Defaults: encoder in->64->32, decoder 32->embed_dim, classifier
    embed_dim->embed_dim->K, with embed_dim = K unless overridden.
    """
    if embed_dim is None:
        embed_dim = K
    if rng is None:
        rng = Rng(0)
    feats = in_channels * (9 if neighborhood else 1)

    def dense(fan_in, fan_out):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = (rng.uniform((fan_in, fan_out)) * 2.0 - 1.0) * bound
        return (Parameter(w.astype(np.float32)), Parameter(np.zeros(fan_out, np.float32)))

    dims = [feats, *encoder_hidden]
    encoder = [dense(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]
    decoder = [dense(dims[-1], embed_dim)]
    classifier = [dense(embed_dim, embed_dim), dense(embed_dim, K)]
    return SegModel(encoder, decoder, classifier, K, embed_dim, in_channels, neighborhood)


def pixel_features(images: np.ndarray, neighborhood: bool) -> np.ndarray:
    """[B,H,W,C] images -> [B*H*W, F] per-pixel feature rows."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4:
        raise DimensionError(f"expected [B,H,W,C] images, got {images.shape}")
    b, h, w, c = images.shape
    if not neighborhood:
        return images.reshape(b * h * w, c)
    padded = np.pad(images, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="edge")
    patches = [
        padded[:, dy : dy + h, dx : dx + w, :]
        for dy in range(3)
        for dx in range(3)
    ]
    return np.concatenate(patches, axis=-1).reshape(b * h * w, 9 * c)


def _dense_stack(tape: Tape, x: Value, layers, dtype, relu_last: bool) -> Value:
    for i, (w, b) in enumerate(layers):
        x = vadd(tape, vmatmul(tape, x, tape.watch(w, dtype)), tape.watch(b, dtype))
        if relu_last or i < len(layers) - 1:
            x = vrelu(tape, x)
    return x


def embed_flat(model: SegModel, feats, tape: Tape, dtype=np.float32) -> Value:
    """Encoder+decoder on flat feature rows; returns [n, embed_dim] node."""
    if feats.shape[-1] != model.input_features:
        raise DimensionError(
            f"feature dim {feats.shape[-1]} != model input {model.input_features}"
        )
    x = tape.leaf(feats, dtype=dtype)
    x = _dense_stack(tape, x, model.encoder_layers, dtype, relu_last=True)
    return _dense_stack(tape, x, model.decoder_layers, dtype, relu_last=False)


def classify_flat(model: SegModel, emb: Value, tape: Tape, dtype=np.float32) -> Value:
    """Classifier head + softmax on [n, embed_dim] nodes."""
    if emb.data.shape[-1] != model.embed_dim:
        raise DimensionError(f"embedding dim {emb.data.shape[-1]} != {model.embed_dim}")
    logits = _dense_stack(tape, emb, model.classifier_layers, dtype, relu_last=False)
    return vsoftmax(tape, logits)


def forward_embed(model: SegModel, images: np.ndarray) -> np.ndarray:
    """Inference-only per-pixel embeddings, shaped [B,H,W,embed_dim]."""
    b, h, w, _ = np.asarray(images).shape
    feats = pixel_features(images, model.neighborhood)
    emb = embed_flat(model, feats, Tape())
    return emb.data.reshape(b, h, w, model.embed_dim)


def forward_classify(model: SegModel, embeddings: np.ndarray) -> np.ndarray:
    """Inference-only class probabilities for [..., embed_dim] embeddings."""
    emb = np.asarray(embeddings, dtype=np.float32)
    flat = emb.reshape(-1, emb.shape[-1])
    tape = Tape()
    probs = classify_flat(model, tape.leaf(flat), tape)
    return probs.data.reshape(*emb.shape[:-1], model.K)


def classifier_probs_fn(model: SegModel):
    """Standalone classifier-head function z[n,d] -> probs[n,K]."""

    def fn(z: np.ndarray) -> np.ndarray:
        tape = Tape()
        return classify_flat(model, tape.leaf(np.asarray(z, np.float32)), tape).data

    return fn


def cross_entropy_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean pixelwise -log p[label] over a probability tensor [..., K]."""
    p = np.asarray(probs, dtype=np.float64).reshape(-1, np.asarray(probs).shape[-1])
    lab = np.asarray(labels).reshape(-1).astype(np.int64)
    if np.any(lab < 0) or np.any(lab >= p.shape[1]):
        raise IndexError("label index out of range")
    picked = np.maximum(p[np.arange(p.shape[0]), lab], PROB_CLAMP)
    return float(-np.log(picked).mean())


# ---------------------------------------------------------------- optimizer


class AdamState:
    """First/second moment buffers keyed by Parameter identity."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}


def adam_step(params: list, grads: dict, state: AdamState, lr: float) -> None:
    """One Adam update in place; rejects non-finite gradients."""
    for p in params:
        g = grads.get(p)
        if g is not None and not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient; update rejected")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**state.t
    bias2 = 1.0 - b2**state.t
    for p in params:
        g = grads.get(p)
        if g is None:
            g = np.zeros_like(p.data, dtype=np.float64)
        g = g.astype(np.float64)
        m = state.m.get(p)
        if m is None:
            m = np.zeros_like(p.data, dtype=np.float64)
            state.m[p] = m
            state.v[p] = np.zeros_like(p.data, dtype=np.float64)
        v = state.v[p]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        p.data = (p.data.astype(np.float64) - step).astype(np.float32)


# ---------------------------------------------------------------- checkpoint

# MDL1 layout: magic | u32 total tensor count | tensors in TNS1 framing
# (W then b per layer; encoder, decoder, classifier order) | u32 K |
# u32 embed_dim | u32 n_encoder_layers | u32 n_decoder_layers |
# u32 n_classifier_layers | u32 in_channels | u32 neighborhood_flag


def save_model(path, model: SegModel) -> None:
    params = model.parameters()
    with open(path, "wb") as f:
        f.write(MDL1_MAGIC)
        write_u32(f, len(params))
        for p in params:
            write_tns1(f, p.data)
        write_u32(f, model.K)
        write_u32(f, model.embed_dim)
        write_u32(f, len(model.encoder_layers))
        write_u32(f, len(model.decoder_layers))
        write_u32(f, len(model.classifier_layers))
        write_u32(f, model.in_channels)
        write_u32(f, 1 if model.neighborhood else 0)


def load_model(path) -> SegModel:
    from .errors import FileFormatError

    with open(path, "rb") as f:
        if _read_exact(f, 4) != MDL1_MAGIC:
            raise FileFormatError("bad model magic")
        count = read_u32(f)
        tensors = [read_tns1(f) for _ in range(count)]
        K = read_u32(f)
        embed_dim = read_u32(f)
        n_enc = read_u32(f)
        n_dec = read_u32(f)
        n_cls = read_u32(f)
        in_channels = read_u32(f)
        neighborhood = bool(read_u32(f))
    if count != 2 * (n_enc + n_dec + n_cls):
        raise FileFormatError("tensor count does not match layer counts")
    it = iter(tensors)
    sections = []
    for n in (n_enc, n_dec, n_cls):
        sections.append([(Parameter(next(it)), Parameter(next(it))) for _ in range(n)])
    return SegModel(sections[0], sections[1], sections[2], K, embed_dim, in_channels, neighborhood)
