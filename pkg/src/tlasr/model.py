"""A small transducer: tanh recurrent encoder, embedding + recurrent predictor,
additive joiner, with hand-written backpropagation.

All forward functions accept a single utterance or a zero-padded batch with a
leading batch axis.  Both networks are unidirectional, so padding at the end of
a sequence never influences the valid positions; padded positions simply
receive zero gradient from the lattice.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, Optional, Tuple

import numpy as np

from .lattice import LogitLattice

SUBTREES = ("encoder", "predictor", "joiner")


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 8
    encoder_hidden: int = 32
    encoder_layers: int = 1
    predictor_hidden: int = 16
    joiner_hidden: int = 32
    vocab_size: int = 10
    rng_seed: int = 0

    def __post_init__(self):
        for name in (
            "feature_dim",
            "encoder_hidden",
            "encoder_layers",
            "predictor_hidden",
            "joiner_hidden",
            "vocab_size",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def blank(self) -> int:
        return self.vocab_size

    def shape_table(self) -> Dict[str, Dict[str, Tuple[int, ...]]]:
        H, P, J = self.encoder_hidden, self.predictor_hidden, self.joiner_hidden
        V1 = self.vocab_size + 1
        encoder = {}
        for layer in range(self.encoder_layers):
            n_in = self.feature_dim if layer == 0 else H
            encoder[f"l{layer}.W_x"] = (H, n_in)
            encoder[f"l{layer}.W_h"] = (H, H)
            encoder[f"l{layer}.b"] = (H,)
        predictor = {"embed": (V1, P), "W_x": (P, P), "W_h": (P, P), "b": (P,)}
        joiner = {
            "W_enc": (J, H),
            "W_pred": (J, P),
            "b": (J,),
            "W_out": (V1, J),
            "b_out": (V1,),
        }
        return {"encoder": encoder, "predictor": predictor, "joiner": joiner}


@dataclass
class ModelParams:
    """Three named parameter subtrees.  Gradients use the same container."""

    encoder: Dict[str, np.ndarray] = field(default_factory=dict)
    predictor: Dict[str, np.ndarray] = field(default_factory=dict)
    joiner: Dict[str, np.ndarray] = field(default_factory=dict)

    def items(self) -> Iterator[Tuple[str, np.ndarray]]:
        for sub in SUBTREES:
            for name in sorted(getattr(self, sub)):
                yield f"{sub}/{name}", getattr(self, sub)[name]

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ModelParams":
        return ModelParams(
            **{sub: {k: fn(v) for k, v in getattr(self, sub).items()} for sub in SUBTREES}
        )

    def zip_map(self, other: "ModelParams", fn) -> "ModelParams":
        return ModelParams(
            **{
                sub: {k: fn(v, getattr(other, sub)[k]) for k, v in getattr(self, sub).items()}
                for sub in SUBTREES
            }
        )

    def copy(self) -> "ModelParams":
        return self.map(np.copy)

    def zeros_like(self) -> "ModelParams":
        return self.map(np.zeros_like)

    def shapes(self):
        return {sub: {k: v.shape for k, v in getattr(self, sub).items()} for sub in SUBTREES}

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(v * v)) for _, v in self.items())))

    def equals(self, other: "ModelParams") -> bool:
        """Bit equality of every leaf."""
        mine, theirs = dict(self.items()), dict(other.items())
        if mine.keys() != theirs.keys():
            return False
        return all(
            mine[k].shape == theirs[k].shape and mine[k].tobytes() == theirs[k].tobytes()
            for k in mine
        )


GradientTree = ModelParams


def init_params(config: ModelConfig) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(config.rng_seed)
    params = ModelParams()
    for sub, table in config.shape_table().items():
        tree = getattr(params, sub)
        for name, shape in table.items():
            if len(shape) == 1:
                tree[name] = np.zeros(shape)
            else:
                fan_in = 1 if name == "embed" else shape[1]
                scale = 1.0 / np.sqrt(fan_in)
                tree[name] = rng.uniform(-scale, scale, size=shape)
    return params


def _as_batch(x: np.ndarray, ndim: int):
    x = np.asarray(x)
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ValueError(f"expected {ndim - 1}-d or batched {ndim}-d input, got {x.shape}")
    return x, False


def _rnn_forward(inputs, W_x, W_h, b):
    B, T, _ = inputs.shape
    pre = inputs @ W_x.T + b
    out = np.empty((B, T, W_h.shape[0]))
    h = np.zeros((B, W_h.shape[0]))
    for t in range(T):
        h = np.tanh(pre[:, t] + h @ W_h.T)
        out[:, t] = h
    return out


def _rnn_backward(d_out, inputs, out, W_x, W_h):
    B, T, H = out.shape
    d_pre = np.empty_like(out)
    d_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        dz = (d_out[:, t] + d_next) * (1.0 - out[:, t] ** 2)
        d_pre[:, t] = dz
        d_next = dz @ W_h
    flat = d_pre.reshape(B * T, H)
    h_prev = np.concatenate([np.zeros((B, 1, H)), out[:, :-1]], axis=1).reshape(B * T, H)
    dW_h = flat.T @ h_prev
    dW_x = flat.T @ inputs.reshape(B * T, -1)
    db = flat.sum(axis=0)
    d_inputs = d_pre @ W_x
    return d_inputs, dW_x, dW_h, db


@dataclass
class EncoderCache:
    layer_inputs: list
    layer_outputs: list
    unbatched: bool


def encoder_forward(features: np.ndarray, params: ModelParams):
    """Stacked tanh recurrences over ``(T, F)`` or ``(B, T, F)`` features."""
    x, unbatched = _as_batch(np.asarray(features, dtype=np.float64), 3)
    expected = params.encoder["l0.W_x"].shape[1]
    if x.shape[-1] != expected:
        raise ValueError(f"feature dim {x.shape[-1]} does not match encoder input {expected}")
    n_layers = sum(1 for k in params.encoder if k.endswith(".W_x"))
    inputs, outputs = [], []
    for layer in range(n_layers):
        inputs.append(x)
        x = _rnn_forward(
            x,
            params.encoder[f"l{layer}.W_x"],
            params.encoder[f"l{layer}.W_h"],
            params.encoder[f"l{layer}.b"],
        )
        outputs.append(x)
    cache = EncoderCache(inputs, outputs, unbatched)
    return (x[0] if unbatched else x), cache


def encoder_backward(d_h_enc: np.ndarray, cache: EncoderCache, params: ModelParams):
    d = d_h_enc[None] if cache.unbatched else d_h_enc
    if d.shape != cache.layer_outputs[-1].shape:
        raise ValueError("encoder gradient does not match cached activations")
    grads = {}
    for layer in range(len(cache.layer_inputs) - 1, -1, -1):
        d, dW_x, dW_h, db = _rnn_backward(
            d,
            cache.layer_inputs[layer],
            cache.layer_outputs[layer],
            params.encoder[f"l{layer}.W_x"],
            params.encoder[f"l{layer}.W_h"],
        )
        grads[f"l{layer}.W_x"] = dW_x
        grads[f"l{layer}.W_h"] = dW_h
        grads[f"l{layer}.b"] = db
    return grads


@dataclass
class PredictorCache:
    tokens: np.ndarray
    embedded: np.ndarray
    outputs: np.ndarray
    unbatched: bool


def predictor_forward(labels: np.ndarray, params: ModelParams):
    """Returns ``(U + 1, P)`` states; row 0 sees only the start symbol."""
    y, unbatched = _as_batch(np.asarray(labels, dtype=np.int64), 2)
    embed = params.predictor["embed"]
    sos = embed.shape[0] - 1
    if y.size and (y.min() < 0 or y.max() >= sos):
        raise ValueError(f"labels must lie in [0, {sos})")
    tokens = np.concatenate([np.full((y.shape[0], 1), sos, dtype=np.int64), y], axis=1)
    embedded = embed[tokens]
    out = _rnn_forward(
        embedded, params.predictor["W_x"], params.predictor["W_h"], params.predictor["b"]
    )
    cache = PredictorCache(tokens, embedded, out, unbatched)
    return (out[0] if unbatched else out), cache


def predictor_backward(d_h_pre: np.ndarray, cache: PredictorCache, params: ModelParams):
    d = d_h_pre[None] if cache.unbatched else d_h_pre
    if d.shape != cache.outputs.shape:
        raise ValueError("predictor gradient does not match cached activations")
    d_emb, dW_x, dW_h, db = _rnn_backward(
        d, cache.embedded, cache.outputs, params.predictor["W_x"], params.predictor["W_h"]
    )
    d_embed = np.zeros_like(params.predictor["embed"])
    np.add.at(d_embed, cache.tokens.reshape(-1), d_emb.reshape(-1, d_emb.shape[-1]))
    return {"embed": d_embed, "W_x": dW_x, "W_h": dW_h, "b": db}


@dataclass
class JoinerCache:
    h_enc: np.ndarray
    h_pre: np.ndarray
    hidden: np.ndarray
    unbatched: bool


def joiner_forward(h_enc: np.ndarray, h_pre: np.ndarray, params: ModelParams):
    """``logits[t, u] = W_out tanh(W_enc h_enc[t] + W_pred h_pre[u] + b) + b_out``.

    Returns raw scores of shape ``(T, U + 1, V + 1)`` (batched: leading ``B``).
    """
    e, unbatched = _as_batch(np.asarray(h_enc, dtype=np.float64), 3)
    p, _ = _as_batch(np.asarray(h_pre, dtype=np.float64), 3)
    j = params.joiner
    if e.shape[-1] != j["W_enc"].shape[1] or p.shape[-1] != j["W_pred"].shape[1]:
        raise ValueError("hidden sizes do not match joiner weights")
    if e.shape[0] != p.shape[0]:
        raise ValueError("encoder and predictor batch sizes differ")
    a = e @ j["W_enc"].T
    c = p @ j["W_pred"].T + j["b"]
    hidden = np.tanh(a[:, :, None, :] + c[:, None, :, :])
    logits = hidden @ j["W_out"].T + j["b_out"]
    cache = JoinerCache(e, p, hidden, unbatched)
    return (logits[0] if unbatched else logits), cache


def joiner_backward(d_logits: np.ndarray, cache: JoinerCache, params: ModelParams):
    d = d_logits[None] if cache.unbatched else d_logits
    if d.shape[:3] != cache.hidden.shape[:3]:
        raise ValueError("lattice gradient does not match cached joiner activations")
    j = params.joiner
    V1, J = j["W_out"].shape
    flat_d = d.reshape(-1, V1)
    flat_h = cache.hidden.reshape(-1, J)
    grads = {"W_out": flat_d.T @ flat_h, "b_out": flat_d.sum(axis=0)}
    d_pre = (d @ j["W_out"]) * (1.0 - cache.hidden**2)
    d_a = d_pre.sum(axis=2)
    d_c = d_pre.sum(axis=1)
    grads["W_enc"] = d_a.reshape(-1, J).T @ cache.h_enc.reshape(-1, cache.h_enc.shape[-1])
    grads["W_pred"] = d_c.reshape(-1, J).T @ cache.h_pre.reshape(-1, cache.h_pre.shape[-1])
    grads["b"] = d_c.reshape(-1, J).sum(axis=0)
    # always batched; callers strip the batch axis
    return grads, d_a @ j["W_enc"], d_c @ j["W_pred"]


@dataclass
class ForwardCaches:
    encoder: EncoderCache
    predictor: PredictorCache
    joiner: JoinerCache


def model_forward(features: np.ndarray, labels: np.ndarray, params: ModelParams):
    """Full forward pass to raw lattice scores plus every cache for backprop."""
    h_enc, enc_cache = encoder_forward(features, params)
    h_pre, pred_cache = predictor_forward(labels, params)
    logits, join_cache = joiner_forward(h_enc, h_pre, params)
    return logits, ForwardCaches(enc_cache, pred_cache, join_cache)


def lattice_for(features: np.ndarray, labels: np.ndarray, params: ModelParams) -> LogitLattice:
    logits, _ = model_forward(features, labels, params)
    return LogitLattice(logits, labels)


def model_backward(
    lattice_grad: np.ndarray, caches: ForwardCaches, params: ModelParams
) -> GradientTree:
    """Chain ``d loss / d logits`` back to every parameter leaf.

    If the encoder ran once and its output was broadcast over several label
    sequences (N-best training), the encoder gradient is reduced over that
    axis in index order.
    """
    j_grads, d_h_enc, d_h_pre = joiner_backward(lattice_grad, caches.joiner, params)
    enc_batch = caches.encoder.layer_outputs[-1].shape[0]
    if d_h_enc.shape[0] != enc_batch:
        if enc_batch != 1:
            raise ValueError("encoder cache does not match the joiner batch")
        d_h_enc = d_h_enc.sum(axis=0, keepdims=True)
    if caches.encoder.unbatched:
        d_h_enc = d_h_enc[0]
    if caches.predictor.unbatched:
        d_h_pre = d_h_pre[0]
    e_grads = encoder_backward(d_h_enc, caches.encoder, params)
    p_grads = predictor_backward(d_h_pre, caches.predictor, params)
    return GradientTree(encoder=e_grads, predictor=p_grads, joiner=j_grads)


def transplant_encoder(seed: ModelParams, target: ModelParams) -> ModelParams:
    """Encoder leaves from ``seed``; predictor and joiner from ``target``."""
    seed_shapes = {k: v.shape for k, v in seed.encoder.items()}
    target_shapes = {k: v.shape for k, v in target.encoder.items()}
    if seed_shapes != target_shapes:
        raise ValueError("incompatible encoder architecture")
    return ModelParams(
        encoder={k: v.copy() for k, v in seed.encoder.items()},
        predictor={k: v.copy() for k, v in target.predictor.items()},
        joiner={k: v.copy() for k, v in target.joiner.items()},
    )


# checkpoint container --------------------------------------------------------

CHECKPOINT_MAGIC = b"TLASRCK\x00"
CHECKPOINT_VERSION = 1


def save_checkpoint(
    path, params: ModelParams, config: ModelConfig, metadata: Optional[dict] = None
) -> None:
    """Write ``magic | u32 version | u64 header length | JSON header | tensors``.

    Integers are little-endian, tensors are little-endian float64 in C order
    and appear in header order.  The header is JSON with sorted keys, so equal
    inputs give byte-identical files.
    """
    leaves, blobs, offset = [], [], 0
    for name, value in params.items():
        data = np.ascontiguousarray(value, dtype="<f8").tobytes()
        leaves.append({"name": name, "shape": list(value.shape), "offset": offset})
        blobs.append(data)
        offset += len(data)
    header = json.dumps(
        {"config": asdict(config), "metadata": metadata or {}, "leaves": leaves},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`: ``(params, config, metadata)``."""
    raw = Path(path).read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    version, header_len = struct.unpack_from("<IQ", raw, pos)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos += struct.calcsize("<IQ")
    header = json.loads(raw[pos : pos + header_len].decode("utf-8"))
    pos += header_len
    params = ModelParams()
    for leaf in header["leaves"]:
        sub, name = leaf["name"].split("/", 1)
        shape = tuple(leaf["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = pos + leaf["offset"]
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start).reshape(shape)
        getattr(params, sub)[name] = arr.astype(np.float64)
    return params, ModelConfig(**header["config"]), header["metadata"]
