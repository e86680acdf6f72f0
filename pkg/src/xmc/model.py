"""Transformer encoder with a class-wise cross-attention decoder.

The encoder is a small pre-norm transformer over token embeddings plus
learned absolute positions.  The decoder computes, per class ``j``::

    K = H W_key,  V = H W_value
    A_j = softmax(C_j K^T)
    y_j = sigmoid(layernorm(A_j V) . w_out)

``X`` (the token-embedding rows, before positions are added) is the input
that gradient-based attributions and the adversarial strategies act on.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import END_ID, MASK_ID, PAD_ID, START_ID

MAGIC = b"XMC1"
FORMAT_VERSION = 1
_NEG = -1e9


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    num_classes: int
    embed_dim: int = 32
    layers: int = 2
    heads: int = 2
    max_len: int = 512      # full-scale runs used 6000
    dropout: float = 0.2
    ff_mult: int = 4
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ModelError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.max_len < 3:
            raise ModelError("max_len must be at least 3")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError("dropout must lie in [0, 1)")
        if self.vocab_size < 5 or self.num_classes < 1 or self.layers < 0:
            raise ModelError("vocab_size >= 5, num_classes >= 1 and layers >= 0 required")
        if self.labels and len(self.labels) != self.num_classes:
            raise ModelError("labels must name every class")
        object.__setattr__(self, "labels", tuple(self.labels))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["labels"] = list(self.labels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ModelError(f"unknown model config keys {sorted(unknown)}")
        return cls(**{**d, "labels": tuple(d.get("labels", ()))})


def param_spec(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes, in serialization order."""
    D, F = config.embed_dim, config.embed_dim * config.ff_mult
    spec = [("tok_emb", (config.vocab_size, D)), ("pos_emb", (config.max_len, D))]
    for l in range(config.layers):
        p = f"enc{l}."
        spec += [
            (p + "ln1.g", (D,)), (p + "ln1.b", (D,)),
            (p + "wq", (D, D)), (p + "bq", (D,)),
            (p + "wk", (D, D)), (p + "bk", (D,)),
            (p + "wv", (D, D)), (p + "bv", (D,)),
            (p + "wo", (D, D)), (p + "bo", (D,)),
            (p + "ln2.g", (D,)), (p + "ln2.b", (D,)),
            (p + "w1", (D, F)), (p + "b1", (F,)),
            (p + "w2", (F, D)), (p + "b2", (D,)),
        ]
    spec += [
        ("lnf.g", (D,)), ("lnf.b", (D,)),
        ("dec.w_key", (D, D)), ("dec.w_value", (D, D)),
        ("dec.class_emb", (config.num_classes, D)),
        ("dec.ln.g", (D,)), ("dec.ln.b", (D,)),
        ("dec.w_out", (D,)),
    ]
    return spec


@dataclass
class ModelParameters:
    config: ModelConfig
    arrays: dict[str, np.ndarray]

    def __post_init__(self):
        spec = param_spec(self.config)
        if [n for n, _ in spec] != list(self.arrays):
            raise ModelError("parameter names do not match the configuration")
        for name, shape in spec:
            arr = self.arrays[name]
            if arr.shape != shape:
                raise ModelError(f"{name}: shape {arr.shape}, expected {shape}")

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.arrays.items()}

    def copy(self) -> "ModelParameters":
        return ModelParameters(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def freeze(self) -> "ModelParameters":
        for v in self.arrays.values():
            v.flags.writeable = False
        return self

    def flat(self) -> np.ndarray:
        return np.concatenate([v.reshape(-1) for v in self.arrays.values()])

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())


def init_params(config: ModelConfig, seed: int = 0) -> ModelParameters:
    rng = np.random.default_rng(seed)
    D = config.embed_dim
    out_scale = 1.0 / np.sqrt(2 * max(config.layers, 1))
    arrays = {}
    for name, shape in param_spec(config):
        leaf = name.rsplit(".", 1)[-1]
        if name == "tok_emb":
            arr = rng.normal(0.0, 0.5, shape)
        elif name == "pos_emb":
            arr = rng.normal(0.0, 0.1, shape)
        elif name == "dec.class_emb":
            arr = rng.normal(0.0, 1.0 / D, shape)
        elif leaf == "g":
            arr = np.ones(shape)
        elif leaf.startswith("b"):
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
            if leaf in ("wo", "w2"):
                arr *= out_scale
        arrays[name] = arr
    return ModelParameters(config, arrays)


# ---------------------------------------------------------------- forward pass

@dataclass
class Outputs:
    X: Tensor                      # (B, N, D) token embeddings
    H: Tensor                      # (B, N, D) contextual representations
    self_attention: list[Tensor]   # per layer (B, heads, N, N)
    A: Tensor                      # (B, J, N) cross-attention
    probs: Tensor                  # (B, J)


def _affine_ln(x: Tensor, w, prefix: str) -> Tensor:
    return ad.add(ad.mul(ad.layernorm(x), w[prefix + ".g"]), w[prefix + ".b"])


def _dropout(x: Tensor, p: float, rng) -> Tensor:
    if rng is None or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return ad.mul(x, keep)


def embed(w: dict[str, Tensor], ids: np.ndarray) -> Tensor:
    return ad.gather(w["tok_emb"], ids)


def check_tokens(ids: np.ndarray, config: ModelConfig) -> None:
    ids = np.asarray(ids)
    n = ids.shape[-1]
    if n < 1:
        raise ModelError("empty token sequence")
    if n > config.max_len:
        raise ModelError(f"sequence of {n} tokens exceeds max_len {config.max_len}")
    bad = np.argwhere((ids < 0) | (ids >= config.vocab_size))
    if len(bad):
        pos = tuple(int(v) for v in bad[0])
        raise ModelError(f"token id {int(ids[pos])} at position {pos[-1]} out of range "
                         f"for vocabulary of {config.vocab_size}")


def encoder_forward(w: dict[str, Tensor], config: ModelConfig, X: Tensor,
                    mask: np.ndarray | None = None, rng=None) -> tuple[Tensor, list[Tensor]]:
    B, N, D = X.shape
    h_, dh = config.heads, D // config.heads
    h = ad.add(X, ad.gather(w["pos_emb"], np.arange(N)))
    key_bias = None
    if mask is not None and not mask.all():
        key_bias = np.where(mask, 0.0, _NEG)[:, None, None, :]
    stack = []
    for l in range(config.layers):
        p = f"enc{l}."
        a = _affine_ln(h, w, p + "ln1")

        def heads(t):
            return ad.transpose(ad.reshape(t, (B, N, h_, dh)), (0, 2, 1, 3))

        q = heads(ad.add(ad.matmul(a, w[p + "wq"]), w[p + "bq"]))
        k = heads(ad.add(ad.matmul(a, w[p + "wk"]), w[p + "bk"]))
        v = heads(ad.add(ad.matmul(a, w[p + "wv"]), w[p + "bv"]))
        scores = ad.mul(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / np.sqrt(dh))
        if key_bias is not None:
            scores = ad.add(scores, key_bias)
        P = ad.softmax(scores, -1)
        stack.append(P)
        ctx = ad.reshape(ad.transpose(ad.matmul(P, v), (0, 2, 1, 3)), (B, N, D))
        attn_out = ad.add(ad.matmul(ctx, w[p + "wo"]), w[p + "bo"])
        h = ad.add(h, _dropout(attn_out, config.dropout, rng))
        a2 = _affine_ln(h, w, p + "ln2")
        ff = ad.gelu(ad.add(ad.matmul(a2, w[p + "w1"]), w[p + "b1"]))
        ff = ad.add(ad.matmul(ff, w[p + "w2"]), w[p + "b2"])
        h = ad.add(h, _dropout(ff, config.dropout, rng))
    H = _affine_ln(h, w, "lnf")
    return H, stack


def decoder_forward(w: dict[str, Tensor], H: Tensor,
                    mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    K = ad.matmul(H, w["dec.w_key"])
    V = ad.matmul(H, w["dec.w_value"])
    scores = ad.matmul(w["dec.class_emb"], ad.swapaxes(K, -1, -2))   # (B, J, N)
    if mask is not None and not mask.all():
        scores = ad.add(scores, np.where(mask, 0.0, _NEG)[:, None, :])
    A = ad.softmax(scores, -1)
    ctx = _affine_ln(ad.matmul(A, V), w, "dec.ln")
    logits = ad.sum_(ad.mul(ctx, w["dec.w_out"]), -1)
    return ad.sigmoid(logits), A


def forward(w: dict[str, Tensor], config: ModelConfig, ids: np.ndarray,
            mask: np.ndarray | None = None, X: Tensor | None = None, rng=None) -> Outputs:
    """Batched forward.  ``ids`` is (B, N); ``X`` overrides the embedding lookup."""
    ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    check_tokens(ids, config)
    if X is None:
        X = embed(w, ids)
    H, stack = encoder_forward(w, config, X, mask, rng)
    probs, A = decoder_forward(w, H, mask)
    return Outputs(X, H, stack, A, probs)


def pad_batch(seqs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    n = max(len(s) for s in seqs)
    ids = np.full((len(seqs), n), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def batch_probs(params: ModelParameters, seqs: Sequence[np.ndarray], chunk: int = 128) -> np.ndarray:
    """Eager class probabilities for many token sequences, (len(seqs), J)."""
    w = params.tensors()
    out = []
    with ad.no_record():
        for i in range(0, len(seqs), chunk):
            part = seqs[i: i + chunk]
            lengths = {len(s) for s in part}
            if len(lengths) == 1:
                ids, mask = np.stack(part), None
            else:
                ids, mask = pad_batch(part)
            out.append(forward(w, params.config, ids, mask).probs.data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, params.config.num_classes))


def baseline_ids(n: int) -> np.ndarray:
    """Start marker, mask tokens, end marker."""
    ids = np.full(n, MASK_ID, dtype=np.int64)
    ids[0], ids[-1] = START_ID, END_ID
    return ids


def baseline_embeddings(params: ModelParameters, n: int) -> np.ndarray:
    return params.arrays["tok_emb"][baseline_ids(n)]


# ---------------------------------------------------------------- single-document API

class ForwardResult:
    """Prediction for one document, with its tape for gradient queries."""

    def __init__(self, tokens, params: ModelParameters, outputs: Outputs, tape: Tape | None):
        self.tokens = np.asarray(tokens, dtype=np.int64)
        self.params = params
        self.probs = outputs.probs.data[0]
        self.attention = outputs.A.data[0]
        self.self_attention = [P.data[0] for P in outputs.self_attention]
        self.hidden = outputs.H.data[0]
        self.embeddings = outputs.X.data[0]
        self.tape = tape
        self._out = outputs
        self._grads: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def gradients(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        """(d y_j / d X  of shape (N, D),  d y_j / d A_j  of shape (N,))."""
        if j not in self._grads:
            if self.tape is None:
                raise ModelError("prediction was made without a tape")
            seed = np.zeros_like(self._out.probs.data)
            seed[0, j] = 1.0
            gx, ga = self.tape.gradient(self._out.probs, [self._out.X, self._out.A], seed)
            self._grads[j] = (gx.data[0], ga.data[0, j])
        return self._grads[j]


def predict(tokens, params: ModelParameters, config: ModelConfig | None = None,
            record: bool = True) -> ForwardResult:
    config = config or params.config
    ids = np.asarray(tokens, dtype=np.int64)[None, :]
    check_tokens(ids, config)
    w = params.tensors()
    if not record:
        with ad.no_record():
            return ForwardResult(tokens, params, forward(w, config, ids), None)
    tape = Tape()
    with tape:
        X = tape.mark("X", params.arrays["tok_emb"][ids])
        out = forward(w, config, ids, X=X)
    tape.output = out.probs
    return ForwardResult(tokens, params, out, tape)


def encode(tokens, params: ModelParameters, config: ModelConfig | None = None):
    """(H of shape (N, D), per-layer self-attention of shape (heads, N, N))."""
    config = config or params.config
    ids = np.asarray(tokens, dtype=np.int64)[None, :]
    check_tokens(ids, config)
    w = params.tensors()
    with ad.no_record():
        H, stack = encoder_forward(w, config, embed(w, ids))
    return H.data[0], [P.data[0] for P in stack]


def decode(H: np.ndarray, params: ModelParameters) -> tuple[np.ndarray, np.ndarray]:
    """(probabilities of shape (J,), cross-attention of shape (J, N))."""
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[1] != params.config.embed_dim:
        raise ModelError(f"H must be (N, {params.config.embed_dim}), got {H.shape}")
    with ad.no_record():
        probs, A = decoder_forward(params.tensors(), Tensor(H[None]))
    return probs.data[0], A.data[0]


# ---------------------------------------------------------------- serialization

def dumps(params: ModelParameters) -> bytes:
    header = json.dumps(params.config.to_dict(), sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(header)))
    buf.write(header)
    for name, _ in param_spec(params.config):
        buf.write(np.ascontiguousarray(params.arrays[name], dtype="<f8").tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> ModelParameters:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise ModelError("not an XMC1 model file (bad magic)")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise ModelError(f"unsupported model format version {version}")
    try:
        config = ModelConfig.from_dict(json.loads(blob[12: 12 + hlen].decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError) as exc:
        raise ModelError(f"corrupt model header: {exc}") from None
    spec = param_spec(config)
    total = 12 + hlen + 8 * sum(int(np.prod(s)) for _, s in spec)
    if len(blob) != total:
        raise ModelError(f"model file has {len(blob)} bytes, expected {total}")
    arrays, off = {}, 12 + hlen
    for name, shape in spec:
        n = int(np.prod(shape))
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(shape)
        off += 8 * n
    return ModelParameters(config, arrays)


def save_model(path, params: ModelParameters) -> None:
    Path(path).write_bytes(dumps(params))


def load_model(path) -> ModelParameters:
    return loads(Path(path).read_bytes())
