"""Token encoder and span classifier with exact reverse-mode gradients.

The encoder is a small pre-norm self-attention stack over learned word
embeddings (plus an optional learned projection of external per-token
vectors) with sinusoidal positions. Fencepost vectors are built by
splitting each token output into forward/backward halves and pairing
adjacent tokens; a span (i, j) is represented by y_j - y_i and scored by
a two-layer classifier. The null label's score is pinned to zero so that
charts from different models are directly comparable.

All math is plain numpy so the backward pass can be written explicitly
and checked against finite differences.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .treebank import ParseTree, labeled_spans

NULL_LABEL = ""
OOV_TOKEN = "<unk>"

_CHECKPOINT_MAGIC = b"SPANPARSERCKPT1\n"
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    d_span: int = 128
    label_set: tuple[str, ...] = (NULL_LABEL, "S")
    seed: int = 0
    d_external: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("d_model", "n_layers", "n_heads", "d_ff", "d_span"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ModelError("d_model must be divisible by n_heads")
        if self.d_model % 2 != 0:
            raise ModelError("d_model must be even for fencepost splitting")
        if NULL_LABEL not in self.label_set:
            raise ModelError("label_set must contain the null label")
        if self.label_set.index(NULL_LABEL) != 0:
            raise ModelError("null label must sit at index 0 of label_set")
        if len(set(self.label_set)) != len(self.label_set):
            raise ModelError("label_set contains duplicates")
        if self.dtype not in ("float32", "float64"):
            raise ModelError("dtype must be float32 or float64")
        object.__setattr__(self, "label_set", tuple(self.label_set))

    @property
    def null_index(self):
        return 0

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


class Vocabulary:
    """Surface-to-id map; id 0 is the out-of-vocabulary token."""

    def __init__(self, words):
        words = list(words)
        if OOV_TOKEN in words:
            raise ModelError(f"{OOV_TOKEN!r} is reserved")
        if len(set(words)) != len(words):
            raise ModelError("duplicate words in vocabulary")
        self.words = [OOV_TOKEN] + words
        self._index = {w: i for i, w in enumerate(self.words)}

    @classmethod
    def from_corpus(cls, trees):
        seen = sorted({word for tree in trees for word in tree.words()})
        return cls(seen)

    def __len__(self):
        return len(self.words)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.words == other.words

    def lookup(self, word):
        return self._index.get(word, 0)

    def ids(self, words):
        return np.array([self.lookup(w) for w in words], dtype=np.int64)


@dataclass
class ModelParams:
    config: EncoderConfig
    vocabulary: Vocabulary
    arrays: dict[str, np.ndarray]

    def copy(self):
        return ModelParams(
            self.config,
            self.vocabulary,
            {k: v.copy() for k, v in self.arrays.items()},
        )


@dataclass
class SequenceRepr:
    """Fencepost vectors y_0..y_n plus per-layer attention probabilities."""

    fenceposts: np.ndarray  # (n+1, d_model)
    attentions: list[np.ndarray]  # each (n_heads, n, n)

    @property
    def n(self):
        return self.fenceposts.shape[0] - 1


@dataclass
class SpanScoreChart:
    """Scores s(i, j, l) for 0 <= i < j <= n, labels ordered as in config.

    Only the strict upper triangle of `scores` is meaningful. `words` is
    carried along so decoded trees can reproduce the sentence.
    """

    n: int
    labels: tuple[str, ...]
    scores: np.ndarray  # (n+1, n+1, n_labels)
    words: list[str] | None = None

    def label_index(self, label):
        try:
            return self.labels.index(label)
        except ValueError:
            raise ModelError(f"unknown label {label!r}") from None

    def surface(self, position):
        if self.words is not None:
            return self.words[position]
        return f"w{position}"


def init_params(config: EncoderConfig, vocabulary: Vocabulary) -> ModelParams:
    """Fan-in scaled uniform init, deterministic given config.seed."""
    if len(vocabulary) <= 1:
        raise ModelError("vocabulary is empty")
    rng = np.random.default_rng(config.seed)
    dtype = config.np_dtype
    arrays = {}

    def uniform(name, shape, fan_in):
        limit = math.sqrt(3.0 / fan_in)
        arrays[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)

    def zeros(name, shape):
        arrays[name] = np.zeros(shape, dtype=dtype)

    def ones(name, shape):
        arrays[name] = np.ones(shape, dtype=dtype)

    d = config.d_model
    uniform("embed", (len(vocabulary), d), d)
    if config.d_external > 0:
        uniform("ext_proj", (config.d_external, d), config.d_external)
    for i in range(config.n_layers):
        p = f"layer{i}"
        ones(f"{p}.ln1.g", d)
        zeros(f"{p}.ln1.b", d)
        for mat in ("wq", "wk", "wv", "wo"):
            uniform(f"{p}.{mat}", (d, d), d)
        for vec in ("bq", "bk", "bv", "bo"):
            zeros(f"{p}.{vec}", d)
        ones(f"{p}.ln2.g", d)
        zeros(f"{p}.ln2.b", d)
        uniform(f"{p}.w1", (d, config.d_ff), d)
        zeros(f"{p}.c1", config.d_ff)
        uniform(f"{p}.w2", (config.d_ff, d), config.d_ff)
        zeros(f"{p}.c2", d)
    ones("ln_out.g", d)
    zeros("ln_out.b", d)
    uniform("span.w1", (d, config.d_span), d)
    zeros("span.b1", config.d_span)
    uniform("span.w2", (config.d_span, len(config.label_set)), config.d_span)
    zeros("span.b2", len(config.label_set))
    return ModelParams(config, vocabulary, arrays)


def positional_encoding(n, d, dtype):
    pos = np.arange(n, dtype=np.float64)[:, None]
    dim = np.arange(0, d, 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, dim / d)
    out = np.zeros((n, d), dtype=np.float64)
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out.astype(dtype)


def span_index_arrays(n):
    """Flat enumeration of spans (i, j) with i < j, ordered by i then j."""
    iidx, jidx = [], []
    for i in range(n):
        for j in range(i + 1, n + 1):
            iidx.append(i)
            jidx.append(j)
    return np.array(iidx, dtype=np.int64), np.array(jidx, dtype=np.int64)


# -- layer primitives ---------------------------------------------------------

_LN_EPS = 1e-5


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mu) * inv
    return g * xhat + b, (xhat, inv)


def _layer_norm_backward(dy, cache, g):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    mean1 = dxhat.mean(axis=-1, keepdims=True)
    mean2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - mean1 - xhat * mean2)
    return dx, dg, db


def _softmax(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _dropout_mask(shape, rate, rng, dtype):
    if rate <= 0.0 or rng is None:
        return None
    keep = 1.0 - rate
    return (rng.random(shape) < keep).astype(dtype) / keep


def _apply_mask(x, mask):
    return x if mask is None else x * mask


def _split_heads(x, n_heads):
    n, d = x.shape
    return x.reshape(n, n_heads, d // n_heads).transpose(1, 0, 2)


def _merge_heads(x):
    h, n, dk = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dk)


def _encoder_forward(params, ids, external=None, dropout=0.0, rng=None):
    """Token stack forward. Returns (fenceposts, cache)."""
    cfg = params.config
    a = params.arrays
    dtype = cfg.np_dtype
    n = len(ids)

    x = a["embed"][ids]
    cache = {"ids": ids, "n": n, "layers": [], "external": None}
    if external is not None:
        if cfg.d_external == 0:
            raise ModelError("model has no external-vector projection")
        external = np.asarray(external, dtype=dtype)
        if external.shape != (n, cfg.d_external):
            raise ModelError(
                f"external vectors shape {external.shape} does not match "
                f"({n}, {cfg.d_external})"
            )
        x = x + external @ a["ext_proj"]
        cache["external"] = external
    x = x + positional_encoding(n, cfg.d_model, dtype)

    scale = 1.0 / math.sqrt(cfg.d_model // cfg.n_heads)
    for i in range(cfg.n_layers):
        p = f"layer{i}"
        lc = {"x_in": x}
        ln1, lc["ln1"] = _layer_norm(x, a[f"{p}.ln1.g"], a[f"{p}.ln1.b"])
        lc["ln1_out"] = ln1
        q = ln1 @ a[f"{p}.wq"] + a[f"{p}.bq"]
        k = ln1 @ a[f"{p}.wk"] + a[f"{p}.bk"]
        v = ln1 @ a[f"{p}.wv"] + a[f"{p}.bv"]
        qh, kh, vh = (_split_heads(t, cfg.n_heads) for t in (q, k, v))
        attn = _softmax(qh @ kh.transpose(0, 2, 1) * scale)
        ctx = _merge_heads(attn @ vh)
        lc.update(qh=qh, kh=kh, vh=vh, attn=attn, ctx=ctx)
        out = ctx @ a[f"{p}.wo"] + a[f"{p}.bo"]
        lc["attn_mask"] = _dropout_mask(out.shape, dropout, rng, dtype)
        x = x + _apply_mask(out, lc["attn_mask"])

        lc["x_mid"] = x
        ln2, lc["ln2"] = _layer_norm(x, a[f"{p}.ln2.g"], a[f"{p}.ln2.b"])
        lc["ln2_out"] = ln2
        pre = ln2 @ a[f"{p}.w1"] + a[f"{p}.c1"]
        hidden = np.maximum(pre, 0.0)
        lc["ff_hidden"] = hidden
        ff = hidden @ a[f"{p}.w2"] + a[f"{p}.c2"]
        lc["ff_mask"] = _dropout_mask(ff.shape, dropout, rng, dtype)
        x = x + _apply_mask(ff, lc["ff_mask"])
        cache["layers"].append(lc)

    cache["x_pre_out"] = x
    out, cache["ln_out"] = _layer_norm(x, a["ln_out.g"], a["ln_out.b"])
    cache["token_out"] = out

    half = cfg.d_model // 2
    y = np.zeros((n + 1, cfg.d_model), dtype=dtype)
    y[1:, :half] = out[:, :half]
    y[:n, half:] = out[:, half:]
    return y, cache


def _encoder_backward(params, cache, dy):
    """Backprop from fencepost gradients to parameter gradients."""
    cfg = params.config
    a = params.arrays
    n = cache["n"]
    half = cfg.d_model // 2
    grads = {name: np.zeros_like(arr) for name, arr in a.items()}

    dout = np.zeros((n, cfg.d_model), dtype=cfg.np_dtype)
    dout[:, :half] = dy[1:, :half]
    dout[:, half:] = dy[:n, half:]

    dx, dg, db = _layer_norm_backward(dout, cache["ln_out"], a["ln_out.g"])
    grads["ln_out.g"] += dg
    grads["ln_out.b"] += db

    scale = 1.0 / math.sqrt(cfg.d_model // cfg.n_heads)
    for i in reversed(range(cfg.n_layers)):
        p = f"layer{i}"
        lc = cache["layers"][i]

        dff = _apply_mask(dx, lc["ff_mask"])
        grads[f"{p}.c2"] += dff.sum(axis=0)
        grads[f"{p}.w2"] += lc["ff_hidden"].T @ dff
        dhidden = dff @ a[f"{p}.w2"].T
        dhidden *= lc["ff_hidden"] > 0
        grads[f"{p}.c1"] += dhidden.sum(axis=0)
        grads[f"{p}.w1"] += lc["ln2_out"].T @ dhidden
        dln2 = dhidden @ a[f"{p}.w1"].T
        dmid, dg, db = _layer_norm_backward(dln2, lc["ln2"], a[f"{p}.ln2.g"])
        grads[f"{p}.ln2.g"] += dg
        grads[f"{p}.ln2.b"] += db
        dx = dx + dmid

        dattn_out = _apply_mask(dx, lc["attn_mask"])
        grads[f"{p}.bo"] += dattn_out.sum(axis=0)
        grads[f"{p}.wo"] += lc["ctx"].T @ dattn_out
        dctx = _split_heads(dattn_out @ a[f"{p}.wo"].T, cfg.n_heads)
        dattn = dctx @ lc["vh"].transpose(0, 2, 1)
        dvh = lc["attn"].transpose(0, 2, 1) @ dctx
        # softmax jacobian, rowwise over the last axis
        dscores = lc["attn"] * (
            dattn - (dattn * lc["attn"]).sum(axis=-1, keepdims=True)
        )
        dqh = dscores @ lc["kh"] * scale
        dkh = dscores.transpose(0, 2, 1) @ lc["qh"] * scale
        dq, dk, dv = (_merge_heads(t) for t in (dqh, dkh, dvh))
        ln1 = lc["ln1_out"]
        dln1 = np.zeros_like(ln1)
        for mat, bias, dmat in (("wq", "bq", dq), ("wk", "bk", dk), ("wv", "bv", dv)):
            grads[f"{p}.{mat}"] += ln1.T @ dmat
            grads[f"{p}.{bias}"] += dmat.sum(axis=0)
            dln1 += dmat @ a[f"{p}.{mat}"].T
        dinp, dg, db = _layer_norm_backward(dln1, lc["ln1"], a[f"{p}.ln1.g"])
        grads[f"{p}.ln1.g"] += dg
        grads[f"{p}.ln1.b"] += db
        dx = dx + dinp

    np.add.at(grads["embed"], cache["ids"], dx)
    if cache["external"] is not None:
        grads["ext_proj"] += cache["external"].T @ dx
    return grads


def _span_scores_forward(params, y):
    """Span classifier over all fencepost pairs. Returns (flat scores, cache)."""
    a = params.arrays
    n = y.shape[0] - 1
    iidx, jidx = span_index_arrays(n)
    vecs = y[jidx] - y[iidx]
    pre = vecs @ a["span.w1"] + a["span.b1"]
    hidden = np.maximum(pre, 0.0)
    raw = hidden @ a["span.w2"] + a["span.b2"]
    pinned = raw - raw[:, [0]]
    cache = {"iidx": iidx, "jidx": jidx, "vecs": vecs, "hidden": hidden, "n": n}
    return pinned, cache


def _span_scores_backward(params, cache, dpinned):
    a = params.arrays
    draw = dpinned.copy()
    draw[:, 0] -= dpinned.sum(axis=1)
    grads = {}
    grads["span.b2"] = draw.sum(axis=0)
    grads["span.w2"] = cache["hidden"].T @ draw
    dhidden = draw @ a["span.w2"].T
    dhidden *= cache["hidden"] > 0
    grads["span.b1"] = dhidden.sum(axis=0)
    grads["span.w1"] = cache["vecs"].T @ dhidden
    dvecs = dhidden @ a["span.w1"].T
    n = cache["n"]
    dy = np.zeros((n + 1, params.config.d_model), dtype=params.config.np_dtype)
    np.add.at(dy, cache["jidx"], dvecs)
    np.subtract.at(dy, cache["iidx"], dvecs)
    return grads, dy


def _forward(params, words, external=None, dropout=0.0, rng=None):
    """Full forward: sentence -> pinned flat span scores, with caches."""
    if len(words) == 0:
        raise ModelError("sentence must contain at least one token")
    ids = params.vocabulary.ids(words) if not isinstance(words, np.ndarray) else words
    y, enc_cache = _encoder_forward(params, ids, external, dropout, rng)
    flat, span_cache = _span_scores_forward(params, y)
    return flat, {"encoder": enc_cache, "span": span_cache}


def _backward(params, cache, dflat):
    grads, dy = _span_scores_backward(params, cache["span"], dflat)
    enc_grads = _encoder_backward(params, cache["encoder"], dy)
    for name, g in grads.items():
        enc_grads[name] += g
    return enc_grads


def _flat_to_chart(flat, n, labels, words=None):
    scores = np.zeros((n + 1, n + 1, len(labels)), dtype=flat.dtype)
    iidx, jidx = span_index_arrays(n)
    scores[iidx, jidx, :] = flat
    return SpanScoreChart(n=n, labels=labels, scores=scores, words=words)


def chart_gradient_to_flat(chart_gradient, n):
    iidx, jidx = span_index_arrays(n)
    return chart_gradient[iidx, jidx, :]


# -- public operations --------------------------------------------------------


def encode(sentence, params, external_vectors=None) -> SequenceRepr:
    """Map a token sequence to its n+1 fencepost vectors."""
    words = list(sentence)
    if not words:
        raise ModelError("sentence must contain at least one token")
    ids = params.vocabulary.ids(words)
    y, cache = _encoder_forward(params, ids, external_vectors)
    attentions = [lc["attn"] for lc in cache["layers"]]
    return SequenceRepr(fenceposts=y, attentions=attentions)


def span_vector(repr: SequenceRepr, i, j) -> np.ndarray:
    if not (0 <= i < j <= repr.n):
        raise ModelError(f"invalid span ({i}, {j}) for n={repr.n}")
    return repr.fenceposts[j] - repr.fenceposts[i]


def score_spans(sentence, params, external_vectors=None) -> SpanScoreChart:
    """Score every span for every label; the null label is pinned to 0."""
    words = list(sentence)
    flat, cache = _forward(params, words, external_vectors)
    return _flat_to_chart(flat, cache["span"]["n"], params.config.label_set, words)


def tree_score(chart: SpanScoreChart, tree: ParseTree) -> float:
    """Sum of chart scores over the tree's collapsed labeled spans (Eq. style
    additive model). math.fsum keeps the result independent of span order."""
    if len(tree) != chart.n:
        raise ModelError(
            f"tree length {len(tree)} does not match chart length {chart.n}"
        )
    terms = []
    for span in labeled_spans(tree):
        terms.append(float(chart.scores[span.i, span.j, chart.label_index(span.label)]))
    return math.fsum(terms)


def backward(sentence, params, chart_gradient, external_vectors=None):
    """Gradients of sum(chart * chart_gradient) for every parameter."""
    words = list(sentence)
    n = len(words)
    expected = (n + 1, n + 1, len(params.config.label_set))
    chart_gradient = np.asarray(chart_gradient, dtype=params.config.np_dtype)
    if chart_gradient.shape != expected:
        raise ModelError(
            f"chart gradient shape {chart_gradient.shape}, expected {expected}"
        )
    flat, cache = _forward(params, words, external_vectors)
    return _backward(params, cache, chart_gradient_to_flat(chart_gradient, n))


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(path, params: ModelParams) -> None:
    """Deterministic container: json header plus raw little-endian arrays."""
    names = sorted(params.arrays)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "vocabulary": params.vocabulary.words[1:],
        "arrays": [
            {
                "name": name,
                "dtype": str(params.arrays[name].dtype),
                "shape": list(params.arrays[name].shape),
            }
            for name in names
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as handle:
        handle.write(_CHECKPOINT_MAGIC)
        handle.write(struct.pack("<Q", len(blob)))
        handle.write(blob)
        for name in names:
            arr = params.arrays[name]
            handle.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as handle:
        magic = handle.read(len(_CHECKPOINT_MAGIC))
        if magic != _CHECKPOINT_MAGIC:
            raise ModelError(f"{path}: not a spanparser checkpoint")
        (length,) = struct.unpack("<Q", handle.read(8))
        header = json.loads(handle.read(length).decode("utf-8"))
        if header["version"] != CHECKPOINT_VERSION:
            raise ModelError(f"unsupported checkpoint version {header['version']}")
        cfg = header["config"]
        cfg["label_set"] = tuple(cfg["label_set"])
        config = EncoderConfig(**cfg)
        vocabulary = Vocabulary(header["vocabulary"])
        arrays = {}
        for meta in header["arrays"]:
            dtype = np.dtype(meta["dtype"])
            count = int(np.prod(meta["shape"])) if meta["shape"] else 1
            raw = handle.read(count * dtype.itemsize)
            arr = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype)
            arrays[meta["name"]] = arr.reshape(meta["shape"]).copy()
    return ModelParams(config, vocabulary, arrays)


def read_external_vectors(path, sentence_lengths):
    """Token-aligned float vectors: one line per token, grouped by the given
    sentence lengths."""
    rows = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                rows.append([float(x) for x in line.split()])
    total = sum(sentence_lengths)
    if len(rows) != total:
        raise ModelError(
            f"{path}: {len(rows)} vector lines for {total} tokens"
        )
    out = []
    start = 0
    for n in sentence_lengths:
        out.append(np.array(rows[start : start + n], dtype=np.float64))
        start += n
    return out
