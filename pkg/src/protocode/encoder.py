"""Sequence embedding: token/position embeddings, stacked post-norm
transformer layers, side-information fusion, and mean pooling over
non-padding positions."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .lexnorm import TEXT_KINDS, lex_normalize
from .tensorcore import (
    ParamStore,
    Tensor,
    add,
    const,
    concat,
    embedding_lookup,
    gelu,
    layer_norm,
    matmul,
    mean_over_mask,
    mul,
    repeat_rows,
    reshape,
    scale,
    slice_rows,
    softmax,
    transpose,
)


class EmptySide(Exception):
    """Both side sequences empty while a fusion mode needs them."""


class LengthOverflow(Exception):
    """Sequence (plus the task token, if any) longer than the model max."""


FUSION_MODES = ("none", "task_token", "concat", "film", "adapter")


@dataclass
class EncoderConfig:
    vocab_size: int
    side_vocab_size: int = 0
    max_len: int = 256
    dim: int = 64
    layers: int = 2
    heads: int = 4
    ff_dim: int = 256
    dropout: float = 0.1
    fusion: str = "none"
    side_dim: int = 32
    adapter_dim: int = 16
    ln_eps: float = 1e-5
    pool_task_token: bool = False

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.max_len < 2:
            raise ValueError("max_len must be >= 2")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}")
        if self.ln_eps <= 0:
            raise ValueError("ln_eps must be positive")
        if self.fusion != "none" and self.side_vocab_size < 1:
            raise ValueError("side fusion requires a side vocabulary")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


class SideVocab:
    """Word-level vocabulary over side-text token surfaces; id 0 is unknown."""

    def __init__(self, words):
        self.ids = {"<unk>": 0}
        for w in words:
            if w not in self.ids:
                self.ids[w] = len(self.ids)

    def __len__(self):
        return len(self.ids)

    @staticmethod
    def tokenize(text: str) -> list[str]:
        return [t.surface() for t in lex_normalize(text) if t.kind in TEXT_KINDS]

    @classmethod
    def build(cls, texts) -> "SideVocab":
        words = []
        for text in texts:
            words.extend(cls.tokenize(text))
        return cls(words)

    def encode(self, text: str) -> list[int]:
        return [self.ids.get(w, 0) for w in self.tokenize(text)]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for word, idx in self.ids.items():
                fh.write(f"{word}\t{idx}\n")

    @classmethod
    def load(cls, path) -> "SideVocab":
        vocab = cls([])
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                word, idx = line.rsplit("\t", 1)
                vocab.ids[word] = int(idx)
        return vocab


def init_params(cfg: EncoderConfig, seed: int) -> ParamStore:
    """Fresh parameters: normal(0, 0.02) weights, zero biases, and
    identity-at-init side fusion (FiLM projections and adapter
    up-projections start at zero)."""
    rng = np.random.default_rng(seed)
    params = ParamStore()

    def normal(name, shape):
        params.add(name, Tensor((rng.normal(0, 0.02, shape)).astype(np.float32)))

    def zeros(name, shape):
        params.add(name, Tensor(np.zeros(shape, dtype=np.float32)))

    def ones(name, shape):
        params.add(name, Tensor(np.ones(shape, dtype=np.float32)))

    d, ds = cfg.dim, cfg.side_dim
    normal("tok_emb", (cfg.vocab_size + 1, d))  # ids are 1-based; row 0 unused
    normal("pos_emb", (cfg.max_len, d))
    for i in range(cfg.layers):
        p = f"layer{i}."
        for w, b in (("wq", "bq"), ("wk", "bk"), ("wv", "bv"), ("wo", "bo")):
            normal(p + w, (d, d))
            zeros(p + b, (d,))
        ones(p + "ln1_g", (d,))
        zeros(p + "ln1_b", (d,))
        normal(p + "w1", (d, cfg.ff_dim))
        zeros(p + "b1", (cfg.ff_dim,))
        normal(p + "w2", (cfg.ff_dim, d))
        zeros(p + "b2", (d,))
        ones(p + "ln2_g", (d,))
        zeros(p + "ln2_b", (d,))
        if cfg.fusion == "film":
            zeros(p + "film1_w", (ds, 2 * d))
            zeros(p + "film1_b", (2 * d,))
            zeros(p + "film2_w", (ds, 2 * d))
            zeros(p + "film2_b", (2 * d,))
        elif cfg.fusion == "adapter":
            for a in ("adapt1", "adapt2"):
                normal(p + a + "_down_w", (d + ds, cfg.adapter_dim))
                zeros(p + a + "_down_b", (cfg.adapter_dim,))
                zeros(p + a + "_up_w", (cfg.adapter_dim, d))
                zeros(p + a + "_up_b", (d,))
    if cfg.fusion != "none":
        normal("side_emb", (cfg.side_vocab_size, ds))
        if cfg.fusion == "task_token":
            normal("task_proj_w", (ds, d))
            zeros("task_proj_b", (d,))
        elif cfg.fusion == "concat":
            normal("cat_w1", (d + ds, d))
            zeros("cat_b1", (d,))
            normal("cat_w2", (d, d))
            zeros("cat_b2", (d,))
    return params


def _dtype_of(params: ParamStore):
    return params["tok_emb"].dtype


def embed_side(params: ParamStore, cfg: EncoderConfig, prompt_ids, rubric_ids) -> Tensor:
    """g(prompt) + g(rubric), each the mean of learned word embeddings.

    An empty side contributes a zero vector; both empty is an error
    unless fusion is off.
    """
    if not prompt_ids and not rubric_ids:
        if cfg.fusion != "none":
            raise EmptySide("both side sequences are empty")
        return Tensor(np.zeros((1, cfg.side_dim), dtype=_dtype_of(params)))

    def mean_embed(ids):
        if not ids:
            return None
        arr = np.asarray([ids], dtype=np.int64)
        emb = embedding_lookup(params["side_emb"], arr)
        return mean_over_mask(emb, np.ones_like(arr, dtype=bool))

    vec = None
    for part in (mean_embed(prompt_ids), mean_embed(rubric_ids)):
        if part is not None:
            vec = part if vec is None else add(vec, part)
    return vec


def _dropout(t: Tensor, rate: float, train: bool, rng) -> Tensor:
    if not train or rate <= 0.0:
        return t
    keep = (rng.random(t.shape) >= rate).astype(t.data.dtype) / (1.0 - rate)
    return mul(t, const(keep))


def _film(out: Tensor, side_vec: Tensor, params, name: str, d: int) -> Tensor:
    gb = add(matmul(side_vec, params[name + "_w"]), params[name + "_b"])  # (1, 2d)
    gb = reshape(gb, (2, d))
    gamma = add(reshape(slice_rows(gb, 0, 1), (d,)), const(np.ones(d, dtype=gb.dtype)))
    beta = reshape(slice_rows(gb, 1, 2), (d,))
    return add(mul(out, gamma), beta)


def _adapter(out: Tensor, side_btd: Tensor, params, name: str) -> Tensor:
    a_in = concat([out, side_btd], axis=-1)
    hidden = gelu(add(matmul(a_in, params[name + "_down_w"]), params[name + "_down_b"]))
    residual = add(matmul(hidden, params[name + "_up_w"]), params[name + "_up_b"])
    return add(out, residual)


def fuse_and_encode(params: ParamStore, cfg: EncoderConfig, ids, pad_mask,
                    side_vec: Tensor | None = None, *, train: bool = False,
                    drop_rng=None) -> Tensor:
    """Embed a batch of id sequences into one vector each.

    ids: (B, n) integer array; pad_mask: (B, n) bool, True at real tokens.
    Pooling averages transformer outputs over non-padding program tokens;
    the prepended task token is excluded unless configured otherwise.
    """
    ids = np.asarray(ids, dtype=np.int64)
    pad_mask = np.asarray(pad_mask, dtype=bool)
    if ids.ndim != 2 or pad_mask.shape != ids.shape:
        raise ValueError(f"ids {ids.shape} and pad_mask {pad_mask.shape} must be (B, n)")
    bsz, n = ids.shape
    limit = cfg.max_len - 1 if cfg.fusion == "task_token" else cfg.max_len
    if n > limit:
        raise LengthOverflow(f"sequence length {n} exceeds budget {limit}")
    if cfg.fusion != "none" and side_vec is None:
        raise EmptySide(f"fusion '{cfg.fusion}' needs a side vector")
    if train and cfg.dropout > 0 and drop_rng is None:
        raise ValueError("training with dropout needs a random generator")
    dtype = _dtype_of(params)

    x = embedding_lookup(params["tok_emb"], ids)
    x = add(x, slice_rows(params["pos_emb"], 0, n))
    x = _dropout(x, cfg.dropout, train, drop_rng)

    pool_mask = pad_mask
    attn_mask = pad_mask
    if cfg.fusion == "task_token":
        tok = add(matmul(side_vec, params["task_proj_w"]), params["task_proj_b"])
        tok = reshape(repeat_rows(tok, bsz), (bsz, 1, cfg.dim))
        x = concat([tok, x], axis=1)
        front = np.ones((bsz, 1), dtype=bool)
        attn_mask = np.concatenate([front, pad_mask], axis=1)
        pool_mask = np.concatenate(
            [front if cfg.pool_task_token else ~front, pad_mask], axis=1
        )
        n += 1

    side_btd = None
    if cfg.fusion == "adapter":
        ones_bt1 = const(np.ones((bsz, n, 1), dtype=dtype))
        side_btd = matmul(ones_bt1, side_vec)

    # additive attention bias: padded key positions are unreachable;
    # applied in place on the score buffer (a constant shift is
    # gradient-transparent, so no graph node is needed)
    bias = np.where(attn_mask[:, None, None, :], 0.0, -1e9).astype(dtype)

    dh = cfg.dim // cfg.heads
    h = x
    for i in range(cfg.layers):
        p = f"layer{i}."

        def heads_view(t):
            return transpose(reshape(t, (bsz, n, cfg.heads, dh)), (0, 2, 1, 3))

        q = heads_view(add(matmul(h, params[p + "wq"]), params[p + "bq"]))
        k = heads_view(add(matmul(h, params[p + "wk"]), params[p + "bk"]))
        v = heads_view(add(matmul(h, params[p + "wv"]), params[p + "bv"]))
        scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), dh ** -0.5)
        scores.data += bias
        attn = softmax(scores, axis=-1)
        attn = _dropout(attn, cfg.dropout, train, drop_rng)
        ctx = reshape(transpose(matmul(attn, v), (0, 2, 1, 3)), (bsz, n, cfg.dim))
        out = add(matmul(ctx, params[p + "wo"]), params[p + "bo"])
        if cfg.fusion == "film":
            out = _film(out, side_vec, params, p + "film1", cfg.dim)
        elif cfg.fusion == "adapter":
            out = _adapter(out, side_btd, params, p + "adapt1")
        h = add(h, _dropout(out, cfg.dropout, train, drop_rng))
        h = add(mul(layer_norm(h, -1, cfg.ln_eps), params[p + "ln1_g"]), params[p + "ln1_b"])

        u = gelu(add(matmul(h, params[p + "w1"]), params[p + "b1"]))
        out = add(matmul(u, params[p + "w2"]), params[p + "b2"])
        if cfg.fusion == "film":
            out = _film(out, side_vec, params, p + "film2", cfg.dim)
        elif cfg.fusion == "adapter":
            out = _adapter(out, side_btd, params, p + "adapt2")
        h = add(h, _dropout(out, cfg.dropout, train, drop_rng))
        h = add(mul(layer_norm(h, -1, cfg.ln_eps), params[p + "ln2_g"]), params[p + "ln2_b"])

    pooled = mean_over_mask(h, pool_mask)
    if cfg.fusion == "concat":
        rep = repeat_rows(side_vec, bsz)
        cat = concat([pooled, rep], axis=-1)
        hidden = gelu(add(matmul(cat, params["cat_w1"]), params["cat_b1"]))
        pooled = add(matmul(hidden, params["cat_w2"]), params["cat_b2"])
    return pooled


def attention_probe(params: ParamStore, cfg: EncoderConfig, ids, pad_mask):
    """First-layer attention rows after masking (diagnostic only)."""
    ids = np.asarray(ids, dtype=np.int64)
    pad_mask = np.asarray(pad_mask, dtype=bool)
    bsz, n = ids.shape
    x = embedding_lookup(params["tok_emb"], ids)
    x = add(x, slice_rows(params["pos_emb"], 0, n))
    dh = cfg.dim // cfg.heads
    p = "layer0."

    def heads_view(t):
        return transpose(reshape(t, (bsz, n, cfg.heads, dh)), (0, 2, 1, 3))

    q = heads_view(add(matmul(x, params[p + "wq"]), params[p + "bq"]))
    k = heads_view(add(matmul(x, params[p + "wk"]), params[p + "bk"]))
    bias = np.where(pad_mask[:, None, None, :], 0.0, -1e9).astype(_dtype_of(params))
    bias = const(np.broadcast_to(bias, (bsz, cfg.heads, n, n)).copy())
    scores = add(scale(matmul(q, transpose(k, (0, 1, 3, 2))), dh ** -0.5), bias)
    return softmax(scores, axis=-1).data
