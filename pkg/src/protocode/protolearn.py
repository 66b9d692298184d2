"""Prototype construction, the distance-softmax objective, prediction,
Adam with linear warmup and decay, the episodic meta-training loop, and
checkpoint persistence."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensorcore as tc
from .encoder import EncoderConfig, SideVocab, embed_side, fuse_and_encode, init_params
from .lexnorm import (
    TEST_SEQUENTIAL,
    TRAIN_RANDOM,
    LexConfig,
    MergeTable,
    bpe_encode,
    obfuscate,
)
from .taskforge import Episode, mix_seed, sample_episode
from .tensorcore import ParamStore, Tensor


class EmptyClass(Exception):
    """A requested class has no support examples."""


class NonFiniteLoss(Exception):
    """The episode loss overflowed or went NaN."""


class ManifestMismatch(Exception):
    """Checkpoint architecture does not match the requested config."""


class CorruptBlob(Exception):
    """Checkpoint payload length disagrees with its manifest."""


@dataclass
class LossConfig:
    temperature: float = 1.0
    trainable_temperature: bool = False
    distance: str = "squared"  # "squared" | "euclidean"

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.distance not in ("squared", "euclidean"):
            raise ValueError("distance must be 'squared' or 'euclidean'")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def compute_prototypes(embeddings: Tensor, labels, class_ids=None):
    """Per-class arithmetic mean of support embeddings.

    Returns (prototypes (N, d), class_ids sorted ascending).
    """
    labels = list(labels)
    present = sorted(set(labels))
    if class_ids is None:
        class_ids = present
    else:
        class_ids = sorted(class_ids)
        missing = [c for c in class_ids if c not in present]
        if missing:
            raise EmptyClass(f"no support examples for class(es) {missing}")
    assign = np.zeros((len(class_ids), len(labels)), dtype=embeddings.dtype)
    for row, cls in enumerate(class_ids):
        members = [i for i, y in enumerate(labels) if y == cls]
        if not members:
            raise EmptyClass(f"no support examples for class {cls}")
        assign[row, members] = 1.0 / len(members)
    return tc.matmul(tc.const(assign), embeddings), class_ids


def _distance_matrix(query: Tensor, protos: Tensor, distance: str) -> Tensor:
    d2 = tc.squared_distance(query, protos)
    if distance == "euclidean":
        return tc.sqrt(tc.add(d2, tc.const(np.asarray(1e-12, dtype=d2.dtype))))
    return d2


def proto_loss(protos: Tensor, class_ids, query: Tensor, query_labels,
               temperature, distance: str = "squared") -> Tensor:
    """Mean negative log-probability of the true class under the softmax
    over negated prototype distances.

    `temperature` is either a float or the scalar log-temperature tensor
    when it is trained.
    """
    dist = _distance_matrix(query, protos, distance)
    if isinstance(temperature, Tensor):
        inv_tau = tc.exp(tc.scale(temperature, -1.0))
        logits = tc.scale(tc.mul(dist, inv_tau), -1.0)
    else:
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        logits = tc.scale(dist, -1.0 / float(temperature))
    logp = tc.log_softmax(logits, axis=-1)
    index = {cls: i for i, cls in enumerate(class_ids)}
    onehot = np.zeros(dist.shape, dtype=dist.dtype)
    for row, y in enumerate(query_labels):
        onehot[row, index[y]] = 1.0
    picked = tc.sum_axis(tc.mul(logp, tc.const(onehot)), 1)
    loss = tc.scale(tc.mean_all(picked), -1.0)
    if not np.isfinite(loss.data):
        raise NonFiniteLoss(f"episode loss is {loss.data}")
    return loss


def predict(protos, class_ids, embedding, temperature: float = 1.0,
            distance: str = "squared"):
    """Nearest-prototype class plus softmax class probabilities.

    Exact distance ties resolve to the lowest class id.  Works on a
    single embedding (d,) or a batch (M, d); prototypes are (N, d).
    """
    protos = protos.data if isinstance(protos, Tensor) else np.asarray(protos)
    emb = embedding.data if isinstance(embedding, Tensor) else np.asarray(embedding)
    single = emb.ndim == 1
    if single:
        emb = emb[None, :]
    diff = emb[:, None, :] - protos[None, :, :]
    dist = (diff**2).sum(axis=-1)
    if distance == "euclidean":
        dist = np.sqrt(dist)
    z = -dist / float(temperature)
    z = z - z.max(axis=-1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=-1, keepdims=True)
    winners = [class_ids[i] for i in dist.argmin(axis=-1)]
    if single:
        return winners[0], probs[0]
    return winners, probs


def lr_schedule(t: int, warmup: int, total: int, peak: float = 1e-4) -> float:
    """Linear 0 -> peak over [0, warmup], then linear peak -> 0 at total.
    Out-of-range steps clamp to the endpoint values."""
    if not 0 < warmup < total:
        raise ValueError("need 0 < warmup < total")
    if t <= 0:
        return 0.0
    if t <= warmup:
        return peak * t / warmup
    if t >= total:
        return 0.0
    return peak * (total - t) / (total - warmup)


@dataclass
class OptimizerState:
    warmup_steps: int
    total_steps: int
    peak_lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParamStore, state: OptimizerState, lr: float | None = None) -> float:
    """One bias-corrected Adam update; rate comes from the schedule unless
    overridden.  Returns the rate used."""
    state.t += 1
    if lr is None:
        lr = lr_schedule(state.t, state.warmup_steps, state.total_steps, state.peak_lr)
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise tc.ShapeMismatch(
                f"adam_step '{name}': grad {g.shape} vs param {p.data.shape}"
            )
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1 - b1**state.t)
        v_hat = v / (1 - b2**state.t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)
    return lr


# --- episode encoding -----------------------------------------------------------

@dataclass
class EpisodeCodec:
    """Turns token-sequence episodes into padded id batches for the model."""

    merges: MergeTable
    side_vocab: SideVocab | None = None
    lex_config: LexConfig = LexConfig()
    obfuscate_names: bool = False

    def encode_program(self, seq, train: bool, seed: int) -> list[int]:
        if self.obfuscate_names:
            mode = TRAIN_RANDOM if train else TEST_SEQUENTIAL
            seq = obfuscate(seq, mode, seed=seed, config=self.lex_config)
        return bpe_encode(seq, self.merges)

    def side_ids(self, episode: Episode):
        if self.side_vocab is None:
            return [], []
        return (
            self.side_vocab.encode(episode.side_prompt),
            self.side_vocab.encode(episode.side_rubric),
        )

    def batch(self, episode: Episode, cfg: EncoderConfig, *, train: bool, seed: int):
        """(ids, pad_mask, labels, support_count) padded to the batch max."""
        examples = episode.support + episode.query
        limit = cfg.max_len - 1 if cfg.fusion == "task_token" else cfg.max_len
        id_lists = [
            self.encode_program(prog, train, mix_seed(seed, "obf", j))[:limit]
            for j, (prog, _) in enumerate(examples)
        ]
        width = max(len(x) for x in id_lists)
        pad_id = self.merges.vocab["<pad>"]
        ids = np.full((len(id_lists), width), pad_id, dtype=np.int64)
        mask = np.zeros((len(id_lists), width), dtype=bool)
        for row, lst in enumerate(id_lists):
            ids[row, :len(lst)] = lst
            mask[row, :len(lst)] = True
        labels = [cls for _, cls in examples]
        return ids, mask, labels, len(episode.support)


def forward_episode(params: ParamStore, cfg: EncoderConfig, codec: EpisodeCodec,
                    episode: Episode, *, train: bool = False, seed: int = 0,
                    drop_rng=None):
    """Embed one episode; returns (support_emb, support_labels,
    query_emb, query_labels) with embeddings as graph tensors."""
    ids, mask, labels, n_support = codec.batch(episode, cfg, train=train, seed=seed)
    side = None
    if cfg.fusion != "none":
        z, zp = codec.side_ids(episode)
        side = embed_side(params, cfg, z, zp)
    emb = fuse_and_encode(params, cfg, ids, mask, side, train=train, drop_rng=drop_rng)
    support = tc.slice_rows(emb, 0, n_support)
    query = tc.slice_rows(emb, n_support, len(labels))
    return support, labels[:n_support], query, labels[n_support:]


def episode_loss(params: ParamStore, cfg: EncoderConfig, loss_cfg: LossConfig,
                 codec: EpisodeCodec, episode: Episode, *, train: bool = False,
                 seed: int = 0, drop_rng=None) -> Tensor:
    support, s_labels, query, q_labels = forward_episode(
        params, cfg, codec, episode, train=train, seed=seed, drop_rng=drop_rng
    )
    protos, class_ids = compute_prototypes(support, s_labels)
    tau = params["log_tau"] if "log_tau" in params else loss_cfg.temperature
    return proto_loss(protos, class_ids, query, q_labels, tau, loss_cfg.distance)


# --- meta-training loop ------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 50
    k: int = 10
    q: int = 10
    seed: int = 0
    peak_lr: float = 1e-4
    warmup_frac: float = 0.1
    grad_accum: int = 1

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def train_meta(tasks, enc_cfg: EncoderConfig, loss_cfg: LossConfig,
               codec: EpisodeCodec, train_cfg: TrainConfig):
    """Episodic training: per epoch, one episode per task in seeded
    shuffled order, one optimizer step per episode (or per accumulation
    group).  Returns (params, log) where log rows are
    (epoch, task_id, loss, lr)."""
    if not tasks:
        raise ValueError("no tasks to train on")
    import random as _random

    params = init_params(enc_cfg, mix_seed(train_cfg.seed, "init"))
    if loss_cfg.trainable_temperature:
        params.add("log_tau", Tensor(
            np.asarray(np.log(loss_cfg.temperature), dtype=np.float32)
        ))
    episodes_total = train_cfg.epochs * len(tasks)
    accum = max(1, train_cfg.grad_accum)
    total_steps = max(2, (episodes_total + accum - 1) // accum)
    warmup = max(1, min(total_steps - 1, round(train_cfg.warmup_frac * total_steps)))
    state = OptimizerState(warmup, total_steps, train_cfg.peak_lr)

    log = []
    pending = 0
    for epoch in range(train_cfg.epochs):
        order = list(range(len(tasks)))
        _random.Random(mix_seed(train_cfg.seed, "order", epoch)).shuffle(order)
        for ti in order:
            task = tasks[ti]
            try:
                episode = sample_episode(
                    task, train_cfg.k, train_cfg.q,
                    mix_seed(train_cfg.seed, "episode", epoch, ti),
                )
                drop_rng = np.random.default_rng(mix_seed(train_cfg.seed, "drop", epoch, ti))
                loss = episode_loss(
                    params, enc_cfg, loss_cfg, codec, episode,
                    train=True, seed=mix_seed(train_cfg.seed, "enc", epoch, ti),
                    drop_rng=drop_rng,
                )
            except Exception as err:
                # keep the original exception type, attach the task context
                err.args = (f"task {task.task_id}: {err}",)
                raise
            scaled = tc.scale(loss, 1.0 / accum) if accum > 1 else loss
            tc.backward(scaled, params)
            pending += 1
            if pending == accum:
                lr = adam_step(params, state)
                params.zero_grad()
                pending = 0
            else:
                lr = lr_schedule(state.t + 1, warmup, total_steps, train_cfg.peak_lr)
            log.append((epoch, task.task_id, float(loss.data), lr))
    if pending:
        adam_step(params, state)
        params.zero_grad()
    return params, log


def format_log(log) -> str:
    """Append-only delimited text: epoch, task_id, loss, lr."""
    lines = ["epoch\ttask_id\tloss\tlr"]
    for epoch, task_id, loss, lr in log:
        lines.append(f"{epoch}\t{task_id}\t{loss:.6f}\t{lr:.8f}")
    return "\n".join(lines) + "\n"


# --- checkpointing -------------------------------------------------------------------

MANIFEST_NAME = "manifest.json"
BLOB_NAME = "params.bin"


def save_checkpoint(params: ParamStore, enc_cfg: EncoderConfig,
                    loss_cfg: LossConfig, directory, *, seed: int = 0,
                    step: int = 0, extra: dict | None = None) -> None:
    """Manifest (architecture + named tensor index) plus one little-endian
    float32 blob in manifest order."""
    os.makedirs(directory, exist_ok=True)
    tensors = [
        {"name": name, "dtype": "float32", "shape": list(p.shape)}
        for name, p in params.items()
    ]
    manifest = {
        "format": 1,
        "encoder": enc_cfg.to_dict(),
        "loss": loss_cfg.to_dict(),
        "seed": seed,
        "step": step,
        "tensors": tensors,
        "extra": extra or {},
    }
    with open(os.path.join(directory, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(directory, BLOB_NAME), "wb") as fh:
        for _, p in params.items():
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(directory, expected: EncoderConfig | None = None):
    """Returns (params, manifest).  Validates architecture and blob size."""
    with open(os.path.join(directory, MANIFEST_NAME), encoding="utf-8") as fh:
        manifest = json.load(fh)
    if expected is not None and manifest["encoder"] != expected.to_dict():
        theirs = manifest["encoder"]
        ours = expected.to_dict()
        diff = [k for k in ours if theirs.get(k) != ours[k]]
        raise ManifestMismatch(f"checkpoint architecture differs on {diff}")
    blob = open(os.path.join(directory, BLOB_NAME), "rb").read()
    need = sum(
        4 * int(np.prod(t["shape"])) if t["shape"] else 4
        for t in manifest["tensors"]
    )
    if len(blob) != need:
        raise CorruptBlob(f"blob is {len(blob)} bytes, manifest needs {need}")
    params = ParamStore()
    offset = 0
    for t in manifest["tensors"]:
        size = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=offset).copy()
        offset += 4 * size
        params.add(t["name"], Tensor(arr.reshape(t["shape"])))
    return params, manifest
