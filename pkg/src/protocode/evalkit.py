"""Ranking metrics, held-out split protocols, meta-test evaluation, the
per-task supervised baseline, and 2-D embedding export."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import protolearn as pl
from . import tensorcore as tc
from .encoder import EncoderConfig, embed_side, fuse_and_encode, init_params
from .protolearn import EpisodeCodec, LossConfig, OptimizerState, adam_step
from .taskforge import Episode, RubricDataset, mix_seed, rubric_task_id, sample_episode
from .tensorcore import ParamStore, Tensor


class NoPositives(Exception):
    """Ranking metric asked for without any positive labels."""


class OneClassOnly(Exception):
    """ROC-AUC needs at least one positive and one negative."""


class TooFewUnits(Exception):
    """Not enough split units to hold one out and keep one."""


class DegenerateCovariance(Exception):
    """All-zero variance; no principal directions exist."""


# --- ranking metrics ---------------------------------------------------------------

def _ranked(scores, labels):
    scores = [float(s) for s in scores]
    labels = [int(y) for y in labels]
    if len(scores) != len(labels):
        raise ValueError("scores and labels differ in length")
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return [labels[i] for i in order]


def average_precision(scores, labels) -> float:
    """Step-wise AP over the score-descending ranking; ties keep input order."""
    ranked = _ranked(scores, labels)
    total = sum(ranked)
    if total == 0:
        raise NoPositives("average_precision needs at least one positive")
    hits = 0
    acc = 0.0
    for k, y in enumerate(ranked, start=1):
        if y:
            hits += 1
            acc += hits / k
    return acc / total


def precision_at_recall(scores, labels, recall: float) -> float:
    """Maximum precision over ranking prefixes reaching the recall target."""
    if not 0 < recall <= 1:
        raise ValueError("recall target must be in (0, 1]")
    ranked = _ranked(scores, labels)
    total = sum(ranked)
    if total == 0:
        raise NoPositives("precision_at_recall needs at least one positive")
    best = 0.0
    hits = 0
    for k, y in enumerate(ranked, start=1):
        hits += y
        if hits / total >= recall:
            best = max(best, hits / k)
    return best


def roc_auc(scores, labels) -> float:
    """Mann-Whitney form: P(pos > neg) + half the tie mass."""
    scores = np.asarray([float(s) for s in scores])
    labels = np.asarray([int(y) for y in labels])
    pos = int(labels.sum())
    neg = len(labels) - pos
    if pos == 0 or neg == 0:
        raise OneClassOnly("roc_auc needs both classes present")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0  # average rank, 1-based
        i = j + 1
    rank_sum = ranks[labels == 1].sum()
    return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg)


METRIC_NAMES = ("ap", "p50", "p75", "auc")


def ranking_metrics(scores, labels) -> dict:
    return {
        "ap": average_precision(scores, labels),
        "p50": precision_at_recall(scores, labels, 0.50),
        "p75": precision_at_recall(scores, labels, 0.75),
        "auc": roc_auc(scores, labels),
    }


# --- split protocols -----------------------------------------------------------------

SPLIT_MODES = ("held_out_rubric", "held_out_question", "held_out_exam")

_UNIT_KEY = {
    "held_out_rubric": lambda rec: rec.rubric_item_id,
    "held_out_question": lambda rec: rec.question_id,
    "held_out_exam": lambda rec: rec.exam_id,
}


@dataclass
class SplitPlan:
    mode: str
    fraction: float
    seed: int
    train_ids: list[str]
    test_ids: list[str]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(
                {
                    "mode": self.mode,
                    "fraction": self.fraction,
                    "seed": self.seed,
                    "train_ids": self.train_ids,
                    "test_ids": self.test_ids,
                },
                fh,
                indent=1,
            )
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "SplitPlan":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls(raw["mode"], raw["fraction"], raw["seed"],
                   raw["train_ids"], raw["test_ids"])


def make_split(data: RubricDataset, mode: str, fraction: float, seed: int) -> SplitPlan:
    """Hold out whole units (rubric items, questions, or exams) uniformly;
    every option of a held-out unit lands on the meta-test side."""
    if mode not in SPLIT_MODES:
        raise ValueError(f"mode must be one of {SPLIT_MODES}")
    key = _UNIT_KEY[mode]
    units = []
    option_unit = {}
    for rec in data.records:
        u = key(rec)
        if u not in units:
            units.append(u)
        option_unit[rec.rubric_option_id] = u
    if len(units) < 2:
        raise TooFewUnits(f"{mode} needs at least two units, have {len(units)}")
    n_test = max(1, int(len(units) * fraction + 0.5))
    if n_test >= len(units):
        raise TooFewUnits(
            f"holding out {n_test} of {len(units)} units leaves no meta-train side"
        )
    import random as _random

    held = set(_random.Random(seed).sample(sorted(units), n_test))
    train_ids, test_ids = [], []
    for option_id, unit in option_unit.items():
        (test_ids if unit in held else train_ids).append(rubric_task_id(option_id))
    return SplitPlan(mode, fraction, seed, sorted(train_ids), sorted(test_ids))


def assert_no_leak(plan: SplitPlan, data: RubricDataset) -> None:
    """Every option of one rubric item must sit on one side of the split."""
    test = set(plan.test_ids)
    by_item = {}
    for rec in data.records:
        by_item.setdefault(rec.rubric_item_id, set()).add(
            rubric_task_id(rec.rubric_option_id) in test
        )
    leaky = [item for item, sides in by_item.items() if len(sides) > 1]
    if leaky:
        raise AssertionError(f"rubric items split across sides: {leaky}")


def split_tasks(tasks, plan: SplitPlan):
    train = [t for t in tasks if t.task_id in set(plan.train_ids)]
    test = [t for t in tasks if t.task_id in set(plan.test_ids)]
    return train, test


# --- meta-test evaluation ----------------------------------------------------------------

POSITIVE_CLASS = 1


@dataclass
class EvalReport:
    seeds: list[int]
    support_shots: int
    per_task: dict            # task_id -> {metric: (mean, std)}
    per_seed_aggregate: dict  # metric -> [value per seed]
    task_count: int = 0

    def aggregate(self) -> dict:
        out = {}
        for metric, values in self.per_seed_aggregate.items():
            arr = np.asarray(values)
            std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
            out[metric] = (float(arr.mean()), std)
        return out

    def to_text(self) -> str:
        lines = [
            f"meta-test tasks: {self.task_count}",
            f"eval seeds: {','.join(str(s) for s in self.seeds)}",
            f"support shots: {self.support_shots}",
            "",
            "task\t" + "\t".join(f"{m}_mean\t{m}_std" for m in METRIC_NAMES),
        ]
        for task_id in sorted(self.per_task):
            row = [task_id]
            for m in METRIC_NAMES:
                mean, std = self.per_task[task_id][m]
                row += [f"{mean:.6f}", f"{std:.6f}"]
            lines.append("\t".join(row))
        lines.append("")
        agg = self.aggregate()
        for m in METRIC_NAMES:
            mean, std = agg[m]
            lines.append(f"aggregate {m}: {mean:.6f} +/- {std:.6f}")
        return "\n".join(lines) + "\n"

    def to_tsv(self) -> str:
        header = ["task"] + [f"{m}_{s}" for m in METRIC_NAMES for s in ("mean", "std")]
        rows = ["\t".join(header)]
        for task_id in sorted(self.per_task):
            row = [task_id]
            for m in METRIC_NAMES:
                mean, std = self.per_task[task_id][m]
                row += [f"{mean:.6f}", f"{std:.6f}"]
            rows.append("\t".join(row))
        agg = self.aggregate()
        rows.append("\t".join(
            ["AGGREGATE"] + [f"{agg[m][i]:.6f}" for m in METRIC_NAMES for i in (0, 1)]
        ))
        return "\n".join(rows) + "\n"


def _truncate_support(episode: Episode, shots: int) -> Episode:
    """Keep the first `shots` support examples of each class (nested subsets)."""
    by_class = {}
    kept = []
    for prog, cls in episode.support:
        count = by_class.get(cls, 0)
        if count < shots:
            kept.append((prog, cls))
            by_class[cls] = count + 1
    return Episode(episode.task_id, kept, episode.query,
                   episode.side_prompt, episode.side_rubric)


def score_episode(params: ParamStore, cfg: EncoderConfig, loss_cfg: LossConfig,
                  codec: EpisodeCodec, episode: Episode):
    """(positive-class scores, binary labels) for an episode's queries."""
    support, s_labels, query, q_labels = pl.forward_episode(
        params, cfg, codec, episode
    )
    protos, class_ids = pl.compute_prototypes(support, s_labels)
    _, probs = pl.predict(protos.data, class_ids, query.data,
                          loss_cfg.temperature, loss_cfg.distance)
    col = class_ids.index(POSITIVE_CLASS)
    scores = [float(p[col]) for p in probs]
    labels = [int(y == POSITIVE_CLASS) for y in q_labels]
    return scores, labels


def eval_meta_test(params: ParamStore, cfg: EncoderConfig, loss_cfg: LossConfig,
                   codec: EpisodeCodec, tasks, k: int, q: int, seeds,
                   support_shots: int | None = None) -> EvalReport:
    """Evaluate every task over the given seeds.

    Per task and seed: fresh support/query episode, queries scored by
    positive-class probability, the four ranking metrics computed.
    support_shots < k keeps a nested subset of the sampled support.
    """
    seeds = list(seeds)
    shots = support_shots if support_shots is not None else k
    per_task_values = {t.task_id: {m: [] for m in METRIC_NAMES} for t in tasks}
    per_seed_agg = {m: [] for m in METRIC_NAMES}
    for seed in seeds:
        seed_values = {m: [] for m in METRIC_NAMES}
        for task in tasks:
            episode = sample_episode(task, k, q, mix_seed(seed, "eval", task.task_id))
            if shots < k:
                episode = _truncate_support(episode, shots)
            scores, labels = score_episode(params, cfg, loss_cfg, codec, episode)
            metrics = ranking_metrics(scores, labels)
            for m, value in metrics.items():
                per_task_values[task.task_id][m].append(value)
                seed_values[m].append(value)
        for m in METRIC_NAMES:
            per_seed_agg[m].append(float(np.mean(seed_values[m])))
    per_task = {}
    for task_id, by_metric in per_task_values.items():
        per_task[task_id] = {}
        for m, values in by_metric.items():
            arr = np.asarray(values)
            std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
            per_task[task_id][m] = (float(arr.mean()), std)
    return EvalReport(seeds, shots, per_task, per_seed_agg, task_count=len(tasks))


# --- supervised per-task baseline -----------------------------------------------------------

def supervised_baseline(task, k: int, q: int, cfg: EncoderConfig,
                        loss_cfg: LossConfig, codec: EpisodeCodec,
                        steps: int = 25, seed: int = 0, lr: float = 1e-3) -> dict:
    """Fresh encoder + two-way softmax head fit on the K-per-class support
    only, then scored on the Q queries.  The step budget is the early
    stopping rule."""
    params = init_params(cfg, mix_seed(seed, "baseline-init", task.task_id))
    rng = np.random.default_rng(mix_seed(seed, "baseline-head", task.task_id))
    params.add("head_w", Tensor(rng.normal(0, 0.02, (cfg.dim, 2)).astype(np.float32)))
    params.add("head_b", Tensor(np.zeros(2, dtype=np.float32)))

    episode = sample_episode(task, k, q, mix_seed(seed, "baseline-episode", task.task_id))
    support_episode = Episode(episode.task_id, episode.support, [],
                              episode.side_prompt, episode.side_rubric)

    def head_logits(p, ep, train, step):
        ids, mask, labels, n_support = codec.batch(ep, cfg, train=train,
                                                   seed=mix_seed(seed, "b", step))
        side = None
        if cfg.fusion != "none":
            z, zp = codec.side_ids(ep)
            side = embed_side(p, cfg, z, zp)
        drop_rng = np.random.default_rng(mix_seed(seed, "bdrop", step)) if train else None
        emb = fuse_and_encode(p, cfg, ids, mask, side, train=train, drop_rng=drop_rng)
        return tc.add(tc.matmul(emb, p["head_w"]), p["head_b"]), labels

    state = OptimizerState(warmup_steps=1, total_steps=max(2, steps), peak_lr=lr)
    for step in range(steps):
        logits, labels = head_logits(params, support_episode, True, step)
        onehot = np.zeros(logits.shape, dtype=logits.dtype)
        for row, y in enumerate(labels):
            onehot[row, int(y == POSITIVE_CLASS)] = 1.0
        logp = tc.log_softmax(logits, axis=-1)
        loss = tc.scale(tc.mean_all(tc.sum_axis(tc.mul(logp, tc.const(onehot)), 1)), -1.0)
        params.zero_grad()
        tc.backward(loss, params)
        adam_step(params, state, lr=lr)
    params.zero_grad()

    support_logits, support_labels = head_logits(params, support_episode, False, -1)
    train_pred = support_logits.data.argmax(axis=-1)
    train_truth = np.array([int(y == POSITIVE_CLASS) for y in support_labels])
    query_episode = Episode(episode.task_id, episode.query, [],
                            episode.side_prompt, episode.side_rubric)
    logits, labels = head_logits(params, query_episode, False, -2)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=-1, keepdims=True)
    scores = [float(p[1]) for p in probs]
    binary = [int(y == POSITIVE_CLASS) for y in labels]
    out = ranking_metrics(scores, binary)
    out["train_accuracy"] = float((train_pred == train_truth).mean())
    return out


def baseline_aggregate(tasks, k, q, cfg, loss_cfg, codec, steps, seeds, lr=1e-3):
    """Mean metrics per seed and overall, mirroring eval_meta_test shape."""
    per_seed = {m: [] for m in METRIC_NAMES}
    per_task = {t.task_id: {m: [] for m in METRIC_NAMES} for t in tasks}
    for seed in seeds:
        values = {m: [] for m in METRIC_NAMES}
        for task in tasks:
            metrics = supervised_baseline(task, k, q, cfg, loss_cfg, codec,
                                          steps=steps, seed=seed, lr=lr)
            for m in METRIC_NAMES:
                values[m].append(metrics[m])
                per_task[task.task_id][m].append(metrics[m])
        for m in METRIC_NAMES:
            per_seed[m].append(float(np.mean(values[m])))
    per_task_stats = {
        tid: {
            m: (
                float(np.mean(vals)),
                float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0,
            )
            for m, vals in by_metric.items()
        }
        for tid, by_metric in per_task.items()
    }
    return EvalReport(list(seeds), k, per_task_stats, per_seed, task_count=len(tasks))


# --- embedding export and 2-D projection ------------------------------------------------------

@dataclass
class PcaResult:
    coords: np.ndarray
    explained: np.ndarray
    second_degenerate: bool = False


def _power_iterate(cov, start, tol, max_iter):
    v = start / np.linalg.norm(start)
    for _ in range(max_iter):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm < 1e-30:
            break
        w = w / norm
        if np.linalg.norm(w - v) < tol or np.linalg.norm(w + v) < tol:
            v = w
            break
        v = w
    value = float(v @ cov @ v)
    return v, value


def pca_2d(vectors, tol: float = 1e-8, max_iter: int = 1000) -> PcaResult:
    """Top-2 principal directions via power iteration with deflation.

    Rank-1 data flags the second component instead of failing.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise ValueError("pca_2d needs at least 2 vectors of dimension >= 2")
    x = x - x.mean(axis=0)
    cov = x.T @ x / (x.shape[0] - 1)
    total = float(np.trace(cov))
    if total <= 0.0:
        raise DegenerateCovariance("all vectors identical: zero variance")
    rng = np.random.default_rng(0)
    v1, lam1 = _power_iterate(cov, rng.normal(size=x.shape[1]), tol, max_iter)
    deflated = cov - lam1 * np.outer(v1, v1)
    second_degenerate = False
    if float(np.trace(deflated)) <= max(tol * total, 1e-12):
        second_degenerate = True
        basis = np.eye(x.shape[1])
        pick = int(np.argmin(np.abs(v1)))
        v2 = basis[pick] - (basis[pick] @ v1) * v1
        v2 /= np.linalg.norm(v2)
        lam2 = 0.0
    else:
        start = rng.normal(size=x.shape[1])
        start -= (start @ v1) * v1
        v2, lam2 = _power_iterate(deflated, start, tol, max_iter)
        v2 = v2 - (v2 @ v1) * v1
        v2 /= np.linalg.norm(v2)
        lam2 = float(v2 @ cov @ v2)
    # deterministic sign: largest-magnitude entry positive
    for v in (v1, v2):
        if v[int(np.argmax(np.abs(v)))] < 0:
            v *= -1.0
    coords = np.stack([x @ v1, x @ v2], axis=1)
    return PcaResult(coords, np.array([lam1, lam2]), second_degenerate)


def export_embeddings(params: ParamStore, cfg: EncoderConfig, codec: EpisodeCodec,
                      dataset: RubricDataset, path, batch_size: int = 64):
    """Embed every unique program and write 2-D coordinates as
    'id<TAB>x<TAB>y' rows.  Returns the PcaResult."""
    programs = dataset.programs()
    prompts = {}
    for rec in dataset.records:
        prompts.setdefault(rec.source, rec.prompt_text)
    sources = []
    seen = set()
    for rec in dataset.records:
        if rec.source not in seen:
            seen.add(rec.source)
            sources.append(rec.source)

    rows = []
    for start in range(0, len(programs), batch_size):
        chunk = programs[start:start + batch_size]
        id_lists = [codec.encode_program(p, False, 0) for p in chunk]
        limit = cfg.max_len - 1 if cfg.fusion == "task_token" else cfg.max_len
        id_lists = [ids[:limit] for ids in id_lists]
        width = max(len(x) for x in id_lists)
        pad_id = codec.merges.vocab["<pad>"]
        ids = np.full((len(chunk), width), pad_id, dtype=np.int64)
        mask = np.zeros((len(chunk), width), dtype=bool)
        for row, lst in enumerate(id_lists):
            ids[row, :len(lst)] = lst
            mask[row, :len(lst)] = True
        side = None
        if cfg.fusion != "none":
            # batch items may come from different questions; use the first
            # program's prompt as shared context for the export
            z = codec.side_vocab.encode(prompts[sources[start]])
            side = embed_side(params, cfg, z, [])
        emb = fuse_and_encode(params, cfg, ids, mask, side)
        rows.append(emb.data)
    matrix = np.concatenate(rows, axis=0)
    result = pca_2d(matrix)
    with open(path, "w", encoding="utf-8") as fh:
        for i, (xy) in enumerate(result.coords):
            fh.write(f"p{i:06d}\t{xy[0]:.6f}\t{xy[1]:.6f}\n")
    return result
