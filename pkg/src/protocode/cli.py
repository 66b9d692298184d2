"""Batch interface: flat key=value config with per-module sections, and
subcommands that run the pipeline stage by stage with reproducibility
stamps next to every output."""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import sys

from . import __version__, evalkit, protolearn, taskforge
from .encoder import EncoderConfig, SideVocab
from .lexnorm import (
    IndentError,
    LexConfig,
    SlotExhausted,
    UnknownSymbol,
    bpe_train,
    load_merge_table,
    save_merge_table,
)
from .protolearn import (
    CorruptBlob,
    EpisodeCodec,
    LossConfig,
    ManifestMismatch,
    NonFiniteLoss,
    TrainConfig,
)
from .synth import synth_corpus
from .taskforge import (
    DataFormatError,
    InsufficientExamples,
    NoViableOutcomes,
    NoViableTokens,
    Task,
)


class ConfigError(Exception):
    """Bad, unknown, or inconsistent configuration."""


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_DATA_ERRORS = (
    DataFormatError, InsufficientExamples, NoViableTokens, NoViableOutcomes,
    evalkit.TooFewUnits, evalkit.NoPositives, evalkit.OneClassOnly,
    evalkit.DegenerateCovariance, SlotExhausted, IndentError, UnknownSymbol,
    CorruptBlob, FileNotFoundError,
)

_GENERIC_SIDE_TEXTS = (
    "synthetic cloze task",
    "synthetic smlmt task",
    "synthetic compile task",
    "predict the masked token (cloze)",
    "predict the masked token (smlmt)",
    "predict the static check outcome",
)

# section -> key -> (parser, default)
_SCHEMA = {
    "data": {
        "questions": (int, 12),
        "students": (int, 150),
        "break_rate": (float, 0.2),
    },
    "lex": {
        "max_len": (int, 256),
        "var_slots": (int, 100),
        "func_slots": (int, 10),
    },
    "bpe": {
        "num_merges": (int, 200),
        "byte_fallback": (bool, True),
    },
    "tasks": {
        "k": (int, 10),
        "q": (int, 10),
        "augment_ratio": (float, 0.2),
    },
    "encoder": {
        "dim": (int, 64),
        "layers": (int, 2),
        "heads": (int, 4),
        "ff_dim": (int, 256),
        "dropout": (float, 0.1),
        "fusion": (str, "task_token"),
        "side_dim": (int, 32),
        "adapter_dim": (int, 16),
        "ln_eps": (float, 1e-5),
        "pool_task_token": (bool, False),
        "obfuscate": (bool, False),
    },
    "loss": {
        "temperature": (float, 1.0),
        "trainable_temperature": (bool, False),
        "distance": (str, "squared"),
    },
    "train": {
        "epochs": (int, 50),
        "peak_lr": (float, 1e-4),
        "warmup_frac": (float, 0.1),
        "grad_accum": (int, 1),
        "seed": (int, 0),
    },
    "eval": {
        "split": (str, "held_out_question"),
        "fraction": (float, 0.1),
        "seeds": ("int_list", [0, 1, 2]),
        "degrade_shots": ("int_list", [10, 5, 2, 1]),
        "baseline_steps": (int, 25),
        "baseline_lr": (float, 1e-3),
    },
    "paths": {
        "out_dir": (str, "runs"),
    },
}


def _parse_value(kind, raw, where):
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is bool:
            low = raw.strip().lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind == "int_list":
            return [int(part) for part in raw.split(",") if part.strip()]
        return raw.strip()
    except ValueError as err:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from err


class RunConfig:
    """Validated view of the config file; unknown keys are errors."""

    def __init__(self, values: dict):
        self.values = values

    def __getitem__(self, section):
        return self.values[section]

    @classmethod
    def load(cls, path) -> "RunConfig":
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        parser.optionxform = str  # keys are case-sensitive
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as err:
            raise ConfigError(f"{path}: {err}") from err
        values = {s: dict((k, d) for k, (_, d) in keys.items())
                  for s, keys in _SCHEMA.items()}
        for section in parser.sections():
            if section not in _SCHEMA:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, raw in parser.items(section):
                if key not in _SCHEMA[section]:
                    raise ConfigError(f"{path}: unknown key {section}.{key}")
                kind = _SCHEMA[section][key][0]
                values[section][key] = _parse_value(kind, raw, f"{section}.{key}")
        cfg = cls(values)
        cfg.validate()
        return cfg

    def validate(self):
        v = self.values
        try:
            self.encoder_config(vocab_size=1000, side_vocab_size=1000)
            self.loss_config()
        except ValueError as err:
            raise ConfigError(str(err)) from err
        if v["tasks"]["k"] < 1 or v["tasks"]["q"] < 1:
            raise ConfigError("tasks.k and tasks.q must be >= 1")
        if not 0 <= v["tasks"]["augment_ratio"] <= 1:
            raise ConfigError("tasks.augment_ratio must be in [0, 1]")
        if not 0 < v["train"]["warmup_frac"] < 1:
            raise ConfigError("train.warmup_frac must be in (0, 1)")
        if v["eval"]["split"] not in evalkit.SPLIT_MODES:
            raise ConfigError(f"eval.split must be one of {evalkit.SPLIT_MODES}")
        if not v["eval"]["seeds"]:
            raise ConfigError("eval.seeds must not be empty")
        if any(s < 1 for s in v["eval"]["degrade_shots"]):
            raise ConfigError("eval.degrade_shots must be positive")
        if max(v["eval"]["degrade_shots"], default=0) > v["tasks"]["k"]:
            raise ConfigError("eval.degrade_shots cannot exceed tasks.k")

    def config_hash(self) -> str:
        lines = []
        for section in sorted(self.values):
            for key in sorted(self.values[section]):
                lines.append(f"{section}.{key}={self.values[section][key]}")
        digest = hashlib.sha256("\n".join(lines).encode()).hexdigest()
        return digest[:16]

    # derived configs -------------------------------------------------------

    def lex_config(self) -> LexConfig:
        lex = self.values["lex"]
        return LexConfig(max_len=lex["max_len"], var_slots=lex["var_slots"],
                         func_slots=lex["func_slots"])

    def encoder_config(self, vocab_size: int, side_vocab_size: int) -> EncoderConfig:
        e = self.values["encoder"]
        return EncoderConfig(
            vocab_size=vocab_size,
            side_vocab_size=side_vocab_size,
            max_len=self.values["lex"]["max_len"],
            dim=e["dim"],
            layers=e["layers"],
            heads=e["heads"],
            ff_dim=e["ff_dim"],
            dropout=e["dropout"],
            fusion=e["fusion"],
            side_dim=e["side_dim"],
            adapter_dim=e["adapter_dim"],
            ln_eps=e["ln_eps"],
            pool_task_token=e["pool_task_token"],
        )

    def loss_config(self) -> LossConfig:
        lo = self.values["loss"]
        return LossConfig(temperature=lo["temperature"],
                          trainable_temperature=lo["trainable_temperature"],
                          distance=lo["distance"])

    def train_config(self, seed: int) -> TrainConfig:
        t = self.values["train"]
        return TrainConfig(
            epochs=t["epochs"], k=self.values["tasks"]["k"],
            q=self.values["tasks"]["q"], seed=seed, peak_lr=t["peak_lr"],
            warmup_frac=t["warmup_frac"], grad_accum=t["grad_accum"],
        )


# --- workspace layout -----------------------------------------------------------------

class Workspace:
    def __init__(self, cfg: RunConfig, out_override=None, seed_override=None):
        self.cfg = cfg
        out = out_override or os.environ.get("PROTOCODE_OUT") or cfg["paths"]["out_dir"]
        self.out = out
        self.seed = seed_override if seed_override is not None else cfg["train"]["seed"]
        self.hash = cfg.config_hash()

    def path(self, *parts) -> str:
        full = os.path.join(self.out, *parts)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        return full

    def dir(self, *parts) -> str:
        full = os.path.join(self.out, *parts)
        os.makedirs(full, exist_ok=True)
        return full

    def stamp(self, stage: str, outputs) -> None:
        payload = {
            "stage": stage,
            "config_hash": self.hash,
            "seed": self.seed,
            "version": __version__,
            "outputs": sorted(outputs),
        }
        with open(self.path(f"{stage}.stamp"), "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
            fh.write("\n")

    # shared loading steps -------------------------------------------------

    def load_dataset(self):
        return taskforge.load_records(self.path("data", "synth.recs"),
                                      self.cfg.lex_config())

    def load_codec(self) -> EpisodeCodec:
        merges = load_merge_table(self.path("data", "merges.txt"),
                                  self.cfg.lex_config())
        side = SideVocab.load(self.path("data", "side_vocab.txt"))
        return EpisodeCodec(merges, side, self.cfg.lex_config(),
                            obfuscate_names=self.cfg["encoder"]["obfuscate"])

    def encoder_config(self, codec: EpisodeCodec) -> EncoderConfig:
        return self.cfg.encoder_config(codec.merges.size, len(codec.side_vocab))

    def load_tasks(self, name: str):
        return load_task_file(self.path("tasks", name))

    def load_split(self) -> evalkit.SplitPlan:
        return evalkit.SplitPlan.load(self.path("tasks", "split.json"))


# --- task file persistence ---------------------------------------------------------------

def save_task_file(tasks, path) -> None:
    from .lexnorm import render_tokens

    with open(path, "w", encoding="utf-8") as fh:
        for task in tasks:
            row = {
                "task_id": task.task_id,
                "origin": task.origin,
                "class_names": list(task.class_names),
                "side_prompt": task.side_prompt,
                "side_rubric": task.side_rubric,
                "pools": {
                    str(cls): [render_tokens(seq) for seq in pool]
                    for cls, pool in task.pools.items()
                },
            }
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def load_task_file(path):
    from .lexnorm import parse_tokens

    tasks = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            tasks.append(Task(
                task_id=row["task_id"],
                origin=row["origin"],
                class_names=tuple(row["class_names"]),
                pools={
                    int(cls): [parse_tokens(s) for s in pool]
                    for cls, pool in row["pools"].items()
                },
                side_prompt=row["side_prompt"],
                side_rubric=row["side_rubric"],
            ))
    return tasks


# --- subcommands ----------------------------------------------------------------------------

def cmd_synth_data(ws: Workspace) -> int:
    d = ws.cfg["data"]
    dataset = synth_corpus(ws.seed, d["questions"], d["students"],
                           ws.cfg.lex_config(), break_rate=d["break_rate"])
    out = ws.path("data", "synth.recs")
    taskforge.save_records(dataset, out)
    ws.stamp("synth-data", [out])
    print(f"wrote {len(dataset.records)} records to {out}")
    return EXIT_OK


def cmd_tokenize(ws: Workspace) -> int:
    dataset = ws.load_dataset()
    merges = bpe_train(dataset.programs(), ws.cfg["bpe"]["num_merges"],
                       ws.cfg.lex_config(), byte_fallback=ws.cfg["bpe"]["byte_fallback"])
    merges_path = ws.path("data", "merges.txt")
    save_merge_table(merges, merges_path)
    texts = []
    for rec in dataset.records:
        texts.append(rec.prompt_text)
        texts.append(rec.rubric_option_text)
    texts.extend(_GENERIC_SIDE_TEXTS)
    side = SideVocab.build(texts)
    side_path = ws.path("data", "side_vocab.txt")
    side.save(side_path)
    ws.stamp("tokenize", [merges_path, side_path])
    print(f"trained {len(merges.rules)} merges, vocab size {merges.size}, "
          f"side vocab {len(side)}")
    return EXIT_OK


def cmd_make_tasks(ws: Workspace) -> int:
    dataset = ws.load_dataset()
    k, q = ws.cfg["tasks"]["k"], ws.cfg["tasks"]["q"]
    tasks, report = taskforge.build_tasks_from_rubric(dataset, k, q)
    if not tasks:
        raise DataFormatError("no rubric option survived the K+Q filters")
    plan = evalkit.make_split(dataset, ws.cfg["eval"]["split"],
                              ws.cfg["eval"]["fraction"], ws.seed)
    tasks_path = ws.path("tasks", "rubric.task")
    save_task_file(tasks, tasks_path)
    plan_path = ws.path("tasks", "split.json")
    plan.save(plan_path)
    report_path = ws.path("tasks", "build_report.txt")
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(f"config {ws.hash}\n")
        fh.write(f"kept\t{report.kept}\n")
        fh.write(f"too_few_positives\t{report.too_few_positives}\n")
        fh.write(f"too_few_negatives\t{report.too_few_negatives}\n")
        fh.write(f"all_perfect\t{report.all_perfect}\n")
    ws.stamp("make-tasks", [tasks_path, plan_path, report_path])
    train_n = len([t for t in tasks if t.task_id in set(plan.train_ids)])
    test_n = len([t for t in tasks if t.task_id in set(plan.test_ids)])
    print(f"kept {report.kept} tasks (dropped {report.dropped()}); "
          f"meta-train {train_n}, meta-test {test_n}")
    return EXIT_OK


def cmd_augment(ws: Workspace) -> int:
    dataset = ws.load_dataset()
    tasks = ws.load_tasks("rubric.task")
    plan = ws.load_split()
    train_tasks, _ = evalkit.split_tasks(tasks, plan)
    ratio = ws.cfg["tasks"]["augment_ratio"]
    k, q = ws.cfg["tasks"]["k"], ws.cfg["tasks"]["q"]
    augmented = taskforge.mix_augmented(train_tasks, dataset.programs(), ratio,
                                        ws.seed, k=k, q=q)
    out = ws.path("tasks", "augmented.task")
    save_task_file(augmented, out)
    ws.stamp("augment", [out])
    print(f"meta-train {len(train_tasks)} -> {len(augmented)} tasks "
          f"(+{len(augmented) - len(train_tasks)} synthetic)")
    return EXIT_OK


def _train_tasks(ws: Workspace):
    augmented = os.path.join(ws.out, "tasks", "augmented.task")
    if os.path.exists(augmented):
        return load_task_file(augmented), "augmented.task"
    tasks = ws.load_tasks("rubric.task")
    plan = ws.load_split()
    train_tasks, _ = evalkit.split_tasks(tasks, plan)
    return train_tasks, "rubric.task"


def cmd_train(ws: Workspace) -> int:
    codec = ws.load_codec()
    enc_cfg = ws.encoder_config(codec)
    loss_cfg = ws.cfg.loss_config()
    tasks, source = _train_tasks(ws)
    if not tasks:
        raise DataFormatError("meta-train side has no tasks")
    params, log = protolearn.train_meta(tasks, enc_cfg, loss_cfg, codec,
                                        ws.cfg.train_config(ws.seed))
    ckpt_dir = ws.dir("ckpt")
    protolearn.save_checkpoint(
        params, enc_cfg, loss_cfg, ckpt_dir, seed=ws.seed, step=len(log),
        extra={"config_hash": ws.hash, "task_source": source},
    )
    log_path = ws.path("reports", "train_log.tsv")
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write(f"# config {ws.hash}\n")
        fh.write(protolearn.format_log(log))
    ws.stamp("train", [ckpt_dir, log_path])
    print(f"trained on {len(tasks)} tasks from {source}; "
          f"{len(log)} episodes; final loss {log[-1][2]:.4f}")
    return EXIT_OK


def _load_checkpoint_guarded(ws: Workspace, codec: EpisodeCodec):
    enc_cfg = ws.encoder_config(codec)
    params, manifest = protolearn.load_checkpoint(
        os.path.join(ws.out, "ckpt"), expected=enc_cfg
    )
    stored = manifest.get("extra", {}).get("config_hash")
    if stored != ws.hash:
        raise ConfigError(
            f"checkpoint was trained under config {stored}, current is {ws.hash}"
        )
    return params, enc_cfg


def cmd_eval(ws: Workspace) -> int:
    codec = ws.load_codec()
    params, enc_cfg = _load_checkpoint_guarded(ws, codec)
    tasks = ws.load_tasks("rubric.task")
    plan = ws.load_split()
    _, test_tasks = evalkit.split_tasks(tasks, plan)
    if not test_tasks:
        raise DataFormatError("meta-test side has no tasks")
    report = evalkit.eval_meta_test(
        params, enc_cfg, ws.cfg.loss_config(), codec, test_tasks,
        ws.cfg["tasks"]["k"], ws.cfg["tasks"]["q"], ws.cfg["eval"]["seeds"],
    )
    text_path = ws.path("reports", "eval.txt")
    with open(text_path, "w", encoding="utf-8") as fh:
        fh.write(f"# config {ws.hash}\n")
        fh.write(report.to_text())
    tsv_path = ws.path("reports", "eval.tsv")
    with open(tsv_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_tsv())
    ws.stamp("eval", [text_path, tsv_path])
    agg = report.aggregate()
    print("  ".join(f"{m}={agg[m][0]:.4f}+/-{agg[m][1]:.4f}" for m in evalkit.METRIC_NAMES))
    return EXIT_OK


def cmd_baseline(ws: Workspace) -> int:
    codec = ws.load_codec()
    enc_cfg = ws.encoder_config(codec)
    tasks = ws.load_tasks("rubric.task")
    plan = ws.load_split()
    _, test_tasks = evalkit.split_tasks(tasks, plan)
    if not test_tasks:
        raise DataFormatError("meta-test side has no tasks")
    report = evalkit.baseline_aggregate(
        test_tasks, ws.cfg["tasks"]["k"], ws.cfg["tasks"]["q"], enc_cfg,
        ws.cfg.loss_config(), codec, ws.cfg["eval"]["baseline_steps"],
        ws.cfg["eval"]["seeds"], lr=ws.cfg["eval"]["baseline_lr"],
    )
    path = ws.path("reports", "baseline.txt")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# config {ws.hash}\n")
        fh.write(report.to_text())
    ws.stamp("baseline", [path])
    agg = report.aggregate()
    print("  ".join(f"{m}={agg[m][0]:.4f}+/-{agg[m][1]:.4f}" for m in evalkit.METRIC_NAMES))
    return EXIT_OK


def cmd_degrade_study(ws: Workspace) -> int:
    codec = ws.load_codec()
    params, enc_cfg = _load_checkpoint_guarded(ws, codec)
    tasks = ws.load_tasks("rubric.task")
    plan = ws.load_split()
    _, test_tasks = evalkit.split_tasks(tasks, plan)
    if not test_tasks:
        raise DataFormatError("meta-test side has no tasks")
    shots_list = ws.cfg["eval"]["degrade_shots"]
    rows = ["shots\t" + "\t".join(
        f"{m}_{s}" for m in evalkit.METRIC_NAMES for s in ("mean", "std")
    )]
    printed = []
    for shots in shots_list:
        report = evalkit.eval_meta_test(
            params, enc_cfg, ws.cfg.loss_config(), codec, test_tasks,
            ws.cfg["tasks"]["k"], ws.cfg["tasks"]["q"], ws.cfg["eval"]["seeds"],
            support_shots=shots,
        )
        agg = report.aggregate()
        rows.append("\t".join(
            [str(shots)] + [f"{agg[m][i]:.6f}" for m in evalkit.METRIC_NAMES for i in (0, 1)]
        ))
        printed.append(f"{shots}-shot ap={agg['ap'][0]:.4f}")
    path = ws.path("reports", "degrade.tsv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# config {ws.hash}\n")
        fh.write("\n".join(rows) + "\n")
    ws.stamp("degrade-study", [path])
    print("  ".join(printed))
    return EXIT_OK


def cmd_embed_export(ws: Workspace) -> int:
    codec = ws.load_codec()
    params, enc_cfg = _load_checkpoint_guarded(ws, codec)
    dataset = ws.load_dataset()
    path = ws.path("reports", "embeddings.tsv")
    result = evalkit.export_embeddings(params, enc_cfg, codec, dataset, path)
    ws.stamp("embed-export", [path])
    print(f"exported {result.coords.shape[0]} embeddings; "
          f"explained variance {result.explained[0]:.4f}, {result.explained[1]:.4f}")
    return EXIT_OK


_COMMANDS = {
    "synth-data": cmd_synth_data,
    "tokenize": cmd_tokenize,
    "make-tasks": cmd_make_tasks,
    "augment": cmd_augment,
    "train": cmd_train,
    "eval": cmd_eval,
    "baseline": cmd_baseline,
    "degrade-study": cmd_degrade_study,
    "embed-export": cmd_embed_export,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protocode",
        description="Few-shot classification of toy-language programs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to the run config")
        p.add_argument("--seed", type=int, default=None, help="override the run seed")
        p.add_argument("--out", default=None, help="override the output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config)
        ws = Workspace(cfg, out_override=args.out, seed_override=args.seed)
        return _COMMANDS[args.command](ws)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except ManifestMismatch as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except _DATA_ERRORS as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteLoss as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
