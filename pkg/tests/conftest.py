from dataclasses import dataclass

import pytest

from protocode.encoder import EncoderConfig, SideVocab
from protocode.lexnorm import LexConfig, MergeTable, bpe_train
from protocode.protolearn import EpisodeCodec, LossConfig
from protocode.synth import synth_corpus
from protocode.taskforge import RubricDataset, Task, build_tasks_from_rubric


GENERIC_SIDE_TEXTS = (
    "synthetic cloze task",
    "synthetic smlmt task",
    "synthetic compile task",
    "predict the masked token (cloze)",
    "predict the masked token (smlmt)",
    "predict the static check outcome",
)


def build_side_vocab(dataset: RubricDataset) -> SideVocab:
    texts = []
    for rec in dataset.records:
        texts.append(rec.prompt_text)
        texts.append(rec.rubric_option_text)
    texts.extend(GENERIC_SIDE_TEXTS)
    return SideVocab.build(texts)


@dataclass
class TinyWorld:
    dataset: RubricDataset
    tasks: list
    corpus: list
    merges: MergeTable
    side_vocab: SideVocab
    k: int
    q: int

    def codec(self, obfuscate=False):
        return EpisodeCodec(self.merges, self.side_vocab, LexConfig(),
                            obfuscate_names=obfuscate)

    def encoder_config(self, **kw):
        base = dict(
            vocab_size=self.merges.size,
            side_vocab_size=len(self.side_vocab),
            max_len=96,
            dim=16,
            layers=1,
            heads=2,
            ff_dim=32,
            dropout=0.0,
            fusion="none",
            side_dim=8,
            adapter_dim=4,
        )
        base.update(kw)
        return EncoderConfig(**base)

    def loss_config(self, **kw):
        return LossConfig(**kw)


@pytest.fixture(scope="session")
def tiny_world():
    ds = synth_corpus(seed=100, num_questions=4, students_per_question=40,
                      break_rate=0.25)
    k = q = 3
    tasks, _ = build_tasks_from_rubric(ds, k, q)
    corpus = ds.programs()
    merges = bpe_train(corpus, num_merges=80)
    return TinyWorld(ds, tasks, corpus, merges, build_side_vocab(ds), k, q)
