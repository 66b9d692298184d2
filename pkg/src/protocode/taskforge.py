"""Task curation: rubric datasets, few-shot tasks, episode sampling,
synthetic task generation (cloze / name-masking / static-check outcome),
and a seeded toy corpus generator used for end-to-end testing."""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass

from .lexnorm import (
    MASK,
    LexConfig,
    Token,
    TokenKind,
    TokenSequence,
    lex_normalize,
)


class InsufficientExamples(Exception):
    """A class pool is smaller than the K+Q examples an episode needs."""


class NoViableTokens(Exception):
    """Fewer than two mask candidates meet the frequency bar."""


class NoViableOutcomes(Exception):
    """Fewer than two static-check outcome classes meet the frequency bar."""


class DataFormatError(Exception):
    """A record file violates the dataset invariants."""


def mix_seed(*parts) -> int:
    """Stable 63-bit seed derived from arbitrary hashable parts."""
    digest = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


# --- rubric dataset -------------------------------------------------------------

RECORD_FIELDS = (
    "exam_id", "question_id", "prompt_text", "rubric_item_id", "rubric_item_text",
    "rubric_option_id", "rubric_option_text", "program", "label",
)


@dataclass(frozen=True)
class RubricRecord:
    exam_id: str
    question_id: str
    prompt_text: str
    rubric_item_id: str
    rubric_item_text: str
    rubric_option_id: str
    rubric_option_text: str
    source: str
    program: TokenSequence
    label: int


@dataclass
class RubricDataset:
    records: list[RubricRecord]

    def validate(self) -> None:
        seen = set()
        option_home: dict[str, tuple[str, str]] = {}
        for rec in self.records:
            key = (rec.question_id, rec.rubric_option_id, rec.source)
            if key in seen:
                raise DataFormatError(
                    f"duplicate (question, option, program) triple: "
                    f"{rec.question_id}/{rec.rubric_option_id}"
                )
            seen.add(key)
            home = (rec.rubric_item_id, rec.question_id)
            if option_home.setdefault(rec.rubric_option_id, home) != home:
                raise DataFormatError(
                    f"rubric option {rec.rubric_option_id} spans multiple items/questions"
                )

    def question_ids(self):
        out = []
        for rec in self.records:
            if rec.question_id not in out:
                out.append(rec.question_id)
        return out

    def programs(self) -> list[TokenSequence]:
        """Unique programs in first-appearance order."""
        seen = set()
        out = []
        for rec in self.records:
            if rec.source not in seen:
                seen.add(rec.source)
                out.append(rec.program)
        return out


def save_records(dataset: RubricDataset, path) -> None:
    """One JSON object per line, fixed field order; programs as raw source."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in dataset.records:
            row = {
                "exam_id": rec.exam_id,
                "question_id": rec.question_id,
                "prompt_text": rec.prompt_text,
                "rubric_item_id": rec.rubric_item_id,
                "rubric_item_text": rec.rubric_item_text,
                "rubric_option_id": rec.rubric_option_id,
                "rubric_option_text": rec.rubric_option_text,
                "program": rec.source,
                "label": rec.label,
            }
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def load_records(path, lex_config: LexConfig = LexConfig()) -> RubricDataset:
    records = []
    cache: dict[str, TokenSequence] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as err:
                raise DataFormatError(f"{path}:{lineno}: bad record: {err}") from err
            missing = [f for f in RECORD_FIELDS if f not in row]
            if missing:
                raise DataFormatError(f"{path}:{lineno}: missing fields {missing}")
            src = row["program"]
            if src not in cache:
                cache[src] = lex_normalize(src, lex_config)
            records.append(RubricRecord(
                exam_id=row["exam_id"],
                question_id=row["question_id"],
                prompt_text=row["prompt_text"],
                rubric_item_id=row["rubric_item_id"],
                rubric_item_text=row["rubric_item_text"],
                rubric_option_id=row["rubric_option_id"],
                rubric_option_text=row["rubric_option_text"],
                source=src,
                program=cache[src],
                label=int(row["label"]),
            ))
    dataset = RubricDataset(records)
    dataset.validate()
    return dataset


# --- tasks and episodes ----------------------------------------------------------

ORIGIN_RUBRIC = "rubric_option"
ORIGIN_CLOZE = "cloze"
ORIGIN_SMLMT = "smlmt"
ORIGIN_COMPILE = "compile"


@dataclass
class Task:
    task_id: str
    origin: str
    class_names: tuple[str, ...]
    pools: dict[int, list[TokenSequence]]
    side_prompt: str = ""
    side_rubric: str = ""

    @property
    def class_count(self) -> int:
        return len(self.pools)


@dataclass
class Episode:
    task_id: str
    support: list[tuple[TokenSequence, int]]
    query: list[tuple[TokenSequence, int]]
    side_prompt: str = ""
    side_rubric: str = ""


@dataclass
class BuildReport:
    kept: int = 0
    too_few_positives: int = 0
    too_few_negatives: int = 0
    all_perfect: int = 0

    def dropped(self) -> int:
        return self.too_few_positives + self.too_few_negatives + self.all_perfect


def rubric_task_id(option_id: str) -> str:
    return f"opt:{option_id}"


def build_tasks_from_rubric(data: RubricDataset, k: int, q: int):
    """One binary task per surviving rubric option.

    Positives are programs labeled 1 for the option; negatives are the
    same question's programs labeled 0.  Options with too few of either,
    or where nobody exhibits the option at all, are dropped and counted.
    """
    if k < 1 or q < 1:
        raise ValueError("k and q must be >= 1")
    bar = k + q
    by_option: dict[str, list[RubricRecord]] = {}
    for rec in data.records:
        by_option.setdefault(rec.rubric_option_id, []).append(rec)

    tasks = []
    report = BuildReport()
    for option_id, recs in by_option.items():
        positives = [r.program for r in recs if r.label == 1]
        negatives = [r.program for r in recs if r.label == 0]
        if not positives:
            report.all_perfect += 1
            continue
        if len(positives) < bar:
            report.too_few_positives += 1
            continue
        if len(negatives) < bar:
            report.too_few_negatives += 1
            continue
        first = recs[0]
        tasks.append(Task(
            task_id=rubric_task_id(option_id),
            origin=ORIGIN_RUBRIC,
            class_names=("absent", "present"),
            pools={0: negatives, 1: positives},
            side_prompt=first.prompt_text,
            side_rubric=first.rubric_option_text,
        ))
        report.kept += 1
    return tasks, report


def sample_episode(task: Task, k: int, q: int, seed: int) -> Episode:
    """Uniformly draw K support and Q query examples per class, disjoint."""
    rng = random.Random(seed)
    support = []
    query = []
    for cls in sorted(task.pools):
        pool = task.pools[cls]
        if len(pool) < k + q:
            raise InsufficientExamples(
                f"task {task.task_id} class {cls}: pool {len(pool)} < K+Q={k + q}"
            )
        chosen = rng.sample(range(len(pool)), k + q)
        support.extend((pool[i], cls) for i in chosen[:k])
        query.extend((pool[i], cls) for i in chosen[k:])
    return Episode(task.task_id, support, query, task.side_prompt, task.side_rubric)


# --- synthetic mask tasks ---------------------------------------------------------

_CLOZE_KINDS = frozenset({TokenKind.KEYWORD, TokenKind.SYMBOL})
_SMLMT_KINDS = _CLOZE_KINDS | {TokenKind.NAME}


def _mask_token(seq: TokenSequence, target: Token) -> TokenSequence:
    return TokenSequence(tuple(MASK if t == target else t for t in seq))


def _make_mask_task(corpus, k, q, seed, kinds, origin, label) -> Task:
    bar = k + q
    containing: dict[Token, list[int]] = {}
    for idx, seq in enumerate(corpus):
        for tok in set(t for t in seq if t.kind in kinds):
            containing.setdefault(tok, []).append(idx)
    candidates = sorted(
        (tok for tok, progs in containing.items() if len(progs) >= bar),
        key=lambda t: (t.kind.value, t.text),
    )
    if len(candidates) < 2:
        raise NoViableTokens(
            f"{len(candidates)} candidate tokens meet the K+Q={bar} bar"
        )
    rng = random.Random(seed)
    for _ in range(50):
        first, second = rng.sample(candidates, 2)
        set_a, set_b = set(containing[first]), set(containing[second])
        pool_a = [i for i in containing[first] if i not in set_b]
        pool_b = [i for i in containing[second] if i not in set_a]
        # programs holding both tokens are dealt to whichever class is short
        for i in containing[first]:
            if i not in set_b:
                continue
            if len(pool_a) < bar:
                pool_a.append(i)
            elif len(pool_b) < bar:
                pool_b.append(i)
            else:
                pool_a.append(i)
        if len(pool_a) >= bar and len(pool_b) >= bar:
            return Task(
                task_id=f"{origin}:{label}",
                origin=origin,
                class_names=(first.surface(), second.surface()),
                pools={
                    0: [_mask_token(corpus[i], first) for i in pool_a],
                    1: [_mask_token(corpus[i], second) for i in pool_b],
                },
                side_prompt=f"synthetic {origin} task",
                side_rubric=f"predict the masked token ({origin})",
            )
    raise NoViableTokens("no candidate pair yields two viable pools")


def make_cloze_task(corpus, k: int, q: int, seed: int, label: str = "0") -> Task:
    """Binary masked-token task over keywords and symbols only."""
    return _make_mask_task(corpus, k, q, seed, _CLOZE_KINDS, ORIGIN_CLOZE, label)


def make_smlmt_task(corpus, k: int, q: int, seed: int, label: str = "0") -> Task:
    """Masked-token task whose candidates also include plain names."""
    return _make_mask_task(corpus, k, q, seed, _SMLMT_KINDS, ORIGIN_SMLMT, label)


# --- static-check outcomes ---------------------------------------------------------

OUTCOME_CLASSES = (
    "ok", "syntax-paren", "syntax-colon", "syntax-expr", "indentation", "name-arity",
)

_HEADER_KEYWORDS = frozenset({"def", "if", "elif", "else", "for", "while"})
_OPEN = {"(": ")", "[": "]", "{": "}"}
_CLOSE = frozenset(")]}")
_BINARY_SYMBOLS = frozenset({
    "+", "-", "*", "/", "//", "%", "**", "==", "!=", "<", ">", "<=", ">=",
})
_BINARY_KEYWORDS = frozenset({"and", "or", "in"})
_ASSIGN_OPS = frozenset({"=", "+=", "-=", "*=", "/="})
_OPERAND_KINDS = frozenset({
    TokenKind.NAME, TokenKind.VAR_SLOT, TokenKind.FUNC_SLOT,
    TokenKind.NUMBER, TokenKind.STRING, TokenKind.MASK,
})


def _split_lines(seq: TokenSequence):
    """(indent_level, tokens) per logical line, from the scope markers."""
    lines = []
    current: list[Token] = []
    depth = 0
    line_depth = 0
    started = False
    for tok in seq:
        if tok.kind is TokenKind.NEWLINE:
            lines.append((line_depth if started else depth, current))
            current = []
            started = False
        elif tok.kind is TokenKind.SCOPE_ENTER:
            depth += 1
        elif tok.kind is TokenKind.SCOPE_EXIT:
            depth -= 1
        elif tok.kind is not TokenKind.PAD:
            if not started:
                line_depth = depth
                started = True
            current.append(tok)
    if current:
        lines.append((line_depth, current))
    return lines


def _is_operand(tok: Token) -> bool:
    return tok.kind in _OPERAND_KINDS


def _expr_ok(tokens: list[Token]) -> bool:
    """Operand/operator automaton with bracket frames; True if well-formed."""
    if not tokens:
        return False
    want_operand = True
    want_attr = False
    frames: list[str] = []  # "(", "[", "{", "call", "index"
    for tok in tokens:
        if want_attr:
            if tok.kind is TokenKind.NAME:
                want_attr = False
                continue
            return False
        if tok.kind is TokenKind.SYMBOL:
            s = tok.text
            if s in _OPEN:
                if want_operand:
                    frames.append(s)  # grouping, list display, or dict display
                elif s == "(":
                    frames.append("call")
                elif s == "[":
                    frames.append("index")
                else:
                    return False
                want_operand = True
                continue
            if s in _CLOSE:
                if not frames:
                    return False
                top = frames.pop()
                opener = {"call": "(", "index": "["}.get(top, top)
                if _OPEN[opener] != s:
                    return False
                # closing with no operand: fine for f(), [] and {} displays
                if want_operand and top not in ("call", "[", "{"):
                    return False
                want_operand = False
                continue
            if s == ",":
                if want_operand or not frames:
                    return False
                want_operand = True
                continue
            if s == ":":
                if want_operand or not frames or frames[-1] != "{":
                    return False
                want_operand = True
                continue
            if s == ".":
                if want_operand:
                    return False
                want_attr = True
                continue
            if s in ("-", "+") and want_operand:
                continue  # unary sign
            if s in _BINARY_SYMBOLS:
                if want_operand:
                    return False
                want_operand = True
                continue
            return False
        if tok.kind is TokenKind.KEYWORD:
            if tok.text == "not" and want_operand:
                continue
            if tok.text in _BINARY_KEYWORDS:
                if want_operand:
                    return False
                want_operand = True
                continue
            return False
        if _is_operand(tok):
            if not want_operand:
                return False
            want_operand = False
            continue
        return False
    return not want_operand and not frames and not want_attr


def _lvalue_prefix(tokens: list[Token]) -> int:
    """Length of a leading assignable target, or 0 if none."""
    if not tokens or tokens[0].kind not in (TokenKind.NAME, TokenKind.VAR_SLOT):
        return 0
    i = 1
    while i < len(tokens):
        tok = tokens[i]
        if tok.kind is TokenKind.SYMBOL and tok.text == "[":
            depth = 1
            j = i + 1
            while j < len(tokens) and depth:
                if tokens[j].kind is TokenKind.SYMBOL:
                    depth += tokens[j].text == "["
                    depth -= tokens[j].text == "]"
                j += 1
            if depth or not _expr_ok(tokens[i + 1:j - 1]):
                return 0
            i = j
        elif tok.kind is TokenKind.SYMBOL and tok.text == "." and i + 1 < len(tokens) \
                and tokens[i + 1].kind is TokenKind.NAME:
            i += 2
        else:
            break
    return i


def _def_signature_ok(tokens: list[Token]) -> bool:
    # expected: def NAME ( [params] ) :  with distinct plain-name params
    if len(tokens) < 5:
        return False
    if tokens[1].kind not in (TokenKind.NAME, TokenKind.FUNC_SLOT):
        return False
    if tokens[2].surface() != "(" or tokens[-2].surface() != ")":
        return False
    if tokens[-1].surface() != ":":
        return False
    params = tokens[3:-2]
    if not params:
        return True
    names = []
    expect_name = True
    for tok in params:
        if expect_name:
            if tok.kind not in (TokenKind.NAME, TokenKind.VAR_SLOT):
                return False
            names.append(tok.surface())
            expect_name = False
        else:
            if tok.surface() != ",":
                return False
            expect_name = True
    if expect_name:  # trailing comma
        return False
    return len(names) == len(set(names))


def _statement_ok(tokens: list[Token]) -> bool:
    head = tokens[0]
    if head.kind is TokenKind.KEYWORD and head.text in ("pass", "break", "continue"):
        return len(tokens) == 1
    if head.kind is TokenKind.KEYWORD and head.text == "return":
        return len(tokens) == 1 or _expr_ok(tokens[1:])
    n = _lvalue_prefix(tokens)
    if n and n < len(tokens) and tokens[n].kind is TokenKind.SYMBOL \
            and tokens[n].text in _ASSIGN_OPS:
        return _expr_ok(tokens[n + 1:])
    return _expr_ok(tokens)


def check_syntax(seq: TokenSequence) -> str:
    """Classify a token sequence into one static-check outcome class.

    Checks run in a fixed order so programs with several defects map to
    one deterministic class: per-line bracket balance, scope balance,
    colon placement, block structure, def signature, then per-line
    expression shape.
    """
    lines = _split_lines(seq)

    # 1. per-line bracket balance
    for _, toks in lines:
        stack = []
        for tok in toks:
            if tok.kind is TokenKind.SYMBOL and tok.text in _OPEN:
                stack.append(tok.text)
            elif tok.kind is TokenKind.SYMBOL and tok.text in _CLOSE:
                if not stack or _OPEN[stack.pop()] != tok.text:
                    return "syntax-paren"
        if stack:
            return "syntax-paren"

    # 2. raw scope-marker balance
    depth = 0
    for tok in seq:
        depth += tok.kind is TokenKind.SCOPE_ENTER
        depth -= tok.kind is TokenKind.SCOPE_EXIT
        if depth < 0:
            return "indentation"
    if depth != 0:
        return "indentation"

    # 3. colon placement
    def is_header(toks):
        return toks and toks[0].kind is TokenKind.KEYWORD \
            and toks[0].text in _HEADER_KEYWORDS

    for _, toks in lines:
        bracket = 0
        colons = []
        for pos, tok in enumerate(toks):
            if tok.kind is TokenKind.SYMBOL:
                if tok.text in _OPEN:
                    bracket += 1
                elif tok.text in _CLOSE:
                    bracket -= 1
                elif tok.text == ":" and bracket == 0:
                    colons.append(pos)
        if is_header(toks):
            if colons != [len(toks) - 1]:
                return "syntax-colon"
        elif colons:
            return "syntax-colon"

    # 4. block structure
    for i, (level, toks) in enumerate(lines):
        nxt = lines[i + 1] if i + 1 < len(lines) else None
        if is_header(toks):
            if nxt is None or nxt[0] != level + 1:
                return "indentation"
        elif nxt is not None and nxt[0] > level:
            return "indentation"
    if lines and lines[0][0] != 0:
        return "indentation"

    # 5. def signature arity
    for _, toks in lines:
        if toks and toks[0].kind is TokenKind.KEYWORD and toks[0].text == "def":
            if not _def_signature_ok(toks):
                return "name-arity"

    # 6. per-line expression shape
    for _, toks in lines:
        if not toks:
            continue
        head = toks[0]
        if head.kind is TokenKind.KEYWORD and head.text == "def":
            continue  # covered above
        if head.kind is TokenKind.KEYWORD and head.text in ("if", "elif", "while"):
            if not _expr_ok(toks[1:-1]):
                return "syntax-expr"
            continue
        if head.kind is TokenKind.KEYWORD and head.text == "else":
            if len(toks) != 2:
                return "syntax-expr"
            continue
        if head.kind is TokenKind.KEYWORD and head.text == "for":
            # for NAME in <expr> :
            if len(toks) < 5 or toks[1].kind not in (TokenKind.NAME, TokenKind.VAR_SLOT) \
                    or toks[2].kind is not TokenKind.KEYWORD or toks[2].text != "in" \
                    or not _expr_ok(toks[3:-1]):
                return "syntax-expr"
            continue
        if not _statement_ok(toks):
            return "syntax-expr"

    return "ok"


def make_compile_task(corpus, k: int, q: int, seed: int, label: str = "0") -> Task:
    """Binary task whose classes are two static-check outcome classes."""
    bar = k + q
    by_outcome: dict[str, list[TokenSequence]] = {c: [] for c in OUTCOME_CLASSES}
    for seq in corpus:
        by_outcome[check_syntax(seq)].append(seq)
    viable = [c for c in OUTCOME_CLASSES if len(by_outcome[c]) >= bar]
    if len(viable) < 2:
        raise NoViableOutcomes(
            f"{len(viable)} outcome classes meet the K+Q={bar} bar"
        )
    rng = random.Random(seed)
    first, second = rng.sample(viable, 2)
    return Task(
        task_id=f"{ORIGIN_COMPILE}:{label}",
        origin=ORIGIN_COMPILE,
        class_names=(first, second),
        pools={0: list(by_outcome[first]), 1: list(by_outcome[second])},
        side_prompt="synthetic compile task",
        side_rubric="predict the static check outcome",
    )


def mix_augmented(tasks, corpus, ratio: float, seed: int, k: int = 10, q: int = 10):
    """Append round(ratio * len(tasks)) synthetic tasks, split evenly
    between cloze and compile; an odd remainder goes to cloze."""
    if not 0 <= ratio <= 1:
        raise ValueError("ratio must be in [0, 1]")
    n_add = int(len(tasks) * ratio + 0.5)
    n_cloze = (n_add + 1) // 2
    out = list(tasks)
    for i in range(n_add):
        task_seed = mix_seed(seed, "augment", i)
        if i < n_cloze:
            out.append(make_cloze_task(corpus, k, q, task_seed, label=str(i)))
        else:
            out.append(make_compile_task(corpus, k, q, task_seed, label=str(i)))
    return out
