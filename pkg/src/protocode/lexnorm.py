"""Lexing, normalization, obfuscation, and byte-pair encoding for a small
indentation-scoped language (a Python subset).

The lexer is total over syntactically broken programs except for two
cases that make scope markers meaningless: tabs in leading whitespace and
dedents that do not return to an enclosing indent level.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass
from enum import Enum


class IndentError(Exception):
    """Dedent to a non-enclosing level, or a tab in leading whitespace."""


class SlotExhausted(Exception):
    """More distinct names than the configured slot budget."""


class UnknownSymbol(Exception):
    """A character outside the trained alphabet with byte fallback disabled."""


KEYWORDS = frozenset({
    "def", "return", "if", "elif", "else", "for", "while", "in",
    "and", "or", "not", "pass", "break", "continue",
})

TWO_CHAR_SYMBOLS = ("**", "//", "==", "!=", "<=", ">=", "->", "+=", "-=", "*=", "/=")
ONE_CHAR_SYMBOLS = frozenset("+-*/%<>=()[]{}:,.")

INDENT_WIDTH = 4

_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_NUMBER_RE = re.compile(r"\d+(?:\.\d+)?")
_CAMEL_RE = re.compile(r"(?<=[a-z0-9])([A-Z])")


class TokenKind(Enum):
    KEYWORD = "keyword"
    NAME = "name"
    NUMBER = "number"
    STRING = "string"
    SYMBOL = "symbol"
    NEWLINE = "newline"
    SCOPE_ENTER = "scope_enter"
    SCOPE_EXIT = "scope_exit"
    MASK = "mask"
    VAR_SLOT = "var_slot"
    FUNC_SLOT = "func_slot"
    PAD = "pad"
    TASK = "task"


TEXT_KINDS = frozenset({
    TokenKind.KEYWORD, TokenKind.NAME, TokenKind.NUMBER,
    TokenKind.STRING, TokenKind.SYMBOL,
})

_MARKER_SPELLING = {
    TokenKind.NEWLINE: "<newline>",
    TokenKind.SCOPE_ENTER: "<scope>",
    TokenKind.SCOPE_EXIT: "</scope>",
    TokenKind.MASK: "<mask>",
    TokenKind.PAD: "<pad>",
    TokenKind.TASK: "<task>",
}
_SPELLING_MARKER = {v: k for k, v in _MARKER_SPELLING.items()}
_VAR_SPELL_RE = re.compile(r"<var:(\d+)>$")
_FUNC_SPELL_RE = re.compile(r"<func:(\d+)>$")


@dataclass(frozen=True)
class Token:
    kind: TokenKind
    text: str = ""
    index: int = 0  # slot number for VAR_SLOT / FUNC_SLOT, 1-based

    def surface(self) -> str:
        if self.kind in TEXT_KINDS:
            return self.text
        if self.kind is TokenKind.VAR_SLOT:
            return f"<var:{self.index}>"
        if self.kind is TokenKind.FUNC_SLOT:
            return f"<func:{self.index}>"
        return _MARKER_SPELLING[self.kind]


NEWLINE = Token(TokenKind.NEWLINE)
SCOPE_ENTER = Token(TokenKind.SCOPE_ENTER)
SCOPE_EXIT = Token(TokenKind.SCOPE_EXIT)
MASK = Token(TokenKind.MASK)
PAD = Token(TokenKind.PAD)


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[Token, ...]

    def __len__(self):
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)

    def __getitem__(self, i):
        return self.tokens[i]

    def surfaces(self) -> list[str]:
        return [t.surface() for t in self.tokens]


@dataclass(frozen=True)
class LexConfig:
    max_len: int = 256
    var_slots: int = 100
    func_slots: int = 10
    indent_width: int = INDENT_WIDTH


def camel_to_snake(name: str) -> str:
    """Underscore before each uppercase preceded by a lowercase or digit."""
    return _CAMEL_RE.sub(r"_\1", name).lower()


def _strip_comment(line: str) -> str:
    """Drop '#' to end of line, ignoring '#' inside string literals."""
    quote = ""
    for i, ch in enumerate(line):
        if quote:
            if ch == quote:
                quote = ""
        elif ch in "'\"":
            quote = ch
        elif ch == "#":
            return line[:i]
    return line


def _scan_line(text: str) -> list[Token]:
    tokens = []
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch in " \t":
            i += 1
            continue
        if ch in "'\"":
            end = text.find(ch, i + 1)
            end = n - 1 if end < 0 else end
            tokens.append(Token(TokenKind.STRING, text[i:end + 1]))
            i = end + 1
            continue
        m = _NUMBER_RE.match(text, i)
        if m:
            tokens.append(Token(TokenKind.NUMBER, m.group()))
            i = m.end()
            continue
        m = _NAME_RE.match(text, i)
        if m:
            word = m.group()
            if word in KEYWORDS:
                tokens.append(Token(TokenKind.KEYWORD, word))
            else:
                snake = camel_to_snake(word)
                if snake in KEYWORDS:
                    snake += "_"  # keep Name text disjoint from the keyword table
                tokens.append(Token(TokenKind.NAME, snake))
            i = m.end()
            continue
        two = text[i:i + 2]
        if two in TWO_CHAR_SYMBOLS:
            tokens.append(Token(TokenKind.SYMBOL, two))
            i += 2
            continue
        # single known symbol or any unknown character
        tokens.append(Token(TokenKind.SYMBOL, ch))
        i += 1
    return tokens


def truncate_balanced(tokens: list[Token], max_len: int) -> list[Token]:
    """Tail-truncate to max_len, closing any scopes left open within budget."""
    if len(tokens) <= max_len:
        return tokens
    kept = tokens[:max_len]

    def open_count(seq):
        depth = 0
        for t in seq:
            if t.kind is TokenKind.SCOPE_ENTER:
                depth += 1
            elif t.kind is TokenKind.SCOPE_EXIT:
                depth -= 1
        return depth

    depth = open_count(kept)
    while kept and len(kept) + depth > max_len:
        last = kept.pop()
        if last.kind is TokenKind.SCOPE_ENTER:
            depth -= 1
        elif last.kind is TokenKind.SCOPE_EXIT:
            depth += 1
    return kept + [SCOPE_EXIT] * depth


def lex_normalize(source: str, config: LexConfig = LexConfig()) -> TokenSequence:
    """Tokenize source text into the normalized stream.

    Comments are removed, camelCase names become snake_case, physical
    newlines become newline marks, and indentation changes emit balanced
    scope markers.  Blank lines produce nothing.
    """
    tokens: list[Token] = []
    levels = [0]
    for raw in source.split("\n"):
        body = _strip_comment(raw)
        if not body.strip():
            continue
        stripped = body.lstrip(" ")
        lead = body[: len(body) - len(stripped)]
        if "\t" in stripped[:1] or "\t" in lead:
            raise IndentError("tab in leading whitespace")
        indent = len(lead)
        if indent > levels[-1]:
            levels.append(indent)
            tokens.append(SCOPE_ENTER)
        else:
            while indent < levels[-1]:
                levels.pop()
                tokens.append(SCOPE_EXIT)
            if indent != levels[-1]:
                raise IndentError(f"dedent to non-enclosing indent {indent}")
        tokens.extend(_scan_line(stripped))
        tokens.append(NEWLINE)
    while len(levels) > 1:
        levels.pop()
        tokens.append(SCOPE_EXIT)
    return TokenSequence(tuple(truncate_balanced(tokens, config.max_len)))


def classify_text(word: str) -> Token:
    """Rebuild a token from a rendered surface form (markers included)."""
    if word in _SPELLING_MARKER:
        return Token(_SPELLING_MARKER[word])
    m = _VAR_SPELL_RE.match(word)
    if m:
        return Token(TokenKind.VAR_SLOT, index=int(m.group(1)))
    m = _FUNC_SPELL_RE.match(word)
    if m:
        return Token(TokenKind.FUNC_SLOT, index=int(m.group(1)))
    if word in KEYWORDS:
        return Token(TokenKind.KEYWORD, word)
    if _NUMBER_RE.fullmatch(word):
        return Token(TokenKind.NUMBER, word)
    if word[0] in "'\"":
        return Token(TokenKind.STRING, word)
    if _NAME_RE.fullmatch(word):
        return Token(TokenKind.NAME, word)
    return Token(TokenKind.SYMBOL, word)


def render_tokens(seq: TokenSequence) -> str:
    """Whitespace-separated surface forms; inverse of parse_tokens."""
    return " ".join(seq.surfaces())


def parse_tokens(text: str) -> TokenSequence:
    return TokenSequence(tuple(classify_text(w) for w in text.split()))


def render_source(seq: TokenSequence) -> str:
    """Rebuild source text: scope markers become 4-space indentation."""
    lines = []
    current: list[str] = []
    level = 0
    for tok in seq:
        if tok.kind is TokenKind.NEWLINE:
            lines.append(" " * (INDENT_WIDTH * level) + " ".join(current))
            current = []
        elif tok.kind is TokenKind.SCOPE_ENTER:
            level += 1
        elif tok.kind is TokenKind.SCOPE_EXIT:
            level = max(0, level - 1)
        else:
            current.append(tok.surface())
    if current:
        lines.append(" " * (INDENT_WIDTH * level) + " ".join(current))
    return "\n".join(lines) + ("\n" if lines else "")


# --- obfuscation --------------------------------------------------------------

TRAIN_RANDOM = "train_random"
TEST_SEQUENTIAL = "test_sequential"


def _function_names(seq: TokenSequence) -> set[str]:
    """Names are function names iff they ever directly follow 'def'."""
    funcs = set()
    prev = None
    for tok in seq:
        if (
            tok.kind is TokenKind.NAME
            and prev is not None
            and prev.kind is TokenKind.KEYWORD
            and prev.text == "def"
        ):
            funcs.add(tok.text)
        prev = tok
    return funcs


def obfuscate(seq: TokenSequence, mode: str, seed: int | None = None,
              config: LexConfig = LexConfig()) -> TokenSequence:
    """Replace every distinct name with a slot token, consistently.

    test_sequential assigns slots 1, 2, ... in first-occurrence order;
    train_random draws the assignment without replacement from the full
    slot budget using `seed`.
    """
    if mode not in (TRAIN_RANDOM, TEST_SEQUENTIAL):
        raise ValueError(f"unknown obfuscation mode '{mode}'")
    funcs = _function_names(seq)
    var_order: list[str] = []
    func_order: list[str] = []
    for tok in seq:
        if tok.kind is not TokenKind.NAME:
            continue
        bucket = func_order if tok.text in funcs else var_order
        if tok.text not in bucket:
            bucket.append(tok.text)
    if len(var_order) > config.var_slots:
        raise SlotExhausted(
            f"{len(var_order)} distinct variable names exceed budget {config.var_slots}"
        )
    if len(func_order) > config.func_slots:
        raise SlotExhausted(
            f"{len(func_order)} distinct function names exceed budget {config.func_slots}"
        )

    if mode == TEST_SEQUENTIAL:
        var_slots = list(range(1, len(var_order) + 1))
        func_slots = list(range(1, len(func_order) + 1))
    else:
        rng = random.Random(seed)
        var_slots = rng.sample(range(1, config.var_slots + 1), len(var_order))
        func_slots = rng.sample(range(1, config.func_slots + 1), len(func_order))
    var_map = dict(zip(var_order, var_slots))
    func_map = dict(zip(func_order, func_slots))

    out = []
    for tok in seq:
        if tok.kind is TokenKind.NAME:
            if tok.text in funcs:
                out.append(Token(TokenKind.FUNC_SLOT, index=func_map[tok.text]))
            else:
                out.append(Token(TokenKind.VAR_SLOT, index=var_map[tok.text]))
        else:
            out.append(tok)
    return TokenSequence(tuple(out))


# --- byte-pair encoding --------------------------------------------------------

# Word-boundary marker prefixed to every token text before BPE, so a full
# id stream can be split back into token texts.
BOUNDARY = "▁"

_BYTE_RE = re.compile(r"<0x([0-9A-F]{2})>$")


def _reserved_entries(config: LexConfig) -> list[str]:
    entries = ["<pad>", "<newline>", "<scope>", "</scope>", "<mask>", "<task>"]
    entries += [f"<var:{i}>" for i in range(1, config.var_slots + 1)]
    entries += [f"<func:{i}>" for i in range(1, config.func_slots + 1)]
    return entries


class MergeTable:
    """Ordered BPE merge rules plus the dense 1-based subword vocabulary."""

    def __init__(self, rules, vocab, config: LexConfig = LexConfig()):
        self.rules: tuple[tuple[str, str], ...] = tuple(tuple(r) for r in rules)
        self.vocab: dict[str, int] = dict(vocab)
        self.config = config
        self._inverse = {i: s for s, i in self.vocab.items()}
        self._encode_cache: dict[str, tuple[int, ...]] = {}

    @property
    def size(self) -> int:
        return len(self.vocab)

    def id_of(self, subword: str) -> int:
        return self.vocab[subword]

    def subword_of(self, idx: int) -> str:
        return self._inverse[idx]

    def marker_id(self, tok: Token) -> int:
        return self.vocab[tok.surface()]

    def _apply_rules(self, word: str) -> tuple[str, ...]:
        parts = list(word)
        for left, right in self.rules:
            merged = []
            i = 0
            while i < len(parts):
                if i + 1 < len(parts) and parts[i] == left and parts[i + 1] == right:
                    merged.append(left + right)
                    i += 2
                else:
                    merged.append(parts[i])
                    i += 1
            parts = merged
        return tuple(parts)

    def encode_text(self, text: str) -> tuple[int, ...]:
        """Subword ids for one token text (no boundary marker added)."""
        cached = self._encode_cache.get(text)
        if cached is not None:
            return cached
        ids = []
        for part in self._apply_rules(text):
            idx = self.vocab.get(part)
            if idx is not None:
                ids.append(idx)
                continue
            for ch in part:
                cidx = self.vocab.get(ch)
                if cidx is not None:
                    ids.append(cidx)
                    continue
                fell_back = False
                for byte in ch.encode("utf-8"):
                    bidx = self.vocab.get(f"<0x{byte:02X}>")
                    if bidx is None:
                        raise UnknownSymbol(
                            f"character {ch!r} outside alphabet, no byte fallback"
                        )
                    ids.append(bidx)
                    fell_back = True
                if not fell_back:
                    raise UnknownSymbol(f"character {ch!r} outside alphabet")
        result = tuple(ids)
        self._encode_cache[text] = result
        return result


def bpe_train(corpus, num_merges: int, config: LexConfig = LexConfig(),
              byte_fallback: bool = True) -> MergeTable:
    """Learn merge rules from token texts; boundaries never merge across.

    At each step the most frequent adjacent pair wins; ties break toward
    the lexicographically smallest (left, right).  Pairs containing a
    space are skipped so the persisted table stays line-parseable.
    """
    unit_counts: dict[tuple[str, ...], int] = {}
    for seq in corpus:
        for tok in seq:
            if tok.kind in TEXT_KINDS and tok.text:
                unit = tuple(BOUNDARY + tok.text)
                unit_counts[unit] = unit_counts.get(unit, 0) + 1

    alphabet = sorted({sym for unit in unit_counts for sym in unit})
    rules: list[tuple[str, str]] = []
    for _ in range(num_merges):
        pair_counts: dict[tuple[str, str], int] = {}
        for unit, cnt in unit_counts.items():
            for left, right in zip(unit, unit[1:]):
                if " " in left or " " in right:
                    continue
                key = (left, right)
                pair_counts[key] = pair_counts.get(key, 0) + cnt
        if not pair_counts:
            break
        best_count = max(pair_counts.values())
        best = min(p for p, c in pair_counts.items() if c == best_count)
        rules.append(best)
        merged_counts: dict[tuple[str, ...], int] = {}
        for unit, cnt in unit_counts.items():
            out = []
            i = 0
            while i < len(unit):
                if i + 1 < len(unit) and (unit[i], unit[i + 1]) == best:
                    out.append(unit[i] + unit[i + 1])
                    i += 2
                else:
                    out.append(unit[i])
                    i += 1
            key = tuple(out)
            merged_counts[key] = merged_counts.get(key, 0) + cnt
        unit_counts = merged_counts

    vocab: dict[str, int] = {}
    for entry in _reserved_entries(config):
        vocab[entry] = len(vocab) + 1
    for ch in alphabet:
        if ch not in vocab:
            vocab[ch] = len(vocab) + 1
    if byte_fallback:
        for byte in range(256):
            entry = f"<0x{byte:02X}>"
            if entry not in vocab:
                vocab[entry] = len(vocab) + 1
    for left, right in rules:
        merged = left + right
        if merged not in vocab:
            vocab[merged] = len(vocab) + 1
    return MergeTable(rules, vocab, config)


def bpe_encode(seq: TokenSequence, merges: MergeTable) -> list[int]:
    """Encode a token sequence to vocab ids; markers map to reserved ids."""
    ids: list[int] = []
    for tok in seq:
        if tok.kind in TEXT_KINDS:
            ids.extend(merges.encode_text(BOUNDARY + tok.text))
        else:
            ids.append(merges.marker_id(tok))
    return ids


def bpe_decode(ids, merges: MergeTable) -> TokenSequence:
    """Rebuild the token sequence encoded by bpe_encode."""
    tokens: list[Token] = []
    buffer = ""

    def flush():
        nonlocal buffer
        if buffer:
            for word in buffer.split(BOUNDARY):
                if word:
                    tokens.append(classify_text(word))
            buffer = ""

    byte_acc: list[int] = []
    for idx in ids:
        sub = merges.subword_of(idx)
        m = _BYTE_RE.match(sub)
        if m:
            byte_acc.append(int(m.group(1), 16))
            continue
        if byte_acc:
            buffer += bytes(byte_acc).decode("utf-8", errors="replace")
            byte_acc = []
        if sub in _SPELLING_MARKER or _VAR_SPELL_RE.match(sub) or _FUNC_SPELL_RE.match(sub):
            flush()
            tokens.append(classify_text(sub))
        else:
            buffer += sub
    if byte_acc:
        buffer += bytes(byte_acc).decode("utf-8", errors="replace")
    flush()
    return TokenSequence(tuple(tokens))


def save_merge_table(merges: MergeTable, path) -> None:
    """Persist as merge pairs ('left right', one per line) then the vocab
    block ('subword<TAB>id')."""
    with open(path, "w", encoding="utf-8") as fh:
        for left, right in merges.rules:
            fh.write(f"{left} {right}\n")
        for subword, idx in merges.vocab.items():
            fh.write(f"{subword}\t{idx}\n")


def load_merge_table(path, config: LexConfig = LexConfig()) -> MergeTable:
    rules = []
    vocab = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" in line:
                subword, idx = line.rsplit("\t", 1)
                vocab[subword] = int(idx)
            else:
                left, right = line.split(" ", 1)
                rules.append((left, right))
    return MergeTable(rules, vocab, config)
