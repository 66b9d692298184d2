"""Independent brute-force oracles used to pin expected values in tests.

Everything here is deliberately naive (quadratic counting, explicit
enumeration, dense eigendecompositions) and shares no code with the
package under test.
"""

from __future__ import annotations

import re

import numpy as np


# --- reference scanner -------------------------------------------------------
# A small regex scanner for the toy language, used only to derive expected
# token traces for the lexer tests.

_WORD = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_NUM = re.compile(r"\d+(?:\.\d+)?")
_KEYWORDS = {
    "def", "return", "if", "elif", "else", "for", "while", "in",
    "and", "or", "not", "pass", "break", "continue",
}
_OPS = ["**", "//", "==", "!=", "<=", ">=", "->", "+=", "-=", "*=", "/="]


def ref_snake(name: str) -> str:
    return re.sub(r"(?<=[a-z0-9])([A-Z])", r"_\1", name).lower()


def ref_scan(source: str):
    """Tokenize into (kind, text) pairs; kinds mirror the production lexer."""
    out = []
    levels = [0]
    for raw in source.split("\n"):
        # strip comments outside strings
        line = []
        quote = ""
        for ch in raw:
            if quote:
                line.append(ch)
                if ch == quote:
                    quote = ""
            elif ch in "'\"":
                quote = ch
                line.append(ch)
            elif ch == "#":
                break
            else:
                line.append(ch)
        body = "".join(line)
        if not body.strip():
            continue
        indent = len(body) - len(body.lstrip(" "))
        if indent > levels[-1]:
            levels.append(indent)
            out.append(("scope_enter", ""))
        while indent < levels[-1]:
            levels.pop()
            out.append(("scope_exit", ""))
        i = 0
        text = body.strip()
        while i < len(text):
            ch = text[i]
            if ch == " ":
                i += 1
                continue
            if ch in "'\"":
                j = text.find(ch, i + 1)
                j = len(text) - 1 if j < 0 else j
                out.append(("string", text[i:j + 1]))
                i = j + 1
                continue
            m = _NUM.match(text, i)
            if m:
                out.append(("number", m.group()))
                i = m.end()
                continue
            m = _WORD.match(text, i)
            if m:
                w = m.group()
                if w in _KEYWORDS:
                    out.append(("keyword", w))
                else:
                    s = ref_snake(w)
                    out.append(("name", s + "_" if s in _KEYWORDS else s))
                i = m.end()
                continue
            two = text[i:i + 2]
            if two in _OPS:
                out.append(("symbol", two))
                i += 2
            else:
                out.append(("symbol", ch))
                i += 1
        out.append(("newline", ""))
    while len(levels) > 1:
        levels.pop()
        out.append(("scope_exit", ""))
    return out


# --- BPE pair counting -------------------------------------------------------

def ref_pair_counts(units):
    """units: list of tuples of symbols. Returns {(l, r): count}."""
    counts = {}
    for unit in units:
        for left, right in zip(unit, unit[1:]):
            counts[(left, right)] = counts.get((left, right), 0) + 1
    return counts


def ref_best_pair(units):
    counts = ref_pair_counts(units)
    if not counts:
        return None
    best = max(counts.values())
    return min(p for p, c in counts.items() if c == best)


def ref_merge_once(unit, pair):
    out = []
    i = 0
    while i < len(unit):
        if i + 1 < len(unit) and (unit[i], unit[i + 1]) == pair:
            out.append(unit[i] + unit[i + 1])
            i += 2
        else:
            out.append(unit[i])
            i += 1
    return tuple(out)


def ref_bpe_train(texts, num_merges):
    """Merge sequence over raw texts (no word-boundary marker)."""
    units = [tuple(t) for t in texts]
    rules = []
    for _ in range(num_merges):
        pair = ref_best_pair(units)
        if pair is None:
            break
        rules.append(pair)
        units = [ref_merge_once(u, pair) for u in units]
    return rules


# --- ranking metrics ---------------------------------------------------------

def ref_rank_order(scores):
    """Indices in score-descending order, ties kept in input order."""
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))


def ref_average_precision(scores, labels):
    order = ref_rank_order(scores)
    total_pos = sum(labels)
    hits = 0
    acc = 0.0
    for k, i in enumerate(order, start=1):
        if labels[i] == 1:
            hits += 1
            acc += hits / k
    return acc / total_pos


def ref_precision_at_recall(scores, labels, r):
    order = ref_rank_order(scores)
    total_pos = sum(labels)
    best = 0.0
    hits = 0
    for k, i in enumerate(order, start=1):
        hits += labels[i]
        if hits / total_pos >= r:
            best = max(best, hits / k)
    return best


def ref_roc_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


# --- static-check outcome oracle ----------------------------------------------
# Independent classifier over source text, written as recursive descent
# rather than the production automaton.  Must agree with it exactly on
# generated program suites.

_HEADERS = {"def", "if", "elif", "else", "for", "while"}
_BIN_SYM = {"+", "-", "*", "/", "//", "%", "**", "==", "!=", "<", ">", "<=", ">="}
_BIN_KW = {"and", "or", "in"}
_ASSIGN = {"=", "+=", "-=", "*=", "/="}
_PAIR = {"(": ")", "[": "]", "{": "}"}


def _ref_lines(source):
    """(level, [(kind, text), ...]) per logical line, via ref_scan."""
    lines = []
    level = 0
    current = []
    cur_level = 0
    fresh = True
    for kind, text in ref_scan(source):
        if kind == "scope_enter":
            level += 1
        elif kind == "scope_exit":
            level -= 1
        elif kind == "newline":
            lines.append((cur_level if not fresh else level, current))
            current = []
            fresh = True
        else:
            if fresh:
                cur_level = level
                fresh = False
            current.append((kind, text))
    return lines


class _RefExpr:
    """Recursive-descent validity check for one expression token list."""

    def __init__(self, toks):
        self.toks = toks
        self.pos = 0

    def peek(self):
        return self.toks[self.pos] if self.pos < len(self.toks) else (None, None)

    def take(self):
        tok = self.peek()
        self.pos += 1
        return tok

    def at_symbol(self, *texts):
        kind, text = self.peek()
        return kind == "symbol" and text in texts

    def brace_items(self):
        # the automaton treats ':' and ',' alike inside braces; mirror that
        self.expr()
        while self.at_symbol(",", ":"):
            self.take()
            if self.at_symbol("}"):
                return
            self.expr()

    def parse(self):
        try:
            self.expr()
        except ValueError:
            return False
        return self.pos == len(self.toks)

    def expr(self):
        self.operand_chain()
        while True:
            kind, text = self.peek()
            if kind == "symbol" and text in _BIN_SYM:
                self.take()
                self.operand_chain()
            elif kind == "keyword" and text in _BIN_KW:
                self.take()
                self.operand_chain()
            else:
                return

    def operand_chain(self):
        # unary prefixes
        while True:
            kind, text = self.peek()
            if (kind == "symbol" and text in ("-", "+")) or (
                kind == "keyword" and text == "not"
            ):
                self.take()
            else:
                break
        self.primary()
        # postfix: call, index, attribute
        while True:
            if self.at_symbol("("):
                self.take()
                if not self.at_symbol(")"):
                    self.list_items(")")
                if not self.at_symbol(")"):
                    raise ValueError
                self.take()
            elif self.at_symbol("["):
                self.take()
                self.expr()
                if not self.at_symbol("]"):
                    raise ValueError
                self.take()
            elif self.at_symbol("."):
                self.take()
                kind, _ = self.take()
                if kind != "name":
                    raise ValueError
            else:
                return

    def list_items(self, closer):
        # one or more exprs, comma separated, optional trailing comma
        self.expr()
        while self.at_symbol(","):
            self.take()
            if self.at_symbol(closer):
                return
            self.expr()

    def primary(self):
        kind, text = self.take()
        if kind in ("name", "number", "string"):
            return
        if kind == "symbol" and text == "(":
            # grouping: one or more comma separated exprs, no trailing comma
            self.expr()
            while self.at_symbol(","):
                self.take()
                self.expr()
            if not self.at_symbol(")"):
                raise ValueError
            self.take()
            return
        if kind == "symbol" and text == "[":
            if not self.at_symbol("]"):
                self.list_items("]")
            if not self.at_symbol("]"):
                raise ValueError
            self.take()
            return
        if kind == "symbol" and text == "{":
            if not self.at_symbol("}"):
                self.brace_items()
            if not self.at_symbol("}"):
                raise ValueError
            self.take()
            return
        raise ValueError


def _ref_expr_ok(toks):
    return bool(toks) and _RefExpr(toks).parse()


def _ref_lvalue_len(toks):
    if not toks or toks[0][0] != "name":
        return 0
    i = 1
    while i < len(toks):
        kind, text = toks[i]
        if kind == "symbol" and text == "[":
            depth = 1
            j = i + 1
            while j < len(toks) and depth:
                if toks[j][0] == "symbol":
                    depth += toks[j][1] == "["
                    depth -= toks[j][1] == "]"
                j += 1
            if depth or not _ref_expr_ok(toks[i + 1:j - 1]):
                return 0
            i = j
        elif kind == "symbol" and text == "." and i + 1 < len(toks) and toks[i + 1][0] == "name":
            i += 2
        else:
            break
    return i


def ref_outcome(source):
    """Mirror of the production outcome classifier, over raw source."""
    lines = _ref_lines(source)

    # 1. per-line bracket balance
    for _, toks in lines:
        stack = []
        for kind, text in toks:
            if kind == "symbol" and text in _PAIR:
                stack.append(text)
            elif kind == "symbol" and text in _PAIR.values():
                if not stack or _PAIR[stack.pop()] != text:
                    return "syntax-paren"
        if stack:
            return "syntax-paren"

    # 2. scope balance cannot misfire on scanner output, skip

    # 3. colon placement
    for _, toks in lines:
        depth = 0
        cols = []
        for pos, (kind, text) in enumerate(toks):
            if kind == "symbol":
                if text in _PAIR:
                    depth += 1
                elif text in _PAIR.values():
                    depth -= 1
                elif text == ":" and depth == 0:
                    cols.append(pos)
        if toks and toks[0][0] == "keyword" and toks[0][1] in _HEADERS:
            if cols != [len(toks) - 1]:
                return "syntax-colon"
        elif cols:
            return "syntax-colon"

    # 4. block structure
    def is_hdr(toks):
        return bool(toks) and toks[0][0] == "keyword" and toks[0][1] in _HEADERS

    for i, (level, toks) in enumerate(lines):
        nxt_level = lines[i + 1][0] if i + 1 < len(lines) else None
        if is_hdr(toks):
            if nxt_level != level + 1:
                return "indentation"
        elif nxt_level is not None and nxt_level > level:
            return "indentation"
    if lines and lines[0][0] != 0:
        return "indentation"

    # 5. def signature
    for _, toks in lines:
        if toks and toks[0] == ("keyword", "def"):
            body = toks[1:]
            ok = (
                len(body) >= 4
                and body[0][0] == "name"
                and body[1] == ("symbol", "(")
                and body[-2] == ("symbol", ")")
                and body[-1] == ("symbol", ":")
            )
            if ok:
                params = body[2:-2]
                names = []
                expect = True
                for kind, text in params:
                    if expect:
                        if kind != "name":
                            ok = False
                            break
                        names.append(text)
                        expect = False
                    else:
                        if (kind, text) != ("symbol", ","):
                            ok = False
                            break
                        expect = True
                if ok and params and expect:
                    ok = False
                if ok and len(names) != len(set(names)):
                    ok = False
            if not ok:
                return "name-arity"

    # 6. per-line statement shape
    for _, toks in lines:
        if not toks:
            continue
        kind, text = toks[0]
        if kind == "keyword" and text == "def":
            continue
        if kind == "keyword" and text in ("if", "elif", "while"):
            if not _ref_expr_ok(toks[1:-1]):
                return "syntax-expr"
            continue
        if kind == "keyword" and text == "else":
            if len(toks) != 2:
                return "syntax-expr"
            continue
        if kind == "keyword" and text == "for":
            if (
                len(toks) < 5
                or toks[1][0] != "name"
                or toks[2] != ("keyword", "in")
                or not _ref_expr_ok(toks[3:-1])
            ):
                return "syntax-expr"
            continue
        if kind == "keyword" and text in ("pass", "break", "continue"):
            if len(toks) != 1:
                return "syntax-expr"
            continue
        if kind == "keyword" and text == "return":
            if len(toks) > 1 and not _ref_expr_ok(toks[1:]):
                return "syntax-expr"
            continue
        n = _ref_lvalue_len(toks)
        if n and n < len(toks) and toks[n][0] == "symbol" and toks[n][1] in _ASSIGN:
            if not _ref_expr_ok(toks[n + 1:]):
                return "syntax-expr"
            continue
        if not _ref_expr_ok(toks):
            return "syntax-expr"

    return "ok"


# --- quadratic ranking oracles --------------------------------------------------
# Rank each item by pairwise counting (no sorting): rank(i) = 1 + #{better}
# with ties broken by input order.

def _rank_of(scores, i):
    return 1 + sum(
        1 for j in range(len(scores))
        if scores[j] > scores[i] or (scores[j] == scores[i] and j < i)
    )


def ref_ap_quadratic(scores, labels):
    n = len(scores)
    ranks = [_rank_of(scores, i) for i in range(n)]  # O(n^2)
    total_pos = sum(labels)
    acc = 0.0
    for i in range(n):
        if labels[i] != 1:
            continue
        k = ranks[i]
        hits = sum(1 for j in range(n) if labels[j] == 1 and ranks[j] <= k)
        acc += hits / k
    return acc / total_pos


def ref_p_at_r_quadratic(scores, labels, r):
    n = len(scores)
    ranks = [_rank_of(scores, i) for i in range(n)]
    total_pos = sum(labels)
    best = 0.0
    for i in range(n):
        k = ranks[i]
        hits = sum(1 for j in range(n) if labels[j] == 1 and ranks[j] <= k)
        if hits / total_pos >= r:
            best = max(best, hits / k)
    return best


# --- dense PCA oracle --------------------------------------------------------

def ref_top2_pca(vectors):
    x = np.asarray(vectors, dtype=np.float64)
    x = x - x.mean(axis=0)
    cov = x.T @ x / max(1, x.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    return vals[order[:2]], vecs[:, order[:2]]
