"""Seeded toy corpus: programs generated from templates with labeled
misconception injections, a long-tailed option frequency profile, and an
optional rate of statically broken programs.

Stands in for a real graded-exam corpus so the pipeline can be exercised
end to end.
"""

from __future__ import annotations

import random

from .lexnorm import LexConfig, lex_normalize
from .taskforge import RubricDataset, RubricRecord, mix_seed

WRONG_COMPARISON = "wrong-comparison"
OFF_BY_ONE = "off-by-one"
MISSING_RETURN = "missing-return"
INT_DIV_FOR_MOD = "int-div-for-mod"
UNCHECKED_KEY = "unchecked-key"
PERFECT = "perfect"

FAMILY_RUBRIC = {
    WRONG_COMPARISON: ("comparison logic", "uses the wrong comparison operator"),
    OFF_BY_ONE: ("loop bounds", "off by one in the loop bounds"),
    MISSING_RETURN: ("return statement", "missing the final return statement"),
    INT_DIV_FOR_MOD: ("modulo arithmetic", "uses integer division instead of modulo"),
    UNCHECKED_KEY: ("key handling", "accesses the table without checking the key"),
    PERFECT: ("overall correctness", "perfect solution with no issues"),
}

# option base rates by within-question rank; the tail dips under 0.1
RATE_SHAPE = (0.42, 0.26, 0.14, 0.07)

_ACC = ("total", "result", "acc", "tally", "answer", "agg")
_LOOP = ("i", "j", "idx", "pos", "cursor", "step_no")
_NUM_PARAM = ("n", "limit", "bound", "stop", "top")
_LIST_PARAM = ("items", "values", "numbers", "data", "entries")
_TABLE_PARAM = ("table", "lookup", "mapping", "store", "registry")
_KEY_PARAM = ("key", "field", "label", "name_key")
_ELEM = ("x", "v", "item", "elem", "cur")
_NOOP = ("tmp", "unused", "scratch", "probe")

_BREAK_KINDS = ("paren", "colon", "indent-extra", "indent-flat", "arity", "expr")


def _maybe_noop(rng, lines):
    if rng.random() < 0.3:
        lines.insert(1, f"    {rng.choice(_NOOP)} = 0")
    return lines


def _acc_add(rng, acc, term):
    if rng.random() < 0.5:
        return f"{acc} += {term}"
    return f"{acc} = {acc} + {term}"


def _sum_range(rng, fname, flags):
    n, acc, i = rng.choice(_NUM_PARAM), rng.choice(_ACC), rng.choice(_LOOP)
    start = "0" if OFF_BY_ONE in flags and rng.random() < 0.5 else "1"
    bound = f"{n} - 1" if OFF_BY_ONE in flags and start == "1" else n
    cmp_op = "<" if WRONG_COMPARISON in flags else "<="
    lines = [
        f"def {fname}({n}):",
        f"    {acc} = 0",
        f"    {i} = {start}",
        f"    while {i} {cmp_op} {bound}:",
        f"        {_acc_add(rng, acc, i)}",
        f"        {i} = {i} + 1",
        f"    return {acc}",
    ]
    if MISSING_RETURN in flags:
        lines.pop()
    return _maybe_noop(rng, lines)


def _sum_even(rng, fname, flags):
    n, acc, i = rng.choice(_NUM_PARAM), rng.choice(_ACC), rng.choice(_LOOP)
    start = "0" if OFF_BY_ONE in flags and rng.random() < 0.5 else "1"
    bound = f"{n} - 1" if OFF_BY_ONE in flags and start == "1" else n
    cmp_op = "<" if WRONG_COMPARISON in flags else "<="
    mod_op = "//" if INT_DIV_FOR_MOD in flags else "%"
    lines = [
        f"def {fname}({n}):",
        f"    {acc} = 0",
        f"    {i} = {start}",
        f"    while {i} {cmp_op} {bound}:",
        f"        if {i} {mod_op} 2 == 0:",
        f"            {_acc_add(rng, acc, i)}",
        f"        {i} = {i} + 1",
        f"    return {acc}",
    ]
    if MISSING_RETURN in flags:
        lines.pop()
    return _maybe_noop(rng, lines)


def _count_matches(rng, fname, flags):
    items, acc, x = rng.choice(_LIST_PARAM), rng.choice(_ACC), rng.choice(_ELEM)
    mod = rng.choice((2, 3, 5))
    rem = rng.randrange(mod)
    mod_op = "//" if INT_DIV_FOR_MOD in flags else "%"
    eq_op = "!=" if WRONG_COMPARISON in flags else "=="
    lines = [
        f"def {fname}({items}):",
        f"    {acc} = 0",
        f"    for {x} in {items}:",
        f"        if {x} {mod_op} {mod} {eq_op} {rem}:",
        f"            {_acc_add(rng, acc, '1')}",
        f"    return {acc}",
    ]
    if MISSING_RETURN in flags:
        lines.pop()
    return _maybe_noop(rng, lines)


def _find_max(rng, fname, flags):
    items, best, x = rng.choice(_LIST_PARAM), rng.choice(_ACC), rng.choice(_ELEM)
    first = "1" if OFF_BY_ONE in flags else "0"
    cmp_op = "<" if WRONG_COMPARISON in flags else ">"
    lines = [
        f"def {fname}({items}):",
        f"    {best} = {items}[{first}]",
        f"    for {x} in {items}:",
        f"        if {x} {cmp_op} {best}:",
        f"            {best} = {x}",
        f"    return {best}",
    ]
    if MISSING_RETURN in flags:
        lines.pop()
    return _maybe_noop(rng, lines)


def _guarded_lookup(rng, fname, flags):
    table, key = rng.choice(_TABLE_PARAM), rng.choice(_KEY_PARAM)
    default = rng.randrange(3)
    val = rng.choice(_ACC)
    if UNCHECKED_KEY in flags:
        lines = [
            f"def {fname}({table}, {key}):",
            f"    {val} = {table}[{key}]",
            f"    return {val}",
        ]
        if MISSING_RETURN in flags:
            lines[-1] = f"    {val}"
    else:
        lines = [
            f"def {fname}({table}, {key}):",
            f"    if {key} in {table}:",
            f"        return {table}[{key}]",
            f"    return {default}",
        ]
        if MISSING_RETURN in flags:
            lines.pop()
    return lines


def _count_hits(rng, fname, flags):
    table, keys = rng.choice(_TABLE_PARAM), rng.choice(_LIST_PARAM)
    acc, k = rng.choice(_ACC), rng.choice(_KEY_PARAM)
    threshold = rng.randrange(4)
    cmp_op = "<" if WRONG_COMPARISON in flags else ">"
    if UNCHECKED_KEY in flags:
        lines = [
            f"def {fname}({table}, {keys}):",
            f"    {acc} = 0",
            f"    for {k} in {keys}:",
            f"        if {table}[{k}] {cmp_op} {threshold}:",
            f"            {_acc_add(rng, acc, '1')}",
            f"    return {acc}",
        ]
    else:
        lines = [
            f"def {fname}({table}, {keys}):",
            f"    {acc} = 0",
            f"    for {k} in {keys}:",
            f"        if {k} in {table}:",
            f"            if {table}[{k}] {cmp_op} {threshold}:",
            f"                {_acc_add(rng, acc, '1')}",
            f"    return {acc}",
        ]
    if MISSING_RETURN in flags:
        lines.pop()
    return _maybe_noop(rng, lines)


def _parity_label(rng, fname, flags):
    n = rng.choice(_NUM_PARAM)
    a, b = ("'even'", "'odd'") if rng.random() < 0.5 else ('"even"', '"odd"')
    mod_op = "//" if INT_DIV_FOR_MOD in flags else "%"
    eq_op = "!=" if WRONG_COMPARISON in flags else "=="
    if rng.random() < 0.5:
        rem = rng.choice(_ACC)
        lines = [
            f"def {fname}({n}):",
            f"    {rem} = {n} {mod_op} 2",
            f"    if {rem} {eq_op} 0:",
            f"        return {a}",
            f"    return {b}",
        ]
    else:
        lines = [
            f"def {fname}({n}):",
            f"    if {n} {mod_op} 2 {eq_op} 0:",
            f"        return {a}",
            f"    return {b}",
        ]
    if MISSING_RETURN in flags:
        lines.pop()
    return lines


_TEMPLATES = (
    {
        "name": "sum_range",
        "emit": _sum_range,
        "families": (WRONG_COMPARISON, OFF_BY_ONE, MISSING_RETURN),
        "fnames": ("sum_to", "add_up", "range_sum", "accumulate"),
        "prompts": (
            "Write a function {f} that returns the sum of the integers from 1 to {p}.",
            "Implement {f}: add the whole numbers 1 through {p} and return the total.",
            "Define {f} so it computes 1 + 2 + ... + {p} with a loop and returns it.",
        ),
    },
    {
        "name": "sum_even",
        "emit": _sum_even,
        "families": (WRONG_COMPARISON, OFF_BY_ONE, INT_DIV_FOR_MOD, MISSING_RETURN),
        "fnames": ("sum_even", "even_total", "add_evens", "sum_pairs"),
        "prompts": (
            "Write a function {f} that sums the even integers from 1 to {p}.",
            "Implement {f}: accumulate every even number up to {p} and return the sum.",
            "Define {f} to loop from 1 to {p} and total only the even values.",
        ),
    },
    {
        "name": "count_matches",
        "emit": _count_matches,
        "families": (INT_DIV_FOR_MOD, WRONG_COMPARISON, MISSING_RETURN),
        "fnames": ("count_matches", "tally_mod", "count_rem", "matches"),
        "prompts": (
            "Write a function {f} that counts how many values in {p} leave a given remainder.",
            "Implement {f}: count the elements of {p} whose remainder test succeeds.",
            "Define {f} so it walks {p} and counts entries matching the modulo condition.",
        ),
    },
    {
        "name": "find_max",
        "emit": _find_max,
        "families": (WRONG_COMPARISON, OFF_BY_ONE, MISSING_RETURN),
        "fnames": ("find_max", "largest", "peak_value", "maximum_of"),
        "prompts": (
            "Write a function {f} that returns the largest value in the list {p}.",
            "Implement {f}: scan {p} and return its maximum element.",
            "Define {f} to track the best value seen while looping over {p}.",
        ),
    },
    {
        "name": "guarded_lookup",
        "emit": _guarded_lookup,
        "families": (UNCHECKED_KEY, MISSING_RETURN),
        "fnames": ("get_value", "safe_get", "lookup_or_default", "fetch"),
        "prompts": (
            "Write a function {f} that returns {p}[key] when the key exists, else a default.",
            "Implement {f}: look a key up in {p} but fall back to a default when absent.",
            "Define {f} so missing keys in {p} return a default instead of failing.",
        ),
    },
    {
        "name": "count_hits",
        "emit": _count_hits,
        "families": (UNCHECKED_KEY, WRONG_COMPARISON, MISSING_RETURN),
        "fnames": ("count_hits", "count_over", "hits_above", "threshold_count"),
        "prompts": (
            "Write a function {f} that counts keys whose value in {p} exceeds a threshold.",
            "Implement {f}: for each key present in {p}, count values above the cutoff.",
            "Define {f} to count how many listed keys map to large values in {p}.",
        ),
    },
    {
        "name": "parity_label",
        "emit": _parity_label,
        "families": (INT_DIV_FOR_MOD, WRONG_COMPARISON, MISSING_RETURN),
        "fnames": ("parity_name", "even_or_odd", "parity_of", "label_parity"),
        "prompts": (
            "Write a function {f} that returns 'even' or 'odd' for the number {p}.",
            "Implement {f}: classify {p} by parity and return the matching word.",
            "Define {f} so it tests {p} modulo two and returns the parity label.",
        ),
    },
)


def _apply_break(lines, kind, rng):
    """Make the program statically broken in a way the lexer still accepts."""
    lines = list(lines)
    if kind == "paren":
        idxs = [i for i, ln in enumerate(lines) if any(c in ln for c in ")]")]
        i = rng.choice(idxs)
        for closer in ")]":
            pos = lines[i].rfind(closer)
            if pos >= 0:
                lines[i] = lines[i][:pos] + lines[i][pos + 1:]
                break
        return lines
    if kind == "colon":
        idxs = [i for i, ln in enumerate(lines) if ln.rstrip().endswith(":")]
        i = rng.choice(idxs)
        lines[i] = lines[i].rstrip()[:-1]
        return lines
    if kind == "indent-extra":
        def indent(s):
            return len(s) - len(s.lstrip(" "))
        idxs = [
            i for i in range(1, len(lines))
            if not lines[i - 1].rstrip().endswith(":")
            and indent(lines[i]) == indent(lines[i - 1])
        ]
        if not idxs:
            return _apply_break(lines, "indent-flat", rng)
        i = rng.choice(idxs)
        lines[i] = "    " + lines[i]
        return lines
    if kind == "indent-flat":
        return [ln.lstrip(" ") for ln in lines]
    if kind == "arity":
        head = lines[0]
        inner = head[head.index("(") + 1:head.rindex(")")]
        first = inner.split(",")[0].strip()
        if rng.random() < 0.5 and first:
            new_inner = f"{inner}, {first}"
        else:
            new_inner = f"{inner},"
        lines[0] = head[:head.index("(") + 1] + new_inner + head[head.rindex(")"):]
        return lines
    if kind == "expr":
        idxs = [
            i for i, ln in enumerate(lines)
            if " = " in ln or ln.strip().startswith("return ")
        ]
        i = rng.choice(idxs)
        lines[i] = lines[i] + " +"
        return lines
    raise ValueError(f"unknown break kind {kind}")


def synth_corpus(seed: int, num_questions: int, students_per_question: int,
                 lex_config: LexConfig = LexConfig(),
                 break_rate: float = 0.2) -> RubricDataset:
    """Generate a rubric-labeled dataset of toy programs.

    Each question instantiates a template; each applicable misconception
    family becomes one rubric option with a rank-based long-tail rate,
    plus a derived perfect-solution option.  A break_rate fraction of
    programs additionally get a static defect (orthogonal to the rubric
    labels except that broken programs are never perfect).
    """
    if num_questions < 1 or students_per_question < 1:
        raise ValueError("sizes must be >= 1")
    records = []
    num_exams = max(2, num_questions // 6)
    for qi in range(num_questions):
        template = _TEMPLATES[qi % len(_TEMPLATES)]
        q_rng = random.Random(mix_seed(seed, "question", qi))
        qid = f"q{qi:03d}"
        exam_id = f"exam{qi % num_exams}"
        fname = q_rng.choice(template["fnames"])
        param_hint = q_rng.choice(("n", "the input", "the argument"))
        prompt = q_rng.choice(template["prompts"]).format(f=fname, p=param_hint)
        families = list(template["families"])
        q_rng.shuffle(families)
        rates = {fam: RATE_SHAPE[rank] for rank, fam in enumerate(families)}
        options = families + [PERFECT]

        seen_sources = set()
        for si in range(students_per_question):
            s_rng = random.Random(mix_seed(seed, "student", qi, si))
            # labels are drawn once; retries only vary the surface, so the
            # option marginals stay at their configured rates
            flags = {fam for fam in families if s_rng.random() < rates[fam]}
            broken = s_rng.random() < break_rate
            break_kind = s_rng.choice(_BREAK_KINDS) if broken else None
            for attempt in range(60):
                lines = template["emit"](s_rng, fname, flags)
                if attempt > 0:
                    lines.insert(1, f"    {s_rng.choice(_NOOP)} = {s_rng.randrange(10000)}")
                if broken:
                    lines = _apply_break(lines, break_kind, s_rng)
                source = "\n".join(lines) + "\n"
                if source not in seen_sources:
                    break
            else:
                continue  # exhausted variation budget; skip this student
            seen_sources.add(source)
            program = lex_normalize(source, lex_config)
            for fam in options:
                if fam == PERFECT:
                    label = int(not flags and not broken)
                else:
                    label = int(fam in flags)
                item_text, option_text = FAMILY_RUBRIC[fam]
                records.append(RubricRecord(
                    exam_id=exam_id,
                    question_id=qid,
                    prompt_text=prompt,
                    rubric_item_id=f"{qid}-item-{fam}",
                    rubric_item_text=item_text,
                    rubric_option_id=f"{qid}-{fam}",
                    rubric_option_text=option_text,
                    source=source,
                    program=program,
                    label=label,
                ))
    dataset = RubricDataset(records)
    dataset.validate()
    return dataset
