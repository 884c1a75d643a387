"""Synthetic evaluation tasks: phonebook recall, needle retrieval, variable
tracking, and multiple-choice prompt formats.

Every generator is a pure function of its arguments plus a seed; equal
inputs give bitwise-identical samples. Filler text comes from a fixed
template pool so the repository needs no external corpora, and filler
never contains digits, which keeps numeric answers unique in context.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TaskSample",
    "MMLUItem",
    "EvalReport",
    "OracleAnswerer",
    "TASK_FAMILIES",
    "gen_phonebook",
    "digit_match",
    "build_mmlu_prompt",
    "score_choices",
    "gen_niah",
    "gen_variable_tracking",
    "evaluate_sweep",
    "exact_match",
]

FIRST_NAMES = (
    "Alice", "Brian", "Clara", "David", "Elena", "Felix", "Grace", "Henry",
    "Irene", "Jacob", "Karen", "Louis", "Maria", "Nathan", "Olga", "Peter",
    "Quinn", "Rosa", "Simon", "Tessa",
)
LAST_NAMES = (
    "Archer", "Baker", "Carver", "Draper", "Fisher", "Gardner", "Harper",
    "Keller", "Lambert", "Mason", "Norris", "Oakley", "Porter", "Reeves",
    "Sawyer", "Turner", "Vance", "Walker", "Weaver", "Young",
)

_FILLER_SUBJECTS = ("the river", "a quiet road", "the old mill", "morning fog",
                    "the harbor", "a distant hill", "the garden wall", "warm wind")
_FILLER_VERBS = ("winds past", "rests beside", "stretches toward", "shadows",
                 "borders", "overlooks", "curves around", "meets")
_FILLER_OBJECTS = ("the village green", "a row of elms", "the stone bridge",
                   "an empty field", "the market square", "a small orchard",
                   "the north gate", "a weathered fence")


@dataclass(frozen=True)
class TaskSample:
    prompt: str
    answer: str
    metadata: dict = field(default_factory=dict)


@dataclass(frozen=True)
class MMLUItem:
    question: str
    choices: tuple
    correct: int

    def __post_init__(self):
        if len(self.choices) != 4:
            raise ValueError("exactly four choices required")
        if self.correct not in (0, 1, 2, 3):
            raise ValueError("correct index must be in 0..3")


def _phone_number(rng: np.random.Generator) -> str:
    d = rng.integers(0, 10, size=10)
    s = "".join(str(x) for x in d)
    return f"{s[:3]}-{s[3:6]}-{s[6:]}"


def _pick_names(rng: np.random.Generator, n: int) -> list[str]:
    grid = len(FIRST_NAMES) * len(LAST_NAMES)
    if n > grid:
        raise ValueError(f"at most {grid} distinct names available, wanted {n}")
    idx = rng.choice(grid, size=n, replace=False)
    return [f"{FIRST_NAMES[i // len(LAST_NAMES)]} {LAST_NAMES[i % len(LAST_NAMES)]}"
            for i in idx]


def gen_phonebook(n_entries: int, seed: int, variant: str = "standard") -> TaskSample:
    """In-context lookup: a name/number book, then a recall question.

    The standard variant shows two answered example questions before the
    query; the reversed variant announces the target name first so a
    fixed-state model knows what to keep, and asks at the end.
    """
    if variant not in ("standard", "reversed"):
        raise ValueError(f"variant must be 'standard' or 'reversed', got {variant!r}")
    if n_entries < 3:
        raise ValueError("need at least 3 entries (two examples plus the query)")
    rng = np.random.default_rng(seed)
    names = _pick_names(rng, n_entries)
    numbers: list[str] = []
    seen = set()
    while len(numbers) < n_entries:
        num = _phone_number(rng)
        if num not in seen:  # distinct numbers keep the answer unique in the book
            seen.add(num)
            numbers.append(num)
    book = "\n".join(f"{name}: {num}" for name, num in zip(names, numbers))
    ex1, ex2, query = rng.choice(n_entries, size=3, replace=False)

    def ask(i: int) -> str:
        return f"Question: What is the phone number for {names[i]}?\nAnswer:"

    if variant == "standard":
        prompt = (f"{book}\n\n"
                  f"{ask(ex1)} {numbers[ex1]}\n"
                  f"{ask(ex2)} {numbers[ex2]}\n"
                  f"{ask(query)}")
    else:
        prompt = (f"Remember the phone number for {names[query]}.\n\n"
                  f"{book}\n\n"
                  f"{ask(query)}")
    return TaskSample(
        prompt=prompt,
        answer=numbers[query],
        metadata={"task": f"phonebook-{variant}", "n_entries": n_entries,
                  "seed": seed, "context_tokens": len(prompt.encode("utf-8"))},
    )


def _digits(text: str) -> str:
    return "".join(c for c in text if c.isdigit())


def digit_match(predicted: str, answer: str) -> float:
    """Position-wise digit agreement against the answer, dashes ignored.

    A short prediction scores its missing positions as mismatches.
    """
    ans = _digits(answer)
    if not ans:
        return 0.0
    pred = _digits(predicted)
    hits = sum(1 for a, p in zip(ans, pred) if a == p)
    return hits / len(ans)


def exact_match(predicted: str, answer: str) -> bool:
    """First line of the prediction, whitespace-trimmed, vs the answer."""
    return predicted.split("\n", 1)[0].strip() == answer.strip()


_LETTERS = "ABCD"


def _mmlu_question_block(item: MMLUItem, fmt: str) -> str:
    if fmt == "cloze":
        return f"Question: {item.question}\nAnswer:"
    lettered = "\n".join(f"{_LETTERS[i]}. {c}" for i, c in enumerate(item.choices))
    return f"Question: {item.question}\n{lettered}\nAnswer:"


def build_mmlu_prompt(item: MMLUItem, fmt: str = "standard",
                      shots: tuple = ()) -> tuple[str, tuple]:
    """Render one multiple-choice query in one of three scoring formats.

    standard:           lettered choices shown, targets are " A".." D"
    choice_in_targets:  lettered choices shown, targets repeat the text
    cloze:              question only, targets are the choice texts
    """
    if fmt not in ("standard", "choice_in_targets", "cloze"):
        raise ValueError(f"unknown format {fmt!r}")
    if fmt == "cloze":
        targets = tuple(f" {c}" for c in item.choices)
    elif fmt == "standard":
        targets = tuple(f" {_LETTERS[i]}" for i in range(4))
    else:
        targets = tuple(f" {_LETTERS[i]}. {c}" for i, c in enumerate(item.choices))
    parts = []
    for shot in shots:
        block = _mmlu_question_block(shot, fmt)
        if fmt == "cloze":
            completion = f" {shot.choices[shot.correct]}"
        elif fmt == "standard":
            completion = f" {_LETTERS[shot.correct]}"
        else:
            completion = f" {_LETTERS[shot.correct]}. {shot.choices[shot.correct]}"
        parts.append(block + completion)
    parts.append(_mmlu_question_block(item, fmt))
    return "\n\n".join(parts), targets


def score_choices(model, prompt: str, targets, normalization: str = "sum") -> int:
    """Pick the continuation the model finds most likely after the prompt."""
    if normalization not in ("sum", "per_token"):
        raise ValueError(f"normalization must be 'sum' or 'per_token', got {normalization!r}")
    scores = []
    for target in targets:
        lp = model.text_logprobs(prompt, target)
        scores.append(lp.sum() if normalization == "sum" else lp.mean())
    return int(np.argmax(scores))


def _filler_sentences(rng: np.random.Generator, budget_chars: int) -> list[str]:
    """Digit-free filler lines totalling budget_chars to within a few chars."""
    out = []
    used = 0
    while True:
        s = (f"{rng.choice(_FILLER_SUBJECTS)} {rng.choice(_FILLER_VERBS)} "
             f"{rng.choice(_FILLER_OBJECTS)}.")
        s = s[0].upper() + s[1:]
        if used + len(s) + 1 > budget_chars:
            break
        out.append(s)
        used += len(s) + 1
    remaining = budget_chars - used - 1
    if remaining >= 4:
        pad = "So"
        for word in ("it", "goes", "on", "and") * (remaining // 3):
            if len(pad) + len(word) + 2 > remaining:
                break
            pad += f" {word}"
        out.append(pad + ".")
    return out


_NIAH_ADJ = ("amber", "bright", "cedar", "dusty", "ember", "frosted", "gilded",
             "hollow", "ivory", "jade")
_NIAH_NOUN = ("anchor", "beacon", "compass", "drum", "falcon", "garnet",
              "harbor", "lantern", "meadow", "quill")


def gen_niah(context_tokens: int, n_keys: int, n_queries: int, seed: int) -> TaskSample:
    """Needles of the form "The magic number for {key} is {7 digits}." hidden
    in filler; the question asks for the value of one or more keys."""
    if n_keys < 1 or n_queries < 1 or n_queries > n_keys:
        raise ValueError("need 1 <= n_queries <= n_keys")
    rng = np.random.default_rng(seed)
    keys_pool = [f"{a}-{b}" for a in _NIAH_ADJ for b in _NIAH_NOUN]
    idx = rng.choice(len(keys_pool), size=n_keys, replace=False)
    keys = [keys_pool[i] for i in idx]
    values = []
    seen = set()
    while len(values) < n_keys:
        v = "".join(str(d) for d in rng.integers(0, 10, size=7))
        if v not in seen:
            seen.add(v)
            values.append(v)
    needles = [f"The magic number for {k} is {v}." for k, v in zip(keys, values)]

    asked = [keys[i] for i in rng.choice(n_keys, size=n_queries, replace=False)]
    value_of = dict(zip(keys, values))
    if n_queries == 1:
        question = f"Question: What is the magic number for {asked[0]}?\nAnswer:"
    else:
        listed = ", ".join(asked)
        question = f"Question: What are the magic numbers for {listed}?\nAnswer:"
    answer = " ".join(value_of[k] for k in asked)

    overhead = sum(len(n) + 1 for n in needles) + len(question) + 2
    if overhead > context_tokens:
        raise ValueError(f"context budget {context_tokens} cannot hold "
                         f"{n_keys} needles plus the question ({overhead})")
    filler = _filler_sentences(rng, context_tokens - overhead)
    lines = list(filler)
    for needle in needles:  # uniform depth, boundaries included
        pos = int(rng.integers(0, len(lines) + 1))
        lines.insert(pos, needle)
    prompt = "\n".join(lines) + "\n\n" + question
    return TaskSample(
        prompt=prompt,
        answer=answer,
        metadata={"task": "niah", "n_keys": n_keys, "n_queries": n_queries,
                  "seed": seed, "context_tokens": len(prompt.encode("utf-8")),
                  "requested_tokens": context_tokens},
    )


_VT_EXAMPLE = ("Example: VAR Y0 = 11111 ; VAR Y1 = Y0 ; all variables equal "
               "to 11111 are: Y0 Y1\n\n")


def gen_variable_tracking(n_chains: int, chain_len: int, context_tokens: int,
                          seed: int) -> TaskSample:
    """Aliased assignment chains scattered through filler; the answer names
    every variable in the chain holding the queried value. One worked
    example precedes the context."""
    if n_chains < 1 or chain_len < 1:
        raise ValueError("need n_chains >= 1 and chain_len >= 1")
    rng = np.random.default_rng(seed)
    n_vars = n_chains * chain_len
    order = rng.permutation(n_vars)
    values = []
    seen = set()
    while len(values) < n_chains:
        v = "".join(str(d) for d in rng.integers(0, 10, size=5))
        if v not in seen:
            seen.add(v)
            values.append(v)
    chains = []
    statements_per_chain = []
    k = 0
    for c in range(n_chains):
        members = [f"X{order[k + j]}" for j in range(chain_len)]
        k += chain_len
        stmts = [f"VAR {members[0]} = {values[c]}"]
        stmts += [f"VAR {members[j]} = {members[j - 1]}" for j in range(1, chain_len)]
        chains.append(members)
        statements_per_chain.append(stmts)

    target = int(rng.integers(0, n_chains))
    question = (f"Question: Which variables are equal to {values[target]}?\n"
                f"Answer:")
    answer = " ".join(chains[target])

    overhead = (len(_VT_EXAMPLE) + len(question) + 2
                + sum(len(s) + 1 for stmts in statements_per_chain for s in stmts))
    if overhead > context_tokens:
        raise ValueError(f"context budget {context_tokens} cannot hold "
                         f"{n_vars} statements plus the question ({overhead})")
    filler = _filler_sentences(rng, context_tokens - overhead)

    # order-preserving random merge so each alias appears after its source
    lines = list(filler)
    for stmts in statements_per_chain:
        pos = sorted(rng.integers(0, len(lines) + 1, size=len(stmts)))
        for offset, (p, s) in enumerate(zip(pos, stmts)):
            lines.insert(p + offset, s)
    prompt = _VT_EXAMPLE + "\n".join(lines) + "\n\n" + question
    return TaskSample(
        prompt=prompt,
        answer=answer,
        metadata={"task": "variable-tracking", "n_chains": n_chains,
                  "chain_len": chain_len, "seed": seed,
                  "context_tokens": len(prompt.encode("utf-8")),
                  "requested_tokens": context_tokens},
    )


class OracleAnswerer:
    """Reads the answer straight from the sample; the evaluation ceiling."""

    def answer(self, sample: TaskSample) -> str:
        return sample.answer


TASK_FAMILIES = {
    "phonebook-standard": lambda n, seed: gen_phonebook(n, seed, "standard"),
    "phonebook-reversed": lambda n, seed: gen_phonebook(n, seed, "reversed"),
}


@dataclass
class EvalReport:
    per_sample: list
    by_length: dict
    accuracy: float
    digit_match: float

    def to_csv(self) -> str:
        lines = ["length,accuracy,digit_match"]
        for length in sorted(self.by_length):
            row = self.by_length[length]
            lines.append(f"{length},{row['accuracy']:.6f},{row['digit_match']:.6f}")
        return "\n".join(lines) + "\n"


def _sample_seed(base: int, length: int, trial: int) -> int:
    return int(np.random.SeedSequence([base, length, trial]).generate_state(1)[0])


def evaluate_sweep(model, family, lengths, trials_per_length: int,
                   seed: int) -> EvalReport:
    """Accuracy and digit-match per task size; deterministic given seed.

    ``model`` needs an ``answer(sample) -> str`` method. A sample the model
    cannot process (context too long) counts as a failure, not a crash.
    """
    if list(lengths) != sorted(lengths):
        raise ValueError("lengths must be ascending")
    generator = TASK_FAMILIES[family] if isinstance(family, str) else family
    per_sample = []
    for length in lengths:
        for trial in range(trials_per_length):
            sample = generator(length, _sample_seed(seed, length, trial))
            try:
                predicted = model.answer(sample)
                failed = False
            except ValueError:
                predicted = ""
                failed = True
            per_sample.append({
                "length": length,
                "trial": trial,
                "exact": bool(exact_match(predicted, sample.answer)),
                "digit_match": digit_match(predicted, sample.answer),
                "failed": failed,
            })
    by_length = {}
    for length in lengths:
        rows = [r for r in per_sample if r["length"] == length]
        by_length[length] = {
            "accuracy": float(np.mean([r["exact"] for r in rows])),
            "digit_match": float(np.mean([r["digit_match"] for r in rows])),
        }
    return EvalReport(
        per_sample=per_sample,
        by_length=by_length,
        accuracy=float(np.mean([r["exact"] for r in per_sample])),
        digit_match=float(np.mean([r["digit_match"] for r in per_sample])),
    )
