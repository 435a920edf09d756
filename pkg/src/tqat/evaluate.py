"""Perplexity and zero-shot multiple-choice scoring on synthetic pattern tasks."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, log_softmax_np, no_grad

FAMILIES = ("copy", "majority", "reversal")

_LETTERS = "abcdefghijklmnopqrstuvwxyz"


@dataclass(frozen=True)
class McTask:
    prompt: bytes
    choices: tuple
    answer: int
    family: str = ""

    def __post_init__(self):
        if len(self.choices) < 2:
            raise ValueError("a task needs at least two choices")
        if not 0 <= self.answer < len(self.choices):
            raise ValueError("answer index out of range")


def logits_fn(model):
    """Adapt a model (TransformerModel, PackedModel or callable) to ``ids[B, T] -> ndarray[B, T, V]``."""
    from .infer.packed import PackedModel, run_packed_forward

    if isinstance(model, PackedModel):
        return lambda ids: run_packed_forward(model, ids)
    if hasattr(model, "forward"):
        def fn(ids):
            with no_grad():
                out = model.forward(ids)
            return out.data if isinstance(out, Tensor) else np.asarray(out)
        return fn
    if callable(model):
        return lambda ids: np.asarray(model(ids))
    raise TypeError(f"cannot score with {type(model).__name__}")


def _max_len(model):
    cfg = getattr(model, "config", None)
    return getattr(cfg, "max_seq_len", None)


def perplexity(model, stream, n_batches: int) -> float:
    """exp of the mean token negative log-likelihood over batches ``0..n_batches-1``."""
    if n_batches < 1:
        raise ValueError("n_batches must be >= 1")
    fn = logits_fn(model)
    total, count = 0.0, 0
    for t in range(n_batches):
        x, y = stream.next_batch(t)
        logp = log_softmax_np(np.asarray(fn(x), dtype=np.float64))
        nll = -np.take_along_axis(logp, y[..., None], axis=-1)
        total += float(nll.sum())
        count += nll.size
    return math.exp(total / count)


def choice_scores(model, task: McTask, fn=None) -> np.ndarray:
    """Mean per-token log-probability of each continuation given the prompt."""
    fn = fn or logits_fn(model)
    max_len = _max_len(model)
    prompt = np.frombuffer(task.prompt, dtype=np.uint8).astype(np.int64)
    uniq = list(dict.fromkeys(task.choices))
    by_len = defaultdict(list)
    for c in uniq:
        if len(c) == 0:
            raise ValueError("empty continuation")
        by_len[len(c)].append(c)
    score = {}
    for n, group in by_len.items():
        cont = np.stack([np.frombuffer(c, dtype=np.uint8).astype(np.int64) for c in group])
        ids = np.concatenate([np.broadcast_to(prompt, (len(group), len(prompt))), cont], axis=1)
        inputs = ids[:, :-1]
        if max_len is not None and inputs.shape[1] > max_len:
            inputs = inputs[:, -max_len:]
            ids = ids[:, -(max_len + 1):]
        logp = log_softmax_np(np.asarray(fn(inputs), dtype=np.float64))
        tail = logp[:, -n:, :]
        tok = np.take_along_axis(tail, ids[:, -n:, None], axis=-1)[..., 0]
        for c, s in zip(group, tok.sum(axis=1) / n):
            score[c] = float(s)
    return np.array([score[c] for c in task.choices])


def mc_score(model, task: McTask, fn=None) -> int:
    """Index of the best length-normalized continuation; ties go to the lowest index."""
    return int(np.argmax(choice_scores(model, task, fn)))


def accuracy(model, tasks, fn=None) -> dict:
    """Accuracy per family plus ``all``."""
    fn = fn or logits_fn(model)
    hits, counts = defaultdict(int), defaultdict(int)
    for task in tasks:
        ok = mc_score(model, task, fn) == task.answer
        for key in (task.family, "all"):
            hits[key] += ok
            counts[key] += 1
    return {k: hits[k] / counts[k] for k in counts}


def _place(rng, correct, distractors):
    k = len(distractors) + 1
    ans = int(rng.integers(k))
    choices = list(distractors)
    choices.insert(ans, correct)
    return tuple(c.encode() for c in choices), ans


def _copy_task(rng):
    # "kqzwkqzwkq" -> "zwk": continue a periodic byte pattern. Distractors are
    # the other phases of the same cycle, so every choice uses exactly the
    # prompt's letters and only the order seen in context tells them apart.
    p = int(rng.integers(4, 6))
    pattern = "".join(str(c) for c in rng.choice(list(_LETTERS), size=p, replace=False))
    m = int(rng.integers(0, p))
    prompt = pattern * int(rng.integers(3, 5)) + pattern[:m]
    ring = pattern * 3
    others = [ring[j:j + 3] for j in range(p) if j != m]
    pick = sorted(rng.choice(len(others), size=3, replace=False))
    choices, ans = _place(rng, ring[m:m + 3], [others[i] for i in pick])
    return McTask(prompt.encode(), choices, ans, "copy")


def _majority_task(rng):
    letters = rng.choice(list(_LETTERS), size=4, replace=False)
    major, minors = letters[0], letters[1:3]
    seq = [major] * 5 + list(rng.choice(minors, size=4))
    rng.shuffle(seq)
    prompt = f"most common in {''.join(seq)} is "
    choices, ans = _place(rng, str(major), [str(c) for c in letters[1:]])
    return McTask(prompt.encode(), choices, ans, "majority")


def _reversal_task(rng):
    n = int(rng.integers(3, 6))
    letters = [str(c) for c in rng.choice(list(_LETTERS), size=n, replace=False)]
    word = "".join(letters)
    target = word[::-1]
    distractors = set()
    while len(distractors) < 3:
        cand = "".join(rng.permutation(letters))
        if cand != target:
            distractors.add(cand)
    prompt = f"{word} reversed is "
    choices, ans = _place(rng, target, sorted(distractors))
    return McTask(prompt.encode(), choices, ans, "reversal")


_MAKERS = {"copy": _copy_task, "majority": _majority_task, "reversal": _reversal_task}


def make_synthetic_suite(seed: int, n_per_family: int = 100, families=FAMILIES) -> list:
    """Deterministic k=4 pattern-completion tasks, one generator stream per family."""
    tasks = []
    for fi, fam in enumerate(families):
        rng = np.random.default_rng([seed, fi])
        tasks.extend(_MAKERS[fam](rng) for _ in range(n_per_family))
    return tasks
