"""Synthetic multi-aspect sequence task: aspects, corpora, metrics.

The task is sequence copying with controllable rewrites ("aspects") applied
to the target.  Four aspects are registered, chosen so that any two commute
on corpus data — multi-aspect references are therefore unique regardless of
application order:

* ``shift`` (categorical ``+1``/``+2``): every token inside the shift band
  ``[10, 34)`` is displaced by the value.  Corpus cores use only the band's
  residue-0 ids (10, 13, ..., 31), so a shifted output is recognizable from
  the residue of its band tokens alone.
* ``mark`` (categorical ``m1``/``m2``/``m3``): a marker token is prepended.
* ``order`` (categorical ``fwd``/``rev``): the band-token subsequence keeps
  or reverses its order in place (other tokens hold their positions).
  Corpus cores are sampled with non-decreasing, non-constant class profiles
  so direction is checkable on the output alone.
* ``keyword`` (free form, 1-3 tokens from ``[34, 40)``): the given tokens
  are inserted, in order, right after any leading markers.  Keyword ids sit
  inside the content band but outside the shift band, which is what makes
  ``keyword`` commute with ``shift`` and ``order``.

Token map (vocab 64): 0 PAD, 1 BOS, 63 EOS; 2-9 free filler ids; 10-33 the
shift band; 34-39 keyword ids; 40-42 markers; 43-49 aspect/value tokens used
to spell out constraints; the rest unused.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .rng import SplitMix64, derive_seed

PAD_ID = 0
BOS_ID = 1
EOS_ID = 63

SHIFT_LO = 10
SHIFT_HI = 34
N_CLASSES = 8          # residue-0 ids SHIFT_LO + 3*c, c in [0, 8)
KEYWORD_IDS = tuple(range(34, 40))
MARKER_IDS = {"m1": 40, "m2": 41, "m3": 42}

A_SHIFT, A_MARK, A_ORDER = 43, 44, 45
V_PLUS1, V_PLUS2, V_FWD, V_REV = 46, 47, 48, 49

# Base-corpus tokens: everything the decoder must learn to emit — filler,
# the whole shift band (all residues appear in shifted targets), keyword ids
# and markers.  Aspect/value tokens are excluded so the copy model never
# learns to parrot constraint text.
BASE_TOKEN_LO = 2
BASE_TOKEN_HI = 43

Value = object  # str for categorical aspects, list[int] for keyword


def _in_band(t: int) -> bool:
    return SHIFT_LO <= t < SHIFT_HI


def _band_classes(seq: Sequence[int]) -> list[int]:
    return [(t - SHIFT_LO) // 3 for t in seq if _in_band(t)]


# ---------------------------------------------------------------------------
# Transforms, verifiers, constraint rendering
# ---------------------------------------------------------------------------

def _shift_transform(y: Sequence[int], v: Value) -> list[int]:
    k = int(v)
    return [t + k if _in_band(t) else t for t in y]


def _shift_verifier(out: Sequence[int], v: Value) -> bool:
    k = int(v)
    band = [t for t in out if _in_band(t)]
    return bool(band) and all((t - SHIFT_LO) % 3 == k for t in band)


def _mark_transform(y: Sequence[int], v: Value) -> list[int]:
    return [MARKER_IDS[v]] + list(y)


def _mark_verifier(out: Sequence[int], v: Value) -> bool:
    return bool(out) and out[0] == MARKER_IDS[v]


def _order_transform(y: Sequence[int], v: Value) -> list[int]:
    if v == "fwd":
        return list(y)
    pos = [i for i, t in enumerate(y) if _in_band(t)]
    out = list(y)
    for i, p in enumerate(pos):
        out[p] = y[pos[len(pos) - 1 - i]]
    return out


def _order_verifier(out: Sequence[int], v: Value) -> bool:
    cls = _band_classes(out)
    if len(cls) < 2 or len(set(cls)) < 2:
        return False
    if v == "fwd":
        return all(a <= b for a, b in zip(cls, cls[1:]))
    return all(a >= b for a, b in zip(cls, cls[1:]))


def _keyword_transform(y: Sequence[int], v: Value) -> list[int]:
    i = 0
    marker_ids = set(MARKER_IDS.values())
    while i < len(y) and y[i] in marker_ids:
        i += 1
    return list(y[:i]) + [int(w) for w in v] + list(y[i:])


def _keyword_verifier(out: Sequence[int], v: Value) -> bool:
    return all(int(w) in out for w in v)


def _shift_render(v: Value) -> list[int]:
    return [A_SHIFT, V_PLUS1 if int(v) == 1 else V_PLUS2]


def _mark_render(v: Value) -> list[int]:
    return [A_MARK, MARKER_IDS[v]]


def _order_render(v: Value) -> list[int]:
    return [A_ORDER, V_FWD if v == "fwd" else V_REV]


def _keyword_render(v: Value) -> list[int]:
    return [int(w) for w in v]


@dataclass(frozen=True)
class AspectSpec:
    """One controllable aspect: how to impose, check, and spell it.

    ``transform(y, v)`` rewrites a target; ``verifier(out, v)`` decides
    whether an output satisfies the constraint; ``render(v)`` produces the
    constraint token sequence c.  ``values`` enumerates categorical values
    (empty for free-form aspects).
    """

    name: str
    kind: str                                   # "categorical" | "free_form"
    values: tuple[str, ...]
    transform: Callable[[Sequence[int], Value], list[int]]
    verifier: Callable[[Sequence[int], Value], bool]
    render: Callable[[Value], list[int]]


def default_aspects() -> list[AspectSpec]:
    """The four registered aspects, in canonical composition order."""
    return [
        AspectSpec("shift", "categorical", ("+1", "+2"),
                   _shift_transform, _shift_verifier, _shift_render),
        AspectSpec("mark", "categorical", ("m1", "m2", "m3"),
                   _mark_transform, _mark_verifier, _mark_render),
        AspectSpec("order", "categorical", ("fwd", "rev"),
                   _order_transform, _order_verifier, _order_render),
        AspectSpec("keyword", "free_form", (),
                   _keyword_transform, _keyword_verifier, _keyword_render),
    ]


_REGISTRY = {a.name: a for a in default_aspects()}
CANONICAL_ORDER = tuple(_REGISTRY)


def aspect_by_name(name: str) -> AspectSpec:
    if name not in _REGISTRY:
        raise KeyError(f"unknown aspect {name!r}")
    return _REGISTRY[name]


# ---------------------------------------------------------------------------
# Examples and corpora
# ---------------------------------------------------------------------------

@dataclass
class Example:
    """A source sequence, its (possibly constrained) target, and labels."""

    x: list[int]
    y: list[int]
    aspects: dict[str, Value] = field(default_factory=dict)


def _sample_core(rng: SplitMix64, min_len: int, max_len: int) -> list[int]:
    """Sorted residue-0 band tokens with at least two distinct classes."""
    while True:
        k = int(rng.integers(1, min_len, max_len + 1)[0])
        classes = sorted(int(c) for c in rng.integers(k, 0, N_CLASSES))
        if len(set(classes)) >= 2:
            return [SHIFT_LO + 3 * c for c in classes]


def _sample_value(rng: SplitMix64, aspect: AspectSpec) -> Value:
    if aspect.kind == "categorical":
        return aspect.values[rng.choice(len(aspect.values))]
    count = 1 + rng.choice(3)
    pool = rng.shuffle(list(KEYWORD_IDS))
    return [int(w) for w in pool[:count]]


def gen_base_corpus(n: int, seed: int, min_len: int = 4, max_len: int = 12) -> list[Example]:
    """Unconstrained copy data: x uniform over the emittable bands, y = x."""
    rng = SplitMix64(derive_seed(seed, "corpus/base"))
    out = []
    for _ in range(n):
        k = int(rng.integers(1, min_len, max_len + 1)[0])
        x = [int(t) for t in rng.integers(k, BASE_TOKEN_LO, BASE_TOKEN_HI)]
        out.append(Example(x=x, y=list(x)))
    return out


def gen_multi_aspect(aspect_names: Sequence[str], n: int, seed: int,
                     values: dict[str, Value] | None = None,
                     min_len: int = 4, max_len: int = 8) -> list[Example]:
    """Labeled data whose targets compose all named aspects.

    Transforms are applied in canonical aspect order regardless of the order
    of ``aspect_names`` (they commute, so this only fixes the byte-level
    representative).  ``values`` pins an aspect to one value; unpinned
    aspects sample uniformly per example.
    """
    aspects = [aspect_by_name(name) for name in aspect_names]
    if len({a.name for a in aspects}) != len(aspects):
        raise ValueError("duplicate aspect names")
    tag = "corpus/" + "+".join(sorted(a.name for a in aspects))
    rng = SplitMix64(derive_seed(seed, tag))
    ordered = [a for name in CANONICAL_ORDER for a in aspects if a.name == name]
    out = []
    for _ in range(n):
        x = _sample_core(rng, min_len, max_len)
        vals: dict[str, Value] = {}
        for a in ordered:
            if values is not None and a.name in values:
                vals[a.name] = values[a.name]
            else:
                vals[a.name] = _sample_value(rng, a)
        y = list(x)
        for a in ordered:
            y = a.transform(y, vals[a.name])
        out.append(Example(x=x, y=y, aspects=vals))
    return out


def gen_single_aspect(aspect_name: str, n: int, seed: int,
                      value: Value | None = None) -> list[Example]:
    """Single-aspect labeled data; a fixed ``value`` pins every example."""
    values = {aspect_name: value} if value is not None else None
    return gen_multi_aspect([aspect_name], n, seed, values=values)


def render_constraint(aspect_name: str, value: Value) -> list[int]:
    """Token sequence spelling out one constraint (the c segment)."""
    aspect = aspect_by_name(aspect_name)
    if aspect.kind == "categorical" and value not in aspect.values:
        raise ValueError(f"unknown value {value!r} for aspect {aspect_name}")
    return aspect.render(value)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def evaluate(outputs: Sequence[Sequence[int]], examples: Sequence[Example],
             aspect_names: Sequence[str] | None = None) -> dict:
    """Per-aspect constraint scores plus their arithmetic mean.

    Categorical aspects score the fraction of outputs passing the verifier.
    ``keyword`` scores the word-level copy success rate: the number of
    required keyword tokens present in the output, pooled over all examples,
    divided by the number required.
    """
    if len(outputs) != len(examples):
        raise ValueError("outputs and examples differ in length")
    if aspect_names is None:
        seen: list[str] = []
        for ex in examples:
            for name in ex.aspects:
                if name not in seen:
                    seen.append(name)
        aspect_names = [n for n in CANONICAL_ORDER if n in seen]
    scores: dict[str, float] = {}
    for name in aspect_names:
        aspect = aspect_by_name(name)
        if aspect.kind == "free_form":
            present = 0
            required = 0
            for out, ex in zip(outputs, examples):
                if name not in ex.aspects:
                    continue
                kws = ex.aspects[name]
                required += len(kws)
                present += sum(1 for w in kws if int(w) in out)
            scores[name] = present / required if required else 0.0
        else:
            hits = 0
            count = 0
            for out, ex in zip(outputs, examples):
                if name not in ex.aspects:
                    continue
                count += 1
                hits += bool(aspect.verifier(out, ex.aspects[name]))
            scores[name] = hits / count if count else 0.0
    average = sum(scores.values()) / len(scores) if scores else 0.0
    return {"aspects": scores, "average": average, "n": len(examples)}


def performance_gap(single: dict[str, float], multi: dict[str, float]) -> dict[str, float]:
    """Per-aspect multi-minus-single deltas (negative = degradation)."""
    if set(single) != set(multi):
        raise ValueError("aspect sets differ")
    return {name: multi[name] - single[name] for name in single}


# ---------------------------------------------------------------------------
# Corpus files
# ---------------------------------------------------------------------------

def save_jsonl(path: str | Path, examples: Iterable[Example]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            row = {"x": ex.x, "y": ex.y, "aspects": ex.aspects}
            fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")


def load_jsonl(path: str | Path) -> list[Example]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            out.append(Example(x=[int(t) for t in row["x"]],
                               y=[int(t) for t in row["y"]],
                               aspects=row.get("aspects", {})))
    return out
