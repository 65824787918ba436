"""Deterministic synthetic conversation data for tests and desk-scale runs.

Template-generated restaurant chatter over a small closed vocabulary:
contexts mention a place and two foods, responses recommend one of them,
facts carry place/food trivia.  Same seed, same corpus, bit for bit.
"""

from __future__ import annotations

import numpy as np

from .textcore import ConversationExample, Corpus, tokenize

_PLACES = ["marios", "dumpling house", "taco corner", "noodle bar", "green cafe",
           "harbor grill", "spice garden", "old bakery"]
_FOODS = ["pizza", "dumplings", "tacos", "noodles", "salad", "wontons", "curry",
          "bread", "soup", "pancakes", "tofu", "ribs"]
_QUALITIES = ["amazing", "great", "fresh", "spicy", "crispy", "sweet", "rich", "tasty"]

_CONTEXT_TEMPLATES = [
    "going to {place} tonight for {food1} !",
    "anyone tried the {food1} at {place} ?",
    "craving {food1} and {food2} right now",
    "dinner at {place} , what should i order ?",
    "is the {food1} any good at {place} ?",
]

_RESPONSE_TEMPLATES = [
    "the {food1} with {food2} is {quality} !",
    "try the {food1} , it is {quality}",
    "you have to order the {food2} there",
    "their {food1} is {quality} , skip the {food2}",
]

_FACT_TEMPLATES = [
    "{place} is known for {quality} {food1}",
    "the {food2} at {place} comes with {food1}",
    "locals love the {food1} here",
]


def synthetic_corpus(n: int, seed: int = 0, split: str = "train",
                     with_facts: bool = True) -> Corpus:
    """Generate n template examples; facts per example range 0..3."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, len(split), n]))
    examples = []
    for _ in range(n):
        slots = {
            "place": _PLACES[rng.integers(len(_PLACES))],
            "food1": _FOODS[rng.integers(len(_FOODS))],
            "food2": _FOODS[rng.integers(len(_FOODS))],
            "quality": _QUALITIES[rng.integers(len(_QUALITIES))],
        }
        context = _CONTEXT_TEMPLATES[rng.integers(len(_CONTEXT_TEMPLATES))].format(**slots)
        response = _RESPONSE_TEMPLATES[rng.integers(len(_RESPONSE_TEMPLATES))].format(**slots)
        facts = []
        if with_facts:
            for _ in range(int(rng.integers(0, 4))):
                facts.append(tokenize(
                    _FACT_TEMPLATES[rng.integers(len(_FACT_TEMPLATES))].format(**slots)
                ))
        examples.append(ConversationExample(tokenize(context), tokenize(response), facts))
    return Corpus(examples, split=split)


def separability_data(n_contexts: int, seed: int = 0):
    """Contexts with word-copying positives and token-disjoint negatives.

    Returns (triples, vocabulary tokens): positives reuse at least half of
    their context's tokens, negatives draw from a disjoint vocabulary block.
    Used to verify the ranker can learn lexical-overlap matching.
    """
    from .ranking import TrainingTriple

    rng = np.random.default_rng(seed)
    block_a = [f"a{i}" for i in range(40)]
    block_b = [f"b{i}" for i in range(40)]
    triples = []
    for _ in range(n_contexts):
        clen = int(rng.integers(6, 11))
        context = [block_a[int(i)] for i in rng.integers(0, len(block_a), size=clen)]
        n_copy = max((clen + 1) // 2, int(rng.integers(clen // 2, clen + 1)))
        copy_idx = rng.choice(clen, size=min(n_copy, clen), replace=False)
        positive = [context[int(i)] for i in sorted(copy_idx)]
        extra = int(rng.integers(0, 3))
        positive += [block_a[int(i)] for i in rng.integers(0, len(block_a), size=extra)]
        nlen = int(rng.integers(4, 9))
        negative = [block_b[int(i)] for i in rng.integers(0, len(block_b), size=nlen)]
        triples.append(TrainingTriple(context, positive, negative))
    return triples, block_a + block_b
