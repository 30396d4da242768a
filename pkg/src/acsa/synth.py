"""Seeded synthetic corpus with keyword-driven labels.

Each text strings together one to three clauses.  A clause names an aspect
through one of its keywords and carries a polarity word; that pair is the
gold opinion.  Filler clauses carry no label.
"""

from __future__ import annotations

import numpy as np

from .data import LabelSpace, RawReview

ASPECT_KEYWORDS = {
    "FOOD#QUALITY": ("food", "pasta", "pizza"),
    "SERVICE#GENERAL": ("service", "waiter", "staff"),
    "AMBIENCE#GENERAL": ("place", "decor", "atmosphere"),
    "PRICE#GENERAL": ("price", "bill", "cost"),
    "LOCATION#GENERAL": ("location", "street", "neighborhood"),
}
POLARITY_WORDS = {
    "positive": ("great", "wonderful", "excellent"),
    "negative": ("terrible", "awful", "horrible"),
    "neutral": ("average", "ordinary", "okay"),
}
FILLERS = ("we went there on friday", "my friend came along", "it was our first visit")
CONNECTIVES = ("and", "but", "while")


def synthetic_label_space() -> LabelSpace:
    return LabelSpace(tuple(ASPECT_KEYWORDS), tuple(POLARITY_WORDS))


def generate(n: int = 50, seed: int = 0) -> list[RawReview]:
    rng = np.random.default_rng(seed)
    aspects = list(ASPECT_KEYWORDS)
    polarities = list(POLARITY_WORDS)
    reviews = []
    for i in range(n):
        k = int(rng.integers(1, 4))
        chosen = rng.choice(len(aspects), size=k, replace=False)
        clauses, opinions = [], []
        for j in chosen:
            aspect = aspects[j]
            polarity = polarities[int(rng.integers(len(polarities)))]
            noun = ASPECT_KEYWORDS[aspect][int(rng.integers(3))]
            adj = POLARITY_WORDS[polarity][int(rng.integers(3))]
            clauses.append(f"the {noun} was {adj}")
            opinions.append((aspect, polarity))
        if rng.random() < 0.3:
            clauses.insert(int(rng.integers(len(clauses) + 1)), FILLERS[int(rng.integers(len(FILLERS)))])
        text = clauses[0]
        for clause in clauses[1:]:
            text += f" {CONNECTIVES[int(rng.integers(len(CONNECTIVES)))]} {clause}"
        reviews.append(RawReview(f"s{i}", text.capitalize() + ".", opinions))
    return reviews
