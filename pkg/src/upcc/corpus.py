"""Review corpus data model: TSV ingestion, splits, downsampling, statistics.

A corpus is a set of labeled reviews partitioned into train/dev/test splits.
Each review carries a user id and a product id; per-entity review lists
("historical reviews") are indexed over the training split only, since that
is the only text available for building entity representations without
leaking evaluation data.

File format: 4 tab-separated fields per line -- user_id, product_id, rating,
text -- one review per line, newlines forbidden inside text (embedded tabs
are allowed; only the first three tabs delimit fields). Review ids are
positional ("<split>:<line>") so that save/load round-trips are identities.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPLITS = ("train", "dev", "test")


class CorpusError(Exception):
    """Malformed corpus input (bad line, out-of-range rating, bad params)."""


@dataclass(frozen=True)
class Review:
    review_id: str
    user_id: str
    product_id: str
    label: int  # 1-based class in [1, num_classes]
    text: str


@dataclass
class Corpus:
    num_classes: int
    splits: dict[str, list[Review]] = field(default_factory=lambda: {s: [] for s in SPLITS})

    def __post_init__(self):
        for s in SPLITS:
            self.splits.setdefault(s, [])

    @property
    def train(self) -> list[Review]:
        return self.splits["train"]

    @property
    def dev(self) -> list[Review]:
        return self.splits["dev"]

    @property
    def test(self) -> list[Review]:
        return self.splits["test"]

    def all_reviews(self) -> list[Review]:
        return [r for s in SPLITS for r in self.splits[s]]

    def user_ids(self) -> list[str]:
        """Sorted distinct user ids across all splits."""
        return sorted({r.user_id for r in self.all_reviews()})

    def product_ids(self) -> list[str]:
        return sorted({r.product_id for r in self.all_reviews()})

    def user_index(self) -> dict[str, list[Review]]:
        """user_id -> training-split reviews, in split order."""
        idx: dict[str, list[Review]] = {}
        for r in self.train:
            idx.setdefault(r.user_id, []).append(r)
        return idx

    def product_index(self) -> dict[str, list[Review]]:
        idx: dict[str, list[Review]] = {}
        for r in self.train:
            idx.setdefault(r.product_id, []).append(r)
        return idx

    def validate(self) -> None:
        seen: set[str] = set()
        for s in SPLITS:
            for r in self.splits[s]:
                if not (1 <= r.label <= self.num_classes):
                    raise CorpusError(f"label {r.label} outside [1, {self.num_classes}]")
                if not r.user_id or not r.product_id:
                    raise CorpusError(f"empty user/product id in review {r.review_id}")
                if r.review_id in seen:
                    raise CorpusError(f"duplicate review id {r.review_id}")
                seen.add(r.review_id)


def _parse_line(line: str, lineno: int, split: str, num_classes: int,
                allow_empty_text: bool) -> Review:
    parts = line.split("\t", 3)
    if len(parts) != 4:
        raise CorpusError(f"line {lineno}: expected 4 tab-separated fields, got {len(parts)}")
    user_id, product_id, rating_s, text = parts
    if not user_id or not product_id:
        raise CorpusError(f"line {lineno}: empty user or product id")
    try:
        rating = int(rating_s)
    except ValueError:
        raise CorpusError(f"line {lineno}: rating {rating_s!r} is not an integer") from None
    if not (1 <= rating <= num_classes):
        raise CorpusError(f"line {lineno}: rating {rating} outside [1, {num_classes}]")
    if not text and not allow_empty_text:
        raise CorpusError(f"line {lineno}: empty text (pass allow_empty_text to accept)")
    return Review(f"{split}:{lineno - 1}", user_id, product_id, rating, text)


def load_tsv(train_path: str | Path, num_classes: int,
             dev_path: str | Path | None = None,
             test_path: str | Path | None = None,
             allow_empty_text: bool = False) -> Corpus:
    """Load a corpus from one TSV per split; a single file is treated as train."""
    corpus = Corpus(num_classes=num_classes)
    paths = {"train": train_path, "dev": dev_path, "test": test_path}
    for split, path in paths.items():
        if path is None:
            continue
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.rstrip("\n")
                if not line:
                    continue
                corpus.splits[split].append(
                    _parse_line(line, lineno, split, num_classes, allow_empty_text))
    corpus.validate()
    return corpus


def save_tsv(corpus: Corpus, train_path: str | Path,
             dev_path: str | Path | None = None,
             test_path: str | Path | None = None) -> None:
    """Write one TSV per split, preserving review order."""
    paths = {"train": train_path, "dev": dev_path, "test": test_path}
    for split, path in paths.items():
        if path is None:
            if corpus.splits[split]:
                raise CorpusError(f"no output path given for non-empty split {split!r}")
            continue
        with open(path, "w", encoding="utf-8") as fh:
            for r in corpus.splits[split]:
                if "\n" in r.text:
                    raise CorpusError(f"review {r.review_id}: newline in text is not storable")
                fh.write(f"{r.user_id}\t{r.product_id}\t{r.label}\t{r.text}\n")


def downsample_user_reviews(corpus: Corpus, fraction: float, seed: int) -> Corpus:
    """Keep a uniform sample of ceil(fraction * n_i) training reviews per user.

    Dev/test splits are untouched. Kept reviews preserve their original order,
    so fraction=1.0 is an exact identity on the training split.
    """
    if not (0.0 < fraction <= 1.0):
        raise CorpusError(f"fraction must be in (0, 1], got {fraction}")
    rng = np.random.default_rng(seed)
    by_user: dict[str, list[int]] = {}
    for i, r in enumerate(corpus.train):
        by_user.setdefault(r.user_id, []).append(i)
    keep: set[int] = set()
    for user_id in sorted(by_user):
        positions = by_user[user_id]
        k = math.ceil(fraction * len(positions))
        chosen = rng.choice(len(positions), size=k, replace=False)
        keep.update(positions[j] for j in chosen)
    sampled = Corpus(num_classes=corpus.num_classes)
    sampled.splits["train"] = [r for i, r in enumerate(corpus.train) if i in keep]
    sampled.splits["dev"] = list(corpus.dev)
    sampled.splits["test"] = list(corpus.test)
    return sampled


@dataclass(frozen=True)
class CorpusStats:
    docs_per_split: dict[str, int]
    total_docs: int
    words_per_doc: float
    num_users: int
    num_products: int
    docs_per_user: float
    docs_per_product: float

    def to_dict(self) -> dict:
        return {
            "docs_per_split": dict(self.docs_per_split),
            "total_docs": self.total_docs,
            "words_per_doc": self.words_per_doc,
            "num_users": self.num_users,
            "num_products": self.num_products,
            "docs_per_user": self.docs_per_user,
            "docs_per_product": self.docs_per_product,
        }


def corpus_stats(corpus: Corpus) -> CorpusStats:
    """Whitespace word counts; per-entity means over all splits."""
    reviews = corpus.all_reviews()
    if not reviews:
        raise CorpusError("corpus is empty")
    word_counts = [len(r.text.split()) for r in reviews]
    users = Counter(r.user_id for r in reviews)
    products = Counter(r.product_id for r in reviews)
    total = len(reviews)
    return CorpusStats(
        docs_per_split={s: len(corpus.splits[s]) for s in SPLITS},
        total_docs=total,
        words_per_doc=float(np.mean(word_counts)),
        num_users=len(users),
        num_products=len(products),
        docs_per_user=total / len(users),
        docs_per_product=total / len(products),
    )
