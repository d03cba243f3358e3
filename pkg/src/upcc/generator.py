"""Synthetic review corpus with known latent rating structure.

Generative model per review of user u about product p:

    latent = mu + quality_p + bias_u + noise,   mu = (1 + C) / 2
    label  = clamp(round(latent), 1, C)

with quality_p ~ N(0, sigma_product^2), bias_u ~ N(0, sigma_user^2) and
noise ~ N(0, sigma_noise^2). The review text starts with the user's fixed
style word (repeated) followed by k sentiment words. Sentiment words are
drawn from one of C vocabulary bands; the band is the equal-probability
quantile bucket of the text-visible score s = quality_p + noise (optionally
jittered per word). The user bias never influences the text, so text alone
cannot reveal it; that is the headroom user-aware models can exploit.

``bayes_oracle_accuracy`` estimates the best accuracy achievable from the
text proxy (the band of s), optionally together with the exact user bias,
by Monte Carlo over the generative distribution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import norm

from .corpus import Corpus, CorpusError, Review


def round_half_up(x: np.ndarray | float) -> np.ndarray | float:
    """Deterministic rounding used for labels: .5 always rounds up."""
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


@dataclass(frozen=True)
class GeneratorParams:
    num_users: int = 200
    num_products: int = 100
    reviews_per_user: int = 30
    num_classes: int = 5
    sigma_user: float = 0.6
    sigma_product: float = 0.7
    sigma_noise: float = 0.7
    doc_length_range: tuple[int, int] = (6, 18)  # sentiment words per review
    sentiment_vocab_per_band: int = 30
    style_vocab_size: int = 8
    style_words_per_doc: int = 2
    word_band_jitter: float = 0.0  # per-word noise on s before band lookup
    split_fractions: tuple[float, float, float] = (0.7, 0.2, 0.1)
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise CorpusError("num_classes must be >= 2")
        if min(self.sigma_user, self.sigma_product, self.sigma_noise) < 0:
            raise CorpusError("sigmas must be non-negative")
        if self.doc_length_range[0] < 1 or self.doc_length_range[0] > self.doc_length_range[1]:
            raise CorpusError(f"bad doc_length_range {self.doc_length_range}")
        if min(self.num_users, self.num_products, self.reviews_per_user) < 1:
            raise CorpusError("counts must be positive")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9 or min(self.split_fractions) < 0:
            raise CorpusError(f"split_fractions must be non-negative and sum to 1")
        if self.word_band_jitter < 0:
            raise CorpusError("word_band_jitter must be non-negative")

    @property
    def label_mid(self) -> float:
        return (1 + self.num_classes) / 2

    @property
    def sigma_text(self) -> float:
        """Std-dev of the text-visible score s = quality + noise."""
        return math.hypot(self.sigma_product, self.sigma_noise)

    def band_thresholds(self) -> np.ndarray:
        """Interior thresholds of the C equal-probability bands of s."""
        c = self.num_classes
        return self.sigma_text * norm.ppf(np.arange(1, c) / c)


@dataclass
class LatentRecord:
    """Per-entity and per-review latents of a synthetic corpus (oracle replay)."""
    user_bias: dict[str, float]
    product_quality: dict[str, float]
    review_latent: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "user_bias": self.user_bias,
            "product_quality": self.product_quality,
            "review_latent": self.review_latent,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LatentRecord":
        return cls(dict(d["user_bias"]), dict(d["product_quality"]), dict(d["review_latent"]))


def _band_of(values: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    return np.searchsorted(thresholds, values)


def _standardized_normal(rng: np.random.Generator, n: int, sigma: float) -> np.ndarray:
    """n normal draws rescaled to exact sample mean 0 and std sigma.

    Keeps small corpora aligned with the population moments the oracle
    assumes; without this, the realized bias/quality spread of a few hundred
    entities drifts enough to detach trained models from the oracle bounds.
    """
    x = rng.normal(0.0, 1.0, n)
    if n > 1 and sigma > 0 and x.std() > 0:
        x = (x - x.mean()) / x.std()
    return x * sigma


def generate_synthetic(params: GeneratorParams) -> tuple[Corpus, LatentRecord]:
    """Draw a corpus from the generative model; deterministic under the seed."""
    params.validate()
    rng = np.random.default_rng(params.seed)
    n, m, rpu, c = (params.num_users, params.num_products,
                    params.reviews_per_user, params.num_classes)
    total = n * rpu

    user_ids = [f"u{i:04d}" for i in range(n)]
    product_ids = [f"p{i:04d}" for i in range(m)]
    bias = _standardized_normal(rng, n, params.sigma_user)
    quality = _standardized_normal(rng, m, params.sigma_product)
    style_word = rng.integers(0, params.style_vocab_size, n)

    # every product appears at least once; the rest uniform, then shuffled
    assignment = np.concatenate([
        np.arange(m), rng.integers(0, m, max(0, total - m))])[:total]
    rng.shuffle(assignment)

    lengths = rng.integers(params.doc_length_range[0],
                           params.doc_length_range[1] + 1, total)
    noise = rng.normal(0.0, params.sigma_noise, total)
    thresholds = params.band_thresholds()
    mu = params.label_mid

    rows: list[tuple[str, str, int, str]] = []
    latent_by_pos: list[float] = []
    for g in range(total):
        u = g // rpu
        p = int(assignment[g])
        s = quality[p] + noise[g]
        latent = mu + s + bias[u]
        label = int(min(max(round_half_up(latent), 1), c))
        if params.word_band_jitter > 0:
            word_scores = s + rng.normal(0.0, params.word_band_jitter, lengths[g])
        else:
            word_scores = np.full(lengths[g], s)
        bands = _band_of(word_scores, thresholds)
        picks = rng.integers(0, params.sentiment_vocab_per_band, lengths[g])
        style = [f"sty{style_word[u]}"] * params.style_words_per_doc
        words = style + [f"b{bands[i]}w{picks[i]}" for i in range(lengths[g])]
        rows.append((user_ids[u], product_ids[p], label, " ".join(words)))
        latent_by_pos.append(float(latent))

    # per-user split: every user contributes to train, dev and test
    frac_train, frac_dev, frac_test = params.split_fractions
    n_dev = int(math.floor(frac_dev * rpu))
    n_test = int(math.floor(frac_test * rpu))
    n_train = rpu - n_dev - n_test
    if n_train < 1:
        raise CorpusError("split_fractions leave no training reviews per user")
    split_rows: dict[str, list[int]] = {"train": [], "dev": [], "test": []}
    for u in range(n):
        order = rng.permutation(rpu) + u * rpu
        split_rows["train"].extend(int(i) for i in order[:n_train])
        split_rows["dev"].extend(int(i) for i in order[n_train:n_train + n_dev])
        split_rows["test"].extend(int(i) for i in order[n_train + n_dev:])

    corpus = Corpus(num_classes=c)
    review_latent: dict[str, float] = {}
    for split, positions in split_rows.items():
        for line, g in enumerate(positions):
            uid, pid, label, text = rows[g]
            rid = f"{split}:{line}"
            corpus.splits[split].append(Review(rid, uid, pid, label, text))
            review_latent[rid] = latent_by_pos[g]

    latents = LatentRecord(
        user_bias={user_ids[i]: float(bias[i]) for i in range(n)},
        product_quality={product_ids[j]: float(quality[j]) for j in range(m)},
        review_latent=review_latent,
    )
    return corpus, latents


@dataclass(frozen=True)
class OracleEstimate:
    accuracy: float
    stderr: float
    samples: int
    mode: str
    warning: str | None = None


def _p_label_given_band_bias(params: GeneratorParams, band: np.ndarray,
                             bias: np.ndarray) -> np.ndarray:
    """P(label=y | s in band, bias) for y=1..C; shape (len(band), C).

    The conditional is a truncated-normal interval probability: s restricted
    to its band, intersected with the s-window that rounds to y.
    """
    c, mu, sig = params.num_classes, params.label_mid, params.sigma_text
    thr = params.band_thresholds()
    band = np.asarray(band)
    bias = np.asarray(bias, dtype=np.float64)
    if sig == 0.0:  # s is a point mass at 0
        labels = np.clip(round_half_up(mu + bias), 1, c).astype(int)
        out = np.zeros((band.size, c))
        out[np.arange(band.size), labels.reshape(-1) - 1] = 1.0
        return out.reshape(band.shape + (c,))
    band_lo = np.where(band == 0, -np.inf, thr[np.clip(band - 1, 0, None)])
    band_hi = np.where(band == c - 1, np.inf, thr[np.clip(band, 0, c - 2)])
    probs = []
    for y in range(1, c + 1):
        w_lo = -np.inf if y == 1 else (y - mu - 0.5) - bias
        w_hi = np.inf if y == c else (y - mu + 0.5) - bias
        lo = np.maximum(w_lo, band_lo)
        hi = np.minimum(w_hi, band_hi)
        p = np.clip(norm.cdf(hi / sig) - norm.cdf(lo / sig), 0.0, None)
        probs.append(p * c)  # band probability is exactly 1/C
    return np.stack(probs, axis=-1)


def _text_only_prediction_table(params: GeneratorParams, n_nodes: int = 80) -> np.ndarray:
    """Best label per band with the user bias marginalized out (Gauss-Hermite)."""
    c = params.num_classes
    if params.sigma_user == 0.0:
        nodes, weights = np.zeros(1), np.ones(1)
    else:
        x, w = np.polynomial.hermite_e.hermegauss(n_nodes)
        nodes, weights = params.sigma_user * x, w / math.sqrt(2 * math.pi)
    preds = np.zeros(c, dtype=int)
    for band in range(c):
        p = _p_label_given_band_bias(params, np.full(nodes.shape, band, dtype=int), nodes)
        avg = weights @ p
        preds[band] = int(np.argmax(avg)) + 1
    return preds


def bayes_oracle_accuracy(params: GeneratorParams, mode: str,
                          samples: int = 100_000) -> OracleEstimate:
    """Monte-Carlo estimate of the best achievable accuracy.

    mode="text_only": the predictor sees the sentiment band of s only and
    marginalizes over the user bias. mode="full": the predictor additionally
    conditions on the exact user bias.
    """
    if mode not in ("full", "text_only"):
        raise ValueError(f"unknown oracle mode {mode!r}")
    if samples < 1:
        raise ValueError("samples must be positive")
    params.validate()
    warning = "sample count below 1000; estimate is noisy" if samples < 1000 else None

    rng = np.random.default_rng(np.random.SeedSequence([params.seed, 0x0AC1E]))
    c, mu = params.num_classes, params.label_mid
    quality = rng.normal(0.0, params.sigma_product, samples)
    noise = rng.normal(0.0, params.sigma_noise, samples)
    bias = rng.normal(0.0, params.sigma_user, samples)
    s = quality + noise
    band = _band_of(s, params.band_thresholds())
    label = np.clip(round_half_up(mu + s + bias), 1, c).astype(int)

    if mode == "text_only":
        pred = _text_only_prediction_table(params)[band]
    else:
        p = _p_label_given_band_bias(params, band, bias)
        pred = np.argmax(p, axis=-1) + 1
    acc = float(np.mean(pred == label))
    stderr = float(math.sqrt(acc * (1.0 - acc) / samples))
    return OracleEstimate(acc, stderr, samples, mode, warning)


def replay_labels(corpus: Corpus, latents: LatentRecord, num_classes: int) -> bool:
    """Check clamp(round(latent)) == label for every review; True if all match."""
    for r in corpus.all_reviews():
        latent = latents.review_latent[r.review_id]
        expected = int(min(max(round_half_up(latent), 1), num_classes))
        if expected != r.label:
            return False
    return True
