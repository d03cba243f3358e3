"""Training loop, metrics and evaluation.

One train() call owns its model exclusively: seeded initialization, Adam
updates over seeded shuffled mini-batches, a dev evaluation per epoch (or
every eval_every steps), and early stopping after `patience` consecutive
evaluations without a strict dev-accuracy improvement. The returned weights
are those of the best evaluation, so re-running with the same config and
seed reproduces the identical RunHistory and checkpoint.

Predictions resolve argmax ties to the lowest class index; RMSE is computed
on 1-based label values.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from .corpus import Corpus
from .encoder import EncoderConfig
from .entity_init import EmbeddingMatrix
from .model import COLD_INDEX, SentimentModel, Variant, cross_entropy_loss, predict_classes
from .tokenizer import PAD_ID, Vocab, encode
from . import encoder as enc


class TrainingDivergedError(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    variant: str = Variant.FULL_CROSS_CONTEXT.value
    learning_rate: float = 3e-4
    batch_size: int = 32
    max_epochs: int = 20
    patience: int = 2
    seed: int = 0
    max_len: int = 32
    eval_every: int | None = None  # steps; None = once per epoch
    cross_heads: int = 4

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if min(self.batch_size, self.max_epochs, self.max_len) < 1:
            raise ValueError("batch_size, max_epochs and max_len must be >= 1")


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    rmse: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def accuracy(preds: list[int] | np.ndarray, gold: list[int] | np.ndarray) -> float:
    preds, gold = np.asarray(preds), np.asarray(gold)
    if preds.shape != gold.shape or preds.size == 0:
        raise ValueError("prediction and gold lists must be equal-length and non-empty")
    return float(np.mean(preds == gold))


def rmse(preds: list[int] | np.ndarray, gold: list[int] | np.ndarray) -> float:
    """Root mean squared difference of 1-based label values."""
    preds, gold = np.asarray(preds, dtype=np.float64), np.asarray(gold, dtype=np.float64)
    if preds.shape != gold.shape or preds.size == 0:
        raise ValueError("prediction and gold lists must be equal-length and non-empty")
    return float(np.sqrt(np.mean((preds - gold) ** 2)))


def compute_metrics(preds, gold) -> Metrics:
    return Metrics(accuracy(preds, gold), rmse(preds, gold), len(preds))


class EarlyStopper:
    """Stop after `patience` consecutive evaluations without strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best: float | None = None
        self.streak = 0

    def update(self, value: float) -> bool:
        """Record an evaluation; returns True when it strictly improved."""
        if self.best is None or value > self.best:
            self.best = value
            self.streak = 0
            return True
        self.streak += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.streak >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_accuracy: float
    dev_rmse: float
    wall_time_s: float


@dataclass
class RunHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0

    def to_jsonl_rows(self) -> list[dict]:
        return [asdict(r) for r in self.records]


# ---------------------------------------------------------------------------
# tensorized corpus
# ---------------------------------------------------------------------------

@dataclass
class TensorizedSplit:
    ids: torch.Tensor        # (n, L) int64
    pad_mask: torch.Tensor   # (n, L) bool
    labels0: torch.Tensor    # (n,) int64, 0-based
    user_idx: torch.Tensor   # (n,) int64, COLD_INDEX for unknown ids
    product_idx: torch.Tensor
    review_ids: list[str]
    n_raw_tokens: np.ndarray  # pre-truncation whitespace token counts

    def __len__(self) -> int:
        return len(self.review_ids)


@dataclass
class Tensorized:
    splits: dict[str, TensorizedSplit]
    user_ids: list[str]
    product_ids: list[str]
    max_len: int


def tensorize(corpus: Corpus, vocab: Vocab, max_len: int) -> Tensorized:
    """Tokenize every split once; entity indices over the whole corpus."""
    user_ids = corpus.user_ids()
    product_ids = corpus.product_ids()
    u_index = {u: i for i, u in enumerate(user_ids)}
    p_index = {p: i for i, p in enumerate(product_ids)}
    splits = {}
    for split, reviews in corpus.splits.items():
        if not reviews:
            continue
        docs = [encode(r.text, vocab, max_len) for r in reviews]
        ids = torch.from_numpy(np.stack([d.ids for d in docs]))
        splits[split] = TensorizedSplit(
            ids=ids,
            pad_mask=ids == PAD_ID,
            labels0=torch.tensor([r.label - 1 for r in reviews], dtype=torch.int64),
            user_idx=torch.tensor([u_index.get(r.user_id, COLD_INDEX) for r in reviews]),
            product_idx=torch.tensor([p_index.get(r.product_id, COLD_INDEX) for r in reviews]),
            review_ids=[r.review_id for r in reviews],
            n_raw_tokens=np.array([len(r.text.split()) for r in reviews]),
        )
    return Tensorized(splits, user_ids, product_ids, max_len)


def _batches(n: int, batch_size: int, order: np.ndarray | None = None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield torch.from_numpy(np.ascontiguousarray(idx[start:start + batch_size]))


# ---------------------------------------------------------------------------
# training and evaluation
# ---------------------------------------------------------------------------

def build_model(encoder_cfg: EncoderConfig, num_classes: int, cfg: TrainConfig,
                num_users: int, num_products: int,
                user_init: EmbeddingMatrix | None = None,
                product_init: EmbeddingMatrix | None = None,
                init_state: dict[str, np.ndarray] | None = None) -> SentimentModel:
    """Seeded model construction with optional warm starts.

    init_state entries are loaded wherever the name and shape match the new
    model (used to carry the pretrained encoder, and the text-only head when
    continuing a text-only run). Entity matrices come from the caches for
    cache-backed variants and from a standard-normal draw for vanilla_up,
    matching the reference magnitude the scaling heuristic targets.
    """
    variant = Variant(cfg.variant)
    torch.manual_seed(cfg.seed)
    model = SentimentModel(encoder_cfg, num_classes, variant,
                           num_users, num_products, cfg.cross_heads)
    enc.init_weights(model)
    if variant.uses_entities:
        state_has_matrices = bool(init_state) and "user_matrix" in init_state
        if variant.uses_cache and not state_has_matrices:
            if user_init is None or product_init is None:
                raise ValueError(f"variant {variant.value} requires embedding caches")
            with torch.no_grad():
                model.user_matrix.copy_(torch.from_numpy(user_init.matrix.astype(np.float32)))
                model.product_matrix.copy_(torch.from_numpy(product_init.matrix.astype(np.float32)))
        elif not variant.uses_cache:
            gen = torch.Generator().manual_seed(cfg.seed)
            with torch.no_grad():
                model.user_matrix.normal_(0.0, 1.0, generator=gen)
                model.product_matrix.normal_(0.0, 1.0, generator=gen)
    if init_state:
        _load_compatible(model, init_state)
    return model


def _load_compatible(model: SentimentModel, state: dict[str, np.ndarray]) -> int:
    """Copy entries whose name and size match; shape-mismatched heads stay fresh."""
    loaded = 0
    own = model.state_dict()
    with torch.no_grad():
        for name, arr in state.items():
            if name not in own:
                continue
            target = own[name]
            values = torch.from_numpy(np.asarray(arr, dtype=np.float32))
            if values.numel() != target.numel():
                continue
            target.copy_(values.reshape(target.shape))
            loaded += 1
    model.load_state_dict(own)
    return loaded


@dataclass
class TrainResult:
    state: dict[str, np.ndarray]        # best-dev weights
    final_state: dict[str, np.ndarray]  # weights after the last step
    history: RunHistory
    encoder_cfg: EncoderConfig
    config: TrainConfig


def train(corpus: Corpus, vocab: Vocab, encoder_cfg: EncoderConfig, cfg: TrainConfig,
          user_init: EmbeddingMatrix | None = None,
          product_init: EmbeddingMatrix | None = None,
          init_state: dict[str, np.ndarray] | None = None,
          early_stop: bool = True,
          dev_split: str = "dev",
          data: Tensorized | None = None) -> TrainResult:
    cfg.validate()
    if not corpus.train:
        raise ValueError("corpus has no training split")
    if data is None:
        data = tensorize(corpus, vocab, cfg.max_len)
    if dev_split not in data.splits:
        raise ValueError(f"corpus has no {dev_split} split")
    model = build_model(encoder_cfg, corpus.num_classes, cfg,
                        len(data.user_ids), len(data.product_ids),
                        user_init, product_init, init_state)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate,
                                 betas=(0.9, 0.999), eps=1e-8)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5F0F]))
    train_data = data.splits["train"]
    stopper = EarlyStopper(cfg.patience)
    history = RunHistory()
    best_state: dict[str, np.ndarray] | None = None
    start = time.perf_counter()

    def snapshot() -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}

    def dev_eval() -> Metrics:
        metrics, _ = evaluate_tensorized(model, data.splits[dev_split], cfg.batch_size)
        return metrics

    stop = False
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        order = shuffle_rng.permutation(len(train_data))
        total_loss, seen, step = 0.0, 0, 0
        for batch in _batches(len(train_data), cfg.batch_size, order):
            logits = model(train_data.ids[batch], train_data.pad_mask[batch],
                           train_data.user_idx[batch], train_data.product_idx[batch])
            loss = cross_entropy_loss(logits, train_data.labels0[batch])
            if not math.isfinite(loss.item()):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} step {step} "
                    f"(variant={cfg.variant}, lr={cfg.learning_rate})")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total_loss += loss.item() * len(batch)
            seen += len(batch)
            step += 1
            if cfg.eval_every and step % cfg.eval_every == 0:
                improved = stopper.update(dev_eval().accuracy)
                if improved:
                    best_state, history.best_epoch = snapshot(), epoch
                model.train()
                if early_stop and stopper.should_stop:
                    stop = True
                    break
        metrics = dev_eval()
        history.records.append(EpochRecord(epoch, total_loss / max(seen, 1),
                                           metrics.accuracy, metrics.rmse,
                                           time.perf_counter() - start))
        if not stop:
            if stopper.update(metrics.accuracy):
                best_state, history.best_epoch = snapshot(), epoch
            stop = early_stop and stopper.should_stop
        history.stopped_epoch = epoch
        if stop:
            break
    final_state = snapshot()
    if best_state is None:  # no evaluation improved (cannot happen: first always does)
        best_state = final_state
    return TrainResult(best_state, final_state, history, encoder_cfg, cfg)


def evaluate_tensorized(model: SentimentModel, split: TensorizedSplit,
                        batch_size: int = 64) -> tuple[Metrics, list[tuple[str, int, int]]]:
    """Full-split pass in eval mode; returns metrics and (id, gold, pred) rows."""
    model.eval()
    preds = np.zeros(len(split), dtype=np.int64)
    with torch.no_grad():
        for batch in _batches(len(split), batch_size):
            logits = model(split.ids[batch], split.pad_mask[batch],
                           split.user_idx[batch], split.product_idx[batch])
            preds[batch.numpy()] = predict_classes(logits.numpy())
    gold = split.labels0.numpy() + 1
    rows = list(zip(split.review_ids, gold.tolist(), preds.tolist()))
    return compute_metrics(preds, gold), rows


def evaluate(result_state: dict[str, np.ndarray], encoder_cfg: EncoderConfig,
             cfg: TrainConfig, corpus: Corpus, vocab: Vocab, split: str,
             user_init: EmbeddingMatrix | None = None,
             product_init: EmbeddingMatrix | None = None,
             ) -> tuple[Metrics, list[tuple[str, int, int]]]:
    """Rebuild the model from stored weights and evaluate one split."""
    data = tensorize(corpus, vocab, cfg.max_len)
    if split not in data.splits:
        raise ValueError(f"corpus has no {split} split")
    model = build_model(encoder_cfg, corpus.num_classes, cfg,
                        len(data.user_ids), len(data.product_ids),
                        user_init, product_init, result_state)
    return evaluate_tensorized(model, data.splits[split])
