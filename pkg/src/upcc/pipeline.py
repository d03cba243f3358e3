"""Experiment orchestration: phases, artifact caching, reports.

A pipeline run is three phases per seed: (A) a short text-only pretrain that
stands in for a pretrained encoder, (B) one-time precomputation of the entity
matrices from that frozen encoder, (C) training the requested variant with
the encoder warm-started from phase A. The text-only variant is phase A
continued to convergence and skips precomputation.

Stage artifacts (phase-A checkpoints, entity caches, final checkpoints) are
written under <out>/cache keyed by a content hash of their exact inputs, so
an interrupted command resumes where it stopped and sweep settings share
work. All canonical outputs (report.json, report.csv, caches, checkpoints)
are byte-identical across re-runs with the same config and seeds; wall-clock
timings go to <out>/logs only.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .corpus import Corpus, load_tsv
from .encoder import EncoderConfig, save_checkpoint, load_checkpoint, state_hash
from .entity_init import EmbeddingMatrix, is_stale, load_cache, precompute, save_cache
from .model import Variant
from .tokenizer import Vocab, build_vocab
from .trainer import (Metrics, TrainConfig, TrainResult, Tensorized, build_model,
                      evaluate_tensorized, tensorize, train)

VARIANT_LADDER = (Variant.TEXT_ONLY, Variant.VANILLA_UP,
                  Variant.TEXTUAL_INIT, Variant.FULL_CROSS_CONTEXT)


class PipelineError(Exception):
    pass


def corpus_digest(corpus: Corpus) -> str:
    digest = hashlib.sha256()
    for split in ("train", "dev", "test"):
        for r in corpus.splits[split]:
            digest.update(f"{split}\x1f{r.review_id}\x1f{r.user_id}\x1f"
                          f"{r.product_id}\x1f{r.label}\x1f{r.text}\x1e".encode("utf-8"))
    return digest.hexdigest()


def load_corpus(cfg: ExperimentConfig, base: Path | None = None) -> Corpus:
    base = base or Path(".")
    d = cfg.data

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    dev = resolve(d.dev_path) if d.dev_path else None
    test = resolve(d.test_path) if d.test_path else None
    return load_tsv(resolve(d.train_path), d.num_classes,
                    dev if dev and dev.exists() else None,
                    test if test and test.exists() else None)


def encoder_config(cfg: ExperimentConfig, vocab: Vocab, max_len: int | None = None) -> EncoderConfig:
    e = cfg.encoder
    return EncoderConfig(hidden_size=e.hidden_size, layers=e.layers, heads=e.heads,
                         ffn_dim=e.ffn_dim, max_len=max_len or cfg.tokenizer.max_len,
                         vocab_size=vocab.size, dropout_rate=e.dropout_rate)


def train_config(cfg: ExperimentConfig, variant: str, seed: int,
                 max_len: int | None = None, **overrides) -> TrainConfig:
    t = cfg.train
    base = dict(variant=variant, learning_rate=t.learning_rate, batch_size=t.batch_size,
                max_epochs=t.max_epochs, patience=t.patience, seed=seed,
                max_len=max_len or cfg.tokenizer.max_len, eval_every=t.eval_every,
                cross_heads=cfg.model.cross_heads)
    base.update(overrides)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# cached stages
# ---------------------------------------------------------------------------

def _key(*parts) -> str:
    return hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).hexdigest()[:16]


def _fresh(path: Path, key: str) -> bool:
    sidecar = path.with_suffix(path.suffix + ".json")
    if not (path.exists() and sidecar.exists()):
        return False
    try:
        return json.loads(sidecar.read_text()).get("stage_key") == key
    except (json.JSONDecodeError, OSError):
        return False


@dataclass
class Stage:
    """Shared per-seed context: corpus, vocab, phase-A encoder, entity caches."""
    cfg: ExperimentConfig
    corpus: Corpus
    vocab: Vocab
    workdir: Path
    corpus_key: str

    def __post_init__(self):
        (self.workdir / "cache").mkdir(parents=True, exist_ok=True)
        (self.workdir / "logs").mkdir(parents=True, exist_ok=True)
        self._tensorized: dict[int, Tensorized] = {}

    def data(self, max_len: int) -> Tensorized:
        if max_len not in self._tensorized:
            self._tensorized[max_len] = tensorize(self.corpus, self.vocab, max_len)
        return self._tensorized[max_len]

    def _phase_a_key(self, seed: int) -> str:
        c = self.cfg
        return _key("phase_a", self.corpus_key, c.tokenizer, c.encoder,
                    c.train.learning_rate, c.train.batch_size, c.train.phase_a_epochs, seed)

    def phase_a(self, seed: int) -> tuple[dict[str, np.ndarray], bytes]:
        """Pretrained text-only weights (final epoch) and their digest."""
        path = self.workdir / "cache" / f"phase_a_s{seed}.ckpt"
        key = self._phase_a_key(seed)
        if _fresh(path, key):
            state, _ = load_checkpoint(path)
            return state, state_hash(state)
        ecfg = encoder_config(self.cfg, self.vocab)
        tcfg = train_config(self.cfg, Variant.TEXT_ONLY.value, seed,
                            max_epochs=self.cfg.train.phase_a_epochs)
        result = train(self.corpus, self.vocab, ecfg, tcfg, early_stop=False,
                       data=self.data(tcfg.max_len))
        save_checkpoint(path, result.final_state,
                        {"stage_key": key, "seed": seed, "variant": tcfg.variant})
        state, _ = load_checkpoint(path)  # float32 round-trip keeps bytes canonical
        return state, state_hash(state)

    def entity_caches(self, seed: int) -> tuple[EmbeddingMatrix, EmbeddingMatrix]:
        state, digest = self.phase_a(seed)
        key = _key("embed", self._phase_a_key(seed), self.cfg.upinit)
        paths = [self.workdir / "cache" / f"{kind}_s{seed}.emb" for kind in ("user", "product")]
        if all(_fresh(p, key) for p in paths):
            user_emb, product_emb = (load_cache(p) for p in paths)
            if not (is_stale(user_emb, digest) or is_stale(product_emb, digest)):
                return user_emb, product_emb
        ecfg = encoder_config(self.cfg, self.vocab)
        tcfg = train_config(self.cfg, Variant.TEXT_ONLY.value, seed)
        model = build_model(ecfg, self.corpus.num_classes, tcfg, 1, 1, init_state=state)
        u = self.cfg.upinit
        user_emb, product_emb = precompute(
            self.corpus, model.encoder, self.vocab, tcfg.max_len, u.batch_size,
            mode=u.scale_mode, seed=u.scale_seed, encoder_hash=digest)
        for emb, path in zip((user_emb, product_emb), paths):
            save_cache(emb, path)
            with open(path.with_suffix(path.suffix + ".json"), "w") as fh:
                json.dump({"stage_key": key, "seed": seed}, fh, sort_keys=True)
        return user_emb, product_emb


@dataclass
class SeedOutcome:
    seed: int
    dev: Metrics
    test: Metrics | None
    best_epoch: int
    stopped_epoch: int

    def to_dict(self) -> dict:
        return {"seed": self.seed, "dev": self.dev.to_dict(),
                "test": self.test.to_dict() if self.test else None,
                "best_epoch": self.best_epoch, "stopped_epoch": self.stopped_epoch}


def run_variant(stage: Stage, variant: str, seed: int, label: str,
                scale_override: float | None = None,
                max_len: int | None = None,
                use_phase_a: bool = True) -> SeedOutcome:
    """Phase C for one (variant, seed): train, evaluate dev+test, dump artifacts."""
    cfg = stage.cfg
    variant = Variant(variant)
    tcfg = train_config(cfg, variant.value, seed, max_len=max_len)
    user_emb = product_emb = None
    init_state = None
    if use_phase_a:
        if max_len is not None and max_len != cfg.tokenizer.max_len:
            raise PipelineError("phase-A warm start requires the standard max_len")
        init_state, _ = stage.phase_a(seed)
    if variant.uses_cache:
        if init_state is None:
            raise PipelineError("cache-backed variants need the phase-A encoder")
        user_emb, product_emb = stage.entity_caches(seed)
        if scale_override is not None:
            user_emb = user_emb.with_scale(scale_override)
            product_emb = product_emb.with_scale(scale_override)
    result = train(stage.corpus, stage.vocab, encoder_config(cfg, stage.vocab, tcfg.max_len),
                   tcfg, user_init=user_emb, product_init=product_emb,
                   init_state=init_state, data=stage.data(tcfg.max_len))
    data = stage.data(tcfg.max_len)
    model = build_model(result.encoder_cfg, stage.corpus.num_classes, tcfg,
                        len(data.user_ids), len(data.product_ids),
                        user_emb, product_emb, result.state)
    dev, dev_rows = evaluate_tensorized(model, data.splits["dev"])
    test = None
    if "test" in data.splits:
        test, _ = evaluate_tensorized(model, data.splits["test"])

    ckpt = stage.workdir / "cache" / f"final_{label}_s{seed}.ckpt"
    save_checkpoint(ckpt, result.state, {
        "variant": variant.value, "seed": seed, "config_hash": cfg.hash(),
        "label": label, "best_epoch": result.history.best_epoch})
    with open(stage.workdir / "logs" / f"history_{label}_s{seed}.jsonl", "w") as fh:
        for row in result.history.to_jsonl_rows():
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    with open(stage.workdir / "logs" / f"preds_{label}_s{seed}.tsv", "w") as fh:
        for rid, gold, pred in dev_rows:
            fh.write(f"{rid}\t{gold}\t{pred}\n")
    return SeedOutcome(seed, dev, test, result.history.best_epoch,
                       result.history.stopped_epoch)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def _aggregate(outcomes: list[SeedOutcome]) -> dict:
    def stats(vals):
        arr = np.asarray(vals, dtype=np.float64)
        return float(arr.mean()), float(arr.std())

    dev_acc = stats([o.dev.accuracy for o in outcomes])
    dev_rmse = stats([o.dev.rmse for o in outcomes])
    row = {
        "dev_accuracy_mean": dev_acc[0], "dev_accuracy_std": dev_acc[1],
        "dev_rmse_mean": dev_rmse[0], "dev_rmse_std": dev_rmse[1],
        "seeds": [o.seed for o in outcomes],
        "per_seed": [o.to_dict() for o in outcomes],
    }
    if all(o.test is not None for o in outcomes):
        test_acc = stats([o.test.accuracy for o in outcomes])
        test_rmse = stats([o.test.rmse for o in outcomes])
        row.update(test_accuracy_mean=test_acc[0], test_accuracy_std=test_acc[1],
                   test_rmse_mean=test_rmse[0], test_rmse_std=test_rmse[1])
    return row


def write_report(report: dict, outdir: Path, timing: dict | None = None) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=1)
        fh.write("\n")
    columns = ["setting", "dev_accuracy_mean", "dev_accuracy_std",
               "dev_rmse_mean", "dev_rmse_std",
               "test_accuracy_mean", "test_accuracy_std",
               "test_rmse_mean", "test_rmse_std"]
    extras = sorted({k for row in report["rows"] for k, v in row.items()
                     if k not in columns and k not in ("per_seed", "seeds")
                     and isinstance(v, (int, float, str, bool))})
    with open(outdir / "report.csv", "w", encoding="utf-8") as fh:
        fh.write(",".join(columns + extras) + "\n")
        for row in report["rows"]:
            cells = [str(row.get("setting", ""))]
            for c in columns[1:] + extras:
                v = row.get(c, "")
                cells.append(repr(v) if isinstance(v, float) else str(v))
            fh.write(",".join(cells) + "\n")
    if timing is not None:
        with open(outdir / "timing.json", "w", encoding="utf-8") as fh:
            json.dump(timing, fh, sort_keys=True, indent=1)
            fh.write("\n")


def _report_skeleton(name: str, cfg: ExperimentConfig, seeds) -> dict:
    return {"experiment": name, "config_hash": cfg.hash(), "seeds": list(seeds), "rows": []}


def make_stage(cfg: ExperimentConfig, corpus: Corpus, workdir: Path) -> Stage:
    return Stage(cfg, corpus, build_vocab(corpus, cfg.tokenizer.min_freq),
                 Path(workdir), corpus_digest(corpus))


# ---------------------------------------------------------------------------
# experiment drivers
# ---------------------------------------------------------------------------

def run_pipeline(cfg: ExperimentConfig, corpus: Corpus, workdir: Path,
                 seeds=None, variant: str | None = None) -> dict:
    seeds = list(seeds or cfg.experiment.seeds)
    variant = variant or cfg.model.variant
    stage = make_stage(cfg, corpus, workdir)
    t0 = time.perf_counter()
    outcomes = [run_variant(stage, variant, s, variant) for s in seeds]
    report = _report_skeleton("pipeline", cfg, seeds)
    report["rows"].append({"setting": variant, **_aggregate(outcomes)})
    write_report(report, Path(workdir), {"wall_time_s": time.perf_counter() - t0})
    return report


def run_ablation(cfg: ExperimentConfig, corpus: Corpus, workdir: Path, seeds=None) -> dict:
    seeds = list(seeds or cfg.experiment.seeds)
    stage = make_stage(cfg, corpus, workdir)
    t0 = time.perf_counter()
    report = _report_skeleton("ablation", cfg, seeds)
    for variant in VARIANT_LADDER:
        outcomes = [run_variant(stage, variant.value, s, variant.value) for s in seeds]
        report["rows"].append({"setting": variant.value, **_aggregate(outcomes)})
    write_report(report, Path(workdir), {"wall_time_s": time.perf_counter() - t0})
    return report


def run_scale_sweep(cfg: ExperimentConfig, corpus: Corpus, workdir: Path, seeds=None) -> dict:
    """Grid of shared scale factors plus each matrix's own heuristic factor."""
    seeds = list(seeds or cfg.experiment.seeds)
    stage = make_stage(cfg, corpus, workdir)
    t0 = time.perf_counter()
    report = _report_skeleton("scale_sweep", cfg, seeds)
    variant = Variant.FULL_CROSS_CONTEXT.value
    for factor in cfg.experiment.scale_grid():
        label = f"f{factor:g}"
        outcomes = [run_variant(stage, variant, s, label, scale_override=factor)
                    for s in seeds]
        report["rows"].append({"setting": label, "scale_factor": factor,
                               "heuristic_flag": False, **_aggregate(outcomes)})
    outcomes = [run_variant(stage, variant, s, "heuristic") for s in seeds]
    user_emb, _ = stage.entity_caches(seeds[0])
    report["rows"].append({"setting": "heuristic", "scale_factor": user_emb.scale_factor,
                           "heuristic_flag": True, **_aggregate(outcomes)})
    write_report(report, Path(workdir), {"wall_time_s": time.perf_counter() - t0})
    return report


def run_downsample_sweep(cfg: ExperimentConfig, corpus: Corpus, workdir: Path,
                         seeds=None) -> dict:
    """Per fraction: resample user histories, rebuild caches, train both the
    full and the random-init variants; rows carry their accuracy gap."""
    from .corpus import downsample_user_reviews

    seeds = list(seeds or cfg.experiment.seeds)
    t0 = time.perf_counter()
    report = _report_skeleton("downsample_sweep", cfg, seeds)
    for fraction in cfg.experiment.fractions:
        sampled = (corpus if fraction == 1.0 else
                   downsample_user_reviews(corpus, fraction, cfg.experiment.downsample_seed))
        subdir = Path(workdir) / f"frac{fraction:g}"
        stage = make_stage(cfg, sampled, subdir)
        rows = {}
        for variant in (Variant.FULL_CROSS_CONTEXT, Variant.VANILLA_UP):
            outcomes = [run_variant(stage, variant.value, s, f"{variant.value}_{fraction:g}")
                        for s in seeds]
            rows[variant.value] = _aggregate(outcomes)
        gap = (rows[Variant.FULL_CROSS_CONTEXT.value]["dev_accuracy_mean"]
               - rows[Variant.VANILLA_UP.value]["dev_accuracy_mean"])
        for variant_name, agg in rows.items():
            report["rows"].append({"setting": f"{variant_name}@{fraction:g}",
                                   "fraction": fraction, "accuracy_gap": gap, **agg})
    write_report(report, Path(workdir), {"wall_time_s": time.perf_counter() - t0})
    return report


def run_length_sweep(cfg: ExperimentConfig, corpus: Corpus, workdir: Path,
                     seeds=None) -> dict:
    """Text-only accuracy across maximum sequence lengths, with the share of
    dev documents longer than each length."""
    seeds = list(seeds or cfg.experiment.seeds)
    stage = make_stage(cfg, corpus, workdir)
    t0 = time.perf_counter()
    report = _report_skeleton("length_sweep", cfg, seeds)
    for max_len in cfg.experiment.length_grid:
        outcomes = [run_variant(stage, Variant.TEXT_ONLY.value, s, f"len{max_len}",
                                max_len=max_len, use_phase_a=False) for s in seeds]
        n_raw = stage.data(max_len).splits["dev"].n_raw_tokens
        truncated = float(np.mean(n_raw > (max_len - 1)) * 100.0)
        report["rows"].append({"setting": f"len{max_len}", "max_len": max_len,
                               "truncated_pct": truncated, **_aggregate(outcomes)})
    write_report(report, Path(workdir), {"wall_time_s": time.perf_counter() - t0})
    return report
