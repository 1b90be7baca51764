"""Three-stage training pipeline: plain-VAE pretraining, retrieval database
construction, retrieval-augmented training, plus evaluation and ablations.

Stages communicate only through files (checkpoint, database dump), so a run
can be killed and resumed at any stage boundary. All randomness is derived
from the run seed plus structural indices (step, item), which makes per-step
losses independent of batch grouping and runs bit-reproducible.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .autograd import Adam, Tape, backward, clip_grad_norm, zero_grads
from .checkpoint import load_checkpoint, save_checkpoint
from .data import SPECIALS, CorpusPair, Tokenizer, ingest
from .errors import ConfigError, DivergenceError, InputError
from .metrics import (MetricReport, active_units, corpus_bleu, dist_n,
                      perplexity, rouge_l, self_bleu)
from .mixture import mixture_mean_latents, regavae_loss
from .model import ElboBreakdown, ModelConfig, VaeModel
from .retrieval import build_database, load_database, maybe_refresh, save_database


@dataclass
class RunConfig:
    # model sizes
    L: int = 4
    d_h: int = 128
    heads: int = 4
    d_z: int = 32
    r_rank: int = 4
    max_seq_len: int = 128
    # training
    learning_rate: float = 5e-5
    batch_size: int = 8
    stage1_epochs: int = 10
    stage3_epochs: int = 15
    beta_warmup_frac: float = 0.3
    beta_cycles: int = 0  # 0 = one ramp; >0 = cyclical annealing over stage 1
    kl_floor: float = 0.0  # free bits (nats/document); 0 disables
    grad_clip: float = 1.0
    seed: int = 0
    # retrieval
    k_neighbors: int = 5
    refresh_interval: int = 500
    exclude_self: bool = True
    # data / paths
    corpus: str = ""
    eval_corpus: str = ""
    checkpoint_dir: str = "checkpoints"
    database_path: str = "retrieval.db"
    metrics_path: str = "metrics.json"
    min_count: int = 1
    # generation protocol for diversity metrics
    top_k_sample: int = 10
    max_gen_len: int = 24

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.k_neighbors < 0:
            raise ConfigError(f"k_neighbors must be >= 0, got {self.k_neighbors}")
        if self.kl_floor < 0:
            raise ConfigError(f"kl_floor must be >= 0, got {self.kl_floor}")
        if self.d_z < 1:
            raise ConfigError(f"d_z must be >= 1, got {self.d_z}")

    @staticmethod
    def from_file(path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as f:
            try:
                raw = json.load(f)
            except json.JSONDecodeError as e:
                raise InputError(f"{path}: invalid JSON config ({e.msg})") from e
        known = {f.name for f in RunConfig.__dataclass_fields__.values()}
        unknown = set(raw) - known
        if unknown:
            raise InputError(f"{path}: unknown config keys {sorted(unknown)}")
        return RunConfig(**raw)

    def echo(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)
            f.write("\n")

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, n_layers=self.L, d_h=self.d_h,
                           n_heads=self.heads, d_z=self.d_z, r_rank=self.r_rank,
                           max_seq_len=self.max_seq_len)


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(list(key))


@dataclass
class TrainResult:
    model: VaeModel
    step_losses: list[ElboBreakdown] = field(default_factory=list)
    global_step: int = 0
    global_epoch: int = 0


def beta_at(step: int, warmup_steps: int, cycle_steps: int = 0) -> float:
    """KL-annealing weight: linear ramp from 0 to 1 over warmup_steps, then
    held at 1. With cycle_steps > 0 the ramp restarts every cycle (cyclical
    annealing), which re-establishes latent usage each cycle and keeps the
    posterior from collapsing on small corpora."""
    if warmup_steps <= 0:
        return 1.0
    if cycle_steps > 0:
        step = step % cycle_steps
    return min(1.0, step / warmup_steps)


def steps_per_epoch(n_pairs: int, batch_size: int) -> int:
    return math.ceil(n_pairs / batch_size)


def train_loop(model: VaeModel, pairs: list[CorpusPair], cfg: RunConfig, loss_fn,
               epochs: int, warmup_steps: int, cycle_steps: int = 0,
               start_step: int = 0, start_epoch: int = 0,
               before_batch=None) -> TrainResult:
    """Shared step loop. loss_fn(pair, corpus_index, beta, rng) returns
    (ElboBreakdown, scalar loss tensor); the batch optimizes the mean."""
    optimizer = Adam(model.params, lr=cfg.learning_rate)
    result = TrainResult(model, [], start_step, start_epoch)
    step = start_step
    for ep in range(epochs):
        order = _rng(cfg.seed, 11, start_epoch + ep).permutation(len(pairs))
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo:lo + cfg.batch_size]
            if before_batch is not None:
                before_batch(step)
            beta = beta_at(step, warmup_steps, cycle_steps)
            zero_grads(model.params)
            with Tape() as tape:
                total = None
                recon = kl = 0.0
                for idx in batch:
                    rng = _rng(cfg.seed, 12, step, int(idx))
                    bd, loss = loss_fn(pairs[int(idx)], int(idx), beta, rng)
                    recon += bd.recon_nll
                    kl += bd.kl
                    total = loss if total is None else total + loss
                total = total * (1.0 / len(batch))
                if not np.isfinite(total.item()):
                    raise DivergenceError(f"non-finite loss at step {step}")
                backward(total, tape)
            clip_grad_norm(model.params, cfg.grad_clip)
            optimizer.step()
            result.step_losses.append(
                ElboBreakdown(recon / len(batch), kl / len(batch), beta)
            )
            step += 1
    result.global_step = step
    result.global_epoch = start_epoch + epochs
    return result


# ---------------------------------------------------------------------------
# Pipeline stages
# ---------------------------------------------------------------------------

def _load_corpus(cfg: RunConfig, vocab: list[str] | None = None):
    tok = None
    if vocab is not None:
        tok = Tokenizer([w for w in vocab if w not in SPECIALS])
    pairs, tok = ingest(cfg.corpus, tokenizer=tok, min_count=cfg.min_count)
    return pairs, tok


def beta_schedule(cfg: RunConfig, n_pairs: int) -> tuple[int, int]:
    """(warmup_steps, cycle_steps) for this run, derived from the stage-1
    length: one ramp over beta_warmup_frac of stage 1, or beta_cycles cycles
    each ramping over beta_warmup_frac of the cycle."""
    total = steps_per_epoch(n_pairs, cfg.batch_size) * cfg.stage1_epochs
    if cfg.beta_cycles > 0:
        cycle = math.ceil(total / cfg.beta_cycles)
        return max(1, int(round(cfg.beta_warmup_frac * cycle))), cycle
    return int(round(cfg.beta_warmup_frac * total)), 0


def run_stage1(cfg: RunConfig, out_dir) -> tuple[str, TrainResult]:
    """Plain-VAE pretraining; writes <out_dir>/stage1.ckpt."""
    cfg.echo(out_dir)
    pairs, tok = _load_corpus(cfg)
    model = VaeModel(cfg.model_config(tok.vocab_size), seed=cfg.seed)
    warmup, cycle = beta_schedule(cfg, len(pairs))

    def loss_fn(pair, idx, beta, rng):
        return model.elbo_step(pair.source_tokens, pair.target_tokens, beta, rng,
                               kl_floor=cfg.kl_floor)

    result = train_loop(model, pairs, cfg, loss_fn, cfg.stage1_epochs, warmup, cycle)
    path = os.path.join(out_dir, "stage1.ckpt")
    save_checkpoint(path, model, tok.words, extra={
        "stage": 1, "global_step": result.global_step,
        "global_epoch": result.global_epoch,
        "warmup_steps": warmup, "cycle_steps": cycle,
    })
    return path, result


def run_stage2(cfg: RunConfig, checkpoint_path, out_dir) -> str:
    """Build and dump the retrieval database from the training corpus."""
    cfg.echo(out_dir)
    model, vocab, extra = load_checkpoint(checkpoint_path)
    pairs, _ = _load_corpus(cfg, vocab=vocab)
    db = build_database(pairs, model, refresh_interval=cfg.refresh_interval,
                        snapshot_step=extra.get("global_step", 0))
    path = os.path.join(out_dir, os.path.basename(cfg.database_path))
    save_database(db, path)
    return path


def run_stage3(cfg: RunConfig, checkpoint_path, database_path, out_dir) -> tuple[str, TrainResult]:
    """Retrieval-augmented training with periodic index refresh; writes
    <out_dir>/stage3.ckpt and the refreshed database."""
    cfg.echo(out_dir)
    model, vocab, extra = load_checkpoint(checkpoint_path)
    pairs, _ = _load_corpus(cfg, vocab=vocab)
    start_step = extra.get("global_step", 0)
    start_epoch = extra.get("global_epoch", 0)
    warmup, cycle = beta_schedule(cfg, len(pairs))
    warmup = extra.get("warmup_steps", warmup)
    cycle = extra.get("cycle_steps", cycle)
    state = {"db": load_database(database_path) if cfg.k_neighbors > 0 else None}

    def before_batch(step):
        if state["db"] is not None:
            state["db"] = maybe_refresh(state["db"], step, model)

    def loss_fn(pair, idx, beta, rng):
        exclude = idx if cfg.exclude_self else None
        return regavae_loss(model, pair.source_tokens, pair.target_tokens,
                            state["db"], cfg.k_neighbors, beta, rng,
                            exclude_id=exclude, kl_floor=cfg.kl_floor)

    result = train_loop(model, pairs, cfg, loss_fn, cfg.stage3_epochs, warmup, cycle,
                        start_step=start_step, start_epoch=start_epoch,
                        before_batch=before_batch)
    path = os.path.join(out_dir, "stage3.ckpt")
    save_checkpoint(path, model, vocab, extra={
        "stage": 3, "global_step": result.global_step,
        "global_epoch": result.global_epoch,
        "warmup_steps": warmup, "cycle_steps": cycle,
    })
    if state["db"] is not None:
        final_db = maybe_refresh(state["db"], result.global_step, model)
        save_database(final_db, os.path.join(out_dir, os.path.basename(cfg.database_path)))
    return path, result


def continue_stage1(cfg: RunConfig, checkpoint_path, epochs: int, out_dir) -> tuple[str, TrainResult]:
    """Resume plain-VAE training from a checkpoint (the k=0 reference loop)."""
    cfg.echo(out_dir)
    model, vocab, extra = load_checkpoint(checkpoint_path)
    pairs, _ = _load_corpus(cfg, vocab=vocab)
    warmup, cycle = beta_schedule(cfg, len(pairs))
    warmup = extra.get("warmup_steps", warmup)
    cycle = extra.get("cycle_steps", cycle)

    def loss_fn(pair, idx, beta, rng):
        return model.elbo_step(pair.source_tokens, pair.target_tokens, beta, rng,
                               kl_floor=cfg.kl_floor)

    result = train_loop(model, pairs, cfg, loss_fn, epochs, warmup, cycle,
                        start_step=extra.get("global_step", 0),
                        start_epoch=extra.get("global_epoch", 0))
    path = os.path.join(out_dir, "stage1_continued.ckpt")
    save_checkpoint(path, model, vocab, extra={
        "stage": 1, "global_step": result.global_step,
        "global_epoch": result.global_epoch,
        "warmup_steps": warmup, "cycle_steps": cycle,
    })
    return path, result


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def run_eval(cfg: RunConfig, checkpoint_path, database_path, out_dir) -> MetricReport:
    """Held-out perplexity, diversity metrics over one generation per held-out
    source (top-k sampling, fixed seed), active units, BLEU/Rouge-L against the
    held-out targets."""
    cfg.echo(out_dir)
    model, vocab, _ = load_checkpoint(checkpoint_path)
    tok = Tokenizer([w for w in vocab if w not in SPECIALS])
    eval_pairs, _ = ingest(cfg.eval_corpus, tokenizer=tok)
    db = None
    k = 0
    if database_path is not None and cfg.k_neighbors > 0:
        db = load_database(database_path)
        k = cfg.k_neighbors
    ppl = perplexity(model, eval_pairs, db=db, k=k)
    au = active_units(model, eval_pairs)
    generations = []
    for i, pair in enumerate(eval_pairs):
        z_layers = mixture_mean_latents(model, pair.source_tokens, db, k)
        gen = model.generate(z_layers, cfg.max_gen_len, strategy="top_k",
                             rng=_rng(cfg.seed, 13, i), top_k=cfg.top_k_sample)
        generations.append(gen if gen else [0])
    report = MetricReport(
        ppl=ppl,
        self_bleu=self_bleu(generations),
        dist2=dist_n(generations, 2),
        au=au,
        bleu=corpus_bleu(generations, [p.target_tokens for p in eval_pairs]),
        rouge_l=float(np.mean([
            rouge_l(g, p.target_tokens) for g, p in zip(generations, eval_pairs)
        ])),
    )
    base = os.path.join(out_dir, os.path.splitext(os.path.basename(cfg.metrics_path))[0])
    with open(base + ".json", "w", encoding="utf-8") as f:
        f.write(report.to_json())
    with open(base + ".txt", "w", encoding="utf-8") as f:
        f.write(report.to_text())
    return report


def run_pipeline(cfg: RunConfig, out_dir) -> tuple[str, MetricReport]:
    """Full three-stage run plus evaluation; returns (stage3 ckpt, report)."""
    ckpt1, _ = run_stage1(cfg, out_dir)
    if cfg.k_neighbors > 0:
        db_path = run_stage2(cfg, ckpt1, out_dir)
        ckpt3, _ = run_stage3(cfg, ckpt1, db_path, out_dir)
        db_path = os.path.join(out_dir, os.path.basename(cfg.database_path))
    else:
        ckpt3, _ = continue_stage1(cfg, ckpt1, cfg.stage3_epochs, out_dir)
        db_path = None
    report = run_eval(cfg, ckpt3, db_path, out_dir)
    return ckpt3, report


def run_ablation(cfg: RunConfig, out_dir, sweep: list[int] | None = None) -> dict[str, MetricReport]:
    """Train/evaluate the full model, the k=0 ablation, and a neighbor-count
    sweep under a shared seed; writes a side-by-side table."""
    import dataclasses

    variants = {"full": cfg.k_neighbors, "k=0": 0}
    for k in (sweep or []):
        variants[f"k={k}"] = k
    reports: dict[str, MetricReport] = {}
    for name, k in variants.items():
        sub = dataclasses.replace(cfg, k_neighbors=k)
        sub_dir = os.path.join(out_dir, name.replace("=", ""))
        _, reports[name] = run_pipeline(sub, sub_dir)
    cols = ["ppl", "self_bleu", "dist2", "au", "bleu", "rouge_l"]
    lines = ["variant " + " ".join(cols)]
    for name, rep in reports.items():
        vals = [getattr(rep, c) for c in cols]
        lines.append(name + " " + " ".join(
            f"{v:.4f}" if isinstance(v, float) else str(v) for v in vals))
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "ablation.txt"), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    return reports
