"""Training loop, loss assembly, schedules, and experiment orchestration.

One epoch follows the in-place recursion exactly: for each mini-batch,
forward, loss against the currently stored targets (sharpened by tau),
gradient step, then fold the batch predictions back into the target state.
Targets consumed by a batch are always the pre-update values; predictions fed
to the state are the same forward outputs used for the loss, captured before
the optimizer step, with no gradient connection.

Every random draw flows from named integer streams derived from
(run seed, epoch, stream tag), so runs are bit-reproducible and resuming from
a saved state at an epoch boundary replays the identical remainder.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict, replace as dc_replace
from pathlib import Path

import numpy as np

from . import analysis
from .data import Dataset, augment_strong, augment_weak
from .models import Model, backward, forward, init_model, save_checkpoint
from .numerics import (PROB_FLOOR, adam_state, entropy, kl_div,
                       optimizer_step, sgd_state, soft_cross_entropy)
from .targets import StrategyConfig, TargetStrategy, sharpen

RECORD_SCHEMA_VERSION = 1

# rng stream tags
_SHUFFLE, _DROPOUT, _WEAK, _STRONG_BASE = 0, 1, 2, 3

__all__ = [
    "BsdPlusConfig",
    "TrainConfig",
    "RunRecord",
    "TrainingDiverged",
    "lr_at",
    "train_epoch",
    "contrastive_term",
    "evaluate",
    "run_experiment",
    "run_layout",
]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class BsdPlusConfig:
    enabled: bool = False
    lam: float = 2.0          # contrastive weight
    views: int = 2            # strong views per sample
    weak_jitter: float = 0.05
    strong_jitter: float = 0.2
    erase_frac: float = 0.3

    def __post_init__(self):
        if self.enabled and self.views < 1:
            raise ValueError("bsd_plus needs at least one strong view")
        if self.lam < 0.0:
            raise ValueError("contrastive weight must be >= 0")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    optimizer: str = "adam"   # "adam" | "sgd"
    lr: float = 0.01
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    schedule: str = "constant"  # "constant" | "cosine"
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    tau: float = 1.0
    bsd_plus: BsdPlusConfig = field(default_factory=BsdPlusConfig)
    eval_every: int = 5

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.tau <= 0.0:
            raise ValueError("tau must be > 0 (1 disables sharpening)")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")


@dataclass
class RunRecord:
    seed: int
    config: dict
    rows: list = field(default_factory=list)
    wall_clock_s: float = 0.0


def lr_at(schedule, base_lr, epoch, total_epochs):
    """Learning rate for a 0-based epoch index."""
    if schedule == "constant":
        return base_lr
    return base_lr * (1.0 + np.cos(np.pi * epoch / total_epochs)) / 2.0


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return sgd_state(cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    return adam_state(cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps,
                      weight_decay=cfg.weight_decay)


def _epoch_rng(seed, epoch, tag):
    return np.random.default_rng([seed, epoch, tag])


def _kl_logit_grad(strong_probs, anchor_probs, floor=PROB_FLOOR):
    """d KL(p, q) / d logits(p) for constant q: p * (ln p - ln q - KL(p, q))."""
    lp = np.log(np.maximum(strong_probs, floor))
    lq = np.log(np.maximum(anchor_probs, floor))
    diff = lp - lq
    row_kl = (strong_probs * diff).sum(axis=1, keepdims=True)
    return strong_probs * (diff - row_kl)


def contrastive_term(model: Model, sample, strong_views, anchor_pred, lam):
    """Consistency loss for one sample: (lam / m) * sum_j KL(f(view_j), anchor).

    The anchor prediction is treated as a constant. Returns the scalar loss
    and the summed parameter gradients across views. The model is run in its
    current mode; pass an eval-mode model for deterministic checks.
    """
    m = len(strong_views)
    if m == 0:
        raise ValueError("need at least one strong view")
    anchor = np.asarray(anchor_pred, dtype=np.float64)[None, :]
    total = 0.0
    grads = None
    for view in strong_views:
        probs, cache = forward(model, np.asarray(view, dtype=np.float64)[None, :])
        total += float(kl_div(probs[0], anchor[0]))
        dlogits = (lam / m) * _kl_logit_grad(probs, anchor)
        g = backward(model, cache, dlogits)
        if grads is None:
            grads = g
        else:
            for name in g:
                grads[name] += g[name]
    return lam / m * total, grads


def _augmented_views(samples, cfg: TrainConfig, seed, epoch):
    """Weak view plus m strong views for a batch; identity when bsd_plus is off."""
    plus = cfg.bsd_plus
    if not plus.enabled:
        return samples, []
    weak = augment_weak(samples, _epoch_rng(seed, epoch, _WEAK), jitter_sigma=plus.weak_jitter)
    strong = [
        augment_strong(samples, _epoch_rng(seed, epoch, _STRONG_BASE + j),
                       jitter_sigma=plus.strong_jitter, erase_frac=plus.erase_frac)
        for j in range(plus.views)
    ]
    return weak, strong


def train_epoch(model: Model, dataset: Dataset, strategy: TargetStrategy,
                opt_state, cfg: TrainConfig, epoch, seed):
    """Run one epoch (1-based ``epoch``); returns epoch metrics."""
    if strategy.labels.shape[0] != dataset.n:
        raise ValueError("target state and dataset sizes are misaligned")
    n, k = dataset.n, dataset.k
    model.train()
    lr = lr_at(cfg.schedule, cfg.lr, epoch - 1, cfg.epochs)
    perm = _epoch_rng(seed, epoch, _SHUFFLE).permutation(n)
    dropout_rng = _epoch_rng(seed, epoch, _DROPOUT)
    loss_sum = 0.0
    for start in range(0, n, cfg.batch_size):
        idx = perm[start:start + cfg.batch_size]
        bsz = idx.shape[0]
        raw = dataset.samples[idx]
        weak, strong_views = _augmented_views(raw, cfg, seed, epoch)

        try:
            probs, cache = forward(model, weak, dropout_rng)
        except ValueError as exc:
            if "non-finite" in str(exc):
                raise TrainingDiverged(
                    f"non-finite activations at epoch {epoch}, batch starting {start} "
                    f"(seed {seed}): {exc}") from exc
            raise
        targets = strategy.targets(idx, epoch)
        sharp = sharpen(targets, cfg.tau)
        batch_loss = float(soft_cross_entropy(sharp, probs).sum() / (bsz * k))
        dlogits = (probs - sharp) / (bsz * k)
        grads = backward(model, cache, dlogits)

        if strong_views:
            scale = cfg.bsd_plus.lam / (cfg.bsd_plus.views * bsz)
            for view in strong_views:
                s_probs, s_cache = forward(model, view, dropout_rng)
                batch_loss += float(scale * kl_div(s_probs, probs).sum())
                s_grads = backward(model, s_cache, scale * _kl_logit_grad(s_probs, probs))
                for name in s_grads:
                    grads[name] += s_grads[name]

        if not np.isfinite(batch_loss):
            raise TrainingDiverged(
                f"non-finite loss at epoch {epoch}, batch starting {start} (seed {seed})")
        optimizer_step(model.params, grads, opt_state, lr=lr)
        strategy.update(idx, probs)
        loss_sum += batch_loss * bsz

    target_entropy = float(np.mean(entropy(strategy.current_targets(epoch))))
    return {
        "epoch": epoch,
        "lr": float(lr),
        "train_loss": loss_sum / n,
        "mean_target_entropy": target_entropy,
        "mean_evidence": strategy.mean_evidence(),
    }


def evaluate(model: Model, dataset: Dataset):
    """Eval-mode predictions plus accuracy/ECE/NLL on the active labels."""
    mode = model.mode
    model.eval()
    preds, _ = forward(model, dataset.samples)
    model.mode = mode
    return {
        "preds": preds,
        "acc": analysis.accuracy(preds, dataset.labels),
        "ece": analysis.ece(preds, dataset.labels),
        "nll": analysis.nll(preds, dataset.labels),
    }


# ---------------------------------------------------------------------------
# Persistence

def run_layout(run_dir):
    run_dir = Path(run_dir)
    return {
        "root": run_dir,
        "config": run_dir / "config.resolved",
        "records": run_dir / "records",
        "checkpoints": run_dir / "checkpoints",
        "traces": run_dir / "traces",
        "reports": run_dir / "reports",
    }


def _write_blocks(path, header, blocks):
    names = list(blocks)
    header = dict(header)
    header["blocks"] = [{"name": n, "shape": list(np.asarray(blocks[n]).shape)} for n in names]
    with open(path, "wb") as fh:
        fh.write(b"BSDLAB-STATE v1\n")
        fh.write(json.dumps(header, sort_keys=True).encode("ascii") + b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(blocks[n], dtype="<f8").tobytes())


def _read_blocks(path):
    with open(path, "rb") as fh:
        magic = fh.readline()
        if magic != b"BSDLAB-STATE v1\n":
            raise ValueError(f"not a training-state file: {path}")
        header = json.loads(fh.readline().decode("ascii"))
        blocks = {}
        for spec in header["blocks"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ValueError(f"truncated training state: {path}")
            blocks[spec["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return header, blocks


def _save_train_state(path, model, opt_state, strategy, epoch):
    blocks = {f"param/{n}": v for n, v in model.params.items()}
    for name, slot in opt_state.slots.items():
        if isinstance(slot, dict):
            blocks[f"opt/m/{name}"] = slot["m"]
            blocks[f"opt/v/{name}"] = slot["v"]
        else:
            blocks[f"opt/buf/{name}"] = slot
    if strategy.store is not None:
        blocks["strategy/y"] = strategy.store.y
        blocks["strategy/A"] = strategy.store.A
    if strategy.last_pred is not None:
        blocks["strategy/last_pred"] = strategy.last_pred
    if strategy.te_accum is not None:
        blocks["strategy/te_accum"] = strategy.te_accum
        blocks["strategy/te_count"] = strategy.te_count.astype(np.float64)
    header = {"epoch": epoch, "opt_step": opt_state.step}
    _write_blocks(path, header, blocks)


def _load_train_state(path, model, opt_state, strategy):
    header, blocks = _read_blocks(path)
    for name in model.params:
        model.params[name][...] = blocks[f"param/{name}"]
    opt_state.step = int(header["opt_step"])
    for name in model.params:
        if f"opt/m/{name}" in blocks:
            opt_state.slots[name] = {"m": blocks[f"opt/m/{name}"], "v": blocks[f"opt/v/{name}"]}
        elif f"opt/buf/{name}" in blocks:
            opt_state.slots[name] = blocks[f"opt/buf/{name}"]
    if strategy.store is not None:
        strategy.store.y[...] = blocks["strategy/y"]
        strategy.store.A[...] = blocks["strategy/A"]
    if strategy.last_pred is not None:
        strategy.last_pred[...] = blocks["strategy/last_pred"]
    if strategy.te_accum is not None:
        strategy.te_accum[...] = blocks["strategy/te_accum"]
        strategy.te_count[...] = blocks["strategy/te_count"].astype(np.int64)
    return int(header["epoch"])


def write_trace_csv(path, preds, labels):
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    k = preds.shape[1]
    with open(path, "w", newline="") as fh:
        fh.write("sample_id,label," + ",".join(f"p_{j}" for j in range(k)) + "\n")
        for i in range(preds.shape[0]):
            fh.write(f"{i},{int(labels[i])}," + ",".join(repr(float(v)) for v in preds[i]) + "\n")


def read_trace_csv(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        k = len(header) - 2
        labels, preds = [], []
        for line in fh:
            parts = line.strip().split(",")
            labels.append(int(parts[1]))
            preds.append([float(v) for v in parts[2:]])
    return np.asarray(preds, dtype=np.float64), np.asarray(labels, dtype=np.int64), k


def _record_line(row):
    return json.dumps(row, sort_keys=True) + "\n"


def run_single_seed(model_spec, train_set: Dataset, test_set: Dataset,
                    cfg: TrainConfig, seed, layout, config_snapshot,
                    progress=None, stop_after=None, resume=False):
    """Train one seed end to end, persisting records, traces, and checkpoints.

    ``stop_after``/``resume`` exercise the checkpoint-resume path: stopping
    after epoch e and resuming later replays epochs e+1..T identically.
    """
    t0 = time.perf_counter()
    for key in ("records", "checkpoints", "traces"):
        layout[key].mkdir(parents=True, exist_ok=True)
    trace_dir = layout["traces"] / f"seed_{seed}"
    trace_dir.mkdir(exist_ok=True)
    records_path = layout["records"] / f"seed_{seed}.jsonl"
    state_path = layout["checkpoints"] / f"seed_{seed}.state"

    spec = dc_replace(model_spec, seed=seed)
    model = init_model(spec)
    opt_state = make_optimizer(cfg)
    strategy = TargetStrategy(cfg.strategy, train_set.labels, train_set.k, cfg.epochs)

    start_epoch = 0
    if resume:
        if not state_path.exists():
            raise FileNotFoundError(f"no training state to resume at {state_path}")
        start_epoch = _load_train_state(state_path, model, opt_state, strategy)
    elif records_path.exists():
        records_path.unlink()

    record = RunRecord(seed=seed, config=config_snapshot)
    last_epoch = cfg.epochs if stop_after is None else min(stop_after, cfg.epochs)
    with open(records_path, "a") as rec_fh:
        for epoch in range(start_epoch + 1, last_epoch + 1):
            row = train_epoch(model, train_set, strategy, opt_state, cfg, epoch, seed)
            row["schema_version"] = RECORD_SCHEMA_VERSION
            if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
                ev = evaluate(model, test_set)
                row.update(test_acc=ev["acc"], test_ece=ev["ece"], test_nll=ev["nll"])
                write_trace_csv(trace_dir / f"epoch_{epoch}.csv", ev["preds"], test_set.labels)
            else:
                row.update(test_acc=None, test_ece=None, test_nll=None)
            rec_fh.write(_record_line(row))
            record.rows.append(row)
            _save_train_state(state_path, model, opt_state, strategy, epoch)
            if progress is not None:
                progress(seed, row)

    if last_epoch == cfg.epochs:
        save_checkpoint(model, layout["checkpoints"] / f"seed_{seed}_final.ckpt")
        if strategy.store is not None:
            strategy.store.save_csv(layout["records"] / f"store_seed_{seed}.csv")
    record.wall_clock_s = time.perf_counter() - t0
    return record, model


def run_experiment(model_spec, train_set: Dataset, test_set: Dataset,
                   cfg: TrainConfig, seeds, run_dir, config_snapshot=None,
                   progress=None):
    """Train every seed with independent derived streams; returns RunRecords.

    Wall-clock totals go to a sidecar timing file so every other artifact in
    the run directory is byte-reproducible from (config, seeds).
    """
    layout = run_layout(run_dir)
    layout["root"].mkdir(parents=True, exist_ok=True)
    snapshot = config_snapshot if config_snapshot is not None else {
        "train": asdict(cfg), "seeds": list(seeds)}
    records = []
    for seed in seeds:
        record, _ = run_single_seed(model_spec, train_set, test_set, cfg, seed,
                                    layout, snapshot, progress=progress)
        records.append(record)
    with open(layout["root"] / "timing.txt", "w") as fh:
        for record in records:
            fh.write(f"seed {record.seed}: {record.wall_clock_s:.3f} s\n")
    return records
