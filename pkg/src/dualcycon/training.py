"""Stratified k-fold training, checkpoint selection by validation MCC and
fold-averaged evaluation.
"""

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .engine import Adam, Checkpoint, load_checkpoint, save_checkpoint
from .errors import ClassTooSmall, MissingCheckpoint, NumericFailure
from .metrics import classification_report, confusion, mcc
from .model import DualCyConNet, ModelConfig, compute_losses, make_batch, predict
from .signal_io import MeasurementFeatures

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "l_cls", "l_ct", "l_cf", "l_total", "val_mcc")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 64
    epochs: int = 50
    folds: int = 5
    lam: float = 1.0
    seed: int = 0
    threshold: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.99
    cosine: bool = False

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")

    def to_dict(self):
        return asdict(self)


@dataclass
class FoldResult:
    fold: int
    history: List[dict]
    best_val_mcc: float
    best_epoch: int
    checkpoint_path: Optional[str] = None
    best_state: dict = field(default=None, repr=False)
    model: DualCyConNet = field(default=None, repr=False)


def stratified_kfold(labels, k=5, seed=0) -> List[np.ndarray]:
    """Split indices into ``k`` folds with near-equal class proportions.

    Each class is shuffled with a seeded generator and dealt round-robin;
    dealing of the second class continues where the first stopped so fold
    sizes differ by at most one.
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(k)]
    start = 0
    for cls in (1, 0):
        idx = np.flatnonzero(labels == cls)
        if idx.size < k:
            raise ClassTooSmall(f"class {cls} has {idx.size} members, need >= {k}")
        idx = rng.permutation(idx)
        for j, i in enumerate(idx):
            folds[(start + j) % k].append(int(i))
        start = (start + idx.size) % k
    return [np.sort(np.array(f, dtype=int)) for f in folds]


def predict_features(model: DualCyConNet, features: Sequence[MeasurementFeatures],
                     batch_size=64, return_heads=False):
    """Eval-mode p_final (and optionally per-head probabilities) per measurement."""
    finals, heads = [], []
    for lo in range(0, len(features), batch_size):
        out = model(make_batch(features[lo:lo + batch_size]), training=False)
        finals.append(predict(out))
        heads.append(np.stack([out.probs[k] for k in out.logits], axis=1))
    p = np.concatenate(finals) if finals else np.zeros(0)
    if return_heads:
        return p, (np.concatenate(heads) if heads else np.zeros((0, 0)))
    return p


def evaluate_loss(model, features, lam=1.0, batch_size=64):
    """Eval-mode L_total averaged over ``features``."""
    total = 0.0
    for lo in range(0, len(features), batch_size):
        chunk = features[lo:lo + batch_size]
        b = make_batch(chunk)
        total += compute_losses(model(b, training=False), b.labels, lam).l_total * len(chunk)
    return total / len(features)


def make_checkpoint(model: DualCyConNet, cfg: TrainConfig, fold, extra=None) -> Checkpoint:
    meta = {"model": model.cfg.to_dict(), "train": cfg.to_dict()}
    meta.update(extra or {})
    return Checkpoint(model.state_dict(), model.optimizer_state(), cfg.seed, fold, meta)


def model_from_checkpoint(ckpt) -> DualCyConNet:
    if not isinstance(ckpt, Checkpoint):
        path = os.fspath(ckpt)
        if not os.path.isfile(path):
            raise MissingCheckpoint(f"checkpoint not found: {path}")
        ckpt = load_checkpoint(path)
    model = DualCyConNet(ModelConfig(**ckpt.meta["model"]), seed=ckpt.seed)
    model.load_state_dict(ckpt.blobs)
    if ckpt.optimizer:
        model.load_optimizer_state(ckpt.optimizer)
    return model


def _fold_seed(seed, fold):
    return int(np.random.SeedSequence([seed, fold + 1]).generate_state(1)[0])


def train_fold(train_idx, val_idx, features: Sequence[MeasurementFeatures], cfg: TrainConfig,
               model_cfg: ModelConfig = None, out_dir=None, fold=0, meta=None) -> FoldResult:
    """Train one fold; checkpoint whenever validation MCC improves.

    Equal validation MCC counts as an improvement only if the validation
    loss drops.  With an empty ``val_idx`` the training set doubles as
    validation set.  ``meta`` is stored in every checkpoint written.
    """
    train_idx = np.asarray(train_idx, dtype=int)
    val_idx = np.asarray(val_idx, dtype=int)
    if np.intersect1d(train_idx, val_idx).size:
        raise ValueError("train and validation indices overlap")
    model_cfg = model_cfg or ModelConfig()
    seed = _fold_seed(cfg.seed, fold)
    model = DualCyConNet(model_cfg, seed=seed)
    opt = Adam(model.param_list(), cfg.lr, cfg.beta1, cfg.beta2)
    rng = np.random.default_rng(seed)
    train = [features[i] for i in train_idx]
    val = [features[i] for i in val_idx] if val_idx.size else train
    val_labels = np.array([f.label for f in val])

    ckpt_path = os.path.join(out_dir, f"fold{fold}.pdck") if out_dir else None
    history, best, best_loss, best_epoch, best_state = [], -math.inf, math.inf, 0, None
    for epoch in range(1, cfg.epochs + 1):
        if cfg.cosine:
            opt.lr = cfg.lr * 0.5 * (1 + math.cos(math.pi * (epoch - 1) / cfg.epochs))
        order = rng.permutation(len(train))
        sums = np.zeros(4)
        for lo in range(0, len(order), cfg.batch_size):
            chunk = [train[i] for i in order[lo:lo + cfg.batch_size]]
            batch = make_batch(chunk)
            losses = compute_losses(model(batch, training=True), batch.labels, cfg.lam)
            if not np.isfinite(losses.l_total):
                raise NumericFailure(
                    f"fold {fold} epoch {epoch}: non-finite loss "
                    f"(cls={losses.l_cls}, ct={losses.l_ct}, cf={losses.l_cf})")
            opt.zero_grad()
            losses.total.backward()
            opt.step()
            sums += len(chunk) * np.array([losses.l_cls, losses.l_ct, losses.l_cf, losses.l_total])
        sums /= len(train)
        val_mcc = mcc(confusion(predict_features(model, val, cfg.batch_size),
                                val_labels, cfg.threshold))
        history.append(dict(zip(HISTORY_FIELDS, (epoch, *sums.tolist(), val_mcc))))
        log.info("fold %d epoch %d l_total=%.5f val_mcc=%.4f", fold, epoch, sums[3], val_mcc)
        if val_mcc >= best:
            val_loss = evaluate_loss(model, val, cfg.lam, cfg.batch_size)
            if val_mcc > best or val_loss < best_loss:
                best, best_loss, best_epoch = val_mcc, val_loss, epoch
                best_state = model.state_dict()
                if ckpt_path:
                    save_checkpoint(ckpt_path, make_checkpoint(
                        model, cfg, fold,
                        dict(meta or {}, epoch=epoch, val_mcc=val_mcc, val_loss=val_loss)))
    if out_dir:
        write_history(os.path.join(out_dir, f"fold{fold}_history.csv"), history)
    return FoldResult(fold, history, best, best_epoch, ckpt_path, best_state, model)


def write_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def read_history(path):
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def _run_fold(args):
    train_idx, val_idx, features, cfg, model_cfg, out_dir, fold, meta = args
    res = train_fold(train_idx, val_idx, features, cfg, model_cfg, out_dir, fold, meta)
    res.model = None
    return res


def cross_validate(features: Sequence[MeasurementFeatures], cfg: TrainConfig,
                   model_cfg: ModelConfig = None, out_dir=None, workers=1,
                   meta=None) -> List[FoldResult]:
    """Train ``cfg.folds`` models on stratified folds of ``features``."""
    labels = [f.label for f in features]
    folds = stratified_kfold(labels, cfg.folds, cfg.seed)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    jobs = []
    for k, val_idx in enumerate(folds):
        train_idx = np.sort(np.concatenate([f for j, f in enumerate(folds) if j != k]))
        jobs.append((train_idx, val_idx, features, cfg, model_cfg, out_dir, k, meta))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_run_fold, jobs))
    return [_run_fold(j) for j in jobs]


def evaluate(checkpoints, features: Sequence[MeasurementFeatures], threshold=0.5,
             batch_size=64) -> dict:
    """Average p_final over fold models and score it.

    ``checkpoints`` holds paths, :class:`Checkpoint` objects or models.
    """
    if not checkpoints:
        raise MissingCheckpoint("evaluation needs at least one checkpoint")
    labels = np.array([f.label for f in features])
    per_model, per_fold = [], []
    for ck in checkpoints:
        model = ck if isinstance(ck, DualCyConNet) else model_from_checkpoint(ck)
        p = predict_features(model, features, batch_size)
        per_model.append(p)
        per_fold.append(classification_report(confusion(p, labels, threshold)))
    p_final = np.mean(per_model, axis=0)
    report = classification_report(confusion(p_final, labels, threshold))
    report.update(n_models=len(per_model), threshold=threshold, n_samples=len(features),
                  per_fold=per_fold)
    return report, p_final


def write_report(path, report):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
