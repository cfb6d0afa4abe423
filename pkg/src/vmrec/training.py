"""Training loop for the structured triplet loss (TL) and fusion-head BCE modes."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .features import subsample_train
from .loss import TripletLossConfig, bce_loss, structured_loss
from .model import REFERENCE_HEAD_WIDTHS, embed, fusion_score, init_model, model_backward
from .numerics import AdamState, RngStream, adam_step
from .retrieval import evaluate_recall

log = logging.getLogger(__name__)

MODES = ("TL", "BCE")
HISTORY_COLUMNS = (
    "epoch", "train_loss", "val_loss",
    "r1_mv", "r10_mv", "r25_mv", "r1_vm", "r10_vm", "r25_vm",
    "seconds",
)
# values quoted by the reference training setup
REFERENCE_LR = 1e-6
REFERENCE_BATCH_SIZE = 1000
REFERENCE_DROPOUT = 0.5
REFERENCE_BCE_EPOCHS = 15000

# rng child keys
_KEY_INIT, _KEY_EPOCH, _KEY_VAL, _KEY_SUBSAMPLE = 0, 1, 2, 3


class TrainingDiverged(RuntimeError):
    """The loss became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "TL"
    lr: float = REFERENCE_LR
    batch_size: int = REFERENCE_BATCH_SIZE
    max_epochs: int = REFERENCE_BCE_EPOCHS
    patience: int = 10  # evaluations without improvement; 0 disables early stopping
    dropout_p: float = REFERENCE_DROPOUT
    seed: int = 0
    loss: TripletLossConfig = field(default_factory=TripletLossConfig)
    val_every: int = 1

    def __post_init__(self):
        object.__setattr__(self, "mode", str(self.mode).upper())
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if not self.lr >= 0 or not math.isfinite(self.lr):
            raise ValueError(f"lr must be a finite non-negative number, got {self.lr}")
        if self.max_epochs < 0 or self.patience < 0 or self.val_every < 1:
            raise ValueError("max_epochs and patience must be >= 0 and val_every >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    @property
    def early_stopping(self):
        return self.mode == "TL" and self.patience > 0

    def to_dict(self):
        d = asdict(self)
        d["loss"]["weights"] = list(self.loss.weights)
        return d

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValueError(f"unknown train config key(s): {', '.join(unknown)}")
        doc = dict(doc)
        if "loss" in doc:
            loss_doc = dict(doc["loss"])
            loss_known = {f.name for f in fields(TripletLossConfig)}
            bad = sorted(set(loss_doc) - loss_known)
            if bad:
                raise ValueError(f"unknown loss config key(s): {', '.join(bad)}")
            doc["loss"] = TripletLossConfig(**loss_doc)
        return cls(**doc)


def load_train_config(path):
    return TrainConfig.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class EvalRecord:
    epoch: int
    train_loss: float
    val_loss: float
    recall: dict  # (direction, k) -> percent
    seconds: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def append(self, rec):
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("history epochs must increase")
        self.records.append(rec)

    def write_csv(self, path, timing=False):
        """One row per evaluation. Without ``timing`` the seconds column is left
        blank so identical runs give identical files."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_COLUMNS)
            for r in self.records:
                rec = [
                    r.recall.get((d, k), float("nan"))
                    for d in ("music_to_video", "video_to_music")
                    for k in (1, 10, 25)
                ]
                w.writerow(
                    [r.epoch, repr(r.train_loss), repr(r.val_loss)]
                    + [repr(v) for v in rec]
                    + [repr(r.seconds) if timing else ""]
                )


@dataclass(frozen=True)
class BceBatch:
    music_rows: np.ndarray
    video_rows: np.ndarray
    labels: np.ndarray


def make_bce_batch(batch, rng):
    """Matched pairs labelled 1 plus as many mismatched pairs labelled 0.

    ``batch`` is a batch size or a sequence of clips; rows index into it.
    Negatives pair music ``i`` with video ``perm[i]`` for a random derangement.
    """
    b = batch if isinstance(batch, (int, np.integer)) else len(batch)
    if b < 2:
        raise ValueError(f"BCE batches need at least 2 clips, got {b}")
    rows = np.arange(b)
    perm = rng.derangement(b)
    return BceBatch(
        np.concatenate([rows, rows]),
        np.concatenate([rows, perm]),
        np.concatenate([np.ones(b), np.zeros(b)]),
    )


def batch_loss_and_grads(model, X_M, X_V, config, mode, rng):
    """Loss, parameter gradients and updated batchnorm buffers for one batch.

    Returns ``(loss, grads, buffers, components)``.
    """
    p = config.dropout_p if mode == "train" else 0.0
    E_M, c_m = embed(X_M, "music", model, mode, p, rng.child(0))
    E_V, c_v = embed(X_V, "video", model, mode, p, rng.child(1))
    buffers = {**model.buffers, **c_m.buffers, **c_v.buffers}
    if config.mode == "TL":
        res = structured_loss(E_M, E_V, X_M, X_V, config.loss, rng.child(2))
        grads = model_backward({"music": res.dE_M, "video": res.dE_V}, {"music": c_m, "video": c_v}, model)
        return res.total, grads, buffers, res.components
    bb = make_bce_batch(E_M.shape[0], rng.child(3))
    scores, c_h = fusion_score(E_M, E_V, model, mode, p, rng.child(4), bb.music_rows, bb.video_rows)
    loss, dscores = bce_loss(scores, bb.labels)
    grads = model_backward({"head": dscores}, {"music": c_m, "video": c_v, "head": c_h}, model)
    return loss, grads, buffers, {"bce": loss}


def train_epoch(model, train_set, config, opt_state, rng, epoch=0):
    """One pass over shuffled full batches; the ragged tail batch is dropped.

    Returns ``(model, opt_state, mean_batch_loss)``.
    """
    n = len(train_set)
    bs = config.batch_size
    if n < bs:
        raise ValueError(f"{n} training pairs cannot fill a batch of {bs}")
    order = rng.permutation(n)
    losses = []
    for b in range(n // bs):
        idx = order[b * bs:(b + 1) * bs]
        loss, grads, buffers, comps = batch_loss_and_grads(
            model, train_set.music[idx], train_set.video[idx], config, "train", rng.child(b)
        )
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}: components {comps}")
        params, opt_state = adam_step(model.params, grads, opt_state)
        model = model.with_params(params, buffers)
        losses.append(loss)
    return model, opt_state, float(np.mean(losses))


def validation_loss(model, val_set, config):
    """Infer-mode loss on the whole validation split with a fixed mining stream."""
    rng = RngStream(config.seed).child(_KEY_VAL)
    loss, _, _, _ = batch_loss_and_grads(model, val_set.music, val_set.video, config, "infer", rng)
    return loss


def train(model, dataset, config):
    """Train on the dataset's train split; returns ``(model, TrainHistory)``.

    TL mode with ``patience > 0`` stops once the validation loss has not
    improved for ``patience`` consecutive evaluations and returns the model
    with the lowest validation loss seen. Otherwise all ``max_epochs`` run and
    the final model is returned.
    """
    train_set = dataset.subset("train")
    val_set = dataset.subset("val")
    if config.early_stopping and len(val_set) < 2:
        raise ValueError("early stopping needs a validation split of at least 2 pairs")
    history = TrainHistory()
    if config.max_epochs == 0:
        return model, history
    rng = RngStream(config.seed)
    opt = AdamState.for_params(model.params, config.lr)
    best_model, best_loss, stale = model, math.inf, 0
    start = time.perf_counter()
    for epoch in range(1, config.max_epochs + 1):
        model, opt, train_loss = train_epoch(model, train_set, config, opt, rng.child(_KEY_EPOCH, epoch), epoch)
        if epoch % config.val_every and epoch != config.max_epochs:
            continue
        val_loss, recall = float("nan"), {}
        if len(val_set) >= 2:
            val_loss = validation_loss(model, val_set, config)
            scorer = "fusion" if config.mode == "BCE" else "distance"
            reports = evaluate_recall(model, val_set.clip_ids, val_set.music, val_set.video, (1, 10, 25), scorer)
            recall = {(d, k): rep.recall[k] for d, rep in reports.items() for k in rep.ks}
        history.append(EvalRecord(epoch, train_loss, val_loss, recall, time.perf_counter() - start))
        log.info("epoch %d train %.6g val %.6g", epoch, train_loss, val_loss)
        if not config.early_stopping:
            continue
        if val_loss < best_loss:
            best_model, best_loss, stale = model, val_loss, 0
        else:
            stale += 1
            if stale >= config.patience:
                log.info("early stop at epoch %d, best val loss %.6g", epoch, best_loss)
                break
    return (best_model if config.early_stopping else model), history


def fresh_model(music_spec, video_spec, config, head_widths=REFERENCE_HEAD_WIDTHS):
    """Initial model for a run; BCE mode gets a fusion head. Seeded by ``config.seed``."""
    rng = RngStream(config.seed).child(_KEY_INIT)
    return init_model(music_spec, video_spec, config.mode == "BCE", rng, head_widths=head_widths)


def subsample_for_config(dataset, config, train_size):
    return subsample_train(dataset, train_size, RngStream(config.seed).child(_KEY_SUBSAMPLE))


def train_on_subsample(model, dataset, config, train_size):
    """Train on ``train_size`` randomly chosen train pairs (seeded by ``config.seed``)."""
    return train(model, subsample_for_config(dataset, config, train_size), config)
