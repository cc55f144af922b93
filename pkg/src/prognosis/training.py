"""Batch assembly, the training loop and evaluation.

Data loading: each record's augmentation RNG is derived from
(seed, epoch, record index), so batches do not depend on worker scheduling.
``PROGNOSIS_WORKERS`` sets the loader thread count (default 1); results come
back in submission order.
"""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import metrics
from .checkpoint import Checkpoint, CheckpointError, check_config
from .config import RunConfig
from .datapipe import AugmentationPlan, AugStep, ExamRecord, ImageLoader, augment
from .diffcore import AdamState, Tensor, adam_step, backward, no_grad
from .losses import LabelMask, LossTerms, MtlParams, loss_terms, mtl_loss, total_loss, total_mtl_loss
from .model import ModelConfig, PrognosisModel, PrognosisOutput

MISSING = -1
WORKERS_ENV = "PROGNOSIS_WORKERS"


class NonFiniteLossError(RuntimeError):
    pass


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def labels_of(records: Sequence[ExamRecord]) -> LabelMask:
    stages = np.stack([r.stage_labels for r in records])
    prog = np.stack([r.progression_labels for r in records])
    return LabelMask(stages[:, 0], stages[:, 1:], prog)


def train_plan(cfg: RunConfig) -> AugmentationPlan:
    size = cfg.model.image_height
    if not cfg.augment.enabled:
        return AugmentationPlan.disabled(size)
    a = cfg.augment
    return AugmentationPlan(size, [
        AugStep("center_crop", 1.0, {"fraction": 1.0}),
        AugStep("resize", 1.0, {"ratio": a.resize_ratio}),
        AugStep("gaussian_noise", 0.5, {"sigma": a.noise_sigma}),
        AugStep("rotation", 1.0, {"degrees": [-a.rotation_degrees, a.rotation_degrees]}),
        AugStep("random_crop", 1.0, {}),
        AugStep("gamma", 0.5, {"range": [a.gamma_low, a.gamma_high]}),
    ])


def eval_plan(cfg: RunConfig) -> AugmentationPlan:
    plan = train_plan(cfg)
    return plan.eval_plan() if plan.steps else plan


class BatchAssembler:
    """Turns record indices into model-ready arrays."""

    def __init__(self, records: Sequence[ExamRecord], model_cfg: ModelConfig, seed: int,
                 loader: Optional[ImageLoader] = None, workers: Optional[int] = None):
        self.records = records
        self.cfg = model_cfg
        self.seed = seed
        self.loader = loader or ImageLoader()
        self.workers = worker_count() if workers is None else workers
        self._pool = ThreadPoolExecutor(self.workers) if self.workers > 1 else None

    def _one(self, idx: int, epoch: int, plan: AugmentationPlan) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, epoch, idx]))
        img = self.loader(self.records[idx].image)
        return augment(img, plan, rng)

    def images(self, idx: Sequence[int], epoch: int, plan: AugmentationPlan) -> np.ndarray:
        jobs = [int(i) for i in idx]
        if self._pool is None:
            imgs = [self._one(i, epoch, plan) for i in jobs]
        else:
            imgs = list(self._pool.map(lambda i: self._one(i, epoch, plan), jobs))
        x = np.stack(imgs)[:, None, :, :]
        return x.astype(self.cfg.np_dtype, copy=False)

    def clinical(self, idx: Sequence[int]) -> Optional[np.ndarray]:
        if not self.cfg.use_clinical:
            return None
        rows = []
        for i in idx:
            c = self.records[int(i)].clinical
            if c is None or c.shape[0] != self.cfg.clinical_dim:
                raise ValueError(f"record {int(i)} lacks a clinical vector of length {self.cfg.clinical_dim}")
            rows.append(c)
        return np.stack(rows).astype(self.cfg.np_dtype)

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()


def check_compatible(records: Sequence[ExamRecord], cfg: ModelConfig) -> None:
    if not records:
        raise ValueError("no records to train or evaluate on")
    K = records[0].K
    if any(r.K != K for r in records):
        raise ValueError("records disagree on the number of horizons")
    if K != cfg.K:
        raise ValueError(f"data has {K} horizons but the model expects K={cfg.K}")
    top = max(int(r.stage_labels.max()) for r in records)
    if top >= cfg.n_prognosis_classes:
        raise ValueError(f"data has stage class {top} but the model has "
                         f"{cfg.n_prognosis_classes} classes")


@dataclass
class Predictions:
    diag: np.ndarray          # [N, C]
    prognosis: np.ndarray     # [N, K, C]
    progression: np.ndarray   # [N, K, 2]
    attention: Optional[list] = None  # per layer [N, heads, T, T]


# metrics

def _safe(fn, *args):
    try:
        v = fn(*args)
    except metrics.EmptyInputError:
        return None
    except ValueError:
        # e.g. ROC-AUC with a single class present
        return None
    return None if v is None or not math.isfinite(v) else float(v)


def horizon_metrics(pred: Predictions, labels: LabelMask) -> tuple[dict, list[dict]]:
    diag = {
        "ba": _safe(metrics.balanced_accuracy, metrics.predicted_classes(pred.diag), labels.baseline),
        "acc": _safe(metrics.accuracy, metrics.predicted_classes(pred.diag), labels.baseline),
        "mse": _safe(metrics.mse_ordinal, pred.diag, labels.baseline),
        "ece": _safe(metrics.multiclass_ece, pred.diag, labels.baseline),
    }
    rows = []
    for k in range(labels.K):
        d, y = pred.prognosis[:, k], labels.stages[:, k]
        q, z = pred.progression[:, k], labels.progression[:, k]
        qc = metrics.predicted_classes(q)
        rows.append({
            "horizon": k + 1,
            "n_prognosis": int((y != MISSING).sum()),
            "n_progression": int((z != MISSING).sum()),
            "prognosis_ba": _safe(metrics.balanced_accuracy, metrics.predicted_classes(d), y),
            "prognosis_acc": _safe(metrics.accuracy, metrics.predicted_classes(d), y),
            "prognosis_mse": _safe(metrics.mse_ordinal, d, y),
            "prognosis_mse_argmax": _safe(metrics.mse_ordinal, d, y, True),
            "prognosis_ece": _safe(metrics.multiclass_ece, d, y),
            "progression_ba": _safe(metrics.balanced_accuracy, qc, z),
            "progression_f1": _safe(metrics.f1_binary, qc, z),
            "progression_roc_auc": _safe(metrics.roc_auc, q[:, 1], z),
            "progression_ap": _safe(metrics.average_precision, q[:, 1], z),
            "progression_ece": _safe(metrics.multiclass_ece, q, z),
        })
    return diag, rows


def selection_ba(diag: dict, rows: list[dict]) -> float:
    """Model-selection score: mean BA over the current-stage and per-horizon stage tasks."""
    vals = [diag["ba"]] + [r["prognosis_ba"] for r in rows]
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else 0.0


class _TermAccumulator:
    """Accumulates label-weighted CE sums so a full-set masked loss can be built batch by batch."""

    def __init__(self, K: int):
        self.sums = np.zeros(1 + 2 * K)
        self.counts = np.zeros(1 + 2 * K, dtype=np.int64)

    def add(self, terms: LossTerms):
        for j, t in enumerate(terms.all_terms()):
            if not t.empty:
                self.sums[j] += float(t.value.data) * t.count
                self.counts[j] += t.count

    def means(self) -> list[Optional[float]]:
        return [s / c if c else None for s, c in zip(self.sums, self.counts)]


def run_config_echo(cfg: RunConfig) -> dict:
    """Config stored in checkpoints; the output location is not part of a run's identity."""
    flat = cfg.to_flat()
    flat.pop("train.out", None)
    return flat


class Trainer:
    def __init__(self, cfg: RunConfig, records: Sequence[ExamRecord], out_dir=None,
                 loader: Optional[ImageLoader] = None):
        self.cfg = cfg
        self.records = records
        self.model = PrognosisModel(cfg.model)
        self.K = cfg.model.K
        self.mtl = MtlParams.create(1 + 2 * self.K, cfg.model.np_dtype) if cfg.loss.mtl else None
        self.named = list(self.model.named_parameters())
        if self.mtl is not None:
            self.named.append(("mtl/log_sigma", self.mtl.log_sigma))
        o = cfg.optim
        self.adam = AdamState.for_params([p for _, p in self.named], lr=o.lr, beta1=o.beta1,
                                         beta2=o.beta2, eps=o.eps, weight_decay=o.weight_decay)
        self.rng = np.random.default_rng(np.random.SeedSequence([cfg.train.seed, 7]))
        self.epoch = 0
        self.batches = BatchAssembler(records, cfg.model, cfg.train.seed, loader)
        self.out_dir = Path(out_dir) if out_dir is not None else None

    # checkpoints

    def to_checkpoint(self) -> Checkpoint:
        tensors = {}
        for i, (name, p) in enumerate(self.named):
            key = name if name.startswith("mtl/") else f"param/{name}"
            tensors[key] = p.data
            tensors[f"adam.m/{name}"] = self.adam.m[i]
            tensors[f"adam.v/{name}"] = self.adam.v[i]
        a = self.adam
        optimizer = {"lr": a.lr, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps,
                     "weight_decay": a.weight_decay, "t": a.t}
        return Checkpoint(self.cfg.model.to_dict(), tensors, self.epoch, optimizer,
                          self.rng.bit_generator.state, {"run_config": run_config_echo(self.cfg)})

    def load_checkpoint(self, ckpt: Checkpoint) -> None:
        check_config(ckpt, self.cfg.model.to_dict())
        for i, (name, p) in enumerate(self.named):
            key = name if name.startswith("mtl/") else f"param/{name}"
            if key not in ckpt.tensors:
                raise CheckpointError(f"checkpoint lacks tensor {key}")
            if ckpt.tensors[key].shape != p.shape:
                raise CheckpointError(f"tensor {key}: shape {ckpt.tensors[key].shape} != {p.shape}")
            p.data = ckpt.tensors[key].astype(p.dtype, copy=True)
            self.adam.m[i] = ckpt.tensors[f"adam.m/{name}"].copy()
            self.adam.v[i] = ckpt.tensors[f"adam.v/{name}"].copy()
        self.adam.t = int(ckpt.optimizer["t"])
        self.epoch = int(ckpt.epoch)
        self.rng.bit_generator.state = ckpt.rng_state

    def _save(self, name: str) -> None:
        if self.out_dir is not None:
            self.to_checkpoint().save(self.out_dir / name)

    # loss

    def _loss(self, out: PrognosisOutput, labels: LabelMask) -> Tensor:
        if self.mtl is not None:
            return total_mtl_loss(out, labels, self.mtl)
        return total_loss(out, labels, self.cfg.loss.weights())

    def _loss_from_means(self, means: list) -> Optional[float]:
        if all(m is None for m in means):
            return None
        if self.mtl is not None:
            return float(mtl_loss([None if m is None else Tensor(np.asarray(m)) for m in means],
                                  MtlParams(Tensor(self.mtl.log_sigma.data.astype(np.float64)))).data)
        w = self.cfg.loss.weights()
        K = self.K
        coef = [w.w1] + [w.w2 / K] * K + [w.w3 / K] * K
        return float(sum(c * m for c, m in zip(coef, means) if m is not None))

    # training

    def train_epoch(self, train_idx: np.ndarray) -> dict:
        cfg = self.cfg
        plan = train_plan(cfg)
        order = np.asarray(train_idx)[self.rng.permutation(len(train_idx))]
        bs = cfg.train.batch_size
        loss_sum, n_seen = 0.0, 0
        diag_pred, diag_true = [], []
        params = [p for _, p in self.named]
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            x = self.batches.images(idx, self.epoch, plan)
            labels = labels_of([self.records[i] for i in idx])
            out = self.model(x, self.batches.clinical(idx), train=True, rng=self.rng)
            loss = self._loss(out, labels)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NonFiniteLossError(
                    f"non-finite training loss {value} at epoch {self.epoch + 1}, batch {start // bs} "
                    f"(records {idx[:4].tolist()}...); last good checkpoint kept")
            if loss.requires_grad:
                backward(loss, inputs=params)
                grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
                adam_step(params, grads, self.adam)
                for p in params:
                    p.grad = None
            loss_sum += value * len(idx)
            n_seen += len(idx)
            diag_pred.append(metrics.predicted_classes(out.diag_probs()))
            diag_true.append(labels.baseline)
        self.epoch += 1
        ba = _safe(metrics.balanced_accuracy, np.concatenate(diag_pred), np.concatenate(diag_true))
        return {"train_loss": loss_sum / max(n_seen, 1), "train_diag_ba": ba}

    def evaluate(self, idx: Sequence[int], record_attention: bool = False) -> tuple[dict, Predictions]:
        """Loss and metrics on ``idx`` in eval mode (no dropout, deterministic geometry)."""
        idx = np.asarray(idx)
        if idx.size == 0:
            raise ValueError("cannot evaluate on an empty set")
        plan = eval_plan(self.cfg)
        bs = self.cfg.train.eval_batch_size
        acc = _TermAccumulator(self.K)
        diag, prog, flag, attn = [], [], [], []
        with no_grad():
            for start in range(0, len(idx), bs):
                b = idx[start:start + bs]
                x = self.batches.images(b, 0, plan)
                out = self.model(x, self.batches.clinical(b), train=False, record_attention=record_attention)
                acc.add(loss_terms(out, labels_of([self.records[i] for i in b])))
                diag.append(out.diag_probs())
                prog.append(out.prognosis_probs())
                flag.append(out.progression_probs())
                if record_attention:
                    attn.append(out.attention)
        att = None
        if record_attention:
            att = [np.concatenate([a[layer] for a in attn]) for layer in range(len(attn[0]))]
        pred = Predictions(np.concatenate(diag), np.concatenate(prog), np.concatenate(flag), att)
        labels = labels_of([self.records[i] for i in idx])
        d, rows = horizon_metrics(pred, labels)
        report = {"n": int(idx.size), "loss": self._loss_from_means(acc.means()),
                  "ba": selection_ba(d, rows), "diag": d, "horizons": rows}
        return report, pred

    def fit(self, train_idx, valid_idx, log=None) -> dict:
        """Train with early stopping on validation BA (or loss, see ``train.select``).

        Returns the final evaluation row.

        Writes ``best.ckpt`` (best validation BA), ``last.ckpt`` (end of the
        latest finished epoch) and one JSON line per epoch to ``log``.
        """
        cfg = self.cfg.train
        train_idx, valid_idx = np.asarray(train_idx), np.asarray(valid_idx)
        if train_idx.size == 0:
            raise ValueError("training set is empty")
        if valid_idx.size == 0:
            raise ValueError("validation set is empty")
        emit = log or (lambda row: None)
        # higher is better for both: BA as is, loss negated
        score = (lambda r: r["ba"]) if cfg.select == "ba" else (lambda r: -r["loss"])
        best, stale = -math.inf, 0
        self._save("last.ckpt")
        if cfg.epochs == 0:
            self._save("best.ckpt")
        best_state = self.to_checkpoint()
        for _ in range(cfg.epochs):
            stats = self.train_epoch(train_idx)
            report, _ = self.evaluate(valid_idx)
            emit({"kind": "epoch", "epoch": self.epoch, **stats,
                  "valid_loss": report["loss"], "valid_ba": report["ba"]})
            self._save("last.ckpt")
            if score(report) > best:
                best, stale = score(report), 0
                best_state = self.to_checkpoint()
                self._save("best.ckpt")
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
        self.load_checkpoint(best_state)
        report, _ = self.evaluate(valid_idx)
        row = {"kind": "eval", "split": "valid", "epoch": self.epoch, **report}
        emit(row)
        return row

    def close(self):
        self.batches.close()


class JsonlLog:
    def __init__(self, path, extra: Optional[dict] = None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("")
        self.extra = extra or {}

    def __call__(self, row: dict) -> None:
        with open(self.path, "a") as fh:
            fh.write(json.dumps({**self.extra, **row}, sort_keys=True, allow_nan=False) + "\n")


def read_jsonl(path) -> list[dict]:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise ValueError(f"{path}:{lineno}: bad JSON line ({exc.msg})") from None
    return rows
