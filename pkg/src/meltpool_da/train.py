"""Three-phase training orchestrator: pre-training, adversarial domain
alignment, and classifier-discrepancy decision alignment, plus
evaluation, fine-tuning, the supervised baseline, and embedding export.

Per-step update order in the alignment phase is fixed: domain classifier
first, then the task classifiers, then the encoder, all from gradients
of one shared forward pass.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from io import StringIO

import numpy as np

from .data import DomainDataset, iter_batches, iter_paired_batches
from .errors import ContractError
from .losses import (LossValue, bce, classifier_losses_phase3, discrepancy_loss,
                     domain_loss, encoder_loss)
from .networks import ModelBundle

PHASE_IDS = {"pretrain": 1, "domain-align": 2, "decision-align": 3,
             "finetune": 4, "baseline": 5}


@dataclass
class PhaseConfig:
    phase: str
    epochs: int = 24
    batch_size: int = 64
    lam: float = 1.0
    disc_metric: str = "symmetric-bce"
    conv_tol: float | None = None      # early stop: relative change of the
    conv_window: int = 3               # monitored loss over this many epochs
    seed: int = 0
    strict: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")
        if self.lam < 0:
            raise ContractError("trade-off factor must be >= 0")


@dataclass
class MetricsRecord:
    epoch: int
    phase: str
    l_enc: float | None = None
    l_t1: float | None = None
    l_t2: float | None = None
    l_d: float | None = None
    l_dis: float | None = None
    src_val_acc: float | None = None
    tgt_val_acc: float | None = None
    tgt_test_acc: float | None = None


METRICS_HEADER = ["epoch", "phase", "L_enc", "L_t1", "L_t2", "L_d", "L_dis",
                  "src_val_acc", "tgt_val_acc", "tgt_test_acc"]


def metrics_to_csv(records: list[MetricsRecord]) -> str:
    buf = StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in records:
        w.writerow([r.epoch, r.phase] + [
            "" if v is None else repr(float(v))
            for v in (r.l_enc, r.l_t1, r.l_t2, r.l_d, r.l_dis,
                      r.src_val_acc, r.tgt_val_acc, r.tgt_test_acc)])
    return buf.getvalue()


@dataclass
class EvalResult:
    acc1: float
    acc2: float
    confusion1: np.ndarray
    confusion2: np.ndarray

    @property
    def average(self) -> float:
        return 0.5 * (self.acc1 + self.acc2)


def evaluate(bundle: ModelBundle, dataset: DomainDataset) -> EvalResult:
    """Eval-mode accuracy of both task classifiers; prediction is 1 when
    the sigmoid output is >= 0.5."""
    if dataset.labels is None:
        raise ContractError("evaluate requires a labeled dataset")
    x = dataset.images[:, None]
    e = bundle.encoder.forward(x, train=False)
    y = dataset.labels
    out = []
    for head in (bundle.task1, bundle.task2):
        pred = (head.forward(e, train=False).reshape(-1) >= 0.5).astype(np.int64)
        acc = float(np.mean(pred == y))
        conf = np.zeros((2, 2), dtype=np.int64)
        np.add.at(conf, (y, pred), 1)
        out.append((acc, conf))
    return EvalResult(out[0][0], out[1][0], out[0][1], out[1][1])


def _epoch_eval(bundle, eval_sets, rec: MetricsRecord) -> None:
    if not eval_sets:
        return
    if eval_sets.get("src_val") is not None:
        rec.src_val_acc = evaluate(bundle, eval_sets["src_val"]).average
    if eval_sets.get("tgt_val") is not None:
        rec.tgt_val_acc = evaluate(bundle, eval_sets["tgt_val"]).average
    if eval_sets.get("tgt_test") is not None:
        rec.tgt_test_acc = evaluate(bundle, eval_sets["tgt_test"]).average


def _converged(history: list[float], tol: float | None, window: int) -> bool:
    if tol is None or len(history) <= window:
        return False
    prev, cur = history[-1 - window], history[-1]
    return abs(cur - prev) / max(abs(prev), 1e-12) < tol


def _check_phase_order(bundle, expected_prior: tuple[str, ...], cfg: PhaseConfig):
    prior = bundle.meta.get("phase", "init")
    if prior not in expected_prior:
        msg = (f"{cfg.phase} started from a checkpoint in phase {prior!r} "
               f"(expected one of {expected_prior})")
        if cfg.strict:
            raise ContractError(msg)
        warnings.warn(msg)


def pretrain(bundle: ModelBundle, source_train: DomainDataset, cfg: PhaseConfig,
             eval_sets: dict | None = None,
             start_epoch: int = 0) -> list[MetricsRecord]:
    """Supervised pre-training on the labeled (augmented) source set."""
    if source_train.labels is None:
        raise ContractError("pretrain requires a labeled source training set")
    records = []
    enc_history = []
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, PHASE_IDS[cfg.phase], epoch])
        sums = np.zeros(3)
        steps = 0
        for idx in iter_batches(source_train, cfg.batch_size, rng):
            x = source_train.images[idx][:, None]
            y = source_train.labels[idx]
            e = bundle.encoder.forward(x, train=True)
            p1 = bundle.task1.forward(e, train=True)
            p2 = bundle.task2.forward(e, train=True)
            l1, dp1 = bce(p1, y, "L_t1")
            l2, dp2 = bce(p2, y, "L_t2")
            de = bundle.task1.backward(dp1) + bundle.task2.backward(dp2)
            bundle.encoder.backward(de, input_grad=False)
            bundle.opt_task1.step()
            bundle.opt_task2.step()
            bundle.opt_encoder.step()
            sums += (encoder_loss(l1, l2).value, l1.value, l2.value)
            steps += 1
        rec = MetricsRecord(start_epoch + epoch + 1, cfg.phase,
                            l_enc=sums[0] / steps, l_t1=sums[1] / steps,
                            l_t2=sums[2] / steps)
        _epoch_eval(bundle, eval_sets, rec)
        records.append(rec)
        enc_history.append(rec.l_enc)
        if _converged(enc_history, cfg.conv_tol, cfg.conv_window):
            break
    bundle.meta.update(phase=cfg.phase, epoch=start_epoch + len(records))
    return records


def domain_align(bundle: ModelBundle, source_train: DomainDataset,
                 target_train: DomainDataset, cfg: PhaseConfig,
                 eval_sets: dict | None = None,
                 start_epoch: int = 0) -> list[MetricsRecord]:
    """Adversarial alignment: the domain classifier descends the domain
    loss while the encoder ascends it (subtracted, weighted by lam)."""
    if source_train.labels is None:
        raise ContractError("domain_align requires a labeled source training set")
    if target_train.labels is not None:
        raise ContractError("domain_align requires the unlabeled target training set")
    _check_phase_order(bundle, ("pretrain", "domain-align"), cfg)
    records = []
    history = []
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, PHASE_IDS[cfg.phase], epoch])
        sums = np.zeros(4)
        steps = 0
        for sidx, tidx in iter_paired_batches(source_train, target_train,
                                              cfg.batch_size, rng):
            ns = len(sidx)
            x = np.concatenate([source_train.images[sidx],
                                target_train.images[tidx]])[:, None]
            y = source_train.labels[sidx]
            e = bundle.encoder.forward(x, train=True)
            es = e[:ns]
            d = bundle.domain.forward(e, train=True)
            ld, dds, ddt = domain_loss(d[:ns], d[ns:])
            p1 = bundle.task1.forward(es, train=True)
            p2 = bundle.task2.forward(es, train=True)
            l1, dp1 = bce(p1, y, "L_t1")
            l2, dp2 = bce(p2, y, "L_t2")

            dd_e = bundle.domain.backward(np.concatenate([dds, ddt]))
            de_task = bundle.task1.backward(dp1) + bundle.task2.backward(dp2)
            de = -cfg.lam * dd_e
            de[:ns] += de_task
            bundle.encoder.backward(de, input_grad=False)

            bundle.opt_domain.step()
            bundle.opt_task1.step()
            bundle.opt_task2.step()
            bundle.opt_encoder.step()
            sums += (encoder_loss(l1, l2, ld, cfg.lam).value,
                     l1.value, l2.value, ld.value)
            steps += 1
        rec = MetricsRecord(start_epoch + epoch + 1, cfg.phase,
                            l_enc=sums[0] / steps, l_t1=sums[1] / steps,
                            l_t2=sums[2] / steps, l_d=sums[3] / steps)
        _epoch_eval(bundle, eval_sets, rec)
        records.append(rec)
        history.append(rec.l_d)
        if _converged(history, cfg.conv_tol, cfg.conv_window):
            break
    bundle.meta.update(phase=cfg.phase, epoch=start_epoch + len(records))
    return records


def decision_align(bundle: ModelBundle, source_train: DomainDataset,
                   target_train: DomainDataset, cfg: PhaseConfig,
                   eval_sets: dict | None = None,
                   start_epoch: int = 0) -> list[MetricsRecord]:
    """Discrepancy minimization between the two task heads on target data.

    The heads descend task-loss + discrepancy; the encoder is updated from
    the task losses only (discrepancy gradients never reach it), and the
    domain loss is no longer computed.
    """
    if source_train.labels is None:
        raise ContractError("decision_align requires a labeled source training set")
    if target_train.labels is not None:
        raise ContractError("decision_align requires the unlabeled target training set")
    _check_phase_order(bundle, ("domain-align", "decision-align"), cfg)
    records = []
    history = []
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, PHASE_IDS[cfg.phase], epoch])
        sums = np.zeros(4)
        steps = 0
        for sidx, tidx in iter_paired_batches(source_train, target_train,
                                              cfg.batch_size, rng):
            ns = len(sidx)
            x = np.concatenate([source_train.images[sidx],
                                target_train.images[tidx]])[:, None]
            y = source_train.labels[sidx]
            e = bundle.encoder.forward(x, train=True)
            p1 = bundle.task1.forward(e, train=True)
            p2 = bundle.task2.forward(e, train=True)
            l1, dp1s = bce(p1[:ns], y, "L_t1")
            l2, dp2s = bce(p2[:ns], y, "L_t2")
            ldis, dd1t, dd2t = discrepancy_loss(p1[ns:], p2[ns:], cfg.disc_metric)

            zeros_t = np.zeros_like(dd1t)
            # encoder sees only the task-loss gradients (target rows zero)
            de = (bundle.task1.backward(np.concatenate([dp1s, zeros_t]))
                  + bundle.task2.backward(np.concatenate([dp2s, zeros_t])))
            # heads see task loss plus discrepancy
            bundle.task1.backward(np.concatenate([dp1s, dd1t]))
            bundle.task2.backward(np.concatenate([dp2s, dd2t]))
            bundle.encoder.backward(de, input_grad=False)

            bundle.opt_task1.step()
            bundle.opt_task2.step()
            bundle.opt_encoder.step()
            lp1, lp2 = classifier_losses_phase3(l1, l2, ldis)
            sums += (encoder_loss(l1, l2).value, l1.value, l2.value, ldis.value)
            steps += 1
        rec = MetricsRecord(start_epoch + epoch + 1, cfg.phase,
                            l_enc=sums[0] / steps, l_t1=sums[1] / steps,
                            l_t2=sums[2] / steps, l_dis=sums[3] / steps)
        _epoch_eval(bundle, eval_sets, rec)
        records.append(rec)
        history.append(rec.l_dis)
        if _converged(history, cfg.conv_tol, cfg.conv_window):
            break
    bundle.meta.update(phase=cfg.phase, epoch=start_epoch + len(records))
    return records


def finetune(bundle: ModelBundle, labeled_target: DomainDataset, cfg: PhaseConfig,
             eval_sets: dict | None = None, start_epoch: int = 0) -> list[MetricsRecord]:
    """Continue supervised (phase-1 style) updates on a small labeled target set."""
    if labeled_target.labels is None or len(labeled_target) == 0:
        raise ContractError("finetune requires a non-empty labeled target subset")
    cfg2 = PhaseConfig(phase="pretrain", epochs=cfg.epochs, batch_size=cfg.batch_size,
                       seed=cfg.seed, conv_tol=cfg.conv_tol, conv_window=cfg.conv_window)
    records = pretrain(bundle, labeled_target, cfg2, eval_sets, start_epoch)
    for r in records:
        r.phase = "finetune"
    bundle.meta.update(phase="finetune")
    return records


def train_baseline(labeled_target: DomainDataset, test_set: DomainDataset,
                   cfg: PhaseConfig, seed: int = 0,
                   lr_encoder: float = 1e-3, lr_task: float = 1e-3) -> float:
    """Supervised-only comparison: fresh encoder + one task head trained on
    n labeled target examples; returns target test accuracy."""
    if len(labeled_target) < 2:
        raise ContractError("baseline needs at least 2 labeled examples")
    bundle = ModelBundle.build(seed=seed, lr_encoder=lr_encoder, lr_task=lr_task)
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, PHASE_IDS["baseline"], epoch])
        for idx in iter_batches(labeled_target, cfg.batch_size, rng):
            x = labeled_target.images[idx][:, None]
            y = labeled_target.labels[idx]
            e = bundle.encoder.forward(x, train=True)
            p1 = bundle.task1.forward(e, train=True)
            l1, dp1 = bce(p1, y, "L_t1")
            bundle.encoder.backward(bundle.task1.backward(dp1), input_grad=False)
            bundle.opt_task1.step()
            bundle.opt_encoder.step()
    x = test_set.images[:, None]
    e = bundle.encoder.forward(x, train=False)
    pred = (bundle.task1.forward(e, train=False).reshape(-1) >= 0.5).astype(np.int64)
    return float(np.mean(pred == test_set.labels))


def export_embeddings(bundle: ModelBundle, datasets: list[DomainDataset],
                      project_2d: bool = False) -> str:
    """CSV of 20-d encodings: e0..e19,domain,label,split (+p0,p1 if projected)."""
    rows = []
    for ds in datasets:
        e = bundle.encoder.forward(ds.images[:, None], train=False)
        for i in range(len(ds)):
            label = "" if ds.labels is None else int(ds.labels[i])
            rows.append((e[i], ds.domain, label, ds.split))
    header = [f"e{i}" for i in range(rows[0][0].size)] + ["domain", "label", "split"]
    proj = None
    if project_2d:
        emb = np.stack([r[0] for r in rows]).astype(np.float64)
        centered = emb - emb.mean(axis=0)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        proj = centered @ vt[:2].T
        header += ["p0", "p1"]
    buf = StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for i, (e, dom, label, split) in enumerate(rows):
        row = [repr(float(v)) for v in e] + [dom, label, split]
        if proj is not None:
            row += [repr(float(proj[i, 0])), repr(float(proj[i, 1]))]
        w.writerow(row)
    return buf.getvalue()
