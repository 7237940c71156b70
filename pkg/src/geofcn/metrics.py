"""Segmentation scores and the model-level constraint audits."""

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import tensor as T
from .model import forward, loss_and_gradients
from .raster import LabelMap


def _ids(x):
    return x.ids if isinstance(x, LabelMap) else np.asarray(x)


def _num_classes(pred, truth, num_classes):
    if num_classes is not None:
        return num_classes
    ks = [m.num_classes for m in (pred, truth) if isinstance(m, LabelMap)]
    if ks and any(k != ks[0] for k in ks):
        raise ValueError(f"label maps disagree on the class count: {ks}")
    if ks:
        return ks[0]
    return int(max(_ids(pred).max(), _ids(truth).max())) + 1


def confusion_matrix(pred, truth, num_classes=None):
    """Counts with rows indexed by ground truth and columns by prediction."""
    p, t = _ids(pred), _ids(truth)
    if p.shape != t.shape:
        raise ValueError(f"dimension mismatch: prediction {p.shape} vs truth {t.shape}")
    c = _num_classes(pred, truth, num_classes)
    if p.size and (p.max() >= c or t.max() >= c or p.min() < 0 or t.min() < 0):
        raise ValueError(f"class ids outside [0, {c})")
    return kernels.confusion_counts(t, p, c)


def _ratio(num, den):
    return num / den if den else 0.0


@dataclass
class EvalReport:
    num_classes: int
    confusion: np.ndarray
    pixel_accuracy: float
    iou: list
    precision: list
    recall: list
    f1: list
    present: list
    mean_iou: float
    macro_f1: float
    mean_precision: float
    mean_recall: float
    test_loss: float = float("nan")
    grad_norm: float = float("nan")
    flags: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def items(self):
        """Flat ``(key, value)`` pairs in a fixed order."""
        out = []
        for k, v in self.extra.items():
            out.append((k, v))
        out += [
            ("num_classes", self.num_classes),
            ("pixel_count", int(self.confusion.sum())),
            ("pixel_accuracy", self.pixel_accuracy),
            ("mean_iou", self.mean_iou),
            ("macro_f1", self.macro_f1),
            ("mean_precision", self.mean_precision),
            ("mean_recall", self.mean_recall),
        ]
        for c in range(self.num_classes):
            out += [
                (f"iou_class_{c}", self.iou[c]),
                (f"precision_class_{c}", self.precision[c]),
                (f"recall_class_{c}", self.recall[c]),
                (f"f1_class_{c}", self.f1[c]),
                (f"present_class_{c}", self.present[c]),
            ]
        out += [("test_loss", self.test_loss), ("grad_norm", self.grad_norm)]
        out += [(f"flag_{k}", v) for k, v in self.flags.items()]
        return out

    def to_kv(self):
        return "".join(f"{k}={format_value(v)}\n" for k, v in self.items())

    def to_text(self):
        lines = []
        if "dataset" in self.extra:
            lines.append(f"dataset: {self.extra['dataset']}")
        lines += [
            f"pixel accuracy  {self.pixel_accuracy:.4f}",
            f"mean IoU        {self.mean_iou:.4f}",
            f"macro F1        {self.macro_f1:.4f}",
            f"precision       {self.mean_precision:.4f}",
            f"recall          {self.mean_recall:.4f}",
            f"test loss       {self.test_loss:.6f}",
            f"gradient norm   {self.grad_norm:.6g}",
            "",
            "class  IoU     prec    recall  F1      in-truth",
        ]
        for c in range(self.num_classes):
            lines.append(
                f"{c:<6d} {self.iou[c]:.4f}  {self.precision[c]:.4f}  {self.recall[c]:.4f}  "
                f"{self.f1[c]:.4f}  {'yes' if self.present[c] else 'no'}"
            )
        if self.flags:
            lines.append("")
            for k, v in self.flags.items():
                lines.append(f"{k}: {'PASS' if v else 'FAIL'}")
        return "\n".join(lines) + "\n"


def format_value(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def report_from_confusion(cm):
    """All count-derived metrics from a confusion matrix."""
    cm = np.asarray(cm, dtype=np.int64)
    c = cm.shape[0]
    total = int(cm.sum())
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    iou, prec, rec, f1 = [], [], [], []
    for k in range(c):
        t, p_, n_ = int(tp[k]), int(fp[k]), int(fn[k])
        iou.append(_ratio(t, t + p_ + n_))
        pk, rk = _ratio(t, t + p_), _ratio(t, t + n_)
        prec.append(pk)
        rec.append(rk)
        f1.append(_ratio(2 * pk * rk, pk + rk))
    present = [bool(cm[k].sum() > 0) for k in range(c)]
    idx = [k for k in range(c) if present[k]]

    def mean(vals):
        # fsum keeps the mean independent of class order
        return math.fsum(vals[k] for k in idx) / len(idx) if idx else 0.0

    return EvalReport(
        num_classes=c,
        confusion=cm,
        pixel_accuracy=_ratio(int(tp.sum()), total),
        iou=iou,
        precision=prec,
        recall=rec,
        f1=f1,
        present=present,
        mean_iou=mean(iou),
        macro_f1=mean(f1),
        mean_precision=mean(prec),
        mean_recall=mean(rec),
    )


def evaluate(pred, truth, num_classes=None):
    """Score one label map, or a list of them, against ground truth."""
    if isinstance(pred, (list, tuple)):
        if len(pred) != len(truth):
            raise ValueError(f"{len(pred)} predictions for {len(truth)} ground-truth maps")
        if not pred:
            raise ValueError("nothing to evaluate")
        c = _num_classes(pred[0], truth[0], num_classes)
        cm = sum(confusion_matrix(p, t, c) for p, t in zip(pred, truth))
        return report_from_confusion(cm)
    return report_from_confusion(confusion_matrix(pred, truth, num_classes))


def test_loss(model, images, labels, macs=None):
    """Mean per-tile cross-entropy of ``model`` over a test set."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.ndim == 3:
        images, labels = images[None], labels[None]
    if len(images) == 0:
        raise ValueError("test set is empty")
    losses = []
    for i in range(len(images)):
        logits = forward(model, images[i], macs)
        losses.append(T.softmax_cross_entropy(logits, labels[i])[0])
    return math.fsum(losses) / len(losses)


def gradient_norm(model, batch, labels):
    """L2 norm of the concatenated parameter gradients for one loss evaluation."""
    _, grads = loss_and_gradients(model, batch, labels)
    return math.sqrt(math.fsum(float(np.sum(g * g)) for g in grads))


def audit_flags(report, thresholds):
    """Threshold checks on accuracy, gradient norm (against its bound squared) and test error."""
    return {
        "accuracy_min": report.pixel_accuracy >= thresholds.min_accuracy,
        "grad_norm": report.grad_norm <= thresholds.grad_bound**2,
        "test_error": report.test_loss <= thresholds.max_test_error,
    }


def full_report(model, images, labels, thresholds, grad_batch=8, dataset=None):
    """Predict every tile, score against ``labels``, and attach loss, gradient norm, and audits."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    c = model.config.num_classes
    preds = [LabelMap(np.argmax(forward(model, x), axis=0), c) for x in images]
    truths = [LabelMap(t, c) for t in labels]
    report = evaluate(preds, truths, c)
    report.test_loss = test_loss(model, images, labels)
    report.grad_norm = gradient_norm(model, images[:grad_batch], labels[:grad_batch])
    report.flags = audit_flags(report, thresholds)
    if dataset is not None:
        report.extra["dataset"] = dataset
    return report, preds
