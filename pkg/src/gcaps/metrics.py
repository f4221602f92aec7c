"""Structural and representation metrics for routed capsule layers.

The T-score measures how tree-like the couplings are (1 minus the
normalized average coupling entropy); the D-score measures how much
capsule activations adapt across a batch (max per-capsule standard
deviation).  The usefulness estimator scores a binary feature against
the {-1, N-1} label coding, and the confusion matrix / accuracy close
out the classifier-level reporting.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence, Union

import numpy as np

from .errors import DomainError
from .io_utils import write_csv


@dataclass
class BatchRoutingRecord:
    """Couplings and scalar activations collected over a batch."""

    couplings: np.ndarray     # (M, I, J), each row over j sums to 1
    activations: np.ndarray   # (M, J) capsule activation norms

    def __post_init__(self):
        self.couplings = np.asarray(self.couplings, dtype=np.float64)
        self.activations = np.asarray(self.activations, dtype=np.float64)
        if self.couplings.ndim != 3:
            raise DomainError("BatchRoutingRecord", f"couplings must be (M,I,J), got {self.couplings.shape}")
        if self.activations.ndim != 2:
            raise DomainError("BatchRoutingRecord", f"activations must be (M,J), got {self.activations.shape}")


def coupling_entropy(couplings: np.ndarray) -> float:
    """Average natural-log entropy of coupling rows, with 0 log 0 = 0."""
    c = np.asarray(couplings, dtype=np.float64)
    terms = np.where(c > 0.0, -c * np.log(np.where(c > 0.0, c, 1.0)), 0.0)
    num_examples, num_lower = c.shape[0], c.shape[1]
    return float(terms.sum() / (num_examples * num_lower))


def t_score(record: BatchRoutingRecord) -> float:
    """1 - H_avg / log J; near 1 for parse-tree routing, near 0 for uniform."""
    num_upper = record.couplings.shape[2]
    if num_upper < 2:
        raise DomainError("t_score", f"needs at least 2 upper capsules, got {num_upper}")
    return float(1.0 - coupling_entropy(record.couplings) / np.log(num_upper))


def d_score(record: BatchRoutingRecord) -> float:
    """Max over capsules of the population std of activations across the batch."""
    num_examples = record.activations.shape[0]
    if num_examples < 2:
        raise DomainError("d_score", f"needs at least 2 examples, got {num_examples}")
    return float(record.activations.std(axis=0).max())


def parent_uniqueness(record: BatchRoutingRecord, margin: float = 0.0) -> float:
    """Fraction of (example, lower capsule) pairs with a strict max coupling.

    With the default margin the strictness is literal (exact ties only),
    which is almost always satisfied by float couplings however diffuse
    they are; pass a positive ``margin`` to require the parent coupling
    to beat the runner-up by that much, which is what separates
    tree-like from near-uniform routing in practice.
    """
    c = record.couplings
    if c.size == 0:
        raise DomainError("parent_uniqueness", "empty record")
    if c.shape[-1] < 2:
        return 1.0
    top2 = np.partition(c, -2, axis=-1)[..., -2:]
    gap = top2[..., 1] - top2[..., 0]
    return float((gap > margin).mean())


class LabelCoding:
    """The {-1, N-1} class coding; components of every code sum to 0."""

    def __init__(self, num_classes: int):
        if num_classes < 2:
            raise DomainError("LabelCoding", f"needs at least 2 classes, got {num_classes}")
        self.num_classes = num_classes

    def encode(self, label: int) -> np.ndarray:
        if not 0 <= label < self.num_classes:
            raise DomainError("LabelCoding", f"label {label} outside [0, {self.num_classes})")
        code = np.full(self.num_classes, -1.0)
        code[label] = self.num_classes - 1.0
        return code


def usefulness(indicator: Union[Sequence, Callable], class_set: Iterable[int],
               dataset) -> float:
    """Empirical usefulness of a binary feature shared by ``class_set``.

    ``indicator`` maps each example to {0,1} (callable on an image, or a
    precomputed array over the dataset); the feature vector is the
    indicator broadcast over the classes in ``class_set`` and zero
    elsewhere.  Returns the mean over the dataset of <label code,
    feature vector>.  A feature shared by all classes scores exactly 0.
    """
    labels = np.asarray(dataset.labels, dtype=np.int64)
    if labels.size == 0:
        raise DomainError("usefulness", "empty dataset")
    coding = LabelCoding(dataset.num_classes)
    if callable(indicator):
        values = np.array([float(indicator(img)) for img in dataset.images])
    else:
        values = np.asarray(indicator, dtype=np.float64)
        if values.shape != labels.shape:
            raise DomainError("usefulness",
                              f"indicator has shape {values.shape}, expected {labels.shape}")
    class_set = set(int(k) for k in class_set)
    # <y, f(x)> = indicator * sum_{n in S} y^(n); y^(n) is N-1 at the true
    # class and -1 elsewhere.
    code_sums = np.array([sum(coding.encode(lbl)[n] for n in class_set) for lbl in labels])
    return float(np.mean(values * code_sums))


def confusion_matrix(model, dataset, batch_size: int = 256) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    n = dataset.num_classes
    counts = np.zeros((n, n), dtype=np.int64)
    images, labels = dataset.images, np.asarray(dataset.labels)
    for start in range(0, len(labels), batch_size):
        batch = images[start:start + batch_size]
        pred = model.predict(batch)
        np.add.at(counts, (labels[start:start + batch_size], pred), 1)
    return counts


def accuracy(model, dataset, batch_size: int = 256) -> float:
    cm = confusion_matrix(model, dataset, batch_size=batch_size)
    return float(np.trace(cm) / cm.sum())


def collect_record(model, images, layer: str = "hidden",
                   batch_size: int = 256) -> BatchRoutingRecord:
    """Run the model over ``images`` and gather one layer's routing record."""
    from . import autodiff as ad
    coup, acts = [], []
    for start in range(0, len(images), batch_size):
        with ad.no_grad():
            result = model.forward(images[start:start + batch_size])
        state = result.hidden if layer == "hidden" else result.output
        coup.append(state.couplings.data)
        acts.append(state.activation_norms())
    return BatchRoutingRecord(np.concatenate(coup), np.concatenate(acts))


METRICS_HEADER = ("dataset", "algorithm", "classes", "layer", "T", "D",
                  "accuracy", "parent_uniqueness")


def write_metrics_csv(path, rows: Iterable[Sequence]) -> None:
    write_csv(path, METRICS_HEADER, rows)


def write_confusion_csv(path, counts: np.ndarray) -> None:
    n = counts.shape[0]
    header = ["true\\pred"] + [str(j) for j in range(n)]
    rows = [[str(i)] + [int(v) for v in counts[i]] for i in range(n)]
    write_csv(path, header, rows)
