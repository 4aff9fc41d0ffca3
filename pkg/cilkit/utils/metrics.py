"""
Scoring helpers for the incremental evaluation protocol

A_b is Top-1 accuracy over all classes seen after stage b; A_B is the last
A_b and the average accuracy is the plain mean over stages.
"""

import numpy as np

from cilkit.errors import DataError


def accuracy(predictions, labels):
    """Top-1 accuracy as an exact ratio of integer counts"""
    predictions = np.asarray(predictions).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if predictions.shape != labels.shape:
        raise DataError(f"{predictions.size} predictions for {labels.size} labels")
    if labels.size == 0:
        raise DataError("accuracy of an empty set")
    return int(np.count_nonzero(predictions == labels)) / labels.size


def average_accuracy(stage_accuracies):
    """Mean of A_b over stages"""
    if not stage_accuracies:
        raise DataError("no stages to average")
    return float(np.mean(np.asarray(stage_accuracies, dtype=np.float64)))


def final_accuracy(stage_accuracies):
    if not stage_accuracies:
        raise DataError("no stages recorded")
    return float(stage_accuracies[-1])


def selection_accuracy(selected_tasks, true_tasks):
    """Fraction of instances routed to the adapter of their own task"""
    return accuracy(selected_tasks, true_tasks)


def entropy_accuracy_quartiles(entropies, correct):
    """
    Accuracy inside each entropy quartile, lowest-entropy quartile first

    Instances are ranked by entropy (stable sort) and split into four
    near-equal groups, so heavy ties cannot empty a bin.
    """
    entropies = np.asarray(entropies, dtype=np.float64).reshape(-1)
    correct = np.asarray(correct, dtype=bool).reshape(-1)
    if entropies.size != correct.size or entropies.size < 4:
        raise DataError("need at least four (entropy, correct) pairs of matching length")
    order = np.argsort(entropies, kind="stable")
    return [float(np.mean(correct[group])) for group in np.array_split(order, 4)]


def pair_error_rates(predictions, labels, pairs):
    """
    Error rate on instances of confusable-pair classes vs all other classes

    Returns:
        (pair_error, other_error); either is None when that group is empty
    """
    predictions = np.asarray(predictions).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    members = sorted({c for pair in pairs for c in pair})
    in_pair = np.isin(labels, members)
    wrong = predictions != labels

    def rate(mask):
        return float(np.mean(wrong[mask])) if np.any(mask) else None

    return rate(in_pair), rate(~in_pair)
