from dataclasses import dataclass

import numpy as np

from cilkit.errors import DataError

VARIANCE_FLOOR = 1e-4


@dataclass
class ClassStatistics:
    """Diagonal Gaussian feature statistics for the classes of one task"""

    task_id: int
    classes: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.int64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.variances = np.asarray(self.variances, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        k = self.classes.size
        if self.means.shape[0] != k or self.variances.shape != self.means.shape or self.counts.shape != (k,):
            raise DataError("class statistics arrays disagree in size")
        if np.any(self.counts < 1):
            raise DataError("class statistics need at least one instance per class")
        if np.any(self.variances < VARIANCE_FLOOR):
            raise DataError(f"variances must be floored at {VARIANCE_FLOOR}")

    def __len__(self):
        return self.classes.size

    @property
    def feature_dim(self):
        return self.means.shape[1]

    def for_class(self, class_id):
        """(mean, variance, count) of one class"""
        hits = np.flatnonzero(self.classes == class_id)
        if not hits.size:
            raise KeyError(class_id)
        i = hits[0]
        return self.means[i], self.variances[i], int(self.counts[i])
