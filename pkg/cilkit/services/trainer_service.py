"""
Per-task adapter training

Each task gets a fresh adapter set trained with cross-entropy plus an
orthogonality penalty against earlier adapters; afterwards its class-wise
feature statistics are collected and the classifier is re-calibrated on
Gaussian pseudo-features replayed for every class seen so far.
"""

from dataclasses import asdict, dataclass, field
from enum import Enum
import math

import numpy as np
from tqdm import tqdm

from cilkit.errors import CILError, DataError, NumericalError, ShapeError
from cilkit.models import VARIANCE_FLOOR, AdapterSet, Classifier, ClassStatistics
from cilkit.tensor import (
    SGDMomentum,
    Tensor,
    backward,
    cosine_lr,
    cross_entropy,
    l1_norm,
    no_grad,
    swap_last,
)
from cilkit.utils.logging_config import ContextualLogger
from cilkit.utils.performance import timer

logger = ContextualLogger(__name__)

FEATURE_BATCH = 256


class OrthMode(str, Enum):
    UP = "up"
    DOWN = "down"
    BOTH = "both"


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 48
    lr0: float = 0.01
    momentum: float = 0.9
    lambda0: float = 1e-3
    lambda_decay: float = 0.9
    orth_mode: str = "up"
    rank: int = 16
    replay_samples_per_class: int = 100
    calibration_epochs: int = 5
    calibration_lr: float = 0.01
    seed: int = 1

    def problems(self):
        issues = []
        for name in ("epochs", "batch_size", "rank", "calibration_epochs"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                issues.append(f"train.{name} must be a positive integer, got {value!r}")
        for name in ("lr0", "calibration_lr"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or value <= 0:
                issues.append(f"train.{name} must be positive, got {value!r}")
        if not isinstance(self.momentum, (int, float)) or not 0 <= self.momentum < 1:
            issues.append(f"train.momentum must be in [0, 1), got {self.momentum!r}")
        if not isinstance(self.lambda0, (int, float)) or self.lambda0 < 0:
            issues.append(f"train.lambda0 must be non-negative, got {self.lambda0!r}")
        if not isinstance(self.lambda_decay, (int, float)) or not 0 < self.lambda_decay <= 1:
            issues.append(f"train.lambda_decay must be in (0, 1], got {self.lambda_decay!r}")
        if self.orth_mode not in [m.value for m in OrthMode]:
            issues.append(f"train.orth_mode must be one of up/down/both, got {self.orth_mode!r}")
        if not isinstance(self.replay_samples_per_class, int) or self.replay_samples_per_class < 0:
            issues.append(
                f"train.replay_samples_per_class must be a non-negative integer, got {self.replay_samples_per_class!r}"
            )
        if not isinstance(self.seed, int):
            issues.append(f"train.seed must be an integer, got {self.seed!r}")
        return issues

    def to_dict(self):
        return asdict(self)


@dataclass
class PretrainConfig:
    num_classes: int = 32
    instances_per_class: int = 60
    epochs: int = 10
    batch_size: int = 48
    lr0: float = 0.01
    momentum: float = 0.9
    noise_std: float = 0.3
    seed: int = 7

    def problems(self):
        issues = []
        for name in ("num_classes", "instances_per_class", "epochs", "batch_size"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                issues.append(f"pretrain.{name} must be a positive integer, got {value!r}")
        if not isinstance(self.lr0, (int, float)) or self.lr0 <= 0:
            issues.append(f"pretrain.lr0 must be positive, got {self.lr0!r}")
        if not isinstance(self.momentum, (int, float)) or not 0 <= self.momentum < 1:
            issues.append(f"pretrain.momentum must be in [0, 1), got {self.momentum!r}")
        if not isinstance(self.noise_std, (int, float)) or self.noise_std < 0:
            issues.append(f"pretrain.noise_std must be non-negative, got {self.noise_std!r}")
        return issues

    def to_dict(self):
        return asdict(self)


@dataclass
class TaskTrainingResult:
    adapters: AdapterSet
    classifier: Classifier
    statistics: ClassStatistics
    history: list = field(default_factory=list)

    @property
    def train_accuracy(self):
        return self.history[-1]["train_accuracy"] if self.history else None


def lambda_at(epoch, lambda0, decay):
    """lambda_e = lambda0 * decay**e"""
    return lambda0 * decay**epoch


def _batches(n, batch_size, order=None):
    order = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def cls_loss(batch, adapters, classifier, backbone):
    """Mean softmax cross-entropy of W^T phi(x; A) over the batch"""
    x, y = batch
    y = np.asarray(y)
    if y.size and (y.min() < 0 or y.max() >= classifier.num_classes):
        raise DataError(f"labels must lie in [0, {classifier.num_classes}), got {y.min()}..{y.max()}")
    features = backbone.embed(x, adapters)
    return cross_entropy(classifier.logits(features), y)


def orth_loss(current, previous, mode=OrthMode.UP):
    """
    Sum over earlier adapters i and blocks of ||W^t (W^i)^T||_1

    UP uses the up-projections (r x d rows); DOWN pairs the down-projection
    columns, (W_down^t)^T W_down^i; BOTH adds the two.
    """
    mode = OrthMode(mode)
    total = None
    for other in previous:
        if not current.same_shape(other):
            raise ShapeError(
                "orthogonality needs adapter sets of equal shape",
                (current.num_blocks, current.embed_dim, current.rank),
                (other.num_blocks, other.embed_dim, other.rank),
            )
        for block in range(current.num_blocks):
            terms = []
            if mode in (OrthMode.UP, OrthMode.BOTH):
                terms.append(l1_norm(current.up[block] @ swap_last(other.up[block])))
            if mode in (OrthMode.DOWN, OrthMode.BOTH):
                terms.append(l1_norm(swap_last(current.down[block]) @ other.down[block]))
            for term in terms:
                total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def total_loss(batch, adapters, classifier, backbone, previous, lam, mode=OrthMode.UP):
    """L = L_cls + lambda * L_orth"""
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    loss = cls_loss(batch, adapters, classifier, backbone)
    if previous:
        loss = loss + lam * orth_loss(adapters, previous, mode)
    return loss


def up_projection_gram_l1(adapter_sets):
    """Sum over task pairs i < j and blocks of ||W_up^j (W_up^i)^T||_1"""
    total = 0.0
    with no_grad():
        for j in range(1, len(adapter_sets)):
            total += orth_loss(adapter_sets[j], adapter_sets[:j], OrthMode.UP).item()
    return total


def extract_features(dataset_x, adapters, backbone, batch_size=FEATURE_BATCH):
    """phi(x; A) for every instance, computed in fixed batch order"""
    chunks = []
    with no_grad():
        for index in _batches(dataset_x.shape[0], batch_size):
            chunks.append(backbone.embed(dataset_x[index], adapters).data)
    return np.concatenate(chunks) if chunks else np.zeros((0, backbone.config.embed_dim))


def collect_statistics(dataset, adapters, backbone, classes=None, task_id=None):
    """Per-class mean and floored population variance of phi(x; A_t)"""
    classes = sorted(int(c) for c in (dataset.classes if classes is None else classes))
    features = extract_features(dataset.x, adapters, backbone)
    means, variances, counts = [], [], []
    for c in classes:
        rows = features[dataset.y == c]
        if rows.shape[0] == 0:
            raise DataError(f"class {c} has no training instances")
        means.append(rows.mean(axis=0))
        variances.append(np.maximum(rows.var(axis=0), VARIANCE_FLOOR))
        counts.append(rows.shape[0])
    owner = task_id if task_id is not None else adapters.task_id
    return ClassStatistics(owner, classes, np.array(means), np.array(variances), np.array(counts))


def sample_pseudo_features(statistics, samples_per_class, rng):
    """Draw N(mu_k, diag(sigma_k^2)) samples for every class, in class order"""
    table = {}
    for stats in statistics:
        for i, c in enumerate(stats.classes):
            table[int(c)] = (stats.means[i], stats.variances[i])
    features, labels = [], []
    for c in sorted(table):
        mu, var = table[c]
        features.append(rng.normal(mu, np.sqrt(var), size=(samples_per_class, mu.size)))
        labels.append(np.full(samples_per_class, c, dtype=np.int64))
    return np.concatenate(features), np.concatenate(labels)


def replay_calibrate(classifier, statistics, cfg, rng=None):
    """
    Fine-tune every classifier column on replayed pseudo-features

    Feature extractors are untouched; ``statistics`` must cover all classes
    the classifier knows.
    """
    if cfg.replay_samples_per_class == 0:
        return classifier
    covered = {int(c) for stats in statistics for c in stats.classes}
    missing = sorted(set(classifier.class_to_task) - covered)
    if missing:
        raise DataError(f"no replay statistics for classes {missing}")

    rng = rng if rng is not None else np.random.default_rng([cfg.seed, 0xCA1])
    features, labels = sample_pseudo_features(statistics, cfg.replay_samples_per_class, rng)

    classifier.set_trainable(None)
    optimizer = SGDMomentum(classifier.parameters(), momentum=cfg.momentum)
    steps_per_epoch = math.ceil(labels.size / cfg.batch_size)
    total_steps = cfg.calibration_epochs * steps_per_epoch
    step = 0
    for _ in range(cfg.calibration_epochs):
        for index in _batches(labels.size, cfg.batch_size, rng.permutation(labels.size)):
            optimizer.zero_grad()
            loss = cross_entropy(classifier.logits(Tensor(features[index])), labels[index])
            backward(loss, inputs=optimizer.params)
            optimizer.step(cosine_lr(step, total_steps, cfg.calibration_lr))
            step += 1
    classifier.freeze()
    logger.debug(f"Replay calibration: {labels.size} pseudo-features, {total_steps} steps")
    return classifier


def _fit_task(task, adapters, classifier, state, cfg, rng, progress, log):
    """SGD over one task's data; returns the per-epoch history"""
    task_id = task.task_id
    backbone = state.backbone
    classifier.set_trainable({task_id})
    previous = list(state.task_adapters)

    params = adapters.parameters() + [classifier.task_block(task_id)]
    optimizer = SGDMomentum(params, momentum=cfg.momentum)
    n = len(task.train)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    mode = OrthMode(cfg.orth_mode)

    history = []
    step = 0
    epochs = tqdm(range(cfg.epochs), desc=f"task {task_id}", disable=not progress, leave=False)
    for epoch in epochs:
        lam = lambda_at(epoch, cfg.lambda0, cfg.lambda_decay)
        sums = {"cls": 0.0, "orth": 0.0, "correct": 0}
        for index in _batches(n, cfg.batch_size, rng.permutation(n)):
            x, y = task.train.x[index], task.train.y[index]
            optimizer.zero_grad()
            try:
                features = backbone.embed(x, adapters)
                logits = classifier.logits(features)
                loss_cls = cross_entropy(logits, y)
                loss = loss_cls
                if previous:
                    loss_orth = orth_loss(adapters, previous, mode)
                    loss = loss_cls + lam * loss_orth
                    sums["orth"] += loss_orth.item() * len(index)
            except NumericalError as e:
                raise NumericalError(f"non-finite loss in task {task_id} at step {step}: {e}") from e
            backward(loss, inputs=params)
            optimizer.step(cosine_lr(step, total_steps, cfg.lr0))
            step += 1
            sums["cls"] += loss_cls.item() * len(index)
            sums["correct"] += int(np.count_nonzero(logits.data.argmax(axis=1) == y))

        record = {
            "epoch": epoch,
            "lambda": lam,
            "cls_loss": sums["cls"] / n,
            "orth_loss": sums["orth"] / n,
            "train_accuracy": sums["correct"] / n,
        }
        history.append(record)
        epochs.set_postfix(loss=f"{record['cls_loss']:.4f}", acc=f"{record['train_accuracy']:.3f}")
        log.debug(
            f"epoch {epoch}: cls={record['cls_loss']:.5f} orth={record['orth_loss']:.5f} "
            f"lambda={lam:.2e} acc={record['train_accuracy']:.4f}"
        )
    return history


@timer
def train_task(task, state, cfg, calibrate=True, progress=False):
    """
    Train the adapter set and classifier columns for one task

    Args:
        task: TaskData for task t (t == number of trained tasks + 1)
        state: ModelState holding tasks 1..t-1; mutated in place
        cfg: TrainConfig
        calibrate: run replay calibration afterwards (only when t > 1)
        progress: show a tqdm bar over epochs

    Returns:
        TaskTrainingResult
    """
    backbone, classifier = state.backbone, state.classifier
    task_id = task.task_id
    log = logger.bind(task=task_id, seed=cfg.seed)
    if not backbone.frozen:
        raise CILError("backbone must be frozen before task training")
    if task_id != state.num_tasks + 1:
        raise DataError(f"task {task_id} arrives after {state.num_tasks} trained tasks")
    if len(task.train) == 0:
        raise DataError(f"task {task_id} has no training instances")

    rng = np.random.default_rng([cfg.seed, task_id])
    c = backbone.config
    adapters = AdapterSet.initialize(c.num_blocks, c.embed_dim, cfg.rank, task_id, rng)
    classifier.add_classes(task.classes, task_id, rng)
    try:
        history = _fit_task(task, adapters, classifier, state, cfg, rng, progress, log)
        adapters.freeze()
        statistics = collect_statistics(task.train, adapters, backbone, task.classes, task_id)
    except Exception:
        # head columns exist only for tasks recorded in the state
        classifier.drop_task(task_id)
        raise
    finally:
        classifier.freeze()
    state.task_adapters.append(adapters)
    state.statistics.append(statistics)

    if calibrate and task_id > 1:
        replay_calibrate(classifier, state.statistics, cfg, np.random.default_rng([cfg.seed, task_id, 0xCA1]))

    log.info(
        f"Trained task {task_id}: {len(task.classes)} classes, {len(task.train)} instances, "
        f"final cls loss {history[-1]['cls_loss']:.4f}, train acc {history[-1]['train_accuracy']:.4f}"
    )
    return TaskTrainingResult(adapters, classifier, statistics, history)


@timer
def pretrain_backbone(backbone, dataset, cfg, progress=False):
    """
    Train the whole backbone plus a throwaway head on an auxiliary class
    universe, then freeze it

    Returns:
        final training accuracy on the auxiliary data
    """
    rng = np.random.default_rng([cfg.seed, 0xB0])
    backbone.unfreeze()
    head = Classifier(backbone.config.embed_dim)
    head.add_classes(range(int(dataset.y.max()) + 1), task_id=1, rng=rng)
    params = backbone.parameters() + head.parameters()
    optimizer = SGDMomentum(params, momentum=cfg.momentum)

    n = len(dataset)
    total_steps = cfg.epochs * math.ceil(n / cfg.batch_size)
    step = 0
    train_accuracy = 0.0
    for epoch in tqdm(range(cfg.epochs), desc="pretrain", disable=not progress, leave=False):
        correct = 0
        for index in _batches(n, cfg.batch_size, rng.permutation(n)):
            optimizer.zero_grad()
            logits = head.logits(backbone.embed(dataset.x[index]))
            loss = cross_entropy(logits, dataset.y[index])
            backward(loss, inputs=params)
            optimizer.step(cosine_lr(step, total_steps, cfg.lr0))
            step += 1
            correct += int(np.count_nonzero(logits.data.argmax(axis=1) == dataset.y[index]))
        train_accuracy = correct / n
        logger.debug(f"pretrain epoch {epoch}: acc={train_accuracy:.4f}")

    backbone.freeze()
    logger.info(f"Backbone pre-trained on {n} auxiliary instances, train acc {train_accuracy:.4f}")
    return train_accuracy
