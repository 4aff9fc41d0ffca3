"""
Datasets and incremental streams for the benchmark harness

Covers the B-m Inc-n class splitter, the synthetic token-prototype data
generator (including cross-task confusable class pairs), and the
delimited-text feature format used by export/load.
"""

import csv
from dataclasses import asdict, dataclass, field
import logging
import os

import numpy as np

from cilkit.errors import ConfigError, DataError, ProtocolError
from cilkit.utils.prng import shuffled

logger = logging.getLogger(__name__)

CONFUSABLE_OFFSET_SCALE = 0.3


@dataclass
class ProtocolSpec:
    total_classes: int = 50
    base: int = 0
    increment: int = 10
    shuffle_seed: int = 1993

    def problems(self):
        issues = []
        if not isinstance(self.total_classes, int) or self.total_classes < 1:
            issues.append(f"protocol.total_classes must be a positive integer, got {self.total_classes!r}")
        if not isinstance(self.base, int) or self.base < 0:
            issues.append(f"protocol.base must be a non-negative integer, got {self.base!r}")
        if not isinstance(self.increment, int) or self.increment < 1:
            issues.append(f"protocol.increment must be a positive integer, got {self.increment!r}")
        if issues:
            return issues
        if self.base > self.total_classes:
            issues.append(f"protocol.base ({self.base}) exceeds total_classes ({self.total_classes})")
        elif (self.total_classes - self.base) % self.increment:
            issues.append(
                f"protocol: {self.total_classes - self.base} classes after the base task "
                f"are not divisible by increment {self.increment}"
            )
        return issues

    @property
    def num_tasks(self):
        return (1 if self.base else 0) + (self.total_classes - self.base) // self.increment

    @property
    def label(self):
        return f"B{self.base} Inc{self.increment}"

    def to_dict(self):
        return asdict(self)


@dataclass
class SyntheticConfig:
    num_classes: int = 50
    train_per_class: int = 100
    test_per_class: int = 50
    token_dim: int = 16
    seq_len: int = 8
    noise_std: float = 0.3
    confusable_pairs: int = 4
    seed: int = 1

    def problems(self):
        issues = []
        for name in ("num_classes", "train_per_class", "test_per_class", "token_dim", "seq_len"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                issues.append(f"synthetic.{name} must be a positive integer, got {value!r}")
        if not isinstance(self.noise_std, (int, float)) or self.noise_std < 0:
            issues.append(f"synthetic.noise_std must be non-negative, got {self.noise_std!r}")
        if not isinstance(self.confusable_pairs, int) or self.confusable_pairs < 0:
            issues.append(f"synthetic.confusable_pairs must be a non-negative integer, got {self.confusable_pairs!r}")
        elif isinstance(self.num_classes, int) and self.confusable_pairs > self.num_classes // 2:
            issues.append(
                f"synthetic.confusable_pairs ({self.confusable_pairs}) exceeds num_classes/2 ({self.num_classes // 2})"
            )
        return issues

    def to_dict(self):
        return asdict(self)


@dataclass
class Dataset:
    """Instances (N, S, D_in) with integer labels (N,)"""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if self.x.ndim != 3 or self.x.shape[0] != self.y.shape[0]:
            raise DataError(f"dataset needs (N, S, D_in) instances and N labels, got {self.x.shape} / {self.y.shape}")

    def __len__(self):
        return self.y.shape[0]

    @property
    def classes(self):
        return np.unique(self.y)

    def subset(self, mask):
        return Dataset(self.x[mask], self.y[mask])


@dataclass
class TaskData:
    task_id: int
    classes: list
    train: Dataset
    test: Dataset


@dataclass
class IncrementalStream:
    """Ordered tasks with pairwise-disjoint label sets; labels are 0..K-1 in arrival order"""

    tasks: list
    class_order: list
    confusable_pairs: list = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for task in self.tasks:
            overlap = seen & set(task.classes)
            if overlap:
                raise DataError(f"task {task.task_id} reuses classes {sorted(overlap)}")
            seen |= set(task.classes)
            for part in (task.train, task.test):
                stray = set(part.classes.tolist()) - set(task.classes)
                if stray:
                    raise DataError(f"task {task.task_id} holds instances of foreign classes {sorted(stray)}")

    def __len__(self):
        return len(self.tasks)

    @property
    def num_tasks(self):
        return len(self.tasks)

    @property
    def num_classes(self):
        return sum(len(t.classes) for t in self.tasks)

    def classes_seen(self, stage):
        return sum(len(t.classes) for t in self.tasks[:stage])

    def test_union(self, stage):
        """Test sets of tasks 1..stage, concatenated in task order"""
        if not 1 <= stage <= self.num_tasks:
            raise DataError(f"stage {stage} outside 1..{self.num_tasks}")
        parts = [t.test for t in self.tasks[:stage]]
        return Dataset(np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]))

    def task_of_class(self):
        """Array mapping class label -> owning task id"""
        owners = np.zeros(self.num_classes, dtype=np.int64)
        for task in self.tasks:
            owners[task.classes] = task.task_id
        return owners


def split_classes(spec):
    """
    Shuffle class ids 0..total-1 with the seeded LCG, then partition

    Returns:
        list of class-id lists: the first ``base`` classes (if base > 0) as
        task 1, the rest in chunks of ``increment``
    """
    problems = spec.problems()
    if problems:
        raise ProtocolError("class split is not realisable", problems)
    order = shuffled(range(spec.total_classes), spec.shuffle_seed)
    partition = []
    start = 0
    if spec.base:
        partition.append(order[: spec.base])
        start = spec.base
    for offset in range(start, spec.total_classes, spec.increment):
        partition.append(order[offset : offset + spec.increment])
    return partition


def build_stream(train, test, spec, partition=None, confusable_pairs=()):
    """
    Turn flat train/test datasets into an IncrementalStream

    Original labels are sorted, the splitter's class indices are mapped onto
    them, and labels are rewritten to arrival order so that task t owns a
    contiguous label range.
    """
    originals = np.unique(train.y)
    if originals.size != spec.total_classes:
        raise DataError(f"training data holds {originals.size} classes, protocol expects {spec.total_classes}")
    missing = sorted(set(originals.tolist()) - set(np.unique(test.y).tolist()))
    if missing:
        raise DataError(f"test data lacks classes {missing}")
    extra = sorted(set(np.unique(test.y).tolist()) - set(originals.tolist()))
    if extra:
        raise DataError(f"test data holds classes absent from training data: {extra}")

    partition = partition if partition is not None else split_classes(spec)
    class_order = [int(originals[i]) for chunk in partition for i in chunk]
    relabel = {original: position for position, original in enumerate(class_order)}

    def remap(dataset):
        return Dataset(dataset.x, np.array([relabel[int(v)] for v in dataset.y], dtype=np.int64))

    train, test = remap(train), remap(test)
    tasks = []
    position = 0
    for task_id, chunk in enumerate(partition, start=1):
        classes = list(range(position, position + len(chunk)))
        position += len(chunk)
        tasks.append(
            TaskData(
                task_id=task_id,
                classes=classes,
                train=train.subset(np.isin(train.y, classes)),
                test=test.subset(np.isin(test.y, classes)),
            )
        )
    pairs = [(relabel[a], relabel[b]) for a, b in confusable_pairs]
    return IncrementalStream(tasks=tasks, class_order=class_order, confusable_pairs=pairs)


def _unit_prototypes(rng, count, dim):
    raw = rng.normal(size=(count, dim))
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


def _pick_confusable_pairs(partition, count):
    """Pair classes from neighbouring tasks (round-robin) so members never share a task"""
    if count == 0:
        return []
    if len(partition) < 2:
        logger.warning("Only one task: confusable pairs will share that task")
        flat = list(partition[0])
        return [(flat[2 * i], flat[2 * i + 1]) for i in range(count)]

    cursors = [0] * len(partition)

    def take(task_index):
        for _ in range(len(partition)):
            chunk = partition[task_index]
            if cursors[task_index] < len(chunk):
                cursors[task_index] += 1
                return chunk[cursors[task_index] - 1], task_index
            task_index = (task_index + 1) % len(partition)
        raise DataError("not enough classes to form confusable pairs")

    pairs = []
    for p in range(count):
        first, task_a = take(p % len(partition))
        second, task_b = take((task_a + 1) % len(partition))
        if task_a == task_b:
            raise DataError("not enough tasks with free classes to form cross-task confusable pairs")
        pairs.append((first, second))
    return pairs


def make_class_instances(rng, prototypes, per_class, seq_len, noise_std):
    """S noisy copies of each class prototype per instance, classes in id order"""
    count, dim = prototypes.shape
    xs, ys = [], []
    for c in range(count):
        noise = rng.normal(0.0, noise_std, size=(per_class, seq_len, dim)) if noise_std > 0 else 0.0
        xs.append(np.broadcast_to(prototypes[c], (per_class, seq_len, dim)) + noise)
        ys.append(np.full(per_class, c, dtype=np.int64))
    return Dataset(np.concatenate(xs), np.concatenate(ys))


def make_synthetic_stream(cfg, spec):
    """
    Synthetic incremental stream: one unit-sphere prototype per class

    Confusable pairs copy one class's prototype onto a class from another
    task and shift it by 0.3 * noise_std in a random direction.
    """
    problems = cfg.problems() + spec.problems()
    if cfg.num_classes != spec.total_classes:
        problems.append(
            f"synthetic.num_classes ({cfg.num_classes}) must equal protocol.total_classes ({spec.total_classes})"
        )
    if problems:
        raise ConfigError("synthetic stream configuration is invalid", problems)

    rng = np.random.default_rng(cfg.seed)
    prototypes = _unit_prototypes(rng, cfg.num_classes, cfg.token_dim)
    partition = split_classes(spec)
    pairs = _pick_confusable_pairs(partition, cfg.confusable_pairs)
    for anchor, partner in pairs:
        direction = _unit_prototypes(rng, 1, cfg.token_dim)[0]
        prototypes[partner] = prototypes[anchor] + CONFUSABLE_OFFSET_SCALE * cfg.noise_std * direction

    train = make_class_instances(rng, prototypes, cfg.train_per_class, cfg.seq_len, cfg.noise_std)
    test = make_class_instances(rng, prototypes, cfg.test_per_class, cfg.seq_len, cfg.noise_std)
    logger.info(
        f"Synthetic stream: {cfg.num_classes} classes, {spec.label}, "
        f"{len(train)} train / {len(test)} test, {len(pairs)} confusable pairs"
    )
    return build_stream(train, test, spec, partition=partition, confusable_pairs=pairs)


def make_auxiliary_dataset(num_classes, per_class, token_dim, seq_len, noise_std, seed):
    """Disjoint class universe used only to pre-train the backbone"""
    rng = np.random.default_rng([seed, 0xA0])
    prototypes = _unit_prototypes(rng, num_classes, token_dim)
    return make_class_instances(rng, prototypes, per_class, seq_len, noise_std)


# Delimited-text feature files
def _header(seq_len, token_dim):
    return ["label"] + [f"x_{s}_{k}" for s in range(seq_len) for k in range(token_dim)]


def export_feature_dataset(dataset, path):
    """Write one instance per row: label, then S*D_in values (17 significant digits)"""
    _, seq_len, token_dim = dataset.x.shape
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    flat = dataset.x.reshape(len(dataset), -1)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(_header(seq_len, token_dim))
        for label, row in zip(dataset.y, flat):
            writer.writerow([int(label)] + [format(float(v), ".17g") for v in row])
    return path


def export_stream(stream, directory):
    """Write train.csv / test.csv with the stream's original class labels"""
    order = np.asarray(stream.class_order, dtype=np.int64)
    paths = {}
    for split in ("train", "test"):
        parts = [getattr(t, split) for t in stream.tasks]
        merged = Dataset(np.concatenate([p.x for p in parts]), order[np.concatenate([p.y for p in parts])])
        paths[split] = export_feature_dataset(merged, os.path.join(directory, f"{split}.csv"))
    return paths


def _shape_from_header(header, path):
    if not header or header[0] != "label":
        raise DataError(f"{path}: header must start with 'label'")
    try:
        last = header[-1].split("_")
        seq_len, token_dim = int(last[1]) + 1, int(last[2]) + 1
    except (IndexError, ValueError):
        raise DataError(f"{path}: cannot read sequence shape from header field {header[-1]!r}") from None
    if header != _header(seq_len, token_dim):
        raise DataError(f"{path}: header does not describe a {seq_len}x{token_dim} token grid")
    return seq_len, token_dim


def _read_feature_rows(handle, path, seq_len, token_dim):
    reader = csv.reader(handle)
    header = next(reader, None)
    file_seq, file_dim = _shape_from_header(header, path)
    if (seq_len is not None and seq_len != file_seq) or (token_dim is not None and token_dim != file_dim):
        raise DataError(f"{path}: file holds {file_seq}x{file_dim} tokens, expected {seq_len}x{token_dim}")
    width = 1 + file_seq * file_dim
    labels, rows = [], []
    for row_number, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != width:
            raise DataError(f"{path}: row {row_number} has {len(row)} fields, expected {width}")
        try:
            labels.append(int(row[0]))
            values = np.array([float(v) for v in row[1:]])
        except ValueError as e:
            raise DataError(f"{path}: row {row_number} is malformed ({e})") from None
        if not np.all(np.isfinite(values)):
            raise DataError(f"{path}: row {row_number} holds non-finite values")
        rows.append(values)
    return labels, rows, file_seq, file_dim


def load_feature_dataset(path, seq_len=None, token_dim=None):
    """
    Parse a delimited-text feature file

    Args:
        path: UTF-8 CSV file with a header row and one instance per row
        seq_len, token_dim: expected shape (checked when given)

    Returns:
        Dataset with original labels
    """
    if not os.path.exists(path):
        raise DataError(f"dataset file not found: {path}")

    try:
        with open(path, newline="", encoding="utf-8") as handle:
            labels, rows, file_seq, file_dim = _read_feature_rows(handle, path, seq_len, token_dim)
    except UnicodeDecodeError as e:
        raise DataError(f"{path}: not valid UTF-8 text (byte {e.start})") from None

    if not rows:
        raise DataError(f"{path}: no instances")
    x = np.stack(rows).reshape(len(rows), file_seq, file_dim)
    return Dataset(x, np.array(labels, dtype=np.int64))
