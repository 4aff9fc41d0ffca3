from cilkit.utils.datasets import IncrementalStream, ProtocolSpec, split_classes  # noqa: F401
from cilkit.utils.metrics import accuracy, average_accuracy  # noqa: F401
