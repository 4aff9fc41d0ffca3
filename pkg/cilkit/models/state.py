from dataclasses import dataclass, field

from cilkit.errors import DataError


@dataclass
class ModelState:
    """Backbone + task adapters + universal adapter + head + replay statistics"""

    backbone: object
    classifier: object
    task_adapters: list = field(default_factory=list)
    universal: object = None
    statistics: list = field(default_factory=list)
    config_echo: dict = field(default_factory=dict)

    def __repr__(self):
        return (
            f"<ModelState tasks={self.num_tasks} classes={self.classifier.num_classes} "
            f"universal={'yes' if self.universal is not None else 'no'}>"
        )

    @property
    def num_tasks(self):
        return len(self.task_adapters)

    def adapter_for(self, task_id):
        for adapters in self.task_adapters:
            if adapters.task_id == task_id:
                return adapters
        raise DataError(f"no adapter set for task {task_id}")
