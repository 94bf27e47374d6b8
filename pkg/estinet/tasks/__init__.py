from .base import LossKind, Task  # noqa: F401
from .image_addition import ImageAdditionTask  # noqa: F401
from .image_lookup import ImageLookupTask  # noqa: F401
from .text_logic import TextLogicTask  # noqa: F401
from .tll import TLLTask  # noqa: F401

TASKS = {
    task_cls.name: task_cls
    for task_cls in (TextLogicTask, ImageAdditionTask, ImageLookupTask, TLLTask)
}
IMAGE_TASKS = {ImageAdditionTask.name, ImageLookupTask.name}
