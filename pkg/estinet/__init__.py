"""Top-level package for estinet."""
import logging

from .blackbox import BLACKBOX_REGISTRY, BlackBoxDomainError, BlackBoxFunction  # noqa: F401
from .config import ExperimentConfig, ExperimentConfigParser, TrainingConfig  # noqa: F401
from .data_modules import *  # noqa: F401, F403
from .estinet import *  # noqa: F401, F403
from .tasks import TASKS  # noqa: F401
from .training import train  # noqa: F401

__version__ = "0.1.0"

logging.getLogger(__name__).addHandler(logging.NullHandler())
