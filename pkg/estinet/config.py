import dataclasses
import hashlib
import json
import logging
import typing
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


class Procedure(Enum):
    OFFLINE = "offline"
    ONLINE = "online"
    HYBRID = "hybrid"
    END_TO_END = "end_to_end"


class EntropyMode(Enum):
    THRESHOLD = "threshold"
    MAXIMIZE = "maximize"


class Mode(Enum):
    TRAIN = "train"
    TEST = "test"
    INFERENCE = "inference"


class ModelKind(Enum):
    ESTINET = "estinet"
    BASELINE = "baseline"
    RL = "rl"


class RewardFormula(Enum):
    ABSOLUTE = "absolute"
    SIGNED_SUM = "signed_sum"


def _as_enum(enum_cls, value):
    return value if isinstance(value, enum_cls) else enum_cls(value)


def _check_non_negative(obj, *names):
    for name in names:
        value = getattr(obj, name)
        if value is not None and value < 0:
            raise ValueError(f"Invalid {name}={value}. Must be >= 0")


def _check_positive(obj, *names):
    for name in names:
        value = getattr(obj, name)
        if value is not None and value <= 0:
            raise ValueError(f"Invalid {name}={value}. Must be > 0")


def _to_dict(obj):
    return {
        key: value.value if isinstance(value, Enum) else value
        for key, value in dataclasses.asdict(obj).items()
    }


@dataclass
class TrainingConfig:
    procedure: Procedure = Procedure.HYBRID
    beta: float = 1.0
    entropy_lambda: float = 0.0
    entropy_threshold: float = 0.15
    entropy_mode: EntropyMode = EntropyMode.THRESHOLD
    label_smoothing: float = 0.0
    learning_rate: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    gumbel_temperature: Optional[float] = 1.0
    batch_size: int = 20
    eval_batch_size: int = 256
    min_epochs: int = 1
    max_epochs: int = 5
    early_stop_patience: int = 5
    pretrain_samples: int = 20000
    pretrain_valid_samples: int = 2000
    pretrain_max_epochs: int = 20
    pretrain_patience: int = 5
    pretrain_threshold: float = 0.9
    monitor_every: int = 500
    seed: int = 42

    def __post_init__(self):
        self.procedure = _as_enum(Procedure, self.procedure)
        self.entropy_mode = _as_enum(EntropyMode, self.entropy_mode)
        _check_non_negative(
            self,
            "beta",
            "entropy_lambda",
            "entropy_threshold",
            "pretrain_max_epochs",
            "pretrain_samples",
            "pretrain_valid_samples",
        )
        _check_positive(
            self,
            "learning_rate",
            "batch_size",
            "eval_batch_size",
            "max_epochs",
            "gumbel_temperature",
            "monitor_every",
        )
        if not 0.0 <= self.label_smoothing <= 1.0:
            raise ValueError(f"Invalid label_smoothing={self.label_smoothing}. Must be in [0, 1]")
        if self.min_epochs > self.max_epochs:
            raise ValueError(
                f"Invalid min_epochs={self.min_epochs}. Must be <= max_epochs={self.max_epochs}"
            )

    @property
    def adam_betas(self):
        return (self.adam_beta1, self.adam_beta2)

    def to_dict(self):
        return _to_dict(self)


@dataclass
class DatasetConfig:
    n_train: int = 10000
    n_valid: int = 1000
    n_test: int = 1000
    k: int = 2
    test_k: Optional[int] = None
    table_seed: int = 0
    replacement_table_seed: Optional[int] = None
    mnist_train_limit: Optional[int] = None
    mnist_test_limit: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        _check_positive(self, "n_train", "n_valid", "n_test", "k", "test_k")

    def to_dict(self):
        return _to_dict(self)


@dataclass
class EvaluationConfig:
    modes: List[str] = field(default_factory=lambda: ["test", "inference"])
    # also evaluate with the replacement lookup table (dataset.replacement_table_seed)
    replace_blackbox: bool = False
    strict: bool = False

    def __post_init__(self):
        for mode in self.modes:
            Mode(mode)

    def to_dict(self):
        return _to_dict(self)


@dataclass
class RLConfig:
    updates: int = 50000
    eval_every: int = 500
    learning_rate: float = 1e-5
    reward_formula: RewardFormula = RewardFormula.ABSOLUTE
    entropy_coefficient: float = 0.0
    eval_images: int = 1000

    def __post_init__(self):
        self.reward_formula = _as_enum(RewardFormula, self.reward_formula)
        _check_positive(self, "updates", "eval_every", "learning_rate", "eval_images")
        _check_non_negative(self, "entropy_coefficient")

    def to_dict(self):
        return _to_dict(self)


# fields that do not change what an experiment computes
NON_SEMANTIC_FIELDS = ("output_dir", "repeats")


@dataclass
class ExperimentConfig:
    task: str
    model: ModelKind = ModelKind.ESTINET
    training: TrainingConfig = field(default_factory=TrainingConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    rl: RLConfig = field(default_factory=RLConfig)
    repeats: int = 1
    output_dir: str = "runs"

    def __post_init__(self):
        self.model = _as_enum(ModelKind, self.model)
        if self.repeats < 1:
            raise ValueError(f"Invalid repeats={self.repeats}. Must be >= 1")
        if self.model == ModelKind.BASELINE:
            self.training.procedure = Procedure.END_TO_END

    def to_dict(self):
        return {
            "task": self.task,
            "model": self.model.value,
            "training": self.training.to_dict(),
            "dataset": self.dataset.to_dict(),
            "evaluation": self.evaluation.to_dict(),
            "rl": self.rl.to_dict(),
            "repeats": self.repeats,
            "output_dir": self.output_dir,
        }

    def config_hash(self):
        semantic = {k: v for k, v in self.to_dict().items() if k not in NON_SEMANTIC_FIELDS}
        canonical = json.dumps(semantic, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def with_seed(self, seed):
        training = dataclasses.replace(self.training, seed=seed)
        return dataclasses.replace(self, training=training)


def _type_name(type_):
    return getattr(type_, "__name__", str(type_))


def _coerce(value, type_, path):
    origin = typing.get_origin(type_)
    args = typing.get_args(type_)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(value, inner, path)
    if origin in (list, List):
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return [_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value)]
    if isinstance(type_, type) and issubclass(type_, Enum):
        try:
            return type_(value)
        except ValueError:
            raise ConfigError(
                path, f"unknown value {value!r}, expected one of {[e.value for e in type_]}"
            )
    if type_ is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if type_ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if type_ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if type_ is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    raise ConfigError(path, f"unsupported field type {_type_name(type_)}")


class ExperimentConfigParser:
    SECTIONS = {
        "training": TrainingConfig,
        "dataset": DatasetConfig,
        "evaluation": EvaluationConfig,
        "rl": RLConfig,
    }

    @classmethod
    def from_json(cls, config_json_file_obj):
        try:
            config_dict = json.load(config_json_file_obj)
        except json.JSONDecodeError as err:
            raise ConfigError("<root>", f"invalid JSON: {err}")
        return cls.from_dict(config_dict)

    @classmethod
    def from_dict(cls, config_dict):
        from .tasks import TASKS

        if not isinstance(config_dict, dict):
            raise ConfigError("<root>", "expected an object")
        unknown = set(config_dict) - {f.name for f in dataclasses.fields(ExperimentConfig)}
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown field")
        if "task" not in config_dict:
            raise ConfigError("task", "missing required field")
        task = _coerce(config_dict["task"], str, "task")
        if task not in TASKS:
            raise ConfigError("task", f"unknown task {task!r}, expected one of {sorted(TASKS)}")

        sections = {}
        for name, section_cls in cls.SECTIONS.items():
            section_dict = config_dict.get(name, {})
            if name == "training":
                section_dict = {**TASKS[task].training_defaults, **section_dict}
            sections[name] = cls._parse_section(section_cls, section_dict, name)

        kwargs = {"task": task, **sections}
        if "model" in config_dict:
            kwargs["model"] = _coerce(config_dict["model"], ModelKind, "model")
        if "repeats" in config_dict:
            kwargs["repeats"] = _coerce(config_dict["repeats"], int, "repeats")
        if "output_dir" in config_dict:
            kwargs["output_dir"] = _coerce(config_dict["output_dir"], str, "output_dir")
        try:
            return ExperimentConfig(**kwargs)
        except ValueError as err:
            raise ConfigError("<root>", str(err))

    @classmethod
    def _parse_section(cls, section_cls, section_dict, path):
        if not isinstance(section_dict, dict):
            raise ConfigError(path, "expected an object")
        type_hints = typing.get_type_hints(section_cls)
        known = {f.name for f in dataclasses.fields(section_cls)}
        kwargs = {}
        for key, value in section_dict.items():
            if key not in known:
                raise ConfigError(f"{path}.{key}", "unknown field")
            kwargs[key] = _coerce(value, type_hints[key], f"{path}.{key}")
        try:
            return section_cls(**kwargs)
        except ValueError as err:
            raise ConfigError(path, str(err))
