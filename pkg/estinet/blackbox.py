"""
Non-differentiable black-box functions, their declared argument domains, and the
adapters that turn network outputs into black-box arguments and black-box outputs
into labels.
"""
import itertools
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import torch
from ordered_set import OrderedSet

logger = logging.getLogger(__name__)

DIGITS = tuple(range(10))
COMPARISON_OPERATORS = ("greater_than", "less_than")
TABLE_OPERATIONS = ("equal_to", "less_than", "greater_than", "max", "min")
SCALAR_OPERATIONS = ("equal_to", "less_than", "greater_than")


class BlackBoxDomainError(ValueError):
    pass


class ArgumentDomain(Enum):
    DIGIT = "digit"
    DIGIT_SEQUENCE = "digit_sequence"
    CHOICE = "choice"
    SCALAR = "scalar"
    OPTIONAL_SCALAR = "optional_scalar"
    VECTOR = "vector"


@dataclass(frozen=True)
class ArgumentSpec:
    name: str
    domain: ArgumentDomain
    choices: Optional[Tuple] = None

    def validate(self, value):
        if self.domain == ArgumentDomain.DIGIT:
            _check_digit(self.name, value)
        elif self.domain == ArgumentDomain.DIGIT_SEQUENCE:
            if len(value) == 0:
                raise BlackBoxDomainError(f"{self.name}: empty digit sequence")
            for digit in value:
                _check_digit(self.name, digit)
        elif self.domain == ArgumentDomain.CHOICE:
            if value not in self.choices:
                raise BlackBoxDomainError(
                    f"{self.name}: {value!r} is not one of {list(self.choices)}"
                )
        elif self.domain == ArgumentDomain.SCALAR:
            _check_finite(self.name, value)
        elif self.domain == ArgumentDomain.OPTIONAL_SCALAR:
            if value is not None:
                _check_finite(self.name, value)
        elif self.domain == ArgumentDomain.VECTOR:
            values = np.asarray(value, dtype=np.float64)
            if values.ndim != 1 or values.size == 0:
                raise BlackBoxDomainError(f"{self.name}: expected a non-empty numeric vector")
            if not np.isfinite(values).all():
                raise BlackBoxDomainError(f"{self.name}: vector holds non-finite values")


def _check_digit(name, value):
    try:
        valid = not isinstance(value, bool) and int(value) == value and int(value) in DIGITS
    except (TypeError, ValueError, OverflowError):
        valid = False
    if not valid:
        raise BlackBoxDomainError(f"{name}: {value!r} is not a digit in 0-9")


def _check_finite(name, value):
    try:
        valid = value is not None and math.isfinite(float(value))
    except (TypeError, ValueError):
        valid = False
    if not valid:
        raise BlackBoxDomainError(f"{name}: {value!r} is not a finite real")


@dataclass(frozen=True)
class BlackBoxFunction:
    name: str
    arguments: Tuple[ArgumentSpec, ...]
    output_domain: str
    fn: Callable

    @property
    def arity(self):
        return len(self.arguments)

    def validate(self, args):
        if len(args) != self.arity:
            raise BlackBoxDomainError(
                f"{self.name} takes {self.arity} arguments, got {len(args)}"
            )
        for spec, value in zip(self.arguments, args):
            spec.validate(value)

    def __call__(self, *args):
        self.validate(args)
        return self.fn(*args)


@dataclass
class LookupTable:
    k: int
    values: np.ndarray

    def __post_init__(self):
        if self.k <= 0:
            raise ValueError(f"Invalid k={self.k}. Must be > 0")
        if self.values.shape != (10,) * self.k:
            raise ValueError(
                f"Lookup table for k={self.k} must hold 10^{self.k} entries, "
                f"got shape {self.values.shape}"
            )
        if self.values.min() < 0 or self.values.max() > 9:
            raise ValueError("Lookup table values must be digits in 0-9")

    @classmethod
    def random(cls, k, seed):
        if k > 4:
            logger.warning(f"k={k} builds a lookup table of 10^{k} entries")
        rng = np.random.default_rng(seed)
        return cls(k=k, values=rng.integers(0, 10, size=(10,) * k, dtype=np.int8))

    @classmethod
    def identity(cls):
        return cls(k=1, values=np.arange(10, dtype=np.int8))

    def __getitem__(self, args):
        return int(self.values[tuple(int(a) for a in args)])

    def to_text(self, file_obj):
        file_obj.write(f"{self.k}\n")
        for args in itertools.product(DIGITS, repeat=self.k):
            file_obj.write(" ".join(str(a) for a in args) + f" {self[args]}\n")

    @classmethod
    def from_text(cls, file_obj):
        lines = [line.split() for line in file_obj if line.strip()]
        k = int(lines[0][0])
        values = np.full((10,) * k, -1, dtype=np.int8)
        for row in lines[1:]:
            if len(row) != k + 1:
                raise ValueError(f"Lookup table line {' '.join(row)!r} must hold {k + 1} digits")
            *args, value = (int(v) for v in row)
            values[tuple(args)] = value
        if (values < 0).any():
            raise ValueError(f"Lookup table is missing {(values < 0).sum()} entries")
        return cls(k=k, values=values)


def bb_sum(digits: Sequence[int]) -> int:
    return int(sum(int(d) for d in digits))


def bb_lookup(table: LookupTable, args: Sequence[int]) -> int:
    if len(args) != table.k:
        raise BlackBoxDomainError(f"Lookup table has k={table.k}, got {len(args)} arguments")
    return table[args]


def bb_compare(x: float, y: float, op: str) -> bool:
    if op == "greater_than":
        return bool(x > y)
    return bool(x < y)


def bb_table_logic(op: str, column, scalar: Optional[float] = None) -> np.ndarray:
    column = np.asarray(column, dtype=np.float64)
    if op in SCALAR_OPERATIONS and scalar is None:
        raise BlackBoxDomainError(f"{op} needs a scalar argument")
    if op == "equal_to":
        selected = column == scalar
    elif op == "less_than":
        selected = column < scalar
    elif op == "greater_than":
        selected = column > scalar
    elif op == "max":
        selected = column == column.max()
    else:
        selected = column == column.min()
    return selected.astype(np.int64)


SUM = BlackBoxFunction(
    name="sum",
    arguments=(ArgumentSpec("digits", ArgumentDomain.DIGIT_SEQUENCE),),
    output_domain="integer",
    fn=bb_sum,
)
COMPARE = BlackBoxFunction(
    name="compare",
    arguments=(
        ArgumentSpec("x", ArgumentDomain.SCALAR),
        ArgumentSpec("y", ArgumentDomain.SCALAR),
        ArgumentSpec("op", ArgumentDomain.CHOICE, COMPARISON_OPERATORS),
    ),
    output_domain="boolean",
    fn=bb_compare,
)
TABLE_LOGIC = BlackBoxFunction(
    name="table_logic",
    arguments=(
        ArgumentSpec("op", ArgumentDomain.CHOICE, TABLE_OPERATIONS),
        ArgumentSpec("column", ArgumentDomain.VECTOR),
        ArgumentSpec("scalar", ArgumentDomain.OPTIONAL_SCALAR),
    ),
    output_domain="binary_vector",
    fn=bb_table_logic,
)


def lookup_blackbox(table: LookupTable) -> BlackBoxFunction:
    return BlackBoxFunction(
        name="lookup",
        arguments=tuple(ArgumentSpec(f"a{i}", ArgumentDomain.DIGIT) for i in range(table.k)),
        output_domain="digit",
        fn=lambda *args: bb_lookup(table, args),
    )


BLACKBOX_REGISTRY = {bbf.name: bbf for bbf in (SUM, COMPARE, TABLE_LOGIC)}


def get_blackbox(name, table=None):
    if name == "lookup":
        if table is None:
            raise ValueError("The lookup black box needs a LookupTable")
        return lookup_blackbox(table)
    try:
        return BLACKBOX_REGISTRY[name]
    except KeyError:
        raise KeyError(
            f"Unknown black box name={name}. Available: {sorted([*BLACKBOX_REGISTRY, 'lookup'])}"
        )


def adapt_hard(distribution):
    """Argmax over the last axis; ties resolve to the lowest index."""
    if torch.is_tensor(distribution):
        return distribution.argmax(dim=-1)
    return np.asarray(distribution).argmax(axis=-1)


def one_hot(index, n_classes=10):
    vector = np.zeros(n_classes, dtype=np.float32)
    vector[index] = 1.0
    return vector


def rows_to_names(rows, names):
    return OrderedSet(name for name, selected in zip(names, rows) if selected)


class AdapterDirection(Enum):
    NETWORK_TO_BLACKBOX = "network_to_blackbox"
    BLACKBOX_TO_LABEL = "blackbox_to_label"


@dataclass(frozen=True)
class Adapter:
    direction: AdapterDirection
    rule: str
    fn: Callable

    def __call__(self, *args, **kwargs):
        return self.fn(*args, **kwargs)


ARGMAX_ADAPTER = Adapter(AdapterDirection.NETWORK_TO_BLACKBOX, "argmax", adapt_hard)
IDENTITY_ADAPTER = Adapter(AdapterDirection.BLACKBOX_TO_LABEL, "identity", lambda value: value)
ROW_NAMES_ADAPTER = Adapter(AdapterDirection.BLACKBOX_TO_LABEL, "rows_to_names", rows_to_names)


def class_to_token_adapter(token_values):
    """Maps a selected position index to the value of the token at that position."""
    return Adapter(
        AdapterDirection.NETWORK_TO_BLACKBOX,
        "class_to_token",
        lambda index: token_values[int(index)],
    )


def record_bb_pair(bbf: BlackBoxFunction, adapted_args):
    adapted_args = tuple(adapted_args)
    return adapted_args, bbf(*adapted_args)
