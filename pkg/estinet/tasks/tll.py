import logging
import os
from dataclasses import asdict, dataclass
from typing import List, Optional

import numpy as np
import torch

from ..blackbox import (
    ROW_NAMES_ADAPTER,
    SCALAR_OPERATIONS,
    TABLE_LOGIC,
    TABLE_OPERATIONS,
    adapt_hard,
)
from ..data_utils.numericalizer import (
    DEFAULT_ENCODING_DIM,
    DEFAULT_REDUNDANCY,
    PieceVocab,
    QuestionNumericalizer,
    default_tokenizer,
    encode_numbers,
    format_number,
    pad_piece_ids,
)
from ..models import TableLogicEstimator, TLLArgumentExtractor
from .base import LossKind, Task, check_positive, dirichlet_distributions

logger = logging.getLogger(__name__)

N_ROWS = 25
N_VALUE_COLUMNS = 4
MAX_PIECES = 16
TRAIN_VALUE_RANGE = (1, 100)
TEST_VALUE_RANGE = (300, 400)
ENTITY_NAMES_PATH = os.path.join(os.path.dirname(__file__), "..", "data", "entity_names.txt")
COLUMN_NAMES = [
    "gold",
    "silver",
    "bronze",
    "wins",
    "losses",
    "draws",
    "points",
    "goals",
    "titles",
    "players",
    "stores",
    "employees",
]
QUESTION_TEMPLATES = {
    "greater_than": [
        "which entries have more than {value} {column} ?",
        "which rows have {column} greater than {value} ?",
    ],
    "less_than": [
        "which entries have fewer than {value} {column} ?",
        "which rows have {column} less than {value} ?",
    ],
    "equal_to": [
        "which entries have exactly {value} {column} ?",
        "which rows have {column} equal to {value} ?",
    ],
    "max": [
        "which entry has the most {column} ?",
        "which rows have the highest {column} ?",
    ],
    "min": [
        "which entry has the fewest {column} ?",
        "which rows have the lowest {column} ?",
    ],
}


def load_entity_names(path=ENTITY_NAMES_PATH):
    with open(path, "r", encoding="utf-8") as f:
        return [line.strip() for line in f if line.strip()]


def question_words():
    words = set(COLUMN_NAMES)
    for templates in QUESTION_TEMPLATES.values():
        for text in templates:
            words.update(default_tokenizer(text.format(value="", column="")))
    return sorted(words)


def value_range(split):
    return TEST_VALUE_RANGE if split == "test" else TRAIN_VALUE_RANGE


@dataclass
class TLLSample:
    question: str
    entity_names: List[str]
    column_names: List[str]
    # rows x value columns; the entity name column is ``entity_names``
    cells: List[List[int]]
    operation: str
    column: int
    scalar: Optional[int]
    scalar_position: int
    label: List[int]

    def to_record(self):
        return asdict(self)

    @classmethod
    def from_record(cls, record):
        return cls(**record)

    def column_values(self):
        return [row[self.column] for row in self.cells]


class TLLTask(Task):
    """Questions over small tables answered by one logic operation on one column."""

    name = "tll"
    loss_kind = LossKind.ROWS
    argument_names = ("operation", "column", "argument")
    training_defaults = {
        "procedure": "hybrid",
        "beta": 1.0,
        "entropy_lambda": 0.0,
        "label_smoothing": 0.0,
        "learning_rate": 0.001,
        "batch_size": 50,
    }

    def __init__(
        self,
        redundancy=DEFAULT_REDUNDANCY,
        encoding_dim=DEFAULT_ENCODING_DIM,
        lstm_hidden_size=50,
        estimator_width=64,
        estimator_layers=2,
        estimator_heads=4,
    ):
        super().__init__(TABLE_LOGIC)
        self.entity_names = load_entity_names()
        self.piece_vocab = PieceVocab(question_words())
        self.numericalizer = QuestionNumericalizer(
            self.piece_vocab, redundancy=redundancy, encoding_dim=encoding_dim
        )
        self.redundancy = redundancy
        self.encoding_dim = encoding_dim
        self.lstm_hidden_size = lstm_hidden_size
        self.estimator_width = estimator_width
        self.estimator_layers = estimator_layers
        self.estimator_heads = estimator_heads

    def _sample(self, rng, split):
        low, high = value_range(split)
        names = [str(n) for n in rng.choice(self.entity_names, size=N_ROWS, replace=False)]
        column_names = rng.choice(COLUMN_NAMES, size=N_VALUE_COLUMNS, replace=False)
        column_names = [str(c) for c in column_names]
        cells = rng.integers(low, high + 1, size=(N_ROWS, N_VALUE_COLUMNS))
        operation = TABLE_OPERATIONS[int(rng.integers(len(TABLE_OPERATIONS)))]
        column = int(rng.integers(N_VALUE_COLUMNS))
        if operation == "equal_to":
            scalar = int(rng.choice(cells[:, column]))
        elif operation in SCALAR_OPERATIONS:
            scalar = int(rng.integers(low, high + 1))
        else:
            scalar = None
        templates = QUESTION_TEMPLATES[operation]
        text = templates[int(rng.integers(len(templates)))]
        question = text.format(
            value="" if scalar is None else format_number(scalar), column=column_names[column]
        )
        question = " ".join(question.split())
        scalar_position = -1
        if scalar is not None:
            scalar_position = self.numericalizer.tokenizer(question).index(format_number(scalar))
        sample = TLLSample(
            question=question,
            entity_names=names,
            column_names=column_names,
            cells=cells.tolist(),
            operation=operation,
            column=column,
            scalar=scalar,
            scalar_position=scalar_position,
            label=[],
        )
        sample.label = self.label_of(sample)
        return sample

    def generate(self, split, n, seed):
        check_positive("n", n)
        rng = np.random.default_rng(seed)
        samples = [self._sample(rng, split) for __ in range(n)]
        logger.info(f"Generated {n} tll questions (split={split})")
        return samples

    def label_of(self, sample):
        return self.query((sample.operation, sample.column_values(), sample.scalar))

    def adapt_label(self, value):
        return [int(v) for v in value]

    def render_answer(self, rows, entity_names):
        """Entity names of the selected rows, in table order."""
        return ROW_NAMES_ADAPTER(rows, entity_names)

    def encode(self, sample):
        encoded = self.numericalizer.encode_question(sample.question)
        header_pieces = [self.numericalizer.encode_phrase(c) for c in sample.column_names]
        cell_values = np.asarray(sample.cells, dtype=np.float32).T
        return {
            "piece_ids": pad_piece_ids(encoded.piece_ids, self.piece_vocab.pad_index, MAX_PIECES),
            "number_vectors": torch.from_numpy(encoded.number_vectors),
            "token_values": torch.from_numpy(encoded.token_values),
            "is_number": torch.from_numpy(encoded.is_number.astype(np.int64)),
            "lengths": torch.tensor(len(encoded)),
            "header_piece_ids": pad_piece_ids(
                header_pieces, self.piece_vocab.pad_index, MAX_PIECES
            ),
            "cell_vectors": torch.from_numpy(
                encode_numbers(cell_values, self.redundancy, self.encoding_dim)
            ),
            "cell_values": torch.from_numpy(np.ascontiguousarray(cell_values)),
            "gold_operation": torch.tensor(TABLE_OPERATIONS.index(sample.operation)),
            "gold_column": torch.tensor(sample.column),
            "gold_argument": torch.tensor(sample.scalar_position),
            "entity_names": sample.entity_names,
            "label": torch.tensor(sample.label, dtype=torch.long),
        }

    def collate(self, encoded_list):
        batch = super().collate(encoded_list)
        max_length = batch["piece_ids"].shape[1]
        batch["token_mask"] = torch.arange(max_length).unsqueeze(0) < batch["lengths"].unsqueeze(1)
        return batch

    def build_argument_extractor(self, temperature=1.0):
        return TLLArgumentExtractor(
            len(self.piece_vocab),
            n_operations=len(TABLE_OPERATIONS),
            embedding_dim=self.encoding_dim,
            lstm_hidden_size=self.lstm_hidden_size,
            temperature=temperature,
        )

    def build_estimator(self):
        return TableLogicEstimator(
            n_operations=len(TABLE_OPERATIONS),
            embedding_dim=self.encoding_dim,
            n_rows=N_ROWS,
            width=self.estimator_width,
            n_layers=self.estimator_layers,
            n_heads=self.estimator_heads,
        )

    def harden(self, arguments, batch):
        operations = adapt_hard(arguments["operation"]).tolist()
        columns = adapt_hard(arguments["column"]).tolist()
        positions = adapt_hard(arguments["argument"]).tolist()
        cell_values = batch["cell_values"].tolist()
        token_values = batch["token_values"].tolist()
        hard_args = []
        for b, (op_index, column, position) in enumerate(zip(operations, columns, positions)):
            operation = TABLE_OPERATIONS[op_index]
            scalar = token_values[b][position] if operation in SCALAR_OPERATIONS else None
            hard_args.append((operation, cell_values[b][column], scalar))
        return hard_args

    def gold_arguments(self, batch):
        return {
            "operation": batch["gold_operation"],
            "column": batch["gold_column"],
            "argument": batch["gold_argument"],
        }

    def sample_offline(self, n, seed):
        """Uniform tables and scalars over the training value range, random selections."""
        check_positive("n", n)
        rng = np.random.default_rng(seed)
        low, high = TRAIN_VALUE_RANGE
        operations = dirichlet_distributions(rng, (n,), len(TABLE_OPERATIONS))
        columns = dirichlet_distributions(rng, (n,), N_VALUE_COLUMNS)
        arguments_list, context_list, hard_args_list = [], [], []
        for operation, column in zip(operations, columns):
            cell_values = rng.integers(low, high + 1, size=(N_VALUE_COLUMNS, N_ROWS))
            scalar = float(rng.integers(low, high + 1))
            arguments_list.append(
                {
                    "operation": torch.from_numpy(operation),
                    "column": torch.from_numpy(column),
                    "argument": torch.ones(1),
                }
            )
            context_list.append(
                {
                    "cell_vectors": torch.from_numpy(
                        encode_numbers(cell_values, self.redundancy, self.encoding_dim)
                    ),
                    "number_vectors": torch.from_numpy(
                        encode_numbers(np.array([scalar]), self.redundancy, self.encoding_dim)
                    ),
                }
            )
            op_name = TABLE_OPERATIONS[int(operation.argmax())]
            hard_args_list.append(
                (
                    op_name,
                    cell_values[int(column.argmax())].astype(float).tolist(),
                    scalar if op_name in SCALAR_OPERATIONS else None,
                )
            )
        return self._offline_entries(arguments_list, context_list, hard_args_list)
