import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch

from ..blackbox import COMPARE, COMPARISON_OPERATORS, adapt_hard
from ..data_utils.numericalizer import (
    DEFAULT_ENCODING_DIM,
    DEFAULT_REDUNDANCY,
    PieceVocab,
    QuestionNumericalizer,
    default_tokenizer,
    encode_number,
    format_number,
    is_number_token,
    pad_piece_ids,
)
from ..models import ComparisonEstimator, TextLogicArgumentExtractor
from .base import LossKind, Task, check_positive, dirichlet_distributions

logger = logging.getLogger(__name__)

MAX_PIECES = 16
NUMBER_STD = 1e5  # variance 1e10

# (text, operator); the label is compare(x, y, operator) whatever order x and y appear in
TEMPLATES = [
    ("out of {x} and {y} , is the first bigger ?", "greater_than"),
    ("is {x} greater than {y} ?", "greater_than"),
    ("is {x} bigger than {y} ?", "greater_than"),
    ("does {x} exceed {y} ?", "greater_than"),
    ("is {y} smaller than {x} ?", "greater_than"),
    ("is {x} less than {y} ?", "less_than"),
    ("is {x} smaller than {y} ?", "less_than"),
    ("out of {x} and {y} , is the first smaller ?", "less_than"),
    ("out of {y} and {x} , is the second smaller ?", "less_than"),
    ("is {y} greater than {x} ?", "less_than"),
]


def template_words():
    return sorted(
        {
            token
            for text, __ in TEMPLATES
            for token in default_tokenizer(text.replace("{x}", "").replace("{y}", ""))
        }
    )


@dataclass
class TextLogicSample:
    question: str
    x: float
    y: float
    operator: str
    template: int
    x_position: int
    y_position: int
    label: bool

    def to_record(self):
        return asdict(self)

    @classmethod
    def from_record(cls, record):
        return cls(**record)


class TextLogicTask(Task):
    """True/false comparison questions over two floats written in a templated sentence."""

    name = "text_logic"
    loss_kind = LossKind.CLASSIFICATION
    argument_names = ("first", "second", "operator")
    training_defaults = {
        "procedure": "online",
        "beta": 1.0,
        "entropy_lambda": 0.0,
        "label_smoothing": 0.0,
        "learning_rate": 0.001,
        "batch_size": 32,
    }

    def __init__(
        self,
        redundancy=DEFAULT_REDUNDANCY,
        encoding_dim=DEFAULT_ENCODING_DIM,
        lstm_hidden_size=50,
    ):
        super().__init__(COMPARE)
        self.piece_vocab = PieceVocab(template_words())
        self.numericalizer = QuestionNumericalizer(
            self.piece_vocab, redundancy=redundancy, encoding_dim=encoding_dim
        )
        self.redundancy = redundancy
        self.encoding_dim = encoding_dim
        self.lstm_hidden_size = lstm_hidden_size

    def make_sample(self, x, y, template):
        text, operator = TEMPLATES[template]
        x, y = float(np.float32(x)), float(np.float32(y))
        question = text.format(x=format_number(x), y=format_number(y))
        tokens = self.numericalizer.tokenizer(question)
        number_positions = [i for i, t in enumerate(tokens) if is_number_token(t)]
        if len(number_positions) != 2:
            raise ValueError(f"Question {question!r} must hold exactly 2 numbers")
        x_first = text.index("{x}") < text.index("{y}")
        x_position, y_position = number_positions if x_first else number_positions[::-1]
        return TextLogicSample(
            question=question,
            x=x,
            y=y,
            operator=operator,
            template=template,
            x_position=x_position,
            y_position=y_position,
            label=self.query((x, y, operator)),
        )

    def generate(self, split, n, seed):
        check_positive("n", n)
        rng = np.random.default_rng(seed)
        values = rng.normal(0.0, NUMBER_STD, size=(n, 2)).astype(np.float32)
        templates = rng.integers(0, len(TEMPLATES), size=n)
        samples = [self.make_sample(x, y, int(t)) for (x, y), t in zip(values, templates)]
        logger.info(f"Generated {n} text_logic samples (split={split})")
        return samples

    def label_of(self, sample):
        return self.query((sample.x, sample.y, sample.operator))

    def adapt_label(self, value):
        return bool(value)

    def encode(self, sample):
        encoded = self.numericalizer.encode_question(sample.question)
        return {
            "piece_ids": pad_piece_ids(encoded.piece_ids, self.piece_vocab.pad_index, MAX_PIECES),
            "number_vectors": torch.from_numpy(encoded.number_vectors),
            "token_values": torch.from_numpy(encoded.token_values),
            "is_number": torch.from_numpy(encoded.is_number.astype(np.int64)),
            "lengths": torch.tensor(len(encoded)),
            "gold_first": torch.tensor(sample.x_position),
            "gold_second": torch.tensor(sample.y_position),
            "gold_operator": torch.tensor(COMPARISON_OPERATORS.index(sample.operator)),
            "label": torch.tensor(int(sample.label)),
        }

    def collate(self, encoded_list):
        batch = super().collate(encoded_list)
        max_length = batch["piece_ids"].shape[1]
        batch["token_mask"] = torch.arange(max_length).unsqueeze(0) < batch["lengths"].unsqueeze(1)
        return batch

    def build_argument_extractor(self, temperature=1.0):
        return TextLogicArgumentExtractor(
            len(self.piece_vocab),
            embedding_dim=self.encoding_dim,
            lstm_hidden_size=self.lstm_hidden_size,
            temperature=temperature,
        )

    def build_estimator(self):
        return ComparisonEstimator(self.encoding_dim)

    def harden(self, arguments, batch):
        first = adapt_hard(arguments["first"]).tolist()
        second = adapt_hard(arguments["second"]).tolist()
        operators = adapt_hard(arguments["operator"]).tolist()
        values = batch["token_values"].tolist()
        return [
            (values[b][first[b]], values[b][second[b]], COMPARISON_OPERATORS[operators[b]])
            for b in range(len(operators))
        ]

    def gold_arguments(self, batch):
        return {
            "first": batch["gold_first"],
            "second": batch["gold_second"],
            "operator": batch["gold_operator"],
        }

    def sample_offline(self, n, seed):
        """Two N(0, 1e10) numbers as a two-token context, with random selections over them."""
        check_positive("n", n)
        rng = np.random.default_rng(seed)
        values = rng.normal(0.0, NUMBER_STD, size=(n, 2)).astype(np.float32)
        positions = dirichlet_distributions(rng, (n, 2), 2)
        operators = dirichlet_distributions(rng, (n,), 2)
        arguments_list, context_list, hard_args_list = [], [], []
        for pair, (first, second), operator in zip(values, positions, operators):
            arguments_list.append(
                {
                    "first": torch.from_numpy(first),
                    "second": torch.from_numpy(second),
                    "operator": torch.from_numpy(operator),
                }
            )
            encodings = [encode_number(v, self.redundancy, self.encoding_dim) for v in pair]
            context_list.append({"number_vectors": torch.from_numpy(np.stack(encodings))})
            hard_args_list.append(
                (
                    float(pair[first.argmax()]),
                    float(pair[second.argmax()]),
                    COMPARISON_OPERATORS[int(operator.argmax())],
                )
            )
        return self._offline_entries(arguments_list, context_list, hard_args_list)
