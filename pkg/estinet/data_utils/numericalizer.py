import logging
import string
from dataclasses import dataclass
from typing import Callable, Iterable, List

import numpy as np
import regex
import torch
from torchtext.vocab import build_vocab_from_iterator

logger = logging.getLogger(__name__)

PAD_PIECE = "<pad>"
UNK_PIECE = "<unk>"
FLOAT32_BITS = 32
DEFAULT_REDUNDANCY = 3
DEFAULT_ENCODING_DIM = 128
DEFAULT_ALPHABET = list(string.ascii_lowercase + string.digits + string.punctuation)

# numbers first, so "-1.5e+03" stays one token; then words; then single symbols
tokenizer_re = regex.compile(
    r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?|[\w--_]+|[^[\w--_]\s]",
    flags=regex.V1,
)
number_re = regex.compile(r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?")


def default_tokenizer(val):
    return tokenizer_re.findall(val.lower())


def is_number_token(token):
    return number_re.fullmatch(token) is not None


def format_number(value):
    """Shortest decimal that reads back to the same float32."""
    return np.format_float_positional(np.float32(value), unique=True, trim="-")


def encode_numbers(values, r=DEFAULT_REDUNDANCY, d=DEFAULT_ENCODING_DIM):
    """
    IEEE-754 single-precision bits of each value (MSB first), each bit repeated r times,
    zero-padded to d. Returns an array shaped (*values.shape, d).
    """
    if r <= 0:
        raise ValueError(f"Invalid r={r}. Must be > 0")
    if r * FLOAT32_BITS >= d:
        raise ValueError(f"Invalid r={r}, d={d}. r * 32 must be smaller than d")
    patterns = np.asarray(values, dtype=np.float32).view(np.uint32)
    shifts = np.arange(FLOAT32_BITS - 1, -1, -1, dtype=np.uint32)
    bits = (patterns[..., None] >> shifts) & 1
    encoding = np.zeros((*patterns.shape, d), dtype=np.float32)
    encoding[..., : r * FLOAT32_BITS] = np.repeat(bits, r, axis=-1)
    return encoding


def encode_number(value, r=DEFAULT_REDUNDANCY, d=DEFAULT_ENCODING_DIM):
    return encode_numbers(np.array([value]), r, d)[0]


def decode_number(encoding, r=DEFAULT_REDUNDANCY):
    groups = np.asarray(encoding[: r * FLOAT32_BITS]).reshape(FLOAT32_BITS, r)
    bits = (groups.sum(axis=1) > r / 2).astype(np.uint32)
    pattern = np.uint32((bits << np.arange(FLOAT32_BITS - 1, -1, -1, dtype=np.uint32)).sum())
    return float(np.array([pattern], dtype=np.uint32).view(np.float32)[0])


class PieceVocab:
    """
    Word pieces: a known word is its own single piece, any other word falls back to its
    characters. Pieces outside the vocabulary map to the UNK index.
    """

    def __init__(self, words: Iterable[str], alphabet: List[str] = DEFAULT_ALPHABET):
        pieces = [[word.lower()] for word in words] + [[char] for char in alphabet]
        self.vocab = build_vocab_from_iterator(pieces, specials=[PAD_PIECE, UNK_PIECE])
        self.vocab.set_default_index(self.vocab[UNK_PIECE])
        self.pad_index = self.vocab[PAD_PIECE]

    def __len__(self):
        return len(self.vocab)

    def __contains__(self, piece):
        return piece in self.vocab

    def pieces(self, token):
        return [token] if token in self.vocab else list(token)

    def piece_ids(self, token):
        return self.vocab.lookup_indices(self.pieces(token))


@dataclass
class EncodedQuestion:
    tokens: List[str]
    piece_ids: List[List[int]]
    number_vectors: np.ndarray
    token_values: np.ndarray
    is_number: np.ndarray

    def __len__(self):
        return len(self.tokens)


class QuestionNumericalizer:
    def __init__(
        self,
        piece_vocab: PieceVocab,
        tokenizer: Callable[[str], List[str]] = default_tokenizer,
        redundancy=DEFAULT_REDUNDANCY,
        encoding_dim=DEFAULT_ENCODING_DIM,
    ):
        self.piece_vocab = piece_vocab
        self.tokenizer = tokenizer
        self.redundancy = redundancy
        self.encoding_dim = encoding_dim

    def encode_question(self, text) -> EncodedQuestion:
        tokens = self.tokenizer(text)
        if not tokens:
            raise ValueError(f"Question {text!r} has no tokens")
        is_number = np.array([is_number_token(t) for t in tokens])
        values = np.array([float(t) if n else np.nan for t, n in zip(tokens, is_number)])
        number_vectors = np.stack(
            [
                encode_number(v, self.redundancy, self.encoding_dim)
                if n
                else np.zeros(self.encoding_dim, dtype=np.float32)
                for v, n in zip(values, is_number)
            ]
        )
        piece_ids = [
            [self.piece_vocab.pad_index] if n else self.piece_vocab.piece_ids(t)
            for t, n in zip(tokens, is_number)
        ]
        return EncodedQuestion(
            tokens=tokens,
            piece_ids=piece_ids,
            number_vectors=number_vectors,
            token_values=values.astype(np.float32),
            is_number=is_number,
        )

    def encode_phrase(self, text):
        """Piece ids of a short phrase (e.g. a column header) as one bag."""
        return [i for token in self.tokenizer(text) for i in self.piece_vocab.piece_ids(token)]


def pad_piece_ids(piece_id_lists, pad_index, max_pieces=None):
    """(n_tokens, max_pieces) LongTensor from ragged per-token piece id lists."""
    width = max_pieces or max(len(ids) for ids in piece_id_lists)
    truncated = sum(len(ids) > width for ids in piece_id_lists)
    if truncated:
        logger.warning(f"Truncated {truncated} token(s) to their first {width} pieces")
    padded = torch.full((len(piece_id_lists), width), pad_index, dtype=torch.long)
    for i, ids in enumerate(piece_id_lists):
        padded[i, : len(ids)] = torch.tensor(ids[:width], dtype=torch.long)
    return padded
