import logging
import math

import torch
import torch.nn.functional as F
from torch import nn

from .autodiff import LOG_EPSILON, GradcheckCase, ShapeError, forward_op

logger = logging.getLogger(__name__)

ACTIVATIONS = {
    "linear": lambda x: x,
    "relu": lambda x: forward_op("relu", x),
    "elu": lambda x: forward_op("elu", x),
    "tanh": lambda x: forward_op("tanh", x),
    "sigmoid": lambda x: forward_op("sigmoid", x),
    "softmax": lambda x: forward_op("softmax", x),
}


def dense(input, weights, bias=None, activation="linear"):
    """``activation(input @ weights + bias)`` with ``weights`` shaped (in, out)."""
    try:
        activation_fn = ACTIVATIONS[activation]
    except KeyError:
        raise ValueError(f"Unknown activation={activation}. Expected one of {list(ACTIVATIONS)}")
    output = forward_op("matmul", input, weights)
    if bias is not None:
        output = forward_op("add", output, bias)
    return activation_fn(output)


IMAGE_SIZE = 28


def _check_images(images):
    if images.dim() < 2 or images.shape[-2:] != (IMAGE_SIZE, IMAGE_SIZE):
        raise ShapeError(f"Expected images shaped (..., 28, 28), got {tuple(images.shape)}")


class DigitFeatures(nn.Module):
    """Two 5x5 convolutions, each followed by 2x2 max-pooling and ReLU; (N, 28, 28) -> (N, 320)."""

    WIDTH = 320

    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 10, kernel_size=5)
        self.conv2 = nn.Conv2d(10, 20, kernel_size=5)

    def forward(self, images):
        _check_images(images)
        x = images.reshape(-1, 1, IMAGE_SIZE, IMAGE_SIZE)
        x = forward_op("relu", forward_op("max_pool2d", self.conv1(x), kernel_size=2))
        x = forward_op("relu", forward_op("max_pool2d", self.conv2(x), kernel_size=2))
        return x.reshape(x.shape[0], self.WIDTH)


class DigitClassifier(nn.Module):
    """``DigitFeatures`` then a 320 -> 10 dense head; any leading dims are kept."""

    def __init__(self, n_classes=10):
        super().__init__()
        self.features = DigitFeatures()
        self.fc = nn.Linear(DigitFeatures.WIDTH, n_classes)

    def forward(self, images):
        _check_images(images)
        logits = self.fc(self.features(images))
        return logits.reshape(*images.shape[:-2], -1)

    def classify(self, images):
        return forward_op("softmax", self(images))


class LSTMEncoder(nn.Module):
    """Runs an LSTM over (batch, time, dim) inputs and returns the last valid hidden state."""

    def __init__(self, input_size, hidden_size):
        super().__init__()
        self.hidden_size = hidden_size
        self.lstm = nn.LSTM(input_size=input_size, hidden_size=hidden_size, batch_first=True)

    def forward(self, inputs, lengths=None):
        if inputs.dim() != 3 or inputs.shape[1] == 0:
            raise ValueError(f"Expected a non-empty (batch, time, dim) input, got {inputs.shape}")
        if lengths is None:
            __, (h_n, __) = self.lstm(inputs)
            return h_n[-1]
        if bool((lengths <= 0).any()):
            raise ValueError("Every sequence must hold at least one step")
        packed = nn.utils.rnn.pack_padded_sequence(
            inputs, lengths.cpu(), batch_first=True, enforce_sorted=False
        )
        __, (h_n, __) = self.lstm(packed)
        return h_n[-1]


class NAC(nn.Module):
    """Accumulator with W = tanh(W_hat) * sigmoid(M_hat), biased toward {-1, 0, 1}."""

    def __init__(self, in_features, out_features):
        super().__init__()
        self.W_hat = nn.Parameter(torch.empty(in_features, out_features))
        self.M_hat = nn.Parameter(torch.empty(in_features, out_features))
        nn.init.kaiming_uniform_(self.W_hat, a=math.sqrt(5))
        nn.init.kaiming_uniform_(self.M_hat, a=math.sqrt(5))

    def weight(self):
        return forward_op("mul", forward_op("tanh", self.W_hat), forward_op("sigmoid", self.M_hat))

    def forward(self, x):
        return forward_op("matmul", x, self.weight())


class NALU(nn.Module):
    def __init__(self, in_features, out_features, epsilon=LOG_EPSILON):
        super().__init__()
        self.nac = NAC(in_features, out_features)
        self.G = nn.Parameter(torch.empty(in_features, out_features))
        nn.init.kaiming_uniform_(self.G, a=math.sqrt(5))
        self.epsilon = epsilon

    def forward(self, x):
        W = self.nac.weight()
        gate = forward_op("sigmoid", forward_op("matmul", x, self.G))
        additive = forward_op("matmul", x, W)
        log_x = torch.log(torch.abs(x) + self.epsilon)
        multiplicative = forward_op("exp", forward_op("matmul", log_x, W))
        return gate * additive + (1 - gate) * multiplicative


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, width, n_heads):
        super().__init__()
        if width % n_heads != 0:
            raise ValueError(f"Invalid n_heads={n_heads}. width={width} must be divisible by it")
        self.n_heads = n_heads
        self.head_width = width // n_heads
        self.query = nn.Linear(width, width)
        self.key = nn.Linear(width, width)
        self.value = nn.Linear(width, width)
        self.output = nn.Linear(width, width)

    def _split_heads(self, x):
        batch, length, __ = x.shape
        return x.view(batch, length, self.n_heads, self.head_width).transpose(1, 2)

    def forward(self, x, return_attention=False):
        batch, length, width = x.shape
        q = self._split_heads(self.query(x))
        k = self._split_heads(self.key(x))
        v = self._split_heads(self.value(x))

        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_width)
        attention = forward_op("softmax", scores)
        context = (attention @ v).transpose(1, 2).reshape(batch, length, width)
        output = self.output(context)
        if return_attention:
            return output, attention
        return output


class TransformerEncoderLayer(nn.Module):
    def __init__(self, width, n_heads, ff_width):
        super().__init__()
        self.attention = MultiHeadSelfAttention(width, n_heads)
        self.attention_norm = nn.LayerNorm(width)
        self.ff = nn.Sequential(nn.Linear(width, ff_width), nn.ReLU(), nn.Linear(ff_width, width))
        self.ff_norm = nn.LayerNorm(width)

    def forward(self, x):
        x = self.attention_norm(x + self.attention(x))
        return self.ff_norm(x + self.ff(x))


class TransformerEncoder(nn.Module):
    def __init__(self, width=64, n_layers=2, n_heads=4, ff_width=128):
        super().__init__()
        self.layers = nn.ModuleList(
            [TransformerEncoderLayer(width, n_heads, ff_width) for __ in range(n_layers)]
        )

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


def sample_gumbel(shape, generator=None, dtype=torch.float32):
    u = torch.rand(shape, generator=generator, dtype=dtype)
    return -torch.log(-torch.log(u + LOG_EPSILON) + LOG_EPSILON)


def gumbel_softmax_select(logits, temperature=1.0, hard=False, noise=None, generator=None):
    if temperature <= 0:
        raise ValueError(f"Invalid temperature={temperature}. Must be > 0")
    if noise is None:
        noise = sample_gumbel(logits.shape, generator=generator, dtype=logits.dtype)
    soft = forward_op("softmax", (logits + noise.to(logits.device)) / temperature)
    if not hard:
        return soft
    index = soft.argmax(dim=-1)
    one_hot = F.one_hot(index, logits.shape[-1]).to(soft.dtype)
    # straight-through: forward is the one-hot, backward is the soft sample's
    return (one_hot - soft).detach() + soft


class EmbeddingAverage(nn.Module):
    """Mean of piece embeddings per token; padding pieces are excluded from the mean."""

    def __init__(self, num_pieces, embedding_dim, padding_idx=0):
        super().__init__()
        self.embedding_dim = embedding_dim
        self.bag = nn.EmbeddingBag(
            num_pieces, embedding_dim, mode="mean", padding_idx=padding_idx
        )

    def forward(self, piece_ids):
        # piece_ids: (..., n_pieces)
        leading = piece_ids.shape[:-1]
        averaged = self.bag(piece_ids.reshape(-1, piece_ids.shape[-1]))
        return averaged.reshape(*leading, self.embedding_dim)


class SelectorHead(nn.Module):
    """
    Logits beta = C (q W + b) over candidate classes.

    ``C`` is either a learned (n_classes, d_class) matrix or per-sample candidate vectors
    passed to ``forward`` (for selecting input positions or table columns).
    """

    MASKED_LOGIT = -1e9

    def __init__(self, query_dim, class_dim, n_classes=None):
        super().__init__()
        self.projection = nn.Linear(query_dim, class_dim)
        if n_classes is not None:
            self.classes = nn.Parameter(torch.randn(n_classes, class_dim) / math.sqrt(class_dim))
        else:
            self.classes = None

    def forward(self, query, classes=None, mask=None):
        projected = self.projection(query)
        if classes is None:
            if self.classes is None:
                raise ValueError("SelectorHead without a learned class matrix needs classes")
            logits = projected @ self.classes.t()
        else:
            logits = torch.einsum("bcd,bd->bc", classes, projected)
        if mask is not None:
            logits = logits.masked_fill(~mask, self.MASKED_LOGIT)
        return logits


def select(logits, temperature, training, hard=False):
    """Selector distribution: Gumbel-perturbed while training, plain softmax otherwise."""
    if training and temperature is not None:
        return gumbel_softmax_select(logits, temperature=temperature, hard=hard)
    return forward_op("softmax", logits)


class ImageArgumentExtractor(nn.Module):
    """Applies one digit classifier to each of the k images; returns {"digits": (B, k, 10)}."""

    def __init__(self):
        super().__init__()
        self.digit_classifier = DigitClassifier()

    def classifier_for_position(self, position):
        return self.digit_classifier

    def forward(self, batch):
        return {"digits": self.digit_classifier.classify(batch["images"])}


class LookupEstimator(nn.Module):
    def __init__(self, k, hidden_sizes=(300, 100), n_classes=10):
        super().__init__()
        sizes = [10 * k, *hidden_sizes, n_classes]
        self.k = k
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(sizes, sizes[1:]))

    def forward(self, arguments, context=None):
        digits = arguments["digits"]
        if digits.shape[-2] != self.k:
            raise ShapeError(f"Estimator built for k={self.k}, got {digits.shape[-2]} digits")
        x = digits.reshape(digits.shape[0], -1)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = forward_op("relu", x)
        return x


class SumEstimator(nn.Module):
    """LSTM over the digit distributions, a NALU, then an accumulator readout to one value."""

    def __init__(self, lstm_hidden_size=50, nalu_hidden_size=100):
        super().__init__()
        self.encoder = LSTMEncoder(10, lstm_hidden_size)
        self.nalu = NALU(lstm_hidden_size, nalu_hidden_size)
        self.readout = NAC(nalu_hidden_size, 1)

    def forward(self, arguments, context=None):
        h = self.encoder(arguments["digits"])
        return self.readout(self.nalu(h)).squeeze(-1)


class TokenEmbedder(nn.Module):
    """Token vectors: number encodings for numeric tokens, averaged piece embeddings otherwise."""

    def __init__(self, num_pieces, embedding_dim):
        super().__init__()
        self.embedding_average = EmbeddingAverage(num_pieces, embedding_dim)

    def forward(self, piece_ids, number_vectors, is_number):
        words = self.embedding_average(piece_ids)
        return torch.where(is_number.bool().unsqueeze(-1), number_vectors, words)


class TextLogicArgumentExtractor(nn.Module):
    def __init__(self, num_pieces, embedding_dim=128, lstm_hidden_size=50, temperature=1.0):
        super().__init__()
        self.temperature = temperature
        self.token_embedder = TokenEmbedder(num_pieces, embedding_dim)
        self.encoder = LSTMEncoder(embedding_dim, lstm_hidden_size)
        self.first_selector = SelectorHead(lstm_hidden_size, embedding_dim)
        self.second_selector = SelectorHead(lstm_hidden_size, embedding_dim)
        self.operator_selector = SelectorHead(lstm_hidden_size, embedding_dim, n_classes=2)

    def forward(self, batch):
        tokens = self.token_embedder(
            batch["piece_ids"], batch["number_vectors"], batch["is_number"]
        )
        q = self.encoder(tokens, batch["lengths"])
        mask = batch["token_mask"]
        return {
            "first": select(self.first_selector(q, tokens, mask), self.temperature, self.training),
            "second": select(
                self.second_selector(q, tokens, mask), self.temperature, self.training
            ),
            "operator": select(self.operator_selector(q), self.temperature, self.training),
        }


class ComparisonEstimator(nn.Module):
    """MLP over the soft-selected number encodings and operator distribution; 2 logits."""

    def __init__(self, embedding_dim=128, hidden_sizes=(128, 64)):
        super().__init__()
        sizes = [2 * embedding_dim + 2, *hidden_sizes, 2]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(sizes, sizes[1:]))

    def forward(self, arguments, context):
        numbers = context["number_vectors"]
        x = torch.einsum("bl,bld->bd", arguments["first"], numbers)
        y = torch.einsum("bl,bld->bd", arguments["second"], numbers)
        h = forward_op("concat", x, y, arguments["operator"], dim=-1)
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = forward_op("relu", h)
        return h


class TLLArgumentExtractor(nn.Module):
    def __init__(
        self,
        num_pieces,
        n_operations=5,
        embedding_dim=128,
        lstm_hidden_size=50,
        temperature=1.0,
    ):
        super().__init__()
        self.temperature = temperature
        self.token_embedder = TokenEmbedder(num_pieces, embedding_dim)
        self.header_embedder = EmbeddingAverage(num_pieces, embedding_dim)
        self.encoder = LSTMEncoder(embedding_dim, lstm_hidden_size)
        self.operation_selector = SelectorHead(
            lstm_hidden_size, embedding_dim, n_classes=n_operations
        )
        self.column_selector = SelectorHead(lstm_hidden_size, embedding_dim)
        self.argument_selector = SelectorHead(lstm_hidden_size, embedding_dim)

    def forward(self, batch):
        tokens = self.token_embedder(
            batch["piece_ids"], batch["number_vectors"], batch["is_number"]
        )
        q = self.encoder(tokens, batch["lengths"])
        headers = self.header_embedder(batch["header_piece_ids"])
        return {
            "operation": select(self.operation_selector(q), self.temperature, self.training),
            "column": select(self.column_selector(q, headers), self.temperature, self.training),
            "argument": select(
                self.argument_selector(q, tokens, batch["token_mask"]),
                self.temperature,
                self.training,
            ),
        }


class RowLogicEstimator(nn.Module):
    """Per-row 2-class logits for one operation, from (cell, scalar) pairs through a transformer."""

    def __init__(self, embedding_dim=128, n_rows=25, width=64, n_layers=2, n_heads=4):
        super().__init__()
        self.input_projection = nn.Linear(2 * embedding_dim, width)
        self.positions = nn.Parameter(torch.randn(n_rows, width) * 0.02)
        self.encoder = TransformerEncoder(width, n_layers, n_heads, ff_width=2 * width)
        self.classifier = nn.Linear(width, 2)

    def forward(self, cells, scalar):
        n_rows = cells.shape[1]
        if n_rows > self.positions.shape[0]:
            raise ShapeError(f"Got {n_rows} rows, estimator supports {self.positions.shape[0]}")
        pairs = forward_op("concat", cells, scalar.unsqueeze(1).expand_as(cells), dim=-1)
        h = self.input_projection(pairs) + self.positions[:n_rows]
        return self.classifier(self.encoder(h))


class TableLogicEstimator(nn.Module):
    """
    One RowLogicEstimator per operation, mixed by the operation distribution.

    Returns per-row log-probabilities shaped (batch, rows, 2).
    """

    def __init__(
        self, n_operations=5, embedding_dim=128, n_rows=25, width=64, n_layers=2, n_heads=4
    ):
        super().__init__()
        self.per_operation = nn.ModuleList(
            RowLogicEstimator(embedding_dim, n_rows, width, n_layers, n_heads)
            for __ in range(n_operations)
        )

    def forward(self, arguments, context):
        # cell_vectors: (B, columns, rows, d); soft column choice gives (B, rows, d)
        cells = torch.einsum("bc,bcrd->brd", arguments["column"], context["cell_vectors"])
        scalar = torch.einsum("bl,bld->bd", arguments["argument"], context["number_vectors"])
        per_op = torch.stack(
            [forward_op("softmax", estimator(cells, scalar)) for estimator in self.per_operation],
            dim=1,
        )
        mixed = torch.einsum("bo,borc->brc", arguments["operation"], per_op)
        return torch.log(mixed + LOG_EPSILON)


def _double(module, generator):
    module = module.double()
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.rand(p.shape, generator=generator, dtype=torch.float64) - 0.5)
    return module


def _positive_(tensor, generator, scale):
    with torch.no_grad():
        tensor.copy_(torch.rand(tensor.shape, generator=generator, dtype=torch.float64) * scale)
        tensor.add_(scale / 10)


def _ramp_image():
    # strictly increasing toward the bottom-right, so every 2x2 pool keeps that corner
    ramp = torch.arange(IMAGE_SIZE, dtype=torch.float64) / (2 * IMAGE_SIZE)
    return (ramp[:, None] + ramp[None, :]).unsqueeze(0)


def _soft(generator, *shape):
    logits = torch.rand(*shape, generator=generator, dtype=torch.float64).requires_grad_()
    return logits, lambda: forward_op("softmax", logits)


def layer_gradcheck_cases():
    """Finite-difference cases over every layer, checking inputs and parameters."""

    def leaves(module, *inputs):
        return [*inputs, *module.parameters()]

    def dense_build(generator):
        x = torch.rand(3, 4, generator=generator, dtype=torch.float64).requires_grad_()
        w = torch.rand(4, 2, generator=generator, dtype=torch.float64).requires_grad_()
        b = torch.rand(2, generator=generator, dtype=torch.float64).requires_grad_()
        return (lambda: dense(x, w, b, activation="tanh")), [x, w, b]

    def digit_classifier_build(generator):
        module = _double(DigitClassifier(), generator)
        # positive convolutions on a ramp keep every ReLU active and every pool max unique
        for conv, scale in ((module.features.conv1, 0.1), (module.features.conv2, 0.02)):
            _positive_(conv.weight, generator, scale)
            _positive_(conv.bias, generator, scale)
        images = _ramp_image().requires_grad_()
        return (lambda: module(images)), leaves(module, images)

    def lstm_build(generator):
        module = _double(LSTMEncoder(3, 4), generator)
        x = torch.rand(2, 10, 3, generator=generator, dtype=torch.float64).requires_grad_()
        return (lambda: module(x)), leaves(module, x)

    def nac_build(generator):
        module = _double(NAC(3, 2), generator)
        x = torch.rand(2, 3, generator=generator, dtype=torch.float64).requires_grad_()
        return (lambda: module(x)), leaves(module, x)

    def nalu_build(generator):
        module = _double(NALU(3, 2), generator)
        x = (torch.rand(2, 3, generator=generator, dtype=torch.float64) + 0.5).requires_grad_()
        return (lambda: module(x)), leaves(module, x)

    def attention_build(generator):
        module = _double(MultiHeadSelfAttention(width=4, n_heads=2), generator)
        x = torch.rand(1, 3, 4, generator=generator, dtype=torch.float64).requires_grad_()
        return (lambda: module(x)), leaves(module, x)

    def transformer_layer_build(generator):
        module = _double(TransformerEncoderLayer(width=4, n_heads=2, ff_width=6), generator)
        x = torch.rand(1, 3, 4, generator=generator, dtype=torch.float64).requires_grad_()
        return (lambda: module(x)), leaves(module, x)

    def selector_build(generator):
        module = _double(SelectorHead(3, 4), generator)
        q = torch.rand(2, 3, generator=generator, dtype=torch.float64).requires_grad_()
        c = torch.rand(2, 5, 4, generator=generator, dtype=torch.float64).requires_grad_()
        return (lambda: module(q, c)), leaves(module, q, c)

    def gumbel_build(generator):
        logits = torch.rand(2, 3, generator=generator, dtype=torch.float64).requires_grad_()
        noise = sample_gumbel((2, 3), generator=generator, dtype=torch.float64)
        return (lambda: gumbel_softmax_select(logits, 1.0, noise=noise)), [logits]

    def embedding_average_build(generator):
        module = _double(EmbeddingAverage(6, 3), generator)
        ids = torch.tensor([[1, 2, 0], [3, 3, 4]])
        return (lambda: module(ids)), leaves(module)

    def sum_estimator_build(generator):
        module = _double(SumEstimator(lstm_hidden_size=4, nalu_hidden_size=3), generator)
        with torch.no_grad():
            # open input gates and saturate the cell input so hidden states stay positive
            bias = module.encoder.lstm.bias_ih_l0
            bias[:4] += 2.0
            bias[8:12] += 5.0
        logits, digits = _soft(generator, 2, 5, 10)
        return (lambda: module({"digits": digits()})), leaves(module, logits)

    def comparison_estimator_build(generator):
        module = _double(ComparisonEstimator(embedding_dim=3, hidden_sizes=(4, 3)), generator)
        first, first_soft = _soft(generator, 2, 5)
        second, second_soft = _soft(generator, 2, 5)
        operator, operator_soft = _soft(generator, 2, 2)
        numbers = torch.rand(2, 5, 3, generator=generator, dtype=torch.float64).requires_grad_()

        def closure():
            arguments = {
                "first": first_soft(),
                "second": second_soft(),
                "operator": operator_soft(),
            }
            return module(arguments, {"number_vectors": numbers})

        return closure, leaves(module, first, second, operator, numbers)

    def table_logic_estimator_build(generator):
        module = _double(
            TableLogicEstimator(
                n_operations=2, embedding_dim=2, n_rows=3, width=4, n_layers=1, n_heads=2
            ),
            generator,
        )
        operation, operation_soft = _soft(generator, 1, 2)
        column, column_soft = _soft(generator, 1, 2)
        argument, argument_soft = _soft(generator, 1, 4)
        cells = torch.rand(1, 2, 3, 2, generator=generator, dtype=torch.float64).requires_grad_()
        numbers = torch.rand(1, 4, 2, generator=generator, dtype=torch.float64).requires_grad_()

        def closure():
            arguments = {
                "operation": operation_soft(),
                "column": column_soft(),
                "argument": argument_soft(),
            }
            return module(arguments, {"cell_vectors": cells, "number_vectors": numbers})

        return closure, leaves(module, operation, column, argument, cells, numbers)

    return [
        GradcheckCase("dense", dense_build),
        GradcheckCase("digit_classifier", digit_classifier_build, trials=1),
        GradcheckCase("lstm_sequence", lstm_build, trials=3),
        GradcheckCase("nac", nac_build, trials=10),
        GradcheckCase("nalu", nalu_build, trials=10),
        GradcheckCase("multi_head_attention", attention_build, trials=3),
        GradcheckCase("transformer_encoder_layer", transformer_layer_build, trials=3),
        GradcheckCase("selector", selector_build, trials=10),
        GradcheckCase("gumbel_softmax_select", gumbel_build),
        GradcheckCase("embedding_average", embedding_average_build, trials=10),
        GradcheckCase("sum_estimator", sum_estimator_build, trials=3),
        GradcheckCase("comparison_estimator", comparison_estimator_build, trials=5),
        GradcheckCase("table_logic_estimator", table_logic_estimator_build, trials=2),
    ]
