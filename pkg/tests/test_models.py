import pytest
import torch

from estinet.autodiff import ShapeError, run_gradcheck
from estinet.models import (
    NALU,
    DigitClassifier,
    ImageArgumentExtractor,
    LookupEstimator,
    LSTMEncoder,
    MultiHeadSelfAttention,
    SelectorHead,
    SumEstimator,
    TableLogicEstimator,
    TransformerEncoderLayer,
    dense,
    gumbel_softmax_select,
    layer_gradcheck_cases,
    sample_gumbel,
    select,
)


@pytest.fixture(autouse=True)
def seeded():
    torch.manual_seed(0)


def test_dense():
    x = torch.tensor([[1.0, 2.0]])
    w = torch.tensor([[1.0], [-1.0]])
    assert dense(x, w, torch.tensor([0.5])).tolist() == [[-0.5]]
    assert dense(x, w, activation="relu").tolist() == [[0.0]]
    with pytest.raises(ValueError, match="Unknown activation"):
        dense(x, w, activation="swish")


def test_digit_classifier_keeps_leading_dims():
    classifier = DigitClassifier()
    assert classifier(torch.rand(2, 3, 28, 28)).shape == (2, 3, 10)
    assert classifier.classify(torch.rand(4, 28, 28)).sum(-1).tolist() == pytest.approx([1.0] * 4)
    with pytest.raises(ShapeError):
        classifier(torch.rand(2, 27, 28))


def test_image_argument_extractor_shares_one_classifier():
    extractor = ImageArgumentExtractor()
    output = extractor({"images": torch.rand(2, 4, 28, 28)})

    assert output["digits"].shape == (2, 4, 10)
    assert extractor.classifier_for_position(0) is extractor.classifier_for_position(3)


def test_lstm_encoder_uses_last_valid_step():
    encoder = LSTMEncoder(3, 5)
    inputs = torch.rand(2, 4, 3)
    lengths = torch.tensor([2, 4])

    padded = encoder(inputs, lengths)
    truncated = encoder(inputs[:1, :2])

    assert padded.shape == (2, 5)
    assert torch.allclose(padded[0], truncated[0], atol=1e-6)
    with pytest.raises(ValueError):
        encoder(torch.rand(2, 0, 3))
    with pytest.raises(ValueError):
        encoder(inputs, torch.tensor([0, 4]))


def test_nalu_shapes_and_zero_input_is_finite():
    nalu = NALU(3, 2)
    out = nalu(torch.zeros(4, 3))
    assert out.shape == (4, 2)
    assert torch.isfinite(out).all()


def _saturated_nalu(W_hat, M_hat, G):
    nalu = NALU(*W_hat.shape).double()
    with torch.no_grad():
        nalu.nac.W_hat.copy_(W_hat)
        nalu.nac.M_hat.copy_(M_hat)
        nalu.G.copy_(G)
    return nalu


def test_nalu_open_gate_is_additive_identity():
    eye = torch.eye(2, dtype=torch.float64)
    nalu = _saturated_nalu(20 * eye, 40 * eye - 20, torch.full((2, 2), 20.0))

    out = nalu(torch.tensor([[2.0, 3.0]], dtype=torch.float64))

    assert out.tolist() == pytest.approx([[2.0, 3.0]])


def test_nalu_closed_gate_multiplies():
    ones = torch.ones(2, 1, dtype=torch.float64)
    nalu = _saturated_nalu(20 * ones, 20 * ones, -20 * ones)

    out = nalu(torch.tensor([[2.0, 3.0]], dtype=torch.float64))

    assert float(out) == pytest.approx(6.0, rel=1e-4)


def _train_nalu_on_sums(seed, steps=2000):
    torch.manual_seed(seed)
    nalu = NALU(2, 1).double()
    with torch.no_grad():
        nalu.G.zero_()
    optimizer = torch.optim.Adam(nalu.parameters(), lr=0.05)
    for __ in range(steps):
        # operands in [0, 45], so every training sum is within [0, 90]
        x = torch.rand(64, 2, dtype=torch.float64) * 45
        loss = ((nalu(x).squeeze(-1) - x.sum(-1)) ** 2).mean()
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    return float(loss), nalu


@pytest.mark.slow
def test_nalu_extrapolates_addition_beyond_training_range():
    __, nalu = min((_train_nalu_on_sums(seed) for seed in range(3)), key=lambda r: r[0])

    x = 215 + torch.rand(100, 2, dtype=torch.float64) * 20
    with torch.no_grad():
        prediction = nalu(x).squeeze(-1)
    relative_error = ((prediction - x.sum(-1)).abs() / x.sum(-1)).mean()

    assert relative_error < 0.05


def test_attention_rejects_indivisible_heads():
    with pytest.raises(ValueError, match="divisible"):
        MultiHeadSelfAttention(width=6, n_heads=4)


def test_attention_rows_are_distributions():
    attention = MultiHeadSelfAttention(width=8, n_heads=2)
    output, weights = attention(torch.rand(3, 5, 8), return_attention=True)

    assert output.shape == (3, 5, 8)
    assert weights.shape == (3, 2, 5, 5)
    assert torch.allclose(weights.sum(-1), torch.ones(3, 2, 5), atol=1e-6)


def test_single_position_attention_is_the_value_projection():
    attention = MultiHeadSelfAttention(width=4, n_heads=1)
    x = torch.rand(2, 1, 4)

    output, weights = attention(x, return_attention=True)

    assert torch.equal(weights, torch.ones(2, 1, 1, 1))
    assert torch.allclose(output, attention.output(attention.value(x)), atol=1e-6)


def test_single_position_transformer_layer_skips_mixing():
    layer = TransformerEncoderLayer(width=4, n_heads=1, ff_width=8)
    x = torch.rand(2, 1, 4)

    h = layer.attention_norm(x + layer.attention.output(layer.attention.value(x)))

    assert torch.allclose(layer(x), layer.ff_norm(h + layer.ff(h)), atol=1e-6)


def test_gumbel_softmax_select():
    logits = torch.tensor([[1.0, 2.0, 3.0]], requires_grad=True)
    noise = torch.zeros(1, 3)

    soft = gumbel_softmax_select(logits, temperature=1.0, noise=noise)
    hard = gumbel_softmax_select(logits, temperature=1.0, hard=True, noise=noise)

    assert torch.allclose(soft, torch.softmax(logits, -1))
    assert torch.allclose(hard, torch.tensor([[0.0, 0.0, 1.0]]), atol=1e-6)
    hard.sum().backward()
    assert logits.grad is not None
    with pytest.raises(ValueError):
        gumbel_softmax_select(logits, temperature=0.0)


def test_sample_gumbel_is_seeded():
    first = sample_gumbel((5,), generator=torch.Generator().manual_seed(1))
    second = sample_gumbel((5,), generator=torch.Generator().manual_seed(1))
    assert torch.equal(first, second)


def test_gumbel_hard_selection_frequencies_match_softmax():
    logits = torch.tensor([1.0, 0.0, -1.0]).expand(10000, 3)
    generator = torch.Generator().manual_seed(0)

    hard = gumbel_softmax_select(logits, temperature=1.0, hard=True, generator=generator)
    frequencies = torch.bincount(hard.argmax(-1), minlength=3).float() / 10000

    assert torch.allclose(hard.sum(-1), torch.ones(10000))
    assert torch.allclose(frequencies, torch.softmax(logits[0], -1), atol=0.02)


def test_gumbel_straight_through_jacobian_is_the_soft_one():
    logits = torch.tensor([0.3, -0.2, 0.1], dtype=torch.float64)
    noise = sample_gumbel((3,), generator=torch.Generator().manual_seed(2), dtype=torch.float64)
    temperature = 0.7

    def hard(x):
        return gumbel_softmax_select(x, temperature, hard=True, noise=noise)

    def soft(x):
        return gumbel_softmax_select(x, temperature, noise=noise)

    hard_jacobian = torch.autograd.functional.jacobian(hard, logits)
    soft_jacobian = torch.autograd.functional.jacobian(soft, logits)
    p = soft(logits)

    assert torch.allclose(hard(logits).sort().values, torch.tensor([0.0, 0.0, 1.0]).double())
    assert torch.allclose(hard_jacobian, soft_jacobian)
    assert torch.allclose(soft_jacobian, (torch.diag(p) - torch.outer(p, p)) / temperature)


def test_select_is_plain_softmax_outside_training():
    logits = torch.tensor([[0.5, -0.5]])
    assert torch.allclose(select(logits, 1.0, training=False), torch.softmax(logits, -1))


def test_selector_head_masks_candidates():
    head = SelectorHead(query_dim=3, class_dim=4)
    mask = torch.tensor([[True, False, True]])
    logits = head(torch.rand(1, 3), torch.rand(1, 3, 4), mask)

    assert logits.shape == (1, 3)
    assert torch.softmax(logits, -1)[0, 1] == 0.0
    with pytest.raises(ValueError):
        head(torch.rand(1, 3))


def test_lookup_estimator_checks_k():
    estimator = LookupEstimator(k=2)
    digits = torch.softmax(torch.rand(5, 2, 10), -1)
    assert estimator({"digits": digits}).shape == (5, 10)
    with pytest.raises(ShapeError):
        estimator({"digits": torch.softmax(torch.rand(5, 3, 10), -1)})


def test_sum_estimator_handles_any_sequence_length():
    estimator = SumEstimator()
    assert estimator({"digits": torch.softmax(torch.rand(2, 10, 10), -1)}).shape == (2,)
    assert estimator({"digits": torch.softmax(torch.rand(2, 100, 10), -1)}).shape == (2,)


def test_table_logic_estimator_returns_row_log_probabilities():
    estimator = TableLogicEstimator(embedding_dim=8, n_rows=25, width=8, n_layers=1, n_heads=2)
    arguments = {
        "operation": torch.softmax(torch.rand(2, 5), -1),
        "column": torch.softmax(torch.rand(2, 4), -1),
        "argument": torch.softmax(torch.rand(2, 6), -1),
    }
    context = {"cell_vectors": torch.rand(2, 4, 25, 8), "number_vectors": torch.rand(2, 6, 8)}

    output = estimator(arguments, context)

    assert output.shape == (2, 25, 2)
    assert torch.allclose(output.exp().sum(-1), torch.ones(2, 25), atol=1e-5)


def test_layer_gradient_checks_pass():
    results = run_gradcheck(layer_gradcheck_cases(), trials=1)

    assert {
        "digit_classifier",
        "nac",
        "transformer_encoder_layer",
        "sum_estimator",
        "comparison_estimator",
        "table_logic_estimator",
    } <= {r.name for r in results}
    assert all(r.passed for r in results), [r for r in results if not r.passed]
