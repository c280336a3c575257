"""Masked NLL, causality, context limits and beam search of the report decoder."""

import itertools
import math

import numpy as np
import pytest
import torch
from torch.func import functional_call

from api.errors import ContextLengthError, DegenerateBatchError, InvalidParameterError
from api.models.lm_decoder import (
    DecoderConfig,
    Hypothesis,
    ReportDecoder,
    TrainingBatch,
    beam_search,
    greedy_decode,
    length_normalized_score,
    loss,
    strip_eos,
)
from api.models.ssm_core import gradient_check, named_parameter_point
from api.services.text import BOS_ID, EOS_ID, PAD_ID

VOCAB = 4
ALPHA = 0.7


def tiny_decoder(kind: str = "ssm", window: int = 64) -> ReportDecoder:
    torch.manual_seed(0)
    return ReportDecoder(DecoderConfig(vocab_size=12, embed_dim=8, n_layers=2, context_window=window, d_state=4, n_heads=2, kind=kind))


# =============================================================================
# Toy language models for the beam oracle
# =============================================================================


def random_log_probs(rng: np.random.Generator) -> np.ndarray:
    logits = rng.standard_normal(VOCAB) * 2.0
    return logits - np.log(np.exp(logits).sum())


def prefix_table(seed: int, depth: int):
    """Next-token log-probabilities for every prefix up to ``depth`` tokens."""
    rng = np.random.default_rng(seed)
    table = {}
    for length in range(depth + 1):
        for prefix in itertools.product(range(VOCAB), repeat=length):
            table[prefix] = random_log_probs(rng)
    return table


def toy_lm(seed: int):
    """
    The enumerable 3-step LM: p(x1) p(x2 | x1) p(x3), V=4, 64 sequences.

    The last step ignores the prefix, so the optimum is the best two-token
    prefix followed by the best last token.
    """
    rng = np.random.default_rng(seed)
    first = random_log_probs(rng)
    second = {(x,): random_log_probs(rng) for x in range(VOCAB)}
    last = random_log_probs(rng)
    table = {(): first, **second}
    for pair in itertools.product(range(VOCAB), repeat=2):
        table[pair] = last
    return table


def table_step(table):
    return lambda prefixes: np.stack([table[tuple(p)] for p in prefixes])


def sequence_log_prob(table, tokens) -> float:
    total = 0.0
    for i, tok in enumerate(tokens):
        total += float(table[tuple(tokens[:i])][tok])
    return total


def brute_force(table, max_len: int, eos_id):
    """Best complete sequence by length-normalized score; ties go to the smallest token tuple."""
    candidates = []
    for length in range(1, max_len + 1):
        for tokens in itertools.product(range(VOCAB), repeat=length):
            if eos_id is not None and eos_id in tokens[:-1]:
                continue
            if length < max_len and (eos_id is None or tokens[-1] != eos_id):
                continue
            candidates.append(tokens)
    return min(candidates, key=lambda t: (-length_normalized_score(sequence_log_prob(table, t), len(t), ALPHA), t))


# =============================================================================
# Loss
# =============================================================================


class TestLoss:
    def test_uniform_logits(self):
        logits = torch.zeros(2, 5, 7)
        targets = torch.randint(0, 7, (2, 5))
        mask = torch.ones(2, 5, dtype=torch.bool)
        assert loss(logits, targets, mask).item() == pytest.approx(math.log(7))
        assert loss(logits, targets, mask, reduction="sum").item() == pytest.approx(10 * math.log(7), rel=1e-6)

    def test_unmasked_positions_do_not_count(self):
        torch.manual_seed(0)
        logits = torch.randn(1, 6, 5)
        targets = torch.randint(0, 5, (1, 6))
        mask = torch.tensor([[False, False, False, True, True, False]])
        base = loss(logits, targets, mask)
        scrambled = logits.clone()
        scrambled[:, [0, 1, 2, 5]] = torch.randn(1, 4, 5) * 10
        assert torch.equal(loss(scrambled, targets, mask), base)

    def test_hand_value(self):
        logits = torch.log(torch.tensor([[[0.5, 0.25, 0.25], [0.1, 0.1, 0.8]]]))
        targets = torch.tensor([[0, 2]])
        mask = torch.tensor([[True, True]])
        assert loss(logits, targets, mask).item() == pytest.approx(-(math.log(0.5) + math.log(0.8)) / 2, rel=1e-6)

    def test_empty_mask(self):
        with pytest.raises(DegenerateBatchError):
            loss(torch.zeros(1, 3, 4), torch.zeros(1, 3, dtype=torch.long), torch.zeros(1, 3, dtype=torch.bool))

    def test_shape_and_reduction_checks(self):
        with pytest.raises(InvalidParameterError):
            loss(torch.zeros(1, 3, 4), torch.zeros(1, 2, dtype=torch.long), torch.ones(1, 2, dtype=torch.bool))
        with pytest.raises(InvalidParameterError):
            loss(torch.zeros(1, 2, 4), torch.zeros(1, 2, dtype=torch.long), torch.ones(1, 2, dtype=torch.bool), "max")


# =============================================================================
# Decoder
# =============================================================================


class TestDecoder:
    def test_config_validation(self):
        with pytest.raises(InvalidParameterError):
            DecoderConfig(vocab_size=3)
        with pytest.raises(InvalidParameterError):
            DecoderConfig(vocab_size=10, kind="rnn")
        with pytest.raises(InvalidParameterError):
            DecoderConfig(vocab_size=10, embed_dim=10, n_heads=4, kind="attention")

    def test_build_batch_masks_prompt(self):
        decoder = tiny_decoder()
        prompt = torch.randn(2, 5, 8)
        reports = torch.tensor([[7, 8, EOS_ID, PAD_ID], [9, 10, 11, EOS_ID]])
        batch = decoder.build_batch(prompt, reports)
        assert batch.inputs.shape == (2, 9, 8)
        assert not batch.mask[:, :5].any()
        assert batch.mask[0, 5:].tolist() == [True, True, True, False]
        assert batch.mask[1, 5:].all()
        assert torch.equal(batch.targets[:, 5:], reports)
        assert torch.equal(batch.inputs[:, 5], decoder.embed_tokens(torch.full((2,), BOS_ID)))
        assert torch.equal(batch.inputs[1, 6], decoder.embed_tokens(torch.tensor(9)))

    def test_mask_on_prompt_rejected(self):
        with pytest.raises(InvalidParameterError):
            TrainingBatch(
                inputs=torch.zeros(1, 3, 2),
                targets=torch.zeros(1, 3, dtype=torch.long),
                mask=torch.tensor([[True, False, True]]),
                prompt_length=2,
            )

    @pytest.mark.parametrize("kind", ["ssm", "attention"])
    def test_causal(self, kind):
        decoder = tiny_decoder(kind).eval()
        inputs = torch.randn(1, 10, 8)
        perturbed = inputs.clone()
        perturbed[:, 6] += 3.0
        with torch.no_grad():
            a = decoder.forward_embeddings(inputs)
            b = decoder.forward_embeddings(perturbed)
        assert torch.allclose(a[:, :6], b[:, :6], atol=1e-6)
        assert not torch.allclose(a[:, 6], b[:, 6])

    def test_context_window(self):
        decoder = tiny_decoder(window=8)
        assert decoder.forward_embeddings(torch.randn(1, 8, 8)).shape == (1, 8, 12)
        with pytest.raises(ContextLengthError):
            decoder.forward_embeddings(torch.randn(1, 9, 8))

    def test_decode_respects_window(self):
        decoder = tiny_decoder(window=12).eval()
        tokens = decoder.beam_search(torch.randn(1, 6, 8), beam_width=2, max_len=50)
        assert len(tokens) <= 12 - 6 - 1
        assert EOS_ID not in tokens

    def test_width_one_is_greedy(self):
        decoder = tiny_decoder().eval()
        prompt = torch.randn(1, 4, 8)
        assert decoder.beam_search(prompt, beam_width=1, max_len=10) == decoder.greedy_decode(prompt, max_len=10)

    def test_gradient_check(self):
        torch.manual_seed(1)
        decoder = ReportDecoder(DecoderConfig(vocab_size=6, embed_dim=4, n_layers=1, d_state=2, d_conv=2)).double()
        prompt = torch.randn(2, 3, 4, dtype=torch.float64)
        reports = torch.tensor([[4, 5, EOS_ID], [5, EOS_ID, PAD_ID]])

        def loss_fn(params):
            logits, batch = functional_call(decoder, params, (prompt, reports))
            return loss(logits, batch.targets, batch.mask)

        assert gradient_check(loss_fn, named_parameter_point(decoder), max_checks_per_param=6) < 1e-4


# =============================================================================
# Beam search
# =============================================================================


class TestBeamSearch:
    def test_length_normalized_score(self):
        assert length_normalized_score(-2.0, 4) == pytest.approx(-2.0 / 4**0.7)
        assert Hypothesis(tokens=(1, 2), log_prob=-1.0).score(1.0) == pytest.approx(-0.5)

    def test_strip_eos(self):
        assert strip_eos([5, 6, EOS_ID, 7]) == [5, 6]
        assert strip_eos([5, 6]) == [5, 6]

    def test_invalid_arguments(self):
        step = lambda prefixes: np.zeros((len(prefixes), VOCAB))
        with pytest.raises(InvalidParameterError):
            beam_search(step, beam_width=0, max_len=3)
        with pytest.raises(InvalidParameterError):
            beam_search(step, beam_width=2, max_len=0)

    @pytest.mark.parametrize("width", [1, 2, 4, 8])
    def test_prefix_independent_lm_is_exact_for_any_width(self, width):
        for seed in range(50):
            rng = np.random.default_rng(seed)
            per_step = [random_log_probs(rng) for _ in range(3)]
            table = {p: per_step[len(p)] for n in range(3) for p in itertools.product(range(VOCAB), repeat=n)}
            best = beam_search(table_step(table), beam_width=width, max_len=3, length_penalty=ALPHA, eos_id=None)
            assert best.tokens == brute_force(table, 3, None)
            assert best.tokens == tuple(int(np.argmax(v)) for v in per_step)

    @pytest.mark.parametrize("width", [4, 8])
    def test_toy_lm_is_exact_from_vocabulary_width(self, width):
        for seed in range(50):
            table = toy_lm(seed)
            best = beam_search(table_step(table), beam_width=width, max_len=3, length_penalty=ALPHA, eos_id=None)
            assert best.tokens == brute_force(table, 3, None), f"seed {seed}"

    def test_toy_lm_defeats_greedy_somewhere(self):
        misses = 0
        for seed in range(50):
            table = toy_lm(seed)
            misses += tuple(greedy_decode(table_step(table), 3, eos_id=None)) != brute_force(table, 3, None)
        assert misses > 0

    def test_best_score_non_decreasing_in_width(self):
        for seed in range(50):
            table = toy_lm(seed)
            scores = [
                beam_search(table_step(table), beam_width=k, max_len=3, length_penalty=ALPHA, eos_id=None).score(ALPHA)
                for k in (1, 2, 4, 8)
            ]
            assert scores == sorted(scores), f"seed {seed}: {scores}"

    def test_exhaustive_width_bounds_every_width(self):
        for seed in range(50):
            step = table_step(prefix_table(seed, depth=2))
            exact = beam_search(step, beam_width=16, max_len=3, length_penalty=ALPHA, eos_id=None).score(ALPHA)
            for k in (1, 2, 4, 8):
                assert beam_search(step, beam_width=k, max_len=3, length_penalty=ALPHA, eos_id=None).score(ALPHA) <= exact + 1e-12

    @pytest.mark.parametrize("eos_id", [None, 2])
    def test_width_sixteen_is_exact(self, eos_id):
        for seed in range(50):
            table = prefix_table(seed, depth=2)
            best = beam_search(table_step(table), beam_width=16, max_len=3, length_penalty=ALPHA, eos_id=eos_id)
            assert best.tokens == brute_force(table, 3, eos_id), f"seed {seed}"

    def test_width_one_matches_greedy_decode(self):
        for seed in range(20):
            table = prefix_table(seed, depth=2)
            beam = beam_search(table_step(table), beam_width=1, max_len=3, eos_id=2)
            assert list(beam.tokens) == greedy_decode(table_step(table), 3, eos_id=2)

    def test_finished_hypotheses_leave_the_beam(self):
        # eos is certain after the first token, so every beam finishes at length 2
        def step(prefixes):
            rows = []
            for p in prefixes:
                rows.append(np.log([0.1, 0.1, 0.7, 0.1]) if not p else np.log([1e-9, 1e-9, 1.0 - 3e-9, 1e-9]))
            return np.stack(rows)

        best = beam_search(step, beam_width=4, max_len=10, eos_id=2)
        assert best.tokens == (2,)

    def test_ties_break_towards_smaller_ids(self):
        uniform = lambda prefixes: np.full((len(prefixes), VOCAB), -math.log(VOCAB))
        assert beam_search(uniform, beam_width=3, max_len=2, eos_id=None).tokens == (0, 0)
        assert greedy_decode(uniform, 2, eos_id=None) == [0, 0]

    def test_accepts_tensor_steps(self):
        step = lambda prefixes: torch.log_softmax(torch.tensor([[0.0, 3.0, 0.0, 0.0]]).expand(len(prefixes), -1), -1)
        assert beam_search(step, beam_width=2, max_len=3, eos_id=None).tokens == (1, 1, 1)
