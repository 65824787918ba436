import itertools
import logging
import math

import numpy as np
import pytest

from hybridchat.generation import (
    DecodingSession,
    EarlyStopping,
    EncodedContext,
    FactsSummary,
    GeneratorConfig,
    GeneratorModel,
    GeneratorTrainConfig,
    attention_step,
    beam_search,
    decode_step,
    decoder_init,
    encode_context,
    encode_facts,
    greedy_decode,
    make_batch,
    nll_loss,
    perplexity,
    train_generator,
)
from hybridchat.nncore import Tensor, grad_check, lstm_step, no_grad
from hybridchat.textcore import BOS_ID, EOS_ID, PAD_ID, UNK_ID


def small_model(vocab=12, emb=6, hidden=5, use_facts=True, seed=0):
    cfg = GeneratorConfig(vocab, embedding_size=emb, hidden_size=hidden, use_facts=use_facts,
                          dropout=0.0)
    return GeneratorModel(cfg, np.random.default_rng(seed))


class TestEncodeContext:
    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            encode_context(small_model(), [])

    def test_length_one_equals_single_lstm_steps(self):
        model = small_model()
        out = encode_context(model, [4])
        with no_grad():
            x = Tensor(model.embedding.data[[4]])
            h0, c0 = model.encoder.cells[0].zero_state(1)
            h1, _ = lstm_step(model.encoder.cells[0], x, h0, c0)
            h0b, c0b = model.encoder.cells[1].zero_state(1)
            h2, _ = lstm_step(model.encoder.cells[1], h1, h0b, c0b)
        np.testing.assert_allclose(out.hidden[0], h2.data[0], atol=1e-15)
        np.testing.assert_array_equal(out.hidden[-1], out.final)

    def test_prefix_property(self):
        model = small_model()
        ids = [4, 7, 5, 9, 6]
        full = encode_context(model, ids)
        for k in (1, 2, 4):
            prefix = encode_context(model, ids[:k])
            np.testing.assert_array_equal(full.hidden[:k], prefix.hidden)

    def test_zero_weights_give_zero_hidden(self):
        model = small_model()
        model.set_zero()
        out = encode_context(model, [4, 5, 6])
        np.testing.assert_allclose(out.hidden, 0.0, atol=1e-15)


class TestEncodeFacts:
    def test_mean_of_one_is_the_hidden_vector(self):
        model = small_model()
        summary = encode_facts(model, [[7]])
        with no_grad():
            x = Tensor(model.embedding.data[[7]])
            h0, c0 = model.facts_encoder.cells[0].zero_state(1)
            h1, _ = lstm_step(model.facts_encoder.cells[0], x, h0, c0)
            h0b, c0b = model.facts_encoder.cells[1].zero_state(1)
            h2, _ = lstm_step(model.facts_encoder.cells[1], h1, h0b, c0b)
        np.testing.assert_allclose(summary.vectors[0], h2.data[0], atol=1e-15)

    def test_duplicate_fact_gives_identical_vectors(self):
        model = small_model()
        summary = encode_facts(model, [[4, 5], [4, 5]])
        assert summary.count == 2
        np.testing.assert_array_equal(summary.vectors[0], summary.vectors[1])

    def test_zero_facts(self):
        summary = encode_facts(small_model(), [])
        assert summary.count == 0

    def test_empty_fact_skipped_with_warning(self, caplog):
        model = small_model()
        with caplog.at_level(logging.WARNING):
            summary = encode_facts(model, [[], [4]])
        assert summary.count == 1
        assert any("empty fact" in r.message for r in caplog.records)


class TestAttentionStep:
    def test_identical_columns_uniform(self):
        col = np.array([0.3, -0.8])
        e = np.stack([col, col, col], axis=1)
        a, c, v = attention_step(e, np.array([0.5, 1.0]))
        np.testing.assert_allclose(a, [1 / 3] * 3, atol=1e-12)
        np.testing.assert_allclose(c, col, atol=1e-12)

    def test_single_column(self):
        e = np.array([[1.5], [-0.2]])
        a, c, _ = attention_step(e, np.array([0.1, 0.9]))
        np.testing.assert_allclose(a, [1.0], atol=1e-15)
        np.testing.assert_allclose(c, e[:, 0], atol=1e-15)

    def test_identity_columns_closed_form(self):
        # E = I2, s = (ln2, 0): a = softmax((ln2, 0)) = (2/3, 1/3); c = E a = a
        e = np.eye(2)
        s = np.array([math.log(2.0), 0.0])
        a, c, v = attention_step(e, s)
        np.testing.assert_allclose(a, [2 / 3, 1 / 3], atol=1e-12)
        np.testing.assert_allclose(c, [2 / 3, 1 / 3], atol=1e-12)
        np.testing.assert_allclose(v, np.tanh(np.concatenate([s, c])), atol=1e-15)

    def test_features_strictly_inside_unit_box(self):
        rng = np.random.default_rng(3)
        _, _, v = attention_step(rng.normal(size=(4, 6)), rng.normal(size=4))
        assert np.all(np.abs(v) < 1.0)

    def test_no_columns_rejected(self):
        with pytest.raises(ValueError):
            attention_step(np.zeros((3, 0)), np.zeros(3))


class TestDecoderInit:
    def test_no_facts_uses_context_summary_only(self):
        model = small_model()
        enc = encode_context(model, [4, 5])
        s0 = decoder_init(model, enc, FactsSummary(np.zeros((0, model.config.hidden_size))))
        want = enc.final @ model.bridge.w.data  # tanh then affine
        want = np.tanh(enc.final) @ model.bridge.w.data + model.bridge.b.data
        np.testing.assert_allclose(s0, want, atol=1e-12)

    def test_zero_inputs_give_bridge_bias(self):
        model = small_model()
        model.bridge.b.data[...] = np.arange(model.config.hidden_size) * 0.1
        H = model.config.hidden_size
        s0 = decoder_init(model, EncodedContext(np.zeros((1, H)), np.zeros(H)),
                          FactsSummary(np.zeros((1, H))))
        np.testing.assert_allclose(s0, model.bridge.b.data, atol=1e-15)

    def test_identity_bridge_scalar_case(self):
        model = GeneratorModel(GeneratorConfig(6, embedding_size=3, hidden_size=1, dropout=0.0),
                               np.random.default_rng(0))
        model.bridge.w.data[...] = 1.0
        model.bridge.b.data[...] = 0.0
        s0 = decoder_init(model, EncodedContext(np.ones((1, 1)), np.ones(1)),
                          FactsSummary(np.ones((1, 1))))
        assert s0[0] == pytest.approx(math.tanh(2.0), abs=1e-12)
        assert s0[0] == pytest.approx(0.9640, abs=1e-4)


class TestDecodeStep:
    def test_zero_model_uniform(self):
        model = small_model()
        model.set_zero()
        session = DecodingSession(model, [4, 5], [[6]])
        probs, _ = decode_step(session, session.initial_state(), BOS_ID)
        np.testing.assert_allclose(probs, 1.0 / model.config.vocab_size, atol=1e-12)

    def test_distribution_sums_to_one(self):
        model = small_model(seed=5)
        session = DecodingSession(model, [4, 7, 5], [[6, 8]])
        state = session.initial_state()
        y = BOS_ID
        for _ in range(6):
            probs, state = decode_step(session, state, y)
            assert abs(probs.sum() - 1.0) < 1e-9
            assert np.all(probs >= 0.0)
            y = int(np.argmax(probs))

    def test_invalid_token_rejected(self):
        model = small_model()
        session = DecodingSession(model, [4])
        with pytest.raises(ValueError):
            decode_step(session, session.initial_state(), model.config.vocab_size)

    def test_attention_weights_sum_to_one_and_context_in_hull(self):
        model = small_model(seed=9)
        ids = [4, 7, 5]
        facts = [[6], [8, 9]]
        enc = encode_context(model, ids)
        fs = encode_facts(model, facts)
        e = np.concatenate([enc.hidden, fs.vectors], axis=0).T   # (H, L+F)
        rng = np.random.default_rng(0)
        for _ in range(10):
            s = rng.normal(size=model.config.hidden_size)
            a, c, _ = attention_step(e, s)
            assert abs(a.sum() - 1.0) < 1e-9
            assert np.all(c <= e.max(axis=1) + 1e-12)
            assert np.all(c >= e.min(axis=1) - 1e-12)


class TestNllLoss:
    def test_uniform_model_single_token(self):
        model = small_model(vocab=4)
        model.set_zero()
        batch = make_batch([([2], [], [EOS_ID])])  # context BOS-ish id, target = EOS only
        loss, n_tok = nll_loss(model, batch)
        assert n_tok == 1
        assert float(loss.data) == pytest.approx(math.log(4.0), abs=1e-12)

    def test_near_certain_model_near_zero_loss(self):
        # zero weights + a huge output bias on the target token push its
        # probability to 1 up to float precision, so the loss vanishes
        model = small_model(vocab=6)
        model.set_zero()
        model.out_proj.b.data[4] = 60.0
        batch = make_batch([([5], [], [4])])
        loss, _ = nll_loss(model, batch)
        assert 0.0 <= float(loss.data) < 1e-12

    def test_loss_nonnegative_and_masked(self):
        model = small_model(seed=11)
        batch = make_batch([
            ([4, 5], [[6]], [7, 8, EOS_ID]),
            ([5], [], [9, EOS_ID]),
        ])
        loss, n_tok = nll_loss(model, batch)
        assert float(loss.data) > 0.0
        assert n_tok == 5

    def test_padding_does_not_change_loss(self):
        # same example alone vs padded next to a longer one: per-example loss sums
        model = small_model(seed=13)
        short = ([4, 5], [[6]], [7, EOS_ID])
        long_ = ([5, 6, 7, 8], [[9, 10]], [4, 5, 6, EOS_ID])
        solo, _ = nll_loss(model, make_batch([short]))
        both, _ = nll_loss(model, make_batch([short, long_]))
        other, _ = nll_loss(model, make_batch([long_]))
        assert float(both.data) * 2 == pytest.approx(float(solo.data) + float(other.data),
                                                     rel=1e-10)

    def test_factorization_matches_stepwise_probabilities(self):
        model = small_model(seed=17)
        ctx, facts, tgt = [4, 7], [[5, 6]], [8, 9, 4, EOS_ID]
        loss, _ = nll_loss(model, make_batch([(ctx, facts, tgt)]))
        session = DecodingSession(model, ctx, facts)
        state = session.initial_state()
        logprob = 0.0
        y_prev = BOS_ID
        for y in tgt:
            probs, state = decode_step(session, state, y_prev)
            logprob += math.log(probs[y])
            y_prev = y
        assert math.exp(-float(loss.data)) == pytest.approx(math.exp(logprob), rel=1e-10)

    def test_facts_model_with_no_facts_equals_stripped_configuration(self):
        model = small_model(use_facts=True, seed=19)
        examples = [([4, 5, 6], [], [7, EOS_ID]), ([5], [], [8, 9, EOS_ID])]
        with_facts_flag, _ = nll_loss(model, make_batch(examples))
        model.config.use_facts = False
        stripped, _ = nll_loss(model, make_batch(examples))
        model.config.use_facts = True
        assert float(with_facts_flag.data) == float(stripped.data)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            make_batch([])


class TestGradients:
    def test_nll_gradient_matches_finite_differences(self):
        model = small_model(vocab=10, emb=5, hidden=4, seed=23)
        batch = make_batch([
            ([4, 5, 6], [[7], [8, 9]], [5, 4, EOS_ID]),
            ([6, 7], [[4]], [9, EOS_ID]),
        ])

        def loss():
            out, _ = nll_loss(model, batch)
            return out

        err = grad_check(loss, list(model.params.values()), np.random.default_rng(0),
                         n_samples=80)
        assert err < 1e-4


def enumerate_hypotheses(session, max_len, content_tokens):
    """Exhaustive ≤max_len enumeration under the stepwise model probabilities."""
    results = []
    for length in range(0, max_len + 1):
        for seq in itertools.product(content_tokens, repeat=length):
            state = session.initial_state()
            y_prev = BOS_ID
            ll = 0.0
            for tok in seq:
                probs, state = decode_step(session, state, y_prev)
                ll += math.log(probs[tok])
                y_prev = tok
            if length < max_len:
                probs, _ = decode_step(session, state, y_prev)
                ll += math.log(probs[EOS_ID])
                norm_len = length + 1
            else:
                norm_len = length
            if norm_len == 0:
                continue
            results.append((list(seq), ll / norm_len))
    results.sort(key=lambda item: (-item[1], tuple(item[0])))
    return results


class TestBeamSearch:
    def test_beam_one_equals_argmax_chain(self):
        model = small_model(seed=29)
        ctx, facts = [4, 5], [[6]]
        got = greedy_decode(model, ctx, facts, max_len=8)
        session = DecodingSession(model, ctx, facts)
        state = session.initial_state()
        y_prev = BOS_ID
        want = []
        for _ in range(8):
            probs, state = decode_step(session, state, y_prev)
            probs[[PAD_ID, UNK_ID, BOS_ID]] = -1.0
            tok = int(np.argmax(probs))
            if tok == EOS_ID:
                break
            want.append(tok)
            y_prev = tok
        assert got == want

    def test_matches_exhaustive_enumeration(self):
        # three usable tokens {a=4, b=5, EOS}; all 7 leaves of depth <= 2
        model = small_model(vocab=6, emb=4, hidden=3, seed=31)
        ctx = [4, 5]
        got = beam_search(model, ctx, [[4]], beam_size=9, max_len=2)
        session = DecodingSession(model, ctx, [[4]])
        want = enumerate_hypotheses(session, 2, [4, 5])
        assert len(got) == len(want) == 7
        assert [g[0] for g in got] == [w[0] for w in want]
        np.testing.assert_allclose([g[1] for g in got], [w[1] for w in want], atol=1e-12)

    def test_deterministic(self):
        model = small_model(seed=37)
        a = beam_search(model, [4, 5, 6], [[7]], beam_size=4, max_len=6)
        b = beam_search(model, [4, 5, 6], [[7]], beam_size=4, max_len=6)
        assert a == b

    def test_bad_beam_rejected(self):
        with pytest.raises(ValueError):
            beam_search(small_model(), [4], beam_size=0)

    def test_scores_are_nonpositive(self):
        model = small_model(seed=41)
        for toks, score in beam_search(model, [4, 6], [[5]], beam_size=3, max_len=5):
            assert score <= 0.0
            assert EOS_ID not in toks and BOS_ID not in toks and PAD_ID not in toks


class TestEarlyStopping:
    def test_lr_halves_exactly_on_no_improvement(self):
        stopper = EarlyStopping(patience=10, decay=0.5)
        lr, stop, improved = stopper.update(1.0, 8e-3)
        assert improved and lr == 8e-3
        lr, stop, improved = stopper.update(1.5, lr)
        assert not improved and lr == 4e-3 and not stop

    def test_patience_exhaustion_stops(self):
        stopper = EarlyStopping(patience=3, decay=0.5)
        stopper.update(1.0, 1e-3)
        stops = [stopper.update(2.0, 1e-3)[1] for _ in range(3)]
        assert stops == [False, False, True]

    def test_improvement_resets_patience(self):
        stopper = EarlyStopping(patience=2, decay=0.5)
        stopper.update(1.0, 1e-3)
        stopper.update(2.0, 1e-3)
        stopper.update(0.5, 1e-3)
        assert stopper.bad_count == 0


class TestTrainGenerator:
    def toy_examples(self):
        # 6 deterministic pairs over a 14-token vocab
        data = []
        for i in range(6):
            ctx = [4 + i, 5 + (i % 3)]
            tgt = [6 + (i % 4), 4 + (i % 5), EOS_ID]
            data.append((ctx, [[10 + (i % 3)]], tgt))
        return data

    def test_memorizes_tiny_corpus(self):
        examples = self.toy_examples()
        model = GeneratorModel(GeneratorConfig(14, embedding_size=24, hidden_size=24,
                                               dropout=0.0), np.random.default_rng(1))
        tcfg = GeneratorTrainConfig(learning_rate=5e-3, validate_every=50, batch_size=6,
                                    max_steps=800, seed=1, target_ppl=1.15)
        log = train_generator(model, examples, examples, tcfg)
        assert log.best_metric < 1.2
        assert perplexity(model, examples) < 1.2

    def test_seeded_runs_bit_identical(self):
        examples = self.toy_examples()

        def run():
            model = GeneratorModel(GeneratorConfig(14, embedding_size=8, hidden_size=8,
                                                   dropout=0.1), np.random.default_rng(3))
            tcfg = GeneratorTrainConfig(learning_rate=2e-3, validate_every=10, batch_size=3,
                                        max_steps=30, seed=7)
            return train_generator(model, examples, examples, tcfg).history

        assert run() == run()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_loss_aborts(self):
        examples = self.toy_examples()
        model = GeneratorModel(GeneratorConfig(14, embedding_size=6, hidden_size=6,
                                               dropout=0.0), np.random.default_rng(0))
        model.out_proj.b.data[0] = np.inf
        tcfg = GeneratorTrainConfig(learning_rate=1e-3, validate_every=10, batch_size=2,
                                    max_steps=5, seed=0)
        with pytest.raises(RuntimeError, match="diverged"):
            train_generator(model, examples, examples, tcfg)


class TestCheckpointing:
    def test_roundtrip(self, tmp_path):
        model = small_model(seed=43)
        path = str(tmp_path / "gen.ckpt")
        model.save(path, vocab_hash="abc123")
        loaded = GeneratorModel.load(path, expected_vocab_hash="abc123")
        for name, p in model.params.items():
            np.testing.assert_array_equal(p.data, loaded.params[name].data)
        assert loaded.config == model.config

    def test_vocab_hash_mismatch_rejected(self, tmp_path):
        model = small_model()
        path = str(tmp_path / "gen.ckpt")
        model.save(path, vocab_hash="abc")
        with pytest.raises(ValueError, match="hash"):
            GeneratorModel.load(path, expected_vocab_hash="different")
