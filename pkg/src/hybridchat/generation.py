"""Facts-grounded seq2seq generator with dot-product attention.

Architecture: a 2-layer LSTM context encoder, a 2-layer LSTM facts
encoder whose per-fact hidden sequences are mean-pooled into one vector
each, and a 2-layer LSTM decoder.  At every decode step the previous
top-layer decoder state queries the concatenation of context hiddens
and fact vectors by dot product; the attention context and state are
concatenated, tanh'ed, joined with the previous output token's
embedding, and fed to the decoder stack.  The output distribution is a
softmax over a linear map of [state; attention context].

The decoder consumes the embedding of its previously emitted token in
addition to the attention input; without it the unrolled network could
not condition on the already-generated prefix.  Decoding always starts
from BOS and a bridge-mapped encoder summary.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nncore
from .nncore import autodiff as ad
from .nncore import (
    Adam,
    Linear,
    Model,
    StackedLstm,
    Tensor,
    clip_global_norm,
    init_uniform,
    no_grad,
)
from .nncore.optim import EarlyStopping
from .nncore.checkpoint import load_checkpoint, save_checkpoint
from .textcore import BOS_ID, EOS_ID, PAD_ID, UNK_ID

logger = logging.getLogger(__name__)

NEG_INF = -1e30


@dataclass
class GeneratorConfig:
    vocab_size: int
    embedding_size: int = 256
    hidden_size: int = 256
    num_layers: int = 2
    use_facts: bool = True
    dropout: float = 0.3
    max_len: int = 30

    @classmethod
    def profile(cls, name: str, vocab_size: int) -> "GeneratorConfig":
        """Named hyperparameter profiles.

        seq2seq / seq2seq-facts carry the full training-scale defaults
        (512/512 and 256/256, two LSTM layers, dropout 0.3); desk /
        desk-facts scale down to 64/64 with dropout off for fast tests.
        """
        if name == "seq2seq":
            return cls(vocab_size, embedding_size=512, hidden_size=512, use_facts=False)
        if name == "seq2seq-facts":
            return cls(vocab_size, embedding_size=256, hidden_size=256, use_facts=True)
        if name == "desk":
            return cls(vocab_size, embedding_size=64, hidden_size=64, use_facts=False,
                       dropout=0.0)
        if name == "desk-facts":
            return cls(vocab_size, embedding_size=64, hidden_size=64, use_facts=True,
                       dropout=0.0)
        raise ValueError(f"unknown generator profile {name!r}")


@dataclass
class GeneratorTrainConfig:
    learning_rate: float = 1e-3
    lr_decay: float = 0.5
    validate_every: int = 5000
    patience: int = 10
    batch_size: int = 500
    max_steps: int = 100_000
    clip_norm: float = 5.0
    seed: int = 0
    target_ppl: float | None = None

    @classmethod
    def profile(cls, name: str) -> "GeneratorTrainConfig":
        if name == "seq2seq":
            return cls(learning_rate=1e-4, validate_every=10_000)
        if name == "seq2seq-facts":
            return cls(learning_rate=1e-3, validate_every=5_000)
        if name in ("desk", "desk-facts"):
            return cls(learning_rate=3e-3, validate_every=100, batch_size=25,
                       max_steps=2_000)
        raise ValueError(f"unknown generator profile {name!r}")


class GeneratorModel(Model):
    """Embeddings, both encoders, decoder, bridge, and output projection.

    The facts encoder is always allocated (checkpoints stay layout-stable
    across profiles) but is only exercised when config.use_facts is set and
    an example actually carries facts.
    """

    def __init__(self, config: GeneratorConfig, rng: np.random.Generator,
                 embedding_init: np.ndarray | None = None):
        super().__init__()
        self.config = config
        V, d, H = config.vocab_size, config.embedding_size, config.hidden_size
        if embedding_init is not None:
            if embedding_init.shape != (V, d):
                raise ValueError(f"embedding init shape {embedding_init.shape} != {(V, d)}")
            self.embedding = self.add_param("embedding", embedding_init.astype(np.float64))
        else:
            self.embedding = self.add_param("embedding", init_uniform(rng, (V, d)))
        self.encoder = StackedLstm(self, "encoder", d, H, config.num_layers, rng)
        self.facts_encoder = StackedLstm(self, "facts_encoder", d, H, config.num_layers, rng)
        self.decoder = StackedLstm(self, "decoder", 2 * H + d, H, config.num_layers, rng)
        self.bridge = Linear(self, "bridge", H, H, rng)
        self.out_proj = Linear(self, "out_proj", 2 * H, V, rng)

    def save(self, path: str, vocab_hash: str, optimizer: Adam | None = None) -> None:
        arrays = {name: p.data for name, p in self.params.items()}
        save_checkpoint(path, "generator", vocab_hash, asdict(self.config), arrays,
                        optimizer.state_dict() if optimizer else None)

    @classmethod
    def load(cls, path: str, expected_vocab_hash: str | None = None) -> "GeneratorModel":
        blob = load_checkpoint(path)
        if blob["kind"] != "generator":
            raise ValueError(f"{path} holds a {blob['kind']!r} checkpoint, not a generator")
        if expected_vocab_hash is not None and blob["vocab_hash"] != expected_vocab_hash:
            raise ValueError(f"{path}: vocabulary hash mismatch")
        config = GeneratorConfig(**blob["config"])
        model = cls(config, np.random.default_rng(0))
        for name, p in model.params.items():
            p.data[...] = blob["params"][name]
        return model


@dataclass
class EncodedContext:
    """Top-layer hidden vectors h_1..h_L and the final hidden state."""

    hidden: np.ndarray      # (L, H)
    final: np.ndarray       # (H,)


@dataclass
class FactsSummary:
    """One mean-pooled vector per fact; empty array when no facts."""

    vectors: np.ndarray     # (F, H)

    @property
    def count(self) -> int:
        return self.vectors.shape[0]


# -- batched graph forward ----------------------------------------------------


@dataclass
class EncodedBatch:
    ctx: np.ndarray          # (B, Lc) int ids
    ctx_mask: np.ndarray     # (B, Lc) float 0/1
    facts: np.ndarray        # (B, F, Lf) int ids (F may be 0)
    facts_mask: np.ndarray   # (B, F, Lf) float 0/1
    tgt_in: np.ndarray       # (B, Lt) int ids, BOS-shifted
    tgt_out: np.ndarray      # (B, Lt) int ids, ends with EOS
    tgt_mask: np.ndarray     # (B, Lt) float 0/1

    @property
    def n_target_tokens(self) -> int:
        return int(self.tgt_mask.sum())


def make_batch(examples: list[tuple[list[int], list[list[int]], list[int]]]) -> EncodedBatch:
    """Pad encoded (context, facts, target-with-EOS) triples into arrays."""
    if not examples:
        raise ValueError("empty batch")
    B = len(examples)
    lc = max(len(e[0]) for e in examples)
    nf = max((len(e[1]) for e in examples), default=0)
    lf = max((len(f) for e in examples for f in e[1]), default=0)
    lt = max(len(e[2]) for e in examples)
    if lc == 0:
        raise ValueError("batch contains an empty context")
    if lt == 0:
        raise ValueError("batch contains an empty target")
    ctx = np.full((B, lc), PAD_ID, dtype=np.int64)
    ctx_mask = np.zeros((B, lc))
    facts = np.full((B, nf, lf), PAD_ID, dtype=np.int64)
    facts_mask = np.zeros((B, nf, lf))
    tgt_in = np.full((B, lt), PAD_ID, dtype=np.int64)
    tgt_out = np.full((B, lt), PAD_ID, dtype=np.int64)
    tgt_mask = np.zeros((B, lt))
    for i, (c, fs, t) in enumerate(examples):
        ctx[i, : len(c)] = c
        ctx_mask[i, : len(c)] = 1.0
        for j, f in enumerate(fs):
            if not f:
                continue
            facts[i, j, : len(f)] = f
            facts_mask[i, j, : len(f)] = 1.0
        tgt_in[i, 0] = BOS_ID
        tgt_in[i, 1: len(t)] = t[:-1]
        tgt_out[i, : len(t)] = t
        tgt_mask[i, : len(t)] = 1.0
    return EncodedBatch(ctx, ctx_mask, facts, facts_mask, tgt_in, tgt_out, tgt_mask)


def _carry_states(new_states, old_states, mask_col: np.ndarray):
    """Keep the previous layer states wherever the step mask is zero."""
    m = Tensor(mask_col)
    inv = Tensor(1.0 - mask_col)
    return [
        (h2 * m + h1 * inv, c2 * m + c1 * inv)
        for (h2, c2), (h1, c1) in zip(new_states, old_states)
    ]


def _run_encoder(model: GeneratorModel, encoder: StackedLstm, ids: np.ndarray,
                 mask: np.ndarray, carry: bool):
    """Unroll an encoder; returns (per-step top hiddens, final top hidden).

    With carry=True padded steps hold their state, so the final state is the
    state at each row's true length (context encoder).  The facts encoder
    mean-pools over masked positions instead and does not need the carry.
    """
    B, L = ids.shape
    states = encoder.zero_state(B)
    tops = []
    top = states[-1][0]
    for t in range(L):
        x = ad.embedding(model.embedding, ids[:, t])
        _, new_states = encoder.step(x, states)
        if carry:
            states = _carry_states(new_states, states, mask[:, t: t + 1])
        else:
            states = new_states
        top = states[-1][0]
        tops.append(top)
    return tops, top


def _attention(e_cols: Tensor, col_mask: np.ndarray, s_top: Tensor):
    """Dot-product attention: weights over E's columns, then their weighted sum."""
    B, C, H = e_cols.shape
    scores = ad.reshape(ad.matmul(e_cols, ad.reshape(s_top, (B, H, 1))), (B, C))
    masked = scores * Tensor(col_mask) + Tensor((1.0 - col_mask) * NEG_INF)
    weights = ad.softmax(masked, axis=-1)
    ctx = ad.reshape(ad.matmul(ad.reshape(weights, (B, 1, C)), e_cols), (B, H))
    return weights, ctx


def _fact_vectors(model: GeneratorModel, facts: np.ndarray, facts_mask: np.ndarray):
    """Mean-pooled fact vectors (B, F, H) and a (B, F) presence mask."""
    B, F, Lf = facts.shape
    flat_ids = facts.reshape(B * F, Lf)
    flat_mask = facts_mask.reshape(B * F, Lf)
    tops, _ = _run_encoder(model, model.facts_encoder, flat_ids, flat_mask, carry=False)
    seq = ad.stack(tops, axis=1)                         # (B*F, Lf, H)
    masked = seq * Tensor(flat_mask[:, :, None])
    counts = flat_mask.sum(axis=1)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
    mean = ad.sum_(masked, axis=1) * Tensor(inv[:, None])
    H = model.config.hidden_size
    fbar = ad.reshape(mean, (B, F, H))
    present = (facts_mask.sum(axis=2) > 0).astype(np.float64)
    return fbar, present


def _encode_for_decoding(model: GeneratorModel, batch: EncodedBatch):
    """Shared encoder work: E columns, their mask, and the initial decoder state."""
    B = batch.ctx.shape[0]
    H = model.config.hidden_size
    ctx_tops, ctx_final = _run_encoder(model, model.encoder, batch.ctx, batch.ctx_mask,
                                       carry=True)
    ctx_seq = ad.stack(ctx_tops, axis=1)                 # (B, Lc, H)
    use_facts = model.config.use_facts and batch.facts.size > 0
    if use_facts:
        fbar, present = _fact_vectors(model, batch.facts, batch.facts_mask)
        e_cols = ad.concat([ctx_seq, fbar], axis=1)
        col_mask = np.concatenate([batch.ctx_mask, present], axis=1)
        n_facts = present.sum(axis=1)
        inv = np.where(n_facts > 0, 1.0 / np.maximum(n_facts, 1.0), 0.0)
        fact_avg = ad.sum_(fbar * Tensor(present[:, :, None]), axis=1) * Tensor(inv[:, None])
        summary = ctx_final + fact_avg
    else:
        e_cols = ctx_seq
        col_mask = batch.ctx_mask.copy()
        summary = ctx_final
    s0 = model.bridge(ad.tanh(summary))                  # (B, H)
    zeros = Tensor(np.zeros((B, H)))
    states = [(s0, zeros) for _ in range(model.config.num_layers)]
    return e_cols, col_mask, states


def nll_loss(model: GeneratorModel, batch: EncodedBatch, training: bool = False,
             rng: np.random.Generator | None = None):
    """Teacher-forced negative log-likelihood.

    Mean over the examples of the batch, sum over time steps within each
    example; PAD target positions are masked out.  Returns (scalar tensor,
    number of real target tokens) so callers can derive per-token
    perplexity.
    """
    B, Lt = batch.tgt_in.shape
    dropout = model.config.dropout if training else 0.0
    e_cols, col_mask, states = _encode_for_decoding(model, batch)
    _, att = _attention(e_cols, col_mask, states[-1][0])
    total = None
    for t in range(Lt):
        top_prev = states[-1][0]
        v = ad.tanh(ad.concat([top_prev, att], axis=1))
        x = ad.concat([v, ad.embedding(model.embedding, batch.tgt_in[:, t])], axis=1)
        _, new_states = model.decoder.step(x, states, dropout_rate=dropout, rng=rng,
                                           training=training)
        states = _carry_states(new_states, states, batch.tgt_mask[:, t: t + 1])
        _, att = _attention(e_cols, col_mask, states[-1][0])
        feats = ad.concat([states[-1][0], att], axis=1)
        if dropout > 0.0:
            feats = ad.dropout(feats, dropout, rng, training=True)
        nll_t = ad.cross_entropy_logits(model.out_proj(feats), batch.tgt_out[:, t])
        step_loss = ad.sum_(nll_t * Tensor(batch.tgt_mask[:, t]))
        total = step_loss if total is None else total + step_loss
    return total * (1.0 / B), batch.n_target_tokens


# -- single-example operations -------------------------------------------------


def encode_context(model: GeneratorModel, ctx_ids: list[int]) -> EncodedContext:
    """Run the context encoder left to right over one id sequence."""
    if not ctx_ids:
        raise ValueError("cannot encode an empty context")
    ids = np.asarray([ctx_ids], dtype=np.int64)
    mask = np.ones_like(ids, dtype=np.float64)
    with no_grad():
        tops, final = _run_encoder(model, model.encoder, ids, mask, carry=True)
        hidden = np.stack([t.data[0] for t in tops], axis=0)
    return EncodedContext(hidden=hidden, final=final.data[0].copy())


def encode_facts(model: GeneratorModel, facts_ids: list[list[int]]) -> FactsSummary:
    """Mean-pool each fact's hidden sequence; empty facts are skipped with a warning."""
    H = model.config.hidden_size
    kept = []
    for i, f in enumerate(facts_ids):
        if len(f) == 0:
            logger.warning("skipping empty fact %d of %d", i + 1, len(facts_ids))
            continue
        kept.append(f)
    if not kept:
        return FactsSummary(np.zeros((0, H)))
    lf = max(len(f) for f in kept)
    ids = np.full((1, len(kept), lf), PAD_ID, dtype=np.int64)
    mask = np.zeros((1, len(kept), lf))
    for i, f in enumerate(kept):
        ids[0, i, : len(f)] = f
        mask[0, i, : len(f)] = 1.0
    with no_grad():
        fbar, _ = _fact_vectors(model, ids, mask)
    return FactsSummary(fbar.data[0].copy())


def attention_step(e_matrix: np.ndarray, s_prev: np.ndarray):
    """One attention evaluation on plain arrays: weights, context, tanh features.

    e_matrix has shape (H, L+F) — one column per context hidden or fact
    vector; s_prev is the (H,) query state.
    """
    e_matrix = np.asarray(e_matrix, dtype=np.float64)
    if e_matrix.ndim != 2 or e_matrix.shape[1] == 0:
        raise ValueError("attention needs at least one column to attend over")
    weights = nncore.softmax(e_matrix.T @ s_prev)
    context = e_matrix @ weights
    features = np.tanh(np.concatenate([s_prev, context]))
    return weights, context, features


def decoder_init(model: GeneratorModel, encoded: EncodedContext,
                 facts: FactsSummary) -> np.ndarray:
    """Initial decoder state: bridge(tanh(h_last + mean of fact vectors)).

    The fact term is the zero vector when there are no facts.
    """
    summary = encoded.final.copy()
    if facts.count > 0:
        summary = summary + facts.vectors.mean(axis=0)
    with no_grad():
        s0 = model.bridge(ad.tanh(Tensor(summary[None, :])))
    return s0.data[0].copy()


@dataclass
class DecoderState:
    """Stacked decoder LSTM states plus the cached attention context."""

    layers: list[tuple[np.ndarray, np.ndarray]]   # [(h (B,H), c (B,H)), ...]
    att: np.ndarray                               # (B, H)

    def reindex(self, rows: np.ndarray) -> "DecoderState":
        return DecoderState([(h[rows], c[rows]) for h, c in self.layers], self.att[rows])


class DecodingSession:
    """Frozen-model decoding for one context: holds E and steps hypotheses.

    Steps run without gradient tape; states are plain arrays so beam rows
    can be gathered and pruned cheaply.
    """

    def __init__(self, model: GeneratorModel, ctx_ids: list[int],
                 facts_ids: list[list[int]] | None = None):
        if not ctx_ids:
            raise ValueError("cannot decode from an empty context")
        facts_ids = [f for f in (facts_ids or []) if f]
        if not model.config.use_facts:
            facts_ids = []
        self.model = model
        example = (list(ctx_ids), facts_ids, [EOS_ID])
        batch = make_batch([example])
        with no_grad():
            e_cols, col_mask, states = _encode_for_decoding(model, batch)
            _, att = _attention(e_cols, col_mask, states[-1][0])
        self.e_cols = e_cols.data
        self.col_mask = col_mask
        self._init_state = DecoderState(
            [(h.data.copy(), c.data.copy()) for h, c in states], att.data.copy()
        )

    def initial_state(self) -> DecoderState:
        return self._init_state

    def step(self, state: DecoderState, y_prev: np.ndarray):
        """Advance a batch of hypothesis rows one token.

        y_prev holds each row's previously emitted token (BOS to start).
        Returns (distributions (B, V), new state); the distribution is the
        model's next-token softmax for each row.
        """
        y_prev = np.atleast_1d(np.asarray(y_prev, dtype=np.int64))
        B = y_prev.shape[0]
        e = Tensor(np.broadcast_to(self.e_cols, (B,) + self.e_cols.shape[1:]))
        mask = np.broadcast_to(self.col_mask, (B, self.col_mask.shape[1]))
        with no_grad():
            states = [(Tensor(h), Tensor(c)) for h, c in state.layers]
            top_prev = states[-1][0]
            v = ad.tanh(ad.concat([top_prev, Tensor(state.att)], axis=1))
            x = ad.concat([v, ad.embedding(self.model.embedding, y_prev)], axis=1)
            _, new_states = self.model.decoder.step(x, states)
            _, att = _attention(e, mask, new_states[-1][0])
            feats = ad.concat([new_states[-1][0], att], axis=1)
            probs = ad.softmax(self.model.out_proj(feats), axis=-1)
        new_state = DecoderState([(h.data, c.data) for h, c in new_states], att.data)
        return probs.data, new_state


def decode_step(session: DecodingSession, state: DecoderState, y_prev: int):
    """Single-hypothesis step: returns (distribution over the vocab, new state)."""
    if not 0 <= y_prev < session.model.config.vocab_size:
        raise ValueError(f"invalid token id {y_prev}")
    probs, new_state = session.step(state, np.asarray([y_prev]))
    return probs[0], new_state


@dataclass
class Hypothesis:
    tokens: tuple
    log_likelihood: float
    length: int            # normalization length: tokens emitted incl. EOS

    @property
    def score(self) -> float:
        return self.log_likelihood / self.length


def beam_search(model: GeneratorModel, ctx_ids: list[int],
                facts_ids: list[list[int]] | None = None,
                beam_size: int = 10, max_len: int = 30) -> list[tuple[list[int], float]]:
    """Length-normalized beam search.

    Expands breadth-first keeping the beam_size best unfinished hypotheses
    per step by accumulated log-likelihood; a hypothesis finishes on EOS or
    when max_len tokens are reached.  Finished hypotheses are ranked by
    log-likelihood divided by emitted-token count (EOS included, BOS not).
    PAD, UNK, and BOS are never proposed.  Returns (token ids, score) pairs,
    best first; EOS is stripped from the returned ids.
    """
    if beam_size < 1:
        raise ValueError(f"beam_size must be >= 1, got {beam_size}")
    session = DecodingSession(model, ctx_ids, facts_ids)
    banned = np.array([PAD_ID, UNK_ID, BOS_ID])
    live_tokens: list[tuple] = [()]
    live_ll = np.zeros(1)
    state = session.initial_state()
    finished: list[Hypothesis] = []
    for step_idx in range(1, max_len + 1):
        y_prev = np.array([t[-1] if t else BOS_ID for t in live_tokens], dtype=np.int64)
        probs, new_state = session.step(state, y_prev)
        with np.errstate(divide="ignore"):
            logp = np.log(probs)
        logp[:, banned] = -np.inf
        total = live_ll[:, None] + logp                      # (B, V)
        flat = total.ravel()
        order = np.argsort(-flat, kind="stable")
        next_tokens: list[tuple] = []
        next_ll = []
        next_rows = []
        for idx in order:
            ll = flat[idx]
            if ll == -np.inf:
                break
            row, tok = divmod(int(idx), total.shape[1])
            if tok == EOS_ID:
                finished.append(Hypothesis(live_tokens[row], float(ll), step_idx))
                continue
            if len(next_tokens) < beam_size:
                next_tokens.append(live_tokens[row] + (tok,))
                next_ll.append(float(ll))
                next_rows.append(row)
        if not next_tokens:
            break
        live_tokens = next_tokens
        live_ll = np.array(next_ll)
        state = new_state.reindex(np.array(next_rows))
    else:
        for toks, ll in zip(live_tokens, live_ll):
            finished.append(Hypothesis(toks, float(ll), len(toks)))
    ranked = sorted(finished, key=lambda h: (-h.score, h.tokens))
    return [(list(h.tokens), h.score) for h in ranked]


def greedy_decode(model: GeneratorModel, ctx_ids: list[int],
                  facts_ids: list[list[int]] | None = None,
                  max_len: int = 30) -> list[int]:
    return beam_search(model, ctx_ids, facts_ids, beam_size=1, max_len=max_len)[0][0]


# -- training -------------------------------------------------------------------


@dataclass
class TrainLog:
    history: list[dict] = field(default_factory=list)
    best_metric: float = float("inf")
    best_step: int = 0
    steps_run: int = 0


def perplexity(model: GeneratorModel, examples, batch_size: int = 64) -> float:
    """Per-token perplexity of encoded (ctx, facts, target) triples."""
    total_nll = 0.0
    total_tok = 0
    with no_grad():
        for start in range(0, len(examples), batch_size):
            batch = make_batch(examples[start: start + batch_size])
            loss, n_tok = nll_loss(model, batch, training=False)
            total_nll += float(loss.data) * batch.ctx.shape[0]
            total_tok += n_tok
    return float(np.exp(total_nll / max(total_tok, 1)))


def train_generator(
    model: GeneratorModel,
    train_examples: list[tuple[list[int], list[list[int]], list[int]]],
    valid_examples: list[tuple[list[int], list[list[int]], list[int]]],
    tcfg: GeneratorTrainConfig,
    vocab_hash: str = "",
    ckpt_path: str | None = None,
) -> TrainLog:
    """Adam training over shuffled mini-batches with validation-driven decay.

    Validates every tcfg.validate_every steps on per-token perplexity; the
    best parameters are restored at the end (and written to ckpt_path when
    given).  Raises RuntimeError on a non-finite loss.
    """
    if not train_examples:
        raise ValueError("no training examples")
    seed_seq = np.random.SeedSequence(tcfg.seed)
    shuffle_rng, dropout_rng = [np.random.default_rng(s) for s in seed_seq.spawn(2)]
    opt = Adam(model.params, lr=tcfg.learning_rate)
    stopper = EarlyStopping(tcfg.patience, tcfg.lr_decay)
    log = TrainLog()
    best_params = {k: p.data.copy() for k, p in model.params.items()}

    order = shuffle_rng.permutation(len(train_examples))
    cursor = 0
    for step in range(1, tcfg.max_steps + 1):
        if cursor >= len(order):
            order = shuffle_rng.permutation(len(train_examples))
            cursor = 0
        picks = order[cursor: cursor + tcfg.batch_size]
        cursor += tcfg.batch_size
        batch = make_batch([train_examples[i] for i in picks])
        model.zero_grad()
        loss, _ = nll_loss(model, batch, training=True, rng=dropout_rng)
        if not np.isfinite(loss.data):
            raise RuntimeError(f"training diverged: non-finite loss at step {step}")
        loss.backward()
        clip_global_norm(model.params, tcfg.clip_norm)
        opt.step()
        log.steps_run = step
        if step % tcfg.validate_every == 0 or step == tcfg.max_steps:
            ppl = perplexity(model, valid_examples or train_examples)
            new_lr, should_stop, improved = stopper.update(ppl, opt.lr)
            opt.lr = new_lr
            log.history.append({
                "step": step,
                "train_loss": float(loss.data),
                "valid_ppl": ppl,
                "lr": opt.lr,
            })
            if improved:
                log.best_metric = ppl
                log.best_step = step
                best_params = {k: p.data.copy() for k, p in model.params.items()}
                if ckpt_path:
                    model.save(ckpt_path, vocab_hash, opt)
            if should_stop:
                logger.info("early stopping at step %d (best ppl %.4f)", step, log.best_metric)
                break
            if tcfg.target_ppl is not None and ppl < tcfg.target_ppl:
                logger.info("target perplexity reached at step %d (%.4f)", step, ppl)
                break
    for name, p in model.params.items():
        p.data[...] = best_params[name]
    if ckpt_path:
        model.save(ckpt_path, vocab_hash, opt)
    return log
