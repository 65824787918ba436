"""Parameter containers and the recurrent/dense building blocks.

Models register every trainable array in an ordered dict so optimizer
state, checkpoints, and gradient checks can address parameters by name.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

INIT_SCALE = 0.08


def init_uniform(rng: np.random.Generator, shape, scale: float = INIT_SCALE, dtype=np.float64):
    return rng.uniform(-scale, scale, size=shape).astype(dtype)


def softmax(v: np.ndarray) -> np.ndarray:
    """Stable softmax of a plain vector (or along the last axis of an array)."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("softmax of an empty vector")
    z = v - v.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class Model:
    """Base class holding a name->Parameter registry.

    Training owns a model exclusively (updates mutate parameter arrays in
    place); forward-only use of a frozen model is safe from multiple threads.
    """

    def __init__(self):
        self.params: dict[str, Parameter] = {}

    def add_param(self, name: str, data: np.ndarray) -> Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(data, name)
        self.params[name] = p
        return p

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def set_zero(self) -> None:
        """Zero every parameter in place (degenerate-model tests)."""
        for p in self.params.values():
            p.data[...] = 0.0


class Linear:
    """Affine map x @ W + b with parameters registered on the owning model."""

    def __init__(self, model: Model, name: str, n_in: int, n_out: int,
                 rng: np.random.Generator, dtype=np.float64):
        self.w = model.add_param(f"{name}.w", init_uniform(rng, (n_in, n_out), dtype=dtype))
        self.b = model.add_param(f"{name}.b", np.zeros(n_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.w) + self.b


class LstmCell:
    """Single LSTM cell; gate order in the fused weight matrices is i, f, g, o."""

    def __init__(self, model: Model, name: str, n_in: int, n_hidden: int,
                 rng: np.random.Generator, dtype=np.float64):
        self.n_in = n_in
        self.n_hidden = n_hidden
        self.wx = model.add_param(f"{name}.wx", init_uniform(rng, (n_in, 4 * n_hidden), dtype=dtype))
        self.wh = model.add_param(f"{name}.wh", init_uniform(rng, (n_hidden, 4 * n_hidden), dtype=dtype))
        self.b = model.add_param(f"{name}.b", np.zeros(4 * n_hidden, dtype=dtype))

    def step(self, x: Tensor, h_prev: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
        return lstm_step(self, x, h_prev, c_prev)

    def zero_state(self, batch: int, dtype=np.float64) -> tuple[Tensor, Tensor]:
        z = np.zeros((batch, self.n_hidden), dtype=dtype)
        return Tensor(z), Tensor(z.copy())


def lstm_step(cell: LstmCell, x, h_prev, c_prev) -> tuple[Tensor, Tensor]:
    """One step of the standard four-gate LSTM.

    Accepts (B, n_in)/(B, H) tensors or bare 1-D arrays (promoted to a
    batch of one and squeezed back).  Raises on dimension mismatch.
    """
    squeeze = False
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=np.float64))
    if not isinstance(h_prev, Tensor):
        h_prev = Tensor(np.asarray(h_prev, dtype=np.float64))
    if not isinstance(c_prev, Tensor):
        c_prev = Tensor(np.asarray(c_prev, dtype=np.float64))
    if x.ndim == 1:
        x, h_prev, c_prev = ad.reshape(x, (1, -1)), ad.reshape(h_prev, (1, -1)), ad.reshape(c_prev, (1, -1))
        squeeze = True
    H = cell.n_hidden
    if x.shape[1] != cell.n_in:
        raise ValueError(f"lstm_step: input size {x.shape[1]} != cell input size {cell.n_in}")
    if h_prev.shape[1] != H or c_prev.shape[1] != H:
        raise ValueError(f"lstm_step: state size mismatch (expected hidden size {H})")
    gates = ad.matmul(x, cell.wx) + ad.matmul(h_prev, cell.wh) + cell.b
    i = ad.sigmoid(ad.narrow(gates, 1, 0, H))
    f = ad.sigmoid(ad.narrow(gates, 1, H, H))
    g = ad.tanh(ad.narrow(gates, 1, 2 * H, H))
    o = ad.sigmoid(ad.narrow(gates, 1, 3 * H, H))
    c = f * c_prev + i * g
    h = o * ad.tanh(c)
    if squeeze:
        h, c = ad.reshape(h, (-1,)), ad.reshape(c, (-1,))
    return h, c


class StackedLstm:
    """Stack of LSTM cells; layer l feeds its hidden sequence to layer l+1."""

    def __init__(self, model: Model, name: str, n_in: int, n_hidden: int, n_layers: int,
                 rng: np.random.Generator, dtype=np.float64):
        self.cells = []
        for layer in range(n_layers):
            size_in = n_in if layer == 0 else n_hidden
            self.cells.append(LstmCell(model, f"{name}.l{layer}", size_in, n_hidden, rng, dtype=dtype))
        self.n_hidden = n_hidden

    def zero_state(self, batch: int, dtype=np.float64) -> list[tuple[Tensor, Tensor]]:
        return [cell.zero_state(batch, dtype=dtype) for cell in self.cells]

    def step(self, x: Tensor, states: list[tuple[Tensor, Tensor]],
             dropout_rate: float = 0.0, rng: np.random.Generator | None = None,
             training: bool = False):
        """Advance all layers one step; returns (top hidden, new states).

        Inter-layer dropout is applied to each hidden vector before it feeds
        the next layer (never to recurrent connections).
        """
        new_states = []
        inp = x
        for layer, (cell, (h, c)) in enumerate(zip(self.cells, states)):
            h2, c2 = cell.step(inp, h, c)
            new_states.append((h2, c2))
            inp = h2
            if layer + 1 < len(self.cells) and dropout_rate > 0.0 and training:
                inp = ad.dropout(inp, dropout_rate, rng, training=True)
        return new_states[-1][0], new_states


def masked_carry(new: Tensor, old: Tensor, mask_col: np.ndarray) -> Tensor:
    """Blend new/old states by a (B, 1) 0/1 mask so padded steps hold their state."""
    m = Tensor(mask_col)
    return new * m + old * Tensor(1.0 - mask_col)


def load_pretrained_embeddings(
    vocab_tokens: list[str],
    path: str,
    dim: int,
    rng: np.random.Generator,
    scale: float = INIT_SCALE,
) -> np.ndarray:
    """Initialize an embedding table from a GloVe-format text file.

    Each line: token followed by `dim` floats.  Tokens absent from the file
    fall back to uniform random rows; the PAD row (index 0) is zeroed.
    """
    table = init_uniform(rng, (len(vocab_tokens), dim))
    index = {t: i for i, t in enumerate(vocab_tokens)}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip().split(" ")
            if len(parts) != dim + 1:
                continue
            tok = parts[0]
            if tok in index:
                table[index[tok]] = np.array([float(v) for v in parts[1:]], dtype=np.float64)
    table[0] = 0.0
    return table
