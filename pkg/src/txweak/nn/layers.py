"""GRU and MLP building blocks on top of :mod:`txweak.nn.autograd`.

Variable-length batches use a packed layout: rows are ordered by time step,
and within a step by sequence (longest first), so step ``t`` only touches
the sequences that are still running. Padding never exists, so it can never
leak into an output.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor


def uniform_init(rng: np.random.Generator, shape, bound: float, name: str) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def zeros_param(shape, name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


# -- packing ------------------------------------------------------------------


@dataclass(frozen=True)
class PackedLayout:
    """Row bookkeeping for a batch of variable-length sequences."""

    lengths: np.ndarray        # per sequence, original order
    order: np.ndarray          # sequence indices sorted by length, longest first
    batch_sizes: np.ndarray    # active sequences per step
    offsets: np.ndarray        # first packed row of each step
    index: np.ndarray          # index[i][t] -> packed row, as a flat (seq, pos) lookup
    starts: np.ndarray         # start of each sequence within ``index``
    reverse: np.ndarray        # packed row permutation reversing every sequence

    @property
    def n_rows(self) -> int:
        return int(self.lengths.sum())

    def row(self, seq: int, pos: int) -> int:
        return int(self.index[self.starts[seq] + pos])

    @property
    def last_rows(self) -> np.ndarray:
        return self.index[self.starts + self.lengths - 1]

    @classmethod
    def build(cls, lengths: Sequence[int]) -> "PackedLayout":
        lengths = np.asarray(lengths, dtype=np.int64)
        if lengths.size == 0 or (lengths < 1).any():
            raise ValueError("every sequence needs at least one step")
        order = np.argsort(-lengths, kind="stable")
        max_len = int(lengths.max())
        sorted_len = lengths[order]
        batch_sizes = np.array([(sorted_len > t).sum() for t in range(max_len)], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(batch_sizes)[:-1]]).astype(np.int64)
        rank = np.empty_like(order)
        rank[order] = np.arange(order.size)
        starts = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.int64)
        index = np.empty(int(lengths.sum()), dtype=np.int64)
        reverse = np.empty_like(index)
        for i, n in enumerate(lengths):
            rows = offsets[:n] + rank[i]
            index[starts[i] : starts[i] + n] = rows
            reverse[rows] = rows[::-1]
        return cls(lengths, order, batch_sizes, offsets, index, starts, reverse)

    def pack(self, sequences: Sequence[np.ndarray]) -> np.ndarray:
        """Stack per-sequence ``(len, features)`` arrays into packed rows."""
        width = np.asarray(sequences[0]).shape[1]
        out = np.empty((self.n_rows, width))
        for i, seq in enumerate(sequences):
            out[self.index[self.starts[i] : self.starts[i] + self.lengths[i]]] = seq
        return out

    def unpack(self, packed: np.ndarray) -> list[np.ndarray]:
        return [packed[self.index[s : s + n]] for s, n in zip(self.starts, self.lengths)]


# -- GRU ----------------------------------------------------------------------


class GRUDirection:
    """Parameters of one GRU direction of one layer.

    z = sigmoid(x W_z + h U_z + b_z), r likewise,
    h~ = tanh(x W_h + (r * h) U_h + b_h), h' = (1 - z) * h + z * h~.
    Matrices act on row vectors, so ``W_*`` is ``(input, hidden)``.
    """

    GATES = ("z", "r", "h")

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator | None = None, prefix=""):
        self.input_size = input_size
        self.hidden_size = hidden_size
        bound = 1.0 / np.sqrt(hidden_size)
        rng = rng or np.random.default_rng(0)
        self.W = {g: uniform_init(rng, (input_size, hidden_size), bound, f"{prefix}W_{g}") for g in self.GATES}
        self.U = {g: uniform_init(rng, (hidden_size, hidden_size), bound, f"{prefix}U_{g}") for g in self.GATES}
        self.b = {g: zeros_param((hidden_size,), f"{prefix}b_{g}") for g in self.GATES}

    def parameters(self) -> list[Tensor]:
        return [*self.W.values(), *self.U.values(), *self.b.values()]

    def run(self, packed: Tensor, layout: PackedLayout, h0: Tensor | None = None) -> Tensor:
        """Run over packed input rows, returning packed hidden states."""
        H = self.hidden_size
        if packed.shape[1] != self.input_size:
            raise ValueError(f"GRU expected input width {self.input_size}, got {packed.shape[1]}")
        W = ag.concat([self.W["z"], self.W["r"], self.W["h"]], axis=1)
        b = ag.concat([self.b["z"], self.b["r"], self.b["h"]], axis=0)
        U_zr = ag.concat([self.U["z"], self.U["r"]], axis=1)
        xw = ag.linear(packed, W, b)
        B = int(layout.batch_sizes[0])
        if h0 is None:
            h = Tensor(np.zeros((B, H)))
        else:
            if h0.shape != (B, H):
                raise ValueError(f"initial hidden must be {(B, H)}, got {h0.shape}")
            h = ag.take_rows(h0, layout.order)
        return ag.gru_scan(xw, U_zr, self.U["h"], h, layout.offsets, layout.batch_sizes)


class GRU:
    """Multi-layer, optionally bidirectional GRU over packed sequences."""

    def __init__(self, input_size: int, hidden_size: int, num_layers: int = 1, bidirectional: bool = True,
                 rng: np.random.Generator | None = None, prefix="gru."):
        if input_size < 1 or hidden_size < 1 or num_layers < 1:
            raise ValueError("GRU sizes must be positive")
        rng = rng or np.random.default_rng(0)
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.num_layers = num_layers
        self.bidirectional = bidirectional
        self.layers: list[list[GRUDirection]] = []
        width = input_size
        for layer in range(num_layers):
            dirs = [GRUDirection(width, hidden_size, rng, f"{prefix}l{layer}.fwd.")]
            if bidirectional:
                dirs.append(GRUDirection(width, hidden_size, rng, f"{prefix}l{layer}.bwd."))
            self.layers.append(dirs)
            width = hidden_size * len(dirs)

    @property
    def output_size(self) -> int:
        return self.hidden_size * (2 if self.bidirectional else 1)

    def parameters(self) -> list[Tensor]:
        return [p for dirs in self.layers for d in dirs for p in d.parameters()]

    def forward(self, packed: Tensor, layout: PackedLayout) -> tuple[Tensor, Tensor]:
        """Returns (packed top-layer states, final hidden per sequence).

        Final hiddens are in original sequence order; for a bidirectional
        network they are ``[forward_last, backward_last]`` concatenated.
        """
        x = packed
        last = layout.last_rows
        finals = None
        for dirs in self.layers:
            fwd = dirs[0].run(x, layout)
            if not self.bidirectional:
                x, finals = fwd, ag.take_rows(fwd, last)
                continue
            bwd_rev = dirs[1].run(ag.take_rows(x, layout.reverse), layout)
            finals = ag.concat([ag.take_rows(fwd, last), ag.take_rows(bwd_rev, last)], axis=1)
            x = ag.concat([fwd, ag.take_rows(bwd_rev, layout.reverse)], axis=1)
        return x, finals

    def __call__(self, sequences: Sequence[np.ndarray]) -> Tensor:
        layout = PackedLayout.build([len(s) for s in sequences])
        _, finals = self.forward(Tensor(layout.pack(sequences)), layout)
        return finals


def gru_forward(seq: np.ndarray, direction: GRUDirection, h0=None) -> tuple[np.ndarray, np.ndarray]:
    """Single-sequence recurrence: returns (all hidden states, final hidden)."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[0] == 0:
        raise ValueError("gru_forward needs a non-empty (steps, features) sequence")
    layout = PackedLayout.build([seq.shape[0]])
    h0_t = None if h0 is None else Tensor(np.asarray(h0, dtype=np.float64).reshape(1, -1))
    states = direction.run(Tensor(seq), layout, h0_t).data
    return states, states[-1]


# -- MLP ----------------------------------------------------------------------


class MLP:
    """Affine layers with ReLU between them; the last layer is linear."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator | None = None, prefix="mlp.",
                 zero_last: bool = False):
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ValueError("MLP needs at least input and output sizes, all positive")
        rng = rng or np.random.default_rng(0)
        self.sizes = list(sizes)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            if last and zero_last:
                w = zeros_param((a, b), f"{prefix}{i}.W")
            else:
                w = uniform_init(rng, (a, b), 1.0 / np.sqrt(a), f"{prefix}{i}.W")
            self.weights.append(w)
            self.biases.append(zeros_param((b,), f"{prefix}{i}.b"))

    def parameters(self) -> list[Tensor]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def __call__(self, x: Tensor, dropout: float = 0.0, rng=None, training: bool = False) -> Tensor:
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = ag.linear(x, w, b)
            if i < n - 1:
                x = ag.relu(x)
                x = ag.dropout(x, dropout, rng, training)
        return x


# -- checkpoints ----------------------------------------------------------------

CKPT_MAGIC = b"TXNN"
CKPT_VERSION = 1


def save_params(params: Sequence[Tensor], extra: dict | None = None) -> bytes:
    """Versioned blob: magic, version, JSON header (names, shapes, extra),
    then little-endian float64 data in header order."""
    header = json.dumps({
        "tensors": [[p.name, list(p.shape)] for p in params],
        "extra": extra or {},
    }).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(header)))
    buf.write(header)
    for p in params:
        buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return buf.getvalue()


def load_params(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:4] != CKPT_MAGIC:
        raise ValueError("not a parameter checkpoint")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    off = 12 + hlen
    out = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape)
        out[name] = arr.astype(np.float64)
        off += count * 8
    return out, header["extra"]
