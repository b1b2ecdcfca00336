"""Incremental reader with a fixed-size entity memory.

Per token the reader computes a pre-recurrent state, decides via sigmoid
gates whether the token mentions an entity and whether it refers back to
one, attends over memory keys, splits the entity mass into per-cell
update and overwrite gates, decays per-cell salience, rewrites memory
keys/values as a gated three-way blend, and advances a GRU hidden state
that mixes in the salience-weighted memory summary.

All quantities are autodiff tensors, so losses built on the returned
gate records differentiate end to end through the whole recurrence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "ReaderConfig",
    "ModelParams",
    "MemoryState",
    "GateRecord",
    "ReadResult",
    "Model",
    "GateInvariantError",
    "init_params",
    "initial_memory",
    "gru_step",
    "pre_recurrent",
    "entity_reference_gates",
    "memory_attention",
    "update_overwrite_gates",
    "salience_step",
    "memory_state_step",
    "recurrent_step",
    "read_sequence",
    "read_token_ids",
    "sample_gumbel",
    "trace_records",
]


class GateInvariantError(RuntimeError):
    """An internal gate identity was violated beyond float tolerance."""


@dataclass(frozen=True)
class ReaderConfig:
    """Architecture and gating hyperparameters.

    Half-lives are converted to per-step decay rates as
    ``gamma = exp(log(0.5) / half_life)``, so the salience halves after
    ``entity_half_life`` entity mentions or ``nonentity_half_life``
    ordinary tokens.
    """

    cells: int = 2
    dim_embed: int = 300
    dim_key: int = 16
    dim_value: int = 300
    dim_hidden: int = 300
    entity_half_life: float = 4.0
    nonentity_half_life: float = 30.0
    tau: float = 1.0
    dropout: float = 0.5

    def __post_init__(self):
        if self.cells < 1:
            raise ValueError(f"cells must be >= 1, got {self.cells}")
        for name in ("dim_embed", "dim_key", "dim_value", "dim_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.entity_half_life <= 0 or self.nonentity_half_life <= 0:
            raise ValueError("half-lives must be positive")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def gamma_entity(self) -> float:
        return math.exp(math.log(0.5) / self.entity_half_life)

    @property
    def gamma_nonentity(self) -> float:
        return math.exp(math.log(0.5) / self.nonentity_half_life)


def _expected_shapes(config: ReaderConfig, vocab_size: int) -> dict[str, tuple[int, ...]]:
    dx, dk, dv, dh = config.dim_embed, config.dim_key, config.dim_value, config.dim_hidden
    shapes: dict[str, tuple[int, ...]] = {
        "embed": (vocab_size, dx),
        "pre.h": (dh, dh),
        "pre.x": (dx, dh),
        "gate.entity": (dh,),
        "gate.ref": (dh,),
        "gate.mem.w": (dh,),
        "gate.mem.b": (),
        "query.w1": (dh, dk),
        "query.b1": (dk,),
        "query.w2": (dk, dk),
        "query.b2": (dk,),
        "attn.bias": (),
        "keycand.w1": (dh, dk),
        "keycand.b1": (dk,),
        "keycand.w2": (dk, dk),
        "keycand.b2": (dk,),
        "valcand.w": (dh, dv),
        "valcand.b": (dv,),
        "lm.out": (vocab_size, dh),
    }
    for prefix, din, dim in (("gru.", dx, dh), ("gruk.", dk, dk), ("gruv.", dv, dv)):
        for gate in ("update", "reset", "cand"):
            shapes[f"{prefix}{gate}.x"] = (din, dim)
            shapes[f"{prefix}{gate}.h"] = (dim, dim)
            shapes[f"{prefix}{gate}.b"] = (dim,)
    if dv != dh:
        shapes["memproj.w"] = (dv, dh)
    return shapes


class ModelParams:
    """The model's named trainable tensors, shape-checked against a config."""

    def __init__(self, tensors: dict[str, Tensor], config: ReaderConfig, vocab_size: int):
        expected = _expected_shapes(config, vocab_size)
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        if missing or extra:
            raise ad.ShapeError(f"params: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ad.ShapeError(
                    f"params: {name} has shape {tensors[name].shape}, expected {shape}"
                )
        self._tensors = dict(tensors)
        self.vocab_size = vocab_size

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def items(self):
        return self._tensors.items()

    def as_dict(self) -> dict[str, Tensor]:
        return dict(self._tensors)

    def trainable(self) -> dict[str, Tensor]:
        return {n: t for n, t in self._tensors.items() if t.requires_grad}

    def data_map(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._tensors.items()}

    def load_data(self, data: dict[str, np.ndarray]) -> None:
        for name, arr in data.items():
            t = self._tensors[name]
            if t.data.shape != arr.shape:
                raise ad.ShapeError(f"params: {name} has shape {arr.shape}, expected {t.data.shape}")
            t.data = np.array(arr, dtype=t.data.dtype)


def init_params(
    config: ReaderConfig,
    vocab_size: int,
    rng: np.random.Generator,
    embed_scale: float = 0.5,
) -> ModelParams:
    """Seeded parameter initialization: scaled Gaussians for weights, zero biases."""
    tensors: dict[str, Tensor] = {}
    for name, shape in _expected_shapes(config, vocab_size).items():
        if name == "embed":
            data = rng.normal(0.0, embed_scale, size=shape)
        elif name.endswith(".b") or name in ("attn.bias", "gate.mem.b"):
            data = np.zeros(shape)
        elif len(shape) == 2:
            data = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
        else:
            data = rng.normal(0.0, 1.0 / math.sqrt(shape[0] or 1), size=shape)
        tensors[name] = ad.parameter(data, name)
    return ModelParams(tensors, config, vocab_size)


@dataclass(frozen=True)
class MemoryState:
    """Per-cell keys, values and saliences, plus the recurrent hidden state."""

    keys: Tensor  # (N, dim_key)
    values: Tensor  # (N, dim_value)
    salience: Tensor  # (N,)
    hidden: Tensor  # (dim_hidden,)


def initial_memory(config: ReaderConfig) -> MemoryState:
    """All-zero memory; zero salience forces the first mention to overwrite."""
    return MemoryState(
        keys=Tensor(np.zeros((config.cells, config.dim_key))),
        values=Tensor(np.zeros((config.cells, config.dim_value))),
        salience=Tensor(np.zeros(config.cells)),
        hidden=Tensor(np.zeros(config.dim_hidden)),
    )


@dataclass(frozen=True)
class GateRecord:
    """Everything the reader decided at one token, as live tape tensors."""

    token_index: int
    entity: Tensor  # scalar gate: token mentions an entity
    reference: Tensor  # scalar gate: token refers back; reference <= entity
    memory_mix: Tensor  # scalar gate on the memory summary in the recurrence
    decay: Tensor  # scalar salience decay factor for this step
    attention: Tensor  # (N,) query match per cell
    update: Tensor  # (N,)
    overwrite: Tensor  # (N,)
    copy: Tensor  # (N,)
    salience: Tensor  # (N,) post-step
    query: Tensor
    key_candidate: Tensor
    value_candidate: Tensor
    summary: Tensor


@dataclass(frozen=True)
class ReadResult:
    hidden_states: list[Tensor]
    records: list[GateRecord]
    memory: MemoryState


@dataclass
class Model:
    """A reader ready to run: parameters, architecture config and vocabulary."""

    params: ModelParams
    config: ReaderConfig
    vocab: "Vocabulary"  # noqa: F821  (entreader.data.Vocabulary; kept untyped to avoid a cycle)


def gru_step(params, prefix: str, x: Tensor, h: Tensor) -> Tensor:
    """One GRU cell step; ``h`` may be a (N, D) batch against a single (D,) input."""
    z = ad.sigmoid(x @ params[prefix + "update.x"] + h @ params[prefix + "update.h"] + params[prefix + "update.b"])
    r = ad.sigmoid(x @ params[prefix + "reset.x"] + h @ params[prefix + "reset.h"] + params[prefix + "reset.b"])
    n = ad.tanh(x @ params[prefix + "cand.x"] + (r * h) @ params[prefix + "cand.h"] + params[prefix + "cand.b"])
    return (1.0 - z) * h + z * n


def pre_recurrent(h_prev: Tensor, x: Tensor, params) -> Tensor:
    """tanh blend of the previous hidden state and the current input embedding."""
    return ad.tanh(h_prev @ params["pre.h"] + x @ params["pre.x"])


def entity_reference_gates(h_tilde: Tensor, params) -> tuple[Tensor, Tensor]:
    """Entity gate e and back-reference gate r = sigmoid(.) * e, so r <= e."""
    e = ad.sigmoid(params["gate.entity"] @ h_tilde)
    r = ad.sigmoid(params["gate.ref"] @ h_tilde) * e
    return e, r


def _query_vector(h_tilde: Tensor, params) -> Tensor:
    hidden = ad.tanh(h_tilde @ params["query.w1"] + params["query.b1"])
    return hidden @ params["query.w2"] + params["query.b2"]


def memory_attention(h_tilde: Tensor, keys: Tensor, r: Tensor, params) -> tuple[Tensor, Tensor]:
    """Reference-gated attention over cells, against a null option of logit 0.

    The learnable bias shifts every cell logit relative to the null
    entry, so a large bias means existing cells absorb the reference
    mass and a new entity is unlikely.  Returns (per-cell attention,
    query); the attention sums to at most r, with the remainder on the
    null option.
    """
    q = _query_vector(h_tilde, params)
    cell_logits = keys @ q + params["attn.bias"]
    n = keys.shape[0]
    all_logits = ad.concat([cell_logits, Tensor(np.zeros(1))])
    probs = ad.softmax(all_logits)
    alpha = r * probs[0:n]
    return alpha, q


def sample_gumbel(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.gumbel(size=n)


def update_overwrite_gates(
    alpha: Tensor,
    s_prev: Tensor,
    e: Tensor,
    tau: float,
    gumbel_noise: np.ndarray | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Split the entity mass into per-cell update, overwrite and copy gates.

    Updates are the attention clipped by twice the previous salience, so
    one update can at most triple a cell's salience.  The leftover
    entity mass overwrites, preferring low-salience cells through a
    (Gumbel-)softmax over -s_prev at temperature tau; deterministic mode
    (no noise) uses the plain softmax.
    """
    u = ad.minimum(alpha, 2.0 * s_prev)
    spare = e - u.sum()
    if float(spare.data) < -1e-9:
        raise GateInvariantError(
            f"overwrite mass {float(spare.data):.3e} is negative beyond tolerance"
        )
    spare = ad.clip(spare, 0.0, None)  # sheds only float dust, never real mass
    scores = -s_prev if gumbel_noise is None else -s_prev + Tensor(gumbel_noise)
    pick = ad.softmax(scores * (1.0 / tau))
    o = spare * pick
    copy = ad.clip(1.0 - u - o, 0.0, 1.0)
    return u, o, copy


def salience_step(
    s_prev: Tensor,
    u: Tensor,
    o: Tensor,
    copy: Tensor,
    e: Tensor,
    config: ReaderConfig,
) -> tuple[Tensor, Tensor]:
    """Exponential decay of copied salience plus the fresh update/overwrite mass."""
    lam = e * config.gamma_entity + (1.0 - e) * config.gamma_nonentity
    s = ad.clip(lam * copy * s_prev + u + o, 0.0, 1.0)
    return s, lam


def _key_candidate(h_tilde: Tensor, params) -> Tensor:
    hidden = ad.tanh(h_tilde @ params["keycand.w1"] + params["keycand.b1"])
    return ad.tanh(hidden @ params["keycand.w2"] + params["keycand.b2"]) + hidden


def _value_candidate(h_tilde: Tensor, params) -> Tensor:
    return ad.tanh(h_tilde @ params["valcand.w"] + params["valcand.b"])


def memory_state_step(
    mem: MemoryState,
    h_tilde: Tensor,
    u: Tensor,
    o: Tensor,
    copy: Tensor,
    params,
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Blend per cell: GRU-merged update, fresh overwrite candidate, or copy."""
    k_cand = _key_candidate(h_tilde, params)
    v_cand = _value_candidate(h_tilde, params)
    k_upd = gru_step(params, "gruk.", k_cand, mem.keys)
    v_upd = gru_step(params, "gruv.", v_cand, mem.values)
    n = mem.keys.shape[0]
    u_col = ad.reshape(u, (n, 1))
    o_col = ad.reshape(o, (n, 1))
    c_col = ad.reshape(copy, (n, 1))
    keys = u_col * k_upd + o_col * k_cand + c_col * mem.keys
    values = u_col * v_upd + o_col * v_cand + c_col * mem.values
    return keys, values, k_cand, v_cand


def recurrent_step(
    h_prev: Tensor,
    x: Tensor,
    mem: MemoryState,
    h_tilde: Tensor,
    params,
) -> tuple[Tensor, Tensor, Tensor]:
    """GRU update of the hidden state over a salience-gated memory summary.

    The mixing gate is a sigmoid of the pre-recurrent state clipped by
    the total salience, so an empty memory is ignored.
    """
    summary = mem.salience @ mem.values
    if "memproj.w" in params:
        summary = summary @ params["memproj.w"]
    c_raw = ad.sigmoid(params["gate.mem.w"] @ h_tilde + params["gate.mem.b"])
    c = ad.minimum(c_raw, mem.salience.sum())
    mixed = (1.0 - c) * h_prev + c * summary
    h = gru_step(params, "gru.", x, mixed)
    return h, c, summary


def read_sequence(
    embeddings: Sequence[Tensor],
    params,
    config: ReaderConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    gumbel_noise: np.ndarray | None = None,
) -> ReadResult:
    """Run the reader over a sequence of input embeddings.

    Starts from an all-zero memory and hidden state.  In train mode,
    dropout is applied to the pre-recurrent and hidden states (embedding
    dropout happens at lookup, see :func:`read_token_ids`) and the
    overwrite softmax is perturbed with Gumbel noise; pass
    ``gumbel_noise`` of shape (T, cells) to freeze the noise, e.g. for
    gradient checks.  Eval mode is deterministic.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if not embeddings:
        raise ValueError("read_sequence: empty input sequence")
    train = mode == "train"
    if train and rng is None and (config.dropout > 0 or gumbel_noise is None):
        raise ValueError("train mode needs an rng (or frozen gumbel noise and zero dropout)")
    if gumbel_noise is not None and gumbel_noise.shape != (len(embeddings), config.cells):
        raise ad.ShapeError(
            f"gumbel_noise: shape {gumbel_noise.shape}, expected {(len(embeddings), config.cells)}"
        )

    mem = initial_memory(config)
    hidden_states: list[Tensor] = []
    records: list[GateRecord] = []
    for t, x in enumerate(embeddings):
        try:
            h_tilde = pre_recurrent(mem.hidden, x, params)
            if train and config.dropout > 0:
                h_tilde = ad.dropout(h_tilde, config.dropout, rng)
            e, r = entity_reference_gates(h_tilde, params)
            alpha, q = memory_attention(h_tilde, mem.keys, r, params)
            if train:
                noise = gumbel_noise[t] if gumbel_noise is not None else sample_gumbel(rng, config.cells)
            else:
                noise = None
            u, o, copy = update_overwrite_gates(alpha, mem.salience, e, config.tau, noise)
            s_new, lam = salience_step(mem.salience, u, o, copy, e, config)
            keys, values, k_cand, v_cand = memory_state_step(mem, h_tilde, u, o, copy, params)
            mem = MemoryState(keys=keys, values=values, salience=s_new, hidden=mem.hidden)
            h, c, summary = recurrent_step(mem.hidden, x, mem, h_tilde, params)
            if train and config.dropout > 0:
                h = ad.dropout(h, config.dropout, rng)
            mem = MemoryState(keys=keys, values=values, salience=s_new, hidden=h)
        except ad.NumericError as err:
            raise ad.NumericError(f"token {t}: {err}") from err
        hidden_states.append(h)
        records.append(
            GateRecord(
                token_index=t,
                entity=e,
                reference=r,
                memory_mix=c,
                decay=lam,
                attention=alpha,
                update=u,
                overwrite=o,
                copy=copy,
                salience=s_new,
                query=q,
                key_candidate=k_cand,
                value_candidate=v_cand,
                summary=summary,
            )
        )
    return ReadResult(hidden_states=hidden_states, records=records, memory=mem)


def read_token_ids(
    token_ids: Sequence[int],
    params,
    config: ReaderConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    gumbel_noise: np.ndarray | None = None,
) -> ReadResult:
    """Look up embedding rows for token ids (with embedding dropout in train
    mode) and read the sequence."""
    if not token_ids:
        raise ValueError("read_token_ids: empty input sequence")
    rows = ad.take_rows(params["embed"], np.asarray(token_ids, dtype=np.intp))
    if mode == "train" and config.dropout > 0:
        if rng is None:
            raise ValueError("train mode needs an rng")
        rows = ad.dropout(rows, config.dropout, rng)
    embeds = [rows[t] for t in range(len(token_ids))]
    return read_sequence(embeds, params, config, mode=mode, rng=rng, gumbel_noise=gumbel_noise)


def trace_records(result: ReadResult, tokens: Sequence[str]) -> Iterator[dict]:
    """Yield one export record per token for the gate/salience timeline.

    Re-asserts the mass identity sum(u + o) == e at emit time.
    """
    for rec in result.records:
        e = float(rec.entity.data)
        mass = float(rec.update.data.sum() + rec.overwrite.data.sum())
        if abs(mass - e) > 1e-6:
            raise GateInvariantError(
                f"token {rec.token_index}: update+overwrite mass {mass:.9f} != entity gate {e:.9f}"
            )
        yield {
            "token_index": rec.token_index,
            "token_text": tokens[rec.token_index],
            "e": e,
            "r": float(rec.reference.data),
            "c": float(rec.memory_mix.data),
            "lambda": float(rec.decay.data),
            "cells": [
                {
                    "alpha": float(rec.attention.data[i]),
                    "u": float(rec.update.data[i]),
                    "o": float(rec.overwrite.data[i]),
                    "copy": float(rec.copy.data[i]),
                    "salience": float(rec.salience.data[i]),
                }
                for i in range(rec.update.shape[0])
            ],
        }
