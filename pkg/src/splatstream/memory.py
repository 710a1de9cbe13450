"""Spatial memory: working FIFO, sparsified long-term store, attention readout."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .backbone import FeatureMap, Linear, Module
from .errors import DimensionError, StateError
from .tensor import Tensor


@dataclass
class MemoryConfig:
    n_working: int | None = 4  # None = unbounded
    attn_threshold: float | None = 5.0  # None disables sparsification
    top_k: int | None = None  # default 2 * tokens per frame
    depth: int = 2


@dataclass
class _Entry:
    key: Tensor
    value: Tensor
    frame: int
    acc: np.ndarray  # accumulated attention per token


class MemoryBank:
    """Key/value store owned by one reconstruction session."""

    def __init__(self, cfg: MemoryConfig | None = None, tokens_per_frame: int = 64):
        self.cfg = cfg or MemoryConfig()
        self.top_k = self.cfg.top_k if self.cfg.top_k is not None else 2 * tokens_per_frame
        self.reset()

    def reset(self):
        self.working: deque[_Entry] = deque()
        self.lt_key: Tensor | None = None
        self.lt_value: Tensor | None = None
        self.lt_frame = np.zeros(0, dtype=np.int64)
        self.lt_token = np.zeros(0, dtype=np.int64)
        self.lt_acc = np.zeros(0, dtype=np.float64)

    @property
    def n_longterm(self) -> int:
        return int(self.lt_acc.size)

    def __len__(self):
        return sum(e.key.shape[0] for e in self.working) + self.n_longterm

    def is_empty(self):
        return len(self) == 0

    def insert(self, key: FeatureMap | Tensor, value: FeatureMap | Tensor, frame: int):
        key = key.tokens if isinstance(key, FeatureMap) else key
        value = value.tokens if isinstance(value, FeatureMap) else value
        if key.shape[0] != value.shape[0]:
            raise DimensionError(f"key/value token counts differ: {key.shape[0]} vs {value.shape[0]}")
        for e in self.working:
            if e.key.shape[1:] != key.shape[1:] or e.value.shape[1:] != value.shape[1:]:
                raise DimensionError("memory entry dims do not match the bank")
            break
        self.working.append(_Entry(key, value, frame, np.zeros(key.shape[0])))
        n_work = self.cfg.n_working
        while n_work is not None and len(self.working) > n_work:
            self._demote(self.working.popleft())
        self.sparsify()

    def _demote(self, e: _Entry):
        n = e.key.shape[0]
        if self.lt_key is None:
            self.lt_key, self.lt_value = e.key, e.value
        else:
            self.lt_key = tn.concat([self.lt_key, e.key], axis=0)
            self.lt_value = tn.concat([self.lt_value, e.value], axis=0)
        self.lt_frame = np.concatenate([self.lt_frame, np.full(n, e.frame)])
        self.lt_token = np.concatenate([self.lt_token, np.arange(n)])
        self.lt_acc = np.concatenate([self.lt_acc, e.acc])

    def sparsify(self):
        thr = self.cfg.attn_threshold
        if thr is None or self.n_longterm == 0:
            return
        if self.lt_acc.sum() <= thr or self.n_longterm <= self.top_k:
            return
        # primary key: larger acc first; ties -> lower frame id, then lower token index
        order = np.lexsort((self.lt_token, self.lt_frame, -self.lt_acc))
        keep = np.sort(order[: self.top_k])
        self.lt_key = tn.take_rows(self.lt_key, keep)
        self.lt_value = tn.take_rows(self.lt_value, keep)
        self.lt_frame = self.lt_frame[keep]
        self.lt_token = self.lt_token[keep]
        self.lt_acc = self.lt_acc[keep]

    def keys_values(self):
        keys = [e.key for e in self.working]
        values = [e.value for e in self.working]
        if self.lt_key is not None and self.n_longterm:
            keys.insert(0, self.lt_key)
            values.insert(0, self.lt_value)
        if len(keys) == 1:
            return keys[0], values[0]
        return tn.concat(keys, axis=0), tn.concat(values, axis=0)

    def add_attention(self, mass: np.ndarray):
        """Distribute per-token attention mass in ``keys_values`` order."""
        pos = 0
        if self.n_longterm:
            self.lt_acc = self.lt_acc + mass[: self.n_longterm]
            pos = self.n_longterm
        for e in self.working:
            n = e.key.shape[0]
            e.acc = e.acc + mass[pos : pos + n]
            pos += n

    def dump(self) -> dict:
        tokens = [
            {"frame": int(f), "token": int(t), "accumulated_attention": float(a), "store": "longterm"}
            for f, t, a in zip(self.lt_frame, self.lt_token, self.lt_acc)
        ]
        for e in self.working:
            tokens += [
                {"frame": int(e.frame), "token": i, "accumulated_attention": float(a), "store": "working"}
                for i, a in enumerate(e.acc)
            ]
        return {
            "n_working_frames": len(self.working),
            "working_frames": [int(e.frame) for e in self.working],
            "n_longterm": self.n_longterm,
            "tokens": tokens,
        }

    def dump_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.dump(), fh, indent=1)


class MemoryNet(Module):
    """Learned key/value maps and the attention readout layers."""

    def __init__(self, rng, dim_key: int, dim_dec: int, dim_out: int, depth: int = 2):
        self.depth = depth
        self.wk = Linear(rng, dim_key, dim_key)
        self.wv = Linear(rng, dim_dec, dim_out)
        self.res = Linear(rng, dim_key, dim_out)
        self.wq = [Linear(rng, dim_key if i == 0 else dim_out, dim_key) for i in range(depth)]

    def make_key(self, f_q: FeatureMap) -> Tensor:
        return self.wk(f_q.tokens)

    def make_value(self, f_h: FeatureMap) -> Tensor:
        return self.wv(f_h.tokens)

    def query(self, f_q: FeatureMap, bank: MemoryBank, return_weights=False):
        """Fused feature: projection of ``f_q`` plus attention readouts of the bank."""
        if bank.is_empty():
            raise StateError("query before bootstrap: memory bank is empty")
        keys, values = bank.keys_values()
        if keys.shape[1] != f_q.tokens.shape[1]:
            raise DimensionError(f"query dim {f_q.tokens.shape[1]} vs key dim {keys.shape[1]}")
        scale = 1.0 / np.sqrt(keys.shape[1])
        kt = keys.T
        x = self.res(f_q.tokens)
        src = f_q.tokens
        mass = np.zeros(keys.shape[0])
        weights = []
        for i, wq in enumerate(self.wq):
            att = tn.softmax((wq(src) @ kt) * scale)
            x = x + att @ values
            mass += att.data.sum(axis=0)
            weights.append(att.data)
            src = x
        bank.add_attention(mass / len(self.wq))
        out = FeatureMap(x, "fused", f_q.frame)
        return (out, weights) if return_weights else out
