"""Memory bank of unit-norm projections and the memory-bank contrastive loss.

The loss for a query with label ``y`` over its ``q`` most cosine-similar
bank entries is the negative share of ``exp(similarity)`` mass that falls on
entries labelled ``y``; it lies in ``[-1, 0]``.  Bank entries are constants
with respect to the loss (they are snapshots from earlier iterations).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import InvalidInputError
from .losses import LossValue


class BankEntry(NamedTuple):
    id: int
    vector: np.ndarray
    label: int
    similarity: float


@dataclass
class Neighbors:
    """Padded q-nearest sets for a batch of queries.

    Row ``b`` holds ``count[b]`` valid entries in descending similarity; the
    remainder of the row is masked out.
    """

    slots: np.ndarray  # (B, q) bank slot indices
    ids: np.ndarray  # (B, q)
    labels: np.ndarray  # (B, q)
    sims: np.ndarray  # (B, q) cosine similarities
    mask: np.ndarray  # (B, q) bool

    @property
    def count(self) -> np.ndarray:
        return self.mask.sum(axis=1)


def unit(vector) -> np.ndarray:
    v = np.asarray(vector, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("projection must be finite")
    norm = np.sqrt(np.sum(v * v, axis=-1, keepdims=True))
    if np.any(norm == 0):
        raise InvalidInputError("projection has zero norm")
    return v / norm


class MemoryBank:
    """Fixed-capacity store of one (unit projection, label) pair per sample id."""

    def __init__(self, capacity: int, dim: int, num_classes: int | None = None):
        if capacity < 1 or dim < 1:
            raise InvalidInputError("capacity and dim must be positive")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self.num_classes = num_classes
        self._vectors = np.zeros((self.capacity, self.dim))
        self._labels = np.zeros(self.capacity, dtype=np.int64)
        self._ids = np.zeros(self.capacity, dtype=np.int64)
        self._slot: dict[int, int] = {}

    def __len__(self) -> int:
        return len(self._slot)

    def __contains__(self, sample_id) -> bool:
        return int(sample_id) in self._slot

    def ids(self) -> np.ndarray:
        return self._ids[: len(self)].copy()

    def get(self, sample_id: int) -> tuple[np.ndarray, int]:
        slot = self._slot[int(sample_id)]
        return self._vectors[slot].copy(), int(self._labels[slot])

    def _check_label(self, label) -> int:
        if int(label) != label or label < 0 or (self.num_classes is not None and label >= self.num_classes):
            raise InvalidInputError(f"invalid class label {label!r}")
        return int(label)

    def update(self, sample_id: int, projection, label: int) -> None:
        """Insert or replace the entry for ``sample_id``; the vector is stored unit-normalised."""
        vec = np.asarray(projection, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise InvalidInputError(f"projection must have shape ({self.dim},), got {vec.shape}")
        self.update_batch([sample_id], vec[None, :], [label])

    def update_batch(self, ids: Iterable[int], projections, labels: Iterable[int]) -> None:
        vecs = unit(np.atleast_2d(projections))
        if vecs.shape[1] != self.dim:
            raise InvalidInputError(f"projections must have {self.dim} columns")
        for sample_id, vec, label in zip(ids, vecs, labels):
            label = self._check_label(label)
            sample_id = int(sample_id)
            slot = self._slot.get(sample_id)
            if slot is None:
                if len(self._slot) >= self.capacity:
                    raise InvalidInputError(f"memory bank is full (capacity {self.capacity})")
                slot = len(self._slot)
                self._slot[sample_id] = slot
                self._ids[slot] = sample_id
            self._vectors[slot] = vec
            self._labels[slot] = label

    def similarities(self, query) -> np.ndarray:
        """Cosine similarity of one query against every stored entry, in slot order."""
        u = unit(query)
        # one matrix-vector product per query keeps each row independent of batch size
        return self._vectors[: len(self)] @ u

    def query_batch(self, queries, q: int, exclude_ids: Sequence[int] | None = None) -> Neighbors:
        """q-nearest entries for each row of ``queries``, excluding ``exclude_ids[b]`` from row ``b``.

        Ordering is descending similarity with ties broken by ascending sample id.
        """
        if q < 1:
            raise InvalidInputError(f"q must be >= 1, got {q}")
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        batch = queries.shape[0]
        n = len(self)
        width = min(q, n)
        slots = np.zeros((batch, width), dtype=np.int64)
        if n == 0:
            empty_f = np.zeros((batch, 0))
            return Neighbors(slots, slots.copy(), slots.copy(), empty_f, empty_f.astype(bool))

        units = unit(queries)
        bank = self._vectors[:n]
        sims = np.empty((batch, n))
        for b in range(batch):
            sims[b] = bank @ units[b]
        if exclude_ids is not None:
            for b, sid in enumerate(exclude_ids):
                slot = self._slot.get(int(sid)) if sid is not None else None
                if slot is not None:
                    sims[b, slot] = -np.inf

        ids = self._ids[:n]
        if width == n:
            chosen = np.broadcast_to(np.arange(n), (batch, n)).copy()
        else:
            part = np.argpartition(-sims, width, axis=1)
            chosen = part[:, :width]
            kth = np.take_along_axis(sims, part[:, width : width + 1], axis=1)[:, 0]
            lowest = np.take_along_axis(sims, chosen, axis=1).min(axis=1)
            for b in np.flatnonzero(lowest == kth):
                # tie straddles the cut: resolve exactly by (similarity desc, id asc)
                order = np.lexsort((ids, -sims[b]))
                chosen[b] = order[:width]
        csims = np.take_along_axis(sims, chosen, axis=1)
        order = np.lexsort((ids[chosen], -csims), axis=1)
        chosen = np.take_along_axis(chosen, order, axis=1)
        csims = np.take_along_axis(csims, order, axis=1)
        mask = np.isfinite(csims)
        return Neighbors(
            slots=chosen,
            ids=ids[chosen],
            labels=self._labels[chosen],
            sims=np.where(mask, csims, 0.0),
            mask=mask,
        )

    def query_nearest(self, query, q: int, exclude: int | None = None) -> list[BankEntry]:
        nb = self.query_batch(np.asarray(query)[None, :], q, None if exclude is None else [exclude])
        return [
            BankEntry(int(nb.ids[0, j]), self._vectors[nb.slots[0, j]].copy(), int(nb.labels[0, j]), float(nb.sims[0, j]))
            for j in range(nb.sims.shape[1])
            if nb.mask[0, j]
        ]

    def vectors_of(self, slots: np.ndarray) -> np.ndarray:
        return self._vectors[slots]

    def state_dict(self) -> dict:
        n = len(self)
        return {
            "capacity": self.capacity,
            "dim": self.dim,
            "num_classes": self.num_classes,
            "ids": self._ids[:n].copy(),
            "labels": self._labels[:n].copy(),
            "vectors": self._vectors[:n].copy(),
        }

    @classmethod
    def from_state(cls, state: dict) -> "MemoryBank":
        bank = cls(state["capacity"], state["dim"], state.get("num_classes"))
        ids = np.asarray(state["ids"], dtype=np.int64)
        n = len(ids)
        # restore raw so stored vectors stay bit-identical (no renormalisation)
        bank._ids[:n] = ids
        bank._labels[:n] = np.asarray(state["labels"], dtype=np.int64)
        bank._vectors[:n] = np.asarray(state["vectors"], dtype=np.float64).reshape(n, bank.dim)
        bank._slot = {int(i): s for s, i in enumerate(ids)}
        return bank


def contrastive_terms(sims, same, mask, log_variant: bool = False):
    """Loss values and ``dL/d sims`` for padded similarity rows.

    Rows with no valid neighbour contribute 0.  With ``log_variant`` the loss
    is ``-log`` of the same-label share; rows without a same-label neighbour
    then also contribute 0.
    """
    sims = np.asarray(sims, dtype=np.float64)
    w = np.where(mask, np.exp(sims), 0.0)
    pos = np.where(same, w, 0.0)
    total = w.sum(axis=1)
    pos_total = pos.sum(axis=1)
    has = total > 0
    safe_total = np.where(has, total, 1.0)
    share = pos_total / safe_total
    if not log_variant:
        value = np.where(has, -share, 0.0)
        # dL/ds_i = -pi_i (same_i - share)
        grad = -(w / safe_total[:, None]) * (same.astype(np.float64) - share[:, None])
        grad = np.where(has[:, None], grad, 0.0)
        return value, grad
    ok = pos_total > 0
    safe_pos = np.where(ok, pos_total, 1.0)
    value = np.where(ok, np.log(safe_total) - np.log(safe_pos), 0.0)
    grad = w / safe_total[:, None] - pos / safe_pos[:, None]
    grad = np.where(ok[:, None], grad, 0.0)
    return value, grad


def _chain_to_raw(raw, grad_unit):
    # u = v / |v|;  dL/dv = (g - u (u . g)) / |v|
    norm = np.sqrt(np.sum(raw * raw, axis=-1, keepdims=True))
    u = raw / norm
    return (grad_unit - u * np.sum(u * grad_unit, axis=-1, keepdims=True)) / norm


def mcl_loss(query, label: int, neighbors: Sequence, log_variant: bool = False) -> LossValue:
    """Contrastive loss of one query against an explicit neighbour list.

    ``neighbors`` holds ``(vector, label)`` pairs (or :class:`BankEntry`).
    The returned ``grad_query`` is with respect to ``query`` as passed; a
    non-unit query is normalised internally.
    """
    raw = np.asarray(query, dtype=np.float64)
    u = unit(raw)
    if len(neighbors) == 0:
        return LossValue(value=0.0, grad_query=np.zeros_like(raw))
    vecs = unit(np.stack([np.asarray(nb[0], dtype=np.float64) for nb in neighbors]))
    labs = np.array([int(nb[1]) for nb in neighbors])
    sims = vecs @ u
    value, dsims = contrastive_terms(sims[None, :], (labs == label)[None, :], np.ones((1, len(labs)), bool), log_variant)
    grad_unit = dsims[0] @ vecs
    return LossValue(value=float(value[0]), grad_query=_chain_to_raw(raw, grad_unit))


def batch_mcl(bank: MemoryBank, raw_queries, labels, ids, q: int, log_variant: bool = False):
    """Per-sample contrastive losses and gradients w.r.t. the raw projections.

    Each query excludes its own bank entry.  Returns ``(values, grads, neighbors)``.
    """
    raw = np.asarray(raw_queries, dtype=np.float64)
    labels = np.asarray(labels)
    nb = bank.query_batch(raw, q, exclude_ids=list(ids))
    if nb.sims.shape[1] == 0:
        return np.zeros(raw.shape[0]), np.zeros_like(raw), nb
    same = nb.labels == labels[:, None]
    values, dsims = contrastive_terms(nb.sims, same, nb.mask, log_variant)
    vecs = bank.vectors_of(nb.slots)  # (B, q, d)
    grad_unit = np.einsum("bq,bqd->bd", dsims, vecs)
    return values, _chain_to_raw(raw, grad_unit), nb
