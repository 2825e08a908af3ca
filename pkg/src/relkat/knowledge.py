"""Prior-knowledge base and the relevance acquisition/transfer operations.

The knowledge base holds one learnable row per pretraining task.  For an
input, a posterior-knowledge vector is generated from the encoded feature and
a learnable template; its cosine similarity to every row, sharpened by a
temperature softmax, weights an aggregation of the rows, which is fused with
the posterior vector.  A task-similarity penalty ties the aggregate to the
current task's row and a soft orthogonality penalty keeps rows distinct.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DegenerateVectorError, ShapeMismatchError, TaskRegistryError
from .layers import Mlp
from .seeding import rng_for


class KnowledgeBase:
    """Learnable (n_tasks, width) matrix; row i is task i's prior knowledge."""

    def __init__(self, matrix: Tensor, task_ids: list[str]):
        if matrix.data.ndim != 2 or matrix.shape[0] != len(task_ids):
            raise ShapeMismatchError("knowledge_base", matrix.shape, (len(task_ids),))
        if len(set(task_ids)) != len(task_ids):
            raise TaskRegistryError(f"duplicate task ids in {task_ids}")
        self.matrix = matrix
        self.task_ids = list(task_ids)

    @property
    def n_tasks(self) -> int:
        return len(self.task_ids)

    @property
    def width(self) -> int:
        return self.matrix.shape[1]

    def task_index(self, task_id: str) -> int:
        try:
            return self.task_ids.index(task_id)
        except ValueError:
            raise TaskRegistryError(
                f"unknown task {task_id!r}; registered: {self.task_ids}"
            ) from None

    def task_row(self, task_id: str) -> Tensor:
        return ad.row(self.matrix, self.task_index(task_id))

    def named_params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.matrix", self.matrix

    @classmethod
    def create(cls, task_ids: list[str], width: int, seed: int) -> "KnowledgeBase":
        """Seeded Gaussian rows orthonormalized by one Gram-Schmidt sweep, so
        the orthogonality penalty starts at zero."""
        n = len(task_ids)
        if n > width:
            raise TaskRegistryError(
                f"knowledge base at capacity: {n} tasks exceed width {width}"
            )
        rng = rng_for(seed, "kb-init")
        raw = rng.standard_normal((n, width))
        rows = _gram_schmidt(raw)
        return cls(Tensor(rows, requires_grad=True), list(task_ids))


def _gram_schmidt(raw: np.ndarray) -> np.ndarray:
    rows = np.zeros_like(raw)
    for i in range(raw.shape[0]):
        v = raw[i].copy()
        for _ in range(2):  # second sweep kills the fp residue
            for j in range(i):
                v -= (v @ rows[j]) * rows[j]
        norm = np.linalg.norm(v)
        if norm == 0.0:
            raise DegenerateVectorError("gram_schmidt")
        rows[i] = v / norm
    return rows


@dataclass
class PosteriorTemplate:
    """Single learnable template mixed into every posterior-knowledge vector."""

    vector: Tensor

    @classmethod
    def create(cls, width: int, seed: int) -> "PosteriorTemplate":
        rng = rng_for(seed, "template-init")
        return cls(Tensor(rng.standard_normal(width) / np.sqrt(width), requires_grad=True))

    def named_params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.vector", self.vector


class PosteriorGenerator(Mlp):
    """Two-layer tanh MLP from [encoded feature, template] to knowledge width."""

    def __init__(self, encoded_dim: int, kb_width: int, hidden_dim: int, rng):
        super().__init__(encoded_dim + kb_width, hidden_dim, kb_width, rng, depth=2)


class FusionBlock(Mlp):
    """Two-layer tanh MLP fusing [posterior, aggregated prior] back to width E."""

    def __init__(self, kb_width: int, hidden_dim: int, rng):
        super().__init__(2 * kb_width, hidden_dim, kb_width, rng, depth=2)


@dataclass
class RelevanceWeights:
    """Cosine similarities to each knowledge row and their softmax weights.

    ``similarities`` and ``weights`` are (n_tasks,) for a single vector or
    (batch, n_tasks) for a batch.
    """

    similarities: Tensor
    weights: Tensor
    temperature: float


def posterior_knowledge(
    encoded: Tensor, template: PosteriorTemplate, generator: PosteriorGenerator
) -> Tensor:
    """Generate the per-sample posterior-knowledge vector."""
    single = encoded.data.ndim == 1
    x = ad.broadcast_rows(encoded, 1) if single else encoded
    tiled = ad.broadcast_rows(template.vector, x.shape[0])
    out = generator(ad.concat([x, tiled]))
    return ad.squeeze_lead(out) if single else out


def relevance_weights(posterior: Tensor, kb: KnowledgeBase, tau: float) -> RelevanceWeights:
    """Cosine of the posterior against every row, softmaxed at temperature tau."""
    if not tau > 0.0:
        raise ValueError(f"temperature must be positive, got {tau}")
    single = posterior.data.ndim == 1
    x = ad.broadcast_rows(posterior, 1) if single else posterior
    sims = ad.matmul(
        ad.l2_normalize(x, "relevance_weights"),
        ad.transpose(ad.l2_normalize(kb.matrix, "relevance_weights")),
    )
    weights = ad.softmax_with_temperature(sims, tau)
    if single:
        sims = ad.squeeze_lead(sims)
        weights = ad.squeeze_lead(weights)
    return RelevanceWeights(similarities=sims, weights=weights, temperature=tau)


def aggregate_prior(weights: RelevanceWeights, kb: KnowledgeBase) -> Tensor:
    """Weights-convex combination of the knowledge rows."""
    w = weights.weights
    single = w.data.ndim == 1
    x = ad.broadcast_rows(w, 1) if single else w
    if x.shape[1] != kb.n_tasks:
        raise ShapeMismatchError("aggregate_prior", x.shape, kb.matrix.shape)
    out = ad.matmul(x, kb.matrix)
    return ad.squeeze_lead(out) if single else out


def task_similarity_loss(aggregated: Tensor, task_row: Tensor) -> Tensor:
    """Squared cosine distance between the aggregate and the task's own row,
    averaged over the batch when the aggregate is batched."""
    if aggregated.data.ndim == 1:
        cos = ad.cosine_similarity(aggregated, task_row)
        gap = 1.0 - cos
        return ad.mean_all(ad.mul(gap, gap))
    tiled = ad.broadcast_rows(task_row, aggregated.shape[0])
    cos = ad.cosine_similarity(aggregated, tiled)
    gap = 1.0 - cos
    return ad.mean_all(ad.mul(gap, gap))


def orthogonality_loss(kb: KnowledgeBase) -> Tensor:
    """Squared Frobenius distance of the row-normalized Gram matrix from identity."""
    normalized = ad.l2_normalize(kb.matrix, "orthogonality_loss")
    gram = ad.matmul(normalized, ad.transpose(normalized))
    eye = Tensor(np.eye(kb.n_tasks))
    return ad.frobenius_norm_squared(ad.sub(gram, eye))


def gram_offdiagonal_mean(kb: KnowledgeBase) -> float:
    """Mean absolute off-diagonal cosine between knowledge rows."""
    if kb.n_tasks < 2:
        return 0.0
    normalized = kb.matrix.data / np.linalg.norm(kb.matrix.data, axis=1, keepdims=True)
    gram = normalized @ normalized.T
    off = ~np.eye(kb.n_tasks, dtype=bool)
    return float(np.abs(gram[off]).mean())


def fuse(posterior: Tensor, aggregated: Tensor, fusion: FusionBlock) -> Tensor:
    """Fuse posterior and aggregated prior knowledge into one vector."""
    single = posterior.data.ndim == 1
    if single:
        out = fusion(ad.concat([ad.broadcast_rows(posterior, 1), ad.broadcast_rows(aggregated, 1)]))
        return ad.squeeze_lead(out)
    return fusion(ad.concat([posterior, aggregated]))


def append_task(kb: KnowledgeBase, new_task_id: str, seed: int) -> KnowledgeBase:
    """Register a task with a fresh row orthogonal to all existing rows.

    The row is a seeded Gaussian vector Gram-Schmidt-projected against the
    existing rows and scaled to their mean norm; existing rows are copied
    bit-for-bit.
    """
    if new_task_id in kb.task_ids:
        raise TaskRegistryError(f"duplicate id {new_task_id!r}")
    if kb.n_tasks >= kb.width:
        raise TaskRegistryError(
            f"knowledge base at capacity: width {kb.width} cannot hold "
            f"{kb.n_tasks + 1} orthogonal rows"
        )
    rng = rng_for(seed, "kb-append", new_task_id)
    v = rng.standard_normal(kb.width)
    existing = kb.matrix.data
    if kb.n_tasks:
        # project out the whole row span; trained rows need not be mutually
        # orthogonal, so a per-row sweep would leave residue
        q, _ = np.linalg.qr(existing.T)
        for _ in range(2):
            v -= q @ (q.T @ v)
        target_norm = float(np.linalg.norm(existing, axis=1).mean())
    else:
        target_norm = 1.0
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise DegenerateVectorError("append_task")
    new_row = v / norm * target_norm
    matrix = Tensor(np.vstack([existing.copy(), new_row]), requires_grad=True)
    return KnowledgeBase(matrix, [*kb.task_ids, new_task_id])
