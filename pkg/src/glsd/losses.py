"""Global and local self-distillation losses.

All per-view quantities carry a leading batch axis ``B`` (images); the loss of
a batch is the mean over images of the per-image loss, so ``B = 1`` gives the
single-image objective exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import numerics as nx
from .geometry import geometric_match_batch, similarity_match_batch
from .numerics import Tensor


class Setting(str, Enum):
    VANILLA = "vanilla"
    SIMILARITY = "similarity"
    GEOMETRIC = "geometric"

    @classmethod
    def parse(cls, value) -> "Setting":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown setting {value!r}; expected vanilla|similarity|geometric") from None


@dataclass
class ForwardBundle:
    """Everything the losses need for one batch.

    Teacher entries are plain arrays (no gradient); student entries are
    tensors. ``teacher_views[a]`` is the student-view index that teacher
    entry ``a`` was computed from.
    """

    teacher_global: list[np.ndarray]
    student_global: list[Tensor]
    teacher_dense: list[np.ndarray]
    student_dense: list[Tensor]
    teacher_reps: list[np.ndarray]
    student_reps: list[Tensor]
    teacher_pos: list[np.ndarray]
    student_pos: list[np.ndarray]
    teacher_diag: list[np.ndarray]
    student_diag: list[np.ndarray]
    teacher_views: list[int] = field(default_factory=lambda: [0, 1])
    multicrop: bool = True

    def __post_init__(self):
        if len(self.student_global) < 2:
            raise ValueError("need at least two views")
        for a, v in enumerate(self.teacher_views):
            if self.teacher_dense[a].shape[-2] != self.teacher_pos[a].shape[-2]:
                raise ValueError(f"teacher view {v}: dense rep and positions disagree on K")
        for b, (dense, pos) in enumerate(zip(self.student_dense, self.student_pos)):
            if dense.shape[-2] != pos.shape[-2]:
                raise ValueError(f"student view {b}: dense rep and positions disagree on K")

    @property
    def n_views(self) -> int:
        return len(self.student_global)

    def pairs(self) -> list[tuple[int, int]]:
        """Ordered (teacher entry, student view) pairs of distinct views."""
        return [(a, b) for a, va in enumerate(self.teacher_views)
                for b in range(self.n_views) if b != va]

    def normalizer(self) -> int:
        n = self.n_views
        if self.multicrop:
            return 2 * ((n - 2) + 1)
        return n * (n - 1)


@dataclass
class LossLog:
    """Optional side channel filled by the loss functions."""

    n_terms: int = 0
    mask_total: int = 0
    mask_on: int = 0
    matchings: list = field(default_factory=list)

    @property
    def mask_fill_rate(self) -> float | None:
        return self.mask_on / self.mask_total if self.mask_total else None


def cross_entropy(p, q) -> Tensor:
    """``H(p, q) = -sum_i p(i) log q(i)`` over the last axis; ``p`` is a constant."""
    return nx.cross_entropy(p, q)


def _mean_over_batch(x: Tensor) -> Tensor:
    return nx.mean(x) if x.ndim else x


def global_loss(bundle: ForwardBundle, log: LossLog | None = None) -> Tensor:
    total = None
    for a, b in bundle.pairs():
        term = _mean_over_batch(cross_entropy(bundle.teacher_global[a], bundle.student_global[b]))
        total = term if total is None else total + term
        if log is not None:
            log.n_terms += 1
    return total / bundle.normalizer()


def _local_pair(p_teacher: np.ndarray, q_student: Tensor, target: np.ndarray,
                mask: np.ndarray | None) -> Tensor:
    matched = nx.gather_rows(q_student, target)
    ce = cross_entropy(p_teacher, matched)
    if mask is not None:
        ce = ce * mask.astype(np.float64)
    k = p_teacher.shape[-2]
    return _mean_over_batch(nx.sum(ce, axis=-1) / k)


def local_loss_sim(bundle: ForwardBundle, log: LossLog | None = None) -> Tensor:
    """Each teacher token is paired with the most cosine-similar student token
    of the other view (pre-head representations)."""
    total = None
    for a, b in bundle.pairs():
        target, cos = similarity_match_batch(bundle.teacher_reps[a], bundle.student_reps[b].data)
        term = _local_pair(bundle.teacher_dense[a], bundle.student_dense[b], target, None)
        total = term if total is None else total + term
        if log is not None:
            log.n_terms += 1
            log.mask_total += target.size
            log.mask_on += target.size
            log.matchings.append((a, b, target, cos, None))
    return total / bundle.normalizer()


def local_loss_geo(bundle: ForwardBundle, log: LossLog | None = None) -> Tensor:
    """Each teacher token is paired with the nearest student token centre;
    pairs farther apart than the threshold contribute zero, and the sum is
    still divided by the teacher view's full token count."""
    total = None
    for a, b in bundle.pairs():
        target, dist, mask = geometric_match_batch(
            bundle.teacher_pos[a], bundle.student_pos[b],
            bundle.teacher_diag[a], bundle.student_diag[b])
        term = _local_pair(bundle.teacher_dense[a], bundle.student_dense[b], target, mask)
        total = term if total is None else total + term
        if log is not None:
            log.n_terms += 1
            log.mask_total += mask.size
            log.mask_on += int(mask.sum())
            log.matchings.append((a, b, target, dist, mask))
    return total / bundle.normalizer()


def total_loss(bundle: ForwardBundle, setting, local_weight: float = 1.0,
               log: dict | None = None) -> tuple[Tensor, Tensor, Tensor | None]:
    """Return ``(total, global, local)``; ``local`` is ``None`` for vanilla."""
    setting = Setting.parse(setting)
    glog = LossLog() if log is not None else None
    lg = global_loss(bundle, glog)
    if log is not None:
        log["global"] = glog
    if setting is Setting.VANILLA:
        return lg, lg, None
    llog = LossLog() if log is not None else None
    fn = local_loss_sim if setting is Setting.SIMILARITY else local_loss_geo
    ll = fn(bundle, llog)
    if log is not None:
        log["local"] = llog
    total = lg + ll if local_weight == 1.0 else lg + ll * local_weight
    return total, lg, ll
