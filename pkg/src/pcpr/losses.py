"""Training objectives with analytic gradients w.r.t. student descriptors.

Every loss takes a (B, d) descriptor matrix plus index tuples into it and
returns a :class:`LossResult` whose ``grad`` has the same shape as the
student matrix. Teacher descriptors are constants. All reductions are means.
"""

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DegenerateAngle, EmptyTupleSet

ZERO_NORM = 1e-12


class DistillKind(str, Enum):
    ANGULAR = "angular"
    EUCLIDEAN = "euclidean"
    POINT = "point"
    NONE = "none"


@dataclass(frozen=True)
class TripletSpec:
    margin: float = 0.2

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError(f"triplet margin must be >= 0, got {self.margin}")


@dataclass(frozen=True)
class DistillSpec:
    kind: DistillKind = DistillKind.ANGULAR
    margin: float = 0.01
    lambda_init: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", DistillKind(self.kind))
        if self.margin < 0 or self.lambda_init < 0:
            raise ValueError("distillation margin and lambda_init must be >= 0")


@dataclass(frozen=True)
class ScheduleSpec:
    total_epochs: int = 60

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ValueError(f"total_epochs must be >= 1, got {self.total_epochs}")


@dataclass
class LossResult:
    value: float
    grad: np.ndarray
    count: int = 0  # tuples that contributed to the mean
    skipped: int = 0  # tuples dropped as degenerate


def _rows(descriptors):
    return np.atleast_2d(np.asarray(descriptors, dtype=np.float64))


def _index(tuples, width):
    idx = np.asarray(tuples, dtype=np.intp)
    if idx.size == 0:
        return idx.reshape(0, width)
    return idx.reshape(-1, width)


def _unit(diff):
    """Row norms and unit vectors; rows with norm below ZERO_NORM map to zero."""
    norm = np.sqrt((diff**2).sum(axis=-1))
    safe = np.where(norm < ZERO_NORM, 1.0, norm)
    unit = np.where((norm < ZERO_NORM)[..., None], 0.0, diff / safe[..., None])
    return norm, unit


def triplet_loss(descriptors, triplets, spec=TripletSpec()):
    """Mean hinge ``max(|a-p| - |a-n| + margin, 0)`` over (anchor, positive, negative) rows."""
    v = _rows(descriptors)
    idx = _index(triplets, 3)
    grad = np.zeros_like(v)
    if len(idx) == 0:
        return LossResult(0.0, grad)
    a, p, n = v[idx[:, 0]], v[idx[:, 1]], v[idx[:, 2]]
    d_ap, u_ap = _unit(a - p)
    d_an, u_an = _unit(a - n)
    hinge = d_ap - d_an + spec.margin
    active = hinge > 0.0
    scale = active[:, None] / len(idx)
    np.add.at(grad, idx[:, 0], scale * (u_ap - u_an))
    np.add.at(grad, idx[:, 1], -scale * u_ap)
    np.add.at(grad, idx[:, 2], scale * u_an)
    return LossResult(float(np.where(active, hinge, 0.0).mean()), grad, count=len(idx))


def angle_cosine(v_i, v_j, v_k):
    """Cosine of the angle at vertex ``v_j`` formed with ``v_i`` and ``v_k``."""
    v_i, v_j, v_k = (np.asarray(x, dtype=np.float64) for x in (v_i, v_j, v_k))
    a, b = v_i - v_j, v_k - v_j
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < ZERO_NORM or nb < ZERO_NORM:
        raise DegenerateAngle("angle vertex coincides with an endpoint")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def huber(x):
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    out = np.where(ax <= 1.0, 0.5 * x * x, ax - 0.5)
    return float(out) if out.ndim == 0 else out


def huber_grad(x):
    return np.clip(x, -1.0, 1.0)


def _cosines(v, idx):
    na, ua = _unit(v[idx[:, 0]] - v[idx[:, 1]])
    nb, ub = _unit(v[idx[:, 2]] - v[idx[:, 1]])
    phi = (ua * ub).sum(axis=1)
    return phi, na, ua, nb, ub


def sa_loss(student, teacher, tuples, spec=DistillSpec()):
    """Structure-aware (angular) distillation.

    Each tuple ``(i, j, k)`` contributes ``max(huber(phi_teacher - phi_student) - margin, 0)``
    where phi is the cosine of the angle at vertex ``j``. Tuples degenerate in
    either model are skipped and reported in ``skipped``.
    """
    s, t = _rows(student), _rows(teacher)
    idx = _index(tuples, 3)
    if len(idx) == 0:
        raise EmptyTupleSet("sa_loss needs at least one tuple")
    grad = np.zeros_like(s)
    phi_s, na, ua, nb, ub = _cosines(s, idx)
    phi_t, nta, _, ntb, _ = _cosines(t, idx)
    ok = (na >= ZERO_NORM) & (nb >= ZERO_NORM) & (nta >= ZERO_NORM) & (ntb >= ZERO_NORM)
    count = int(ok.sum())
    if count == 0:
        return LossResult(0.0, grad, count=0, skipped=len(idx))
    diff = phi_t - phi_s
    term = huber(diff) - spec.margin
    active = ok & (term > 0.0)
    value = float(np.where(active, term, 0.0).sum() / count)

    # d term / d phi_student = -huber'(diff)
    coef = np.where(active, -huber_grad(diff), 0.0) / count
    safe_na = np.where(ok, na, 1.0)[:, None]
    safe_nb = np.where(ok, nb, 1.0)[:, None]
    d_i = (ub - phi_s[:, None] * ua) / safe_na * coef[:, None]
    d_k = (ua - phi_s[:, None] * ub) / safe_nb * coef[:, None]
    np.add.at(grad, idx[:, 0], d_i)
    np.add.at(grad, idx[:, 2], d_k)
    np.add.at(grad, idx[:, 1], -(d_i + d_k))
    return LossResult(value, grad, count=count, skipped=len(idx) - count)


def euclid_distill(student, teacher, pairs, spec=DistillSpec(kind=DistillKind.EUCLIDEAN)):
    """Mean ``huber(|t_i - t_j| - |s_i - s_j|)`` over index pairs."""
    s, t = _rows(student), _rows(teacher)
    idx = _index(pairs, 2)
    if len(idx) == 0:
        raise EmptyTupleSet("euclid_distill needs at least one pair")
    d_s, u_s = _unit(s[idx[:, 0]] - s[idx[:, 1]])
    d_t = np.sqrt(((t[idx[:, 0]] - t[idx[:, 1]]) ** 2).sum(axis=1))
    diff = d_t - d_s
    coef = -huber_grad(diff)[:, None] / len(idx)
    grad = np.zeros_like(s)
    np.add.at(grad, idx[:, 0], coef * u_s)
    np.add.at(grad, idx[:, 1], -coef * u_s)
    return LossResult(float(huber(diff).mean()), grad, count=len(idx))


def point_distill(student, teacher, spec=None):
    """Mean squared L2 drift of each descriptor from its teacher."""
    s, t = _rows(student), _rows(teacher)
    delta = s - t
    return LossResult(float((delta**2).sum(axis=1).mean()), 2.0 * delta / len(s), count=len(s))


def relaxation_weight(epoch, schedule, spec=DistillSpec()):
    """Sigmoid decay of the distillation weight over one training step."""
    return spec.lambda_init / (1.0 + math.exp(10.0 * (epoch / schedule.total_epochs - 0.5)))


def combined_loss(triplet, distill, weight):
    if distill is None or weight == 0.0:
        return LossResult(triplet.value, triplet.grad.copy(), triplet.count)
    return LossResult(
        triplet.value + weight * distill.value,
        triplet.grad + weight * distill.grad,
        triplet.count,
    )


def distillation_loss(kind, student, teacher, triplets, spec):
    """Dispatch on ``kind`` using the batch's mined triplets as the structure to preserve.

    Angular tuples use the anchor as vertex; euclidean pairs are the
    anchor-positive and anchor-negative edges; point distillation covers every row.
    """
    kind = DistillKind(kind)
    idx = _index(triplets, 3)
    if kind is DistillKind.NONE:
        return None
    if kind is DistillKind.POINT:
        return point_distill(student, teacher, spec)
    if len(idx) == 0:
        return LossResult(0.0, np.zeros_like(_rows(student)))
    if kind is DistillKind.ANGULAR:
        return sa_loss(student, teacher, idx[:, [1, 0, 2]], spec)
    pairs = np.concatenate([idx[:, [0, 1]], idx[:, [0, 2]]])
    return euclid_distill(student, teacher, pairs, spec)
