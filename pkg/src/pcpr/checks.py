"""Self-checks: finite-difference gradients, loss invariances, schedule and metric oracles.

Every suite takes an optional ``fns`` mapping so a deliberately broken
implementation can be swapped in and shown to fail by name.
"""

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import evaluation, losses
from .encoder import Encoder, EncoderConfig, init_params
from .errors import UndefinedForSingleStep

FD_STEP = 1e-5
GRAD_TOL = 1e-6
KINK_GAP = 1e-3  # instances closer than this to a hinge or max-pool switch are redrawn


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def default_fns():
    return {
        "triplet_loss": losses.triplet_loss,
        "sa_loss": losses.sa_loss,
        "euclid_distill": losses.euclid_distill,
        "point_distill": losses.point_distill,
        "relaxation_weight": losses.relaxation_weight,
        "encoder_backward": lambda params, clouds, upstream: _encoder_backward(params, clouds, upstream),
        "recall_at_n": evaluation.recall_at_n,
        "mean_recall_at_1": evaluation.mean_recall_at_1,
        "forgetting": evaluation.forgetting,
    }


def _fns(overrides):
    fns = default_fns()
    fns.update(overrides or {})
    return fns


def _encoder_backward(params, clouds, upstream):
    enc = Encoder(params)
    enc.forward(clouds)
    return enc.backward(clouds, upstream)


# -- finite differences -------------------------------------------------------


def numeric_grad(f, x, h=FD_STEP):
    """Central differences of scalar ``f`` at ``x`` (perturbed in place, then restored)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic, numeric):
    """Max absolute deviation over the larger of the two gradients' max norms."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def _distinct_triples(rng, b, count):
    return np.array([rng.choice(b, 3, replace=False) for _ in range(count)])


def triplet_instance(rng):
    while True:
        b, d = rng.integers(3, 9), rng.integers(2, 7)
        v = rng.standard_normal((b, d))
        idx = _distinct_triples(rng, b, rng.integers(1, 6))
        spec = losses.TripletSpec(margin=float(rng.uniform(0.1, 1.0)))
        a, p, n = v[idx[:, 0]], v[idx[:, 1]], v[idx[:, 2]]
        hinge = np.linalg.norm(a - p, axis=1) - np.linalg.norm(a - n, axis=1) + spec.margin
        if np.abs(hinge).min() > KINK_GAP and (hinge > 0).any():
            return v, idx, spec


def _phi(v, idx):
    a = v[idx[:, 0]] - v[idx[:, 1]]
    c = v[idx[:, 2]] - v[idx[:, 1]]
    return (a * c).sum(1) / np.linalg.norm(a, axis=1) / np.linalg.norm(c, axis=1)


def sa_instance(rng):
    while True:
        b, d = rng.integers(3, 9), rng.integers(2, 7)
        student = rng.standard_normal((b, d))
        teacher = rng.standard_normal((b, d))
        idx = _distinct_triples(rng, b, rng.integers(1, 6))
        spec = losses.DistillSpec(margin=float(rng.uniform(0.0, 0.05)))
        diff = _phi(teacher, idx) - _phi(student, idx)
        term = losses.huber(diff) - spec.margin
        if (
            np.abs(term).min() > KINK_GAP
            and np.abs(np.abs(diff) - 1.0).min() > KINK_GAP
            and (term > 0).any()
        ):
            return student, teacher, idx, spec


def euclid_instance(rng):
    while True:
        b, d = rng.integers(3, 9), rng.integers(2, 7)
        student = rng.standard_normal((b, d))
        teacher = rng.standard_normal((b, d)) * rng.uniform(0.5, 2.0)
        pairs = np.array([rng.choice(b, 2, replace=False) for _ in range(rng.integers(1, 7))])
        diff = np.linalg.norm(teacher[pairs[:, 0]] - teacher[pairs[:, 1]], axis=1) - np.linalg.norm(
            student[pairs[:, 0]] - student[pairs[:, 1]], axis=1
        )
        if np.abs(np.abs(diff) - 1.0).min() > KINK_GAP:
            return student, teacher, pairs


def point_instance(rng):
    b, d = rng.integers(3, 9), rng.integers(2, 7)
    return rng.standard_normal((b, d)), rng.standard_normal((b, d))


def _encoder_kink_gap(params, clouds):
    """Distance of this batch to the nearest ReLU or max-pool switch."""
    gap = math.inf
    for cloud in clouds:
        h = cloud
        for w, b in zip(params.weights[:-1], params.biases[:-1]):
            z = h @ w + b
            gap = min(gap, np.abs(z).min())
            h = np.maximum(z, 0.0)
        top2 = np.sort(h, axis=0)[-2:]
        live = top2[1] > 0
        if live.any():
            gap = min(gap, (top2[1] - top2[0])[live].min())
    return gap


def encoder_instance(rng):
    while True:
        depth = rng.integers(1, 3)
        hidden = tuple(int(x) for x in rng.integers(2, 9, depth))
        config = EncoderConfig(hidden_dims=hidden, descriptor_dim=int(rng.integers(2, 5)), seed=int(rng.integers(2**31)))
        params = init_params(config)
        params.biases[0][...] = rng.uniform(-0.3, 0.3, hidden[0])
        clouds = [rng.uniform(-1, 1, (int(rng.integers(4, 9)), 3)) for _ in range(rng.integers(1, 3))]
        upstream = rng.standard_normal((len(clouds), config.descriptor_dim))
        if _encoder_kink_gap(params, clouds) > KINK_GAP:
            return params, clouds, upstream


def gradient_errors(loss_name, instances=50, seed=0, fns=None):
    """Relative errors of analytic vs central-difference gradients on random instances."""
    fns = _fns(fns)
    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(instances):
        if loss_name == "triplet_loss":
            v, idx, spec = triplet_instance(rng)
            analytic = fns[loss_name](v, idx, spec).grad
            numeric = numeric_grad(lambda x: losses.triplet_loss(x, idx, spec).value, v.copy())
        elif loss_name == "sa_loss":
            s, t, idx, spec = sa_instance(rng)
            analytic = fns[loss_name](s, t, idx, spec).grad
            numeric = numeric_grad(lambda x: losses.sa_loss(x, t, idx, spec).value, s.copy())
        elif loss_name == "euclid_distill":
            s, t, pairs = euclid_instance(rng)
            analytic = fns[loss_name](s, t, pairs).grad
            numeric = numeric_grad(lambda x: losses.euclid_distill(x, t, pairs).value, s.copy())
        elif loss_name == "point_distill":
            s, t = point_instance(rng)
            analytic = fns[loss_name](s, t).grad
            numeric = numeric_grad(lambda x: losses.point_distill(x, t).value, s.copy())
        elif loss_name == "encoder_backward":
            params, clouds, up = encoder_instance(rng)
            analytic = fns[loss_name](params, clouds, up)

            def scalar(theta):
                trial = params.copy()
                trial.theta[...] = theta
                return float((_plain_forward(trial, clouds) * up).sum())

            numeric = numeric_grad(scalar, params.theta.copy())
        else:
            raise KeyError(loss_name)
        errors.append(relative_error(analytic, numeric))
    return errors


def _plain_forward(params, clouds):
    """Loop-based encoder forward, independent of the batched implementation."""
    out = []
    for cloud in clouds:
        h = cloud
        for w, b in zip(params.weights[:-1], params.biases[:-1]):
            h = np.maximum(h @ w + b, 0.0)
        out.append(h.max(axis=0) @ params.weights[-1] + params.biases[-1])
    return np.array(out)


GRADIENT_TARGETS = ("triplet_loss", "sa_loss", "euclid_distill", "point_distill", "encoder_backward")


def gradient_suite(instances=50, seed=0, fns=None):
    results = []
    for i, name in enumerate(GRADIENT_TARGETS):
        errs = gradient_errors(name, instances, seed + i, fns)
        worst = max(errs)
        results.append(CheckResult(f"gradient/{name}", worst < GRAD_TOL, f"max rel err {worst:.2e} over {instances}"))
    return results


# -- invariances --------------------------------------------------------------


def random_similarity(rng, d, scale=None):
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    q = q * np.sign(np.diag(r))
    shift = rng.standard_normal(d) * rng.uniform(0.1, 5.0)
    s = rng.uniform(0.2, 5.0) if scale is None else scale
    return lambda v: s * (v @ q.T) + shift


def invariance_deltas(batches=100, seed=0, fns=None):
    """Per batch: |change| of sa, euclid and point losses under a similarity transform."""
    fns = _fns(fns)
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(batches):
        b, d = rng.integers(4, 9), rng.integers(2, 7)
        student, teacher = rng.standard_normal((b, d)), rng.standard_normal((b, d))
        idx = _distinct_triples(rng, b, rng.integers(2, 7))
        pairs = np.concatenate([idx[:, [1, 0]], idx[:, [1, 2]]])
        scale = rng.uniform(0.2, 5.0)
        if abs(scale - 1.0) < 0.05:
            scale += 0.5
        move = random_similarity(rng, d, scale)
        spec = losses.DistillSpec(margin=0.0)
        moved = move(student)
        sa = abs(fns["sa_loss"](moved, teacher, idx, spec).value - fns["sa_loss"](student, teacher, idx, spec).value)
        eu = abs(fns["euclid_distill"](moved, teacher, pairs).value - fns["euclid_distill"](student, teacher, pairs).value)
        shifted = student + rng.standard_normal(d)
        pt = abs(fns["point_distill"](shifted, teacher).value - fns["point_distill"](student, teacher).value)
        rows.append((sa, eu, pt))
    return np.array(rows)


def invariance_suite(batches=100, seed=0, fns=None):
    deltas = invariance_deltas(batches, seed, fns)
    sa, eu, pt = deltas.T
    return [
        CheckResult("invariance/sa_loss_similarity", bool(sa.max() < 1e-9), f"max change {sa.max():.1e}"),
        CheckResult("invariance/euclid_distill_scale_sensitive", bool(eu.min() > 1e-6), f"min change {eu.min():.1e}"),
        CheckResult("invariance/point_distill_translation_sensitive", bool(pt.min() > 0), f"min change {pt.min():.1e}"),
    ]


# -- schedule -----------------------------------------------------------------


def schedule_suite(fns=None, total_epochs=60):
    weight = _fns(fns)["relaxation_weight"]
    sched = losses.ScheduleSpec(total_epochs)
    spec = losses.DistillSpec(lambda_init=1.0)
    w = [weight(g, sched, spec) for g in range(total_epochs + 1)]
    sym = max(abs(w[g] + w[total_epochs - g] - 1.0) for g in range(total_epochs + 1))
    return [
        CheckResult("schedule/midpoint", abs(w[total_epochs // 2] - 0.5) < 1e-12, f"{w[total_epochs // 2]!r}"),
        CheckResult(
            "schedule/endpoints",
            abs(w[0] - 1 / (1 + math.exp(-5))) < 1e-6 and abs(w[-1] - 1 / (1 + math.exp(5))) < 1e-6,
            f"{w[0]:.6f}, {w[-1]:.6f}",
        ),
        CheckResult("schedule/decreasing", all(a > b for a, b in zip(w, w[1:])), ""),
        CheckResult("schedule/symmetric", sym < 1e-12, f"max deviation {sym:.1e}"),
    ]


# -- metric oracles -----------------------------------------------------------


def oracle_mean_recall(rows):
    return sum(rows[-1]) / len(rows[-1])


def oracle_forgetting(rows):
    t = len(rows)
    drops = []
    for j in range(t - 1):
        peak = max(rows[l][j] for l in range(j, t))
        drops.append(peak - rows[t - 1][j])
    return sum(drops) / len(drops)


def oracle_recall(q, db, ql, dl, radius, n):
    """All-pairs retriever: sort every database entry by (distance, index)."""
    hits = evaluated = 0
    for i in range(len(q)):
        true = [math.dist(ql[i], dl[j]) <= radius for j in range(len(db))]
        if not any(true):
            continue
        evaluated += 1
        ranked = sorted(range(len(db)), key=lambda j: (float(((q[i] - db[j]) ** 2).sum()), j))
        hits += any(true[j] for j in ranked[:n])
    return 100.0 * hits / evaluated if evaluated else 0.0


def triangular_matrices(values=(0.0, 50.0, 100.0), size=3):
    cells = size * (size + 1) // 2
    for combo in itertools.product(values, repeat=cells):
        it = iter(combo)
        yield [[next(it) for _ in range(i + 1)] for i in range(size)]


def recall_instance(rng):
    nq, ndb = int(rng.integers(1, 21)), int(rng.integers(1, 31))
    d = int(rng.integers(1, 5))
    if rng.random() < 0.3:
        q, db = rng.integers(0, 3, (nq, d)).astype(float), rng.integers(0, 3, (ndb, d)).astype(float)
    else:
        q, db = rng.standard_normal((nq, d)), rng.standard_normal((ndb, d))
    ql, dl = rng.uniform(0, 60, (nq, 2)), rng.uniform(0, 60, (ndb, 2))
    return q, db, ql, dl, float(rng.uniform(5, 30)), int(rng.integers(1, 6))


def metric_suite(instances=200, seed=0, fns=None):
    fns = _fns(fns)
    mismatch = []
    golden = [[90.0], [80.0, 85.0], [70.0, 75.0, 88.0]]
    sweep = [golden] + list(triangular_matrices())
    for rows in sweep:
        m = evaluation.RecallMatrix(rows)
        if abs(fns["mean_recall_at_1"](m) - oracle_mean_recall(rows)) > 1e-9:
            mismatch.append(("mR@1", rows))
        try:
            f = fns["forgetting"](m)
        except UndefinedForSingleStep:
            f = None
        if f is None or abs(f - oracle_forgetting(rows)) > 1e-9:
            mismatch.append(("F", rows))
    matrix_ok = not mismatch
    golden_m = evaluation.RecallMatrix(golden)
    golden_ok = (
        abs(fns["mean_recall_at_1"](golden_m) - 233.0 / 3) < 1e-9 and abs(fns["forgetting"](golden_m) - 15.0) < 1e-9
    )

    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(instances):
        q, db, ql, dl, radius, n = recall_instance(rng)
        if fns["recall_at_n"](q, db, ql, dl, radius, n) != oracle_recall(q, db, ql, dl, radius, n):
            bad += 1
    return [
        CheckResult("metrics/matrix_sweep", matrix_ok, f"{len(sweep)} matrices, {len(mismatch)} mismatches"),
        CheckResult("metrics/golden_matrix", golden_ok, "mR@1 77.67, F 15.0"),
        CheckResult("metrics/recall_at_n", bad == 0, f"{instances} instances, {bad} mismatches"),
    ]


def run_selfcheck(fns=None, instances=50, seed=0):
    return (
        gradient_suite(instances, seed, fns)
        + invariance_suite(100, seed, fns)
        + schedule_suite(fns)
        + metric_suite(200, seed, fns)
    )
