"""Incremental training: batches mixing current data with replay memory, in-batch
hard negatives, optional distillation against a frozen teacher, and ADAM updates.
"""

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from . import losses
from .data import augment, mine_pairs
from .encoder import Encoder, EncoderConfig, EncoderParams, init_params, load_params, save_params, snapshot
from .errors import InsufficientDomains, NonFiniteGradient, NoUsableAnchors
from .evaluation import RecallMatrix, evaluate_domain
from .losses import DistillKind, DistillSpec, ScheduleSpec, TripletSpec
from .memory import MemoryBank
from .rng import derive_rng, derive_seed

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class Method(str, Enum):
    FT = "ft"
    JOINT = "joint"
    INCLOUD = "incloud"
    ABL_EUCLID = "abl-euclid"
    ABL_POINT = "abl-point"
    ABL_NO_MEMORY = "abl-no-memory"
    ABL_NO_RELAX = "abl-no-relax"
    MEMORY_ONLY = "memory-only"


class Protocol(str, Enum):
    TWO_STEP = "two-step"
    FOUR_STEP = "four-step"


@dataclass(frozen=True)
class MethodTraits:
    memory: bool
    distill: DistillKind
    relax: bool


TRAITS = {
    Method.FT: MethodTraits(False, DistillKind.NONE, False),
    Method.JOINT: MethodTraits(False, DistillKind.NONE, False),
    Method.INCLOUD: MethodTraits(True, DistillKind.ANGULAR, True),
    Method.ABL_EUCLID: MethodTraits(True, DistillKind.EUCLIDEAN, True),
    Method.ABL_POINT: MethodTraits(True, DistillKind.POINT, True),
    Method.ABL_NO_MEMORY: MethodTraits(False, DistillKind.ANGULAR, True),
    Method.ABL_NO_RELAX: MethodTraits(True, DistillKind.ANGULAR, False),
    Method.MEMORY_ONLY: MethodTraits(True, DistillKind.NONE, False),
}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    lr_initial: float = 1e-3
    lr_after_half: float = 1e-4
    weight_decay: float = 1e-3
    batch_anchors: int = 16
    method: Method = Method.INCLOUD
    triplet: TripletSpec = field(default_factory=TripletSpec)
    distill: DistillSpec = field(default_factory=DistillSpec)
    memory_K: int = 256
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    reset_optimizer: bool = True
    augment: bool = True

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if self.lr_initial <= 0 or self.lr_after_half <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_anchors < 2:
            raise ValueError(f"batch_anchors must be >= 2, got {self.batch_anchors}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")

    @property
    def traits(self):
        return TRAITS[self.method]

    @property
    def memory_capacity(self):
        return self.memory_K if self.traits.memory else 0

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["method"] = self.method.value
        d["distill"]["kind"] = self.distill.kind.value
        d["encoder"]["hidden_dims"] = list(self.encoder.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        nested = {"triplet": TripletSpec, "distill": DistillSpec, "encoder": EncoderConfig}
        for key, typ in nested.items():
            if key in d and isinstance(d[key], dict):
                extra = set(d[key]) - {f.name for f in dataclasses.fields(typ)}
                if extra:
                    raise ValueError(f"unknown {key} keys: {sorted(extra)}")
                d[key] = typ(**d[key])
        return cls(**d)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


@dataclass
class StepState:
    student: EncoderParams
    memory: MemoryBank
    adam: AdamState
    teacher: object = None  # TeacherSnapshot from step >= 2
    step: int = 0  # completed steps


@dataclass
class EpochRecord:
    step: int
    epoch: int
    triplet: float
    distill: float
    weight: float
    lr: float
    batches: int
    dropped_anchors: int
    skipped_tuples: int


@dataclass
class RunLog:
    epochs: list = field(default_factory=list)
    step_seconds: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def extend(self, other):
        self.epochs.extend(other.epochs)
        self.step_seconds.update(other.step_seconds)

    def weights(self, step):
        return [r.weight for r in self.epochs if r.step == step]

    def to_jsonl(self):
        lines = [json.dumps({"config": self.config}, sort_keys=True)]
        lines += [json.dumps(dataclasses.asdict(r), sort_keys=True) for r in self.epochs]
        lines += [json.dumps({"step": k, "seconds": v}) for k, v in sorted(self.step_seconds.items())]
        return "\n".join(lines) + "\n"


def learning_rate(epoch, config):
    return config.lr_initial if epoch < config.epochs / 2 else config.lr_after_half


def adam_step(state, params, grad, epoch, config):
    """One ADAM update with decoupled weight decay, in place on ``params.theta``."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.theta.shape:
        raise ValueError(f"gradient length {grad.size} != parameter length {params.theta.size}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient(f"non-finite gradient at epoch {epoch}", epoch=epoch)
    lr = learning_rate(epoch, config)
    theta = params.theta
    if config.weight_decay:
        theta -= lr * config.weight_decay * theta
    state.t += 1
    state.m *= ADAM_BETA1
    state.m += (1.0 - ADAM_BETA1) * grad
    state.v *= ADAM_BETA2
    state.v += (1.0 - ADAM_BETA2) * grad * grad
    m_hat = state.m / (1.0 - ADAM_BETA1**state.t)
    v_hat = state.v / (1.0 - ADAM_BETA2**state.t)
    theta -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return state


# -- batches ------------------------------------------------------------------


class TrainingPool:
    """Current-step samples with per-domain positive lists and thresholds."""

    def __init__(self, datasets):
        self.samples = []
        self.positives = []
        self.thresholds = {}
        for ds in datasets:
            by_domain = {}
            for s in ds.train:
                by_domain.setdefault(s.domain_id, []).append(s)
            for domain_id in sorted(by_domain):
                group = by_domain[domain_id]
                self.thresholds[domain_id] = ds.thresholds
                offset = len(self.samples)
                index = mine_pairs(group, ds.thresholds)
                self.samples.extend(group)
                self.positives.extend(p + offset for p in index.positives)
        self.usable = np.array([i for i, p in enumerate(self.positives) if len(p)], dtype=np.intp)


@dataclass
class Batch:
    clouds: list
    sample_ids: list
    domain_ids: np.ndarray
    locations: np.ndarray
    anchors: np.ndarray  # row of each anchor
    positives: np.ndarray  # row of each anchor's positive
    negative_mask: np.ndarray  # (rows, rows): column is a valid negative for row
    from_memory: np.ndarray  # per anchor


def geo_negative_mask(domain_ids, locations, thresholds):
    """Valid-negative mask: other domain, or same domain beyond that domain's neg_train."""
    domain_ids = np.asarray(domain_ids)
    locations = np.asarray(locations, dtype=np.float64)
    dist = np.sqrt(((locations[:, None] - locations[None]) ** 2).sum(-1))
    neg_radius = np.array([thresholds[d].neg_train if d in thresholds else np.inf for d in domain_ids])
    same = domain_ids[:, None] == domain_ids[None, :]
    return ~same | (dist > neg_radius[:, None])


def build_batch(pool, memory, config, seed):
    """Draw ``batch_anchors`` anchors uniformly from current samples and memory entries.

    Current-domain anchors get a uniformly drawn positive; memory anchors bring
    their stored partner. Rows are laid out as [anchors..., positives...].
    """
    rng = np.random.default_rng(seed)
    n_current, n_memory = len(pool.usable), len(memory.entries)
    total = n_current + n_memory
    if total == 0:
        raise NoUsableAnchors("no current sample has a positive and memory is empty")
    picks = rng.choice(total, size=min(config.batch_anchors, total), replace=False)
    anchors, partners, from_memory = [], [], []
    for k in picks:
        if k < n_current:
            i = pool.usable[k]
            anchors.append(pool.samples[i])
            partners.append(pool.samples[rng.choice(pool.positives[i])])
            from_memory.append(False)
        else:
            entry = memory.entries[k - n_current]
            anchors.append(entry.anchor)
            partners.append(entry.positive)
            from_memory.append(True)
    members = anchors + partners
    clouds = [s.cloud for s in members]
    if config.augment:
        aug_seeds = rng.integers(0, 2**63 - 1, size=len(clouds))
        clouds = [augment(c, int(s)) for c, s in zip(clouds, aug_seeds)]
    domain_ids = np.array([s.domain_id for s in members])
    locations = np.array([s.location for s in members], dtype=np.float64)
    b = len(anchors)
    return Batch(
        clouds=clouds,
        sample_ids=[s.sample_id for s in members],
        domain_ids=domain_ids,
        locations=locations,
        anchors=np.arange(b),
        positives=np.arange(b, 2 * b),
        negative_mask=geo_negative_mask(domain_ids, locations, {**memory.thresholds, **pool.thresholds}),
        from_memory=np.array(from_memory),
    )


def mine_hard_negative(anchor_desc, batch_descs, geo_negative_mask):
    """Index of the closest valid negative in descriptor space, or None."""
    candidates = np.flatnonzero(geo_negative_mask)
    if len(candidates) == 0:
        return None
    d = ((np.asarray(batch_descs)[candidates] - anchor_desc) ** 2).sum(axis=1)
    return int(candidates[np.argmin(d)])


def form_triplets(descs, batch):
    triplets, dropped = [], 0
    for a, p in zip(batch.anchors, batch.positives):
        n = mine_hard_negative(descs[a], descs, batch.negative_mask[a])
        if n is None:
            dropped += 1
            continue
        triplets.append((a, p, n))
    return np.array(triplets, dtype=np.intp).reshape(-1, 3), dropped


# -- training -----------------------------------------------------------------


def initial_state(config):
    enc = replace(config.encoder, seed=derive_seed(config.seed, "encoder"))
    params = init_params(enc)
    memory = MemoryBank(config.memory_capacity, derive_seed(config.seed, "memory"))
    return StepState(params, memory, AdamState.zeros(params.theta.size))


def distill_weight(epoch, step_index, config):
    traits = config.traits
    if step_index < 2 or traits.distill is DistillKind.NONE:
        return 0.0
    if not traits.relax:
        return config.distill.lambda_init
    return losses.relaxation_weight(epoch, ScheduleSpec(config.epochs), config.distill)


def batches_per_epoch(pool, memory, config):
    return math.ceil((len(pool.usable) + len(memory.entries)) / config.batch_anchors)


def train_step(state, domains, step_index, config):
    """Train one incremental step on ``domains`` (a dataset or a list of them).

    From step 2 on the current student is frozen as teacher before the first
    epoch. Memory is folded in after the step when the method uses it.
    Returns ``(state, RunLog)`` for this step.
    """
    if step_index < 1:
        raise ValueError("step_index starts at 1")
    datasets = [domains] if not isinstance(domains, (list, tuple)) else list(domains)
    started = time.perf_counter()
    traits = config.traits
    kind = traits.distill
    teacher = snapshot(state.student) if step_index >= 2 else None
    if config.reset_optimizer or state.adam is None:
        state.adam = AdamState.zeros(state.student.theta.size)
    pool = TrainingPool(datasets)
    encoder = Encoder(state.student)
    log = RunLog()

    for epoch in range(config.epochs):
        weight = distill_weight(epoch, step_index, config)
        use_teacher = teacher is not None and kind is not DistillKind.NONE
        n_batches = batches_per_epoch(pool, state.memory, config)
        sums = {"triplet": 0.0, "distill": 0.0, "dropped": 0, "skipped": 0}
        for b in range(n_batches):
            batch = build_batch(pool, state.memory, config, derive_seed(config.seed, "batch", step_index, epoch, b))
            descs = encoder.forward(batch.clouds)
            triplets, dropped = form_triplets(descs, batch)
            trip = losses.triplet_loss(descs, triplets, config.triplet)
            dist = None
            if use_teacher:
                t_descs = teacher.forward(batch.clouds)
                dist = losses.distillation_loss(kind, descs, t_descs, triplets, config.distill)
            total = losses.combined_loss(trip, dist, weight)
            grad = encoder.backward(batch.clouds, total.grad)
            try:
                adam_step(state.adam, state.student, grad, epoch, config)
            except NonFiniteGradient as exc:
                exc.step = step_index
                raise
            sums["triplet"] += trip.value
            sums["distill"] += dist.value if dist is not None else 0.0
            sums["dropped"] += dropped
            sums["skipped"] += dist.skipped if dist is not None else 0
        record = EpochRecord(
            step_index,
            epoch,
            sums["triplet"] / n_batches,
            sums["distill"] / n_batches,
            weight,
            learning_rate(epoch, config),
            n_batches,
            sums["dropped"],
            sums["skipped"],
        )
        if not (math.isfinite(record.triplet) and math.isfinite(record.distill)):
            raise NonFiniteGradient(f"non-finite loss at step {step_index} epoch {epoch}", epoch=epoch)
        log.epochs.append(record)

    if config.memory_capacity > 0:
        for ds in datasets:
            state.memory.update(ds)
    state.teacher = teacher
    state.step = step_index
    log.step_seconds[step_index] = time.perf_counter() - started
    return state, log


def protocol_steps(domains, protocol):
    """Group domains into training steps."""
    protocol = Protocol(protocol)
    domains = list(domains)
    if protocol is Protocol.FOUR_STEP:
        if len(domains) < 2:
            raise InsufficientDomains(f"four-step needs >= 2 domains, got {len(domains)}")
        return [[d] for d in domains]
    if len(domains) < 2:
        raise InsufficientDomains(f"two-step needs >= 2 domains, got {len(domains)}")
    return [[domains[0]], domains[1:]]


@dataclass
class ProtocolResult:
    state: StepState
    matrix: RecallMatrix
    log: RunLog


def evaluate_seen(params, seen, ns=(1,)):
    return [evaluate_domain(params, ds, ns)[1] for ds in seen]


def run_protocol(domains, config, protocol=Protocol.FOUR_STEP, *, start=None, on_step=None):
    """Train step by step, evaluating every seen domain after each step.

    ``start`` resumes from ``(state, matrix)`` after some completed steps;
    ``on_step(step_index, state, matrix, log)`` is called after each step.
    """
    if config.method is Method.JOINT:
        state, log = joint_train(domains, config)
        matrix = RecallMatrix([evaluate_seen(state.student, domains)])
        if on_step:
            on_step(1, state, matrix, log)
        return ProtocolResult(state, matrix, log)
    groups = protocol_steps(domains, protocol)
    if start is None:
        state, matrix = initial_state(config), RecallMatrix()
    else:
        state, matrix = start
    log = RunLog(config=config.to_dict())
    seen = [d for g in groups[: state.step] for d in g]
    for step_index in range(state.step + 1, len(groups) + 1):
        group = groups[step_index - 1]
        state, step_log = train_step(state, group, step_index, config)
        log.extend(step_log)
        seen.extend(group)
        matrix.append(evaluate_seen(state.student, seen))
        if on_step:
            on_step(step_index, state, matrix, step_log)
    return ProtocolResult(state, matrix, log)


def joint_train(domains, config):
    """Single training phase over every train split: no teacher, no memory, no distillation."""
    domains = list(domains) if isinstance(domains, (list, tuple)) else [domains]
    if not domains:
        raise InsufficientDomains("joint training needs at least one domain")
    joint = replace(config, method=Method.JOINT)
    state, log = train_step(initial_state(joint), domains, 1, joint)
    log.config = joint.to_dict()
    return state, log


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(directory, state, matrix, log, config, sources=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_params(directory / "params.bin", state.student)
    state.memory.save(directory / "memory.json", sources)
    (directory / "runlog.jsonl").write_text(log.to_jsonl())
    (directory / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    (directory / "recall_matrix.csv").write_text(matrix.to_csv())
    np.savez(directory / "optimizer.npz", m=state.adam.m, v=state.adam.v, t=state.adam.t, step=state.step)


def load_checkpoint(directory, datasets):
    """Rebuild ``(state, matrix, config)`` saved by :func:`save_checkpoint`."""
    directory = Path(directory)
    config = TrainConfig.from_dict(json.loads((directory / "config.json").read_text()))
    params = load_params(directory / "params.bin")
    memory = MemoryBank.load(directory / "memory.json", datasets)
    with np.load(directory / "optimizer.npz") as opt:
        adam = AdamState(opt["m"].copy(), opt["v"].copy(), int(opt["t"]))
        step = int(opt["step"])
    matrix = RecallMatrix.from_csv((directory / "recall_matrix.csv").read_text())
    return StepState(params, memory, adam, None, step), matrix, config
