"""Permutation-invariant point-cloud encoder: shared per-point MLP, max pool, affine head.

All parameters live in one flat float64 vector; the per-layer weight and
bias arrays are views into it, so flatten/unflatten is exact and optimizers
can update the vector in place.
"""

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigMismatch, FormatError, NonFiniteActivation, StaleCache

PARAM_MAGIC = b"PCPRW"
PARAM_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    in_dim: int = 3
    hidden_dims: tuple = (32, 64)
    descriptor_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.in_dim != 3:
            raise ValueError(f"in_dim must be 3, got {self.in_dim}")
        if not self.hidden_dims or min(self.hidden_dims) < 1:
            raise ValueError(f"hidden_dims must be a nonempty list of widths >= 1, got {self.hidden_dims}")
        if self.descriptor_dim < 2:
            raise ValueError(f"descriptor_dim must be >= 2, got {self.descriptor_dim}")

    @property
    def layer_shapes(self):
        dims = (self.in_dim,) + self.hidden_dims + (self.descriptor_dim,)
        return list(zip(dims[:-1], dims[1:]))

    @property
    def num_params(self):
        return sum(i * o + o for i, o in self.layer_shapes)

    def to_dict(self):
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    def same_shape(self, other):
        return (self.in_dim, self.hidden_dims, self.descriptor_dim) == (
            other.in_dim,
            other.hidden_dims,
            other.descriptor_dim,
        )


@dataclass(eq=False)
class EncoderParams:
    config: EncoderConfig
    theta: np.ndarray
    weights: list = field(init=False, repr=False)
    biases: list = field(init=False, repr=False)

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64)
        if theta.shape != (self.config.num_params,):
            raise ConfigMismatch(
                f"parameter vector has length {theta.size}, config needs {self.config.num_params}"
            )
        self.theta = theta
        self.weights, self.biases = [], []
        offset = 0
        for i, o in self.config.layer_shapes:
            self.weights.append(theta[offset : offset + i * o].reshape(i, o))
            offset += i * o
            self.biases.append(theta[offset : offset + o])
            offset += o

    def flatten(self):
        return self.theta.copy()

    @classmethod
    def unflatten(cls, config, flat):
        return cls(config, np.array(flat, dtype=np.float64))

    def copy(self):
        return EncoderParams(self.config, self.theta.copy())

    def __eq__(self, other):
        if not isinstance(other, EncoderParams):
            return NotImplemented
        return self.config == other.config and np.array_equal(self.theta, other.theta)

    __hash__ = None


def init_params(config):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    params = EncoderParams(config, np.zeros(config.num_params))
    for w in params.weights:
        bound = 1.0 / np.sqrt(w.shape[0])
        w[...] = rng.uniform(-bound, bound, size=w.shape)
    return params


def _stack(clouds):
    """Concatenate clouds into one (sum N, 3) array plus segment offsets."""
    if isinstance(clouds, np.ndarray) and clouds.ndim == 3:
        b, n, _ = clouds.shape
        return clouds.reshape(b * n, 3), np.arange(0, b * n + 1, n)
    arrays = [np.asarray(c, dtype=np.float64) for c in clouds]
    sizes = [a.shape[0] for a in arrays]
    return np.concatenate(arrays), np.concatenate([[0], np.cumsum(sizes)])


def _segment_argmax(h, offsets):
    """Row index of the max per segment and channel; ties go to the lowest index."""
    sizes = np.diff(offsets)
    if np.all(sizes == sizes[0]):
        b, n = len(sizes), sizes[0]
        local = h.reshape(b, n, -1).argmax(axis=1)
        return local + offsets[:-1, None]
    return np.stack([h[s:e].argmax(axis=0) + s for s, e in zip(offsets[:-1], offsets[1:])])


class _ForwardCache:
    def __init__(self, points, offsets, activations, argmax, pooled):
        self.points = points
        self.offsets = offsets
        self.activations = activations
        self.argmax = argmax
        self.pooled = pooled


def _forward(params, clouds):
    points, offsets = _stack(clouds)
    if points.ndim != 2 or points.shape[1] != params.config.in_dim:
        raise ConfigMismatch(f"expected points of dim {params.config.in_dim}, got shape {points.shape}")
    h = points
    activations = []
    with np.errstate(over="ignore", invalid="ignore"):
        for w, b in zip(params.weights[:-1], params.biases[:-1]):
            h = np.maximum(h @ w + b, 0.0)
            activations.append(h)
        argmax = _segment_argmax(h, offsets)
        pooled = np.take_along_axis(h, argmax, axis=0)
        out = pooled @ params.weights[-1] + params.biases[-1]
    if not np.all(np.isfinite(out)):
        raise NonFiniteActivation("encoder produced non-finite descriptors")
    return out, _ForwardCache(points, offsets, activations, argmax, pooled)


def forward(params, clouds):
    """Descriptors (B, d) for a batch of clouds; a pure function of its inputs."""
    return _forward(params, clouds)[0]


class Encoder:
    """Stateful wrapper that caches the last forward pass for :meth:`backward`."""

    def __init__(self, params):
        self.params = params
        self._cache = None

    @property
    def config(self):
        return self.params.config

    def forward(self, clouds):
        out, self._cache = _forward(self.params, clouds)
        return out

    def backward(self, clouds, upstream):
        """Gradient of a scalar loss w.r.t. the flat parameter vector.

        ``upstream`` is dLoss/dDescriptors for the batch passed to the most
        recent :meth:`forward`; max pooling routes each channel's gradient to
        its argmax point only.
        """
        cache = self._cache
        if cache is None:
            raise StaleCache("backward called before forward")
        points, offsets = _stack(clouds)
        if points.shape != cache.points.shape or not np.array_equal(points, cache.points):
            raise StaleCache("backward batch differs from the cached forward batch")
        return backward_from_cache(self.params, cache, upstream)


def backward_from_cache(params, cache, upstream):
    upstream = np.asarray(upstream, dtype=np.float64)
    n_seg = len(cache.offsets) - 1
    if upstream.shape != (n_seg, params.config.descriptor_dim):
        raise ValueError(f"upstream shape {upstream.shape} does not match batch ({n_seg}, d)")
    grad = np.zeros_like(params.theta)
    g = EncoderParams(params.config, grad)
    g.weights[-1][...] = cache.pooled.T @ upstream
    g.biases[-1][...] = upstream.sum(axis=0)
    d_pooled = upstream @ params.weights[-1].T

    last = cache.activations[-1]
    d_h = np.zeros_like(last)
    # argmax rows of different clouds never collide, so plain assignment suffices
    d_h[cache.argmax, np.arange(last.shape[1])] = d_pooled

    n_hidden = len(cache.activations)
    for layer in range(n_hidden - 1, -1, -1):
        d_pre = d_h * (cache.activations[layer] > 0.0)
        below = cache.activations[layer - 1] if layer > 0 else cache.points
        g.weights[layer][...] = below.T @ d_pre
        g.biases[layer][...] = d_pre.sum(axis=0)
        if layer > 0:
            d_h = d_pre @ params.weights[layer].T
    return grad


class TeacherSnapshot:
    """Frozen copy of encoder parameters; forward only."""

    def __init__(self, params):
        theta = params.theta.copy()
        theta.setflags(write=False)
        self._params = EncoderParams(params.config, theta)

    @property
    def config(self):
        return self._params.config

    @property
    def params(self):
        return self._params

    def forward(self, clouds):
        return forward(self._params, clouds)

    def __eq__(self, other):
        if not isinstance(other, TeacherSnapshot):
            return NotImplemented
        return self._params == other._params

    __hash__ = None


def snapshot(params):
    return TeacherSnapshot(params)


def save_params(path, params):
    blob = json.dumps(params.config.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(PARAM_MAGIC)
        fh.write(struct.pack("<II", PARAM_VERSION, len(blob)))
        fh.write(blob)
        fh.write(params.theta.astype("<f8").tobytes())


def load_params(path, expected_config=None):
    """Read a parameter file; raise ConfigMismatch if it does not fit ``expected_config``."""
    path = Path(path)
    data = path.read_bytes()
    head = len(PARAM_MAGIC)
    if data[:head] != PARAM_MAGIC:
        raise FormatError(path, f"bad magic {data[:head]!r}", offset=0)
    if len(data) < head + 8:
        raise FormatError(path, "truncated header", offset=len(data))
    version, blob_len = struct.unpack_from("<II", data, head)
    if version != PARAM_VERSION:
        raise FormatError(path, f"unsupported version {version}", offset=head)
    start = head + 8
    try:
        cfg = json.loads(data[start : start + blob_len].decode("utf-8"))
        config = EncoderConfig(**cfg)
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError, ValueError) as exc:
        raise FormatError(path, f"bad config blob ({exc})", offset=start) from exc
    start += blob_len
    n_bytes = len(data) - start
    if n_bytes != 8 * config.num_params:
        raise FormatError(path, f"expected {config.num_params} float64 parameters, found {n_bytes} bytes", offset=start)
    if expected_config is not None and not expected_config.same_shape(config):
        raise ConfigMismatch(f"{path}: file holds {config}, expected shape of {expected_config}")
    theta = np.frombuffer(data, dtype="<f8", offset=start).astype(np.float64)
    return EncoderParams(config, theta)
