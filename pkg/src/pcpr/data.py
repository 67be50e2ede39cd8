"""Point clouds, geo-tagged samples, synthetic domains and the on-disk dataset format.

A dataset on disk is a directory holding three kinds of file::

    manifest.json        domain name, domain id, thresholds (meters), index path
    index.csv            sample_id,split,file,easting,northing
    clouds/<id>.bin      "PCPR" | u32 version=1 | u32 N | N*3 float32 (little-endian)

Clouds are kept in memory as read-only ``(N, 3)`` float64 arrays whose values are
exactly representable in float32, so a save/load round trip is bit-exact.
"""

import csv
import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import DegenerateCloud, FormatError, InvalidSpec, MissingIndexEntry

MIN_POINTS = 8
CLOUD_MAGIC = b"PCPR"
CLOUD_VERSION = 1
_HEADER = struct.Struct("<4sII")
BRUTE_FORCE_LIMIT = 20_000
SPLITS = ("train", "db", "query")
LANDMARK_ATTRIBUTES = {"layout", "height", "size", "weights"}


class GeoLocation(NamedTuple):
    x: float  # easting, meters
    y: float  # northing, meters


def _freeze(arr):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Sample:
    cloud: np.ndarray
    location: GeoLocation
    domain_id: int
    sample_id: int

    def __post_init__(self):
        object.__setattr__(self, "cloud", _freeze(self.cloud))
        object.__setattr__(self, "location", GeoLocation(float(self.location[0]), float(self.location[1])))
        if not (math.isfinite(self.location.x) and math.isfinite(self.location.y)):
            raise ValueError(f"sample {self.sample_id}: non-finite location {self.location}")

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.sample_id == other.sample_id
            and self.domain_id == other.domain_id
            and self.location == other.location
            and self.cloud.shape == other.cloud.shape
            and np.array_equal(self.cloud, other.cloud)
        )

    __hash__ = None


@dataclass(frozen=True)
class ThresholdSpec:
    pos_train: float = 10.0
    neg_train: float = 50.0
    pos_test: float = 25.0

    def __post_init__(self):
        if not (0 < self.pos_train < self.neg_train):
            raise InvalidSpec(f"need 0 < pos_train < neg_train, got {self.pos_train}, {self.neg_train}")
        if not self.pos_test > 0:
            raise InvalidSpec(f"pos_test must be positive, got {self.pos_test}")


@dataclass(frozen=True)
class DomainDataset:
    name: str
    train: tuple
    test_database: tuple
    test_queries: tuple
    thresholds: ThresholdSpec = field(default_factory=ThresholdSpec)

    def __post_init__(self):
        for name in ("train", "test_database", "test_queries"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        ids = [s.sample_id for s in self.all_samples()]
        if len(ids) != len(set(ids)):
            raise ValueError(f"dataset {self.name!r}: duplicate sample_id")

    def all_samples(self):
        return self.train + self.test_database + self.test_queries

    @property
    def domain_ids(self):
        return sorted({s.domain_id for s in self.all_samples()})

    @property
    def domain_id(self):
        ids = self.domain_ids
        if len(ids) != 1:
            raise ValueError(f"dataset {self.name!r} spans domains {ids}")
        return ids[0]


@dataclass(frozen=True)
class SyntheticDomainSpec:
    """Generator parameters for one synthetic environment.

    Domain shift between environments comes from changing the landmark
    statistics (count, size, anisotropy), the sensor jitter, and which
    landmark attributes are ``dynamic``: re-drawn on every visit instead of
    fixed per place, or ``shared``: drawn once and common to every place. Any
    of ``"layout"`` (planar positions), ``"height"``, ``"size"`` and
    ``"weights"`` (points per landmark). Neither kind carries place
    information, so a domain where an attribute is dynamic teaches the
    encoder to ignore what another domain relies on.
    """

    seed: int = 0
    num_places: int = 32
    area_side: float = 600.0
    landmarks_per_place: int = 6
    landmark_scale: float = 0.15
    noise_sigma: float = 0.01
    revisit_count: int = 3
    points_per_cloud: int = 256
    location_jitter: float = 2.0
    elongation: float = 1.0
    dynamic: tuple = ()
    shared: tuple = ()

    def __post_init__(self):
        if self.num_places < 4:
            raise InvalidSpec(f"num_places must be >= 4, got {self.num_places}")
        if self.revisit_count < 2:
            raise InvalidSpec(f"revisit_count must be >= 2, got {self.revisit_count}")
        if self.landmarks_per_place < 1:
            raise InvalidSpec(f"landmarks_per_place must be >= 1, got {self.landmarks_per_place}")
        if self.points_per_cloud < MIN_POINTS:
            raise InvalidSpec(f"points_per_cloud must be >= {MIN_POINTS}, got {self.points_per_cloud}")
        if not (self.area_side > 0 and self.landmark_scale > 0):
            raise InvalidSpec("area_side and landmark_scale must be positive")
        if self.noise_sigma < 0 or self.location_jitter < 0:
            raise InvalidSpec("noise_sigma and location_jitter must be nonnegative")
        if self.elongation < 1:
            raise InvalidSpec(f"elongation must be >= 1, got {self.elongation}")
        for name in ("dynamic", "shared"):
            attrs = tuple(sorted(set(getattr(self, name))))
            object.__setattr__(self, name, attrs)
            if set(attrs) - LANDMARK_ATTRIBUTES:
                raise InvalidSpec(f"unknown {name} attributes {sorted(set(attrs) - LANDMARK_ATTRIBUTES)}")
        if set(self.dynamic) & set(self.shared):
            raise InvalidSpec("an attribute cannot be both dynamic and shared")


def normalize_cloud(raw):
    """Center on the bounding-box midpoint and scale uniformly so max |coord| == 1."""
    pts = np.asarray(raw, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DegenerateCloud(f"expected an (N, 3) array, got shape {pts.shape}")
    if pts.shape[0] < MIN_POINTS:
        raise DegenerateCloud(f"need at least {MIN_POINTS} points, got {pts.shape[0]}")
    if not np.all(np.isfinite(pts)):
        raise DegenerateCloud("cloud has non-finite coordinates")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    half_extent = (hi - lo).max() / 2.0
    if half_extent == 0.0:
        raise DegenerateCloud("all points coincide")
    out = (pts - (lo + hi) / 2.0) / half_extent
    return np.clip(out, -1.0, 1.0)


class PairIndex:
    """Per-sample positive and negative neighbours by planar distance.

    Positives are strictly inside ``pos_train``; negatives strictly beyond
    ``neg_train``. Samples in the band between the two radii are neither.
    Indices refer to positions in the sample list given to :func:`mine_pairs`.
    """

    def __init__(self, sample_ids, positives, near, size):
        self.sample_ids = sample_ids
        self.positives = positives
        self._near = near
        self._size = size

    def __len__(self):
        return self._size

    def negatives(self, i):
        mask = np.ones(self._size, dtype=bool)
        mask[self._near[i]] = False
        return np.flatnonzero(mask)

    def anchors_with_positives(self):
        return np.array([i for i, p in enumerate(self.positives) if len(p)], dtype=np.intp)


def _locations(samples):
    return np.array([s.location for s in samples], dtype=np.float64).reshape(-1, 2)


def mine_pairs(samples, spec):
    locs = _locations(samples)
    m = len(samples)
    positives, near = [], []
    if m <= BRUTE_FORCE_LIMIT:
        diff = locs[:, None, :] - locs[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        for i in range(m):
            pos = np.flatnonzero(dist[i] < spec.pos_train)
            positives.append(pos[pos != i])
            near.append(np.flatnonzero(dist[i] <= spec.neg_train))
    else:
        from scipy.spatial import cKDTree

        tree = cKDTree(locs)
        for i in range(m):
            cand = np.array(sorted(tree.query_ball_point(locs[i], spec.neg_train)), dtype=np.intp)
            d = np.sqrt(((locs[cand] - locs[i]) ** 2).sum(-1))
            pos = cand[(d < spec.pos_train) & (cand != i)]
            positives.append(pos)
            near.append(cand[d <= spec.neg_train])
    return PairIndex([s.sample_id for s in samples], positives, near, m)


def rotation_z(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def apply_rigid(cloud, angle=0.0, flip_x=False, flip_y=False):
    """Mirror x and/or y, then rotate about the vertical axis by ``angle``."""
    pts = np.array(cloud, dtype=np.float64)
    if flip_x:
        pts[:, 0] = -pts[:, 0]
    if flip_y:
        pts[:, 1] = -pts[:, 1]
    if angle:
        pts = pts @ rotation_z(angle).T
    # only rounding-level excursions are clamped; larger ones are left rigid
    over = np.abs(pts) > 1.0
    if over.any() and np.all(np.abs(pts[over]) <= 1.0 + 1e-9):
        pts = np.clip(pts, -1.0, 1.0)
    return pts


def augment(cloud, seed):
    """Random yaw rotation plus independent x/y mirror flips (p = 1/2 each)."""
    rng = np.random.default_rng(seed)
    angle = rng.uniform(0.0, 2.0 * math.pi)
    flip_x, flip_y = rng.random(2) < 0.5
    return apply_rigid(cloud, angle, bool(flip_x), bool(flip_y))


# -- synthetic generation -----------------------------------------------------


def _place_centers(spec, rng):
    cols = math.ceil(math.sqrt(spec.num_places))
    spacing = spec.area_side / cols
    cells = rng.permutation(cols * cols)[: spec.num_places]
    row, col = np.divmod(np.sort(cells), cols)
    wiggle = rng.uniform(-0.1, 0.1, size=(spec.num_places, 2)) * spacing
    return np.stack([(col + 0.5) * spacing, (row + 0.5) * spacing], axis=1) + wiggle


class _PlaceModel:
    """Landmark constellation of one place, with per-point unit draws kept fixed."""

    def __init__(self, spec, rng, shared=None):
        k = spec.landmarks_per_place
        self.xy = self.draw_layout(k, rng)
        self.z = self.draw_heights(k, rng)
        self.axes = self.draw_sizes(spec, k, rng)
        self.yaw = rng.uniform(0.0, 2.0 * math.pi, k)
        self.owner = self.draw_owner(spec, k, rng)
        self.unit = rng.standard_normal((spec.points_per_cloud, 3))
        if shared is not None:
            if "layout" in spec.shared:
                self.xy, self.yaw = shared.xy, shared.yaw
            if "height" in spec.shared:
                self.z = shared.z
            if "size" in spec.shared:
                self.axes = shared.axes
            if "weights" in spec.shared:
                self.owner = shared.owner

    @staticmethod
    def draw_owner(spec, k, rng):
        weights = rng.dirichlet(np.full(k, 2.0))
        return np.sort(rng.choice(k, size=spec.points_per_cloud, p=weights))

    @staticmethod
    def draw_layout(k, rng):
        r = 0.75 * np.sqrt(rng.uniform(0.0, 1.0, k))
        theta = rng.uniform(0.0, 2.0 * math.pi, k)
        return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)

    @staticmethod
    def draw_heights(k, rng):
        return rng.uniform(-0.6, 0.6, k)

    @staticmethod
    def draw_sizes(spec, k, rng):
        axes = spec.landmark_scale * rng.uniform(0.5, 1.5, (k, 3))
        axes[np.arange(k), rng.integers(3, size=k)] *= spec.elongation
        return axes

    def points(self, spec, rng):
        """One visit; attributes listed in ``spec.dynamic`` are re-drawn first."""
        k = len(self.z)
        xy = self.draw_layout(k, rng) if "layout" in spec.dynamic else self.xy
        z = self.draw_heights(k, rng) if "height" in spec.dynamic else self.z
        axes = self.draw_sizes(spec, k, rng) if "size" in spec.dynamic else self.axes
        owner = self.draw_owner(spec, k, rng) if "weights" in spec.dynamic else self.owner
        c, s = np.cos(self.yaw)[owner], np.sin(self.yaw)[owner]
        local = self.unit * axes[owner]
        pts = np.empty_like(local)
        pts[:, 0] = c * local[:, 0] - s * local[:, 1] + xy[owner, 0]
        pts[:, 1] = s * local[:, 0] + c * local[:, 1] + xy[owner, 1]
        pts[:, 2] = local[:, 2] + z[owner]
        pts[:, 2] -= (pts[:, 2].max() + pts[:, 2].min()) / 2.0
        scale = max(np.hypot(pts[:, 0], pts[:, 1]).max(), np.abs(pts[:, 2]).max())
        return pts * (0.9 / scale)


def _to_storage(pts):
    return np.clip(pts, -1.0, 1.0).astype(np.float32).astype(np.float64)


def generate_domain(spec, *, domain_id=0, name=None, thresholds=None, first_sample_id=None):
    """Build a :class:`DomainDataset` deterministically from ``spec``.

    Every place is visited ``2 * revisit_count`` times: the first
    ``revisit_count`` traversals form the training split, the next one the
    test database and the rest the test queries. Each visit re-draws the
    sensor jitter and heading, plus any dynamic landmark attributes.
    """
    if not isinstance(spec, SyntheticDomainSpec):
        raise InvalidSpec(f"expected SyntheticDomainSpec, got {type(spec).__name__}")
    thresholds = thresholds or ThresholdSpec()
    if spec.location_jitter * 2 >= thresholds.pos_train:
        raise InvalidSpec("location_jitter too large for same-place visits to be positives")
    spacing = spec.area_side / math.ceil(math.sqrt(spec.num_places))
    if 0.8 * spacing - 2 * spec.location_jitter <= thresholds.neg_train:
        raise InvalidSpec(
            f"area_side={spec.area_side} packs places closer than neg_train={thresholds.neg_train}"
        )
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    centers = _place_centers(spec, rng)
    common = _PlaceModel(spec, rng) if spec.shared else None
    places = [_PlaceModel(spec, rng, common) for _ in range(spec.num_places)]
    next_id = domain_id * 1_000_000 if first_sample_id is None else first_sample_id

    splits = {"train": [], "db": [], "query": []}
    n_visits = 2 * spec.revisit_count
    for visit in range(n_visits):
        split = "train" if visit < spec.revisit_count else ("db" if visit == spec.revisit_count else "query")
        for p in range(spec.num_places):
            pts = places[p].points(spec, rng)
            jitter = rng.standard_normal((spec.points_per_cloud, 3)) * spec.noise_sigma
            heading = rng.uniform(0.0, 2.0 * math.pi)
            pts = (pts + jitter) @ rotation_z(heading).T
            offset = rng.uniform(-1.0, 1.0, 2) * spec.location_jitter
            splits[split].append(
                Sample(_to_storage(pts), GeoLocation(*(centers[p] + offset)), domain_id, next_id)
            )
            next_id += 1

    ds = DomainDataset(
        name or f"synthetic-{spec.seed}", splits["train"], splits["db"], splits["query"], thresholds
    )
    unmatched = unmatched_queries(ds)
    if unmatched:
        raise InvalidSpec(f"{len(unmatched)} queries have no database match within pos_test")
    return ds


def unmatched_queries(ds):
    """Sample ids of test queries with no database entry within ``pos_test``."""
    if not ds.test_queries or not ds.test_database:
        return [q.sample_id for q in ds.test_queries]
    q, d = _locations(ds.test_queries), _locations(ds.test_database)
    dist = np.sqrt(((q[:, None, :] - d[None, :, :]) ** 2).sum(-1))
    ok = (dist <= ds.thresholds.pos_test).any(axis=1)
    return [s.sample_id for s, good in zip(ds.test_queries, ok) if not good]


# -- file I/O -----------------------------------------------------------------


def write_cloud(path, cloud):
    pts = np.asarray(cloud, dtype=np.float64)
    data = pts.astype("<f4")
    if not np.array_equal(data.astype(np.float64), pts):
        raise ValueError(f"{path}: coordinates are not exactly representable in float32")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CLOUD_MAGIC, CLOUD_VERSION, pts.shape[0]))
        fh.write(data.tobytes())


def read_cloud(path):
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError as exc:
        raise MissingIndexEntry(f"cloud file not found: {path}") from exc
    if len(blob) < _HEADER.size:
        raise FormatError(path, f"truncated header ({len(blob)} bytes)", offset=len(blob))
    magic, version, n = _HEADER.unpack_from(blob)
    if magic != CLOUD_MAGIC:
        raise FormatError(path, f"bad magic {magic!r}", offset=0)
    if version != CLOUD_VERSION:
        raise FormatError(path, f"unsupported version {version}", offset=4)
    expected = _HEADER.size + 12 * n
    if len(blob) != expected:
        raise FormatError(path, f"expected {expected} bytes for {n} points, found {len(blob)}", offset=len(blob))
    pts = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(n, 3).astype(np.float64)
    if n < MIN_POINTS:
        raise DegenerateCloud(f"{path}: {n} points (< {MIN_POINTS})")
    if not np.all(np.isfinite(pts)) or np.abs(pts).max() > 1.0:
        raise FormatError(path, "coordinates must be finite and inside [-1, 1]", offset=_HEADER.size)
    return pts


def save_dataset(ds, directory):
    """Write ``ds`` under ``directory``; returns the manifest path."""
    directory = Path(directory)
    (directory / "clouds").mkdir(parents=True, exist_ok=True)
    rows = []
    for split, samples in zip(SPLITS, (ds.train, ds.test_database, ds.test_queries)):
        for s in samples:
            rel = f"clouds/{s.sample_id}.bin"
            write_cloud(directory / rel, s.cloud)
            rows.append((s.sample_id, split, rel, repr(s.location.x), repr(s.location.y)))
    with open(directory / "index.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "split", "file", "easting", "northing"])
        writer.writerows(rows)
    manifest = {
        "name": ds.name,
        "domain_id": ds.domain_id,
        "thresholds": {
            "pos_train": ds.thresholds.pos_train,
            "neg_train": ds.thresholds.neg_train,
            "pos_test": ds.thresholds.pos_test,
        },
        "index": "index.csv",
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(path):
    """Load a dataset from its manifest file (or the directory containing it)."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
        thresholds = ThresholdSpec(**manifest["thresholds"])
        name, domain_id, index = manifest["name"], int(manifest["domain_id"]), manifest["index"]
    except FileNotFoundError as exc:
        raise MissingIndexEntry(f"manifest not found: {path}") from exc
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(path, f"malformed manifest ({exc})") from exc
    root = path.parent
    index_path = root / index
    if not index_path.exists():
        raise MissingIndexEntry(f"index file not found: {index_path}")
    splits = {k: [] for k in SPLITS}
    with open(index_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["sample_id", "split", "file", "easting", "northing"]:
            raise FormatError(index_path, f"bad header {header}", offset=0)
        for lineno, row in enumerate(reader, start=2):
            try:
                sid, split, rel, east, north = row
                sid, east, north = int(sid), float(east), float(north)
            except ValueError as exc:
                raise FormatError(index_path, f"line {lineno}: {exc}") from exc
            if split not in splits:
                raise FormatError(index_path, f"line {lineno}: unknown split {split!r}")
            cloud_path = root / rel
            if not cloud_path.exists():
                raise MissingIndexEntry(f"{index_path} line {lineno} references missing {cloud_path}")
            splits[split].append(Sample(read_cloud(cloud_path), GeoLocation(east, north), domain_id, sid))
    ds = DomainDataset(name, splits["train"], splits["db"], splits["query"], thresholds)
    unmatched = unmatched_queries(ds)
    if unmatched:
        warnings.warn(f"{path}: {len(unmatched)} test queries have no database entry within pos_test")
    return ds


# Each default domain leaves exactly one landmark cue free to identify places;
# the cue a domain relies on is shared (uninformative) or re-drawn per visit
# (misleading) in other domains, which is what makes sequential training forget.
_DEFAULT_CUES = (
    {"shared": ("layout", "height", "weights")},
    {"dynamic": ("size",), "shared": ("weights",)},
    {"shared": ("layout", "size", "weights")},
    {"dynamic": ("size",), "shared": ("height",)},
)
_HOLDOUT_CUES = {"dynamic": ("weights",), "shared": ("size",)}


def default_domain_specs(seed=0):
    """The four-domain benchmark used by the demos and the acceptance suite."""
    base = 11 + 100 * seed
    return [
        SyntheticDomainSpec(seed=base + i, landmarks_per_place=6, landmark_scale=0.1, **cues)
        for i, cues in enumerate(_DEFAULT_CUES)
    ]


def default_holdout_spec(seed=0):
    """A fifth environment never used for training, for zero-shot evaluation."""
    return SyntheticDomainSpec(seed=11 + 100 * seed + len(_DEFAULT_CUES), landmarks_per_place=6, landmark_scale=0.1, **_HOLDOUT_CUES)


def default_domains(seed=0):
    return [generate_domain(s, domain_id=i, name=f"domain-{i + 1}") for i, s in enumerate(default_domain_specs(seed))]
