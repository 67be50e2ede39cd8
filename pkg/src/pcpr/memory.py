"""Replay memory of positive pairs from past domains, balanced per domain."""

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import ThresholdSpec, mine_pairs
from .errors import InsufficientEntries, NoPositivePairs
from .rng import derive_rng


@dataclass(frozen=True)
class MemoryEntry:
    anchor: object  # Sample
    positive: object  # Sample
    domain_id: int

    def __post_init__(self):
        if not (self.anchor.domain_id == self.positive.domain_id == self.domain_id):
            raise ValueError("memory pair mixes domains")


def domain_quotas(capacity_pairs, domain_order):
    """Pairs allowed per domain; the earliest-seen domains take the remainder."""
    t = len(domain_order)
    base, extra = divmod(capacity_pairs, t)
    return {d: base + (1 if i < extra else 0) for i, d in enumerate(domain_order)}


@dataclass
class MemoryBank:
    capacity_clouds: int = 256
    rng_seed: int = 0
    entries: list = field(default_factory=list)
    domain_order: list = field(default_factory=list)
    updates: int = 0
    thresholds: dict = field(default_factory=dict)  # domain id -> ThresholdSpec

    def __post_init__(self):
        if self.capacity_clouds < 0 or self.capacity_clouds % 2:
            raise ValueError(f"capacity must be an even nonnegative integer, got {self.capacity_clouds}")

    @property
    def capacity_pairs(self):
        return self.capacity_clouds // 2

    def __len__(self):
        return len(self.entries)

    def counts(self):
        out = {d: 0 for d in self.domain_order}
        for e in self.entries:
            out[e.domain_id] += 1
        return out

    def update(self, finished_domain):
        """Fold a just-trained dataset into memory.

        Each domain id in ``finished_domain`` becomes a new memory domain. Quotas
        are recomputed over every seen domain, old domains are thinned by uniform
        random eviction, and the new domain is filled with uniformly drawn
        (anchor, random positive) pairs.
        """
        by_domain = {}
        for s in finished_domain.train:
            by_domain.setdefault(s.domain_id, []).append(s)
        for domain_id in sorted(by_domain):
            self._add_domain(domain_id, by_domain[domain_id], finished_domain.thresholds)
        return self

    def _add_domain(self, domain_id, samples, thresholds):
        pairs = mine_pairs(samples, thresholds)
        anchors = pairs.anchors_with_positives()
        if len(anchors) == 0:
            raise NoPositivePairs(f"domain {domain_id} has no sample with a positive")
        rng = derive_rng(self.rng_seed, "memory", self.updates, domain_id)
        self.updates += 1
        self.thresholds[domain_id] = thresholds
        if self.capacity_pairs == 0:
            return
        if domain_id not in self.domain_order:
            self.domain_order.append(domain_id)
        quotas = domain_quotas(self.capacity_pairs, self.domain_order)

        kept = []
        for d in self.domain_order:
            if d == domain_id:
                continue
            mine = [e for e in self.entries if e.domain_id == d]
            if len(mine) > quotas[d]:
                keep = np.sort(rng.choice(len(mine), size=quotas[d], replace=False))
                mine = [mine[i] for i in keep]
            kept.extend(mine)

        take = min(quotas[domain_id], len(anchors))
        chosen = rng.choice(anchors, size=take, replace=False)
        for a in chosen:
            p = rng.choice(pairs.positives[a])
            kept.append(MemoryEntry(samples[a], samples[p], domain_id))
        self.entries = kept

    def draw(self, count, seed):
        """Uniform sample of ``count`` entries without replacement."""
        if count > len(self.entries):
            raise InsufficientEntries(f"asked for {count} entries, memory holds {len(self.entries)}")
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(self.entries))[:count]
        return [self.entries[i] for i in order]

    def to_manifest(self, sources=None):
        """JSON-ready description; ``sources`` maps domain id to its index path."""
        sources = sources or {}
        return {
            "capacity_clouds": self.capacity_clouds,
            "rng_seed": self.rng_seed,
            "updates": self.updates,
            "domain_order": list(self.domain_order),
            "thresholds": {str(d): dataclasses.asdict(t) for d, t in sorted(self.thresholds.items())},
            "entries": [
                {
                    "domain": e.domain_id,
                    "anchor": e.anchor.sample_id,
                    "positive": e.positive.sample_id,
                    "source": str(sources.get(e.domain_id, "")),
                }
                for e in self.entries
            ],
        }

    def save(self, path, sources=None):
        Path(path).write_text(json.dumps(self.to_manifest(sources), indent=1) + "\n")

    @classmethod
    def from_manifest(cls, manifest, datasets):
        """Rebuild a bank, resolving sample ids against the given datasets."""
        lookup = {}
        for ds in datasets:
            for s in ds.train:
                lookup[(s.domain_id, s.sample_id)] = s
        entries = [
            MemoryEntry(lookup[(e["domain"], e["anchor"])], lookup[(e["domain"], e["positive"])], e["domain"])
            for e in manifest["entries"]
        ]
        return cls(
            manifest["capacity_clouds"],
            manifest["rng_seed"],
            entries,
            list(manifest["domain_order"]),
            manifest["updates"],
            {int(d): ThresholdSpec(**t) for d, t in manifest.get("thresholds", {}).items()},
        )

    @classmethod
    def load(cls, path, datasets):
        return cls.from_manifest(json.loads(Path(path).read_text()), datasets)
