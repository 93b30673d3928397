"""Dataset layout, episodic sampling, and the meta-test role schedule.

A dataset directory holds PNG pairs plus a manifest.json:

    {"version": 1, "condition_id": ..., "spec": {...},
     "pairs": [{"id", "degraded_path", "clean_path", "seed", "split"}, ...]}

Paths are relative to the manifest's directory.  The first ceil(10%) of the
pairs are tagged "meta-test-support" (the pool adaptation draws from); the
remainder are tagged "eval".  The split is fixed at build time so support-set
robustness runs can pick distinct support sets reproducibly.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .degrade import WeatherSpec, make_pair
from .errors import ParameterError
from .imaging import read_image, write_image

MANIFEST_VERSION = 1
SPLIT_SUPPORT = "meta-test-support"
SPLIT_EVAL = "eval"


@dataclass
class Pair:
    """An in-memory (degraded, clean) pair tagged with its weather condition."""

    id: str
    degraded: np.ndarray
    clean: np.ndarray
    condition_id: str

    def __post_init__(self) -> None:
        if self.degraded.shape != self.clean.shape:
            raise ParameterError(f"pair {self.id}: degraded/clean shape mismatch")


@dataclass
class Episode:
    support: list  # list[Pair], length N >= 1
    query: list  # list[Pair], length >= 1
    condition_id: str


@dataclass
class PairRecord:
    id: str
    degraded_path: str
    clean_path: str
    seed: int
    split: str


@dataclass
class DatasetManifest:
    version: int
    condition_id: str
    spec: WeatherSpec
    pairs: list  # list[PairRecord]
    root: str = "."
    _cache: dict = field(default_factory=dict, repr=False)

    def to_json(self) -> str:
        return json.dumps(
            {
                "version": self.version,
                "condition_id": self.condition_id,
                "spec": self.spec.to_dict(),
                "pairs": [
                    {
                        "id": r.id,
                        "degraded_path": r.degraded_path,
                        "clean_path": r.clean_path,
                        "seed": r.seed,
                        "split": r.split,
                    }
                    for r in self.pairs
                ],
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str, root: str = ".") -> "DatasetManifest":
        data = json.loads(text)
        return cls(
            version=data["version"],
            condition_id=data["condition_id"],
            spec=WeatherSpec.from_dict(data["spec"]),
            pairs=[PairRecord(**p) for p in data["pairs"]],
            root=root,
        )

    def load_pair(self, record: PairRecord) -> Pair:
        if record.id not in self._cache:
            self._cache[record.id] = Pair(
                id=record.id,
                degraded=read_image(os.path.join(self.root, record.degraded_path)),
                clean=read_image(os.path.join(self.root, record.clean_path)),
                condition_id=self.condition_id,
            )
        return self._cache[record.id]

    def split_records(self, split: str) -> list:
        return [r for r in self.pairs if r.split == split]


def load_manifest(path: str) -> DatasetManifest:
    """Read manifest.json from a dataset directory (or a direct file path)."""
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    return DatasetManifest.from_json(text, root=os.path.dirname(os.path.abspath(path)))


def build_dataset(
    spec: WeatherSpec,
    count: int,
    seed: int,
    out_dir: str,
    condition_id: str = "condition",
    size: int = 64,
) -> DatasetManifest:
    """Render `count` degraded/clean PNG pairs plus manifest.json.

    Deterministic in (spec, count, seed, size).  The stored degraded frame is
    the clipped, 8-bit-quantized composite; ground-truth patterns on stored
    data are therefore defined by X - Y of the stored pair.
    """
    if count < 2:
        raise ParameterError("dataset needs at least 2 pairs")
    os.makedirs(out_dir, exist_ok=True)
    n_support = int(np.ceil(count * 0.1))
    records = []
    for i in range(count):
        pair_seed = int(np.random.SeedSequence([int(seed), i]).generate_state(1)[0])
        composite, clean, _ = make_pair(spec, pair_seed, h=size, w=size)
        pid = f"{condition_id}-{i:04d}"
        deg_path = f"{pid}-x.png"
        clean_path = f"{pid}-y.png"
        write_image(os.path.join(out_dir, deg_path), composite.image)
        write_image(os.path.join(out_dir, clean_path), clean)
        records.append(
            PairRecord(
                id=pid,
                degraded_path=deg_path,
                clean_path=clean_path,
                seed=pair_seed,
                split=SPLIT_SUPPORT if i < n_support else SPLIT_EVAL,
            )
        )
    manifest = DatasetManifest(
        version=MANIFEST_VERSION,
        condition_id=condition_id,
        spec=spec,
        pairs=records,
        root=os.path.abspath(out_dir),
    )
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        f.write(manifest.to_json())
    return manifest


def sample_episode(manifests: list, n_support: int, n_query: int, seed) -> Episode:
    """Draw one single-condition episode: a condition, then disjoint pairs."""
    if not manifests:
        raise ParameterError("no manifests to sample from")
    rng = np.random.Generator(np.random.PCG64(seed))
    manifest = manifests[int(rng.integers(0, len(manifests)))]
    need = n_support + n_query
    if len(manifest.pairs) < need:
        raise ParameterError(
            f"condition {manifest.condition_id!r} has {len(manifest.pairs)} pairs, "
            f"episode needs {need}"
        )
    idx = rng.choice(len(manifest.pairs), size=need, replace=False)
    chosen = [manifest.load_pair(manifest.pairs[int(i)]) for i in idx]
    return Episode(
        support=chosen[:n_support],
        query=chosen[n_support:],
        condition_id=manifest.condition_id,
    )


def meta_test_rounds(support: list) -> list:
    """Query/support role schedule for adaptation.

    N=1: the single pair plays both roles (duplication).  Even N: the two
    halves swap roles across two rounds.  Odd N>1: ceil/floor split, then
    swapped.  Returns [(query_subset, support_subset), ...].
    """
    if not support:
        raise ParameterError("meta-test rounds need at least one support pair")
    n = len(support)
    if n == 1:
        return [(list(support), list(support))]
    cut = (n + 1) // 2
    first, second = list(support[:cut]), list(support[cut:])
    return [(first, second), (second, first)]
