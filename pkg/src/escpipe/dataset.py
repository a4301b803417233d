"""ESC-50 metadata ingestion, the seven-group taxonomy, and dataset splits.

The 50 ESC-50 categories are regrouped into seven classes (animal, birds,
nature, human, machine sounds, domestic, outdoor). Splits follow the 8:2
rule applied twice: 20% of the whole becomes the test set, then 20% of the
remainder becomes the validation set. Exact sizes use round-half-up for the
test cut and floor for the validation cut, which reproduces the published
per-group sample distribution.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import warnings
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .errors import EmptyDatasetError, MetadataError, UnknownCategoryError

META_COLUMNS = ("filename", "fold", "target", "category")

# Published per-group class counts; domestic is listed with 8 classes in the
# sample-distribution table but only 7 categories are enumerated in the
# grouping table. The grouping table wins; see validate_group_counts().
PUBLISHED_GROUP_SIZES = {
    "animal": 8,
    "birds": 4,
    "nature": 7,
    "human": 10,
    "machine_sounds": 4,
    "domestic": 8,
    "outdoor": 10,
}


class GroupLabel(enum.Enum):
    """Coarse class for level-1 classification (declaration order is the
    class-index order everywhere)."""

    ANIMAL = "animal"
    BIRDS = "birds"
    NATURE = "nature"
    HUMAN = "human"
    MACHINE_SOUNDS = "machine_sounds"
    DOMESTIC = "domestic"
    OUTDOOR = "outdoor"

    @classmethod
    def parse(cls, name: str) -> "GroupLabel":
        folded = name.strip().lower().replace(" ", "_").replace("-", "_")
        for g in cls:
            if g.value == folded:
                return g
        raise ValueError(f"unknown group {name!r}")

    @property
    def index(self) -> int:
        return list(GroupLabel).index(self)


class Partition(enum.Enum):
    TRAIN = "train"
    VALIDATION = "validation"
    TEST = "test"


@dataclass(frozen=True)
class EscRecord:
    filename: str
    fold: int
    target: int
    category: str
    group: GroupLabel


class TaxonomyDiscrepancyWarning(UserWarning):
    """Raised when actual group sizes differ from the published table."""


def normalize_category(name: str) -> str:
    return name.strip().lower().replace(" ", "_")


class Taxonomy:
    """Total mapping from canonical category names to groups."""

    def __init__(self, mapping: dict[str, GroupLabel]):
        if not mapping:
            raise MetadataError("taxonomy mapping is empty")
        self._mapping = dict(mapping)

    @classmethod
    def default(cls) -> "Taxonomy":
        text = resources.files("escpipe.data").joinpath("taxonomy.csv").read_text()
        return cls.from_csv(text)

    @classmethod
    def from_csv(cls, text: str) -> "Taxonomy":
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames is None or not {"category", "group"} <= set(reader.fieldnames):
            raise MetadataError("taxonomy CSV needs 'category' and 'group' columns")
        mapping = {}
        for row in reader:
            cat = normalize_category(row["category"])
            if cat in mapping:
                raise MetadataError(f"category {cat!r} mapped twice")
            mapping[cat] = GroupLabel.parse(row["group"])
        return cls(mapping)

    def group_of(self, category: str) -> GroupLabel:
        cat = normalize_category(category)
        try:
            return self._mapping[cat]
        except KeyError:
            raise UnknownCategoryError(
                f"category {cat!r} is not in the taxonomy"
            ) from None

    @property
    def categories(self) -> list[str]:
        return sorted(self._mapping)

    def categories_in(self, group: GroupLabel) -> list[str]:
        return sorted(c for c, g in self._mapping.items() if g is group)

    def group_sizes(self) -> dict[str, int]:
        return {g.value: len(self.categories_in(g)) for g in GroupLabel}

    def validate_group_counts(self) -> list[str]:
        """Compare against the published class counts; warn on mismatch.

        Returns the warning messages (also emitted as
        TaxonomyDiscrepancyWarning) so callers can record them.
        """
        messages = []
        sizes = self.group_sizes()
        for group, published in PUBLISHED_GROUP_SIZES.items():
            actual = sizes.get(group, 0)
            if actual != published:
                messages.append(
                    f"group '{group}' has {actual} categories; the published "
                    f"sample-distribution table lists {published}"
                )
        for msg in messages:
            warnings.warn(msg, TaxonomyDiscrepancyWarning, stacklevel=2)
        return messages


def group_of(category: str, taxonomy: Taxonomy | None = None) -> GroupLabel:
    """Group for one canonical category name."""
    return (taxonomy or Taxonomy.default()).group_of(category)


def parse_meta_csv(text: str, taxonomy: Taxonomy | None = None) -> list[EscRecord]:
    """Parse the dataset metadata CSV (official header
    ``filename,fold,target,category,esc10,src_file,take``).

    Category names are normalized (lowercase, spaces to underscores) and must
    be covered by the taxonomy; targets must lie in [0, 49].
    """
    taxonomy = taxonomy or Taxonomy.default()
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        raise MetadataError("metadata CSV is empty (no header row)")
    missing = [c for c in META_COLUMNS if c not in reader.fieldnames]
    if missing:
        raise MetadataError(f"metadata CSV is missing columns: {', '.join(missing)}")
    records = []
    for lineno, row in enumerate(reader, start=2):
        try:
            fold = int(row["fold"])
            target = int(row["target"])
        except (TypeError, ValueError):
            raise MetadataError(f"line {lineno}: fold/target are not integers") from None
        if not (0 <= target <= 49):
            raise MetadataError(f"line {lineno}: target {target} outside [0, 49]")
        category = normalize_category(row["category"] or "")
        if not category:
            raise MetadataError(f"line {lineno}: empty category")
        records.append(
            EscRecord(
                filename=row["filename"],
                fold=fold,
                target=target,
                category=category,
                group=taxonomy.group_of(category),
            )
        )
    return records


def subset_for_group(records, group: GroupLabel) -> list[EscRecord]:
    """Records belonging to one group, input order preserved."""
    return [r for r in records if r.group is group]


def split_sizes(n: int) -> tuple[int, int, int]:
    """(train, validation, test) sizes for n records.

    test = round-half-up of 0.2 n; validation = floor of 0.2 of the rest;
    train takes the remainder.
    """
    test = int(np.floor(0.2 * n + 0.5))
    val = int(np.floor(0.2 * (n - test)))
    return n - test - val, val, test


@dataclass(frozen=True)
class SplitAssignment:
    """Partition assignment for a set of records."""

    seed: int
    level: str  # "level1" or "level2:<group>"
    stratified: bool
    assignment: dict[str, Partition]  # filename -> partition
    records: tuple[EscRecord, ...]

    def filenames(self, partition: Partition) -> list[str]:
        return [r.filename for r in self.records if self.assignment[r.filename] is partition]

    def records_in(self, partition: Partition) -> list[EscRecord]:
        return [r for r in self.records if self.assignment[r.filename] is partition]

    def counts(self) -> tuple[int, int, int]:
        parts = list(self.assignment.values())
        return (
            sum(p is Partition.TRAIN for p in parts),
            sum(p is Partition.VALIDATION for p in parts),
            sum(p is Partition.TEST for p in parts),
        )

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "level": self.level,
            "stratified": self.stratified,
            "entries": [
                {
                    "filename": r.filename,
                    "category": r.category,
                    "group": r.group.value,
                    "partition": self.assignment[r.filename].value,
                }
                for r in self.records
            ],
        }

    @classmethod
    def from_json(cls, doc: dict, taxonomy: Taxonomy | None = None) -> "SplitAssignment":
        taxonomy = taxonomy or Taxonomy.default()
        records = []
        assignment = {}
        for e in doc["entries"]:
            rec = EscRecord(
                filename=e["filename"],
                fold=0,
                target=-1,
                category=e["category"],
                group=GroupLabel.parse(e["group"]),
            )
            records.append(rec)
            assignment[rec.filename] = Partition(e["partition"])
        return cls(
            seed=int(doc["seed"]),
            level=doc["level"],
            stratified=bool(doc.get("stratified", True)),
            assignment=assignment,
            records=tuple(records),
        )


def split(
    records,
    seed: int,
    stratified: bool = True,
    level: str = "level1",
) -> SplitAssignment:
    """Seeded three-way split.

    Sizes follow :func:`split_sizes` on the whole record list. When
    stratified (the default), per-category quotas are apportioned so that the
    global sizes still hold and every category lands in every partition when
    counts allow.
    """
    records = list(records)
    if not records:
        raise EmptyDatasetError("cannot split an empty record list")
    rng = np.random.default_rng(seed)
    n_train, n_val, n_test = split_sizes(len(records))
    assignment: dict[str, Partition] = {}

    if not stratified:
        order = rng.permutation(len(records))
        shuffled = [records[i] for i in order]
        for r in shuffled[:n_test]:
            assignment[r.filename] = Partition.TEST
        for r in shuffled[n_test:n_test + n_val]:
            assignment[r.filename] = Partition.VALIDATION
        for r in shuffled[n_test + n_val:]:
            assignment[r.filename] = Partition.TRAIN
    else:
        by_cat: dict[str, list[EscRecord]] = {}
        for r in records:
            by_cat.setdefault(r.category, []).append(r)
        cats = sorted(by_cat)
        sizes = np.array([len(by_cat[c]) for c in cats], dtype=float)
        test_quota = _proportional_quota(sizes, n_test, rng)
        remaining = sizes - test_quota
        val_quota = _proportional_quota(remaining, n_val, rng)
        for c, tq, vq in zip(cats, test_quota, val_quota):
            members = by_cat[c]
            order = rng.permutation(len(members))
            shuffled = [members[i] for i in order]
            for r in shuffled[:tq]:
                assignment[r.filename] = Partition.TEST
            for r in shuffled[tq:tq + vq]:
                assignment[r.filename] = Partition.VALIDATION
            for r in shuffled[tq + vq:]:
                assignment[r.filename] = Partition.TRAIN

    return SplitAssignment(
        seed=seed,
        level=level,
        stratified=stratified,
        assignment=assignment,
        records=tuple(records),
    )


def _proportional_quota(sizes: np.ndarray, total: int, rng: np.random.Generator) -> np.ndarray:
    """Integer quotas proportional to `sizes` summing to `total`
    (largest remainder, seeded tie-break)."""
    if total == 0:
        return np.zeros(len(sizes), dtype=int)
    weights = sizes / sizes.sum()
    ideal = weights * total
    quota = np.floor(ideal).astype(int)
    shortfall = total - quota.sum()
    if shortfall > 0:
        frac = ideal - quota
        # seeded jitter breaks exact ties without disturbing the ordering
        tie_break = rng.random(len(sizes)) * 1e-9
        order = np.argsort(-(frac + tie_break), kind="stable")
        capacity = sizes - quota
        for i in order:
            if shortfall == 0:
                break
            if capacity[i] >= 1:
                quota[i] += 1
                shortfall -= 1
    return quota


def write_split_file(path, level1: SplitAssignment, level2: dict[GroupLabel, SplitAssignment]):
    doc = {
        "seed": level1.seed,
        "stratified": level1.stratified,
        "level1": level1.to_json(),
        "level2": {g.value: a.to_json() for g, a in level2.items()},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)


def read_split_file(path) -> tuple[SplitAssignment, dict[GroupLabel, SplitAssignment]]:
    with open(path) as fh:
        doc = json.load(fh)
    level1 = SplitAssignment.from_json(doc["level1"])
    level2 = {
        GroupLabel.parse(name): SplitAssignment.from_json(sub)
        for name, sub in doc["level2"].items()
    }
    return level1, level2


def make_standard_splits(
    records, seed: int, stratified: bool = True
) -> tuple[SplitAssignment, dict[GroupLabel, SplitAssignment]]:
    """Level-1 split over everything plus an independent split per group."""
    level1 = split(records, seed=seed, stratified=stratified, level="level1")
    level2 = {}
    for g in GroupLabel:
        members = subset_for_group(records, g)
        if members:
            level2[g] = split(
                members, seed=seed, stratified=stratified, level=f"level2:{g.value}"
            )
    return level1, level2
