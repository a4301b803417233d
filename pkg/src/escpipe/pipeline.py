"""End-to-end workflow: preprocess a corpus under one filtration mode, train
the level-1 head and the seven group heads, dispatch coarse-to-fine, and
report both evaluation regimes.

Two regimes exist on purpose. Isolated evaluation scores each level-2 head on
its own group-restricted test set (ground-truth routing); end-to-end
evaluation routes through the level-1 prediction first, so routing errors
count as misclassifications.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import CANONICAL_RATE, AudioClip, decode_wav, resample
from .dataset import (
    GroupLabel,
    Partition,
    SplitAssignment,
    Taxonomy,
    parse_meta_csv,
    subset_for_group,
)
from .errors import (
    ChecksumError,
    ContainerError,
    ContainerVersionError,
    DataError,
    MetadataError,
)
from .features import (
    FeatureVector,
    MelParams,
    PcenParams,
    StftParams,
    frontend_spectrogram,
    params_as_dict,
    pool_features,
    read_feature_file,
    write_feature_file,
)
from .model import (
    Metrics,
    MlpHead,
    TrainConfig,
    TrainHistory,
    evaluate,
    forward,
    init_head,
    load_model,
    save_model,
    train,
)
from .modifiers import CropParams, FiltrationMode, GateParams, apply_modifier, max_time_len

BUNDLE_MAGIC = b"ESC2"
BUNDLE_VERSION = 1

MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class FrontendConfig:
    """Everything needed to turn a raw clip into a feature vector."""

    mode: FiltrationMode
    sample_rate: int = CANONICAL_RATE
    stft: StftParams = field(default_factory=StftParams)
    mel: MelParams = field(default_factory=MelParams)
    pcen: PcenParams = field(default_factory=PcenParams)
    gate: GateParams = field(default_factory=GateParams)
    crop_threshold: float = 0.0
    crop_quotient_basis: str = "kept"
    crop_max_time: int | None = None  # fixed by the corpus pass

    def to_json(self) -> dict:
        return {
            "mode": self.mode.value,
            "sample_rate": self.sample_rate,
            "stft": params_as_dict(self.stft),
            "mel": params_as_dict(self.mel),
            "pcen": params_as_dict(self.pcen),
            "gate": params_as_dict(self.gate),
            "crop_threshold": self.crop_threshold,
            "crop_quotient_basis": self.crop_quotient_basis,
            "crop_max_time": self.crop_max_time,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "FrontendConfig":
        return cls(
            mode=FiltrationMode.parse(doc["mode"]),
            sample_rate=int(doc["sample_rate"]),
            stft=StftParams(**doc["stft"]),
            mel=MelParams(**doc["mel"]),
            pcen=PcenParams(**doc["pcen"]),
            gate=GateParams(**doc["gate"]),
            crop_threshold=float(doc["crop_threshold"]),
            crop_quotient_basis=doc["crop_quotient_basis"],
            crop_max_time=doc["crop_max_time"],
        )

    def crop_params(self) -> CropParams:
        if self.crop_max_time is None:
            raise DataError("audio-crop frontend has no stored corpus max_time")
        return CropParams(
            max_time=self.crop_max_time,
            silence_threshold=self.crop_threshold,
            quotient_basis=self.crop_quotient_basis,
        )

    def extract(self, clip: AudioClip) -> FeatureVector:
        """Raw clip -> modifier -> spectrogram -> pooled features."""
        if clip.sample_rate != self.sample_rate:
            clip = resample(clip, self.sample_rate)
        crop = self.crop_params() if self.mode is FiltrationMode.AUDIO_CROP else None
        modified = apply_modifier(clip, self.mode, crop=crop, gate=self.gate)
        spec = frontend_spectrogram(
            modified,
            use_pcen=self.mode is FiltrationMode.PCEN,
            stft_params=self.stft,
            mel_params=self.mel,
            pcen_params=self.pcen,
        )
        return pool_features(spec)


@dataclass
class ManifestEntry:
    filename: str
    category: str
    group: GroupLabel
    target: int
    fold: int
    feature_path: str
    n_samples_processed: int


@dataclass
class FeatureManifest:
    frontend: FrontendConfig
    dataset_dir: str
    entries: list[ManifestEntry]
    failures: list[dict]
    seed: int = 0  # provenance only; extraction itself is deterministic

    def to_json(self) -> dict:
        return {
            "frontend": self.frontend.to_json(),
            "seed": self.seed,
            "dataset_dir": self.dataset_dir,
            "entries": [
                {
                    "filename": e.filename,
                    "category": e.category,
                    "group": e.group.value,
                    "target": e.target,
                    "fold": e.fold,
                    "feature": e.feature_path,
                    "n_samples_processed": e.n_samples_processed,
                }
                for e in self.entries
            ],
            "failures": self.failures,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "FeatureManifest":
        return cls(
            frontend=FrontendConfig.from_json(doc["frontend"]),
            seed=int(doc.get("seed", 0)),
            dataset_dir=doc["dataset_dir"],
            entries=[
                ManifestEntry(
                    filename=e["filename"],
                    category=e["category"],
                    group=GroupLabel.parse(e["group"]),
                    target=int(e["target"]),
                    fold=int(e["fold"]),
                    feature_path=e["feature"],
                    n_samples_processed=int(e["n_samples_processed"]),
                )
                for e in doc["entries"]
            ],
            failures=list(doc.get("failures", [])),
        )

    @classmethod
    def load(cls, features_dir) -> "FeatureManifest":
        path = Path(features_dir) / MANIFEST_NAME
        if not path.exists():
            raise DataError(f"no {MANIFEST_NAME} in {features_dir}")
        return cls.from_json(json.loads(path.read_text()))


def load_corpus_meta(dataset_dir, taxonomy: Taxonomy | None = None):
    """Records from <dataset_dir>/meta/esc50.csv; audio lives in audio/."""
    dataset_dir = Path(dataset_dir)
    meta = dataset_dir / "meta" / "esc50.csv"
    if not meta.exists():
        raise MetadataError(f"missing metadata file {meta}")
    return parse_meta_csv(meta.read_text(), taxonomy=taxonomy)


def _load_clip(dataset_dir: Path, filename: str, sample_rate: int) -> AudioClip:
    clip = decode_wav((dataset_dir / "audio" / filename).read_bytes())
    if clip.sample_rate != sample_rate:
        clip = resample(clip, sample_rate)
    return clip


def preprocess_corpus(
    dataset_dir,
    mode: FiltrationMode,
    out_dir,
    frontend: FrontendConfig | None = None,
    taxonomy: Taxonomy | None = None,
    seed: int = 0,
) -> FeatureManifest:
    """Extract one pooled feature vector per corpus file under one mode.

    For AUDIO_CROP the whole corpus is measured first so every clip is tiled
    to the same corpus-maximum length, and that length is recorded in the
    manifest for later single-clip classification. Per-file failures are
    collected in the manifest instead of aborting the run.
    """
    dataset_dir = Path(dataset_dir)
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    frontend = frontend or FrontendConfig(mode=mode)
    if frontend.mode is not mode:
        raise ValueError("frontend.mode disagrees with the requested mode")
    records = load_corpus_meta(dataset_dir, taxonomy=taxonomy)
    if not records:
        raise MetadataError("corpus metadata has no rows")

    failures: list[dict] = []
    if mode is FiltrationMode.AUDIO_CROP and frontend.crop_max_time is None:
        lengths = []
        for rec in records:
            try:
                clip = _load_clip(dataset_dir, rec.filename, frontend.sample_rate)
                lengths.append(clip.duration_samples)
            except (DataError, OSError, ValueError):
                continue  # the processing pass reports the failure
        if not lengths:
            raise DataError("no decodable audio found while measuring crop length")
        frontend = dataclasses.replace(frontend, crop_max_time=max_time_len(lengths))

    entries: list[ManifestEntry] = []
    for rec in records:
        try:
            clip = _load_clip(dataset_dir, rec.filename, frontend.sample_rate)
            crop = (
                frontend.crop_params() if mode is FiltrationMode.AUDIO_CROP else None
            )
            modified = apply_modifier(clip, mode, crop=crop, gate=frontend.gate)
            spec = frontend_spectrogram(
                modified,
                use_pcen=mode is FiltrationMode.PCEN,
                stft_params=frontend.stft,
                mel_params=frontend.mel,
                pcen_params=frontend.pcen,
            )
            vec = pool_features(spec)
        except (DataError, OSError, ValueError) as exc:
            failures.append({"filename": rec.filename, "error": str(exc)})
            continue
        rel = f"features/{Path(rec.filename).stem}.esct"
        write_feature_file(
            out_dir / rel,
            vec.values,
            provenance={
                "source": rec.filename,
                "mode": mode.value,
                "category": rec.category,
                "group": rec.group.value,
                "stft": params_as_dict(frontend.stft),
                "mel": params_as_dict(frontend.mel),
            },
        )
        entries.append(
            ManifestEntry(
                filename=rec.filename,
                category=rec.category,
                group=rec.group,
                target=rec.target,
                fold=rec.fold,
                feature_path=rel,
                n_samples_processed=modified.duration_samples,
            )
        )

    manifest = FeatureManifest(
        frontend=frontend,
        dataset_dir=str(dataset_dir),
        entries=entries,
        failures=failures,
        seed=seed,
    )
    (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest.to_json(), indent=2))
    return manifest


class FeatureStore:
    """Feature vectors for manifest entries, loaded once and kept by filename."""

    def __init__(self, features_dir, manifest: FeatureManifest):
        self.manifest = manifest
        base = Path(features_dir)
        self.by_filename: dict[str, np.ndarray] = {}
        for e in manifest.entries:
            vec, _ = read_feature_file(base / e.feature_path)
            self.by_filename[e.filename] = vec

    @classmethod
    def open(cls, features_dir) -> "FeatureStore":
        return cls(features_dir, FeatureManifest.load(features_dir))

    def matrix_for(self, filenames, label_of) -> tuple[np.ndarray, np.ndarray]:
        xs, ys = [], []
        for name in filenames:
            if name not in self.by_filename:
                raise DataError(f"no features for {name!r} in the store")
            xs.append(self.by_filename[name])
            ys.append(label_of(name))
        return np.vstack(xs), np.asarray(ys, dtype=np.int64)


@dataclass
class TwoLevelModel:
    """One 7-way head plus one per-group head, with frontend provenance.

    ``group_categories`` pins each group's category-index order; level-2 head
    outputs are indexed accordingly.
    """

    level1: MlpHead
    level2: dict[GroupLabel, MlpHead]
    frontend: FrontendConfig
    group_categories: dict[GroupLabel, list[str]]
    histories: dict[str, TrainHistory] = field(default_factory=dict)

    def __post_init__(self):
        if set(self.level2) != set(GroupLabel):
            missing = [g.value for g in GroupLabel if g not in self.level2]
            raise ValueError(f"level2 must cover all 7 groups; missing {missing}")
        for g, head in self.level2.items():
            n = len(self.group_categories[g])
            if head.n_classes != n:
                raise ValueError(
                    f"{g.value} head has {head.n_classes} classes, expected {n}"
                )
        if self.level1.n_classes != len(GroupLabel):
            raise ValueError("level1 head must have 7 classes")


@dataclass(frozen=True)
class Prediction:
    group: GroupLabel
    group_probs: np.ndarray
    category: str
    category_probs: np.ndarray

    def to_json(self) -> dict:
        return {
            "group": self.group.value,
            "group_probs": [float(p) for p in self.group_probs],
            "category": self.category,
            "category_probs": [float(p) for p in self.category_probs],
        }


def select_group(group_probs: np.ndarray) -> GroupLabel:
    """Coarse dispatch: argmax over the 7 group probabilities (ties go to
    the lowest index, mirroring a first-match if/else chain)."""
    return list(GroupLabel)[int(np.argmax(group_probs))]


def classify_features(model: TwoLevelModel, vec: np.ndarray) -> Prediction:
    """Dispatch a pooled feature vector through both levels."""
    group_probs = forward(model.level1, vec)
    group = select_group(group_probs)
    category_probs = forward(model.level2[group], vec)
    category = model.group_categories[group][int(np.argmax(category_probs))]
    return Prediction(
        group=group,
        group_probs=group_probs,
        category=category,
        category_probs=category_probs,
    )


def classify(model: TwoLevelModel, clip: AudioClip) -> Prediction:
    """Raw clip in, fine-grained category out (frontend + two-level dispatch)."""
    vec = model.frontend.extract(clip)
    return classify_features(model, vec.values)


def train_two_level(
    manifest: FeatureManifest,
    features_dir,
    level1_split: SplitAssignment,
    level2_splits: dict[GroupLabel, SplitAssignment],
    cfg: TrainConfig,
) -> TwoLevelModel:
    """Train the 7-way head plus all seven group heads on stored features."""
    store = FeatureStore(features_dir, manifest)
    group_by_file = {e.filename: e.group for e in manifest.entries}
    cat_by_file = {e.filename: e.category for e in manifest.entries}
    input_dim = next(iter(store.by_filename.values())).shape[0]

    # configuration check up front: every group needs enough categories
    categories_by_group = {
        g: sorted({e.category for e in manifest.entries if e.group is g})
        for g in GroupLabel
    }
    for g, cats in categories_by_group.items():
        if len(cats) < 2:
            raise DataError(
                f"group '{g.value}' has {len(cats)} categories in the corpus; "
                "need at least 2 to train its head"
            )
        if g not in level2_splits:
            raise DataError(f"no level-2 split for group '{g.value}'")

    histories: dict[str, TrainHistory] = {}

    def fit(split_: SplitAssignment, n_classes: int, label_of, tag: str) -> MlpHead:
        x_tr, y_tr = store.matrix_for(split_.filenames(Partition.TRAIN), label_of)
        x_va, y_va = store.matrix_for(split_.filenames(Partition.VALIDATION), label_of)
        head = init_head(input_dim, n_classes, seed=cfg.seed)
        final, history = train(head, (x_tr, y_tr), (x_va, y_va), cfg)
        histories[tag] = history
        return history.best_head if history.best_head is not None else final

    group_order = list(GroupLabel)
    level1 = fit(
        level1_split,
        len(group_order),
        lambda name: group_by_file[name].index,
        "level1",
    )

    level2: dict[GroupLabel, MlpHead] = {}
    group_categories: dict[GroupLabel, list[str]] = {}
    for g in group_order:
        # categories actually present in the corpus; equals the taxonomy
        # listing for a full corpus, a subset for toy corpora
        cats = categories_by_group[g]
        index_of = {c: i for i, c in enumerate(cats)}
        level2[g] = fit(
            level2_splits[g],
            len(cats),
            lambda name, ix=index_of: ix[cat_by_file[name]],
            f"level2:{g.value}",
        )
        group_categories[g] = cats

    return TwoLevelModel(
        level1=level1,
        level2=level2,
        frontend=manifest.frontend,
        group_categories=group_categories,
        histories=histories,
    )


@dataclass
class ExperimentReport:
    """Per-head metrics in the shape of the published result tables."""

    mode: FiltrationMode
    level1_metrics: Metrics
    level2_metrics: dict[GroupLabel, Metrics]
    end_to_end_accuracy: float | None
    config: dict
    timings: dict

    def to_json(self) -> dict:
        return {
            "mode": self.mode.value,
            "level1": self.level1_metrics.to_json(),
            "level2": {g.value: m.to_json() for g, m in self.level2_metrics.items()},
            "end_to_end_accuracy": self.end_to_end_accuracy,
            "config": self.config,
            "timings": self.timings,
        }

    def to_markdown(self) -> str:
        """One table mirroring the published row labels."""
        rows = [("Level 1", self.level1_metrics)]
        rows += [(g.value, self.level2_metrics[g]) for g in GroupLabel if g in self.level2_metrics]
        lines = [
            "| Classifier | Highest Validation Accuracy | Classification Accuracy |",
            "|---|---|---|",
        ]
        for name, m in rows:
            hva = "-" if m.highest_validation_accuracy is None else f"{m.highest_validation_accuracy:.2%}"
            lines.append(f"| {name} | {hva} | {m.classification_accuracy:.2%} |")
        if self.end_to_end_accuracy is not None:
            lines.append(f"| end-to-end | - | {self.end_to_end_accuracy:.2%} |")
        return "\n".join(lines)


def evaluate_isolated(
    model: TwoLevelModel,
    store: FeatureStore,
    level1_split: SplitAssignment,
    level2_splits: dict[GroupLabel, SplitAssignment],
) -> ExperimentReport:
    """Score every head on its own test set (ground-truth routing)."""
    t0 = time.monotonic()
    group_by_file = {e.filename: e.group for e in store.manifest.entries}
    cat_by_file = {e.filename: e.category for e in store.manifest.entries}

    x, y = store.matrix_for(
        level1_split.filenames(Partition.TEST),
        lambda name: group_by_file[name].index,
    )
    level1_metrics = evaluate(model.level1, x, y, history=model.histories.get("level1"))

    level2_metrics: dict[GroupLabel, Metrics] = {}
    for g in GroupLabel:
        if g not in level2_splits:
            continue
        index_of = {c: i for i, c in enumerate(model.group_categories[g])}
        x, y = store.matrix_for(
            level2_splits[g].filenames(Partition.TEST),
            lambda name: index_of[cat_by_file[name]],
        )
        level2_metrics[g] = evaluate(
            model.level2[g], x, y, history=model.histories.get(f"level2:{g.value}")
        )

    return ExperimentReport(
        mode=model.frontend.mode,
        level1_metrics=level1_metrics,
        level2_metrics=level2_metrics,
        end_to_end_accuracy=None,
        config=model.frontend.to_json(),
        timings={"evaluate_seconds": time.monotonic() - t0},
    )


def evaluate_end_to_end(
    model: TwoLevelModel,
    store: FeatureStore,
    level1_split: SplitAssignment,
) -> float:
    """Category accuracy on the level-1 test set with predicted routing.

    A sample routed to the wrong group can never match its category, so
    routing errors count directly as misclassifications.
    """
    cat_by_file = {e.filename: e.category for e in store.manifest.entries}
    names = level1_split.filenames(Partition.TEST)
    if not names:
        raise DataError("level-1 split has an empty test partition")
    correct = 0
    for name in names:
        pred = classify_features(model, store.by_filename[name])
        correct += pred.category == cat_by_file[name]
    return correct / len(names)


def save_bundle(model: TwoLevelModel) -> bytes:
    """Single-file ensemble container.

    Layout: magic, u16 version, u32 JSON length, JSON metadata (frontend,
    group category orders, training histories), then 8 length-prefixed
    single-head containers (level1 first, then groups in declaration order),
    trailing CRC32 over everything before it.
    """
    meta = {
        "frontend": model.frontend.to_json(),
        "group_categories": {g.value: model.group_categories[g] for g in GroupLabel},
        "histories": {tag: h.to_json() for tag, h in model.histories.items()},
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    body = BUNDLE_MAGIC + struct.pack("<HI", BUNDLE_VERSION, len(meta_bytes)) + meta_bytes
    blobs = [save_model(model.level1)] + [save_model(model.level2[g]) for g in GroupLabel]
    for blob in blobs:
        body += struct.pack("<I", len(blob)) + blob
    return body + struct.pack("<I", zlib.crc32(body))


def load_bundle(data: bytes) -> TwoLevelModel:
    if len(data) < 4 or data[:4] != BUNDLE_MAGIC:
        raise ContainerError("not a two-level model bundle (bad magic)")
    if len(data) < 10:
        raise ContainerError("bundle truncated in header")
    version, meta_len = struct.unpack_from("<HI", data, 4)
    if version != BUNDLE_VERSION:
        raise ContainerVersionError(f"unsupported bundle version {version}")
    (stored,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != stored:
        raise ChecksumError("bundle checksum mismatch")
    off = 10
    meta = json.loads(data[off:off + meta_len].decode())
    off += meta_len
    heads = []
    for _ in range(1 + len(GroupLabel)):
        (blob_len,) = struct.unpack_from("<I", data, off)
        off += 4
        heads.append(load_model(data[off:off + blob_len]))
        off += blob_len
    histories = {
        tag: TrainHistory.from_json(doc) for tag, doc in meta.get("histories", {}).items()
    }
    return TwoLevelModel(
        level1=heads[0],
        level2={g: heads[1 + i] for i, g in enumerate(GroupLabel)},
        frontend=FrontendConfig.from_json(meta["frontend"]),
        group_categories={
            GroupLabel.parse(name): cats
            for name, cats in meta["group_categories"].items()
        },
        histories=histories,
    )
