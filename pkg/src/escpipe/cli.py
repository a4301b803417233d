"""Command-line interface.

Subcommands mirror the workflow: ``prep`` extracts features under one
filtration mode, ``split`` writes the train/validation/test manifest,
``train`` fits heads, ``eval`` writes a report, ``classify`` labels a single
WAV, and ``export`` renders spectrogram PNGs.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .audio import decode_wav, resample
from .dataset import (
    GroupLabel,
    Partition,
    Taxonomy,
    make_standard_splits,
    read_split_file,
    write_split_file,
)
from .errors import DataError, DivergenceError, EscError
from .features import frontend_spectrogram, render_png
from .model import TrainConfig, init_head, save_model, train
from .modifiers import FiltrationMode, apply_modifier
from .pipeline import (
    FeatureManifest,
    FeatureStore,
    FrontendConfig,
    classify,
    evaluate_end_to_end,
    evaluate_isolated,
    load_bundle,
    load_corpus_meta,
    preprocess_corpus,
    save_bundle,
    train_two_level,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits 2 by default; we reserve 2 for data
        self.print_usage(sys.stderr)
        raise UsageError(message)


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="esc-pipeline", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep", help="extract pooled features under one filtration mode")
    p.add_argument("--dataset", required=True, help="dataset root (meta/ + audio/)")
    p.add_argument("--mode", required=True, help="one of the 8 filtration mode names")
    p.add_argument("--out", required=True, help="output directory for features + manifest")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--crop-threshold", type=float, default=0.0,
                   help="silence threshold for Audio Crop (|x| <= t is silent)")
    p.add_argument("--crop-quotient-basis", choices=["kept", "original"], default="kept")
    p.add_argument("--taxonomy", help="override taxonomy CSV (category,group)")

    p = sub.add_parser("split", help="write the split manifest (level 1 + per-group)")
    p.add_argument("--dataset", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--no-stratify", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--taxonomy")

    p = sub.add_parser("train", help="train classification heads on stored features")
    p.add_argument("--features", required=True)
    p.add_argument("--splits", required=True)
    p.add_argument("--level", required=True, help="1, 2:<group>, or all")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="score a trained model and write a report")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--splits", required=True)
    p.add_argument("--end-to-end", action="store_true")
    p.add_argument("--report", required=True)

    p = sub.add_parser("classify", help="classify one WAV file (JSON on stdout)")
    p.add_argument("--model", required=True)
    p.add_argument("--wav", required=True)

    p = sub.add_parser("export", help="render spectrogram PNGs for a feature run")
    p.add_argument("--features", required=True)
    p.add_argument("--png", required=True, help="output directory for images")

    return parser


def _load_taxonomy(path: str | None) -> Taxonomy:
    if path is None:
        return Taxonomy.default()
    return Taxonomy.from_csv(Path(path).read_text())


def _cmd_prep(args) -> int:
    mode = FiltrationMode.parse(args.mode)
    frontend = FrontendConfig(
        mode=mode,
        crop_threshold=args.crop_threshold,
        crop_quotient_basis=args.crop_quotient_basis,
    )
    taxonomy = _load_taxonomy(args.taxonomy)
    taxonomy.validate_group_counts()
    manifest = preprocess_corpus(
        args.dataset, mode, args.out, frontend=frontend, taxonomy=taxonomy,
        seed=args.seed,
    )
    print(
        f"prepared {len(manifest.entries)} feature files under mode '{mode.value}' "
        f"({len(manifest.failures)} failures)"
    )
    for failure in manifest.failures:
        print(f"  failed: {failure['filename']}: {failure['error']}", file=sys.stderr)
    return EXIT_DATA if manifest.failures else EXIT_OK


def _cmd_split(args) -> int:
    taxonomy = _load_taxonomy(args.taxonomy)
    taxonomy.validate_group_counts()
    records = load_corpus_meta(args.dataset, taxonomy=taxonomy)
    level1, level2 = make_standard_splits(
        records, seed=args.seed, stratified=not args.no_stratify
    )
    write_split_file(args.out, level1, level2)
    tr, va, te = level1.counts()
    print(f"split {len(records)} records: {tr} train / {va} validation / {te} test")
    return EXIT_OK


def _train_single_level(args, store, level1, level2) -> int:
    manifest = store.manifest
    cfg = TrainConfig(
        learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch, seed=args.seed
    )
    group_by_file = {e.filename: e.group for e in manifest.entries}
    cat_by_file = {e.filename: e.category for e in manifest.entries}
    input_dim = next(iter(store.by_filename.values())).shape[0]

    if args.level == "1":
        assignment = level1
        label_of = lambda name: group_by_file[name].index
        n_classes = len(GroupLabel)
        class_names = [g.value for g in GroupLabel]
    else:
        group = GroupLabel.parse(args.level.split(":", 1)[1])
        if group not in level2:
            raise DataError(f"split file has no level-2 entry for '{group.value}'")
        assignment = level2[group]
        class_names = sorted(
            {cat_by_file[e.filename] for e in manifest.entries if e.group is group}
        )
        index_of = {c: i for i, c in enumerate(class_names)}
        label_of = lambda name: index_of[cat_by_file[name]]
        n_classes = len(class_names)

    x_tr, y_tr = store.matrix_for(assignment.filenames(Partition.TRAIN), label_of)
    x_va, y_va = store.matrix_for(assignment.filenames(Partition.VALIDATION), label_of)
    head = init_head(input_dim, n_classes, seed=cfg.seed)
    final, history = train(head, (x_tr, y_tr), (x_va, y_va), cfg)
    best = history.best_head if history.best_head is not None else final
    out = Path(args.out)
    out.write_bytes(save_model(best))
    out.with_suffix(out.suffix + ".json").write_text(
        json.dumps(
            {
                "level": args.level,
                "classes": class_names,
                "history": history.to_json(),
                "highest_validation_accuracy": history.highest_validation_accuracy,
            },
            indent=2,
        )
    )
    print(
        f"trained level {args.level}: best validation accuracy "
        f"{history.highest_validation_accuracy:.2%} (epoch {history.best_epoch + 1})"
    )
    return EXIT_OK


def _cmd_train(args) -> int:
    store = FeatureStore.open(args.features)
    level1, level2 = read_split_file(args.splits)
    if args.level in ("1",) or args.level.startswith("2:"):
        return _train_single_level(args, store, level1, level2)
    if args.level != "all":
        raise UsageError(f"--level must be 1, 2:<group>, or all, got {args.level!r}")
    cfg = TrainConfig(
        learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch, seed=args.seed
    )
    model = train_two_level(store.manifest, args.features, level1, level2, cfg)
    Path(args.out).write_bytes(save_bundle(model))
    hva = model.histories["level1"].highest_validation_accuracy
    print(f"trained 1 + {len(model.level2)} heads; level-1 best validation {hva:.2%}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    data = Path(args.model).read_bytes()
    if data[:4] != b"ESC2":
        raise DataError(
            "eval needs a two-level bundle (train with --level all); "
            "got a single-head container"
        )
    model = load_bundle(data)
    store = FeatureStore.open(args.features)
    level1, level2 = read_split_file(args.splits)
    report = evaluate_isolated(model, store, level1, level2)
    if args.end_to_end:
        report.end_to_end_accuracy = evaluate_end_to_end(model, store, level1)
    doc = report.to_json()
    Path(args.report).write_text(json.dumps(doc, indent=2))
    md_path = Path(args.report).with_suffix(".md")
    md_path.write_text(report.to_markdown() + "\n")
    print(report.to_markdown())
    return EXIT_OK


def _cmd_classify(args) -> int:
    data = Path(args.model).read_bytes()
    if data[:4] != b"ESC2":
        raise DataError("classify needs a two-level bundle (train with --level all)")
    model = load_bundle(data)
    clip = decode_wav(Path(args.wav).read_bytes())
    prediction = classify(model, clip)
    print(json.dumps(prediction.to_json(), indent=2))
    return EXIT_OK


def _cmd_export(args) -> int:
    manifest = FeatureManifest.load(args.features)
    out = Path(args.png)
    out.mkdir(parents=True, exist_ok=True)
    dataset_dir = Path(manifest.dataset_dir)
    frontend = manifest.frontend
    n = 0
    for entry in manifest.entries:
        wav = dataset_dir / "audio" / entry.filename
        if not wav.exists():
            raise DataError(
                f"source audio {wav} not found; export re-renders spectrograms "
                "from the original corpus"
            )
        clip = decode_wav(wav.read_bytes())
        if clip.sample_rate != frontend.sample_rate:
            clip = resample(clip, frontend.sample_rate)
        crop = (
            frontend.crop_params()
            if frontend.mode is FiltrationMode.AUDIO_CROP
            else None
        )
        modified = apply_modifier(clip, frontend.mode, crop=crop, gate=frontend.gate)
        spec = frontend_spectrogram(
            modified,
            use_pcen=frontend.mode is FiltrationMode.PCEN,
            stft_params=frontend.stft,
            mel_params=frontend.mel,
            pcen_params=frontend.pcen,
        )
        (out / (Path(entry.filename).stem + ".png")).write_bytes(render_png(spec))
        n += 1
    print(f"exported {n} spectrogram images to {out}")
    return EXIT_OK


_COMMANDS = {
    "prep": _cmd_prep,
    "split": _cmd_split,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "classify": _cmd_classify,
    "export": _cmd_export,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (EscError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
