import json

import numpy as np
import pytest

from escpipe.audio import AudioClip, decode_wav
from escpipe.dataset import GroupLabel, Partition, Taxonomy, make_standard_splits
from escpipe.errors import ChecksumError, ContainerError, DataError
from escpipe.features import read_feature_file
from escpipe.model import MlpHead, TrainConfig
from escpipe.modifiers import FiltrationMode
from escpipe.pipeline import (
    FeatureManifest,
    FeatureStore,
    FrontendConfig,
    TwoLevelModel,
    classify,
    classify_features,
    evaluate_end_to_end,
    evaluate_isolated,
    load_bundle,
    load_corpus_meta,
    preprocess_corpus,
    save_bundle,
    select_group,
    train_two_level,
)
from escpipe.synthetic import tone_frequency, write_tone_corpus

FEATURE_DIM = 256


def forced_head(n_classes, winner, input_dim=FEATURE_DIM):
    """Head whose output bias forces one class regardless of input."""
    bias = np.zeros(n_classes, dtype=np.float32)
    bias[winner] = 30.0
    return MlpHead(
        layer_dims=[input_dim, n_classes],
        weights=[np.zeros((input_dim, n_classes), dtype=np.float32)],
        biases=[bias],
    )


def scoring_head(n_classes, input_dim=FEATURE_DIM):
    """Head whose logits equal the first n_classes input features."""
    w = np.zeros((input_dim, n_classes), dtype=np.float32)
    w[:n_classes, :n_classes] = np.eye(n_classes, dtype=np.float32) * 10.0
    return MlpHead(
        layer_dims=[input_dim, n_classes],
        weights=[w],
        biases=[np.zeros(n_classes, dtype=np.float32)],
    )


def mock_model(level1_winner=None, level2_winners=None, taxonomy=None):
    taxonomy = taxonomy or Taxonomy.default()
    group_categories = {g: taxonomy.categories_in(g) for g in GroupLabel}
    if level1_winner is None:
        level1 = scoring_head(7)
    else:
        level1 = forced_head(7, level1_winner)
    level2 = {}
    for g in GroupLabel:
        n = len(group_categories[g])
        winner = 0 if level2_winners is None else level2_winners.get(g, 0)
        level2[g] = forced_head(n, winner)
    return TwoLevelModel(
        level1=level1,
        level2=level2,
        frontend=FrontendConfig(mode=FiltrationMode.NO_FILTER),
        group_categories=group_categories,
    )


class TestDispatch:
    def test_forced_branch_invokes_only_that_group(self):
        model = mock_model(level1_winner=GroupLabel.ANIMAL.index)
        pred = classify_features(model, np.zeros(FEATURE_DIM))
        assert pred.group is GroupLabel.ANIMAL
        assert pred.category in model.group_categories[GroupLabel.ANIMAL]

    def test_all_seven_branches_fire(self):
        seen = []
        for g in GroupLabel:
            model = mock_model(level1_winner=g.index)
            pred = classify_features(model, np.zeros(FEATURE_DIM))
            assert pred.group is g
            assert pred.category in model.group_categories[g]
            seen.append(pred.group)
        assert len(set(seen)) == 7

    def test_category_always_in_predicted_group(self, rng):
        taxonomy = Taxonomy.default()
        model = mock_model()
        for _ in range(50):
            vec = rng.normal(0, 2, FEATURE_DIM)
            pred = classify_features(model, vec)
            assert taxonomy.group_of(pred.category) is pred.group

    def test_dispatch_equals_argmax_on_random_probability_vectors(self, rng):
        groups = list(GroupLabel)
        for _ in range(10_000):
            probs = rng.dirichlet(np.ones(7))
            assert select_group(probs) is groups[int(np.argmax(probs))]

    def test_ties_choose_first_branch(self):
        probs = np.full(7, 1 / 7)
        assert select_group(probs) is GroupLabel.ANIMAL

    def test_group_probs_surface_in_prediction(self):
        model = mock_model(level1_winner=3)
        pred = classify_features(model, np.zeros(FEATURE_DIM))
        assert pred.group_probs.shape == (7,)
        assert np.argmax(pred.group_probs) == 3
        assert abs(pred.group_probs.sum() - 1.0) < 1e-6


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_corpus")
    return write_tone_corpus(
        root, seed=0, categories_per_group=2, clips_per_category=16, seconds=0.2
    )


class TestPreprocess:
    def test_no_filter_produces_manifest_and_features(self, tiny_corpus, tmp_path):
        out = tmp_path / "feat"
        manifest = preprocess_corpus(tiny_corpus, FiltrationMode.NO_FILTER, out)
        assert len(manifest.entries) == 7 * 2 * 16
        assert manifest.failures == []
        assert (out / "manifest.json").exists()
        entry = manifest.entries[0]
        vec, prov = read_feature_file(out / entry.feature_path)
        assert vec.shape == (2 * 128,)
        assert prov["mode"] == "No Filter"
        assert prov["source"] == entry.filename

    def test_three_file_toy_corpus(self, tmp_path):
        corpus = write_tone_corpus(
            tmp_path / "c3", seed=1, categories_per_group=1,
            clips_per_category=1, seconds=0.15,
        )
        # trim metadata to exactly 3 files for a minimal plumbing check
        meta = corpus / "meta" / "esc50.csv"
        lines = meta.read_text().strip().splitlines()
        meta.write_text("\n".join(lines[:4]) + "\n")
        manifest = preprocess_corpus(corpus, FiltrationMode.NO_FILTER, tmp_path / "f3")
        assert len(manifest.entries) == 3

    def test_audio_crop_uses_corpus_max_everywhere(self, tmp_path):
        corpus = write_tone_corpus(
            tmp_path / "cv", seed=2, categories_per_group=1,
            clips_per_category=4, seconds=0.2, vary_lengths=True,
        )
        manifest = preprocess_corpus(corpus, FiltrationMode.AUDIO_CROP, tmp_path / "fv")
        max_time = manifest.frontend.crop_max_time
        assert max_time is not None
        lengths = {e.n_samples_processed for e in manifest.entries}
        assert lengths == {max_time}

    def test_band_stop_changes_broadband_features(self, tmp_path, rng):
        corpus_dir = tmp_path / "noise_corpus"
        (corpus_dir / "audio").mkdir(parents=True)
        (corpus_dir / "meta").mkdir()
        from escpipe.audio import encode_wav

        noise = AudioClip(samples=rng.uniform(-0.5, 0.5, 22050), sample_rate=44100)
        (corpus_dir / "audio" / "1-1-A-0.wav").write_bytes(encode_wav(noise))
        (corpus_dir / "meta" / "esc50.csv").write_text(
            "filename,fold,target,category,esc10,src_file,take\n"
            "1-1-A-0.wav,1,0,dog,False,s,A\n"
        )
        plain = preprocess_corpus(corpus_dir, FiltrationMode.NO_FILTER, tmp_path / "p")
        stopped = preprocess_corpus(corpus_dir, FiltrationMode.BAND_STOP, tmp_path / "s")
        v1, _ = read_feature_file(tmp_path / "p" / plain.entries[0].feature_path)
        v2, _ = read_feature_file(tmp_path / "s" / stopped.entries[0].feature_path)
        assert np.abs(v1 - v2).max() > 1.0  # dB-scale features move a lot

    def test_unreadable_file_collected_not_fatal(self, tmp_path):
        corpus = write_tone_corpus(
            tmp_path / "cbad", seed=3, categories_per_group=1,
            clips_per_category=2, seconds=0.15,
        )
        bad = next((corpus / "audio").glob("*.wav"))
        bad.write_bytes(b"RIFX garbage")
        manifest = preprocess_corpus(corpus, FiltrationMode.NO_FILTER, tmp_path / "fbad")
        assert len(manifest.failures) == 1
        assert manifest.failures[0]["filename"] == bad.name
        assert len(manifest.entries) == 7 * 2 - 1

    def test_manifest_roundtrip(self, tiny_corpus, tmp_path):
        out = tmp_path / "feat_rt"
        manifest = preprocess_corpus(tiny_corpus, FiltrationMode.PCEN, out)
        back = FeatureManifest.load(out)
        assert back.frontend.mode is FiltrationMode.PCEN
        assert len(back.entries) == len(manifest.entries)
        assert back.entries[0].group is manifest.entries[0].group


@pytest.fixture(scope="module")
def trained_setup(tiny_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("features")
    manifest = preprocess_corpus(tiny_corpus, FiltrationMode.NO_FILTER, out)
    records = load_corpus_meta(tiny_corpus)
    level1, level2 = make_standard_splits(records, seed=0)
    cfg = TrainConfig(learning_rate=0.02, epochs=80, batch_size=32, seed=0)
    model = train_two_level(manifest, out, level1, level2, cfg)
    store = FeatureStore(out, manifest)
    return model, store, level1, level2


class TestTrainTwoLevel:
    def test_structure_one_plus_seven(self, trained_setup):
        model, _, _, _ = trained_setup
        assert model.level1.n_classes == 7
        assert len(model.level2) == 7
        for g, head in model.level2.items():
            assert head.n_classes == len(model.group_categories[g])

    def test_histories_cover_every_head(self, trained_setup):
        model, _, _, _ = trained_setup
        assert set(model.histories) == {"level1"} | {
            f"level2:{g.value}" for g in GroupLabel
        }
        for history in model.histories.values():
            assert len(history.epochs) == 80

    def test_small_group_rejected(self, tmp_path):
        # one category per group: no group head can be trained
        corpus = write_tone_corpus(
            tmp_path / "c1", seed=5, categories_per_group=1,
            clips_per_category=5, seconds=0.15,
        )
        out = tmp_path / "feat1"
        manifest = preprocess_corpus(corpus, FiltrationMode.NO_FILTER, out)
        records = load_corpus_meta(corpus)
        level1, level2 = make_standard_splits(records, seed=0)
        with pytest.raises(DataError, match="animal"):
            train_two_level(
                manifest, out, level1, level2,
                TrainConfig(epochs=1, seed=0),
            )


class TestEvaluation:
    def test_isolated_report_structure(self, trained_setup):
        model, store, level1, level2 = trained_setup
        report = evaluate_isolated(model, store, level1, level2)
        assert report.mode is FiltrationMode.NO_FILTER
        assert set(report.level2_metrics) == set(GroupLabel)  # 8 blocks total
        assert report.level1_metrics.highest_validation_accuracy is not None
        md = report.to_markdown()
        assert "Highest Validation Accuracy" in md
        assert "Classification Accuracy" in md

    def test_perfect_mock_heads_score_one(self, tiny_corpus, tmp_path_factory):
        out = tmp_path_factory.mktemp("feat_mock")
        manifest = preprocess_corpus(tiny_corpus, FiltrationMode.NO_FILTER, out)
        store = FeatureStore(out, manifest)
        records = load_corpus_meta(tiny_corpus)
        level1, level2 = make_standard_splits(records, seed=0)

        # oracle heads: replace every stored feature vector by a one-hot
        # encoding of its true label so an identity readout is perfect
        group_categories = {
            g: sorted({e.category for e in manifest.entries if e.group is g})
            for g in GroupLabel
        }
        for e in manifest.entries:
            vec = np.zeros(FEATURE_DIM)
            vec[e.group.index] = 1.0
            ci = group_categories[e.group].index(e.category)
            vec[16 + ci] = 1.0
            store.by_filename[e.filename] = vec

        level1_head = scoring_head(7)
        level2_heads = {}
        for g in GroupLabel:
            n = len(group_categories[g])
            w = np.zeros((FEATURE_DIM, n), dtype=np.float32)
            w[16:16 + n, :] = np.eye(n, dtype=np.float32) * 10.0
            level2_heads[g] = MlpHead(
                layer_dims=[FEATURE_DIM, n],
                weights=[w],
                biases=[np.zeros(n, dtype=np.float32)],
            )
        model = TwoLevelModel(
            level1=level1_head,
            level2=level2_heads,
            frontend=FrontendConfig(mode=FiltrationMode.NO_FILTER),
            group_categories=group_categories,
        )
        report = evaluate_isolated(model, store, level1, level2)
        assert report.level1_metrics.classification_accuracy == 1.0
        for metrics in report.level2_metrics.values():
            assert metrics.classification_accuracy == 1.0
        assert evaluate_end_to_end(model, store, level1) == 1.0

    def test_wrong_router_scores_zero(self, trained_setup):
        model, store, level1, level2 = trained_setup
        # route everything to a fixed wrong-ish group: any sample whose true
        # group differs can never be right; samples of that group may be
        taxonomy = Taxonomy.default()
        group_by_file = {e.filename: e.group for e in store.manifest.entries}
        always = GroupLabel.BIRDS
        routed = TwoLevelModel(
            level1=forced_head(7, always.index),
            level2=model.level2,
            frontend=model.frontend,
            group_categories=model.group_categories,
            histories=model.histories,
        )
        names = [
            n for n in level1.filenames(Partition.TEST)
            if group_by_file[n] is not always
        ]
        for name in names:
            pred = classify_features(routed, store.by_filename[name])
            assert taxonomy.group_of(pred.category) is always
            assert pred.category != store_category(store, name)

    def test_end_to_end_bounded_by_routing_accuracy(self, trained_setup):
        model, store, level1, _ = trained_setup
        group_by_file = {e.filename: e.group for e in store.manifest.entries}
        names = level1.filenames(Partition.TEST)
        routed_right = sum(
            classify_features(model, store.by_filename[n]).group is group_by_file[n]
            for n in names
        ) / len(names)
        e2e = evaluate_end_to_end(model, store, level1)
        assert e2e <= routed_right + 1e-12
        assert 0.0 <= e2e <= 1.0


def store_category(store, name):
    return {e.filename: e.category for e in store.manifest.entries}[name]


class TestEndToEndLearning:
    def test_tone_corpus_learns(self, trained_setup):
        # small corpus, distinguishable tones; the full-scale threshold
        # lives in the acceptance suite
        model, store, level1, level2 = trained_setup
        report = evaluate_isolated(model, store, level1, level2)
        assert report.level1_metrics.classification_accuracy >= 0.9
        e2e = evaluate_end_to_end(model, store, level1)
        assert e2e >= 0.75

    def test_classify_roundtrip_from_wav(self, tiny_corpus, trained_setup):
        # classify() on raw WAVs must agree with the stored-feature path
        model, store, _, _ = trained_setup
        cat_by_file = {e.filename: e.category for e in store.manifest.entries}
        names = list(cat_by_file)[::16][:21]  # spread across categories
        agree = 0
        for name in names:
            clip = decode_wav((tiny_corpus / "audio" / name).read_bytes())
            from_wav = classify(model, clip)
            from_store = classify_features(model, store.by_filename[name])
            agree += from_wav.category == from_store.category
        assert agree == len(names)


@pytest.fixture(scope="module")
def full_setup(tmp_path_factory):
    from escpipe.dataset import parse_meta_csv
    from escpipe.features import write_feature_file
    from escpipe.pipeline import ManifestEntry

    rng = np.random.default_rng(0)
    taxonomy = Taxonomy.default()
    out = tmp_path_factory.mktemp("full_features")
    (out / "features").mkdir()
    rows = ["filename,fold,target,category,esc10,src_file,take"]
    entries = []
    targets = {c: i for i, c in enumerate(taxonomy.categories)}
    k = 0
    for cat in taxonomy.categories:
        for j in range(40):
            name = f"{j % 5 + 1}-{k}-A-{targets[cat]}.wav"
            rows.append(f"{name},{j % 5 + 1},{targets[cat]},{cat},False,s,A")
            rel = f"features/{name[:-4]}.esct"
            write_feature_file(out / rel, rng.normal(0, 1, 64))
            entries.append(
                ManifestEntry(
                    filename=name,
                    category=cat,
                    group=taxonomy.group_of(cat),
                    target=targets[cat],
                    fold=j % 5 + 1,
                    feature_path=rel,
                    n_samples_processed=0,
                )
            )
            k += 1
    manifest = FeatureManifest(
        frontend=FrontendConfig(mode=FiltrationMode.NO_FILTER),
        dataset_dir=str(out),
        entries=entries,
        failures=[],
    )
    records = parse_meta_csv("\n".join(rows) + "\n")
    level1, level2 = make_standard_splits(records, seed=0)
    cfg = TrainConfig(epochs=1, seed=0)
    model = train_two_level(manifest, out, level1, level2, cfg)
    store = FeatureStore(out, manifest)
    return model, store, level1, level2


class TestFullTaxonomyStructure:
    """Shape checks at the published dataset's scale, on random features."""

    def test_level2_head_class_counts(self, full_setup):
        model, _, _, _ = full_setup
        expected = {
            GroupLabel.ANIMAL: 8, GroupLabel.BIRDS: 4, GroupLabel.NATURE: 7,
            GroupLabel.HUMAN: 10, GroupLabel.MACHINE_SOUNDS: 4,
            GroupLabel.DOMESTIC: 7, GroupLabel.OUTDOOR: 10,
        }
        for g, n in expected.items():
            assert model.level2[g].n_classes == n

    def test_level1_test_set_size_400(self, full_setup):
        _, _, level1, _ = full_setup
        assert len(level1.filenames(Partition.TEST)) == 400

    def test_report_has_eight_metric_blocks(self, full_setup):
        model, store, level1, level2 = full_setup
        report = evaluate_isolated(model, store, level1, level2)
        assert len(report.level2_metrics) == 7  # plus level-1 = 8 blocks
        assert report.level1_metrics.confusion.shape == (7, 7)
        for g, metrics in report.level2_metrics.items():
            n = model.level2[g].n_classes
            assert metrics.confusion.shape == (n, n)


class TestReproducibility:
    def test_preprocess_train_evaluate_bitwise(self, tmp_path):
        # same corpus, same seed, two independent runs: identical features,
        # identical weights, identical report numbers
        corpus = write_tone_corpus(
            tmp_path / "c", seed=4, categories_per_group=2,
            clips_per_category=6, seconds=0.15,
        )
        results = []
        for run in range(2):
            out = tmp_path / f"f{run}"
            manifest = preprocess_corpus(corpus, FiltrationMode.NO_FILTER, out)
            records = load_corpus_meta(corpus)
            level1, level2 = make_standard_splits(records, seed=0)
            cfg = TrainConfig(epochs=5, seed=0)
            model = train_two_level(manifest, out, level1, level2, cfg)
            store = FeatureStore(out, manifest)
            report = evaluate_isolated(model, store, level1, level2)
            e2e = evaluate_end_to_end(model, store, level1)
            results.append((manifest, model, report, e2e))
        m0, m1 = results[0][1], results[1][1]
        for e0, e1 in zip(results[0][0].entries, results[1][0].entries):
            a, _ = read_feature_file(tmp_path / "f0" / e0.feature_path)
            b, _ = read_feature_file(tmp_path / "f1" / e1.feature_path)
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(m0.level1.weights[0], m1.level1.weights[0])
        for g in GroupLabel:
            np.testing.assert_array_equal(
                m0.level2[g].weights[-1], m1.level2[g].weights[-1]
            )
        assert (
            results[0][2].level1_metrics.classification_accuracy
            == results[1][2].level1_metrics.classification_accuracy
        )
        assert results[0][3] == results[1][3]


class TestBundle:
    def test_roundtrip(self, trained_setup):
        model, store, level1, _ = trained_setup
        data = save_bundle(model)
        back = load_bundle(data)
        assert back.frontend.mode is model.frontend.mode
        assert back.group_categories == model.group_categories
        np.testing.assert_array_equal(
            back.level1.weights[0], model.level1.weights[0]
        )
        for g in GroupLabel:
            np.testing.assert_array_equal(
                back.level2[g].weights[-1], model.level2[g].weights[-1]
            )
        assert set(back.histories) == set(model.histories)
        assert (
            back.histories["level1"].highest_validation_accuracy
            == model.histories["level1"].highest_validation_accuracy
        )

    def test_same_predictions_after_roundtrip(self, trained_setup, rng):
        model, _, _, _ = trained_setup
        back = load_bundle(save_bundle(model))
        for _ in range(10):
            vec = rng.normal(0, 1, FEATURE_DIM)
            a = classify_features(model, vec)
            b = classify_features(back, vec)
            assert a.category == b.category and a.group is b.group

    def test_corrupt_bundle_rejected(self, trained_setup):
        model, _, _, _ = trained_setup
        data = bytearray(save_bundle(model))
        data[100] ^= 0xFF
        with pytest.raises(ChecksumError):
            load_bundle(bytes(data))

    def test_bad_magic(self):
        with pytest.raises(ContainerError):
            load_bundle(b"NOPE" + b"\x00" * 32)

    def test_frontend_provenance_preserved(self, tiny_corpus, tmp_path):
        manifest = preprocess_corpus(
            tiny_corpus, FiltrationMode.AUDIO_CROP, tmp_path / "crop_feat"
        )
        assert manifest.frontend.crop_max_time is not None
        doc = json.loads((tmp_path / "crop_feat" / "manifest.json").read_text())
        assert doc["frontend"]["crop_max_time"] == manifest.frontend.crop_max_time
