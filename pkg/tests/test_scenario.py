import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcil.errors import IngestError, InvalidConfig, InvalidSplit
from mcil.scenario import (
    DEFAULT_TEMPLATES,
    ClassLabel,
    Dataset,
    MultimodalSample,
    PromptTemplateSet,
    SyntheticConfig,
    build_stream,
    default_templates,
    expand_label,
    generate_synthetic,
    load_precomputed,
    modality_arrays,
    nearest_centroid_accuracy,
    save_dataset,
)


def centroid_accuracy_oracle(train_x, train_y, eval_x, eval_y):
    """Independent plain-loop nearest-centroid classifier."""
    centroids = {}
    for c in sorted(set(train_y.tolist())):
        rows = [x for x, y in zip(train_x, train_y) if y == c]
        centroids[c] = sum(rows) / len(rows)
    hits = 0
    for x, y in zip(eval_x, eval_y):
        best, best_d = None, None
        for c, mu in centroids.items():
            d = float(((x - mu) ** 2).sum())
            if best_d is None or d < best_d:
                best, best_d = c, d
        hits += int(best == y)
    return hits / len(eval_y)


def tiny_dataset(n_classes=3, per=4, d_v=5, d_a=7, seed=0):
    return generate_synthetic(
        SyntheticConfig(
            n_classes=n_classes, samples_per_class=per, d_v_raw=d_v, d_a_raw=d_a, seed=seed
        )
    )


class TestStreamPartition:
    def test_even_split_sizes(self):
        ds = tiny_dataset(n_classes=10)
        stream = build_stream(ds, T=5, seed=1)
        assert [len(t.classes) for t in stream.tasks] == [2, 2, 2, 2, 2]

    def test_remainder_goes_to_earliest_tasks(self):
        ds = tiny_dataset(n_classes=19)
        stream = build_stream(ds, T=3, seed=1)
        assert [len(t.classes) for t in stream.tasks] == [7, 6, 6]

    def test_indices_are_one_based(self):
        stream = build_stream(tiny_dataset(), T=3, seed=0)
        assert [t.index for t in stream.tasks] == [1, 2, 3]
        assert stream.task(1) is stream.tasks[0]

    @settings(max_examples=40, deadline=None)
    @given(
        n_classes=st.integers(min_value=2, max_value=12),
        T=st.integers(min_value=1, max_value=12),
        seed=st.integers(min_value=0, max_value=2**31),
    )
    def test_partition_is_disjoint_and_covers(self, n_classes, T, seed):
        ds = tiny_dataset(n_classes=n_classes, per=2, seed=3)
        if T > n_classes:
            with pytest.raises(InvalidSplit):
                build_stream(ds, T=T, seed=seed)
            return
        stream = build_stream(ds, T=T, seed=seed)
        groups = [t.classes for t in stream.tasks]
        flat = [c for g in groups for c in g]
        assert sorted(flat) == sorted(ds.class_ids)
        assert len(set(flat)) == len(flat)
        sizes = [len(g) for g in groups]
        assert max(sizes) - min(sizes) <= 1
        assert sizes == sorted(sizes, reverse=True)

    def test_stream_is_seed_deterministic(self):
        ds = tiny_dataset(n_classes=8)
        a = build_stream(ds, T=3, seed=42)
        b = build_stream(ds, T=3, seed=42)
        assert [t.classes for t in a.tasks] == [t.classes for t in b.tasks]
        assert [t.train_samples for t in a.tasks] == [t.train_samples for t in b.tasks]

    def test_different_seeds_change_order(self):
        ds = tiny_dataset(n_classes=8)
        orders = {
            tuple(c for t in build_stream(ds, T=4, seed=s).tasks for c in t.classes)
            for s in range(6)
        }
        assert len(orders) > 1

    def test_classes_up_to_preserves_stream_order(self):
        ds = tiny_dataset(n_classes=6)
        stream = build_stream(ds, T=3, seed=5)
        assert stream.classes_up_to(2) == stream.task(1).classes + stream.task(2).classes
        assert stream.classes_up_to(3) == tuple(
            c for t in stream.tasks for c in t.classes
        )

    def test_task_samples_match_membership_and_split(self):
        ds = tiny_dataset(n_classes=4, per=5)
        stream = build_stream(ds, T=2, seed=0)
        for task in stream.tasks:
            for sid in task.train_samples:
                s = ds.by_id(sid)
                assert s.label in task.classes
                assert ds.splits[ds.samples.index(s)] == "train"
            for sid in task.test_samples:
                assert ds.by_id(sid).label in task.classes

    def test_rejects_bad_T(self):
        ds = tiny_dataset(n_classes=4)
        with pytest.raises(InvalidSplit):
            build_stream(ds, T=0, seed=0)
        with pytest.raises(InvalidSplit):
            build_stream(ds, T=5, seed=0)


class TestSyntheticGenerator:
    def test_shapes_and_balance(self):
        cfg = SyntheticConfig(n_classes=5, samples_per_class=40, d_v_raw=12, d_a_raw=9, seed=7)
        ds = generate_synthetic(cfg)
        assert len(ds.samples) == 200
        assert ds.d_v_raw == 12 and ds.d_a_raw == 9
        counts = {c.id: 0 for c in ds.classes}
        for s in ds.samples:
            assert s.visual.shape == (12,) and s.audio.shape == (9,)
            counts[s.label] += 1
        assert set(counts.values()) == {40}

    def test_split_is_80_20_per_class(self):
        ds = generate_synthetic(SyntheticConfig(n_classes=3, samples_per_class=40, seed=1))
        for cid in ds.class_ids:
            assert len(ds.sample_ids_for([cid], "train")) == 32
            assert len(ds.sample_ids_for([cid], "test")) == 8

    def test_every_class_has_train_and_test_even_when_tiny(self):
        ds = generate_synthetic(SyntheticConfig(n_classes=3, samples_per_class=2, seed=1))
        for cid in ds.class_ids:
            assert len(ds.sample_ids_for([cid], "train")) == 1
            assert len(ds.sample_ids_for([cid], "test")) == 1

    def test_bit_exact_determinism(self):
        cfg = SyntheticConfig(n_classes=4, samples_per_class=6, seed=123)
        a, b = generate_synthetic(cfg), generate_synthetic(cfg)
        for sa, sb in zip(a.samples, b.samples):
            assert np.array_equal(sa.visual, sb.visual)
            assert np.array_equal(sa.audio, sb.audio)

    def test_seed_changes_data(self):
        a = generate_synthetic(SyntheticConfig(seed=0, n_classes=2, samples_per_class=2))
        b = generate_synthetic(SyntheticConfig(seed=1, n_classes=2, samples_per_class=2))
        assert not np.array_equal(a.samples[0].visual, b.samples[0].visual)

    def test_class_names_are_distinct_words(self):
        ds = generate_synthetic(SyntheticConfig(n_classes=30, samples_per_class=2, seed=0))
        names = [c.name for c in ds.classes]
        assert len(set(names)) == 30
        assert all(" " not in n for n in names)

    def test_audio_is_weak_modality(self):
        # sigma_a = 50 x sigma_v: audio centroids are recoverable but noisy,
        # so raw nearest-centroid accuracy must be clearly lower on audio.
        cfg = SyntheticConfig(
            n_classes=8, samples_per_class=40, d_v_raw=32, d_a_raw=48,
            sigma_v=0.1, sigma_a=5.0, rho=1.0, seed=11,
        )
        ds = generate_synthetic(cfg)
        train = ds.sample_ids_for(ds.class_ids, "train")
        test = ds.sample_ids_for(ds.class_ids, "test")
        vis_tr, aud_tr, y_tr = modality_arrays(ds, train)
        vis_te, aud_te, y_te = modality_arrays(ds, test)
        acc_v = centroid_accuracy_oracle(vis_tr, y_tr, vis_te, y_te)
        acc_a = centroid_accuracy_oracle(aud_tr, y_tr, aud_te, y_te)
        assert acc_v > 0.95
        assert acc_a < acc_v - 0.2
        # library helper agrees with the loop oracle on both modalities
        assert nearest_centroid_accuracy(vis_tr, y_tr, vis_te, y_te) == pytest.approx(acc_v)
        assert nearest_centroid_accuracy(aud_tr, y_tr, aud_te, y_te) == pytest.approx(acc_a)

    def test_rho_mixes_in_visual_structure(self):
        # With rho=0 audio centers come from an independent latent; with
        # rho=1 they are a projection of the visual means. Correlation between
        # projected visual means and audio centers must reflect that.
        base = dict(n_classes=6, samples_per_class=4, d_v_raw=16, d_a_raw=16, seed=3)
        ds0 = generate_synthetic(SyntheticConfig(rho=0.0, **base))
        ds1 = generate_synthetic(SyntheticConfig(rho=1.0, **base))
        # same seed => same visual means; audio centers differ
        for s0, s1 in zip(ds0.samples, ds1.samples):
            assert np.array_equal(s0.visual, s1.visual)
        assert not np.allclose(ds0.samples[0].audio, ds1.samples[0].audio)

    def test_invalid_configs_rejected(self):
        with pytest.raises(InvalidConfig):
            SyntheticConfig(n_classes=1)
        with pytest.raises(InvalidConfig):
            SyntheticConfig(samples_per_class=1)
        with pytest.raises(InvalidConfig):
            SyntheticConfig(sigma_v=0.0)
        with pytest.raises(InvalidConfig):
            SyntheticConfig(rho=1.5)


class TestFeatureFile:
    def test_round_trip_is_bit_exact(self, tmp_path):
        ds = tiny_dataset(n_classes=3, per=4, seed=9)
        path = tmp_path / "feat.txt"
        save_dataset(ds, path)
        back = load_precomputed(path)
        assert back.d_v_raw == ds.d_v_raw and back.d_a_raw == ds.d_a_raw
        assert back.classes == ds.classes
        assert back.splits == ds.splits
        for a, b in zip(ds.samples, back.samples):
            assert a.sample_id == b.sample_id and a.label == b.label
            assert np.array_equal(a.visual, b.visual)
            assert np.array_equal(a.audio, b.audio)

    def test_round_trip_survives_awkward_floats(self, tmp_path):
        vals = np.array([1e-300, -1e300, 1 / 3, np.pi, 5e-324, -0.0])
        s0 = MultimodalSample(0, vals[:3].copy(), vals[3:].copy(), 0)
        s1 = MultimodalSample(1, vals[3:].copy(), vals[:3].copy(), 0)
        ds = Dataset(
            samples=(s0, s1),
            classes=(ClassLabel(0, "amber"),),
            d_v_raw=3,
            d_a_raw=3,
            splits=("train", "test"),
        )
        path = tmp_path / "awkward.txt"
        save_dataset(ds, path)
        back = load_precomputed(path)
        assert np.array_equal(back.samples[0].visual, s0.visual)
        assert np.array_equal(back.samples[1].audio, s1.audio)

    def test_header_and_row_errors_carry_context(self, tmp_path):
        ds = tiny_dataset(n_classes=2, per=2, d_v=2, d_a=2, seed=0)
        path = tmp_path / "feat.txt"
        save_dataset(ds, path)
        text = path.read_text().splitlines()

        bad = tmp_path / "bad.txt"

        bad.write_text("NOTMAGIC v1 1 2 2 1\n")
        with pytest.raises(IngestError, match="header"):
            load_precomputed(bad)

        truncated = text[:-1]  # drop one sample line
        bad.write_text("\n".join(truncated) + "\n")
        with pytest.raises(IngestError, match="lines"):
            load_precomputed(bad)

        mangled = list(text)
        mangled[-1] = " ".join(mangled[-1].split()[:-1])  # drop one float
        bad.write_text("\n".join(mangled) + "\n")
        with pytest.raises(IngestError, match="row"):
            load_precomputed(bad)

        mangled = list(text)
        parts = mangled[-1].split()
        parts[3] = "notafloat"
        mangled[-1] = " ".join(parts)
        bad.write_text("\n".join(mangled) + "\n")
        with pytest.raises(IngestError, match="non-numeric"):
            load_precomputed(bad)

        mangled = list(text)
        parts = mangled[-1].split()
        parts[1] = "99"  # unknown label
        mangled[-1] = " ".join(parts)
        bad.write_text("\n".join(mangled) + "\n")
        with pytest.raises(IngestError, match="unknown label"):
            load_precomputed(bad)

    def test_missing_file(self, tmp_path):
        with pytest.raises(IngestError):
            load_precomputed(tmp_path / "nope.txt")

    def test_duplicate_sample_id_rejected(self, tmp_path):
        ds = tiny_dataset(n_classes=2, per=2, d_v=2, d_a=2, seed=0)
        path = tmp_path / "feat.txt"
        save_dataset(ds, path)
        text = path.read_text().splitlines()
        parts = text[-1].split()
        first_sample = text[3].split()
        parts[0] = first_sample[0]
        text[-1] = " ".join(parts)
        path.write_text("\n".join(text) + "\n")
        with pytest.raises(IngestError, match="duplicate"):
            load_precomputed(path)


class TestDatasetValidation:
    def test_rejects_split_without_test_samples(self):
        s = [
            MultimodalSample(i, np.ones(2), np.ones(2), 0)
            for i in range(2)
        ]
        with pytest.raises(InvalidConfig, match="train and one test"):
            Dataset(tuple(s), (ClassLabel(0, "amber"),), 2, 2, ("train", "train"))

    def test_rejects_dimension_mismatch(self):
        s = MultimodalSample(0, np.ones(3), np.ones(2), 0)
        t = MultimodalSample(1, np.ones(2), np.ones(2), 0)
        with pytest.raises(InvalidConfig, match="dimensions"):
            Dataset((s, t), (ClassLabel(0, "amber"),), 2, 2, ("train", "test"))

    def test_rejects_nan_features(self):
        with pytest.raises(InvalidConfig, match="NaN"):
            MultimodalSample(0, np.array([np.nan, 1.0]), np.ones(2), 0)

    def test_samples_are_read_only(self):
        ds = tiny_dataset()
        with pytest.raises(ValueError):
            ds.samples[0].visual[0] = 99.0


class TestTemplates:
    def test_default_set_has_35_templates(self):
        assert len(DEFAULT_TEMPLATES) == 35
        assert len(default_templates()) == 35
        assert len(set(DEFAULT_TEMPLATES)) == 35

    def test_every_default_has_single_placeholder(self):
        for t in DEFAULT_TEMPLATES:
            assert t.count("{}") == 1

    def test_expand_label_substitutes_in_order(self):
        ts = PromptTemplateSet(("a photo of a {}", "the sound of a {}"))
        out = expand_label(ClassLabel(3, "dog"), ts)
        assert out == ["a photo of a dog", "the sound of a dog"]

    def test_prefix_selection(self):
        one = default_templates(1)
        assert one.templates == (DEFAULT_TEMPLATES[0],)
        with pytest.raises(InvalidConfig):
            default_templates(0)
        with pytest.raises(InvalidConfig):
            default_templates(36)

    def test_rejects_bad_templates(self):
        with pytest.raises(InvalidConfig):
            PromptTemplateSet(("no placeholder here",))
        with pytest.raises(InvalidConfig):
            PromptTemplateSet(("two {} holes {}",))
        with pytest.raises(InvalidConfig):
            PromptTemplateSet(())
