import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dseb.data import (DataError, SpeakerRecord, UtteranceRecord, demographic_summary, format_summary,
                       largest_remainder, map_accent, map_age_group, map_gender, normalize_speakers, parse_manifest,
                       read_speakers, read_splits, split_speakers, write_speakers, write_splits)
from dseb.probes import ProbeConfig, evaluate_probe, train_probe
from dseb.synth import SynthConfig, synth_generate

HEADER = "client_id\tpath\tsentence\tgender\tage\taccents\n"


def manifest(*rows, header=HEADER):
    return io.StringIO(header + "".join(r + "\n" for r in rows))


def utt(spk, i, gender="male_masculine", age="twenties", accent="United States English"):
    return UtteranceRecord(f"{spk}_{i}.mp3", spk, f"{spk}_{i}.mp3", gender, age, accent)


class TestManifest:
    def test_header_only(self):
        assert parse_manifest(manifest()) == []

    def test_rows_mapped_by_name(self):
        recs = parse_manifest(manifest("a\ta1.mp3\thi\tmale_masculine\ttwenties\tEngland English",
                                       "a\ta2.mp3\thi\tmale_masculine\ttwenties\tEngland English",
                                       "b\tb1.mp3\tyo\tfemale_feminine\tthirties\tIndia and South Asia"))
        assert len(recs) == 3
        assert recs[2] == UtteranceRecord("b1.mp3", "b", "b1.mp3", "female_feminine", "thirties",
                                          "India and South Asia")

    def test_column_order_free(self):
        recs = parse_manifest(manifest("twenties\tx.mp3\tc\tmale_masculine\tUSA",
                                       header="age\tpath\tclient_id\tgender\taccents\n"))
        assert recs[0].speaker_id == "c" and recs[0].raw_age == "twenties"

    def test_missing_trailing_field(self):
        (rec,) = parse_manifest(manifest("a\ta1.mp3\thi\tmale_masculine\ttwenties"))
        assert rec.raw_accent == ""

    def test_missing_column(self):
        with pytest.raises(DataError, match="accents"):
            parse_manifest(manifest(header="client_id\tpath\tgender\tage\n"))

    def test_malformed_row_line_number(self):
        with pytest.raises(DataError, match=":3:"):
            parse_manifest(manifest("a\ta1.mp3\thi\tm\tt\tu", "a\ta2.mp3\thi\tm\tt\tu\textra\tmore"))

    def test_duplicate_id(self):
        with pytest.raises(DataError, match="duplicate"):
            parse_manifest(manifest("a\ta1.mp3\thi\tm\tt\tu", "b\ta1.mp3\thi\tm\tt\tu"))


class TestLabelMaps:
    @pytest.mark.parametrize("raw,expected", [("male_masculine", "Male"), ("female_feminine", "Female"),
                                              ("non-binary", None), ("", None), ("male", None)])
    def test_gender(self, raw, expected):
        assert map_gender(raw) == expected

    @pytest.mark.parametrize("raw,expected", [("17-28", "Young"), ("9-28", "Young"), ("29-54", "Adult"),
                                              ("55-100", "Senior"), ("20-40", None), ("old", None)])
    def test_year_ranges(self, raw, expected):
        assert map_age_group(raw, "year_ranges") == expected

    @pytest.mark.parametrize("raw,expected", [("teens", "Young"), ("twenties", "Young"), ("fourties", "Adult"),
                                              ("fifties", "Adult"), ("sixties", "Senior"), ("nineties", "Senior"),
                                              ("", None), ("ancient", None)])
    def test_decade_labels(self, raw, expected):
        assert map_age_group(raw, "decade_labels") == expected

    @pytest.mark.parametrize("raw,expected", [("United States English", "USA"), ("England English", "England"),
                                              ("Canadian English", "Canada"),
                                              ("Australian English", "AustraliaNZ"),
                                              ("New Zealand English", "AustraliaNZ"),
                                              ("India and South Asia (India, Pakistan, Sri Lanka)", "IndiaSEAsia"),
                                              ("Scottish English", None),
                                              ("Scottish English,Canadian English", "Canada"),
                                              ("England English|United States English", "England")])
    def test_accent(self, raw, expected):
        assert map_accent(raw) == expected


class TestNormalize:
    def test_reasons(self):
        recs = [utt("a", 0), utt("a", 1),
                utt("b", 0, gender="non-binary"), utt("b", 1, gender="non-binary"),
                utt("c", 0),
                utt("d", 0, age=""), utt("d", 1, age=""),
                utt("e", 0, age="ancient"), utt("e", 1, age="ancient"),
                utt("f", 0, accent="Scottish English"), utt("f", 1, accent="Scottish English"),
                utt("g", 0), utt("g", 1, age="sixties")]
        speakers, excluded = normalize_speakers(recs)
        assert [s.speaker_id for s in speakers] == ["a"]
        assert speakers[0] == SpeakerRecord("a", "Male", "Young", "USA", ["a_0.mp3", "a_1.mp3"])
        assert dict(excluded) == {"b": "gender_out_of_scope", "c": "too_few_utterances", "d": "age_missing",
                                  "e": "age_unrecognized", "f": "accent_out_of_scope",
                                  "g": "conflicting_metadata"}

    def test_partial_utterance_drop(self):
        speakers, excluded = normalize_speakers([utt("a", 0), utt("a", 1), utt("a", 2, gender="")])
        assert speakers[0].utterance_ids == ["a_0.mp3", "a_1.mp3"] and not excluded

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 6), st.sampled_from(["male_masculine", "female_feminine", "other"]),
                              st.sampled_from(["twenties", "sixties", ""]),
                              st.sampled_from(["United States English", "Scottish English"])), max_size=40))
    def test_accounting(self, rows):
        recs = [UtteranceRecord(f"u{i}", f"s{s}", f"u{i}", g, a, c) for i, (s, g, a, c) in enumerate(rows)]
        speakers, excluded = normalize_speakers(recs)
        assert len(speakers) + len(excluded) == len({r.speaker_id for r in recs})
        for s in speakers:
            assert len(s.utterance_ids) >= 2 and s.gender and s.age_group and s.accent_group


class TestSplits:
    def test_ten(self):
        counts = np.unique(list(split_speakers([f"s{i}" for i in range(10)]).values()), return_counts=True)
        assert dict(zip(*counts)) == {"train": 8, "val": 1, "test": 1}

    def test_corpus_sizes(self):
        assert largest_remainder(11209, (0.8, 0.1, 0.1)) == [8967, 1121, 1121]
        split = split_speakers([f"s{i:05d}" for i in range(11209)], seed=3)
        values = list(split.values())
        assert (values.count("train"), values.count("val"), values.count("test")) == (8967, 1121, 1121)

    def test_deterministic_and_disjoint(self):
        ids = [f"s{i}" for i in range(57)]
        a, b = split_speakers(ids, seed=1), split_speakers(list(reversed(ids)), seed=1)
        assert a == b and set(a) == set(ids)

    def test_bad_ratios(self):
        with pytest.raises(ValueError):
            split_speakers([f"s{i}" for i in range(10)], (0.5, 0.3, 0.3))

    def test_too_few(self):
        with pytest.raises(ValueError):
            split_speakers([f"s{i}" for i in range(9)])

    @given(st.integers(0, 500), st.floats(0.05, 0.9))
    def test_largest_remainder_sums(self, n, r):
        counts = largest_remainder(n, (r, (1 - r) / 2, (1 - r) / 2))
        assert sum(counts) == n and all(abs(c - f * n) < 1 for c, f in zip(counts, (r, (1 - r) / 2, (1 - r) / 2)))


class TestSummary:
    def test_eight_two(self):
        spk = [SpeakerRecord(f"s{i}", "Male" if i < 8 else "Female", "Adult", "USA", []) for i in range(10)]
        assert demographic_summary(spk)["gender"] == [("Male", 8, 80.0), ("Female", 2, 20.0)]

    def test_empty(self):
        assert demographic_summary([]) == {}

    def test_corpus_gender_percentages(self):
        spk = [SpeakerRecord(f"s{i}", "Male" if i < 8968 else "Female", "Adult", "USA", []) for i in range(11209)]
        rows = demographic_summary(spk)["gender"]
        assert rows == [("Male", 8968, 80.01), ("Female", 2241, 19.99)]
        assert "80.01" in format_summary(demographic_summary(spk))


def test_table_round_trips(tmp_path):
    spk = [SpeakerRecord("a", "Male", "Young", "USA", ["a1", "a2"]),
           SpeakerRecord("b", "Female", "Senior", "Canada", ["b1", "b2", "b3"])]
    write_speakers(tmp_path / "s.tsv", spk)
    assert read_speakers(tmp_path / "s.tsv") == spk
    split = split_speakers([f"s{i}" for i in range(12)])
    write_splits(tmp_path / "p.tsv", split)
    assert read_splits(tmp_path / "p.tsv") == split


def nearest_centroid_accuracy(x_train, y_train, x_test, y_test):
    centers = np.stack([x_train[y_train == c].mean(axis=0) for c in (0, 1)])
    pred = np.argmin(((x_test[:, None, :] - centers[None]) ** 2).sum(axis=2), axis=1)
    return np.mean(pred == y_test)


def speaker_halves(data):
    spk = np.array([int(s[3:]) for s in data.speaker_ids])
    return spk % 2 == 0, spk % 2 == 1


class TestSynth:
    def test_deterministic(self):
        a = synth_generate(SynthConfig(n_speakers=10, seed=4))
        b = synth_generate(SynthConfig(n_speakers=10, seed=4))
        assert a.frames.tobytes() == b.frames.tobytes() and a.utterance_ids == b.utterance_ids

    def test_priors(self):
        data = synth_generate(SynthConfig(n_speakers=2000, utterances_per_speaker=2, n_frames=2,
                                          gender_prior=(0.7, 0.3)))
        g = data.labels["gender"][::2]
        assert abs(g.mean() - 0.3) < 4 * np.sqrt(0.21 / 2000)
        a = np.bincount(data.labels["age"][::2], minlength=3) / 2000
        assert np.all(np.abs(a - 1 / 3) < 4 * np.sqrt(2 / 9 / 2000))

    def test_no_gender_signal(self):
        data = synth_generate(SynthConfig(n_speakers=400, utterances_per_speaker=1, n_frames=2,
                                          gender_direction_strength=0.0, seed=1))
        tr, te = speaker_halves(data)
        y = data.labels["gender"]
        probe = train_probe(data.vectors[tr], y[tr], ProbeConfig(epochs=30))
        acc = evaluate_probe(probe, data.vectors[te], y[te])
        assert abs(acc - 0.5) < 3 * np.sqrt(0.25 / te.sum()) + 0.05

    def test_planted_gender(self):
        data = synth_generate(SynthConfig(n_speakers=200, n_frames=2, gender_direction_strength=5.0, seed=2))
        tr, te = speaker_halves(data)
        y = data.labels["gender"]
        assert nearest_centroid_accuracy(data.vectors[tr], y[tr], data.vectors[te], y[te]) >= 0.95
        probe = train_probe(data.vectors[tr], y[tr])
        assert evaluate_probe(probe, data.vectors[te], y[te]) >= 0.95

    def test_nonlinear_age(self):
        data = synth_generate(SynthConfig(n_speakers=300, n_frames=2, seed=3))
        tr, te = speaker_halves(data)
        y = data.labels["age"]
        lin = evaluate_probe(train_probe(data.vectors[tr], y[tr]), data.vectors[te], y[te])
        mlp = evaluate_probe(train_probe(data.vectors[tr], y[tr], ProbeConfig(kind="mlp")),
                             data.vectors[te], y[te])
        assert mlp >= lin + 0.1

    def test_waveform_mode(self):
        data = synth_generate(SynthConfig(n_speakers=4, utterances_per_speaker=2, mode="waveform", clip_seconds=0.25))
        assert data.frames is None and len(data.waveforms) == 8
        assert all(w.sample_rate == 16000 and len(w) == 4000 for w in data.waveforms)

    def test_invalid(self):
        with pytest.raises(ValueError):
            SynthConfig(n_speakers=3)
        with pytest.raises(ValueError):
            SynthConfig(gender_direction_strength=-1.0)
