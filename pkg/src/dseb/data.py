"""Manifest ingestion, demographic normalization and speaker-disjoint splits."""
from __future__ import annotations

import csv
import io
import re
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, TextIO

import numpy as np

from .audio import FrontendConfig, Waveform, extract_features, log_mel, mvn_normalize, resample
from .contrastive import AugmentationConfig, augment_frames, augment_pair

GENDERS = ("Male", "Female")
AGE_GROUPS = ("Young", "Adult", "Senior")
ACCENT_GROUPS = ("USA", "England", "Canada", "AustraliaNZ", "IndiaSEAsia")
CATEGORIES = {"gender": GENDERS, "age": AGE_GROUPS, "accent": ACCENT_GROUPS}
SPLITS = ("train", "val", "test")

REQUIRED_COLUMNS = ("client_id", "path", "gender", "age", "accents")


class DataError(Exception):
    """Malformed input data (bad manifest, missing files, inconsistent tables)."""


@dataclass(frozen=True)
class UtteranceRecord:
    utterance_id: str
    speaker_id: str
    audio_path: str
    raw_gender: str = ""
    raw_age: str = ""
    raw_accent: str = ""


@dataclass
class SpeakerRecord:
    speaker_id: str
    gender: str
    age_group: str
    accent_group: str
    utterance_ids: list[str] = field(default_factory=list)

    def label(self, attribute: str) -> str:
        return {"gender": self.gender, "age": self.age_group, "accent": self.accent_group}[attribute]


# ---------------------------------------------------------------- manifest


def parse_manifest(stream: TextIO, source: str = "<manifest>") -> list[UtteranceRecord]:
    """Read a Common-Voice-style ``validated.tsv``; columns are matched by name."""
    lines = stream.read().splitlines()
    if not lines:
        raise DataError(f"{source}: empty manifest, expected a header row")
    header = lines[0].split("\t")
    col = {name: i for i, name in enumerate(header)}
    for name in REQUIRED_COLUMNS:
        if name not in col:
            raise DataError(f"{source}: missing required column '{name}'")
    records = []
    seen = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split("\t")
        if len(cells) > len(header):
            raise DataError(f"{source}:{lineno}: malformed row with {len(cells)} cells, header has {len(header)}")
        cells += [""] * (len(header) - len(cells))
        get = lambda name: cells[col[name]].strip()  # noqa: E731
        if not get("client_id") or not get("path"):
            raise DataError(f"{source}:{lineno}: malformed row, client_id and path are required")
        utt_id = get("path")
        if utt_id in seen:
            raise DataError(f"{source}:{lineno}: duplicate utterance id '{utt_id}'")
        seen.add(utt_id)
        records.append(UtteranceRecord(utt_id, get("client_id"), get("path"),
                                       get("gender"), get("age"), get("accents")))
    return records


def read_manifest(path) -> list[UtteranceRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_manifest(fh, str(path))


# ---------------------------------------------------------------- label normalization

_GENDER_MAP = {"male_masculine": "Male", "female_feminine": "Female"}

_DECADES = {
    "teens": "Young", "twenties": "Young",
    "thirties": "Adult", "fourties": "Adult", "forties": "Adult", "fifties": "Adult",
    "sixties": "Senior", "seventies": "Senior", "eighties": "Senior", "nineties": "Senior",
}

# Scanned in order; the first keyword found in an accent segment decides its group.
ACCENT_KEYWORDS: tuple[tuple[str, str], ...] = (
    ("united states", "USA"), ("us english", "USA"), ("american", "USA"), ("usa", "USA"),
    ("england", "England"), ("english (uk)", "England"),
    ("canad", "Canada"),
    ("australia", "AustraliaNZ"), ("new zealand", "AustraliaNZ"),
    ("india", "IndiaSEAsia"), ("south asia", "IndiaSEAsia"), ("south-east asia", "IndiaSEAsia"),
    ("southeast asia", "IndiaSEAsia"), ("pakistan", "IndiaSEAsia"), ("sri lanka", "IndiaSEAsia"),
    ("bangladesh", "IndiaSEAsia"), ("singapore", "IndiaSEAsia"), ("malaysia", "IndiaSEAsia"),
    ("philippin", "IndiaSEAsia"), ("filipino", "IndiaSEAsia"),
)


def map_gender(raw: str) -> str | None:
    return _GENDER_MAP.get(raw.strip().lower())


def map_age_group(raw_age: str, schema: str = "decade_labels") -> str | None:
    """Map a raw age token to Young/Adult/Senior, or None when it cannot be grouped."""
    token = raw_age.strip().lower()
    if not token:
        return None
    if schema == "decade_labels":
        return _DECADES.get(token)
    if schema == "year_ranges":
        m = re.fullmatch(r"(\d+)\s*[-–]\s*(\d+)", token) or re.fullmatch(r"(\d+)\s*\+", token)
        if not m:
            return None
        lo = int(m.group(1))
        hi = int(m.group(2)) if m.lastindex == 2 else 200
        if hi <= 28:
            return "Young"
        if lo >= 29 and hi <= 54:
            return "Adult"
        if lo >= 55:
            return "Senior"
        return None
    raise ValueError(f"unknown age schema '{schema}'")


def map_accent(raw: str) -> str | None:
    """First matching segment of a (possibly comma- or pipe-joined) accent text."""
    for segment in re.split(r"[,|]", raw.lower()):
        segment = segment.strip()
        for keyword, group in ACCENT_KEYWORDS:
            if keyword in segment:
                return group
    return None


def normalize_utterance(rec: UtteranceRecord, schema: str) -> tuple[tuple[str, str, str] | None, str]:
    gender = map_gender(rec.raw_gender)
    if gender is None:
        return None, "gender_out_of_scope"
    if not rec.raw_age.strip():
        return None, "age_missing"
    age = map_age_group(rec.raw_age, schema)
    if age is None:
        return None, "age_unrecognized"
    accent = map_accent(rec.raw_accent)
    if accent is None:
        return None, "accent_out_of_scope"
    return (gender, age, accent), ""


def normalize_speakers(records: Iterable[UtteranceRecord], schema: str = "decade_labels"
                       ) -> tuple[list[SpeakerRecord], list[tuple[str, str]]]:
    """Group utterances by speaker and keep only fully labelled, consistent speakers.

    Returns the surviving speakers (sorted by id) and one ``(speaker_id,
    reason)`` row per excluded speaker.
    """
    by_speaker: "OrderedDict[str, list[UtteranceRecord]]" = OrderedDict()
    for rec in records:
        by_speaker.setdefault(rec.speaker_id, []).append(rec)
    speakers, excluded = [], []
    for spk in sorted(by_speaker):
        kept, labels, first_reason = [], set(), ""
        for rec in by_speaker[spk]:
            lab, reason = normalize_utterance(rec, schema)
            if lab is None:
                first_reason = first_reason or reason
                continue
            kept.append(rec.utterance_id)
            labels.add(lab)
        if not kept:
            excluded.append((spk, first_reason))
        elif len(labels) > 1:
            excluded.append((spk, "conflicting_metadata"))
        elif len(kept) < 2:
            excluded.append((spk, "too_few_utterances"))
        else:
            gender, age, accent = labels.pop()
            speakers.append(SpeakerRecord(spk, gender, age, accent, kept))
    return speakers, excluded


# ---------------------------------------------------------------- splits and summaries


def largest_remainder(n: int, ratios: Iterable[float]) -> list[int]:
    ratios = list(ratios)
    exact = [r * n for r in ratios]
    counts = [int(np.floor(e)) for e in exact]
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_speakers(speakers, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> dict[str, str]:
    """Random speaker-level partition into train/val/test."""
    ids = sorted(s.speaker_id if isinstance(s, SpeakerRecord) else str(s) for s in speakers)
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {sum(ratios)}")
    if len(ratios) != 3 or min(ratios) < 0:
        raise ValueError("need three nonnegative split ratios")
    if len(ids) < 10:
        raise ValueError(f"need at least 10 speakers to split, got {len(ids)}")
    perm = np.random.default_rng(seed).permutation(len(ids))
    counts = largest_remainder(len(ids), ratios)
    out, pos = {}, 0
    for split, c in zip(SPLITS, counts):
        for j in perm[pos:pos + c]:
            out[ids[j]] = split
        pos += c
    return dict(sorted(out.items()))


def demographic_summary(speakers: list[SpeakerRecord]) -> dict[str, list[tuple[str, int, float]]]:
    """Per-attribute ``(category, count, percent)`` rows, categories in canonical order."""
    if not speakers:
        return {}
    n = len(speakers)
    out = {}
    for attr, cats in CATEGORIES.items():
        counts = Counter(s.label(attr) for s in speakers)
        out[attr] = [(c, counts[c], round(100.0 * counts[c] / n, 2)) for c in cats if counts[c]]
    return out


def format_summary(summary) -> str:
    titles = {"gender": "Gender", "age": "Age Group", "accent": "Accent Group"}
    lines = [f"{'Category':<20}{'Speakers':>10}{'Percent (%)':>14}"]
    for attr, rows in summary.items():
        lines.append(titles[attr])
        lines.extend(f"  {cat:<18}{count:>10}{pct:>14.2f}" for cat, count, pct in rows)
    return "\n".join(lines)


# ---------------------------------------------------------------- table I/O


def write_tsv(path, header: list[str], rows: Iterable[Iterable]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_tsv(path) -> list[dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


def write_speakers(path, speakers: list[SpeakerRecord]) -> None:
    write_tsv(path, ["speaker_id", "gender", "age_group", "accent_group", "utterance_ids"],
              [(s.speaker_id, s.gender, s.age_group, s.accent_group, ",".join(s.utterance_ids))
               for s in speakers])


def read_speakers(path) -> list[SpeakerRecord]:
    out = []
    for row in read_tsv(path):
        try:
            out.append(SpeakerRecord(row["speaker_id"], row["gender"], row["age_group"],
                                     row["accent_group"], row["utterance_ids"].split(",")))
        except KeyError as exc:
            raise DataError(f"{path}: missing column {exc}") from exc
    return out


def write_splits(path, assignment: dict[str, str]) -> None:
    write_tsv(path, ["speaker_id", "split"], sorted(assignment.items()))


def read_splits(path) -> dict[str, str]:
    return {row["speaker_id"]: row["split"] for row in read_tsv(path)}


# ---------------------------------------------------------------- in-memory utterance sets


@dataclass
class UtteranceSet:
    """Utterances with speaker ids and integer-coded labels.

    Exactly one of ``frames`` (precomputed ``(N, T, F)`` features) or
    ``waveforms`` is set. ``vectors`` optionally carries the utterance-level
    feature vectors a synthetic generator planted its signals in.
    """

    utterance_ids: list[str]
    speaker_ids: list[str]
    labels: dict[str, np.ndarray]
    frames: np.ndarray | None = None
    waveforms: list[Waveform] | None = None
    vectors: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.utterance_ids)

    def subset(self, idx) -> "UtteranceSet":
        idx = np.asarray(idx, dtype=np.int64)
        return UtteranceSet(
            [self.utterance_ids[i] for i in idx],
            [self.speaker_ids[i] for i in idx],
            {a: v[idx] for a, v in self.labels.items()},
            None if self.frames is None else self.frames[idx],
            None if self.waveforms is None else [self.waveforms[i] for i in idx],
            None if self.vectors is None else self.vectors[idx],
        )

    def select_speakers(self, speaker_ids) -> "UtteranceSet":
        keep = set(speaker_ids)
        return self.subset([i for i, s in enumerate(self.speaker_ids) if s in keep])

    def feature_dim(self, frontend: FrontendConfig) -> int:
        return self.frames.shape[2] if self.frames is not None else frontend.n_mels

    def views(self, idx, aug: AugmentationConfig, frontend: FrontendConfig,
              rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Two augmented views per selected utterance, each ``(B, T, F)``."""
        a, b = [], []
        for i in idx:
            if self.frames is not None:
                a.append(augment_frames(self.frames[i], aug, rng))
                b.append(augment_frames(self.frames[i], aug, rng))
            else:
                wav = resample(self.waveforms[i], frontend.target_rate)
                for view, out in zip(augment_pair(wav, aug, rng), (a, b)):
                    out.append(mvn_normalize(log_mel(view, frontend), frontend.per_band_mvn).frames)
        return np.stack(a), np.stack(b)

    def eval_frames(self, frontend: FrontendConfig, seed: int = 0) -> np.ndarray:
        if self.frames is not None:
            return self.frames
        rng = np.random.default_rng(seed)
        return np.stack([extract_features(w, frontend, rng) for w in self.waveforms])

    def speaker_table(self) -> list[SpeakerRecord]:
        out: "OrderedDict[str, SpeakerRecord]" = OrderedDict()
        for i, spk in enumerate(self.speaker_ids):
            if spk not in out:
                out[spk] = SpeakerRecord(spk, *(CATEGORIES[a][int(self.labels[a][i])] for a in CATEGORIES))
            out[spk].utterance_ids.append(self.utterance_ids[i])
        return sorted(out.values(), key=lambda s: s.speaker_id)


def encode_labels(speakers: list[SpeakerRecord]) -> dict[str, dict[str, int]]:
    """speaker_id -> integer code for each attribute."""
    return {a: {s.speaker_id: CATEGORIES[a].index(s.label(a)) for s in speakers} for a in CATEGORIES}
