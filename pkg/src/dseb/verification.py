"""Speaker-verification trials, cosine scoring, ROC-AUC and EER."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .data import SpeakerRecord

GROUP_FIELDS = {"gender": "gender", "age": "age_group", "accent": "accent_group"}


@dataclass(frozen=True)
class TrialPair:
    utterance_id_a: str
    utterance_id_b: str
    is_genuine: bool
    gender: str = ""
    age_group: str = ""
    accent_group: str = ""

    def tag(self, group_by: str) -> str:
        return getattr(self, GROUP_FIELDS[group_by])


@dataclass
class VerificationReport:
    roc_auc: float
    eer: float
    n_genuine: int
    n_impostor: int
    subgroups: dict[str, dict[str, "VerificationReport | None"]] = field(default_factory=dict)


def build_trials(speakers: list[SpeakerRecord], rng: np.random.Generator, impostor_ratio: float = 1.0,
                 max_pairs_per_speaker: int | None = 10) -> list[TrialPair]:
    """Within-speaker genuine pairs (capped per speaker) plus distinct random impostor pairs."""
    speakers = sorted(speakers, key=lambda s: s.speaker_id)
    if len(speakers) < 2:
        raise ValueError("need at least 2 speakers to build trials")
    trials = []
    owner = []
    for s in speakers:
        if len(s.utterance_ids) < 2:
            raise ValueError(f"speaker {s.speaker_id} has fewer than 2 utterances")
        pairs = list(combinations(s.utterance_ids, 2))
        if max_pairs_per_speaker is not None and len(pairs) > max_pairs_per_speaker:
            keep = np.sort(rng.choice(len(pairs), size=max_pairs_per_speaker, replace=False))
            pairs = [pairs[i] for i in keep]
        trials += [TrialPair(a, b, True, s.gender, s.age_group, s.accent_group) for a, b in pairs]
        owner += [(u, s) for u in s.utterance_ids]

    n_imp = int(round(impostor_ratio * len(trials)))
    n_utt = len(owner)
    sizes = np.array([len(s.utterance_ids) for s in speakers])
    available = (n_utt * n_utt - int((sizes ** 2).sum())) // 2
    n_imp = min(n_imp, available)
    seen = set()
    while len(seen) < n_imp:
        i, j = rng.integers(0, n_utt, size=2)
        if owner[i][1] is owner[j][1]:
            continue
        key = (min(i, j), max(i, j))
        if key in seen:
            continue
        seen.add(key)
        (ua, sa), (ub, _) = owner[i], owner[j]
        trials.append(TrialPair(ua, ub, False, sa.gender, sa.age_group, sa.accent_group))
    return trials


def cosine_scores(trials: list[TrialPair], embeddings: dict[str, np.ndarray]) -> np.ndarray:
    """Cosine similarity for every trial, computed on unit-normalized embeddings."""
    ids = sorted(embeddings)
    index = {u: i for i, u in enumerate(ids)}
    mat = np.stack([embeddings[u] for u in ids]).astype(np.float64)
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    if np.any(norms <= 1e-12):
        raise ValueError("degenerate embedding")
    mat = mat / norms
    try:
        a = np.array([index[t.utterance_id_a] for t in trials], dtype=np.int64)
        b = np.array([index[t.utterance_id_b] for t in trials], dtype=np.int64)
    except KeyError as exc:
        raise KeyError(f"trial references unknown utterance {exc}") from None
    return np.einsum("ij,ij->i", mat[a], mat[b]) if len(trials) else np.zeros(0)


def _split(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    gen, imp = scores[labels], scores[~labels]
    if gen.size == 0 or imp.size == 0:
        raise ValueError("need at least one genuine and one impostor trial")
    return gen, imp


def roc_auc(scores, labels) -> float:
    """Mann-Whitney estimate: P(genuine > impostor) + 0.5 * P(tie)."""
    gen, imp = _split(scores, labels)
    ranks = rankdata(np.concatenate([gen, imp]))
    u = ranks[: gen.size].sum() - gen.size * (gen.size + 1) / 2.0
    return float(u / (gen.size * imp.size))


def det_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """FAR and FRR when accepting ``score >= t`` for every distinct score, then t = +inf."""
    gen, imp = _split(scores, labels)
    thresholds = np.unique(np.concatenate([gen, imp]))
    gen_sorted, imp_sorted = np.sort(gen), np.sort(imp)
    far = (imp.size - np.searchsorted(imp_sorted, thresholds, side="left")) / imp.size
    frr = np.searchsorted(gen_sorted, thresholds, side="left") / gen.size
    return (np.append(thresholds, np.inf), np.append(far, 0.0), np.append(frr, 1.0))


def eer(scores, labels, higher_is_genuine: bool = True) -> float:
    """Equal error rate, linearly interpolated where FAR - FRR changes sign."""
    scores = np.asarray(scores, dtype=np.float64)
    if not higher_is_genuine:
        scores = -scores
    _, far, frr = det_curve(scores, labels)
    diff = far - frr
    # diff starts at +1 (accept all) and ends at -1 (reject all)
    i = int(np.argmax(diff <= 0))
    if diff[i] == 0:
        return float(far[i])
    alpha = diff[i - 1] / (diff[i - 1] - diff[i])
    return float(far[i - 1] + alpha * (far[i] - far[i - 1]))


def verification_report(scores, labels) -> VerificationReport:
    labels = np.asarray(labels, dtype=bool)
    return VerificationReport(roc_auc(scores, labels), eer(scores, labels),
                              int(labels.sum()), int((~labels).sum()))


def subgroup_report(trials: list[TrialPair], scores, group_by: str) -> dict[str, VerificationReport | None]:
    """Partition trials by speaker-a's tag; a group lacking either label maps to None."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.array([t.is_genuine for t in trials], dtype=bool)
    tags = np.array([t.tag(group_by) for t in trials])
    out: dict[str, VerificationReport | None] = {}
    for tag in sorted(set(tags.tolist())):
        m = tags == tag
        out[tag] = verification_report(scores[m], labels[m]) if labels[m].any() and (~labels[m]).any() else None
    return out


def evaluate_trials(trials: list[TrialPair], embeddings: dict[str, np.ndarray],
                    group_by=("gender", "age", "accent")) -> VerificationReport:
    scores = cosine_scores(trials, embeddings)
    labels = np.array([t.is_genuine for t in trials], dtype=bool)
    report = verification_report(scores, labels)
    report.subgroups = {g: subgroup_report(trials, scores, g) for g in group_by}
    return report


TRIAL_COLUMNS = ["utt_a", "utt_b", "is_genuine", "gender", "age_group", "accent_group"]


def write_trials(path, trials: list[TrialPair]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRIAL_COLUMNS)
    for t in trials:
        w.writerow([t.utterance_id_a, t.utterance_id_b, int(t.is_genuine), t.gender, t.age_group, t.accent_group])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_trials(path) -> list[TrialPair]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [TrialPair(r["utt_a"], r["utt_b"], r["is_genuine"].strip().lower() in ("1", "true"),
                      r.get("gender", ""), r.get("age_group", ""), r.get("accent_group", "")) for r in rows]
