"""Batch commands: prepare, train, sweep, embed, probe, verify and report.

On-disk layout under the configured output directory::

    data/       speakers.tsv excluded.tsv splits.tsv utterances.tsv features.npy
                trials_test.csv summary.txt
    runs/NAME/  config.txt meta.tsv checkpoint.dseb curves.csv
                embeddings_{split}_{branch}.demb probes.csv verification.csv
    report/     one CSV per table plus report.txt
"""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .audio import extract_features, read_wav
from .config import ExperimentConfig, dump_config, parse_config
from .data import (CATEGORIES, DataError, UtteranceSet, demographic_summary, format_summary, normalize_speakers,
                   read_manifest, read_splits, read_tsv, split_speakers, write_speakers, write_splits, write_tsv)
from .embeddings import Embeddings, read_embeddings, write_embeddings
from .models import DEFAULT_CLASSES, CausalBottleneck, Encoder
from .probes import probe_attribute
from .synth import synth_generate
from .training import TrainingDiverged, TrainResult, embed, train_adversarial, train_baseline, train_bottleneck
from .verification import build_trials, evaluate_trials, read_trials, write_trials

log = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "val", "test")


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return f"{x:.6f}" if isinstance(x, float) else str(x)


def _write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows([[_fmt(v) for v in row] for row in rows])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _read_csv(path) -> list[dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- prepare


def cmd_prepare(cfg: ExperimentConfig) -> Path:
    """Normalize the dataset, split speakers, cache features and print the summary."""
    data_dir = Path(cfg.out) / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    if cfg.dataset.source == "synth":
        synth_cfg = dataclasses.replace(cfg.synth, seed=cfg.seed)
        uset = synth_generate(synth_cfg)
        frames = uset.eval_frames(cfg.frontend, cfg.seed)
        speakers = uset.speaker_table()
        excluded: list[tuple[str, str]] = []
        utt_rows = [(u, s) for u, s in zip(uset.utterance_ids, uset.speaker_ids)]
    else:
        records = read_manifest(cfg.dataset.manifest)
        speakers, excluded = normalize_speakers(records, cfg.dataset.age_schema)
        keep = {u for s in speakers for u in s.utterance_ids}
        by_id = {r.utterance_id: r for r in records}
        audio_dir = Path(cfg.dataset.audio_dir or Path(cfg.dataset.manifest).parent)
        rng = np.random.default_rng(cfg.seed)
        utt_rows, feats = [], []
        for s in speakers:
            for u in s.utterance_ids:
                path = audio_dir / by_id[u].audio_path
                if path.suffix.lower() != ".wav" and not path.exists():
                    path = path.with_suffix(".wav")  # clips converted to WAV ahead of time
                try:
                    wav = read_wav(path)
                except (OSError, ValueError) as exc:
                    raise DataError(f"{path}: cannot read audio ({exc})") from None
                feats.append(extract_features(wav, cfg.frontend, rng))
                utt_rows.append((u, s.speaker_id))
        assert len(utt_rows) == len(keep)
        frames = np.stack(feats) if feats else np.zeros((0, 0, cfg.frontend.n_mels))
    by_speaker = {s.speaker_id: s for s in speakers}
    write_speakers(data_dir / "speakers.tsv", speakers)
    write_tsv(data_dir / "excluded.tsv", ["speaker_id", "reason"], excluded)
    write_tsv(data_dir / "utterances.tsv", ["utterance_id", "speaker_id", "gender", "age_group", "accent_group"],
              [(u, s, by_speaker[s].gender, by_speaker[s].age_group, by_speaker[s].accent_group)
               for u, s in utt_rows])
    np.save(data_dir / "features.npy", np.ascontiguousarray(frames, dtype=np.float64))
    splits = split_speakers(speakers, cfg.dataset.split_ratios, cfg.seed)
    write_splits(data_dir / "splits.tsv", splits)
    test_speakers = [s for s in speakers if splits[s.speaker_id] == "test"]
    trials = build_trials(test_speakers, np.random.default_rng(cfg.seed), cfg.verify.impostor_ratio,
                          cfg.verify.max_pairs_per_speaker)
    write_trials(data_dir / "trials_test.csv", trials)
    summary = format_summary(demographic_summary(speakers))
    (data_dir / "summary.txt").write_text(summary + "\n", encoding="utf-8")
    print(summary)
    return data_dir


def load_prepared(cfg: ExperimentConfig, split: str | None = None) -> UtteranceSet:
    data_dir = Path(cfg.out) / "data"
    if not (data_dir / "features.npy").exists():
        raise DataError(f"{data_dir}: no prepared data, run 'prepare' first")
    rows = read_tsv(data_dir / "utterances.tsv")
    labels = {a: np.array([CATEGORIES[a].index(r[col]) for r in rows], dtype=np.int64)
              for a, col in (("gender", "gender"), ("age", "age_group"), ("accent", "accent_group"))}
    uset = UtteranceSet([r["utterance_id"] for r in rows], [r["speaker_id"] for r in rows], labels,
                        frames=np.load(data_dir / "features.npy"))
    if split is None:
        return uset
    if split not in SPLIT_NAMES:
        raise ValueError(f"unknown split '{split}'")
    splits = read_splits(data_dir / "splits.tsv")
    return uset.select_speakers([s for s, v in splits.items() if v == split])


# ---------------------------------------------------------------- training


def run_name(mode: str, lambda_adv=None, k=None, triple=None) -> str:
    if mode == "baseline":
        return "baseline"
    if mode == "adversarial":
        return f"adversarial_lambda{lambda_adv:g}"
    return f"bottleneck_k{k}_lambda{'-'.join(f'{v:g}' for v in triple)}"


def _meta(run_dir: Path) -> dict[str, str]:
    return {r["key"]: r["value"] for r in read_tsv(run_dir / "meta.tsv")}


def _write_meta(run_dir: Path, tcfg, status: str) -> None:
    triple = "/".join(f"{v:g}" for v in tcfg.lambda_triple) if tcfg.lambda_triple else ""
    write_tsv(run_dir / "meta.tsv", ["key", "value"],
              [("mode", tcfg.mode), ("lambda_adv", "" if tcfg.lambda_adv is None else f"{tcfg.lambda_adv:g}"),
               ("k", "" if tcfg.k is None else tcfg.k), ("triple", triple), ("status", status)])


def load_run(run_dir) -> TrainResult:
    """Rebuild encoder (and bottleneck) from a run directory's checkpoint."""
    run_dir = Path(run_dir)
    state = ad.load_checkpoint(run_dir / "checkpoint.dseb")
    try:
        w1, wp = state["encoder.w1"], state["encoder.wp"]
    except KeyError as exc:
        raise DataError(f"{run_dir}: checkpoint lacks {exc}") from None
    enc = Encoder(np.random.default_rng(0), w1.shape[0], w1.shape[1], wp.shape[1])
    enc.load_state_dict({n: v for n, v in state.items() if n.startswith("encoder.")})
    result = TrainResult(enc)
    if "bottleneck.w_demo" in state:
        k = state["bottleneck.w_demo"].shape[1]
        bn = CausalBottleneck(np.random.default_rng(0), enc.dim, k, DEFAULT_CLASSES)
        bn.load_state_dict({n: v for n, v in state.items() if n.startswith("bottleneck.")})
        result.bottleneck = bn
    return result


def train_run(cfg: ExperimentConfig, tcfg, run_dir, baseline_dir=None) -> str:
    """Train one grid point into ``run_dir``; returns "ok" or "diverged"."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(dump_config(dataclasses.replace(cfg, train=tcfg)), encoding="utf-8")
    data = load_prepared(cfg, "train")
    try:
        if tcfg.mode == "baseline":
            result = train_baseline(data, tcfg, cfg.frontend)
        elif tcfg.mode == "adversarial":
            result = train_adversarial(data, tcfg, cfg.frontend)
        else:
            if baseline_dir is None or not (Path(baseline_dir) / "checkpoint.dseb").exists():
                raise DataError("bottleneck training needs a trained baseline run")
            result = train_bottleneck(data, load_run(baseline_dir).encoder, tcfg, cfg.frontend)
    except TrainingDiverged:
        log.warning("%s: training diverged", run_dir.name)
        _write_meta(run_dir, tcfg, "diverged")
        return "diverged"
    ad.save_checkpoint(run_dir / "checkpoint.dseb", result.parameters())
    keys = list(result.curves[0]) if result.curves else ["epoch"]
    _write_csv(run_dir / "curves.csv", keys, [[row[k] for k in keys] for row in result.curves])
    _write_meta(run_dir, tcfg, "ok")
    return "ok"


def cmd_train(cfg: ExperimentConfig) -> str:
    t = cfg.train_config()
    runs = Path(cfg.out) / "runs"
    return train_run(cfg, t, runs / run_name(t.mode, t.lambda_adv, t.k, t.lambda_triple), runs / "baseline")


# ---------------------------------------------------------------- evaluation


def cmd_embed(cfg: ExperimentConfig, run_dir, split: str = "test", branch: str = "full", out=None) -> Path:
    run_dir = Path(run_dir)
    result = load_run(run_dir)
    if branch != "full" and result.bottleneck is None:
        raise DataError(f"{run_dir}: branch '{branch}' needs a bottleneck checkpoint")
    data = load_prepared(cfg, split)
    z = embed(result, data.frames, branch)
    out = Path(out) if out else run_dir / f"embeddings_{split}_{branch}.demb"
    write_embeddings(out, Embeddings(list(data.utterance_ids), z, branch))
    return out


def _labels_for(cfg: ExperimentConfig, ids: list[str]) -> dict[str, np.ndarray]:
    data = load_prepared(cfg)
    index = {u: i for i, u in enumerate(data.utterance_ids)}
    try:
        rows = np.array([index[u] for u in ids], dtype=np.int64)
    except KeyError as exc:
        raise DataError(f"embeddings reference unknown utterance {exc}") from None
    return {a: y[rows] for a, y in data.labels.items()}


PROBE_COLUMNS = ["attribute", "split", "branch", "linear_acc", "ci_low", "ci_high", "mlp_mean", "mlp_std", "n_eval"]


def cmd_probe(cfg: ExperimentConfig, train_path, eval_paths: dict[str, str], out) -> list:
    """Probe every attribute; the probe trains on ``train_path`` and reports on each eval file."""
    train = read_embeddings(train_path)
    evals = {name: read_embeddings(p) for name, p in eval_paths.items()}
    for name, e in evals.items():
        if e.dim != train.dim:
            raise DataError(f"embedding dim mismatch: {train_path} has {train.dim}, {eval_paths[name]} has {e.dim}")
    y_train = _labels_for(cfg, train.ids)
    y_eval = {name: _labels_for(cfg, e.ids) for name, e in evals.items()}
    rows = []
    for attr, n_classes in DEFAULT_CLASSES.items():
        missing = sorted(set(range(n_classes)) - set(y_train[attr].tolist()))
        if missing:
            names = [CATEGORIES[attr][c] for c in missing]
            raise DataError(f"{train_path}: no training examples of {attr} class {', '.join(names)}")
        reports = probe_attribute(attr, train.matrix.astype(np.float64), y_train[attr],
                                  {n: (e.matrix.astype(np.float64), y_eval[n][attr]) for n, e in evals.items()},
                                  cfg.probe, n_classes, cfg.seed)
        for r in reports:
            rows.append([attr, r.split, train.branch, r.point_accuracy, r.ci_low, r.ci_high, r.mean, r.std,
                         r.n_eval])
    _write_csv(out, PROBE_COLUMNS, rows)
    return rows


VERIFY_COLUMNS = ["branch", "group_by", "group", "roc_auc", "eer", "n_genuine", "n_impostor"]


def cmd_verify(cfg: ExperimentConfig, emb_path, out, trials_path=None) -> list:
    emb = read_embeddings(emb_path)
    trials_path = trials_path or Path(cfg.out) / "data" / "trials_test.csv"
    trials = read_trials(trials_path)
    rep = evaluate_trials(trials, emb.as_dict())
    rows = [[emb.branch, "all", "all", rep.roc_auc, rep.eer, rep.n_genuine, rep.n_impostor]]
    for group_by, groups in rep.subgroups.items():
        for tag, sub in groups.items():
            if sub is None:
                rows.append([emb.branch, group_by, tag, None, None, None, None])
            else:
                rows.append([emb.branch, group_by, tag, sub.roc_auc, sub.eer, sub.n_genuine, sub.n_impostor])
    _write_csv(out, VERIFY_COLUMNS, rows)
    return rows


def evaluate_run(cfg: ExperimentConfig, run_dir) -> None:
    """Embeddings for val/test, probes trained on val, verification on test trials."""
    run_dir = Path(run_dir)
    branches = ("demo", "residual") if _meta(run_dir)["mode"] == "bottleneck" else ("full",)
    probe_parts = []
    for branch in branches:
        paths = {s: cmd_embed(cfg, run_dir, s, branch) for s in ("val", "test")}
        part = run_dir / f"probes_{branch}.csv"
        cmd_probe(cfg, paths["val"], paths, part)
        probe_parts.append(part)
    # verification only ever uses the speaker-identity branch
    cmd_verify(cfg, run_dir / f"embeddings_test_{branches[-1]}.demb", run_dir / "verification.csv")
    lines = [p.read_text(encoding="utf-8").splitlines() for p in probe_parts]
    merged = lines[0] + [ln for part in lines[1:] for ln in part[1:]]
    (run_dir / "probes.csv").write_text("\n".join(merged) + "\n", encoding="utf-8")
    for p in probe_parts:
        p.unlink()


# ---------------------------------------------------------------- sweep


def sweep_grid(cfg: ExperimentConfig) -> list:
    base = cfg.train_config(mode="baseline", lambda_adv=None, k=None, lambda_triple=None)
    grid = [base]
    grid += [dataclasses.replace(base, mode="adversarial", lambda_adv=lam) for lam in cfg.sweep.lambdas]
    grid += [dataclasses.replace(base, mode="bottleneck", k=k, lambda_triple=tuple(t), learning_rate=None)
             for k in cfg.sweep.ks for t in cfg.sweep.triples]
    return grid


def _grid_job(args) -> tuple[str, str]:
    cfg_text, seed, out, tcfg, baseline_dir = args
    cfg = dataclasses.replace(parse_config(cfg_text), seed=seed, out=out)
    run_dir = Path(out) / "runs" / run_name(tcfg.mode, tcfg.lambda_adv, tcfg.k, tcfg.lambda_triple)
    status = train_run(cfg, tcfg, run_dir, baseline_dir)
    if status == "ok":
        evaluate_run(cfg, run_dir)
    return run_dir.name, status


def cmd_sweep(cfg: ExperimentConfig, jobs: int = 1) -> dict[str, str]:
    """Baseline first (bottleneck runs start from it), then every other grid point."""
    runs = Path(cfg.out) / "runs"
    text = cfg.source_text or dump_config(cfg)
    grid = sweep_grid(cfg)
    baseline_dir = runs / "baseline"
    jobs_args = [(text, cfg.seed, cfg.out, t, str(baseline_dir)) for t in grid]
    statuses = dict([_grid_job(jobs_args[0])])
    rest = jobs_args[1:]
    if statuses["baseline"] != "ok":
        rest = [a for a in rest if a[3].mode != "bottleneck"]
    if jobs > 1 and len(rest) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            statuses.update(pool.map(_grid_job, rest))
    else:
        statuses.update(map(_grid_job, rest))
    cmd_report(cfg)
    return statuses


# ---------------------------------------------------------------- report


def _table_text(title: str, header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(header)]
    line = lambda cells: "  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(cells, widths)))  # noqa: E731
    return "\n".join([title, line(header), line(["-" * w for w in widths]), *map(line, rows)])


def cmd_report(cfg: ExperimentConfig, run_dirs=None) -> Path:
    """Consolidate run directories into table-shaped CSVs plus an aligned text file."""
    runs_root = Path(cfg.out) / "runs"
    run_dirs = sorted(Path(d) for d in run_dirs) if run_dirs else sorted(
        d for d in runs_root.iterdir() if (d / "meta.tsv").exists()) if runs_root.exists() else []
    order = {"baseline": 0, "adversarial": 1, "bottleneck": 2}

    def sort_key(d):
        m = _meta(d)
        lam = float(m["lambda_adv"]) if m["lambda_adv"] else 0.0
        k = int(m["k"]) if m["k"] else 0
        triple = tuple(float(v) for v in m["triple"].split("/")) if m["triple"] else ()
        return order[m["mode"]], lam, k, triple

    run_dirs.sort(key=sort_key)
    ver, probes, subgroups = [], [], []
    for d in run_dirs:
        m = _meta(d)
        ident = [d.name, m["mode"], m["lambda_adv"], m["k"], m["triple"]]
        if m["status"] != "ok" or not (d / "verification.csv").exists():
            status = m["status"] if m["status"] != "ok" else "not_evaluated"
            ver.append(ident + ["", status, "", ""])
            probes.append(ident + ["", "", status, "", "", "", "", ""])
            continue
        for r in _read_csv(d / "verification.csv"):
            if r["group_by"] == "all":
                ver.append(ident + [r["branch"], "ok", r["roc_auc"], r["eer"]])
            else:
                subgroups.append([d.name, r["branch"], r["group_by"], r["group"], r["roc_auc"], r["eer"],
                                  r["n_genuine"], r["n_impostor"]])
        for r in _read_csv(d / "probes.csv"):
            if r["split"] == "test":
                probes.append(ident + [r["branch"], r["attribute"], "ok", r["linear_acc"], r["ci_low"],
                                       r["ci_high"], r["mlp_mean"], r["mlp_std"]])
    id_cols = ["run", "mode", "lambda_adv", "k", "triple"]
    ver_cols = id_cols + ["branch", "status", "roc_auc", "eer"]
    probe_cols = id_cols + ["branch", "attribute", "status", "linear_acc", "ci_low", "ci_high", "mlp_mean", "mlp_std"]
    sub_cols = ["run", "branch", "group_by", "group", "roc_auc", "eer", "n_genuine", "n_impostor"]
    adv = lambda rows: [r for r in rows if r[1] == "adversarial"]  # noqa: E731
    bn = lambda rows, branch=None: [r for r in rows if r[1] == "bottleneck" and branch in (None, r[5])]  # noqa: E731
    tables = [
        ("verification", "Verification, all runs (test split)", ver_cols, ver),
        ("probes", "Demographic probes, all runs (test split)", probe_cols, probes),
        ("verification_vs_lambda", "Verification vs adversarial lambda",
         ["lambda_adv", "status", "roc_auc", "eer"], [[r[2], r[6], r[7], r[8]] for r in adv(ver)]),
        ("probes_vs_lambda", "Probe accuracy vs adversarial lambda",
         ["lambda_adv", "attribute", "status", "linear_acc", "ci_low", "ci_high", "mlp_mean", "mlp_std"],
         [[r[2], *r[6:]] for r in adv(probes)]),
        ("bottleneck_verification", "Bottleneck verification (residual branch)",
         ["k", "triple", "status", "roc_auc", "eer"], [[r[3], r[4], r[6], r[7], r[8]] for r in bn(ver)]),
        ("demo_probes", "Demo-branch probes",
         ["k", "triple", "attribute", "status", "linear_acc", "ci_low", "ci_high", "mlp_mean", "mlp_std"],
         [[r[3], r[4], *r[6:]] for r in bn(probes, "demo")]),
        ("residual_probes", "Residual-branch probes",
         ["k", "triple", "attribute", "status", "linear_acc", "ci_low", "ci_high", "mlp_mean", "mlp_std"],
         [[r[3], r[4], *r[6:]] for r in bn(probes, "residual")]),
        ("verification_subgroups", "Verification per subgroup", sub_cols, subgroups),
    ]
    out = Path(cfg.out) / "report"
    out.mkdir(parents=True, exist_ok=True)
    texts = []
    for name, title, cols, rows in tables:
        _write_csv(out / f"{name}.csv", cols, rows)
        texts.append(_table_text(title, cols, rows))
    (out / "report.txt").write_text("\n\n".join(texts) + "\n", encoding="utf-8")
    return out
