"""Command-line workflow: gendata, train, predict, evaluate, ablate, plot.

Every command is deterministic given its flags and seed.  Exit codes:
0 success, 1 runtime failure, 2 usage/configuration error.  Ablation rows
can run in parallel worker processes, capped by the AMN_THREADS
environment variable.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as runconfig
from .audio import (HOP_SECONDS, featurize, load_features, load_wav, save_features,
                    wav_duration)
from .data import DatasetManifest, ScapeSpec, generate, load_manifest, save_manifest, split
from .errors import AmnetError, ConfigError
from .metrics import (binarize, decode_events, event_score_corpus, format_report,
                      read_events_tsv, report_to_csv, segment_score_corpus, tagging_score)
from .model import AmnModel
from .training import load_checkpoint, save_checkpoint, train, write_history_csv

_STUDIES = {
    "placement": [
        ("none", {"am.placement": ()}),
        ("enc_half", {"am.placement": ("enc@1/2",)}),
        ("enc_quarter", {"am.placement": ("enc@1/4",)}),
        ("enc_both", {"am.placement": ("enc@1/2", "enc@1/4")}),
        ("dec_half", {"am.placement": ("dec@1/2",)}),
        ("dec_quarter", {"am.placement": ("dec@1/4",)}),
        ("dec_both", {"am.placement": ("dec@1/2", "dec@1/4")}),
        ("full", {"am.placement": runconfig.FULL_PLACEMENT}),
    ],
    "tau": [(f"tau_{tau:g}", {"am.tau": tau}) for tau in (5.0, 1.0, 0.5, 0.1, 0.05)],
    "grad": [(mode, {"am.grad_mode": mode}) for mode in ("none", "enc_only", "dec_only", "full")],
}


# ---------------------------------------------------------------------- #
# shared helpers
# ---------------------------------------------------------------------- #


def _flag_overrides(args, keys) -> dict:
    raw = vars(args)
    return {key: raw[key] for key in keys if raw.get(key) is not None}


def _add_config_flags(parser, prefixes):
    for key, spec in runconfig.FIELDS.items():
        if any(key.startswith(p) for p in prefixes):
            parser.add_argument(f"--{key}", dest=key, default=None, metavar="V",
                                help=spec.help)


def _config_keys(prefixes):
    return [key for key in runconfig.FIELDS if any(key.startswith(p) for p in prefixes)]


def _resolve(args, prefixes) -> runconfig.RunConfig:
    overrides = {}
    for key, value in _flag_overrides(args, _config_keys(prefixes)).items():
        overrides[key] = value
    return runconfig.resolve(getattr(args, "config", None), overrides)


def _featurize_manifest(manifest: DatasetManifest, cache_dir: Path | None = None) -> dict:
    """Per-clip (t, 64) arrays, optionally cached next to the dataset."""
    if cache_dir is not None:
        cache_dir.mkdir(parents=True, exist_ok=True)
    features = {}
    for entry in manifest.entries:
        cache = cache_dir / f"{entry.id}.lms" if cache_dir is not None else None
        if cache is not None and cache.exists():
            features[entry.id] = load_features(cache).frames.data
            continue
        mel = featurize(load_wav(manifest.audio_path(entry)))
        if cache is not None:
            save_features(cache, mel)
        features[entry.id] = mel.frames.data
    return features


def _examples(manifest: DatasetManifest, features: dict, class_names) -> list:
    index = {name: k for k, name in enumerate(class_names)}
    out = []
    for entry in manifest.entries:
        row = np.zeros(len(class_names))
        for label in entry.labels:
            row[index[label]] = 1.0
        out.append((features[entry.id], row))
    return out


def _predict_events(model: AmnModel, features: dict, clip_ids, class_names,
                    threshold: float, median_window: int) -> dict:
    events = {}
    for clip_id in clip_ids:
        pred = model.predict(features[clip_id])
        active = binarize(pred.probs.data, threshold=threshold, median_window=median_window)
        events[clip_id] = decode_events(active, HOP_SECONDS, class_names=class_names)
    return events


def _evaluate_model(model: AmnModel, manifest: DatasetManifest, features: dict,
                    class_names, cfg: runconfig.RunConfig) -> dict:
    """Macro F1 for the three score families on a strongly labeled split."""
    from .metrics import load_strong
    pred_events = _predict_events(model, features, [e.id for e in manifest.entries],
                                  class_names, cfg["eval.threshold"], cfg["eval.median_window"])
    truth_events, durations, pred_tags, true_tags = {}, {}, {}, {}
    for entry in manifest.entries:
        truth_events[entry.id] = load_strong(manifest.strong_path(entry))
        durations[entry.id] = wav_duration(manifest.audio_path(entry))
        pred_tags[entry.id] = {e.label for e in pred_events[entry.id]}
        true_tags[entry.id] = set(entry.labels)
    return {
        "tagging_f1": tagging_score(pred_tags, true_tags).macro_f1,
        "segment_f1": segment_score_corpus(pred_events, truth_events, durations,
                                           cfg["eval.segment_seconds"]).macro_f1,
        "event_f1": event_score_corpus(pred_events, truth_events, cfg["eval.onset_collar"],
                                       cfg["eval.offset_collar"], cfg["eval.offset_pct"]).macro_f1,
    }


# ---------------------------------------------------------------------- #
# gendata
# ---------------------------------------------------------------------- #


def _parse_range(text: str, kind=float):
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected MIN,MAX, got {text!r}")
    try:
        return (kind(parts[0]), kind(parts[1]))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def cmd_gendata(args) -> int:
    spec = ScapeSpec(n_clips=args.clips, clip_seconds=args.clip_seconds,
                     classes=args.classes, events_per_clip=args.events,
                     event_seconds=args.event_seconds, snr_db=args.snr,
                     max_polyphony=args.max_polyphony,
                     distractor_bursts=args.distractors,
                     distractor_snr_db=args.distractor_snr, seed=args.seed)
    manifest = generate(spec, args.out)
    counts = Counter()
    for entry in manifest.entries:
        from .metrics import load_strong
        for event in load_strong(manifest.strong_path(entry)):
            counts[event.label] += 1
    print(f"manifest: {Path(args.out) / 'manifest.jsonl'}")
    print(f"clips: {len(manifest.entries)}")
    for label in sorted(counts):
        print(f"events[{label}]: {counts[label]}")
    return 0


# ---------------------------------------------------------------------- #
# train
# ---------------------------------------------------------------------- #


def cmd_train(args) -> int:
    cfg = _resolve(args, ("model.", "am.", "train."))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(args.manifest)
    class_names = manifest.label_union()
    features = _featurize_manifest(manifest, manifest.root / ".feature_cache")

    val_fraction = cfg["train.val_fraction"]
    train_manifest, val_manifest = split(manifest, (1.0 - val_fraction, val_fraction),
                                         seed=args.seed)[:2]
    model_config = cfg.model_config(class_names)
    train_cfg = cfg.train_config(seed=args.seed)
    result = train(_examples(train_manifest, features, class_names),
                   _examples(val_manifest, features, class_names),
                   model_config, train_cfg)

    save_checkpoint(out_dir / "best.ckpt", result.best_params, model_config)
    save_checkpoint(out_dir / "last.ckpt", result.model.params, model_config)
    write_history_csv(out_dir / "history.csv", result.history)
    cfg.echo(out_dir)
    print(f"best checkpoint: {out_dir / 'best.ckpt'}")
    print(f"final val loss: {result.history[-1].val_loss:.6f}")
    print(f"best val loss: {result.best_val_loss:.6f}")
    return 0


# ---------------------------------------------------------------------- #
# predict
# ---------------------------------------------------------------------- #


def cmd_predict(args) -> int:
    cfg = _resolve(args, ("eval.",))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    params, model_config = load_checkpoint(args.checkpoint)
    model = AmnModel(model_config, params)
    class_names = model_config.names()

    clips = {}
    if args.manifest:
        manifest = load_manifest(args.manifest)
        for entry in manifest.entries:
            clips[entry.id] = manifest.audio_path(entry)
    for path in args.audio or []:
        clips[Path(path).stem] = Path(path)
    if not clips:
        raise ConfigError("predict needs --manifest or at least one --audio file")

    events_by_clip = {}
    for clip_id, path in sorted(clips.items()):
        mel = featurize(load_wav(path))
        pred = model.predict(mel)
        active = binarize(pred.probs.data, threshold=cfg["eval.threshold"],
                          median_window=cfg["eval.median_window"])
        events_by_clip[f"{clip_id}.wav"] = decode_events(active, HOP_SECONDS,
                                                         class_names=class_names)
        if args.emit_probs:
            with open(out_dir / f"{clip_id}_probs.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(list(class_names))
                for row in pred.probs.data:
                    writer.writerow([f"{v:.6f}" for v in row])

    from .metrics import write_events_tsv
    write_events_tsv(out_dir / "events.tsv", events_by_clip)
    cfg.echo(out_dir)
    total = sum(len(v) for v in events_by_clip.values())
    print(f"events: {out_dir / 'events.tsv'} ({total} events over {len(events_by_clip)} clips)")
    return 0


# ---------------------------------------------------------------------- #
# evaluate
# ---------------------------------------------------------------------- #


def cmd_evaluate(args) -> int:
    cfg = _resolve(args, ("eval.",))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(args.manifest)
    from .metrics import load_strong

    pred_all = read_events_tsv(args.pred)
    pred_events, truth_events, durations, pred_tags, true_tags = {}, {}, {}, {}, {}
    for entry in manifest.entries:
        key = f"{entry.id}.wav"
        if entry.strong is None:
            raise ConfigError(f"clip {entry.id} has no strong annotations; "
                              "evaluate needs a strongly labeled manifest")
        pred_events[entry.id] = pred_all.get(key, [])
        truth_events[entry.id] = load_strong(manifest.strong_path(entry))
        durations[entry.id] = wav_duration(manifest.audio_path(entry))
        pred_tags[entry.id] = {e.label for e in pred_events[entry.id]}
        true_tags[entry.id] = set(entry.labels)

    reports = {
        "tagging": tagging_score(pred_tags, true_tags),
        "segment": segment_score_corpus(pred_events, truth_events, durations,
                                        cfg["eval.segment_seconds"]),
        "event": event_score_corpus(pred_events, truth_events, cfg["eval.onset_collar"],
                                    cfg["eval.offset_collar"], cfg["eval.offset_pct"]),
    }
    for name, report in reports.items():
        report_to_csv(out_dir / f"{name}.csv", report)
        text = format_report(report, title=f"{name} score")
        (out_dir / f"{name}.txt").write_text(text + "\n")
        print(text)
        print()
    cfg.echo(out_dir)
    return 0


# ---------------------------------------------------------------------- #
# ablate
# ---------------------------------------------------------------------- #


def _ci95_halfwidth(values: np.ndarray) -> float:
    if values.size < 2:
        return 0.0
    from scipy import stats
    return float(stats.t.ppf(0.975, values.size - 1) * values.std(ddof=1) / np.sqrt(values.size))


def _ablation_task(payload):
    """One (row, seed) training + evaluation; runs in a worker process."""
    (row_name, seed, overrides, base_values, class_names,
     train_examples, val_examples, eval_entries, eval_features, eval_truth, eval_durations) = payload
    values = dict(base_values)
    values.update(overrides)
    cfg = runconfig.RunConfig(values)
    model_config = cfg.model_config(class_names)
    result = train(train_examples, val_examples, model_config, cfg.train_config(seed=seed))
    model = AmnModel(model_config, result.best_params)

    pred_events = _predict_events(model, eval_features, eval_entries, class_names,
                                  cfg["eval.threshold"], cfg["eval.median_window"])
    pred_tags = {cid: {e.label for e in evs} for cid, evs in pred_events.items()}
    true_tags = {cid: {e.label for e in evs} for cid, evs in eval_truth.items()}
    metrics = {
        "tagging_f1": tagging_score(pred_tags, true_tags).macro_f1,
        "segment_f1": segment_score_corpus(pred_events, eval_truth, eval_durations,
                                           cfg["eval.segment_seconds"]).macro_f1,
        "event_f1": event_score_corpus(pred_events, eval_truth, cfg["eval.onset_collar"],
                                       cfg["eval.offset_collar"], cfg["eval.offset_pct"]).macro_f1,
    }
    return row_name, seed, metrics


def cmd_ablate(args) -> int:
    cfg = _resolve(args, ("model.", "am.", "train.", "eval.", "ablate."))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(args.manifest)
    class_names = manifest.label_union()
    features = _featurize_manifest(manifest, manifest.root / ".feature_cache")

    train_frac = cfg["ablate.train_fraction"]
    val_frac = cfg["ablate.val_fraction"]
    eval_frac = 1.0 - train_frac - val_frac
    if eval_frac <= 0:
        raise ConfigError("ablate train/val fractions leave no evaluation clips")
    train_m, val_m, eval_m = split(manifest, (train_frac, val_frac, eval_frac), seed=args.seed)
    from .metrics import load_strong
    eval_truth = {e.id: load_strong(manifest.strong_path(e)) for e in eval_m.entries}
    eval_durations = {e.id: wav_duration(manifest.audio_path(e)) for e in eval_m.entries}
    eval_ids = [e.id for e in eval_m.entries]
    eval_features = {cid: features[cid] for cid in eval_ids}

    n_seeds = args.seeds if args.seeds is not None else cfg["ablate.seeds"]
    rows = _STUDIES[args.study]
    tasks = []
    for row_name, overrides in rows:
        for seed_offset in range(n_seeds):
            tasks.append((row_name, args.seed + seed_offset, overrides, cfg.values,
                          class_names,
                          _examples(train_m, features, class_names),
                          _examples(val_m, features, class_names),
                          eval_ids, eval_features, eval_truth, eval_durations))

    workers = int(os.environ.get("AMN_THREADS", "1"))
    results = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_ablation_task, tasks))
    else:
        for task in tasks:
            results.append(_ablation_task(task))
            row, seed, metrics = results[-1]
            print(f"  {args.study}/{row} seed {seed}: "
                  + " ".join(f"{k}={v:.3f}" for k, v in metrics.items()))

    by_row = {}
    for row_name, seed, metrics in results:
        by_row.setdefault(row_name, []).append(metrics)
    csv_path = out_dir / f"{args.study}_study.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["study", "row", "seeds"]
        for key in ("tagging_f1", "segment_f1", "event_f1"):
            header += [f"{key}_mean", f"{key}_ci95"]
        writer.writerow(header)
        for row_name, _ in rows:
            metrics_list = by_row[row_name]
            record = [args.study, row_name, len(metrics_list)]
            for key in ("tagging_f1", "segment_f1", "event_f1"):
                values = np.array([m[key] for m in metrics_list])
                record += [f"{values.mean():.6f}", f"{_ci95_halfwidth(values):.6f}"]
            writer.writerow(record)
    cfg.echo(out_dir)
    print(f"study table: {csv_path}")
    return 0


# ---------------------------------------------------------------------- #
# plot
# ---------------------------------------------------------------------- #


def cmd_plot(args) -> int:
    from .plotting import bar_chart, line_chart
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = Path(args.input)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = [row for row in reader if row]
    if not rows:
        raise ConfigError(f"{path}: empty CSV")
    header = rows[0]
    written = []

    if header[:3] == ["epoch", "train_loss", "val_loss"]:
        epochs = [float(r[0]) for r in rows[1:]]
        series = {"train": (epochs, [float(r[1]) for r in rows[1:]]),
                  "val": (epochs, [float(r[2]) for r in rows[1:]])}
        svg = line_chart(series, title=path.stem, xlabel="epoch", ylabel="loss")
        target = out_dir / f"{path.stem}_loss.svg"
        target.write_text(svg)
        written.append(target)
    elif header[:2] == ["study", "row"]:
        labels = [r[1] for r in rows[1:]]
        for metric in ("tagging_f1", "segment_f1", "event_f1"):
            mean_idx = header.index(f"{metric}_mean")
            ci_idx = header.index(f"{metric}_ci95")
            values = [float(r[mean_idx]) for r in rows[1:]]
            errors = [float(r[ci_idx]) for r in rows[1:]]
            svg = bar_chart(labels, values, errors, title=f"{path.stem}: {metric}",
                            ylabel=metric)
            target = out_dir / f"{path.stem}_{metric}.svg"
            target.write_text(svg)
            written.append(target)
    else:
        raise ConfigError(f"{path}: unrecognized CSV header {header}")
    for target in written:
        print(f"wrote {target}")
    return 0


# ---------------------------------------------------------------------- #
# argument parsing
# ---------------------------------------------------------------------- #


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="amnet",
        description="Weakly supervised sound event detection with affinity mixup")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gendata", help="synthesize a deterministic soundscape dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--clips", type=int, default=32)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--clip-seconds", type=float, default=10.0)
    p.add_argument("--events", type=lambda s: _parse_range(s, int), default=(1, 5),
                   metavar="MIN,MAX", help="events per clip")
    p.add_argument("--event-seconds", type=_parse_range, default=(0.5, 3.0), metavar="MIN,MAX")
    p.add_argument("--snr", type=_parse_range, default=(6.0, 20.0), metavar="MIN,MAX")
    p.add_argument("--max-polyphony", type=int, default=3)
    p.add_argument("--distractors", type=lambda s: _parse_range(s, int), default=(0, 0),
                   metavar="MIN,MAX", help="label-free noise bursts per clip")
    p.add_argument("--distractor-snr", type=_parse_range, default=(8.0, 14.0),
                   metavar="MIN,MAX")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gendata)

    p = sub.add_parser("train", help="train a detector on a weakly labeled manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--seed", type=int, default=0)
    _add_config_flags(p, ("model.", "am.", "train."))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="decode events from audio with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--audio", nargs="*", default=None, help="WAV file(s)")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--emit-probs", action="store_true", help="also write per-clip probability CSVs")
    _add_config_flags(p, ("eval.",))
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predicted events against a strong manifest")
    p.add_argument("--pred", required=True, help="events TSV from predict")
    p.add_argument("--manifest", required=True, help="strongly labeled manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    _add_config_flags(p, ("eval.",))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run a placement/tau/gradient study")
    p.add_argument("--manifest", required=True)
    p.add_argument("--study", required=True, choices=sorted(_STUDIES))
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seeds", type=int, default=None, help="seeds per row")
    p.add_argument("--seed", type=int, default=0, help="base seed")
    _add_config_flags(p, ("model.", "am.", "train.", "eval.", "ablate."))
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="render history or study CSVs as SVG")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (AmnetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
