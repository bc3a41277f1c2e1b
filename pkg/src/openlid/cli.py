"""Pipeline orchestration: prep | synth | features | lda | train | eval | sweep.

Every stage reads/writes under a single work directory and records a stage
manifest (effective config, config hash, seed, input/output content hashes)
so artifacts are reproducible and staleness is detectable: a stage refuses to
consume an artifact whose producer's inputs have changed since it was built,
unless ``--force`` is given.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import archive as archive_io
from .corpus import (
    IN_SET, LanguageLabel, Manifest, equalize_duration, emit_kaldi_dir,
    emit_lexicon, read_wav, resample, scan_corpus, split_by_duration, top_words,
)
from .errors import NumericError, OpenLidError, StaleArtifactError
from .features import FeatureMatrix, FrameConfig, MelConfig, extract_embedding
from .lda import apply_lda, fit_lda, load_lda, save_lda
from .models import (
    NAMED_CONFIGS, TrainConfig, build_named, load_checkpoint, make_batches,
    predict_utterance, save_checkpoint, train,
)
from .openset import render_reports, reports_to_csv, threshold_sweep
from .synth import SynthSpec, synth_corpus

WORKERS_ENV = "OPENLID_WORKERS"

DEFAULTS = {
    "workdir": "work",
    "languages": [],
    "resample_hz": 16000,
    "frame": {},
    "mel": {},
    "blocks": ["mfcc", "logmel", "pitch"],
    "cmvn": True,
    "lda": {"dim": 6, "shrinkage": 0.01},
    "model": "tdnn-desk",
    "train": {},
    "synth": {"langs_in": 7, "langs_out": 2, "minutes": 1.0, "seed": 0, "sample_rate": 16000},
    "prep": {"cap_hours": 10.0, "train_fraction": 0.8},
    "sweep_grid": None,
    "threshold": 0.7,
    "workers": 4,
}

TABLE_FINE_POINTS = (0.7625, 0.775, 0.7875, 0.8125, 0.825)


def default_sweep_grid() -> list[float]:
    """0.10 to 0.90 step 0.05 plus the fine breakdown points."""
    taus = {round(0.10 + 0.05 * i, 4) for i in range(17)}
    taus.update(TABLE_FINE_POINTS)
    return sorted(taus)


def parse_grid(text: str) -> list[float]:
    """Parse ``start:step:end[,extra...]`` into a sorted threshold list."""
    taus = set()
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if ":" in item:
            try:
                start, step, end = (float(v) for v in item.split(":"))
            except ValueError as exc:
                raise OpenLidError(f"bad grid range {item!r} (want start:step:end)") from exc
            if step <= 0 or end < start:
                raise OpenLidError(f"bad grid range {item!r}: need step > 0 and end >= start")
            tau = start
            while tau <= end + 1e-9:
                taus.add(round(tau, 4))
                tau += step
        else:
            taus.add(round(float(item), 4))
    if not taus:
        raise OpenLidError(f"empty sweep grid {text!r}")
    bad = [t for t in taus if not 0.0 <= t <= 1.0]
    if bad:
        raise OpenLidError(f"sweep thresholds must lie in [0, 1], got {sorted(bad)}")
    return sorted(taus)


# --- Stage manifests and staleness -------------------------------------------


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def audio_path(workdir: Path, record) -> Path:
    """Record paths may be stored relative to the work directory."""
    path = Path(record.path)
    return path if path.is_absolute() else workdir / path


def corpus_digest(manifest: Manifest, workdir: Path) -> str:
    """Single hash over all referenced audio files in sorted-id order."""
    digest = hashlib.sha256()
    for record in manifest:
        digest.update(record.id.encode("utf-8"))
        digest.update(bytes.fromhex(sha256_file(audio_path(workdir, record))))
    return digest.hexdigest()


def stage_manifest_path(workdir: Path, stage: str) -> Path:
    return workdir / f"stage_{stage}.json"


def write_stage_manifest(workdir: Path, stage: str, config: dict, seed,
                         inputs: dict[str, str], outputs: dict[str, str]) -> Path:
    doc = {
        "stage": stage,
        "config": config,
        "config_hash": hashlib.sha256(canonical_json(config).encode()).hexdigest(),
        "seed": seed,
        "inputs": inputs,
        "outputs": outputs,
    }
    path = stage_manifest_path(workdir, stage)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(doc) + "\n", encoding="utf-8", newline="\n")
    return path


def _load_stage_manifests(workdir: Path) -> list[dict]:
    docs = []
    for path in sorted(workdir.glob("stage_*.json")):
        docs.append(json.loads(path.read_text(encoding="utf-8")))
    return docs


def _current_hash(workdir: Path, key: str, manifest: Manifest | None) -> str | None:
    if key == "corpus_digest":
        return corpus_digest(manifest, workdir) if manifest is not None else None
    path = workdir / key
    return sha256_file(path) if path.is_file() else None


def verify_inputs(workdir: Path, keys: list[str], force: bool,
                  manifest: Manifest | None = None) -> dict[str, str]:
    """Hash this stage's inputs and refuse stale artifacts unless forced.

    For every input produced by an earlier stage, both the artifact itself and
    that stage's recorded inputs must still hash-match; otherwise the artifact
    is stale.
    """
    docs = _load_stage_manifests(workdir)
    produced_by = {}
    for doc in docs:
        for key in doc.get("outputs", {}):
            produced_by[key] = doc
    hashes = {}
    problems = []
    for key in keys:
        current = _current_hash(workdir, key, manifest)
        if current is None:
            raise OpenLidError(f"missing input artifact: {workdir / key}")
        hashes[key] = current
        producer = produced_by.get(key)
        if producer is None:
            continue
        if producer["outputs"].get(key) != current:
            problems.append(f"{key} was modified after stage {producer['stage']} produced it")
            continue
        for up_key, recorded in producer.get("inputs", {}).items():
            up_current = _current_hash(workdir, up_key, manifest)
            if up_current != recorded:
                problems.append(
                    f"{key} is stale: input {up_key} of stage {producer['stage']} has changed"
                )
    if problems:
        message = "; ".join(problems)
        if force:
            print(f"warning: {message} (--force given, continuing)", file=sys.stderr)
        else:
            raise StaleArtifactError(message + " (rerun upstream stages or pass --force)")
    return hashes


# --- Run configuration --------------------------------------------------------


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_run_config(args) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS))  # deep copy
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise OpenLidError(f"run config not found: {path}")
        cfg = _merge(cfg, json.loads(path.read_text(encoding="utf-8")))
    if args.workdir:
        cfg["workdir"] = args.workdir
    env_workers = os.environ.get(WORKERS_ENV)
    if env_workers:
        cfg["workers"] = int(env_workers)
    return cfg


def frame_config(cfg: dict) -> FrameConfig:
    return FrameConfig(**cfg["frame"])


def mel_config(cfg: dict) -> MelConfig:
    return MelConfig(**cfg["mel"])


def _workers(cfg: dict) -> int:
    return max(1, int(cfg["workers"]))


def _map_workers(fn, items, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise OpenLidError(f"{what} not found: {path}")
    return path


def _load_manifest(workdir: Path) -> Manifest:
    return Manifest.load(_require(workdir / "manifest.tsv", "corpus manifest"))


# --- Stages --------------------------------------------------------------------


def stage_synth(cfg: dict, args) -> None:
    synth_cfg = dict(cfg["synth"])
    if args.seed is not None:
        synth_cfg["seed"] = args.seed
    if args.minutes is not None:
        synth_cfg["minutes"] = args.minutes
    if args.langs_in is not None:
        synth_cfg["langs_in"] = args.langs_in
    if args.langs_out is not None:
        synth_cfg["langs_out"] = args.langs_out
    train_fraction = cfg["prep"]["train_fraction"]
    workdir = Path(cfg["workdir"])
    spec = SynthSpec(
        n_langs_in=synth_cfg["langs_in"], n_langs_out=synth_cfg["langs_out"],
        minutes_per_lang=synth_cfg["minutes"], sample_rate=synth_cfg["sample_rate"],
    )
    manifest = synth_corpus(spec, synth_cfg["seed"], workdir / "corpus")
    # store paths relative to the work directory so runs are relocatable and
    # two runs with the same config are byte-identical
    manifest = Manifest(
        replace(r, path=Path(r.path).relative_to(workdir).as_posix()) for r in manifest
    )
    records = []
    for label in manifest.languages:
        per_lang = manifest.subset(lambda r, name=label.name: r.language.name == name)
        train_m, test_m = split_by_duration(per_lang, train_fraction)
        records.extend(train_m.records)
        records.extend(test_m.records)
    merged = Manifest(records)
    merged.save(workdir / "manifest.tsv")
    write_stage_manifest(
        workdir, "synth",
        config={"synth": synth_cfg, "train_fraction": train_fraction},
        seed=synth_cfg["seed"],
        inputs={},
        outputs={"manifest.tsv": sha256_file(workdir / "manifest.tsv"),
                 "corpus_digest": corpus_digest(merged, workdir)},
    )
    print(f"synth: {len(merged)} utterances over {len(merged.languages)} languages "
          f"-> {workdir / 'manifest.tsv'}")


def stage_prep(cfg: dict, args) -> None:
    workdir = Path(cfg["workdir"])
    cap_hours = args.cap_hours if args.cap_hours is not None else cfg["prep"]["cap_hours"]
    train_fraction = (args.train_fraction if args.train_fraction is not None
                      else cfg["prep"]["train_fraction"])
    if args.corpus_root:
        if not args.language:
            raise OpenLidError("prep --corpus-root also needs --language")
        languages = [{"name": args.language, "root": args.corpus_root, "role": args.role}]
    else:
        languages = cfg["languages"]
    if not languages:
        raise OpenLidError("no languages configured: set languages[] in the run config "
                           "or pass --corpus-root/--language")
    scanned = {}
    total_warnings = 0
    for entry in languages:
        label = LanguageLabel(entry["name"], entry.get("role", IN_SET))
        result = scan_corpus(entry["root"], label)
        # namespace ids by language so merging corpora cannot collide
        scanned[label.name] = Manifest(
            replace(r, id=f"{label.name}_{r.id}") for r in result.manifest
        )
        total_warnings += result.warnings
    capped = equalize_duration(scanned, cap_hours)
    records = []
    for name in sorted(capped):
        per_lang = capped[name]
        train_m, test_m = split_by_duration(per_lang, train_fraction)
        records.extend(train_m.records)
        records.extend(test_m.records)
        for split_name, part in (("train", train_m), ("test", test_m)):
            emit_kaldi_dir(part, workdir / "prep" / name / split_name)
        words = top_words([r.transcript for r in per_lang], 1000)
        if words:
            emit_lexicon(words, workdir / "prep" / name / "dict")
    merged = Manifest(records)
    merged.save(workdir / "manifest.tsv")
    write_stage_manifest(
        workdir, "prep",
        config={"languages": languages, "cap_hours": cap_hours, "train_fraction": train_fraction},
        seed=None,
        inputs={},
        outputs={"manifest.tsv": sha256_file(workdir / "manifest.tsv"),
                 "corpus_digest": corpus_digest(merged, workdir)},
    )
    print(f"prep: {len(merged)} utterances, {total_warnings} skipped files "
          f"-> {workdir / 'manifest.tsv'}")


def stage_features(cfg: dict, args) -> None:
    workdir = Path(cfg["workdir"])
    cmvn = cfg["cmvn"] if args.cmvn is None else (args.cmvn == "on")
    blocks = tuple(args.blocks.split(",")) if args.blocks else tuple(cfg["blocks"])
    manifest = _load_manifest(workdir)
    inputs = verify_inputs(workdir, ["manifest.tsv", "corpus_digest"], args.force, manifest)
    fcfg, mcfg = frame_config(cfg), mel_config(cfg)
    resample_hz = cfg["resample_hz"]

    def one(record):
        clip = read_wav(audio_path(workdir, record))
        if resample_hz:
            clip = resample(clip, resample_hz)
        return extract_embedding(clip, fcfg, mcfg, blocks=blocks, cmvn=cmvn)

    mats = _map_workers(one, manifest.records, _workers(cfg))
    features = {record.id: mat for record, mat in zip(manifest.records, mats)}
    out_path = workdir / "feats.lidf"
    idx_path = archive_io.write_archive(features, out_path)
    write_stage_manifest(
        workdir, "features",
        config={"frame": cfg["frame"], "mel": cfg["mel"], "blocks": list(blocks),
                "cmvn": cmvn, "resample_hz": resample_hz},
        seed=None,
        inputs=inputs,
        outputs={"feats.lidf": sha256_file(out_path), "feats.lidf.idx": sha256_file(idx_path)},
    )
    dims = {mat.dim for mat in mats}
    print(f"features: {len(features)} utterances, dim {sorted(dims)} -> {out_path}")


def _train_in_set(manifest: Manifest) -> tuple[Manifest, list[str]]:
    in_train = manifest.subset(lambda r: r.split == "train" and r.language.role == IN_SET)
    class_names = sorted({r.language.name for r in in_train})
    if len(class_names) < 2:
        raise OpenLidError(f"need at least 2 in-set training languages, found {len(class_names)}")
    return in_train, class_names


def stage_lda(cfg: dict, args) -> None:
    workdir = Path(cfg["workdir"])
    dim = args.dim if args.dim is not None else cfg["lda"]["dim"]
    shrinkage = args.shrinkage if args.shrinkage is not None else cfg["lda"]["shrinkage"]
    manifest = _load_manifest(workdir)
    _require(workdir / "feats.lidf", "feature archive")
    inputs = verify_inputs(workdir, ["manifest.tsv", "feats.lidf", "feats.lidf.idx"], args.force, manifest)
    in_train, class_names = _train_in_set(manifest)
    feats = archive_io.read_archive(workdir / "feats.lidf", [r.id for r in in_train])
    frames = np.concatenate([feats[r.id].data for r in in_train], axis=0)
    labels = np.concatenate([
        np.full(feats[r.id].n_frames, class_names.index(r.language.name), dtype=np.int64)
        for r in in_train
    ])
    transform = fit_lda(frames, labels, dim=dim, shrinkage=shrinkage)
    out_path = save_lda(transform, workdir / "lda.lidl")
    write_stage_manifest(
        workdir, "lda",
        config={"dim": dim, "shrinkage": shrinkage, "classes": class_names},
        seed=None,
        inputs=inputs,
        outputs={"lda.lidl": sha256_file(out_path)},
    )
    print(f"lda: {frames.shape[0]} frames, {transform.in_dim} -> {transform.out_dim} dims "
          f"-> {out_path}")


def stage_train(cfg: dict, args) -> None:
    workdir = Path(cfg["workdir"])
    model_name = args.model or cfg["model"]
    if model_name not in NAMED_CONFIGS:
        raise OpenLidError(f"unknown model {model_name!r}; have {sorted(NAMED_CONFIGS)}")
    train_kwargs = dict(cfg["train"])
    if args.epochs is not None:
        train_kwargs["epochs"] = args.epochs
    if args.seed is not None:
        train_kwargs["seed"] = args.seed
    tc = TrainConfig(**train_kwargs)
    manifest = _load_manifest(workdir)
    _require(workdir / "feats.lidf", "feature archive")
    _require(workdir / "lda.lidl", "LDA transform")
    inputs = verify_inputs(
        workdir, ["manifest.tsv", "feats.lidf", "feats.lidf.idx", "lda.lidl"], args.force, manifest
    )
    transform = load_lda(workdir / "lda.lidl")
    in_train, class_names = _train_in_set(manifest)
    feats = archive_io.read_archive(workdir / "feats.lidf", [r.id for r in in_train])
    projected = {
        uid: apply_lda(mat.data, transform).astype(np.float32) for uid, mat in feats.items()
    }
    model = build_named(model_name, input_dim=transform.out_dim, seed=tc.seed)
    plan = make_batches(projected, in_train, tc.chunk_frames, tc.batch_size, tc.seed,
                        min_frames=model.min_frames, class_names=class_names)
    if plan.skipped:
        print(f"train: skipped {plan.skipped} utterances shorter than {model.min_frames} frames")
    history = train(model, plan, tc)
    meta = {
        "model_name": model_name,
        "epochs_completed": tc.epochs,
        "seed": tc.seed,
        "loss_history": history,
        "class_labels": class_names,
    }
    out_path = save_checkpoint(model, workdir / "model.lidm", train_meta=meta)
    write_stage_manifest(
        workdir, "train",
        config={"model": model_name, "train": train_kwargs},
        seed=tc.seed,
        inputs=inputs,
        outputs={"model.lidm": sha256_file(out_path)},
    )
    print(f"train: {model_name} on {len(plan)} chunks, "
          f"loss {history[0]:.4f} -> {history[-1]:.4f} -> {out_path}")


def _predict_test_set(cfg: dict, force: bool):
    """Cached probabilities and references for the test split (in-set + out-of-set)."""
    workdir = Path(cfg["workdir"])
    manifest = _load_manifest(workdir)
    _require(workdir / "feats.lidf", "feature archive")
    _require(workdir / "lda.lidl", "LDA transform")
    _require(workdir / "model.lidm", "model checkpoint")
    inputs = verify_inputs(
        workdir, ["manifest.tsv", "feats.lidf", "feats.lidf.idx", "lda.lidl", "model.lidm"],
        force, manifest,
    )
    transform = load_lda(workdir / "lda.lidl")
    model, header = load_checkpoint(workdir / "model.lidm")
    class_names = header["train_meta"].get("class_labels")
    if not class_names:
        raise OpenLidError("checkpoint is missing class labels; retrain first")
    test = manifest.subset(lambda r: r.split == "test")
    if len(test) == 0:
        raise OpenLidError("manifest has no test split; rerun prep/synth")
    feats = archive_io.read_archive(workdir / "feats.lidf", [r.id for r in test])
    usable = [r for r in test if feats[r.id].n_frames >= model.min_frames]
    skipped = len(test) - len(usable)

    def one(record):
        x = apply_lda(feats[record.id].data, transform).astype(np.float32)
        return predict_utterance(model, x)

    probs = np.vstack(_map_workers(one, usable, _workers(cfg)))
    references = []
    for record in usable:
        if record.language.role == IN_SET:
            if record.language.name not in class_names:
                raise OpenLidError(
                    f"in-set test language {record.language.name!r} was not in the training set"
                )
            references.append(class_names.index(record.language.name))
        else:
            references.append(None)
    return probs, references, [r.id for r in usable], skipped, inputs, workdir


def stage_eval(cfg: dict, args) -> None:
    threshold = args.threshold if args.threshold is not None else cfg["threshold"]
    probs, references, _, skipped, inputs, workdir = _predict_test_set(cfg, args.force)
    report = threshold_sweep(probs, references, [threshold])[0]
    out_path = workdir / "eval.csv"
    out_path.write_text(reports_to_csv([report]), encoding="utf-8", newline="\n")
    write_stage_manifest(
        workdir, "eval",
        config={"threshold": threshold, "skipped_short": skipped},
        seed=None,
        inputs=inputs,
        outputs={"eval.csv": sha256_file(out_path)},
    )
    print(f"eval: threshold {threshold:g}: overall {report.overall_acc:.1f}% "
          f"in-set {report.in_set_acc:.1f}% out-of-set {report.out_of_set_acc:.1f}% -> {out_path}")


def stage_sweep(cfg: dict, args) -> None:
    if args.grid:
        taus = parse_grid(args.grid)
    elif cfg["sweep_grid"]:
        taus = sorted(round(float(t), 4) for t in cfg["sweep_grid"])
    else:
        taus = default_sweep_grid()
    probs, references, _, skipped, inputs, workdir = _predict_test_set(cfg, args.force)
    reports = threshold_sweep(probs, references, taus)
    csv_path, svg_path = render_reports(reports, workdir / "sweep")
    write_stage_manifest(
        workdir, "sweep",
        config={"grid": taus, "skipped_short": skipped},
        seed=None,
        inputs=inputs,
        outputs={"sweep.csv": sha256_file(csv_path), "sweep.svg": sha256_file(svg_path)},
    )
    best = max(reports, key=lambda r: r.overall_acc)
    print(f"sweep: {len(reports)} thresholds -> {csv_path}; best overall "
          f"{best.overall_acc:.1f}% at {format(best.threshold, 'g')}")


# --- Entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="openlid",
        description="Open-set spoken language identification pipeline",
    )
    parser.add_argument("--config", help="JSON run configuration file")
    parser.add_argument("--workdir", help="work directory (overrides run config)")
    parser.add_argument("--force", action="store_true",
                        help="proceed even when inputs look stale")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("prep", help="ingest corpora into a capped, split manifest")
    p.add_argument("--corpus-root", help="single-language corpus directory")
    p.add_argument("--language", help="language name for --corpus-root")
    p.add_argument("--role", default=IN_SET, choices=(IN_SET, "out_of_set"))
    p.add_argument("--cap-hours", type=float, default=None)
    p.add_argument("--train-fraction", type=float, default=None)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--minutes", type=float, default=None)
    p.add_argument("--langs-in", type=int, default=None)
    p.add_argument("--langs-out", type=int, default=None)

    p = sub.add_parser("features", help="extract per-frame feature archive")
    p.add_argument("--cmvn", choices=("on", "off"), default=None)
    p.add_argument("--blocks", help="comma-separated blocks, e.g. mfcc,logmel,pitch")

    p = sub.add_parser("lda", help="fit the discriminant projection")
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--shrinkage", type=float, default=None)

    p = sub.add_parser("train", help="train a classifier on the train split")
    p.add_argument("--model", choices=sorted(NAMED_CONFIGS), default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("eval", help="evaluate at a single threshold")
    p.add_argument("--threshold", type=float, default=None)

    p = sub.add_parser("sweep", help="threshold sweep with CSV + SVG report")
    p.add_argument("--grid", help="start:step:end[,extra...] thresholds")

    return parser


_STAGES = {
    "prep": stage_prep,
    "synth": stage_synth,
    "features": stage_features,
    "lda": stage_lda,
    "train": stage_train,
    "eval": stage_eval,
    "sweep": stage_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    if not args.command:
        parser.print_usage(sys.stderr)
        print("openlid: a subcommand is required", file=sys.stderr)
        return 1
    try:
        cfg = load_run_config(args)
        Path(cfg["workdir"]).mkdir(parents=True, exist_ok=True)
        _STAGES[args.command](cfg, args)
    except NumericError as exc:
        print(f"openlid {args.command}: numeric failure: {exc}", file=sys.stderr)
        return 3
    except (OpenLidError, ValueError, KeyError, OSError) as exc:
        print(f"openlid {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
