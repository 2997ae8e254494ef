"""Command-line entry point: curate, ingest, train, eval, cluster, explain, report."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from synthcxr.backbones import make_backbone
from synthcxr.classifier import (
    Checkpoint,
    build_model,
    extract_features,
    grad_cam,
    predict_proba,
    train,
)
from synthcxr.config import RunConfig
from synthcxr.dataset import (
    ClassLabel,
    DatasetManifest,
    Source,
    Split,
    ingest_chest_xray_folder,
    ingest_class_folder,
    ingest_rsna,
    stratified_split,
)
from synthcxr.generation import HttpProvider, StubProvider, curate_dataset, generate_images
from synthcxr.imaging import read_raster
from synthcxr.metrics import ScoredLabels, evaluate_scores, metric_report, prevalence_baseline, write_curves
from synthcxr.reporting import (
    RunRecord,
    consolidate,
    make_run_dir,
    save_cam,
    summary_markdown,
    write_json,
)
from synthcxr.representation import embed_2d, evaluate_clustering, write_embedding_csv

logger = logging.getLogger("synthcxr")


class CliError(Exception):
    pass


def _provider(config: RunConfig):
    gen = config.generation
    if gen.provider == "stub":
        return StubProvider(config.seed, gen.stub_height, gen.stub_width)
    if gen.provider == "remote":
        if not gen.endpoint:
            raise CliError("remote provider needs generation.endpoint in the config")
        return HttpProvider(gen.endpoint)
    raise CliError(f"unknown provider {gen.provider!r}")


def cmd_curate(config: RunConfig, run_dir: Path, record: RunRecord) -> DatasetManifest:
    gen = config.generation
    if gen.n_images % 2:
        raise CliError(f"n_images must be even for a 50:50 dataset, got {gen.n_images}")
    provider = _provider(config)
    source = gen.source or (Source.PROCEDURAL_STUB.value if gen.provider == "stub" else Source.NANO_BANANA.value)
    raw = []
    with record.stage("generate"):
        for label in ClassLabel:
            images = generate_images(provider, label, gen.n_images // 2, gen.batch_size, gen.concurrency,
                                     persist_dir=run_dir / "raw" / label.value)
            raw.extend((img, label) for img in images)
    store = Path(config.paths.curated_store) if config.paths.curated_store else run_dir / "curated"
    with record.stage("curate"):
        manifest = curate_dataset(raw, config.crop_fraction, config.seed, store, source)
        manifest = stratified_split(manifest, tuple(config.split), config.seed)
    record.artifact(manifest.save(run_dir / "manifest.json"))
    record.artifact(write_json(run_dir / "split_report.json", {
        "seed": config.seed,
        "crop_fraction": config.crop_fraction,
        "splits": manifest.split_counts(),
        "rejections": [list(s) for s in manifest.skipped],
    }))
    return manifest


def cmd_ingest(config: RunConfig, run_dir: Path, record: RunRecord, args) -> DatasetManifest:
    with record.stage("ingest"):
        if args.corpus == "chest-xray":
            manifest = ingest_chest_xray_folder(args.root or config.paths.chest_xray_root)
        elif args.corpus == "rsna":
            manifest = ingest_rsna(args.images or config.paths.rsna_images, args.labels or config.paths.rsna_labels)
        else:
            manifest = ingest_class_folder(args.root, args.source)
            if args.split:
                manifest = stratified_split(manifest, tuple(config.split), config.seed)
    record.artifact(manifest.save(run_dir / "manifest.json"))
    record.artifact(write_json(run_dir / "ingest_report.json", {
        "class_counts": {k.value: v for k, v in manifest.class_counts.items()},
        "n_records": len(manifest),
        "skipped": [list(s) for s in manifest.skipped],
    }))
    return manifest


def _evaluate(config: RunConfig, ckpt, manifest: DatasetManifest, dataset: str, model_tag: str,
              out_dir: Path, record: RunRecord, filename: str) -> dict:
    scored = predict_proba(ckpt, manifest)
    labels = manifest.labels
    data = ScoredLabels(labels, [s for _, s in scored])
    estimates = evaluate_scores(labels, data.scores, config.bootstrap.n_boot, config.bootstrap.alpha, config.seed)
    payload = {
        "dataset": dataset,
        "model_tag": model_tag,
        "n": len(manifest),
        "prevalence": prevalence_baseline(labels),
        "reports": [metric_report(dataset, model_tag, name, est) for name, est in estimates.items()],
    }
    record.artifact(write_json(out_dir / filename, payload))
    stem = filename.rsplit(".", 1)[0]
    write_curves(out_dir / f"{stem}_roc.csv", out_dir / f"{stem}_pr.csv", data)
    with (out_dir / f"{stem}_scores.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["record_id", "label", "score"])
        for (rid, score), y in zip(scored, labels):
            w.writerow([rid, int(y), repr(score)])
    record.metrics.extend(payload["reports"])
    return payload


def cmd_train(config: RunConfig, run_dir: Path, record: RunRecord, manifest_path: Path) -> Checkpoint:
    manifest = DatasetManifest.load(manifest_path)
    backbone = make_backbone(**config.backbone)
    model = build_model(backbone, config.hidden_width, config.seed)
    with record.stage("train"):
        ckpt = train(model, manifest.subset(Split.TRAIN), manifest.subset(Split.VAL), config.train,
                     config.augment, log_path=run_dir / "epochs.jsonl")
    ckpt.provenance["model_tag"] = config.model_tag
    ckpt.provenance["manifest"] = str(manifest_path)
    record.artifact(ckpt.save(run_dir / "checkpoint.ckpt"))
    record.artifact(run_dir / "epochs.jsonl")
    logger.info("selected epoch %d (val AUROC %.4f)", ckpt.epoch, ckpt.val_metric)
    test = manifest.subset(Split.TEST)
    if len(test):
        with record.stage("test_eval"):
            _evaluate(config, ckpt, test, "internal_test", config.model_tag, run_dir, record, "test_metrics.json")
    return ckpt


def cmd_eval(config: RunConfig, run_dir: Path, record: RunRecord, checkpoint: Path, manifest_path: Path,
             dataset: Optional[str]) -> dict:
    ckpt = Checkpoint.load(checkpoint)
    manifest = DatasetManifest.load(manifest_path)
    tag = ckpt.provenance.get("model_tag", config.model_tag)
    dataset = dataset or (manifest.records[0].source.value if len(manifest) else "unknown")
    with record.stage("eval"):
        return _evaluate(config, ckpt, manifest, dataset, tag, run_dir, record, "metrics.json")


def _variant_model(config: RunConfig, spec: str):
    if spec == "pretrained":
        return build_model(make_backbone(**config.backbone), config.hidden_width, config.seed)
    return Checkpoint.load(spec)


def cmd_cluster(config: RunConfig, run_dir: Path, record: RunRecord, manifest_path: Path,
                variants: Sequence[str], dataset: Optional[str]) -> List[dict]:
    manifest = DatasetManifest.load(manifest_path)
    dataset = dataset or (manifest.records[0].source.value if len(manifest) else "unknown")
    labels = manifest.labels
    reports = []
    for item in variants:
        tag, _, spec = item.partition("=")
        if not spec:
            raise CliError(f"variant must be TAG=CHECKPOINT or TAG=pretrained, got {item!r}")
        with record.stage(f"cluster:{tag}"):
            feats = extract_features(_variant_model(config, spec), manifest, model_tag=tag)
            rep = evaluate_clustering(feats, labels, config.cluster.k, config.seed, config.cluster.restarts,
                                      config.cluster.zscore)
            coords = embed_2d(feats, config.seed, config.cluster.embedding)
        record.artifact(write_embedding_csv(run_dir / f"embedding_{tag}.csv", manifest.ids, coords, labels,
                                            rep.assignments))
        d = rep.to_dict()
        d["embedding"] = config.cluster.embedding
        d["n"] = len(manifest)
        reports.append(d)
    record.artifact(write_json(run_dir / "clusters.json", {"dataset": dataset, "reports": reports}))
    record.metrics.extend(reports)
    return reports


def _stem(record_id: str) -> str:
    return record_id.replace("/", "__").replace("\\", "__")


def cmd_explain(config: RunConfig, run_dir: Path, record: RunRecord, checkpoint: Path, manifest_path: Path,
                ids: Sequence[str], target_class: Optional[str]) -> List[Path]:
    ckpt = Checkpoint.load(checkpoint)
    manifest = DatasetManifest.load(manifest_path)
    selected = manifest.select(list(ids))
    out = []
    with record.stage("explain"):
        for r in selected.records:
            image = read_raster(r.path)
            cam = grad_cam(ckpt, image, target_class, r.id)
            npy, png = save_cam(run_dir / "cam", _stem(r.id), image, cam.values)
            record.artifact(npy)
            record.artifact(png)
            out.append(npy)
            logger.info("%s: CAM for class %s", r.id, cam.target_class.value)
    return out


def cmd_report(directory: Path) -> dict:
    summary = consolidate(directory)
    write_json(directory / "summary.json", summary)
    (directory / "summary.md").write_text(summary_markdown(summary))
    return summary


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="synthcxr", description=__doc__)
    parser.add_argument("--config", type=Path, help="run configuration JSON")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--output-dir", type=Path, help="override paths.output_dir")
    parser.add_argument("--run-id", help="fixed run directory name instead of timestamp + config hash")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("curate", help="generate, crop and split a synthetic dataset")
    p.add_argument("--crop-fraction", type=float)
    p.add_argument("--n-images", type=int)
    p.add_argument("--provider", choices=["stub", "remote"])

    p = sub.add_parser("ingest", help="ingest a real corpus or a pre-generated folder")
    p.add_argument("corpus", choices=["chest-xray", "rsna", "folder"])
    p.add_argument("--root", type=Path)
    p.add_argument("--images", type=Path)
    p.add_argument("--labels", type=Path)
    p.add_argument("--source", default=Source.ROENTGEN_V2.value, choices=[s.value for s in Source])
    p.add_argument("--split", action="store_true", help="assign train/val/test using config.split")

    p = sub.add_parser("train", help="fine-tune on a split manifest")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--model-tag")

    p = sub.add_parser("eval", help="bootstrap AUROC/AUPR on a corpus manifest")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--dataset")

    p = sub.add_parser("cluster", help="k-means Acc/ARI and 2-D embeddings of extracted features")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--variant", action="append", required=True, metavar="TAG=CHECKPOINT|pretrained")
    p.add_argument("--dataset")
    p.add_argument("--embedding", choices=["pca", "neighborhood_umap_style", "umap"])

    p = sub.add_parser("explain", help="Grad-CAM maps and overlays for selected records")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--ids", nargs="+", required=True)
    p.add_argument("--target-class", choices=[c.value for c in ClassLabel])

    p = sub.add_parser("report", help="consolidate reports under a directory")
    p.add_argument("--dir", type=Path, help="defaults to the output directory")
    return parser


def _effective_config(args) -> RunConfig:
    config = RunConfig.load(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.output_dir is not None:
        config.paths.output_dir = str(args.output_dir)
    cmd = args.command
    if cmd == "curate":
        if args.crop_fraction is not None:
            config.crop_fraction = args.crop_fraction
        if args.n_images is not None:
            config.generation.n_images = args.n_images
        if args.provider:
            config.generation.provider = args.provider
    elif cmd == "train":
        if args.epochs is not None:
            config.train.epochs = args.epochs
        if args.learning_rate is not None:
            config.train.learning_rate = args.learning_rate
        if args.model_tag:
            config.model_tag = args.model_tag
    elif cmd == "cluster" and args.embedding:
        config.cluster.embedding = args.embedding
    config.propagate_seed()
    return config


def _check_inputs(args) -> None:
    for name in ("manifest", "checkpoint"):
        path = getattr(args, name, None)
        if path is not None and not Path(path).exists():
            raise CliError(f"{name} not found: {path}")
    if args.command == "cluster":
        for item in args.variant:
            spec = item.partition("=")[2]
            if spec and spec != "pretrained" and not Path(spec).exists():
                raise CliError(f"checkpoint not found for variant {item!r}")
    if args.command == "explain":
        try:
            DatasetManifest.load(args.manifest).select(args.ids)
        except KeyError as exc:
            raise CliError(exc.args[0]) from None


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        config = _effective_config(args)
        if args.command == "report":
            directory = args.dir or Path(config.paths.output_dir)
            summary = cmd_report(Path(directory))
            print(summary_markdown(summary), end="")
            return 0
        _check_inputs(args)
        run_dir = make_run_dir(config.paths.output_dir, config, args.command, args.run_id)
        record = RunRecord(args.command, run_dir, config.to_dict())
        config.save(run_dir / "config.json")
        if args.command == "curate":
            cmd_curate(config, run_dir, record)
        elif args.command == "ingest":
            cmd_ingest(config, run_dir, record, args)
        elif args.command == "train":
            cmd_train(config, run_dir, record, args.manifest)
        elif args.command == "eval":
            cmd_eval(config, run_dir, record, args.checkpoint, args.manifest, args.dataset)
        elif args.command == "cluster":
            cmd_cluster(config, run_dir, record, args.manifest, args.variant, args.dataset)
        elif args.command == "explain":
            cmd_explain(config, run_dir, record, args.checkpoint, args.manifest, args.ids, args.target_class)
        record.write()
        print(run_dir)
        return 0
    except (CliError, FileNotFoundError, KeyError, ValueError, RuntimeError) as exc:
        logger.error("%s", exc.args[0] if isinstance(exc, KeyError) and exc.args else exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
