"""Stage implementations behind the CLI.

Each stage reads the previous stage's artifacts from the run directory and
writes its own; stages are individually re-runnable and, given identical
inputs, reproduce their outputs byte for byte. Layout under the run dir::

    config.resolved.json       fully resolved config + hash (written by every stage)
    slides/slide_NNNN.ppm      synthetic slides
    manifest.tsv               path <tab> label <tab> split
    masks/slide_NNNN.ppm       tissue masks (0/255)
    patches/slide_NNNN.patches patch sets
    models/encoder.ckpt        pretrained encoder
    features/slide_NNNN.<tap>.feat
    graphs/slide_NNNN.<tap>.graph
    models/gcn_<tap>.ckpt, models/baseline.ckpt
    logs/<model>.log           epoch <tab> mean loss <tab> lr
    report/metrics.txt         per-model scored slides + summaries
    report/*.csv, *.svg        rendered tables and curves
"""

from __future__ import annotations

import os

import numpy as np

from .baseline import TileBagClassifier, select_tiles
from ._container import read_container, write_container
from .checkpoint import load_checkpoint
from .config import RunConfig, config_hash, dump_resolved
from .contrastive import (
    AugmentationParams,
    ContrastivePatchEncoder,
    TAPS,
    load_features,
    save_features,
)
from .gcn import GraphGradeClassifier, ensemble_probabilities
from .graphs import build_slide_graph, load_graph, save_graph
from .metrics import format_metrics_block
from .slides import (
    extract_patches,
    patches_from_arrays,
    patches_to_arrays,
    read_manifest,
    read_ppm,
    segment_tissue,
    write_manifest,
    write_ppm,
    ManifestEntry,
)
from .synthetic import CorpusSpec, corpus_slide_specs, corpus_split, generate_synthetic_slide
from .validation import ContractError, require

GCN_MODELS = {"gcn-small": "small", "gcn-large": "large"}
EVAL_MODELS = ("gcn-small", "gcn-large", "ensemble", "baseline")


class RunDir:
    """Path helpers for one run directory."""

    def __init__(self, root):
        self.root = str(root)

    def path(self, *parts) -> str:
        return os.path.join(self.root, *parts)

    def ensure(self, *parts) -> str:
        full = self.path(*parts)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        return full

    def manifest(self):
        return read_manifest(self.path("manifest.tsv"))

    def slide_ids(self, split: str | None = None) -> list[str]:
        ids = []
        for entry in self.manifest():
            if split is None or entry.split == split:
                ids.append(os.path.splitext(os.path.basename(entry.path))[0])
        return ids

    def labels(self) -> dict[str, int]:
        return {
            os.path.splitext(os.path.basename(e.path))[0]: e.label
            for e in self.manifest()
        }


def _log_config(cfg: RunConfig, run: RunDir) -> None:
    os.makedirs(run.root, exist_ok=True)
    dump_resolved(cfg, run.path("config.resolved.json"))


def _corpus_spec(cfg: RunConfig) -> CorpusSpec:
    c = cfg.corpus
    return CorpusSpec(
        n_slides=c.n_slides, n_classes=c.n_classes, width=c.width,
        height=c.height, val_fraction=c.val_fraction, seed=cfg.seed,
        slide={
            "color_jitter": c.color_jitter,
            "noise_amplitude": c.noise_amplitude,
        },
    )


def stage_synth(cfg: RunConfig, run: RunDir, resume: bool = False) -> list[str]:
    """Generate the synthetic corpus and its manifest."""
    _log_config(cfg, run)
    corpus = _corpus_spec(cfg)
    specs = corpus_slide_specs(corpus)
    splits = corpus_split(corpus)
    entries = []
    written = []
    for i, (spec, split) in enumerate(zip(specs, splits)):
        slide_id = f"slide_{i:04d}"
        rel = os.path.join("slides", f"{slide_id}.ppm")
        target = run.ensure(rel)
        if not (resume and os.path.exists(target)):
            image, _ = generate_synthetic_slide(spec)
            write_ppm(target, image)
            written.append(slide_id)
        entries.append(ManifestEntry(path=rel, label=spec.class_id, split=split))
    write_manifest(run.path("manifest.tsv"), entries)
    return written


def stage_segment(cfg: RunConfig, run: RunDir, resume: bool = False) -> list[str]:
    """Write tissue masks (0/255 rasters) for every slide in the manifest."""
    _log_config(cfg, run)
    done = []
    for entry in run.manifest():
        slide_id = os.path.splitext(os.path.basename(entry.path))[0]
        target = run.ensure("masks", f"{slide_id}.ppm")
        if resume and os.path.exists(target):
            continue
        image = read_ppm(run.path(entry.path))
        mask = segment_tissue(
            image,
            luminance_threshold=cfg.patch.luminance_threshold,
            min_region_px=cfg.patch.min_region_px,
        )
        write_ppm(target, np.repeat(mask[:, :, None].astype(np.uint8) * 255, 3, axis=2))
        done.append(slide_id)
    return done


def stage_patch(cfg: RunConfig, run: RunDir, resume: bool = False) -> list[str]:
    """Tile every slide into patch-set files."""
    _log_config(cfg, run)
    chash = config_hash(cfg)
    done = []
    for entry in run.manifest():
        slide_id = os.path.splitext(os.path.basename(entry.path))[0]
        target = run.ensure("patches", f"{slide_id}.patches")
        if resume and os.path.exists(target):
            continue
        image = read_ppm(run.path(entry.path))
        mask_img = read_ppm(run.path("masks", f"{slide_id}.ppm"))
        mask = mask_img[:, :, 0] > 0
        patches = extract_patches(
            image, mask, patch_size=cfg.patch.size,
            min_tissue_fraction=cfg.patch.min_tissue_fraction,
        )
        if not patches:
            raise ContractError(f"empty slide: no tissue patches in {slide_id}")
        pixels, grid, centroids, fractions = patches_to_arrays(patches)
        write_container(
            target, "patches",
            {
                "slide_id": slide_id, "patch_size": cfg.patch.size,
                "count": len(patches), "config_hash": chash,
            },
            {
                "pixels": pixels, "grid": grid,
                "centroids": centroids, "tissue_fraction": fractions,
            },
        )
        done.append(slide_id)
    return done


def load_patches(run: RunDir, slide_id: str):
    _, meta, arrays = read_container(
        run.path("patches", f"{slide_id}.patches"), expect_kind="patches"
    )
    patches = patches_from_arrays(
        arrays["pixels"], arrays["grid"], arrays["centroids"], arrays["tissue_fraction"]
    )
    return patches, meta


def _encoder_from_config(cfg: RunConfig) -> ContrastivePatchEncoder:
    s = cfg.ssl
    return ContrastivePatchEncoder(
        patch_size=cfg.patch.size, hidden=tuple(s.hidden),
        tap_small=s.tap_small, tap_large=s.tap_large, projection=s.projection,
        epochs=s.epochs, batch_size=s.batch_size, lr=s.lr,
        weight_decay=s.weight_decay, temperature=s.temperature,
        momentum=s.momentum, queue_capacity=s.queue_capacity,
        augmentation=AugmentationParams(
            p_hflip=s.augment.p_hflip, p_vflip=s.augment.p_vflip,
            contrast=tuple(s.augment.contrast), p_blur=s.augment.p_blur,
            blur_sigma=tuple(s.augment.blur_sigma),
        ),
        random_state=cfg.seed,
    )


def stage_pretrain(cfg: RunConfig, run: RunDir, resume: bool = False) -> str:
    """Contrastive pretraining on the train split's patches."""
    _log_config(cfg, run)
    target = run.ensure("models", "encoder.ckpt")
    if resume and os.path.exists(target):
        return target
    train_ids = run.slide_ids("train")
    require(len(train_ids) > 0, "manifest has no train-split slides")
    patches = []
    for slide_id in train_ids:
        patches.extend(load_patches(run, slide_id)[0])
    encoder = _encoder_from_config(cfg).fit(patches)
    encoder.save(target, config_hash=config_hash(cfg))
    log_path = run.ensure("logs", "pretrain.log")
    with open(log_path, "w", encoding="utf-8") as fh:
        for epoch, loss in enumerate(encoder.epoch_losses_):
            fh.write(f"{epoch}\t{loss:.10g}\t-\n")
    return target


def stage_featurize(cfg: RunConfig, run: RunDir, resume: bool = False) -> list[str]:
    """Extract features for every slide at both taps."""
    _log_config(cfg, run)
    chash = config_hash(cfg)
    encoder = ContrastivePatchEncoder.from_checkpoint(run.path("models", "encoder.ckpt"))
    done = []
    for slide_id in run.slide_ids():
        patches, _ = load_patches(run, slide_id)
        grid = np.array([[p.grid_row, p.grid_col] for p in patches], dtype=np.int64)
        centroids = np.array([p.centroid for p in patches], dtype=np.float64)
        for tap in TAPS:
            target = run.ensure("features", f"{slide_id}.{tap}.feat")
            if resume and os.path.exists(target):
                continue
            feats = encoder.extract(patches, tap)
            save_features(target, slide_id, tap, grid, centroids, feats,
                          config_hash=chash)
            done.append(f"{slide_id}.{tap}")
    return done


def stage_graph(cfg: RunConfig, run: RunDir, resume: bool = False) -> list[str]:
    """Build and serialize k-NN slide graphs for both taps."""
    _log_config(cfg, run)
    chash = config_hash(cfg)
    labels = run.labels()
    done = []
    for slide_id in run.slide_ids():
        patches, _ = load_patches(run, slide_id)
        for tap in TAPS:
            target = run.ensure("graphs", f"{slide_id}.{tap}.graph")
            if resume and os.path.exists(target):
                continue
            meta, _, _, feats = load_features(
                run.path("features", f"{slide_id}.{tap}.feat")
            )
            require(meta["slide_id"] == slide_id, "feature store names a different slide")
            graph = build_slide_graph(
                feats, patches, k=cfg.graph.k, label=labels[slide_id],
                slide_id=slide_id, tap=tap,
            )
            save_graph(target, graph, config_hash=chash)
            done.append(f"{slide_id}.{tap}")
    return done


def _load_split_graphs(run: RunDir, tap: str, split: str):
    graphs, hashes = [], set()
    for slide_id in run.slide_ids(split):
        graph, chash = load_graph(run.path("graphs", f"{slide_id}.{tap}.graph"))
        graphs.append(graph)
        hashes.add(chash)
    return graphs, hashes


def _write_history_log(path, history) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for epoch, loss, lr in history:
            fh.write(f"{epoch}\t{loss:.10g}\t{lr:.10g}\n")


def stage_train_gcn(cfg: RunConfig, run: RunDir, tap: str,
                    resume: bool = False) -> str:
    """Train the graph classifier on one tap's train-split graphs."""
    _log_config(cfg, run)
    require(tap in TAPS, f"unknown tap {tap!r}")
    target = run.ensure("models", f"gcn_{tap}.ckpt")
    if resume and os.path.exists(target):
        return target
    graphs, _ = _load_split_graphs(run, tap, "train")
    require(len(graphs) > 0, "manifest has no train-split slides")
    model = GraphGradeClassifier(
        layers=tuple(cfg.gcn.layers), layer_kinds=cfg.gcn.layer_kinds,
        head=tuple(cfg.gcn.head), n_classes=cfg.corpus.n_classes,
        self_loops=cfg.graph.self_loops, epochs=cfg.gcn.epochs,
        lr=cfg.gcn.lr, weight_decay=cfg.gcn.weight_decay,
        random_state=cfg.seed,
    ).fit(graphs)
    model.save(target, config_hash=config_hash(cfg))
    _write_history_log(run.ensure("logs", f"gcn_{tap}.log"), model.history_)
    return target


def stage_train_baseline(cfg: RunConfig, run: RunDir, resume: bool = False) -> str:
    """Train the tile-bag baseline on the train split."""
    _log_config(cfg, run)
    target = run.ensure("models", "baseline.ckpt")
    if resume and os.path.exists(target):
        return target
    labels = run.labels()
    bags = []
    for slide_id in run.slide_ids("train"):
        patches, _ = load_patches(run, slide_id)
        bags.append(select_tiles(
            patches, bag_size=cfg.baseline.bag_size,
            patch_size=cfg.patch.size, slide_id=slide_id,
            label=labels[slide_id],
        ))
    require(len(bags) > 0, "manifest has no train-split slides")
    model = TileBagClassifier(
        hidden=tuple(cfg.baseline.hidden), n_classes=cfg.corpus.n_classes,
        epochs=cfg.baseline.epochs, lr=cfg.baseline.lr,
        weight_decay=cfg.baseline.weight_decay, random_state=cfg.seed,
    ).fit(bags)
    model.save(target, config_hash=config_hash(cfg))
    _write_history_log(run.ensure("logs", "baseline.log"), model.history_)
    return target


def _check_hashes(run: RunDir, observed: set[str], cfg: RunConfig, force: bool) -> None:
    expected = config_hash(cfg)
    problems = sorted(h for h in observed if h != expected)
    if problems and not force:
        raise ContractError(
            "evaluation inputs carry config hash(es) "
            f"{problems} but the current config hashes to {expected}; "
            "re-run the earlier stages or pass --force"
        )
    if len(observed) > 1 and not force:
        raise ContractError(
            f"evaluation inputs mix config hashes {sorted(observed)}; pass --force to override"
        )


def stage_evaluate(cfg: RunConfig, run: RunDir, force: bool = False,
                   models=EVAL_MODELS) -> str:
    """Score the validation split with every available model and write the
    metrics report. Refuses inputs whose config hashes disagree with each
    other or with the current config, unless ``force`` is set."""
    _log_config(cfg, run)
    val_ids = run.slide_ids("val")
    require(len(val_ids) > 0, "manifest has no val-split slides")
    labels = run.labels()
    actual = [labels[s] for s in val_ids]
    n_classes = cfg.corpus.n_classes

    observed_hashes: set[str] = set()
    graphs: dict[str, list] = {}
    members: dict[str, GraphGradeClassifier] = {}
    for name, tap in GCN_MODELS.items():
        ckpt = run.path("models", f"gcn_{tap}.ckpt")
        if name not in models or not os.path.exists(ckpt):
            continue
        member = GraphGradeClassifier.from_checkpoint(ckpt)
        if member.config_.n_classes != n_classes:
            raise ContractError(
                f"model {name} predicts {member.config_.n_classes} classes but the "
                f"config expects {n_classes}"
            )
        members[name] = member
        _, meta, _ = load_checkpoint(ckpt)
        observed_hashes.add(meta.get("config_hash", ""))
        tap_graphs, tap_hashes = _load_split_graphs(run, tap, "val")
        observed_hashes |= tap_hashes
        graphs[tap] = tap_graphs

    baseline_model = None
    baseline_ckpt = run.path("models", "baseline.ckpt")
    if "baseline" in models and os.path.exists(baseline_ckpt):
        baseline_model = TileBagClassifier.from_checkpoint(baseline_ckpt)
        if baseline_model.n_classes_ != n_classes:
            raise ContractError(
                f"model baseline predicts {baseline_model.n_classes_} classes but "
                f"the config expects {n_classes}"
            )
        _, meta, _ = load_checkpoint(baseline_ckpt)
        observed_hashes.add(meta.get("config_hash", ""))

    _check_hashes(run, observed_hashes, cfg, force)

    def rows_from(probs):
        return [
            (sid, actual[i], int(probs[i].argmax()), probs[i])
            for i, sid in enumerate(val_ids)
        ]

    blocks = []
    for name, tap in GCN_MODELS.items():
        if name in members:
            probs = members[name].predict_proba(graphs[tap])
            blocks.append(format_metrics_block(name, rows_from(probs), n_classes))

    if "ensemble" in models and len(members) == len(GCN_MODELS):
        probs = ensemble_probabilities(
            [members[n].model_ for n in GCN_MODELS],
            [graphs[tap] for tap in GCN_MODELS.values()],
        )
        blocks.append(format_metrics_block("ensemble", rows_from(probs), n_classes))

    if baseline_model is not None:
        bags = []
        for slide_id in val_ids:
            patches, _ = load_patches(run, slide_id)
            bags.append(select_tiles(
                patches, bag_size=cfg.baseline.bag_size,
                patch_size=cfg.patch.size, slide_id=slide_id,
            ))
        probs = baseline_model.predict_proba(bags)
        blocks.append(format_metrics_block("baseline", rows_from(probs), n_classes))

    require(len(blocks) > 0, "no trained models found to evaluate")
    target = run.ensure("report", "metrics.txt")
    header = f"# slidegraph metrics report\n# config_hash {config_hash(cfg)}\n"
    with open(target, "w", encoding="utf-8") as fh:
        fh.write(header)
        fh.write("\n".join(blocks))
    return target


def _read_history_log(path) -> list[tuple[int, float, float]]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            epoch, loss, lr = line.rstrip("\n").split("\t")
            records.append((int(epoch), float(loss), float("nan") if lr == "-" else float(lr)))
    return records


def _svg_line_chart(series: dict[str, list[tuple[float, float]]], title: str,
                    width: int = 640, height: int = 360) -> str:
    """Minimal deterministic SVG polyline chart (one polyline per series)."""
    palette = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b")
    margin = 50.0
    points = [p for pts in series.values() for p in pts]
    xs = [p[0] for p in points] or [0.0, 1.0]
    ys = [p[1] for p in points] or [0.0, 1.0]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    x_span = (x_hi - x_lo) or 1.0
    y_span = (y_hi - y_lo) or 1.0

    def sx(x):
        return margin + (x - x_lo) / x_span * (width - 2 * margin)

    def sy(y):
        return height - margin - (y - y_lo) / y_span * (height - 2 * margin)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">{title}</text>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<text x="{margin}" y="{height - margin + 18}" font-family="sans-serif" '
        f'font-size="11">{x_lo:.6g}</text>',
        f'<text x="{width - margin:.1f}" y="{height - margin + 18}" text-anchor="end" '
        f'font-family="sans-serif" font-size="11">{x_hi:.6g}</text>',
        f'<text x="{margin - 6}" y="{height - margin:.1f}" text-anchor="end" '
        f'font-family="sans-serif" font-size="11">{y_lo:.6g}</text>',
        f'<text x="{margin - 6}" y="{margin + 4:.1f}" text-anchor="end" '
        f'font-family="sans-serif" font-size="11">{y_hi:.6g}</text>',
    ]
    for i, (name, pts) in enumerate(sorted(series.items())):
        color = palette[i % len(palette)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
        parts.append(
            f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>'
        )
        parts.append(
            f'<text x="{width - margin + 4}" y="{margin + 16 * i + 4:.1f}" fill="{color}" '
            f'font-family="sans-serif" font-size="11">{name}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _svg_bar_chart(values: dict[str, float], title: str,
                   width: int = 480, height: int = 320) -> str:
    margin = 50.0
    names = list(values)
    top = max(1.0, max(values.values(), default=1.0))
    slot = (width - 2 * margin) / max(1, len(names))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">{title}</text>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
    ]
    for i, name in enumerate(names):
        v = values[name]
        bar_h = max(0.0, v / top) * (height - 2 * margin)
        x = margin + i * slot + slot * 0.15
        y = height - margin - bar_h
        parts.append(
            f'<rect x="{x:.2f}" y="{y:.2f}" width="{slot * 0.7:.2f}" '
            f'height="{bar_h:.2f}" fill="#1f77b4"/>'
        )
        parts.append(
            f'<text x="{x + slot * 0.35:.2f}" y="{height - margin + 16:.1f}" '
            f'text-anchor="middle" font-family="sans-serif" font-size="11">{name}</text>'
        )
        parts.append(
            f'<text x="{x + slot * 0.35:.2f}" y="{y - 4:.2f}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="11">{v:.3f}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def stage_report(cfg: RunConfig, run: RunDir) -> list[str]:
    """Render loss curves and the kappa table to CSV and SVG."""
    from .metrics import parse_metrics_report

    _log_config(cfg, run)
    written = []
    series: dict[str, list[tuple[float, float]]] = {}
    for log_name in ("gcn_small", "gcn_large", "baseline", "pretrain"):
        log_path = run.path("logs", f"{log_name}.log")
        if not os.path.exists(log_path):
            continue
        records = _read_history_log(log_path)
        csv_path = run.ensure("report", f"loss_{log_name}.csv")
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write("epoch,mean_loss,lr\n")
            for epoch, loss, lr in records:
                lr_text = "" if lr != lr else f"{lr:.10g}"
                fh.write(f"{epoch},{loss:.10g},{lr_text}\n")
        written.append(csv_path)
        series[log_name] = [(float(e), l) for e, l, _ in records]
    if series:
        svg_path = run.ensure("report", "loss_curves.svg")
        with open(svg_path, "w", encoding="utf-8") as fh:
            fh.write(_svg_line_chart(series, "training loss by epoch"))
        written.append(svg_path)

    metrics_path = run.path("report", "metrics.txt")
    if os.path.exists(metrics_path):
        with open(metrics_path, "r", encoding="utf-8") as fh:
            models = parse_metrics_report(fh.read())
        kappa_csv = run.ensure("report", "kappa.csv")
        with open(kappa_csv, "w", encoding="utf-8") as fh:
            fh.write("model,kappa,accuracy\n")
            for name in sorted(models):
                fh.write(
                    f"{name},{models[name]['kappa']:.6f},{models[name]['accuracy']:.6f}\n"
                )
        written.append(kappa_csv)
        svg_path = run.ensure("report", "kappa.svg")
        with open(svg_path, "w", encoding="utf-8") as fh:
            fh.write(_svg_bar_chart(
                {name: models[name]["kappa"] for name in sorted(models)},
                "validation quadratic weighted kappa",
            ))
        written.append(svg_path)
    return written
