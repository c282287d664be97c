"""End-to-end runs built from a RunConfig: train, evaluate, probe, ablate, time."""

from __future__ import annotations

import csv
import json
import logging
import time
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from ivt.checkpoint import Checkpoint
from ivt.config import RunConfig, config_hash, version_string
from ivt.dataset import BAND_SLOTS, SLOTS, Corpus, DatasetSplit, generate_corpus, load_corpus, oracle_similarity
from ivt.evaluation import (
    SimilarityMatrix,
    encode_images,
    encode_texts,
    rank_report,
    ranking,
    retrieval_metrics,
    save_heatmaps,
    similarity_matrix,
    split_similarity,
    word_heatmap,
)
from ivt.training import TrainState, load_model, train

log = logging.getLogger(__name__)


def load_data(cfg: RunConfig) -> Corpus:
    if cfg["data.corpus_dir"]:
        return load_corpus(cfg["data.corpus_dir"])
    return generate_corpus(
        n_identities=cfg["data.n_identities"],
        images_per_id=cfg["data.images_per_id"],
        captions_per_image=cfg["data.captions_per_image"],
        image_size=(cfg["model.image_height"], cfg["model.image_width"]),
        seed=cfg.data_seed,
    )


def write_provenance(out_dir: Path, cfg: RunConfig) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump(out_dir / "config.resolved.yaml")
    (out_dir / "VERSION").write_text(version_string() + "\n", encoding="utf-8")


def run_training(
    cfg: RunConfig,
    corpus: Corpus | None = None,
    resume: str | Path | None = None,
    stop_at: int | None = None,
    write: bool = True,
) -> TrainState:
    corpus = corpus or load_data(cfg)
    out = Path(cfg["output_dir"]) if write else None
    if out is not None:
        write_provenance(out, cfg)
    ckpt = Checkpoint.load(resume) if resume else None
    return train(
        cfg.model_config(),
        cfg.train_config(),
        cfg.alignment_config(),
        corpus.split("train"),
        out_dir=out,
        resume=ckpt,
        eval_split=corpus.split("val"),
        stop_at=stop_at,
    )


def evaluate_model(model, vocab, split: DatasetSplit, metric: str = "cosine", ks: Sequence[int] = (1, 5, 10)):
    sim, captions, images, keys = split_similarity(model, vocab, split, metric)
    return retrieval_metrics(sim, ks), sim, captions, images, keys


def oracle_split_similarity(corpus: Corpus, split: DatasetSplit) -> SimilarityMatrix:
    """Ground-truth attribute-count similarity (synthetic corpora only)."""
    captions, q_labels = split.queries()
    _, g_labels, _ = split.gallery()
    ident = split.identity_of()
    specs = [corpus.ground_truth[ident[int(l)]] for l in g_labels]
    return SimilarityMatrix(oracle_similarity(captions, specs), q_labels, g_labels)


def evaluate_checkpoint(
    checkpoint: str | Path | None,
    corpus: Corpus,
    split_name: str = "test",
    out_dir: str | Path | None = None,
    metric: str = "cosine",
    ks: Sequence[int] = (1, 5, 10),
    report_k: int = 5,
    oracle: bool = False,
) -> dict:
    split = corpus.split(split_name)
    captions, _ = split.queries()
    images, _, keys = split.gallery()
    if oracle:
        sim = oracle_split_similarity(corpus, split)
        cfg_blob = {"oracle": True, "split": split_name}
    else:
        ckpt = Checkpoint.load(checkpoint)
        model, vocab = load_model(ckpt)
        model.eval()
        sim, captions, images, keys = split_similarity(model, vocab, split, metric)
        cfg_blob = {**ckpt.config, "metric": metric, "split": split_name}
    metrics = retrieval_metrics(sim, ks)
    metrics["config_hash"] = config_hash(cfg_blob)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        rank_report(sim, captions, keys, report_k, images, out)
    return metrics


# -- heat-map probes ------------------------------------------------------------


def band_patch_rows(slot: str, grid_rows: int) -> list[int]:
    """Patch rows covered by a band's nominal extent (bands are quarters of the height)."""
    k = BAND_SLOTS.index(slot)
    lo, hi = k * grid_rows / 4, (k + 1) * grid_rows / 4
    return [r for r in range(grid_rows) if lo <= r < hi] or [int(lo)]


def heatmap_probes(model, vocab, corpus: Corpus, split: DatasetSplit, metric: str = "cosine", limit: int | None = None):
    """One probe per (gallery image, band slot with a color unique in that image).

    Each probe records the mean normalized heat inside the slot's patch rows
    and outside them.
    """
    images, labels, keys = split.gallery()
    ident = split.identity_of()
    rows = model.config.grid[0]
    probes = []
    for img, lab, key in zip(images, labels, keys):
        spec = corpus.ground_truth[ident[int(lab)]]
        colors = [getattr(spec, s) for s in SLOTS]
        for slot in BAND_SLOTS:
            color = getattr(spec, slot)
            if colors.count(color) != 1:
                continue
            heat = word_heatmap(color, img, model, vocab, metric)
            inside_rows = band_patch_rows(slot, rows)
            mask = np.zeros(heat.grid.shape, dtype=bool)
            mask[inside_rows] = True
            probes.append({
                "key": key, "slot": slot, "word": color, "heat": heat, "image": img,
                "inside": float(heat.grid[mask].mean()), "outside": float(heat.grid[~mask].mean()),
            })
            if limit is not None and len(probes) >= limit:
                return probes
    return probes


def write_heatmaps(probes, out_dir: str | Path) -> None:
    items = [(f"{Path(p['key']).stem}_{p['slot']}_{p['word']}", p["image"], p["heat"]) for p in probes]
    save_heatmaps(out_dir, items)


# -- ablation -------------------------------------------------------------------


def ablate_mask_ratio(cfg: RunConfig, ratios: Sequence[float], seeds: Sequence[int], out_dir: str | Path) -> list[dict]:
    """Train one model per (ratio, seed) with BMM on, report mean test R1/mAP per ratio."""
    for r in ratios:
        if not 0.0 <= r < 1.0:
            raise ValueError(f"mask ratio {r} outside [0, 1)")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for ratio in sorted(ratios):
        r1s, maps = [], []
        for seed in seeds:
            run_cfg = cfg.replace(bmm__enabled=True, bmm__ratio=float(ratio), train__seed=int(seed),
                                  output_dir=str(out / f"ratio_{ratio:g}_seed_{seed}"))
            corpus = load_data(run_cfg)
            state = run_training(run_cfg, corpus)
            metrics, *_ = evaluate_model(state.model, state.vocab, corpus.split("test"), run_cfg["eval.metric"])
            r1s.append(metrics["R1"])
            maps.append(metrics["mAP"])
        rows.append({"ratio": float(ratio), "R1": float(np.mean(r1s)), "mAP": float(np.mean(maps))})
    write_ablation(rows, out)
    return rows


def write_ablation(rows: list[dict], out: Path) -> None:
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=["ratio", "R1", "mAP"])
        writer.writeheader()
        writer.writerows(rows)
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    ratios = [r["ratio"] for r in rows]
    ax.plot(ratios, [r["R1"] for r in rows], marker="o", label="R1")
    ax.plot(ratios, [r["mAP"] for r in rows], marker="s", label="mAP")
    ax.set_xlabel("masking ratio")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "ablation.png", dpi=100)
    plt.close(fig)


# -- timing ---------------------------------------------------------------------


def time_retrieval(checkpoint: str | Path, gallery_size: int, num_queries: int = 100, seed: int = 0, repeats: int = 1) -> dict:
    """Wall-clock of the three retrieval phases on random inputs (best of ``repeats``)."""
    if gallery_size <= 0:
        raise ValueError("gallery_size must be positive")
    model, vocab = load_model(Checkpoint.load(checkpoint))
    model.eval()
    cfg = model.config
    rng = np.random.default_rng(seed)
    gallery = rng.random((gallery_size, cfg.image_height, cfg.image_width, 3), dtype=np.float32)
    words = vocab.tokens[5:] or ["person"]
    queries = [" ".join(rng.choice(words, size=8)) for _ in range(num_queries)]

    def best(fn):
        times, out = [], None
        for _ in range(repeats):
            t0 = time.perf_counter()
            out = fn()
            times.append(time.perf_counter() - t0)
        return min(times), out

    with torch.no_grad():
        t_gallery, g_feat = best(lambda: encode_images(model, gallery))
        t_queries, q_feat = best(lambda: encode_texts(model, vocab, queries))
        t_rank, _ = best(lambda: ranking(similarity_matrix(q_feat, g_feat).scores))
    return {
        "gallery_size": gallery_size,
        "num_queries": num_queries,
        "encode_gallery_s": t_gallery,
        "encode_queries_s": t_queries,
        "similarity_rank_s": t_rank,
    }
