"""Retrieval metrics, word-to-patch heat maps and ranked-result reports."""

from __future__ import annotations

import base64
import html
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from ivt.image import bilinear_resize, to_uint8
from ivt.text import UNK, Vocab, normalize_tokens, tokenize


class EvaluationError(ValueError):
    pass


@dataclass
class SimilarityMatrix:
    scores: np.ndarray  # [Q, G]
    query_labels: np.ndarray
    gallery_labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.query_labels = np.asarray(self.query_labels)
        self.gallery_labels = np.asarray(self.gallery_labels)
        q, g = self.scores.shape
        if len(self.query_labels) != q or len(self.gallery_labels) != g:
            raise EvaluationError("label arrays must match the score matrix axes")
        if not np.all(np.isfinite(self.scores)):
            raise EvaluationError("similarity scores must be finite")

    @property
    def shape(self) -> tuple[int, int]:
        return self.scores.shape


def similarity_matrix(text_features, image_features, query_labels=None, gallery_labels=None, metric: str = "cosine") -> SimilarityMatrix:
    t = torch.as_tensor(text_features, dtype=torch.float64)
    v = torch.as_tensor(image_features, dtype=torch.float64)
    if t.shape[-1] != v.shape[-1]:
        raise EvaluationError(f"feature dimension mismatch: {t.shape[-1]} vs {v.shape[-1]}")
    if metric == "cosine":
        t, v = F.normalize(t, dim=-1), F.normalize(v, dim=-1)
    elif metric != "dot":
        raise EvaluationError(f"unknown metric {metric!r}")
    scores = (t @ v.T).numpy()
    q_labels = np.arange(len(t)) if query_labels is None else query_labels
    g_labels = np.arange(len(v)) if gallery_labels is None else gallery_labels
    return SimilarityMatrix(scores, q_labels, g_labels)


def ranking(scores: np.ndarray) -> np.ndarray:
    """Gallery order per query: descending score, ties by ascending gallery index."""
    return np.argsort(-scores, axis=1, kind="stable")


def _matches(sim: SimilarityMatrix) -> np.ndarray:
    present = np.isin(sim.query_labels, sim.gallery_labels)
    if not present.all():
        bad = np.flatnonzero(~present).tolist()
        raise EvaluationError(f"query labels absent from gallery for queries {bad}")
    order = ranking(sim.scores)
    return sim.gallery_labels[order] == sim.query_labels[:, None]


def cmc(sim: SimilarityMatrix, ks: Sequence[int] = (1, 5, 10)) -> dict[int, float]:
    matches = _matches(sim)
    first_hit = matches.argmax(axis=1)  # 0-based rank of the first correct item
    return {k: float(np.mean(first_hit < k)) for k in ks}


def average_precisions(sim: SimilarityMatrix) -> np.ndarray:
    matches = _matches(sim).astype(np.float64)
    hits = np.cumsum(matches, axis=1)
    ranks = np.arange(1, matches.shape[1] + 1)
    # cumsum adds in rank order, so results do not depend on numpy's pairwise summation
    return np.cumsum(hits / ranks * matches, axis=1)[:, -1] / hits[:, -1]


def mean_average_precision(sim: SimilarityMatrix) -> float:
    aps = average_precisions(sim)
    return float(np.cumsum(aps)[-1] / len(aps))


def retrieval_metrics(sim: SimilarityMatrix, ks: Sequence[int] = (1, 5, 10)) -> dict:
    rates = cmc(sim, ks)
    out = {f"R{k}": rates[k] for k in ks}
    out.update(mAP=mean_average_precision(sim), Q=int(sim.shape[0]), G=int(sim.shape[1]))
    return out


# -- encoding helpers ---------------------------------------------------------


@torch.no_grad()
def encode_images(model, images: np.ndarray, batch_size: int = 256) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    out = [model.encode_image(torch.from_numpy(np.ascontiguousarray(images[i : i + batch_size])).to(dtype))
           for i in range(0, len(images), batch_size)]
    return torch.cat(out) if out else torch.empty(0, model.config.width, dtype=dtype)


@torch.no_grad()
def encode_texts(model, vocab: Vocab, texts: Sequence[str], batch_size: int = 256) -> torch.Tensor:
    n = model.config.max_text_len
    ids = torch.tensor([tokenize(t, vocab, n).ids for t in texts], dtype=torch.long).reshape(-1, n)
    out = [model.encode_text(ids[i : i + batch_size]) for i in range(0, len(ids), batch_size)]
    dtype = next(model.parameters()).dtype
    return torch.cat(out) if out else torch.empty(0, model.config.width, dtype=dtype)


def split_similarity(model, vocab: Vocab, split, metric: str = "cosine") -> tuple[SimilarityMatrix, list[str], np.ndarray, list[str]]:
    was_training = model.training
    model.eval()
    captions, q_labels = split.queries()
    images, g_labels, keys = split.gallery()
    sim = similarity_matrix(encode_texts(model, vocab, captions), encode_images(model, images), q_labels, g_labels, metric)
    model.train(was_training)
    return sim, captions, images, keys


def evaluate_split(model, vocab: Vocab, split, metric: str = "cosine", ks: Sequence[int] = (1, 5, 10)) -> dict:
    sim, *_ = split_similarity(model, vocab, split, metric)
    return retrieval_metrics(sim, ks)


# -- heat maps ----------------------------------------------------------------


@dataclass
class HeatMap:
    grid: np.ndarray  # [H/P, W/P], values in [0, 1]
    vmin: float
    vmax: float
    word: str
    unknown: bool = False

    def to_dict(self) -> dict:
        return {"word": self.word, "unknown": self.unknown, "min": self.vmin, "max": self.vmax, "grid": self.grid.tolist()}


def minmax_normalize(values: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Scale to [0, 1]; a constant field maps to all zeros."""
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return np.zeros_like(values, dtype=np.float64), lo, hi
    return (values - lo) / (hi - lo), lo, hi


def heatmap_from_scores(scores: np.ndarray, grid_shape: tuple[int, int], word: str = "", unknown: bool = False) -> HeatMap:
    grid, lo, hi = minmax_normalize(np.asarray(scores, dtype=np.float64).reshape(grid_shape))
    return HeatMap(grid, lo, hi, word, unknown)


@torch.no_grad()
def word_heatmap(caption_word: str, image: np.ndarray, model, vocab: Vocab, metric: str = "cosine") -> HeatMap:
    """Similarity of the word's text class feature to every final-LN patch state."""
    cfg = model.config
    seq = tokenize(caption_word, vocab, cfg.max_text_len)
    unknown = any(vocab.lookup(w) == UNK for w in normalize_tokens(caption_word))
    dtype = next(model.parameters()).dtype
    text = model.encode_text(torch.tensor([seq.ids]))[0]
    patches = model.image_tokens(torch.from_numpy(np.ascontiguousarray(image))[None].to(dtype))[0, 1:]
    if metric == "cosine":
        scores = F.normalize(patches, dim=-1) @ F.normalize(text, dim=-1)
    else:
        scores = patches @ text
    return heatmap_from_scores(scores.double().numpy(), cfg.grid, caption_word, unknown)


def overlay(image: np.ndarray, heat: HeatMap, alpha: float = 0.5) -> np.ndarray:
    h, w = image.shape[:2]
    up = bilinear_resize(np.repeat(heat.grid[..., None], 3, axis=2).astype(np.float32), h, w)[..., 0]
    tint = np.stack([up, np.zeros_like(up), 1.0 - up], axis=-1)
    return np.clip((1 - alpha) * image + alpha * tint, 0.0, 1.0)


def save_heatmaps(out_dir: str | Path, items: list[tuple[str, np.ndarray, HeatMap]]) -> None:
    """``items`` are (name, image, heat map); writes ``<name>.png`` overlays and ``heatmap.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grids = {}
    for name, image, heat in items:
        Image.fromarray(to_uint8(overlay(image, heat))).save(out / f"{name}.png")
        grids[name] = heat.to_dict()
    (out / "heatmap.json").write_text(json.dumps(grids, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# -- rank report --------------------------------------------------------------


def _thumbnail(image: np.ndarray, scale: int = 3) -> str:
    im = Image.fromarray(to_uint8(image))
    im = im.resize((im.width * scale, im.height * scale), Image.NEAREST)
    buf = io.BytesIO()
    im.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def rank_report(
    sim: SimilarityMatrix,
    captions: Sequence[str],
    gallery_keys: Sequence[str],
    k: int = 5,
    gallery_images: np.ndarray | None = None,
    out_dir: str | Path | None = None,
) -> dict:
    if k < 1:
        raise EvaluationError("k must be >= 1")
    k = min(k, sim.shape[1])
    order = ranking(sim.scores)[:, :k]
    queries = []
    for qi, row in enumerate(order):
        entries = [
            {"rank": r + 1, "gallery_index": int(g), "key": gallery_keys[g], "score": float(sim.scores[qi, g]),
             "correct": bool(sim.gallery_labels[g] == sim.query_labels[qi])}
            for r, g in enumerate(row)
        ]
        queries.append({"query_index": qi, "caption": captions[qi], "label": int(sim.query_labels[qi]), "results": entries})
    report = {"k": k, "Q": int(sim.shape[0]), "G": int(sim.shape[1]), "queries": queries}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report, indent=1) + "\n", encoding="utf-8")
        (out / "report.html").write_text(_report_html(report, gallery_images), encoding="utf-8")
    return report


def _report_html(report: dict, images: np.ndarray | None) -> str:
    rows = []
    for q in report["queries"]:
        cells = []
        for e in q["results"]:
            color = "#2a2" if e["correct"] else "#d22"
            if images is not None:
                body = f'<img src="data:image/png;base64,{_thumbnail(images[e["gallery_index"]])}">'
            else:
                body = html.escape(e["key"])
            cells.append(f'<td style="border:3px solid {color}">{body}<br>{e["score"]:.3f}</td>')
        rows.append(f"<tr><td>{html.escape(q['caption'])}</td>{''.join(cells)}</tr>")
    return (
        "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>rank report</title></head><body>\n"
        f"<p>top-{report['k']} results; green = correct identity, red = wrong</p>\n"
        "<table>\n" + "\n".join(rows) + "\n</table></body></html>\n"
    )
