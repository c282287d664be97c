"""Synthetic attribute corpus and CUHK-PEDES style annotation loader.

Synthetic identities are assignments of colors to five slots (hair, top,
bottom, shoes, optional bag). Images render the slots as horizontal bands
plus a bag square; captions are filled templates over the same slots, so the
ground-truth word/region alignment is known exactly.
"""

from __future__ import annotations

import json
import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ivt.image import read_png, to_uint8, write_png
from ivt.text import COLORS, normalize_tokens

log = logging.getLogger(__name__)

SLOTS = ("hair", "top", "bottom", "shoes", "bag")
BAND_SLOTS = SLOTS[:4]
SPLIT_FRACTIONS = {"train": 0.7, "val": 0.1, "test": 0.2}

RGB = {
    "red": (0.85, 0.1, 0.1),
    "orange": (0.95, 0.55, 0.1),
    "yellow": (0.95, 0.9, 0.15),
    "green": (0.15, 0.7, 0.2),
    "blue": (0.1, 0.25, 0.85),
    "purple": (0.55, 0.15, 0.7),
    "black": (0.05, 0.05, 0.05),
    "white": (0.95, 0.95, 0.95),
}

SLOT_NOUNS = {
    "hair": ("hair",),
    "top": ("top", "shirt", "jacket", "coat"),
    "bottom": ("pants", "trousers", "shorts", "skirt"),
    "shoes": ("shoes", "sneakers", "boots"),
    "bag": ("bag", "backpack", "handbag"),
}
NOUN_TO_SLOT = {n: slot for slot, nouns in SLOT_NOUNS.items() for n in nouns}

TEMPLATES = (
    ("{hair} hair, {top} {top_n}, {bottom} {bottom_n}, {shoes} {shoes_n}", ", {bag} {bag_n}"),
    ("person with {hair} hair, wearing {top} {top_n} and {bottom} {bottom_n}, {shoes} {shoes_n}", ", {bag} {bag_n}"),
    ("a {top} {top_n}, {bottom} {bottom_n} and {shoes} {shoes_n}. {hair} hair", ". carries a {bag} {bag_n}"),
)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class AttributeSpec:
    hair: str
    top: str
    bottom: str
    shoes: str
    bag: str | None = None

    def __post_init__(self):
        for slot in SLOTS:
            color = getattr(self, slot)
            if color is None and slot == "bag":
                continue
            if color not in COLORS:
                raise DatasetError(f"unknown color {color!r} for slot {slot}")

    @property
    def identity(self) -> int:
        code = 0
        for slot in BAND_SLOTS:
            code = code * len(COLORS) + COLORS.index(getattr(self, slot))
        return code * (len(COLORS) + 1) + (0 if self.bag is None else COLORS.index(self.bag) + 1)

    @classmethod
    def from_identity(cls, code: int) -> "AttributeSpec":
        n = len(COLORS)
        code, bag = divmod(code, n + 1)
        colors = []
        for _ in BAND_SLOTS:
            code, c = divmod(code, n)
            colors.append(COLORS[c])
        return cls(*reversed(colors), bag=None if bag == 0 else COLORS[bag - 1])

    def to_dict(self) -> dict:
        return asdict(self)


NUM_IDENTITIES = len(COLORS) ** 4 * (len(COLORS) + 1)


@dataclass
class ImageTextPair:
    image: np.ndarray
    caption: str
    label: int
    image_key: str
    identity: int | None = None


@dataclass
class LoadReport:
    missing_files: list[str] = field(default_factory=list)
    skipped_records: list[int] = field(default_factory=list)


@dataclass
class DatasetSplit:
    pairs: list[ImageTextPair]
    split: str
    report: LoadReport = field(default_factory=LoadReport)

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def identities(self) -> set[int]:
        return {p.label for p in self.pairs}

    def identity_of(self) -> dict[int, int]:
        """Contiguous label -> original record id."""
        return {p.label: p.identity for p in self.pairs}

    def gallery(self) -> tuple[np.ndarray, np.ndarray, list[str]]:
        """Unique images in first-appearance order with their labels and keys."""
        seen: OrderedDict[str, ImageTextPair] = OrderedDict()
        for p in self.pairs:
            seen.setdefault(p.image_key, p)
        items = list(seen.values())
        return (
            np.stack([p.image for p in items]),
            np.array([p.label for p in items], dtype=np.int64),
            [p.image_key for p in items],
        )

    def queries(self) -> tuple[list[str], np.ndarray]:
        return [p.caption for p in self.pairs], np.array([p.label for p in self.pairs], dtype=np.int64)


# -- rendering --------------------------------------------------------------


def band_rows(height: int, jitter: np.ndarray | None = None) -> list[tuple[int, int]]:
    """Row ranges [start, stop) of the four bands; boundaries shift by ``jitter`` pixels."""
    bounds = [0]
    for k in range(1, 4):
        b = int(round(k * height / 4)) + (0 if jitter is None else int(jitter[k - 1]))
        bounds.append(min(max(b, bounds[-1] + 1), height - (4 - k)))
    bounds.append(height)
    return [(bounds[i], bounds[i + 1]) for i in range(4)]


def bag_box(height: int, width: int) -> tuple[int, int, int, int]:
    side = max(2, width // 3)
    top = height // 2 - side // 2
    left = width - side - 1
    return top, top + side, left, left + side


def render_image(spec: AttributeSpec, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    jitter = rng.integers(-1, 2, size=3)
    img = np.zeros((height, width, 3), dtype=np.float64)
    for slot, (r0, r1) in zip(BAND_SLOTS, band_rows(height, jitter)):
        img[r0:r1] = RGB[getattr(spec, slot)]
    if spec.bag is not None:
        t, b, l, r = bag_box(height, width)
        img[t:b, l:r] = RGB[spec.bag]
    img += rng.normal(0.0, 0.02, size=img.shape)
    return to_uint8(np.clip(img, 0.0, 1.0)).astype(np.float32) / 255.0


def render_caption(spec: AttributeSpec, rng: np.random.Generator) -> str:
    """The draw sequence depends only on ``rng``, never on the colors."""
    template, bag_clause = TEMPLATES[int(rng.integers(len(TEMPLATES)))]
    nouns = {f"{slot}_n": SLOT_NOUNS[slot][int(rng.integers(len(SLOT_NOUNS[slot])))] for slot in SLOTS}
    values = {**spec.to_dict(), **nouns}
    text = template.format(**values)
    if spec.bag is not None:
        text += bag_clause.format(**values)
    return text + "."


def parse_caption(caption: str) -> dict[str, str]:
    """Slot -> color for every "<color> <noun>" pair in a caption."""
    toks = normalize_tokens(caption)
    out = {}
    for a, b in zip(toks, toks[1:]):
        if a in COLORS and b in NOUN_TO_SLOT:
            out[NOUN_TO_SLOT[b]] = a
    return out


def oracle_score(caption: str, spec: AttributeSpec) -> int:
    """Number of slots on which caption and spec agree; an unmentioned bag matches a bagless spec."""
    said = parse_caption(caption)
    score = sum(said.get(slot) == getattr(spec, slot) for slot in BAND_SLOTS)
    return score + (said.get("bag") == spec.bag)


def oracle_similarity(captions: list[str], specs: list[AttributeSpec]) -> np.ndarray:
    return np.array([[oracle_score(c, s) for s in specs] for c in captions], dtype=np.float64)


# -- corpus -----------------------------------------------------------------


@dataclass
class Corpus:
    records: list[dict]
    images: dict[str, np.ndarray]
    ground_truth: dict[int, AttributeSpec]

    def split(self, name: str) -> DatasetSplit:
        return build_split(self.records, self.images.get, split=name)

    @property
    def splits(self) -> dict[str, DatasetSplit]:
        return {name: self.split(name) for name in SPLIT_FRACTIONS}

    def save(self, root: str | Path) -> None:
        root = Path(root)
        (root / "images").mkdir(parents=True, exist_ok=True)
        for path, img in self.images.items():
            write_png(root / path, img)
        (root / "annotations.json").write_text(json.dumps(self.records, indent=1) + "\n", encoding="utf-8")
        gt = {str(k): v.to_dict() for k, v in self.ground_truth.items()}
        (root / "ground_truth.json").write_text(json.dumps(gt, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def split_counts(n: int) -> dict[str, int]:
    n_test = max(1, int(round(n * SPLIT_FRACTIONS["test"])))
    n_val = max(1, int(round(n * SPLIT_FRACTIONS["val"])))
    return {"train": n - n_test - n_val, "val": n_val, "test": n_test}


def generate_corpus(
    n_identities: int = 64,
    images_per_id: int = 4,
    captions_per_image: int = 2,
    image_size: tuple[int, int] = (32, 16),
    seed: int = 0,
) -> Corpus:
    if n_identities < 4:
        raise DatasetError("n_identities ≥ 4")
    if n_identities > NUM_IDENTITIES:
        raise DatasetError(f"n_identities must be at most {NUM_IDENTITIES}")
    if images_per_id < 2:
        raise DatasetError("images_per_id ≥ 2")
    if captions_per_image < 1:
        raise DatasetError("captions_per_image ≥ 1")
    height, width = image_size
    if height < 8 or width < 4:
        raise DatasetError("image_size must be at least 8x4")

    rng = np.random.default_rng(seed)
    codes = rng.choice(NUM_IDENTITIES, size=n_identities, replace=False)
    order = rng.permutation(n_identities)
    counts = split_counts(n_identities)
    split_of = {}
    start = 0
    for name in ("train", "val", "test"):
        for i in order[start : start + counts[name]]:
            split_of[int(codes[i])] = name
        start += counts[name]

    records, images, truth = [], {}, {}
    for code in (int(c) for c in codes):
        spec = AttributeSpec.from_identity(code)
        truth[code] = spec
        for k in range(images_per_id):
            path = f"images/{code}_{k}.png"
            images[path] = render_image(spec, height, width, rng)
            captions = [render_caption(spec, rng) for _ in range(captions_per_image)]
            records.append({"file_path": path, "id": code, "captions": captions, "split": split_of[code]})
    return Corpus(records, images, truth)


# -- loading ----------------------------------------------------------------

REQUIRED_KEYS = ("file_path", "id", "captions", "split")


def read_annotations(path: str | Path) -> list[dict]:
    try:
        records = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DatasetError(f"malformed JSON in {path}: {e}") from e
    if not isinstance(records, list):
        raise DatasetError(f"{path} must hold a JSON array of records")
    for i, rec in enumerate(records):
        if not isinstance(rec, dict):
            raise DatasetError(f"record {i} is not an object")
        missing = [k for k in REQUIRED_KEYS if k not in rec]
        if missing:
            raise DatasetError(f"record {i} is missing keys {missing}")
        if not isinstance(rec["captions"], list):
            raise DatasetError(f"record {i}: captions must be a list")
    return records


def build_split(records: list[dict], image_lookup, split: str | None = None) -> DatasetSplit:
    """Fan records out into (image, caption) pairs; ids become contiguous labels.

    ``image_lookup(file_path)`` returns a raster or None when the file is missing.
    """
    report = LoadReport()
    kept = []
    for i, rec in enumerate(records):
        if split is not None and rec["split"] != split:
            continue
        if not rec["captions"]:
            report.skipped_records.append(i)
            continue
        image = image_lookup(rec["file_path"])
        if image is None:
            report.missing_files.append(rec["file_path"])
            report.skipped_records.append(i)
            continue
        kept.append((rec, image))
    id_map = {orig: new for new, orig in enumerate(sorted({r["id"] for r, _ in kept}))}
    pairs = []
    for rec, image in kept:
        for caption in rec["captions"]:
            pairs.append(ImageTextPair(image, caption, id_map[rec["id"]], rec["file_path"], rec["id"]))
    return DatasetSplit(pairs, split or "all", report)


def load_external(root_path: str | Path, split: str | None = None, schema: str = "cuhk_pedes_json") -> DatasetSplit:
    if schema != "cuhk_pedes_json":
        raise DatasetError(f"unsupported schema {schema!r}")
    root = Path(root_path)
    records = read_annotations(root / "annotations.json")
    cache: dict[str, np.ndarray | None] = {}

    def lookup(rel: str):
        if rel not in cache:
            path = root / rel
            cache[rel] = read_png(path) if path.exists() else None
        return cache[rel]

    out = build_split(records, lookup, split)
    if out.report.missing_files:
        log.warning("%d image files missing under %s", len(out.report.missing_files), root)
    return out


def load_ground_truth(root_path: str | Path) -> dict[int, AttributeSpec]:
    data = json.loads((Path(root_path) / "ground_truth.json").read_text(encoding="utf-8"))
    return {int(k): AttributeSpec(**v) for k, v in data.items()}


def load_corpus(root_path: str | Path) -> Corpus:
    """Load a generated corpus directory back into memory."""
    root = Path(root_path)
    records = read_annotations(root / "annotations.json")
    images = {r["file_path"]: read_png(root / r["file_path"]) for r in records if (root / r["file_path"]).exists()}
    truth = load_ground_truth(root) if (root / "ground_truth.json").exists() else {}
    return Corpus(records, images, truth)
