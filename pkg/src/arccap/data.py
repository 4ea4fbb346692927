"""Dataset ingestion: COCO captions, region files, vocabulary, splits, region graphs."""

from collections import Counter
from dataclasses import dataclass, field
import json
import math
import os
import string
import tempfile

import numpy as np

from .errors import ReferentialError, SchemaError, ValidationError

PAD, START, END, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<start>", "<end>", "<unk>")

_PUNCT = str.maketrans("", "", string.punctuation)


def tokenize(caption):
    """Lowercase, drop ASCII punctuation, split on whitespace."""
    return caption.lower().translate(_PUNCT).split()


def detokenize(tokens):
    return " ".join(tokens)


# -- COCO -------------------------------------------------------------------

@dataclass
class Dataset:
    captions: dict          # image id -> list of caption strings, annotation-id order
    annotation_ids: dict    # image id -> list of annotation ids
    file_names: dict = field(default_factory=dict)
    sizes: dict = field(default_factory=dict)   # image id -> (width, height) when known

    @property
    def image_ids(self):
        return sorted(self.captions)


def _require(obj, key, path):
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaError(f"missing field '{key}'", path)
    return obj[key]


def load_coco(document):
    """Group COCO caption annotations by image.

    ``document`` is a parsed JSON object (or a path to one) with ``images``
    and ``annotations`` arrays. Captions are ordered by annotation id so the
    result does not depend on annotation order.
    """
    if isinstance(document, (str, os.PathLike)):
        document = read_json(document)
    images = _require(document, "images", "$")
    annotations = _require(document, "annotations", "$")
    if not isinstance(images, list):
        raise SchemaError("expected an array", "$.images")
    if not isinstance(annotations, list):
        raise SchemaError("expected an array", "$.annotations")

    ds = Dataset({}, {})
    for k, img in enumerate(images):
        path = f"$.images[{k}]"
        iid = _require(img, "id", path)
        ds.file_names[iid] = _require(img, "file_name", path)
        if "width" in img and "height" in img:
            ds.sizes[iid] = (float(img["width"]), float(img["height"]))
        ds.captions[iid] = []
        ds.annotation_ids[iid] = []

    pending = {}
    for k, ann in enumerate(annotations):
        path = f"$.annotations[{k}]"
        aid = _require(ann, "id", path)
        iid = _require(ann, "image_id", path)
        caption = _require(ann, "caption", path)
        if iid not in ds.captions:
            raise ReferentialError(f"{path}.image_id: unknown image id {iid!r}")
        pending.setdefault(iid, []).append((aid, caption))
    for iid, items in pending.items():
        items.sort(key=lambda item: item[0])
        ds.annotation_ids[iid] = [a for a, _ in items]
        ds.captions[iid] = [c for _, c in items]
    return ds


# -- vocabulary ---------------------------------------------------------------

@dataclass
class Vocab:
    tokens: list            # id -> token, specials first
    min_count: int = 5

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIALS:
            raise ValidationError("vocabulary must start with the four special tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValidationError("vocabulary tokens must be unique")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def encode(self, tokens):
        return [self.index.get(t, UNK) for t in tokens]

    def decode(self, ids):
        words = []
        for i in ids:
            if i == END:
                break
            if i in (PAD, START):
                continue
            words.append(self.tokens[i])
        return words

    def to_json(self):
        return {"tokens": self.tokens[4:], "min_count": self.min_count}

    @classmethod
    def from_json(cls, obj):
        return cls(list(SPECIALS) + list(obj["tokens"]), obj.get("min_count", 5))


def build_vocab(captions, min_count=5):
    """Vocabulary over tokenized captions; frequent tokens first, ties alphabetical."""
    if min_count < 1:
        raise ValidationError("min_count must be at least 1")
    counts = Counter()
    for cap in captions:
        counts.update(tokenize(cap) if isinstance(cap, str) else cap)
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in SPECIALS),
                  key=lambda t: (-counts[t], t))
    return Vocab(list(SPECIALS) + kept, min_count)


# -- splits -------------------------------------------------------------------

@dataclass
class SplitSpec:
    train: list
    val: list
    test: list

    def sizes(self):
        return len(self.train), len(self.val), len(self.test)

    def to_json(self):
        return {"train": self.train, "val": self.val, "test": self.test}


def _check_disjoint(parts):
    seen = {}
    for name, ids in parts.items():
        for iid in ids:
            if iid in seen:
                raise ValidationError(f"image id {iid!r} appears in both {seen[iid]} and {name}")
            seen[iid] = name
    return seen


def split(dataset, source=None, ratios=(0.8, 0.1, 0.1), seed=0):
    """Partition image ids into train/val/test.

    ``source`` may be an explicit split document (``{"train": [...], "val":
    [...], "test": [...]}``), a Karpathy-style ``dataset_coco.json`` whose
    images carry ``cocoid`` and ``split`` (``restval`` folds into train), or
    None for a seeded ratio split.
    """
    ids = dataset.image_ids
    if source is None:
        if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0):
            raise ValidationError(f"split ratios must be three non-negative values summing to 1, got {ratios}")
        order = np.random.default_rng(seed).permutation(len(ids))
        n_train = int(round(ratios[0] * len(ids)))
        n_val = min(int(round(ratios[1] * len(ids))), len(ids) - n_train)
        shuffled = [ids[i] for i in order]
        return SplitSpec(
            sorted(shuffled[:n_train]),
            sorted(shuffled[n_train:n_train + n_val]),
            sorted(shuffled[n_train + n_val:]),
        )

    if isinstance(source, (str, os.PathLike)):
        source = read_json(source)
    if "images" in source:
        parts = {"train": [], "val": [], "test": []}
        for k, img in enumerate(source["images"]):
            which = _require(img, "split", f"$.images[{k}]")
            iid = _require(img, "cocoid", f"$.images[{k}]")
            parts["train" if which == "restval" else which].append(iid)
    else:
        parts = {name: list(_require(source, name, "$")) for name in ("train", "val", "test")}
    seen = _check_disjoint(parts)
    known = set(ids)
    missing = [i for i in seen if i not in known]
    if missing:
        raise ReferentialError(f"split references unknown image id {missing[0]!r}")
    uncovered = known.difference(seen)
    if uncovered:
        raise ValidationError(f"{len(uncovered)} dataset images are not assigned to any split")
    return SplitSpec(sorted(parts["train"]), sorted(parts["val"]), sorted(parts["test"]))


# -- regions ------------------------------------------------------------------

@dataclass
class Region:
    box: tuple              # x, y, w, h in pixels
    features: np.ndarray
    tag: str = None


@dataclass
class RegionGraph:
    regions: list
    edges: list             # (i, j) with i < j, every unordered pair
    edge_features: np.ndarray   # (n(n-1)/2, 2): IoU, centroid distance / diagonal

    @property
    def n(self):
        return len(self.regions)

    @property
    def node_features(self):
        return np.stack([r.features for r in self.regions])

    @property
    def tags(self):
        return [r.tag for r in self.regions]


def iou(a, b):
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    if union <= 0:
        # two degenerate boxes: identical ones overlap fully
        return 1.0 if tuple(a) == tuple(b) else 0.0
    return inter / union


def build_region_graph(regions, image_size=None):
    """Complete graph over regions with (IoU, normalized centroid distance) edges.

    Distances are divided by the image diagonal; without a known image size
    the diagonal of the union of all boxes is used.
    """
    if not regions:
        raise ValidationError("a region graph needs at least one region")
    parsed = []
    for k, r in enumerate(regions):
        if not isinstance(r, Region):
            box = _require(r, "box", f"regions[{k}]")
            feats = _require(r, "features", f"regions[{k}]")
            r = Region(tuple(float(v) for v in box), np.asarray(feats, dtype=float), r.get("tag"))
        if len(r.box) != 4 or r.box[2] < 0 or r.box[3] < 0:
            raise ValidationError(f"regions[{k}]: box must be [x, y, w, h] with w, h >= 0")
        if not np.all(np.isfinite(r.features)) or r.features.ndim != 1:
            raise ValidationError(f"regions[{k}]: features must be a finite vector")
        parsed.append(r)
    dims = {r.features.shape[0] for r in parsed}
    if len(dims) != 1:
        raise ValidationError(f"regions have inconsistent feature dims {sorted(dims)}")

    if image_size is not None:
        diag = math.hypot(*image_size)
    else:
        x0 = min(r.box[0] for r in parsed)
        y0 = min(r.box[1] for r in parsed)
        x1 = max(r.box[0] + r.box[2] for r in parsed)
        y1 = max(r.box[1] + r.box[3] for r in parsed)
        diag = math.hypot(x1 - x0, y1 - y0)
    diag = diag if diag > 0 else 1.0

    edges, feats = [], []
    for i in range(len(parsed)):
        for j in range(i + 1, len(parsed)):
            a, b = parsed[i].box, parsed[j].box
            ca = (a[0] + a[2] / 2, a[1] + a[3] / 2)
            cb = (b[0] + b[2] / 2, b[1] + b[3] / 2)
            edges.append((i, j))
            feats.append((iou(a, b), math.dist(ca, cb) / diag))
    return RegionGraph(parsed, edges, np.array(feats, dtype=float).reshape(-1, 2))


def load_regions(document):
    """Parse a regions document: image id -> list of {box, features, tag?}.

    JSON object keys are strings; integer-looking keys are converted so they
    line up with COCO image ids.
    """
    if isinstance(document, (str, os.PathLike)):
        document = read_json(document)
    if not isinstance(document, dict):
        raise SchemaError("expected an object mapping image ids to region lists", "$")
    out = {}
    for key, regions in document.items():
        iid = int(key) if isinstance(key, str) and key.lstrip("-").isdigit() else key
        if not isinstance(regions, list):
            raise SchemaError("expected an array", f"$.{key}")
        for k, r in enumerate(regions):
            _require(r, "box", f"$.{key}[{k}]")
            _require(r, "features", f"$.{key}[{k}]")
        out[iid] = regions
    return out


# -- JSON helpers -------------------------------------------------------------

def read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc.msg} at line {exc.lineno}", str(path)) from None


def atomic_write(path, data):
    """Write bytes or text to ``path`` via a temp file and rename."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8"})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj):
    atomic_write(path, json.dumps(obj, indent=2) + "\n")


def write_predictions(path, predictions):
    """Predictions document: array of {image_id, caption}, sorted by image id."""
    write_json(path, [{"image_id": iid, "caption": predictions[iid]} for iid in sorted(predictions)])


def read_predictions(path):
    doc = read_json(path)
    if not isinstance(doc, list):
        raise SchemaError("expected an array of predictions", "$")
    out = {}
    for k, item in enumerate(doc):
        out[_require(item, "image_id", f"$[{k}]")] = _require(item, "caption", f"$[{k}]")
    return out
