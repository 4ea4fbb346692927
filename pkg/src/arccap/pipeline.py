"""Pipeline stages behind the CLI commands.

All stages read and write inside one work directory:

    dataset.json               ingest: vocabulary, split, captions, regions
    captioner.arcc             train-captioner checkpoint
    arc.arcc                   train-arc checkpoint
    predictions/<method>_beam<b>.json
    reports/<method>_beam<b>.json, comparison_beam<b>.{txt,tsv,png}
"""

from dataclasses import dataclass
import logging
import math
import os

import numpy as np

from . import container, plotting
from .arcgame import ArcConfig, ArcWeights, predict_marginals, train_weights
from .convcap import ImageFeatures, ModelConfig, ModelParams, init_params, token_loss, train_step
from .data import (Vocab, atomic_write, build_region_graph, build_vocab, load_coco, load_regions,
                   read_json, read_predictions, split, tokenize, write_json, write_predictions)
from .decode import DecodeConfig, decode_image
from .errors import ReferentialError, ValidationError
from .metrics import FIELDS, RefCorpus, evaluate_all, format_table

log = logging.getLogger(__name__)

METHODS = {"cnn": "CNN", "cnn_arc": "CNN+ARC"}
MAX_WORDS = 16


@dataclass
class TrainConfig:
    steps: int = 500
    lr: float = 0.05
    batch_size: int = 16


@dataclass
class WorkData:
    vocab: Vocab
    split: dict
    images: dict       # id -> {"captions", "size", "regions"}

    def graph(self, iid):
        entry = self.images[iid]
        return build_region_graph(entry["regions"], entry["size"])

    def features(self, iid):
        cells = np.array([r["features"] for r in self.images[iid]["regions"]], dtype=float)
        return ImageFeatures.from_cells(cells)

    def encode(self, caption):
        return self.vocab.encode(tokenize(caption)[:MAX_WORDS])


def ingest(annotations, regions, out, split_source=None, min_count=5, seed=0, ratios=(0.8, 0.1, 0.1)):
    ds = load_coco(annotations)
    region_map = load_regions(regions)
    for iid in region_map:
        if iid not in ds.captions:
            raise ReferentialError(f"regions reference unknown image id {iid!r}")
    for iid in ds.image_ids:
        if iid not in region_map:
            raise ReferentialError(f"image {iid!r} has no regions")
        build_region_graph(region_map[iid], ds.sizes.get(iid))
    parts = split(ds, split_source, ratios=ratios, seed=seed)
    vocab = build_vocab([c for iid in parts.train for c in ds.captions[iid]], min_count)
    doc = {
        "vocab": vocab.to_json(),
        "split": parts.to_json(),
        "images": [
            {"id": iid, "captions": ds.captions[iid], "size": ds.sizes.get(iid),
             "regions": region_map[iid]}
            for iid in ds.image_ids
        ],
    }
    write_json(os.path.join(out, "dataset.json"), doc)
    log.info("ingested %d images, vocab %d, split %s", len(ds.captions), len(vocab), parts.sizes())
    return parts, vocab


def load_work(out):
    path = os.path.join(out, "dataset.json")
    if not os.path.exists(path):
        raise ValidationError(f"{path} not found; run ingest first")
    doc = read_json(path)
    images = {}
    for img in doc["images"]:
        size = tuple(img["size"]) if img.get("size") else None
        images[img["id"]] = {"captions": img["captions"], "size": size, "regions": img["regions"]}
    return WorkData(Vocab.from_json(doc["vocab"]), doc["split"], images)


def train_captioner(out, model=None, train=None, seed=0):
    work = load_work(out)
    train = train or TrainConfig()
    feat_dim = len(work.images[work.split["train"][0]]["regions"][0]["features"])
    model = model or {}
    config = ModelConfig(vocab_size=len(work.vocab), feat_dim=feat_dim, seed=seed, **model)
    params = init_params(config)
    pairs = [(work.features(iid), work.encode(c))
             for iid in work.split["train"] for c in work.images[iid]["captions"]]
    if not pairs:
        raise ValidationError("training split has no captions")
    rng = np.random.default_rng(seed)
    initial = token_loss(params, pairs)
    losses, order, pos = [], rng.permutation(len(pairs)), 0
    for _ in range(train.steps):
        if pos + train.batch_size > len(order):
            order, pos = rng.permutation(len(pairs)), 0
        batch = [pairs[i] for i in order[pos:pos + train.batch_size]]
        pos += train.batch_size
        params, loss = train_step(params, batch, train.lr)
        losses.append(loss)
    final = token_loss(params, pairs)
    log.info("captioner train token CE %.4f -> %.4f (ln V = %.4f)", initial, final, math.log(len(work.vocab)))
    container.save(os.path.join(out, "captioner.arcc"), params.to_tensors())
    write_json(os.path.join(out, "captioner_log.json"),
               {"initial_loss": initial, "final_loss": final, "ln_vocab": math.log(len(work.vocab)),
                "step_losses": losses})
    plotting.training_curve(losses, os.path.join(out, "captioner_loss.png"), "token cross-entropy",
                            math.log(len(work.vocab)), "ln V")
    return params, initial, final


def gold_labeling(work, iid):
    words = set()
    for c in work.images[iid]["captions"]:
        words.update(tokenize(c))
    return np.array([1 if r.get("tag") in words else 0 for r in work.images[iid]["regions"]], dtype=np.int8)


def train_arc(out, arc=None):
    work = load_work(out)
    arc = arc or ArcConfig()
    examples = [(work.graph(iid), gold_labeling(work, iid)) for iid in work.split["train"]]
    weights = train_weights(examples, arc)
    container.save(os.path.join(out, "arc.arcc"), weights.to_tensors())
    write_json(os.path.join(out, "arc_log.json"), {"feature_gaps": list(weights.gap_history)})
    if weights.gap_history:
        plotting.training_curve(list(weights.gap_history), os.path.join(out, "arc_gap.png"),
                                "feature-matching gap")
    return weights


def token_marginals(work, weights, iid, arc):
    """ARC node marginals mapped onto vocabulary ids of the region tags."""
    graph = work.graph(iid)
    marg = predict_marginals(weights, graph, arc.tol, arc.max_iter)
    out = {}
    for m, tag in zip(marg, graph.tags):
        if tag is not None and tag in work.vocab:
            tid = work.vocab.index[tag]
            out[tid] = max(out.get(tid, 0.0), float(m))
    return out


def decode(out, cfg, arc=None, which="test"):
    work = load_work(out)
    arc = arc or ArcConfig()
    params = ModelParams.from_tensors(container.load(os.path.join(out, "captioner.arcc")))
    weights = ArcWeights.from_tensors(container.load(os.path.join(out, "arc.arcc")))
    cnn_cfg = DecodeConfig(cfg.beam_size, min(cfg.max_len, params.config.max_len), 0.0, cfg.fusion_epsilon)
    arc_cfg = DecodeConfig(cfg.beam_size, cnn_cfg.max_len, cfg.fusion_lambda, cfg.fusion_epsilon)
    preds = {"cnn": {}, "cnn_arc": {}}
    for iid in work.split[which]:
        image = work.features(iid)
        words, _ = decode_image(params, image, {}, cnn_cfg)
        preds["cnn"][iid] = " ".join(work.vocab.decode(words))
        words, _ = decode_image(params, image, token_marginals(work, weights, iid, arc), arc_cfg)
        preds["cnn_arc"][iid] = " ".join(work.vocab.decode(words))
    paths = {}
    for method, p in preds.items():
        paths[method] = os.path.join(out, "predictions", f"{method}_beam{cfg.beam_size}.json")
        write_predictions(paths[method], p)
    return paths


def references(work, ids):
    return RefCorpus({iid: work.images[iid]["captions"] for iid in ids})


def _write_reports(reports, report_dir, stem, title, per_method=True):
    if per_method:
        keys = {v: k for k, v in METHODS.items()}
        for name, rep in reports.items():
            write_json(os.path.join(report_dir, f"{keys.get(name, name)}_{stem}.json"), rep.to_dict())
    table = format_table(reports)
    atomic_write(os.path.join(report_dir, f"comparison_{stem}.txt"), table + "\n")
    rows = ["\t".join(("method",) + FIELDS)]
    for name, rep in reports.items():
        rows.append("\t".join([name] + ["" if rep.to_dict()[f] is None else repr(rep.to_dict()[f]) for f in FIELDS]))
    atomic_write(os.path.join(report_dir, f"comparison_{stem}.tsv"), "\n".join(rows) + "\n")
    plotting.metric_comparison(reports, os.path.join(report_dir, f"comparison_{stem}.png"), title)
    return table


def evaluate_work(out, beam, which="test"):
    """Score every method decoded at ``beam``; returns ``{method label: report}``."""
    work = load_work(out)
    refs = references(work, work.split[which])
    reports = {}
    for method, label in METHODS.items():
        path = os.path.join(out, "predictions", f"{method}_beam{beam}.json")
        if os.path.exists(path):
            reports[label] = evaluate_all(read_predictions(path), refs)
    if not reports:
        raise ValidationError(f"no predictions for beam {beam} under {out}; run decode first")
    table = _write_reports(reports, os.path.join(out, "reports"), f"beam{beam}", f"Beam size={beam}")
    return reports, table


def evaluate_files(predictions, annotations, out=None):
    """Score one predictions document against COCO annotations."""
    preds = read_predictions(predictions)
    ds = load_coco(annotations)
    missing = [iid for iid in preds if iid not in ds.captions]
    if missing:
        raise ReferentialError(f"prediction for unknown image id {missing[0]!r}")
    refs = RefCorpus({iid: ds.captions[iid] for iid in preds})
    report = evaluate_all(preds, refs)
    reports = {"predictions": report}
    table = format_table(reports)
    if out:
        write_json(os.path.join(out, "report.json"), report.to_dict())
        _write_reports(reports, out, "predictions", "", per_method=False)
    return reports, table
