"""Synthetic captioning corpus where region tags carry the caption signal.

Every image holds two salient regions (the ones the captions talk about)
and a few small distractors. Captions follow templates over a 26-word
vocabulary, 30 tokens with the specials. The spatial relation word depends
on how the salient boxes sit relative to each other.

    python -m arccap.synth OUTDIR [--images 200] [--seed 0]
"""

import argparse
import os

import numpy as np

from .data import write_json

OBJECTS = ("dog", "cat", "man", "woman", "horse", "car", "bike", "table", "ball", "tree")
IMAGE_SIZE = 400.0
TEMPLATES = (
    "a {o1} {rel} a {o2}",
    "the {o1} is {rel} the {o2}",
    "there is a {o1} {rel} a {o2}",
    "{lead} of a {o1} {rel} a {o2}",
    "this picture shows a {o1} {rel} the {o2}",
    "in the scene a {o1} is {rel} a {o2}",
)
FEAT_DIM = 3 + len(OBJECTS)


def _features(rng, obj, salient, area):
    f = np.zeros(FEAT_DIM)
    f[0] = 1.0
    f[1] = rng.normal(1.0 if salient else 0.0, 0.5)
    f[2] = area
    f[3 + OBJECTS.index(obj)] = 1.0
    return f


def _salient_boxes(rng, rel):
    w1, h1 = rng.uniform(110, 170, size=2)
    w2, h2 = rng.uniform(80, 120, size=2)
    x1, y1 = rng.uniform(20, 120), rng.uniform(20, 120)
    if rel == "on":
        x2, y2 = x1 + rng.uniform(0, w1 / 2), y1 + rng.uniform(0, h1 / 2)
    elif rel == "near":
        x2, y2 = x1 + w1 + rng.uniform(2, 20), y1 + rng.uniform(-20, 20)
    else:
        x2, y2 = x1 + w1 + rng.uniform(50, 90), y1 + rng.uniform(60, 110)
    box2 = [x2, y2, min(w2, IMAGE_SIZE - x2), min(h2, IMAGE_SIZE - y2)]
    return [x1, y1, w1, h1], [max(v, 1.0) for v in box2]


def make_corpus(n_images=200, seed=0, captions_per_image=5):
    """Return ``(annotations_document, regions_document)``."""
    rng = np.random.default_rng(seed)
    images, annotations, regions = [], [], {}
    aid = 1
    for iid in range(1, n_images + 1):
        objs = rng.choice(len(OBJECTS), size=2 + int(rng.integers(1, 4)), replace=False)
        o1, o2 = OBJECTS[objs[0]], OBJECTS[objs[1]]
        rel = ("on", "near", "with")[int(rng.integers(3))]
        b1, b2 = _salient_boxes(rng, rel)
        area = IMAGE_SIZE ** 2
        regs = [
            {"box": b1, "features": _features(rng, o1, True, b1[2] * b1[3] / area).tolist(), "tag": o1},
            {"box": b2, "features": _features(rng, o2, True, b2[2] * b2[3] / area).tolist(), "tag": o2},
        ]
        for k in objs[2:]:
            w, h = rng.uniform(20, 60, size=2)
            box = [rng.uniform(0, IMAGE_SIZE - w), rng.uniform(0, IMAGE_SIZE - h), w, h]
            regs.append({"box": box, "features": _features(rng, OBJECTS[k], False, w * h / area).tolist(),
                         "tag": OBJECTS[k]})
        order = rng.permutation(len(regs))
        regions[str(iid)] = [regs[i] for i in order]

        images.append({"id": iid, "file_name": f"synth_{iid:06d}.jpg",
                       "width": IMAGE_SIZE, "height": IMAGE_SIZE})
        picks = rng.choice(len(TEMPLATES), size=captions_per_image, replace=False)
        for t in sorted(picks):
            lead = "a photo" if rng.random() < 0.5 else "an image"
            caption = TEMPLATES[t].format(o1=o1, o2=o2, rel=rel, lead=lead)
            annotations.append({"id": aid, "image_id": iid, "caption": caption.capitalize() + "."})
            aid += 1
    return {"images": images, "annotations": annotations}, regions


def write_corpus(out_dir, n_images=200, seed=0):
    ann, regions = make_corpus(n_images, seed)
    write_json(os.path.join(out_dir, "annotations.json"), ann)
    write_json(os.path.join(out_dir, "regions.json"), regions)
    return os.path.join(out_dir, "annotations.json"), os.path.join(out_dir, "regions.json")


def main(argv=None):
    parser = argparse.ArgumentParser(description="Write a synthetic captioning corpus.")
    parser.add_argument("out_dir")
    parser.add_argument("--images", type=int, default=200)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    for path in write_corpus(args.out_dir, args.images, args.seed):
        print(path)


if __name__ == "__main__":
    main()
