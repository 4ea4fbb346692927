"""Acceptance suite: one test per criterion, summarized as PASS/FAIL lines.

Run alone with ``pytest tests/test_acceptance.py -m acceptance``; the
criterion lines appear in the terminal summary.
"""

import io
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.optimize import linprog

from arccap import container
from arccap.arcgame import all_labelings, double_oracle, full_matrix_game, hamming
from arccap.cli import run
from arccap.convcap import grad_check
from arccap.data import load_coco, split
from arccap.decode import DecodeConfig, beam_search
from arccap.graphcut import brute_force_minimum, energy_value, minimize_energy
from arccap.metrics import FIELDS, bleu, evaluate_all, rouge_l
from arccap.selfcheck import exhaustive_best, greedy, random_energy, toy_model_batch, toy_scorer
from arccap.synth import write_corpus

pytestmark = pytest.mark.acceptance


def criterion(name):
    return pytest.mark.criterion(name)


@criterion("cut oracle: 200 instances, n <= 12, exact, < 30 s")
def test_cut_oracle(record_property):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(200):
        e = random_energy(rng, int(rng.integers(1, 13)), density=rng.uniform(0.1, 1.0))
        y, v = minimize_energy(e)
        y_bf, v_bf = brute_force_minimum(e)
        mismatches += not (v == v_bf and np.array_equal(y, y_bf))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"mismatches={mismatches} time={elapsed:.1f}s")
    assert mismatches == 0
    assert elapsed < 30


def lp_game_value(payoff):
    m, k = payoff.shape
    c = np.zeros(m + 1)
    c[-1] = -1.0
    res = linprog(c, A_ub=np.hstack([-payoff.T, np.ones((k, 1))]), b_ub=np.zeros(k),
                  A_eq=np.concatenate([np.ones(m), [0.0]])[None], b_eq=[1.0],
                  bounds=[(0, None)] * m + [(None, None)], method="highs")
    return res.x[-1]


@criterion("game oracle: 50 instances, n <= 4, value within 1e-6, regret <= 1e-6, < 60 s")
def test_game_oracle(record_property):
    rng = np.random.default_rng(2025)
    t0 = time.perf_counter()
    worst_gap = worst_regret = 0.0
    for _ in range(50):
        e = random_energy(rng, int(rng.integers(1, 5)))
        res = double_oracle(e, tol=1e-6)
        ys = all_labelings(e.n)
        payoff = np.array([[hamming(p, a) - energy_value(e, a) for p in ys] for a in ys])
        # two independent references for the full 2^n x 2^n game
        for ref in (full_matrix_game(e).value, lp_game_value(payoff)):
            worst_gap = max(worst_gap, abs(res.value - ref))
        worst_regret = max(worst_regret, res.regret)
    elapsed = time.perf_counter() - t0
    record_property("detail", f"max |dv|={worst_gap:.2e} max regret={worst_regret:.2e} time={elapsed:.1f}s")
    assert worst_gap <= 1e-6
    assert worst_regret <= 1e-6
    assert elapsed < 60


@criterion("gradient check: 3-layer toy model, max relative error < 1e-4, < 60 s")
def test_gradient_check(record_property):
    params, batch = toy_model_batch(seed=0)
    assert params.config.layers == 3
    t0 = time.perf_counter()
    # every parameter coordinate
    err = grad_check(params, batch, eps=1e-5, coords=10 ** 9)
    elapsed = time.perf_counter() - t0
    record_property("detail", f"max rel err={err:.2e} time={elapsed:.1f}s")
    assert err < 1e-4
    assert elapsed < 60


@criterion("decoder oracle: 50 toy scorers, beam = exhaustive, beam 1 = greedy")
def test_decoder_oracle(record_property):
    rng = np.random.default_rng(2026)
    wide_bad = narrow_bad = 0
    for _ in range(50):
        vocab, max_len = int(rng.integers(2, 6)), int(rng.integers(1, 5))
        scorer = toy_scorer(rng, vocab)
        wide = beam_search(scorer, DecodeConfig(beam_size=vocab ** max_len, max_len=max_len))
        wide_bad += wide[0][0] != exhaustive_best(scorer, vocab, max_len)[0]
        narrow = beam_search(scorer, DecodeConfig(beam_size=1, max_len=max_len))
        narrow_bad += narrow[0][0] != greedy(scorer, max_len)[0]
    record_property("detail", f"exhaustive mismatches={wide_bad} greedy mismatches={narrow_bad}")
    assert wide_bad == 0 and narrow_bad == 0


@criterion("metric identity: B1..B4 = R = 1, C = 10 (1e-9); BLEU-1 0.8187, ROUGE-L 0.8299 (1e-4)")
def test_metric_identity(record_property):
    refs = {1: ["a dog runs across the green field"], 2: ["two red cars parked by a wall"],
            3: ["one bird sits upon an old fence"]}
    rep = evaluate_all({k: v[0] for k, v in refs.items()}, refs)
    b1 = bleu({1: "the cat sat on mat"}, {1: ["the cat sat on the mat"]}, 1)
    rl = rouge_l({1: "a b c"}, {1: ["a c"]})
    record_property("detail", f"C={rep.C:.12f} BLEU-1={b1:.4f} ROUGE-L={rl:.4f}")
    for f in ("B1", "B2", "B3", "B4", "R"):
        assert abs(getattr(rep, f) - 1.0) <= 1e-9
    assert abs(rep.C - 10.0) <= 1e-9
    assert abs(b1 - 0.8187) <= 1e-4
    assert abs(rl - 0.8299) <= 1e-4


# -- end-to-end runs on the synthetic corpus -----------------------------------

def cli(*argv):
    out = io.StringIO()
    code = run([str(a) for a in argv], stdout=out)
    assert code == 0, f"arccap {' '.join(map(str, argv))} exited {code}"
    return out.getvalue()


def run_pipeline(root):
    """ingest -> train-captioner -> train-arc -> decode (beam 2, 4) -> eval; returns outputs."""
    annotations, regions = write_corpus(root / "corpus", n_images=200, seed=0)
    work = root / "work"
    common = ("--out", work, "--seed", 0, "--threads", 1)
    t0 = time.perf_counter()
    stdout = {"ingest": cli("ingest", "--annotations", annotations, "--regions", regions, *common)}
    stdout["train-captioner"] = cli("train-captioner", *common)
    stdout["train-arc"] = cli("train-arc", *common)
    for beam in (2, 4):
        stdout[f"decode{beam}"] = cli("decode", "--beam", beam, *common)
        stdout[f"eval{beam}"] = cli("eval", "--beam", beam, *common)
    return work, stdout, time.perf_counter() - t0


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("run1"))


def eval_json(text):
    return json.loads(text[: text.rindex("}") + 1])


@criterion("beam-size protocol: decode --beam 2 and 4 end to end, reports in B1,B2,B3,B4,M,R,C,S order")
def test_beam_protocol(pipeline_run, record_property):
    work, stdout, _ = pipeline_run
    for beam in (2, 4):
        doc = eval_json(stdout[f"eval{beam}"])
        assert list(doc) == ["CNN", "CNN+ARC"]
        for method in ("cnn", "cnn_arc"):
            preds = json.loads((work / "predictions" / f"{method}_beam{beam}.json").read_text())
            assert len(preds) == 20 and all(p["caption"] for p in preds)
            saved = json.loads((work / "reports" / f"{method}_beam{beam}.json").read_text())
            assert list(saved) == list(FIELDS) == ["B1", "B2", "B3", "B4", "M", "R", "C", "S"]
            assert saved["M"] is None and saved["S"] is None
            assert all(0 <= saved[f] <= 1 for f in ("B1", "B2", "B3", "B4", "R"))
            assert 0 <= saved["C"] <= 10
        assert (work / "reports" / f"comparison_beam{beam}.png").stat().st_size > 0
    record_property("detail", "beam 2 and beam 4 reports valid")


@criterion("end-to-end toy run: 200 images, V = 30, CE < ln V within 500 steps, < 5 min, CNN vs CNN+ARC side by side")
def test_end_to_end(pipeline_run, record_property, capsys):
    work, stdout, elapsed = pipeline_run
    dataset = json.loads((work / "dataset.json").read_text())
    vocab_size = 4 + len(dataset["vocab"]["tokens"])
    log = json.loads((work / "captioner_log.json").read_text())
    assert len(dataset["images"]) == 200
    assert vocab_size == 30
    assert len(log["step_losses"]) == 500
    final, ln_v = log["final_loss"], math.log(vocab_size)
    with capsys.disabled():
        print(f"\n[toy run] {stdout['ingest'].strip()}; {stdout['train-captioner'].strip()}"
              f" (ln V = {ln_v:.4f}); {stdout['train-arc'].strip()}; {elapsed:.1f}s")
        for beam in (2, 4):
            text = stdout[f"eval{beam}"]
            print(f"[toy run] beam {beam}\n{text[text.rindex('}') + 2:].rstrip()}")
    record_property("detail", f"CE {log['initial_loss']:.3f} -> {final:.3f} < ln V {ln_v:.3f}; pipeline {elapsed:.0f}s")
    assert final < ln_v
    assert elapsed < 300


@criterion("split check: mocked COCO index with the published split gives 113287/5000/5000")
def test_split_sizes(record_property):
    rng = np.random.default_rng(7)
    ids = [int(i) for i in rng.choice(600_000, size=123_287, replace=False)]
    annotations = {
        "images": [{"id": i, "file_name": f"COCO_{i:012d}.jpg"} for i in ids],
        "annotations": [{"id": k, "image_id": i, "caption": "a caption"} for k, i in enumerate(ids)],
    }
    ds = load_coco(annotations)
    # Karpathy-style split file: 82783 train + 30504 restval, 5000 val, 5000 test
    labels = ["train"] * 82_783 + ["restval"] * 30_504 + ["val"] * 5_000 + ["test"] * 5_000
    order = rng.permutation(len(ids))
    split_doc = {"images": [{"cocoid": ids[j], "split": labels[k]} for k, j in enumerate(order)]}
    parts = split(ds, split_doc)
    explicit = split(ds, parts.to_json())
    record_property("detail", f"sizes={parts.sizes()}")
    assert parts.sizes() == (113_287, 5_000, 5_000)
    assert explicit == parts


def artifact_bytes(work):
    files = sorted(p for p in Path(work).rglob("*") if p.is_file())
    return {str(p.relative_to(work)): p.read_bytes() for p in files}


@criterion("determinism: two seeded toy runs give byte-identical checkpoints, predictions, reports")
def test_determinism(pipeline_run, tmp_path_factory, record_property):
    work1 = pipeline_run[0]
    work2, _, _ = run_pipeline(tmp_path_factory.mktemp("run2"))
    a, b = artifact_bytes(work1), artifact_bytes(work2)
    assert set(a) == set(b)
    differing = [name for name in a if a[name] != b[name]]
    kinds = {"captioner.arcc", "arc.arcc"} | {n for n in a if n.startswith(("predictions", "reports"))}
    assert kinds <= set(a)
    # the checkpoints really are loadable containers
    container.load(Path(work1) / "captioner.arcc")
    record_property("detail", f"{len(a)} files compared, {len(differing)} differ")
    assert not differing, differing
