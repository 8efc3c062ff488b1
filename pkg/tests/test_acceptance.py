"""Acceptance criteria 1-10, one test per criterion.

Each test records a one-line verdict (``criterion`` user property) that the
terminal summary in conftest prints as ``CRITERION n PASS|FAIL|SKIP ...``.

Criteria 6 and 7 train the default network for 60 epochs per run.  The
finished runs are cached under ``.acceptance_cache/`` keyed by the training
configuration and a hash of every source file in the package, so a code
change always retrains; set ``MSAUPAF_ACCEPTANCE_FRESH=1`` to ignore the
cache.  The cached record keeps the measured wall-clock training time, which
is what the runtime bound is checked against.
"""

from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from msaupaf import autodiff as ad
from msaupaf.baselines import heuristic_link
from msaupaf.chargrid import build_vocab, rasterize
from msaupaf.cli import main
from msaupaf.decoder import decode, fields_from_targets
from msaupaf.funsd_io import Entity
from msaupaf.metrics import PRF, evaluate, evaluate_form, f1, iou, score_linking
from msaupaf.net import MSAUPAF, NetConfig, corner_pool
from msaupaf.synthgen import SynthSpec, generate, write_corpus
from msaupaf.targets import GridGeometry, encode_targets, total_loss
from msaupaf.train import TrainConfig, predict, train

from conftest import tiny_problem

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("MSAUPAF_ACCEPTANCE_CACHE", ROOT / ".acceptance_cache"))

# Criterion 6 thresholds, pinned after the calibration run (seed 0, default
# net, 60 epochs: labeling 1.000, linking 0.925 on the held-out forms).
LEARN_EPOCHS = 60
LEARN_TRAIN = SynthSpec(n_forms=200, mode="easy")
LEARN_TEST = SynthSpec(n_forms=20, mode="easy")
LEARN_TRAIN_SEED, LEARN_TEST_SEED = 0, 1
MIN_LABELING_F1 = 0.80
MIN_LINKING_F1 = 0.60
LEARN_BUDGET_S = 45 * 60
ABLATION_SEEDS = (0, 1, 2)
ABLATION_TOL = 0.02


def verdict(record_property, n: int, text: str) -> None:
    record_property("criterion", f"{n}|{text}")


# ---------------------------------------------------------------------------
# 1


def test_criterion_01_funsd_scores_out_of_scope(record_property):
    verdict(record_property, 1, "FUNSD F1 0.83 / 0.75 declared not desk-reproducible (README)")
    readme = (ROOT / "README.md").read_text()
    assert "0.83" in readme and "0.75" in readme and "not reproduced" in readme


# ---------------------------------------------------------------------------
# 2

FUNSD_COUNTS = {
    "training_data": {"forms": 149, "words": 22512, "entities": 7411, "relations": 4236},
    "testing_data": {"forms": 50, "words": 8973, "entities": 2332, "relations": 1076},
}


def test_criterion_02_funsd_statistics(record_property, capsys):
    root = os.environ.get("FUNSD_DIR")
    if not root or not Path(root, "training_data", "annotations").is_dir():
        verdict(record_property, 2, "FUNSD not available; set FUNSD_DIR to the dataset root")
        pytest.skip("FUNSD_DIR not set or missing training_data/annotations")
    splits = [str(Path(root, s, "annotations")) for s in FUNSD_COUNTS]
    t0 = time.perf_counter()
    code = main(["stats", *itertools.chain.from_iterable(("--split", s) for s in splits)])
    secs = time.perf_counter() - t0
    out = capsys.readouterr().out
    got = {}
    for tok in out.split():
        if "=" in tok:
            k, v = tok.split("=")
            split, key = k.split(".", 1)
            got.setdefault(split, {})[key] = int(v)
    observed = {s: {k: got.get(s, {}).get(k) for k in FUNSD_COUNTS[s]} for s in FUNSD_COUNTS}
    verdict(record_property, 2, f"stats {observed} in {secs:.2f}s")
    assert code == 0
    assert observed == FUNSD_COUNTS
    assert secs < 5


# ---------------------------------------------------------------------------
# 3


def _random_shape(rng):
    c = int(rng.integers(1, 5))
    h, w = (2 * int(v) for v in rng.integers(1, 5, size=2))
    return c, h, w


def _primitive_cases(rng):
    def t(*shape):
        return torch.from_numpy(rng.standard_normal(shape))

    def away(*shape):
        x = t(*shape)
        return x + torch.sign(x) * 0.1

    for _ in range(3):
        c, h, w = _random_shape(rng)
        c2 = int(rng.integers(1, 5))
        yield "conv2d", lambda x, k: ad.conv2d(x, k), [t(1, c, h, w), t(c2, c, 3, 3)]
        yield "conv2d_stride2", lambda x, k: ad.conv2d(x, k, stride=2), [t(1, c, h, w), t(c2, c, 3, 3)]
        yield "max_pool2", ad.max_pool2, [t(1, c, h, w)]
        yield "nearest_upsample", ad.nearest_upsample, [t(1, c, h // 2, w // 2)]
        yield "relu", ad.relu, [away(1, c, h, w)]
        yield "leaky_relu", ad.leaky_relu, [away(1, c, h, w)]
        yield "softmax_channels", ad.softmax_channels, [t(1, c, h, w)]
        yield "channel_concat", lambda a, b: ad.channel_concat([a, b]), [t(1, c, h, w), t(1, c2, h, w)]
        yield "add", ad.add, [t(1, c, h, w), t(1, c, h, w)]
        yield "scalar_mul", lambda x: ad.scalar_mul(x, 1.3), [t(1, c, h, w)]
        yield "global_matmul", ad.global_matmul, [t(1, c, h * w), t(1, h * w, c2)]
        yield "corner_pool", corner_pool, [t(1, c, h, w)]


def test_criterion_03_gradient_suite(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = {}
    for name, fn, inputs in _primitive_cases(rng):
        r = ad.grad_check(fn, inputs)
        worst[name] = max(worst.get(name, 0.0), r.max_rel_error)

    cfg = NetConfig(n_input_channels=6, base_channels=4, max_channels=8, head_channels=6)
    net = MSAUPAF(cfg, seed=1).double()
    x, target = tiny_problem(5)
    params = dict(net.named_parameters())
    names = ["embed.weight", "block1.stem.weight", "block1.attention.value.weight",
             "block2.attention.query.weight", "trunk_in.weight", "pif_head.weight", "paf_head.bias"]
    fixed = {k: v.detach() for k, v in params.items() if k not in names}

    def loss(*sel):
        pred = torch.func.functional_call(net, dict(fixed, **dict(zip(names, sel))), (x,))
        return total_loss(pred, target)[0]

    e2e = ad.grad_check(loss, [params[n] for n in names], max_per_input=8, seed=2)
    secs = time.perf_counter() - t0
    prim = max(worst.values())
    verdict(record_property, 3,
            f"primitives max rel err {prim:.2e} (<1e-4), end-to-end 16x16 {e2e.max_rel_error:.2e} "
            f"over {e2e.n_checked} coords (<1e-3), {secs:.1f}s")
    assert prim < 1e-4, worst
    assert e2e.n_checked >= 30
    assert e2e.max_rel_error < 1e-3
    assert secs < 120


# ---------------------------------------------------------------------------
# 4


def brute_corner_pool(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    out = np.zeros_like(x)
    for ch, i, j in itertools.product(range(c), range(h), range(w)):
        out[ch, i, j] = max(x[ch, k, j] for k in range(i, h)) + max(x[ch, i, k] for k in range(j, w))
    return out


def test_criterion_04_corner_pool_oracle(record_property):
    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(100):
        x = rng.standard_normal((3, 8, 8)).astype(np.float32)
        got = corner_pool(torch.from_numpy(x)[None])[0].numpy()
        mismatches += not np.array_equal(got, brute_corner_pool(x))
    verdict(record_property, 4, f"{100 - mismatches}/100 random 8x8x3 maps exactly equal to brute force")
    assert mismatches == 0


# ---------------------------------------------------------------------------
# 5


def test_criterion_05_round_trip(record_property):
    t0 = time.perf_counter()
    triples = []
    for mode in ("easy", "hard"):
        for i, form in enumerate(generate(5, SynthSpec(n_forms=25, mode=mode))):
            grid = rasterize(form, build_vocab([form]))
            geom = GridGeometry(grid.height, grid.width, grid.scale, 4)
            dec = decode(fields_from_targets(encode_targets(form, geom)), geom)
            triples.append((f"{mode}{i}", dec.to_form_document(form.page_width, form.page_height), form))
    rep = evaluate(triples, threshold=0.8)
    secs = time.perf_counter() - t0
    verdict(record_property, 5,
            f"50 forms: labeling F1 {rep.labeling.f1:.4f} (=1), linking F1 {rep.linking.f1:.4f} (>=0.99), {secs:.1f}s")
    assert rep.labeling.f1 == 1.0
    assert rep.linking.f1 >= 0.99
    assert secs < 60


# ---------------------------------------------------------------------------
# 6 and 7


def _source_hash() -> str:
    h = hashlib.sha256()
    for p in sorted((ROOT / "src" / "msaupaf").glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    h.update(torch.__version__.encode())
    return h.hexdigest()[:16]


def learning_run(seed: int, coord: bool, corner: bool) -> dict:
    """Train the criterion-6 setup and score it on the held-out forms."""
    cfg = TrainConfig(epochs=LEARN_EPOCHS, seed=seed)
    net = NetConfig(use_coordconv=coord, use_corner_pool=corner)
    key_src = json.dumps(
        {"train": dataclasses.asdict(cfg), "net": dataclasses.asdict(net),
         "data": [dataclasses.asdict(LEARN_TRAIN), LEARN_TRAIN_SEED, dataclasses.asdict(LEARN_TEST), LEARN_TEST_SEED],
         "src": _source_hash()},
        sort_keys=True,
    )
    key = hashlib.sha256(key_src.encode()).hexdigest()[:20]
    record = CACHE / key / "result.json"
    if record.exists() and not os.environ.get("MSAUPAF_ACCEPTANCE_FRESH"):
        return json.loads(record.read_text())

    train_forms = generate(LEARN_TRAIN_SEED, LEARN_TRAIN)
    test_forms = generate(LEARN_TEST_SEED, LEARN_TEST)
    t0 = time.perf_counter()
    res = train(train_forms, cfg, net, out_dir=CACHE / key / "run")
    secs = time.perf_counter() - t0
    preds = predict(res.model, res.vocab, test_forms)
    rep = evaluate(
        (str(i), p.to_form_document(f.page_width, f.page_height), f)
        for i, (p, f) in enumerate(zip(preds, test_forms))
    )
    out = {"seed": seed, "coordconv": coord, "corner_pool": corner, "labeling_f1": rep.labeling.f1,
           "linking_f1": rep.linking.f1, "train_seconds": secs, "threads": torch.get_num_threads(),
           "config": json.loads(key_src)}
    record.write_text(json.dumps(out, indent=2) + "\n")
    return out


@pytest.mark.slow
def test_criterion_06_learning_signal(record_property):
    r = learning_run(0, True, True)
    verdict(record_property, 6,
            f"labeling F1 {r['labeling_f1']:.3f} (>={MIN_LABELING_F1}), linking F1 {r['linking_f1']:.3f} "
            f"(>={MIN_LINKING_F1}), train {r['train_seconds'] / 60:.1f} min on {r['threads']} thread(s) (<45)")
    assert r["labeling_f1"] >= MIN_LABELING_F1
    assert r["linking_f1"] >= MIN_LINKING_F1
    assert r["train_seconds"] < LEARN_BUDGET_S


@pytest.mark.slow
def test_criterion_07_ablation_direction(record_property):
    on = [learning_run(s, True, True) for s in ABLATION_SEEDS]
    off = [learning_run(s, False, False) for s in ABLATION_SEEDS]
    deltas = {}
    for key in ("labeling_f1", "linking_f1"):
        deltas[key] = float(np.mean([r[key] for r in on]) - np.mean([r[key] for r in off]))
    per_seed = ", ".join(
        f"s{a['seed']}: {a['labeling_f1']:.3f}/{a['linking_f1']:.3f} vs {b['labeling_f1']:.3f}/{b['linking_f1']:.3f}"
        for a, b in zip(on, off)
    )
    verdict(record_property, 7,
            f"mean F1 change with CoordConv+corner pool: labeling {deltas['labeling_f1']:+.3f}, "
            f"linking {deltas['linking_f1']:+.3f} (>= -{ABLATION_TOL}); on vs off lab/link {per_seed}")
    assert deltas["labeling_f1"] >= -ABLATION_TOL
    assert deltas["linking_f1"] >= -ABLATION_TOL


# ---------------------------------------------------------------------------
# 8


def brute_force_links(entities):
    qs = [e for e in entities if e.label == "question"]
    out = []
    for a in (e for e in entities if e.label == "answer"):
        if not qs:
            break
        ac = ((a.box[0] + a.box[2]) / 2, (a.box[1] + a.box[3]) / 2)
        dist = [np.hypot((q.box[0] + q.box[2]) / 2 - ac[0], (q.box[1] + q.box[3]) / 2 - ac[1]) for q in qs]
        best = min(range(len(qs)), key=lambda i: (dist[i], qs[i].id))
        out.append((qs[best].id, a.id))
    return out


def _heuristic_f1(forms) -> float:
    total = PRF()
    for f in forms:
        total += score_linking(heuristic_link(f.entities), f.links, {e.id: e.id for e in f.entities})
    return total.f1


def test_criterion_08_heuristic_baseline(record_property):
    easy = _heuristic_f1(generate(8, SynthSpec(n_forms=50, mode="easy")))
    hard = _heuristic_f1(generate(8, SynthSpec(n_forms=50, mode="hard")))
    rng = np.random.default_rng(8)
    agree = 0
    for _ in range(1000):
        n = int(rng.integers(0, 12))
        ents = []
        for i in rng.permutation(3 * n + 1)[:n]:
            x, y = (int(v) for v in rng.integers(0, 40, size=2))
            w, h = (int(v) for v in rng.integers(1, 10, size=2))
            label = str(rng.choice(["question", "answer", "header", "other"]))
            ents.append(Entity(int(i), label, (x, y, x + w, y + h)))
        agree += sorted(heuristic_link(ents)) == sorted(brute_force_links(ents))
    verdict(record_property, 8,
            f"heuristic F1 easy {easy:.4f} (=1), hard {hard:.4f} (<1), brute-force agreement {agree}/1000")
    assert easy == 1.0
    assert hard < 1.0
    assert agree == 1000


# ---------------------------------------------------------------------------
# 9


def test_criterion_09_metric_fidelity(record_property):
    a, b = (0, 0, 10, 10), (5, 0, 15, 10)
    pa = {(x, y) for x in range(a[0], a[2]) for y in range(a[1], a[3])}
    pb = {(x, y) for x in range(b[0], b[2]) for y in range(b[1], b[3])}
    pixel = len(pa & pb) / len(pa | pb)
    got_iou = iou(a, b)
    got_f1 = f1(1.0, 0.5)
    lab, _ = evaluate_form(
        _doc([(0, "question", (0, 0, 10, 10))]),
        _doc([(0, "question", (0, 0, 10, 10)), (1, "answer", (20, 0, 30, 10))]),
    )
    verdict(record_property, 9,
            f"iou {got_iou!r} vs pixel oracle {pixel!r} (=1/3); F1 {got_f1!r}, labeling F1 {lab.overall.f1!r} (=2/3)")
    assert got_iou == pixel == 1 / 3
    assert got_f1 == 2 / 3
    assert lab.overall.f1 == 2 / 3


def _doc(ents):
    from msaupaf.funsd_io import FormDocument

    return FormDocument(100, 100, tuple(Entity(i, lab, box) for i, lab, box in ents), ())


# ---------------------------------------------------------------------------
# 10


def test_criterion_10_determinism(record_property, tmp_path):
    data = tmp_path / "data"
    write_corpus(generate(10, SynthSpec(n_forms=8)), data)
    digests = []
    for name in ("a", "b"):
        run = tmp_path / name
        assert main(["train", "--data", str(data), "--out", str(run), "--epochs", "2", "--seed", "7",
                     "--set", "max_shift=2", "--set", "pad_max=2"]) == 0
        digests.append(hashlib.sha256((run / "model.mspw").read_bytes()).hexdigest())
    verdict(record_property, 10, f"checkpoint sha256 {digests[0][:12]} vs {digests[1][:12]}")
    assert digests[0] == digests[1]
