"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The trend criteria train six default-size models (three seeds, two ablation
modes) for 2000 iterations each, so a full run takes about half an hour on
one core.  Set PROMPTPERC_ACCEPTANCE_CACHE to a directory to keep trained
checkpoints between runs; timings then exclude training.
"""
import json
import os
import re
import time
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

from promptperc import checkpoint as ckpt
from promptperc import numkit as nk
from promptperc.cli import main
from promptperc.episodic import (
    AdaptConfig,
    EvalConfig,
    TrainConfig,
    adapt,
    adapt_scope,
    evaluate,
    make_episode,
    predict,
    sample_episode,
    train,
)
from promptperc.metrics import extract_keypoint, miou, pck, pixel_accuracy
from promptperc.model import Model, ModelConfig, TaskId, param_accounting
from promptperc.numkit.gradcheck import directional_check
from promptperc.objective import TaskLoss, combined_loss, episode_objective
from promptperc.synthdata import Dataset, default_spec, generate_dataset

SEEDS = (0, 1, 2)
CACHE = os.environ.get("PROMPTPERC_ACCEPTANCE_CACHE")


@lru_cache(maxsize=None)
def trend_dataset(seed: int) -> Dataset:
    return Dataset.from_manifest(generate_dataset(default_spec(train=4, val=0, test=2), seed))


@lru_cache(maxsize=None)
def trained(seed: int, mode: str) -> tuple[Model, float]:
    """Default model trained for 2000 iterations; returns (model, train seconds)."""
    cfg = TrainConfig(total_iters=2000, seed=seed, ablation_mode=mode)
    path = Path(CACHE) / f"trend_{seed}_{mode}.uapckpt" if CACHE else None
    if path is not None and path.exists():
        model, ck = ckpt.load(path, expect_hash=ModelConfig().hash())
        return model, float(ck.meta["train_seconds"])
    model = Model.create(ModelConfig(), seed=seed)
    t0 = time.perf_counter()
    train(model, trend_dataset(seed), cfg)
    secs = time.perf_counter() - t0
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        ckpt.save(path, model, cfg.total_iters, extra={"train_seconds": secs})
    return model, secs


@lru_cache(maxsize=None)
def held_out_pck(seed: int, mode: str, shots: int, scope: str | None) -> tuple[float, float]:
    """Macro PCK@0.2 on held-out classes and the adaptation seconds spent."""
    model, _ = trained(seed, mode)
    ad = AdaptConfig(scope=scope, seed=seed) if scope else None
    res = evaluate(model, trend_dataset(seed), "PE", EvalConfig(shots=shots, mode="ID", seed=seed, adapt=ad))
    return res.macro, res.adapt_seconds


# -- 1 --------------------------------------------------------------------------
def _param_group(name: str) -> str:
    pattern = r"encoder\.bias\.\w+|encoder\.block\d+|match\.level\d+|decoder\.[a-z]+\d*|encoder\.\w+|label|cls|loss"
    return re.match(pattern, name).group(0)


def test_gradient_fidelity(verdict):
    ds = Dataset.from_manifest(generate_dataset(default_spec(samples_per_class=4), 0))
    t0 = time.perf_counter()
    worst, where = 0.0, ""
    for seed in range(10):
        model = Model.create(ModelConfig(), seed=seed).astype(np.float64)
        rng = nk.stream(seed, "gradcheck")
        # banks and s start at zero; move them off it so their gradients are generic
        for name in model.params:
            if name.startswith(("encoder.bias.", "loss.s.")):
                model.params[name].data = 0.1 * rng.standard_normal(model.params[name].shape)
        episodes = [sample_episode(ds, task, rng, 1, 1) for task in ("PE", "SS", "CLS")]
        groups: dict[str, list[str]] = {}
        for name in model.params:
            groups.setdefault(_param_group(name), []).append(name)
        errs = directional_check(lambda: episode_objective(model, episodes)[0], model.params.tensors(), rng,
                                 h=1e-5, groups=groups)
        g = max(errs, key=errs.get)
        if errs[g] > worst:
            worst, where = errs[g], f"seed {seed} {g}"
    secs = time.perf_counter() - t0
    verdict(1, "gradient fidelity", worst < 1e-4 and secs < 120,
            f"max rel err {worst:.2e} ({where}) over {len(groups)} groups x 10 seeds in {secs:.0f}s")


# -- 2 --------------------------------------------------------------------------
def test_matching_invariants(verdict):
    ds = Dataset.from_manifest(generate_dataset(default_spec(samples_per_class=8), 0))
    model = Model.create(ModelConfig(), seed=0)
    row_err = []
    model.attention_hook = lambda level, att: row_err.append(float(np.abs(att.sum(-1) - 1).max()))
    perm_err = dup_err = 0.0
    for i in range(100):
        rng = nk.stream(0, "matching", i)
        task = ("PE", "SS")[i % 2]
        ep = sample_episode(ds, task, rng, int(rng.integers(1, 6)), 2)

        def run(order):
            return model.forward(ep.query_images, ep.prompt_images[order], ep.prompt_labels[order], task).data

        base = run(np.arange(ep.shots))
        perm_err = max(perm_err, float(np.abs(run(rng.permutation(ep.shots)) - base).max()))
        # every pair twice: pooled softmax halves each weight and leaves the mixture unchanged
        dup = np.tile(np.arange(ep.shots), 2)
        dup_err = max(dup_err, float(np.abs(run(dup) - base).max()))
    ok = max(row_err) <= 1e-6 and perm_err <= 1e-5 and dup_err <= 1e-5
    verdict(2, "matching invariants", ok,
            f"row-sum err {max(row_err):.1e}, permutation {perm_err:.1e}, duplication {dup_err:.1e}")


# -- 3 --------------------------------------------------------------------------
def test_loss_stationarity(verdict):
    worst, steps_used = 0.0, 0
    for L in (0.5, 1.0, np.e, 5.0):
        s = nk.Tensor(np.zeros((), np.float64), requires_grad=True)
        value = nk.Tensor(np.array(L, np.float64))
        for step in range(5000):
            total = combined_loss([TaskLoss(TaskId.PE, value, 1)], {"PE": s})
            s.grad = None
            nk.backward(total)
            s.data = s.data - 0.1 * s.grad
            if abs(float(s.data) - np.log(L)) < 1e-3:
                break
        worst = max(worst, abs(float(s.data) - np.log(L)))
        steps_used = max(steps_used, step + 1)
    verdict(3, "loss stationarity", worst < 1e-3, f"max |s - ln L| {worst:.1e} within {steps_used} steps")


# -- 4 --------------------------------------------------------------------------
def test_bias_isolation_and_recall(verdict):
    ds = Dataset.from_manifest(generate_dataset(default_spec(samples_per_class=8), 0))
    model = Model.create(ModelConfig(), seed=0)
    prompts = ds.indices("test", ds.classes_in("test")[0])[:6]
    adapted = adapt(model, ds, prompts, "PE", AdaptConfig(steps=5, lr=1e-2))
    scope = set(adapt_scope(model, "PE"))
    outside = [n for n in model.params if n not in scope]
    isolated = all(model.params[n].data.tobytes() == adapted.params[n].data.tobytes() for n in outside)
    changed = sum(not np.array_equal(model.params[n].data, adapted.params[n].data) for n in scope)
    ep = make_episode(ds, "PE", ds.classes_in("test")[0], prompts[:3], prompts[3:], keypoint=0)
    first = predict(adapted, ep.query_images, ep.prompt_images, ep.prompt_labels, "PE")
    predict(adapted, ep.query_images, ep.prompt_images, make_episode(
        ds, "SS", ep.class_id, prompts[:3], prompts[3:]).prompt_labels, "SS")
    again = predict(adapted, ep.query_images, ep.prompt_images, ep.prompt_labels, "PE")
    recall = first.tobytes() == again.tobytes()
    verdict(4, "bias isolation & recall", isolated and recall and changed > 0,
            f"{len(outside)} out-of-scope params bit-identical={isolated}, {changed} in-scope changed, "
            f"PE->SS->PE bit-identical={recall}")


# -- 5 --------------------------------------------------------------------------
def _brute_pck(preds, gts, vis, side, sigma):
    hit = n = 0
    for (px, py), (gx, gy), v in zip(preds, gts, vis):
        if v:
            n += 1
            hit += ((px - gx) ** 2 + (py - gy) ** 2) ** 0.5 <= sigma * side
    return 100.0 * hit / n


def _brute_masks(p, g):
    inter = [0, 0]
    union = [0, 0]
    agree = 0
    for i in range(p.shape[0]):
        for j in range(p.shape[1]):
            a, b = bool(p[i, j]), bool(g[i, j])
            agree += a == b
            for cls, (x, y) in enumerate(((a, b), (not a, not b))):
                inter[cls] += x and y
                union[cls] += x or y
    ious = [inter[c] / union[c] if union[c] else 1.0 for c in range(2)]
    return (ious[0] + ious[1]) / 2, agree / p.size


def test_metric_oracles(verdict):
    rng = nk.stream(0, "oracles")
    mismatches = 0
    for _ in range(100):
        k = int(rng.integers(1, 9))
        preds = rng.integers(0, 8, size=(k, 2)).astype(float)
        gts = rng.integers(0, 8, size=(k, 2)).astype(float)
        vis = rng.random(k) < 0.8
        vis[int(rng.integers(k))] = True
        sigma = float(rng.choice([0.05, 0.1, 0.2, 0.25]))
        side = float(rng.integers(1, 9))
        bbox = (0.0, 0.0, side, float(rng.integers(1, side + 1)))
        mismatches += pck(preds, gts, bbox, sigma, visible=vis) != _brute_pck(preds, gts, vis, side, sigma)
    for _ in range(100):
        p = rng.random((8, 8)) < rng.random()
        g = rng.random((8, 8)) < rng.random()
        iou, acc = _brute_masks(p, g)
        mismatches += (miou(p, g) != iou) + (pixel_accuracy(p, g) != acc)
    verdict(5, "metric oracles", mismatches == 0, f"{mismatches} mismatches over 3 x 100 instances")


# -- 6 --------------------------------------------------------------------------
def _overfit(seed: int) -> tuple[float, float]:
    full = Dataset.from_manifest(generate_dataset(default_spec(samples_per_class=2), seed))
    ds = full.subset(full.indices("train", 0))
    model = Model.create(ModelConfig(), seed=seed)
    rows = train(model, ds, TrainConfig(total_iters=500, warmup_iters=50, n_prompts=1, n_queries=1, seed=seed,
                                        tasks=("PE",)))
    loss = float(np.mean([r.loss_t for r in rows[-20:]]))
    S = ds.image_size
    hits = []
    for p, q in ((0, 1), (1, 0)):
        for k in range(ds.num_keypoints(0)):
            ep = make_episode(ds, "PE", 0, [p], [q], keypoint=k)
            logits = predict(model, ep.query_images, ep.prompt_images, ep.prompt_labels, "PE")
            kp = extract_keypoint(logits[0, 0])
            hits.append(pck([kp.coord], [ds.keypoints[q][k][:2]], (-0.5, -0.5, S, S), 0.2))
    return loss, float(np.mean(hits))


def test_overfit_smoke(verdict):
    t0 = time.perf_counter()
    runs = {seed: _overfit(seed) for seed in SEEDS}
    secs = time.perf_counter() - t0
    passed = sum(loss < 0.05 and acc == 100.0 for loss, acc in runs.values())
    detail = ", ".join(f"seed {s}: loss {l:.4f} PCK {a:.1f}" for s, (l, a) in runs.items())
    verdict(6, "overfit smoke", passed >= 2 and secs < 300, f"{passed}/3 seeds ({detail}) in {secs:.0f}s")


# -- 7 --------------------------------------------------------------------------
def test_few_shot_trend(verdict):
    t0 = time.perf_counter()
    train_secs = sum(trained(seed, "awl_bt")[1] for seed in SEEDS)
    one = np.mean([held_out_pck(seed, "awl_bt", 1, None)[0] for seed in SEEDS])
    ten = np.mean([held_out_pck(seed, "awl_bt", 10, None)[0] for seed in SEEDS])
    ten_ad = np.mean([held_out_pck(seed, "awl_bt", 10, "bias")[0] for seed in SEEDS])
    # a single prompt cannot be split into prompt and query halves, so 1-shot is never adapted
    one_ad = one
    secs = time.perf_counter() - t0
    if CACHE:
        secs += train_secs
    ok_a = ten_ad >= ten + 5
    ok_b = ten_ad >= one_ad
    verdict(7, "few-shot trend", ok_a and ok_b and secs < 1800,
            f"PCK@0.2 adapted10 {ten_ad:.1f} vs unadapted10 {ten:.1f} (+5 needed) and adapted1 {one_ad:.1f}; "
            f"{secs / 60:.1f} min")


# -- 8 --------------------------------------------------------------------------
def adaptation_seconds(seed: int) -> dict[str, float]:
    """10-shot PE adaptation time per scope, timed back to back on the same prompts."""
    model, _ = trained(seed, "awl_bt")
    ds = trend_dataset(seed)
    secs = {"bias": 0.0, "full": 0.0}
    for c in ds.classes_in("test"):
        prompts = ds.indices("test", c)[:10]
        for scope in secs:
            t0 = time.perf_counter()
            adapt(model, ds, prompts, "PE", AdaptConfig(scope=scope, seed=seed), keypoints=range(ds.num_keypoints(c)))
            secs[scope] += time.perf_counter() - t0
    return secs


def test_ablation_trend(verdict):
    awl_bt = np.mean([held_out_pck(seed, "awl_bt", 10, "bias")[0] for seed in SEEDS])
    base = np.mean([held_out_pck(seed, "baseline", 10, "bias")[0] for seed in SEEDS])
    # awl_ft trains exactly like awl_bt and differs only in the adaptation scope
    timings = [adaptation_seconds(seed) for seed in SEEDS]
    bt_secs = sum(t["bias"] for t in timings)
    ft_secs = sum(t["full"] for t in timings)
    verdict(8, "ablation trend", awl_bt >= base and bt_secs < ft_secs,
            f"adapted 10-shot PCK@0.2 awl_bt {awl_bt:.1f} vs baseline {base:.1f}; "
            f"adaptation {bt_secs:.1f}s awl_bt vs {ft_secs:.1f}s awl_ft")


# -- 9 --------------------------------------------------------------------------
def test_parameter_accounting(verdict, tmp_path, capsys):
    path = ckpt.save(tmp_path / "default.uapckpt", Model.create(ModelConfig(), seed=0))
    capsys.readouterr()
    code = main(["inspect", str(path), "--json"])
    rep = json.loads(capsys.readouterr().out)
    acc = param_accounting(Model.create(ModelConfig(), seed=0).params)
    ok = code == 0 and rep["ratio"] < 0.02 and rep["task_specific"] == acc["task_specific"]
    verdict(9, "parameter accounting", ok,
            f"{rep['task_specific']} task-specific / {rep['shared']} shared = {100 * rep['ratio']:.3f}%")


# -- 10 -------------------------------------------------------------------------
def test_determinism_and_persistence(verdict, tmp_path):
    ds = Dataset.from_manifest(generate_dataset(default_spec(samples_per_class=8), 3))
    blobs = []
    for run in range(2):
        model = Model.create(ModelConfig(), seed=3)
        train(model, ds, TrainConfig(total_iters=20, warmup_iters=2, n_prompts=2, n_queries=2, seed=3))
        blobs.append(ckpt.save(tmp_path / f"run{run}.uapckpt", model, 20).read_bytes())
    same = blobs[0] == blobs[1]
    back, _ = ckpt.load(tmp_path / "run0.uapckpt")
    exact = all(back.params[n].data.tobytes() == model.params[n].data.tobytes()
                and back.params[n].dtype == model.params[n].dtype for n in model.params)
    exact = exact and list(back.params) == list(model.params)
    verdict(10, "determinism & persistence", same and exact,
            f"identical checkpoint bytes={same} ({len(blobs[0])} B), round-trip bit-exact={exact}")

