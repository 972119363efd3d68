import numpy as np
import pytest

from promptperc import numkit as nk
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
from promptperc.model import Model, ModelConfig, TaskId
from promptperc.synthdata import Dataset, default_spec, generate_dataset

SMALL = ModelConfig(dim=32, heads=2, blocks=2, hierarchies=2, decoder_channels=8)


@pytest.fixture(scope="module")
def ds():
    return Dataset.from_manifest(generate_dataset(default_spec(train=3, val=0, test=2, samples_per_class=8), 5))


@pytest.fixture(scope="module")
def trained(ds):
    m = Model.create(SMALL, seed=0)
    train(m, ds, TrainConfig(total_iters=12, warmup_iters=2, n_prompts=2, n_queries=2, seed=0))
    return m


def test_sample_episode_uses_all_when_exact(ds):
    one = ds.subset(ds.indices("train", 1)[:5])
    ep = sample_episode(one, "SS", nk.stream(0, "ep"), n_prompts=3, n_queries=2)
    assert sorted(np.concatenate([ep.prompt_idx, ep.query_idx]).tolist()) == list(range(5))
    assert not set(ep.prompt_idx) & set(ep.query_idx)
    assert ep.prompt_labels.shape == (3, 32, 32) and ep.query_labels.shape == (2, 1, 32, 32)


def test_sample_episode_determinism(ds):
    rng = nk.stream(3, "episodes")
    a = sample_episode(ds, "PE", rng, 3, 3)
    b = sample_episode(ds, "PE", rng, 3, 3)
    c = sample_episode(ds, "PE", nk.stream(3, "episodes"), 3, 3)
    assert not (np.array_equal(a.prompt_idx, b.prompt_idx) and a.class_id == b.class_id)
    assert np.array_equal(a.prompt_idx, c.prompt_idx) and a.keypoint == c.keypoint


def test_sample_episode_same_class(ds):
    for i in range(20):
        ep = sample_episode(ds, "SS", nk.stream(i, "x"), 3, 3)
        assert set(ds.class_ids[np.concatenate([ep.prompt_idx, ep.query_idx])]) == {ep.class_id}
        assert set(ds.splits[ep.prompt_idx]) == {"train"}


def test_pe_prompt_labels_single_peak(ds):
    for i in range(10):
        ep = sample_episode(ds, "PE", nk.stream(i, "pe"), 4, 1)
        for lab in ep.prompt_labels:
            # the peak sits within half a pixel diagonal of a pixel centre
            assert lab.max() >= np.exp(-0.5 / (2 * ds.sigma_px ** 2))
            interior = lab[1:-1, 1:-1]
            peaks = np.ones_like(interior, bool)
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    if dy or dx:
                        peaks &= interior >= lab[1 + dy:31 + dy, 1 + dx:31 + dx]
            assert (peaks & (interior > 0.5)).sum() == 1


def test_cls_episode_labels(ds):
    ep = sample_episode(ds, "CLS", nk.stream(0, "cls"), 3, 4)
    assert ep.prompt_labels is None
    own = ds.class_ids[ep.query_idx] == ep.class_id
    assert np.array_equal(ep.query_labels, own.astype(np.float32))
    assert ep.query_labels.sum() == 2


def test_sample_episode_no_eligible_class(ds):
    with pytest.raises(ValueError):
        sample_episode(ds, "SS", nk.stream(0), n_prompts=8, n_queries=8)
    with pytest.raises(ValueError):
        make_episode(ds, "PE", 0, [0, 1], [2])
    with pytest.raises(ValueError):
        make_episode(ds, "SS", 0, [0, 1], [1])


# -- training ---------------------------------------------------------------------
def test_train_log_and_config(ds):
    m = Model.create(SMALL, seed=1)
    rows = train(m, ds, TrainConfig(total_iters=6, warmup_iters=1, n_prompts=1, n_queries=1, seed=1))
    assert len(rows) == 6 and [r.iter for r in rows] == list(range(6))
    assert {r.task for r in rows} <= {"PE", "SS", "CLS"}
    with pytest.raises(ValueError):
        TrainConfig(total_iters=5, warmup_iters=5)
    with pytest.raises(ValueError):
        TrainConfig(ablation_mode="nope")


def test_baseline_vs_awl(ds):
    logs, params = {}, {}
    for mode in ("baseline", "awl"):
        m = Model.create(SMALL, seed=2)
        logs[mode] = train(m, ds, TrainConfig(total_iters=5, warmup_iters=1, n_prompts=1, n_queries=1,
                                              seed=2, ablation_mode=mode, tasks=("PE", "SS")))
        params[mode] = m.params.state()
    assert logs["baseline"][0].loss_t == logs["awl"][0].loss_t
    assert logs["baseline"][0].s_t == 0.0 and logs["awl"][0].s_t != 0.0
    assert any(not np.array_equal(params["baseline"][n], params["awl"][n]) for n in params["awl"])


def test_no_bias_tuning_syncs_banks(ds):
    m = Model.create(SMALL, seed=3)
    train(m, ds, TrainConfig(total_iters=4, warmup_iters=1, n_prompts=1, n_queries=1, seed=3, ablation_mode="awl"))
    P = m.params
    assert np.array_equal(P["encoder.bias.PE.block0.fc1"].data, P["encoder.bias.CLS.block0.fc1"].data)
    assert np.abs(P["encoder.bias.PE.block0.fc1"].data).max() > 0


def test_train_deterministic(ds):
    out = []
    for _ in range(2):
        m = Model.create(SMALL, seed=4)
        train(m, ds, TrainConfig(total_iters=4, warmup_iters=1, n_prompts=1, n_queries=1, seed=4))
        out.append(m.params.state())
    assert all(np.array_equal(out[0][n], out[1][n]) for n in out[0])


def test_overfit_single_episode_loss_drops(ds):
    one = ds.subset(ds.indices("train", 0)[:2])
    m = Model.create(SMALL, seed=0)
    rows = train(m, one, TrainConfig(total_iters=100, warmup_iters=10, n_prompts=1, n_queries=1, seed=0,
                                     tasks=("SS",), base_lr_scratch=2e-3))
    loss = [r.loss_t for r in rows]
    assert np.mean(loss[80:]) < np.mean(loss[:20])


# -- adaptation -------------------------------------------------------------------
def test_adapt_scope_contract(ds, trained):
    prompts = ds.indices("test", 3)[:4]
    out = adapt(trained, ds, prompts, "PE", AdaptConfig(steps=3, lr=1e-2))
    scope = set(adapt_scope(trained, "PE"))
    changed = {n for n in trained.params if not np.array_equal(trained.params[n].data, out.params[n].data)}
    assert changed and changed <= scope
    for p in trained.params.params():
        if p.name.startswith("encoder.") and p.kind == "weight":
            assert np.array_equal(p.tensor.data, out.params[p.name].data)
        if p.name.startswith(("encoder.bias.SS", "encoder.bias.CLS")):
            assert np.array_equal(p.tensor.data, out.params[p.name].data)


def test_adapt_zero_steps(ds, trained):
    out = adapt(trained, ds, ds.indices("test", 3)[:3], "SS", AdaptConfig(steps=0))
    assert all(np.array_equal(trained.params[n].data, out.params[n].data) for n in trained.params)


def test_adapt_full_scope_touches_weights(ds, trained):
    out = adapt(trained, ds, ds.indices("test", 4)[:4], "SS", AdaptConfig(steps=2, lr=1e-2, scope="full"))
    assert not np.array_equal(trained.params["encoder.block0.fc1.w"].data, out.params["encoder.block0.fc1.w"].data)
    assert np.array_equal(trained.params["encoder.bias.PE.patch"].data, out.params["encoder.bias.PE.patch"].data)
    assert np.array_equal(trained.params["loss.s.SS"].data, out.params["loss.s.SS"].data)


def test_adapt_errors(ds, trained):
    with pytest.raises(ValueError):
        adapt(trained, ds, ds.indices("test", 3)[:1], "PE", AdaptConfig())
    with pytest.raises(ValueError):
        AdaptConfig(ratio=1.0)
    with pytest.raises(ValueError):
        AdaptConfig(scope="weights")


def test_adapt_cls(ds, trained):
    out = adapt(trained, ds, ds.indices("test", 3)[:4], "CLS", AdaptConfig(steps=2, lr=1e-2))
    assert not np.array_equal(trained.params["encoder.bias.CLS.patch"].data, out.params["encoder.bias.CLS.patch"].data)


# -- prediction and evaluation ----------------------------------------------------
def test_predict_pure_and_order_invariant(ds, trained):
    ep = make_episode(ds, "PE", 3, ds.indices("test", 3)[:3], ds.indices("test", 3)[3:5], keypoint=1)
    before = trained.params.state()
    a = predict(trained, ep.query_images, ep.prompt_images, ep.prompt_labels, "PE")
    b = predict(trained, ep.query_images, ep.prompt_images, ep.prompt_labels, "PE")
    assert np.array_equal(a, b) and a.shape == (2, 1, 32, 32)
    perm = [2, 0, 1]
    c = predict(trained, ep.query_images, ep.prompt_images[perm], ep.prompt_labels[perm], "PE")
    assert np.abs(a - c).max() <= 1e-5
    assert all(np.array_equal(before[n], trained.params[n].data) for n in before)
    with pytest.raises(ValueError):
        predict(trained, ep.query_images, ep.prompt_images[:0], None, "SS")


@pytest.mark.parametrize("task", ["PE", "SS", "CLS"])
@pytest.mark.parametrize("mode", ["ID", "OOD", "CE"])
def test_evaluate_modes(ds, trained, task, mode):
    res = evaluate(trained, ds, task, EvalConfig(shots=2, mode=mode, seed=0, n_queries=2))
    assert set(res.per_class) == {ds.classes[c] for c in ds.classes_in("test")}
    assert all(0.0 <= v <= 100.0 for v in res.per_class.values())


def test_evaluate_with_adaptation_records_time(ds, trained):
    res = evaluate(trained, ds, "SS", EvalConfig(shots=3, seed=0, n_queries=2, adapt=AdaptConfig(steps=1)))
    assert res.adapt_seconds > 0


def test_eval_config_validation():
    with pytest.raises(ValueError):
        EvalConfig(mode="XX")
    with pytest.raises(ValueError):
        EvalConfig(shots=0)


def test_task_enum_in_episode(ds):
    ep = sample_episode(ds, TaskId.SS, nk.stream(0), 4, 2)
    assert ep.task is TaskId.SS and ep.shots == 4
