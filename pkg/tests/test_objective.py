import math

import numpy as np
import pytest

from promptperc import numkit as nk
from promptperc.model import Model, ModelConfig, TaskId
from promptperc.objective import TaskLoss, combined_loss, episode_objective, task_loss


def scalar(v, grad=False):
    return nk.Tensor(np.array(v, dtype=np.float64), requires_grad=grad)


def test_task_loss_half_everywhere():
    tl = task_loss(nk.Tensor(np.zeros((2, 1, 4, 4))), np.full((2, 1, 4, 4), 0.5), "SS")
    assert tl.value.item() == pytest.approx(math.log(2))
    assert tl.count == 2


def test_task_loss_saturated():
    z = np.array([25.0, -25.0, 30.0])
    tl = task_loss(nk.Tensor(z), np.array([1.0, 0.0, 1.0]), TaskId.CLS)
    assert tl.value.item() < 1e-8


def test_task_loss_single_pixel():
    tl = task_loss(nk.Tensor(np.zeros((1, 1, 1, 1))), np.ones((1, 1, 1, 1)), "PE")
    assert tl.value.item() == pytest.approx(0.6931, abs=1e-4)


def test_task_loss_errors():
    with pytest.raises(ValueError):
        task_loss(nk.Tensor(np.zeros(3)), np.array([0.0, 1.5, 0.0]), "CLS")
    with pytest.raises(ValueError):
        task_loss(nk.Tensor(np.zeros(3)), np.zeros(4), "CLS")


def test_task_loss_non_negative():
    rng = np.random.default_rng(0)
    for _ in range(20):
        z = rng.normal(0, 5, (3, 1, 5, 5))
        t = rng.uniform(0, 1, z.shape)
        assert task_loss(nk.Tensor(z), t, "PE").value.item() >= 0


def test_combined_loss_unit():
    ls = [TaskLoss(TaskId.PE, scalar(1.0), 1), TaskLoss(TaskId.SS, scalar(1.0), 1)]
    out = combined_loss(ls, {"PE": scalar(0.0), "SS": scalar(0.0)})
    assert out.item() == pytest.approx(2.0)


def test_combined_loss_missing_entry():
    with pytest.raises(KeyError):
        combined_loss([TaskLoss(TaskId.PE, scalar(1.0), 1)], {"SS": scalar(0.0)})


@pytest.mark.parametrize("L", [0.5, 1.0, math.e, 5.0])
def test_stationary_point_value(L):
    s = math.log(L)
    out = combined_loss([TaskLoss(TaskId.PE, scalar(L), 1)], {"PE": scalar(s)})
    assert out.item() == pytest.approx(1 + math.log(L))


@pytest.mark.parametrize("L", [0.5, 1.0, math.e, 5.0])
def test_gradient_vanishes_at_log_loss(L):
    s = scalar(math.log(L), True)
    nk.backward(combined_loss([TaskLoss(TaskId.PE, scalar(L), 1)], {"PE": s}))
    assert abs(float(s.grad)) < 1e-12


def test_weight_decreases_with_s():
    prev = None
    for s in np.linspace(-3, 3, 13):
        loss = scalar(2.0, True)
        nk.backward(combined_loss([TaskLoss(TaskId.PE, loss, 1)], {"PE": scalar(s)}))
        w = float(loss.grad)
        if prev is not None:
            assert w < prev
        prev = w


def test_gradient_reaches_loss_and_s():
    L = scalar(3.0, True)
    s = scalar(0.5, True)
    nk.backward(combined_loss([TaskLoss(TaskId.SS, L, 1)], {"SS": s}))
    assert float(L.grad) == pytest.approx(math.exp(-0.5))
    assert float(s.grad) == pytest.approx(1 - math.exp(-0.5) * 3.0)


# -- episode objective ------------------------------------------------------------
class _Ep:
    def __init__(self, task, pi, pl, qi, ql):
        self.task = TaskId.parse(task)
        self.prompt_images, self.prompt_labels = pi, pl
        self.query_images, self.query_labels = qi, ql


@pytest.fixture(scope="module")
def small_model():
    cfg = ModelConfig(image_size=8, patch_size=4, dim=8, heads=2, blocks=2, hierarchies=2,
                      decoder_channels=4)
    return Model.create(cfg, seed=3).astype(np.float64)


def _episode(rng, n_q=1, task="SS"):
    pi = rng.uniform(0, 1, (2, 3, 8, 8))
    pl = (rng.uniform(0, 1, (2, 8, 8)) > 0.5).astype(float)
    qi = rng.uniform(0, 1, (n_q, 3, 8, 8))
    ql = (rng.uniform(0, 1, (n_q, 1, 8, 8)) > 0.5).astype(float)
    return _Ep(task, pi, pl, qi, ql)


def test_single_query_zero_s_equals_task_loss(small_model):
    ep = _episode(np.random.default_rng(0))
    obj, parts = episode_objective(small_model, ep, weighted=True)
    assert obj.item() == pytest.approx(parts[0].value.item(), rel=1e-12)


def test_duplicated_query_leaves_objective(small_model):
    ep = _episode(np.random.default_rng(1))
    dup = _Ep("SS", ep.prompt_images, ep.prompt_labels,
              np.concatenate([ep.query_images] * 2), np.concatenate([ep.query_labels] * 2))
    a, _ = episode_objective(small_model, ep)
    b, _ = episode_objective(small_model, dup)
    assert a.item() == pytest.approx(b.item(), rel=1e-12)


def test_empty_query_set(small_model):
    ep = _episode(np.random.default_rng(2))
    ep.query_images = ep.query_images[:0]
    with pytest.raises(ValueError):
        episode_objective(small_model, ep)


def test_episode_objective_gradcheck(small_model):
    from promptperc.numkit.gradcheck import directional_check

    model = Model(small_model.cfg, small_model.params.copy())
    model.params["loss.s.SS"].data = np.array(0.3)
    ep = _episode(np.random.default_rng(4), n_q=2)
    # only parameters on the SS path carry gradient
    skip = ("encoder.bias.PE", "encoder.bias.CLS", "cls.", "loss.s.PE", "loss.s.CLS")
    names = [n for n in model.params if not n.startswith(skip)]
    errs = directional_check(lambda: episode_objective(model, ep, weighted=True)[0],
                             model.params.tensors(names), np.random.default_rng(5))
    assert max(errs.values()) < 1e-4
