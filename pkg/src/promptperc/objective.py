"""Per-task cross-entropy losses and uncertainty-weighted task combination."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import numkit as nk
from .model import DENSE_TASKS, Model, TaskId, uncertainty_name
from .numkit import Tensor


@dataclass
class TaskLoss:
    task: TaskId
    value: Tensor  # scalar, differentiable
    count: int


def task_loss(logits: Tensor, target, task: "TaskId | str") -> TaskLoss:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against ``target``.

    Dense tasks average over every pixel of every query; CLS averages over
    the query scores.  Targets may be soft (Gaussian heatmaps) but must lie
    in [0, 1].
    """
    task = TaskId.parse(task)
    t = np.asarray(target, dtype=logits.dtype)
    if t.shape != logits.shape:
        if t.size == logits.size and task in DENSE_TASKS:
            t = t.reshape(logits.shape)
        else:
            raise ValueError(f"target shape {t.shape} does not match prediction {logits.shape}")
    if t.size and (t.min() < 0 or t.max() > 1):
        raise ValueError("targets must lie in [0, 1]")
    count = logits.shape[0] if logits.ndim else 1
    return TaskLoss(task, nk.bce_with_logits(logits, t), count)


def combined_loss(losses: Sequence[TaskLoss], s: Mapping[str, Tensor]) -> Tensor:
    """Sum over tasks of exp(-s_t) * L_t + s_t."""
    total = None
    for tl in losses:
        key = tl.task.value
        if key not in s:
            raise KeyError(f"no uncertainty parameter for task {key}")
        st = s[key]
        term = nk.exp(-st) * tl.value + st
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no losses to combine")
    return total


def unweighted_loss(losses: Sequence[TaskLoss]) -> Tensor:
    total = losses[0].value
    for tl in losses[1:]:
        total = total + tl.value
    return total


def uncertainty_params(model: Model) -> dict[str, Tensor]:
    return {t: model.params[uncertainty_name(t)] for t in model.cfg.tasks}


def episode_loss(model: Model, episode, bank=None) -> TaskLoss:
    """Mean task loss over an episode's queries given its prompts."""
    if len(episode.query_images) == 0:
        raise ValueError("episode has no queries")
    labels = None if episode.task is TaskId.CLS else episode.prompt_labels
    logits = model.forward(episode.query_images, episode.prompt_images, labels, episode.task, bank=bank)
    return task_loss(logits, episode.query_labels, episode.task)


def episode_objective(model: Model, episodes, weighted: bool = True, bank=None) -> tuple[Tensor, list[TaskLoss]]:
    """Objective over one or more episodes.

    Per task, the query-averaged losses of its episodes are averaged, then
    tasks are combined by :func:`combined_loss` (``weighted``) or summed.
    """
    if not isinstance(episodes, (list, tuple)):
        episodes = [episodes]
    per_task: dict[TaskId, list[TaskLoss]] = {}
    for ep in episodes:
        per_task.setdefault(ep.task, []).append(episode_loss(model, ep, bank=bank))
    merged = []
    for task, ls in per_task.items():
        # weight each episode by its query count so duplicated queries leave the mean unchanged
        n = sum(tl.count for tl in ls)
        val = ls[0].value * (ls[0].count / n)
        for tl in ls[1:]:
            val = val + tl.value * (tl.count / n)
        merged.append(TaskLoss(task, val, n))
    if weighted:
        return combined_loss(merged, uncertainty_params(model)), merged
    return unweighted_loss(merged), merged
