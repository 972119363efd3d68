"""Episode sampling, multi-task training, bias-only adaptation and evaluation."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import numkit as nk
from .metrics import classification_accuracy, extract_keypoint, miou, pck
from .model import (
    DENSE_TASKS,
    Model,
    TaskId,
    bank_of,
    is_bank_param,
    uncertainty_name,
)
from .objective import episode_objective
from .synthdata import Dataset

ABLATION_MODES = ("baseline", "awl", "bt", "awl_bt", "awl_ft")
SPLIT_MODES = ("ID", "OOD", "CE")


@dataclass
class Episode:
    task: TaskId
    class_id: int
    prompt_idx: np.ndarray
    query_idx: np.ndarray
    prompt_images: np.ndarray
    prompt_labels: np.ndarray | None  # (N, S, S); None for CLS
    query_images: np.ndarray
    query_labels: np.ndarray  # (Q, 1, S, S) dense targets or (Q,) class labels
    keypoint: int | None = None

    @property
    def shots(self) -> int:
        return len(self.prompt_idx)


def dense_labels(dataset: Dataset, idx: Sequence[int], task: TaskId, keypoint: int | None) -> np.ndarray:
    if task is TaskId.PE:
        return dataset.heatmaps(idx, keypoint)
    return dataset.masks[np.asarray(idx)]


def make_episode(dataset: Dataset, task: "TaskId | str", class_id: int, prompt_idx, query_idx,
                 keypoint: int | None = None, query_targets=None) -> Episode:
    """Assemble an episode from explicit sample indices.

    For CLS, ``query_targets`` gives the 0/1 label of each query; by default a
    query is positive when it belongs to ``class_id``.
    """
    task = TaskId.parse(task)
    p = np.asarray(prompt_idx, dtype=int)
    q = np.asarray(query_idx, dtype=int)
    if np.intersect1d(p, q).size:
        raise ValueError("prompts and queries overlap")
    if task is TaskId.CLS:
        if query_targets is None:
            query_targets = (dataset.class_ids[q] == class_id).astype(np.float32)
        return Episode(task, class_id, p, q, dataset.images[p], None, dataset.images[q],
                       np.asarray(query_targets, np.float32))
    if task is TaskId.PE and keypoint is None:
        raise ValueError("PE episodes need a keypoint index")
    ql = dense_labels(dataset, q, task, keypoint)[:, None]
    return Episode(task, class_id, p, q, dataset.images[p], dense_labels(dataset, p, task, keypoint),
                   dataset.images[q], ql, keypoint)


def eligible_classes(dataset: Dataset, need: int, split: str | None = None,
                     classes: Sequence[int] | None = None) -> list[int]:
    pool = dataset.classes_in(split) if split is not None else sorted(set(dataset.class_ids.tolist()))
    if classes is not None:
        pool = [c for c in pool if c in set(classes)]
    return [c for c in pool if len(dataset.indices(split, c)) >= need]


def sample_episode(dataset: Dataset, task: "TaskId | str", rng: np.random.Generator, n_prompts: int = 5,
                   n_queries: int = 5, split: str | None = "train",
                   classes: Sequence[int] | None = None) -> Episode:
    """Uniform class, then prompts and queries without replacement from it.

    PE draws one keypoint index for the whole episode.  CLS keeps the prompts in
    the chosen class and fills the queries half with further members of that
    class, half with samples of other classes in the same split.
    """
    task = TaskId.parse(task)
    if n_prompts < 1 or n_queries < 1:
        raise ValueError("episodes need at least one prompt and one query")
    n_pos = n_queries if task is not TaskId.CLS else (n_queries + 1) // 2
    pool = eligible_classes(dataset, n_prompts + n_pos, split, classes)
    if not pool:
        raise ValueError(f"no class has {n_prompts + n_pos} samples for a {task.value} episode")
    c = int(pool[rng.integers(len(pool))])
    members = dataset.indices(split, c)
    pick = rng.choice(members, size=n_prompts + n_pos, replace=False)
    prompts, queries = pick[:n_prompts], pick[n_prompts:]
    if task is TaskId.CLS:
        others = np.setdiff1d(dataset.indices(split), members)
        n_neg = min(n_queries - n_pos, len(others))
        neg = rng.choice(others, size=n_neg, replace=False) if n_neg else np.zeros(0, int)
        queries = np.concatenate([queries, neg])
        return make_episode(dataset, task, c, prompts, queries)
    k = None
    if task is TaskId.PE:
        k = int(rng.integers(dataset.num_keypoints(c)))
    return make_episode(dataset, task, c, prompts, queries, keypoint=k)


# -- training ---------------------------------------------------------------------
@dataclass
class TrainConfig:
    total_iters: int = 2000
    warmup_iters: int = 100
    base_lr_pretrained: float = 1e-5  # reserved for a pretrained backbone, unused here
    base_lr_scratch: float = 1e-3
    batch_episodes: int = 1
    n_prompts: int = 5
    n_queries: int = 5
    seed: int = 0
    ablation_mode: str = "awl_bt"
    tasks: tuple[str, ...] = ("PE", "SS", "CLS")
    split: str = "train"
    classes: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.warmup_iters >= self.total_iters:
            raise ValueError("warmup_iters must be below total_iters")
        if self.n_prompts < 1 or self.n_queries < 1 or self.batch_episodes < 1:
            raise ValueError("n_prompts, n_queries and batch_episodes must be positive")
        if self.ablation_mode not in ABLATION_MODES:
            raise ValueError(f"unknown ablation mode {self.ablation_mode!r}")
        object.__setattr__(self, "tasks", tuple(TaskId.parse(t).value for t in self.tasks))
        if self.classes is not None:
            self.classes = tuple(int(c) for c in self.classes)

    @property
    def weighted(self) -> bool:
        return self.ablation_mode.startswith("awl")

    @property
    def bias_tuning(self) -> bool:
        return self.ablation_mode in ("bt", "awl_bt", "awl_ft")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = list(self.tasks)
        d["classes"] = None if self.classes is None else list(self.classes)
        return d


@dataclass
class LogRow:
    iter: int
    task: str
    loss_t: float
    s_t: float
    lr: float


def training_mask(model: Model, task: TaskId, bank: str, weighted: bool) -> list[str]:
    """Names updated on an iteration of ``task`` drawing biases from ``bank``."""
    names = []
    for n in model.params:
        if is_bank_param(n):
            if bank_of(n) == bank:
                names.append(n)
        elif n.startswith("loss.s."):
            if weighted and n == uncertainty_name(task):
                names.append(n)
        else:
            names.append(n)
    return names


def _sync_banks(model: Model, source: str) -> None:
    """Copy one bias bank onto every other bank."""
    prefix = f"encoder.bias.{source}."
    for n in list(model.params):
        b = bank_of(n)
        if b is not None and b != source:
            local = n.split(".", 3)[3]
            model.params[n].data = model.params[prefix + local].data.copy()


def train(model: Model, dataset: Dataset, cfg: TrainConfig,
          callback: Callable[[int, Model], None] | None = None,
          log: Callable[[LogRow], None] | None = None) -> list[LogRow]:
    """Episodic multi-task training; updates ``model.params`` in place.

    Each iteration draws a task uniformly, samples ``batch_episodes`` episodes
    of that task and takes one Adam step under the warmup + poly schedule.
    Without bias tuning all tasks share one bias bank during training, which is
    copied to every bank at the end.
    """
    tasks = [TaskId.parse(t) for t in cfg.tasks]
    missing = [t.value for t in tasks if t.value not in model.cfg.tasks]
    if missing:
        raise KeyError(f"model has no bank for tasks {missing}")
    state = nk.AdamState()
    rows: list[LogRow] = []
    shared_bank = tasks[0].value
    for it in range(cfg.total_iters):
        rng = nk.stream(cfg.seed, "train", it)
        task = tasks[int(rng.integers(len(tasks)))]
        eps = [sample_episode(dataset, task, rng, cfg.n_prompts, cfg.n_queries, cfg.split, cfg.classes)
               for _ in range(cfg.batch_episodes)]
        bank = task.value if cfg.bias_tuning else shared_bank
        mask = training_mask(model, task, bank, cfg.weighted)
        model.params.zero_grad()
        model.params.requires_grad(False)
        model.params.requires_grad(True, mask)
        loss, parts = episode_objective(model, eps, weighted=cfg.weighted, bank=bank)
        nk.backward(loss)
        lr = nk.poly_lr(it + 1, cfg.warmup_iters, cfg.total_iters, cfg.base_lr_scratch)
        nk.adam_step(model.params.tensors(), model.params.grads(mask), state, lr, mask=mask)
        s_val = float(model.params[uncertainty_name(task)].data)
        row = LogRow(it, task.value, float(parts[0].value.data), s_val, lr)
        rows.append(row)
        if log is not None:
            log(row)
        if callback is not None:
            callback(it, model)
    model.params.zero_grad()
    model.params.requires_grad(False)
    if not cfg.bias_tuning:
        _sync_banks(model, shared_bank)
    return rows


# -- adaptation -------------------------------------------------------------------
@dataclass
class AdaptConfig:
    steps: int = 100
    lr: float = 1e-3
    ratio: float = 0.5
    scope: str = "bias"  # "bias" or "full"
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.ratio < 1:
            raise ValueError("ratio must lie in (0, 1)")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.scope not in ("bias", "full"):
            raise ValueError(f"unknown adaptation scope {self.scope!r}")


def adapt_scope(model: Model, task: "TaskId | str", scope: str = "bias") -> list[str]:
    """Names tuned during adaptation.

    ``bias``: the task's encoder bias bank, the label-encoder input projection
    and the decoder output head.  ``full``: every parameter except other tasks'
    banks and the loss log-variances.
    """
    task = TaskId.parse(task)
    names = []
    for n in model.params:
        b = bank_of(n)
        if b is not None:
            if b == task.value:
                names.append(n)
        elif n.startswith("loss."):
            continue
        elif scope == "full" or n.startswith(("label.proj.", "decoder.head.")):
            names.append(n)
    return names


def adapt(model: Model, dataset: Dataset, prompt_idx: Sequence[int], task: "TaskId | str",
          cfg: AdaptConfig, keypoints: Sequence[int] | None = None) -> Model:
    """Tune a copy of ``model`` on a labelled prompt set.

    Every step splits the prompt set at random into P~ (prompts) and Q~
    (queries) and minimises the task loss on Q~.  PE draws a keypoint index per
    step from ``keypoints`` (default: all keypoints the prompt samples share).
    Optimiser state starts fresh.
    """
    task = TaskId.parse(task)
    prompt_idx = np.asarray(prompt_idx, dtype=int)
    if len(prompt_idx) < 2:
        raise ValueError("adaptation needs at least two labelled prompts")
    out = Model(model.cfg, model.params.copy())
    names = adapt_scope(out, task, cfg.scope)
    if not names:
        raise ValueError("adaptation scope is empty")
    if task is TaskId.PE and keypoints is None:
        keypoints = range(min(len(dataset.keypoints[i]) for i in prompt_idx))
    keypoints = list(keypoints) if keypoints is not None else None
    state = nk.AdamState()
    n_p = min(max(1, int(round(cfg.ratio * len(prompt_idx)))), len(prompt_idx) - 1)
    out.params.requires_grad(False)
    for step in range(cfg.steps):
        rng = nk.stream(cfg.seed, "adapt", step)
        perm = rng.permutation(prompt_idx)
        p, q = perm[:n_p], perm[n_p:]
        cls_id = int(dataset.class_ids[p[0]])
        k = keypoints[int(rng.integers(len(keypoints)))] if task is TaskId.PE else None
        ep = make_episode(dataset, task, cls_id, p, q, keypoint=k,
                          query_targets=np.ones(len(q), np.float32) if task is TaskId.CLS else None)
        out.params.zero_grad()
        out.params.requires_grad(True, names)
        loss, _ = episode_objective(out, ep, weighted=False)
        nk.backward(loss)
        nk.adam_step(out.params.tensors(), out.params.grads(names), state, cfg.lr, mask=names)
    out.params.zero_grad()
    out.params.requires_grad(False)
    return out


def predict(model: Model, query_images, prompt_images, prompt_labels, task: "TaskId | str") -> np.ndarray:
    """Forward pass with the task's own bank; returns logits as a plain array."""
    task = TaskId.parse(task)
    if task in DENSE_TASKS and (prompt_labels is None or len(prompt_images) == 0):
        raise ValueError("dense tasks need a non-empty labelled prompt set")
    return np.array(model.forward(query_images, prompt_images, prompt_labels, task).data)


# -- evaluation -------------------------------------------------------------------
@dataclass
class EvalConfig:
    shots: int = 10
    mode: str = "ID"
    seed: int = 0
    sigma: float = 0.2
    n_queries: int | None = None  # None: every remaining sample of the query class
    adapt: AdaptConfig | None = None
    train_split: str = "train"
    test_split: str = "test"

    def __post_init__(self):
        if self.mode not in SPLIT_MODES:
            raise ValueError(f"unknown split mode {self.mode!r}")
        if self.shots < 1:
            raise ValueError("shots must be positive")


@dataclass
class EvalResult:
    task: TaskId
    metric: str
    per_class: dict[str, float]
    adapt_seconds: float = 0.0
    details: list = field(default_factory=list)

    @property
    def macro(self) -> float:
        return float(np.mean(list(self.per_class.values())))


def _prompt_source(dataset: Dataset, cfg: EvalConfig, query_class: int, rng) -> int:
    """Class that supplies the prompts for queries of ``query_class``."""
    if cfg.mode == "ID":
        return query_class
    if cfg.mode == "OOD":
        others = [c for c in dataset.classes_in(cfg.test_split) if c != query_class]
        if not others:
            raise ValueError("OOD mode needs at least two test classes")
        return int(others[int(rng.integers(len(others)))])
    pool = dataset.classes_in(cfg.train_split)
    if not pool:
        raise ValueError("CE mode needs training classes")
    return int(pool[int(rng.integers(len(pool)))])


def evaluate(model: Model, dataset: Dataset, task: "TaskId | str", cfg: EvalConfig,
             classes: Sequence[int] | None = None) -> EvalResult:
    """Macro-averaged metric over query classes of the test split.

    Per query class: draw ``shots`` prompts from the class chosen by the split
    mode, optionally adapt on them, then score every other sample of the query
    class (every keypoint index for PE).
    """
    task = TaskId.parse(task)
    classes = list(classes) if classes is not None else dataset.classes_in(cfg.test_split)
    if not classes:
        raise ValueError(f"no classes in split {cfg.test_split!r}")
    S = dataset.image_size
    crop_box = (-0.5, -0.5, S, S)
    per_class: dict[str, float] = {}
    adapt_secs = 0.0
    for c in classes:
        rng = nk.stream(cfg.seed, "eval", cfg.mode, c)
        src = _prompt_source(dataset, cfg, c, rng)
        split_src = cfg.train_split if cfg.mode == "CE" else cfg.test_split
        members = dataset.indices(split_src, src)
        if len(members) < cfg.shots:
            raise ValueError(f"class {src} has fewer than {cfg.shots} samples")
        prompts = rng.choice(members, size=cfg.shots, replace=False)
        queries = np.setdiff1d(dataset.indices(cfg.test_split, c), prompts)
        if cfg.n_queries is not None:
            queries = rng.choice(queries, size=min(cfg.n_queries, len(queries)), replace=False)
        if task is TaskId.CLS:
            others = np.setdiff1d(dataset.indices(cfg.test_split), dataset.indices(cfg.test_split, c))
            others = np.setdiff1d(others, prompts)
            neg = rng.choice(others, size=min(len(queries), len(others)), replace=False)
            queries = np.concatenate([queries, neg])
        n_kp = min(dataset.num_keypoints(src), dataset.num_keypoints(c))
        m = model
        if cfg.adapt is not None and cfg.shots >= 2:
            t0 = time.perf_counter()
            m = adapt(model, dataset, prompts, task, replace(cfg.adapt, seed=cfg.adapt.seed + 7919 * c),
                      keypoints=range(n_kp) if task is TaskId.PE else None)
            adapt_secs += time.perf_counter() - t0
        if task is TaskId.PE:
            hits = []
            for k in range(n_kp):
                ep = make_episode(dataset, task, c, prompts, queries, keypoint=k)
                logits = predict(m, ep.query_images, ep.prompt_images, ep.prompt_labels, task)
                for qi, sample in enumerate(queries):
                    kp = extract_keypoint(logits[qi, 0])
                    hits.append(pck([kp.coord], [dataset.keypoints[sample][k][:2]], crop_box, cfg.sigma))
            per_class[dataset.classes[c]] = float(np.mean(hits))
        elif task is TaskId.SS:
            ep = make_episode(dataset, task, c, prompts, queries)
            logits = predict(m, ep.query_images, ep.prompt_images, ep.prompt_labels, task)
            vals = [miou(logits[i, 0] >= 0, dataset.masks[s] > 0.5) for i, s in enumerate(queries)]
            per_class[dataset.classes[c]] = 100.0 * float(np.mean(vals))
        else:
            # a query is positive when it shares the prompts' class
            ep = make_episode(dataset, task, src, prompts, queries)
            scores = predict(m, ep.query_images, ep.prompt_images, None, task)
            per_class[dataset.classes[c]] = classification_accuracy(scores, ep.query_labels)
    metric = {TaskId.PE: f"PCK@{cfg.sigma:g}", TaskId.SS: "mIoU", TaskId.CLS: "Acc"}[task]
    return EvalResult(task, metric, per_class, adapt_secs)
