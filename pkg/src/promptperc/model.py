"""Prompt-conditioned perception model.

Four parts, composed in :meth:`Model.forward`:

* image encoder: a pre-norm ViT whose weights are shared by every task while
  each task owns its own bank of additive biases;
* label encoder: one strided convolution plus a learned positional embedding;
* matching: per-hierarchy multi-head attention whose queries come from the
  query image, keys from the prompt images and values from the prompt labels;
* decoder: a small DPT-style reassemble/fuse pyramid ending in a single-channel
  convolutional head, plus a linear classification head.
"""
from __future__ import annotations

import hashlib
import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from . import numkit as nk
from .numkit import Tensor


class TaskId(str, Enum):
    PE = "PE"
    SS = "SS"
    CLS = "CLS"

    @classmethod
    def parse(cls, value: "TaskId | str") -> "TaskId":
        try:
            return cls(value)
        except ValueError:
            raise KeyError(f"unknown task {value!r}") from None


DENSE_TASKS = (TaskId.PE, TaskId.SS)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    dim: int = 64
    heads: int = 4
    blocks: int = 4
    hierarchies: int = 4
    mlp_ratio: int = 4
    decoder_channels: int = 32
    in_channels: int = 3
    tasks: tuple[str, ...] = ("PE", "SS", "CLS")
    init: str = "fan_in"  # "vit": std 0.02 everywhere; "fan_in": 1/sqrt(fan_in) outside the transformer blocks

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.dim % self.heads:
            raise ValueError("dim must equal heads * head_dim")
        if not 1 <= self.hierarchies <= min(self.blocks, 4):
            raise ValueError("hierarchies must be in [1, min(blocks, 4)]")
        if not self.tasks:
            raise ValueError("at least one task is required")
        if self.init not in ("vit", "fan_in"):
            raise ValueError(f"unknown init scheme {self.init!r}")
        object.__setattr__(self, "tasks", tuple(TaskId.parse(t).value for t in self.tasks))

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def tokens(self) -> int:
        return self.grid ** 2

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def tap_blocks(self) -> list[int]:
        """Indices of the encoder blocks whose outputs feed the hierarchy levels."""
        return [round((j + 1) * self.blocks / self.hierarchies) - 1 for j in range(self.hierarchies)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = list(self.tasks)
        return d

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Param:
    name: str
    kind: str  # "weight" | "bias"
    tensor: Tensor

    def __post_init__(self):
        if self.kind not in ("weight", "bias"):
            raise ValueError(f"bad param kind {self.kind!r}")


class ParamStore:
    """Ordered, uniquely named collection of :class:`Param`."""

    def __init__(self, params: Iterable[Param] = ()):
        self._p: "OrderedDict[str, Param]" = OrderedDict()
        for p in params:
            self.add(p)

    def add(self, p: Param) -> None:
        if p.name in self._p:
            raise KeyError(f"duplicate parameter name {p.name}")
        self._p[p.name] = p

    def __getitem__(self, name: str) -> Tensor:
        return self._p[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self._p

    def __iter__(self) -> Iterator[str]:
        return iter(self._p)

    def __len__(self) -> int:
        return len(self._p)

    def param(self, name: str) -> Param:
        return self._p[name]

    def items(self):
        return ((n, p.tensor) for n, p in self._p.items())

    def params(self) -> list[Param]:
        return list(self._p.values())

    def tensors(self, names: Iterable[str] | None = None) -> dict[str, Tensor]:
        names = self._p if names is None else names
        return {n: self._p[n].tensor for n in names}

    def grads(self, names: Iterable[str] | None = None) -> dict[str, np.ndarray]:
        out = {}
        for n, t in self.tensors(names).items():
            out[n] = np.zeros_like(t.data) if t.grad is None else t.grad
        return out

    def zero_grad(self) -> None:
        for p in self._p.values():
            p.tensor.grad = None

    def requires_grad(self, flag: bool = True, names: Iterable[str] | None = None) -> None:
        for t in self.tensors(names).values():
            t.requires_grad = flag

    def astype(self, dtype) -> "ParamStore":
        return ParamStore(Param(p.name, p.kind, Tensor(p.tensor.data.astype(dtype), p.tensor.requires_grad))
                          for p in self._p.values())

    def copy(self) -> "ParamStore":
        return ParamStore(Param(p.name, p.kind, Tensor(p.tensor.data.copy(), p.tensor.requires_grad))
                          for p in self._p.values())

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.tensor.data) for n, p in self._p.items())

    def load_state(self, arrays: Mapping[str, np.ndarray]) -> None:
        missing = set(self._p) - set(arrays)
        extra = set(arrays) - set(self._p)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} extra={sorted(extra)[:5]}")
        for n, arr in arrays.items():
            t = self._p[n].tensor
            if arr.shape != t.shape:
                raise ValueError(f"shape mismatch for {n}: {arr.shape} vs {t.shape}")
            t.data = np.array(arr, dtype=arr.dtype, copy=True)

    def count(self, predicate=lambda p: True) -> int:
        return sum(p.tensor.size for p in self._p.values() if predicate(p))


# -- naming --------------------------------------------------------------
BANK_PREFIX = "encoder.bias."


def bank_name(task: "TaskId | str", local: str) -> str:
    return f"{BANK_PREFIX}{TaskId.parse(task).value}.{local}"


def is_bank_param(name: str) -> bool:
    return name.startswith(BANK_PREFIX)


def bank_of(name: str) -> str | None:
    return name[len(BANK_PREFIX):].split(".", 1)[0] if is_bank_param(name) else None


def uncertainty_name(task: "TaskId | str") -> str:
    return f"loss.s.{TaskId.parse(task).value}"


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return (x * std).astype(np.float32)


def _encoder_bias_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    d, hid = cfg.dim, cfg.dim * cfg.mlp_ratio
    shapes: "OrderedDict[str, tuple[int, ...]]" = OrderedDict(patch=(d,))
    for i in range(cfg.blocks):
        shapes[f"block{i}.ln1"] = (d,)
        shapes[f"block{i}.qkv"] = (3 * d,)
        shapes[f"block{i}.proj"] = (d,)
        shapes[f"block{i}.ln2"] = (d,)
        shapes[f"block{i}.fc1"] = (hid,)
        shapes[f"block{i}.fc2"] = (d,)
    return shapes


def _level_scales(cfg: ModelConfig) -> list[float]:
    # resolution of each reassembled level relative to the token grid
    return [4.0, 2.0, 1.0, 0.5][:cfg.hierarchies]


def init_params(cfg: ModelConfig, seed: int = 0) -> ParamStore:
    """Truncated-normal weights, zero biases, unit LayerNorm gains.

    Transformer-block weights use std 0.02.  Under ``init="vit"`` so does
    everything else.  Under ``init="fan_in"`` the patch and positional
    embeddings, matching, decoder and classifier weights use 1/sqrt(fan_in)
    (unit std for positional embeddings), so that matching logits are not
    vanishingly small at the start of training.
    """
    rng = nk.stream(seed, "init")
    d, p, c, hid, F = cfg.dim, cfg.patch_size, cfg.in_channels, cfg.dim * cfg.mlp_ratio, cfg.decoder_channels
    store = ParamStore()

    def w(name, shape, fan_in=None):
        std = 0.02 if fan_in is None or cfg.init == "vit" else 1.0 / np.sqrt(fan_in)
        store.add(Param(name, "weight", Tensor(_trunc_normal(rng, shape, std))))

    def ones(name, shape):
        store.add(Param(name, "weight", Tensor(np.ones(shape, np.float32))))

    def b(name, shape, kind="bias"):
        store.add(Param(name, kind, Tensor(np.zeros(shape, np.float32))))

    # image encoder: shared weights
    w("encoder.patch.w", (d, c, p, p), c * p * p)
    w("encoder.pos", (cfg.tokens, d), 1)
    for i in range(cfg.blocks):
        ones(f"encoder.block{i}.ln1.w", (d,))
        w(f"encoder.block{i}.qkv.w", (d, 3 * d))
        w(f"encoder.block{i}.proj.w", (d, d))
        ones(f"encoder.block{i}.ln2.w", (d,))
        w(f"encoder.block{i}.fc1.w", (d, hid))
        w(f"encoder.block{i}.fc2.w", (hid, d))
    # per-task bias banks
    for task in cfg.tasks:
        for local, shape in _encoder_bias_shapes(cfg).items():
            b(bank_name(task, local), shape)
    # label encoder
    w("label.proj.w", (d, 1, p, p), p * p)
    b("label.proj.b", (d,))
    w("label.pos", (cfg.tokens, d), 1)
    # matching, one attention layer per hierarchy
    for j in range(cfg.hierarchies):
        for m in ("wq", "wk", "wv", "wo"):
            w(f"match.level{j}.{m}", (d, d), d)
    # dense decoder
    for j, scale in enumerate(_level_scales(cfg)):
        w(f"decoder.reassemble{j}.proj.w", (F, d, 1, 1), d)
        if scale > 1:
            k = int(scale)
            w(f"decoder.reassemble{j}.resample.w", (F, F, k, k), F)
        else:
            w(f"decoder.reassemble{j}.resample.w", (F, F, 3, 3), F * 9)
        b(f"decoder.reassemble{j}.resample.b", (F,))
        w(f"decoder.fuse{j}.conv.w", (F, F, 3, 3), F * 9)
        b(f"decoder.fuse{j}.conv.b", (F,))
    w("decoder.head.conv.w", (F // 2, F, 3, 3), F * 9)
    b("decoder.head.conv.b", (F // 2,))
    w("decoder.head.out.w", (1, F // 2, 1, 1), F // 2)
    b("decoder.head.out.b", (1,))
    # classification head
    w("cls.w", (d,), d)
    b("cls.b", ())
    # homoscedastic log-variances, one per task
    for task in cfg.tasks:
        b(uncertainty_name(task), (), kind="weight")
    return store


# -- the model -------------------------------------------------------------
@dataclass
class TokenGrid:
    """Patch tokens of shape (..., h*w, d) on an h x w grid."""

    tokens: Tensor
    h: int
    w: int

    def __post_init__(self):
        if self.tokens.shape[-2] != self.h * self.w:
            raise ValueError("token count does not match grid dims")


@dataclass
class Prediction:
    task: TaskId
    dense: np.ndarray | None = None  # (1, S, S) logits
    score: float | None = None  # classification logit

    def __post_init__(self):
        if (self.dense is None) == (self.score is None):
            raise ValueError("exactly one of dense/score must be set")


def switch_task_bias(params: ParamStore, task: "TaskId | str") -> dict[str, Tensor]:
    """View of the image-encoder bias bank of ``task`` keyed by local name.

    The returned tensors are the stored ones (no copy), so selecting a bank is
    an explicit per-call choice and never mutates shared state.
    """
    task = TaskId.parse(task)
    view = {}
    prefix = BANK_PREFIX + task.value + "."
    for name in params:
        if name.startswith(prefix):
            view[name[len(prefix):]] = params[name]
    if not view:
        raise KeyError(f"no bias bank for task {task.value}")
    return view


@dataclass
class Model:
    cfg: ModelConfig
    params: ParamStore
    match_calls: int = field(default=0, compare=False)
    attention_hook: object = field(default=None, compare=False)

    @classmethod
    def create(cls, cfg: ModelConfig | None = None, seed: int = 0) -> "Model":
        cfg = cfg or ModelConfig()
        return cls(cfg, init_params(cfg, seed))

    def astype(self, dtype) -> "Model":
        return Model(self.cfg, self.params.astype(dtype))

    @property
    def dtype(self):
        return self.params["encoder.pos"].dtype

    def _arr(self, x) -> Tensor:
        return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))

    # -- image encoder ---------------------------------------------------
    def encode_image(self, images, task: "TaskId | str", bank: "TaskId | str | None" = None
                     ) -> list[TokenGrid]:
        """Encode (B,C,S,S) images; returns one grid per hierarchy level."""
        cfg, P = self.cfg, self.params
        task = TaskId.parse(task)
        if task.value not in cfg.tasks:
            raise KeyError(f"task {task.value} not configured")
        biases = switch_task_bias(P, bank if bank is not None else task)
        x = self._arr(images)
        if x.ndim == 3:
            x = x.reshape((1,) + x.shape)
        if x.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise ValueError(f"image shape {x.shape[1:]} does not match config")
        B, d, g = x.shape[0], cfg.dim, cfg.grid
        t = nk.conv2d(x, P["encoder.patch.w"], biases["patch"], stride=cfg.patch_size)
        t = t.reshape(B, d, g * g).transpose(0, 2, 1) + P["encoder.pos"]
        taps = set(cfg.tap_blocks())
        # taps are layer-normalised without affine parameters
        one = Tensor(np.ones(d, self.dtype))
        zero = Tensor(np.zeros(d, self.dtype))
        out = []
        for i in range(cfg.blocks):
            t = self._block(t, i, biases)
            if i in taps:
                out.append(TokenGrid(nk.layer_norm(t, one, zero), g, g))
        return out

    def _block(self, x: Tensor, i: int, biases: Mapping[str, Tensor]) -> Tensor:
        cfg, P = self.cfg, self.params
        B, T, d = x.shape
        H, dh = cfg.heads, cfg.head_dim
        pre = f"encoder.block{i}."
        h = nk.layer_norm(x, P[pre + "ln1.w"], biases[f"block{i}.ln1"])
        qkv = h @ P[pre + "qkv.w"] + biases[f"block{i}.qkv"]
        qkv = qkv.reshape(B, T, 3, H, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = nk.softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)), axis=-1)
        o = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
        x = x + (o @ P[pre + "proj.w"] + biases[f"block{i}.proj"])
        h = nk.layer_norm(x, P[pre + "ln2.w"], biases[f"block{i}.ln2"])
        h = nk.gelu(h @ P[pre + "fc1.w"] + biases[f"block{i}.fc1"])
        return x + (h @ P[pre + "fc2.w"] + biases[f"block{i}.fc2"])

    # -- label encoder ---------------------------------------------------
    def encode_label(self, labels) -> TokenGrid:
        """Encode (N,S,S) or (N,1,S,S) single-channel labels into one grid each."""
        cfg, P = self.cfg, self.params
        y = self._arr(labels)
        if y.ndim == 2:
            y = y.reshape(1, 1, *y.shape)
        elif y.ndim == 3:
            y = y.reshape(y.shape[0], 1, y.shape[1], y.shape[2])
        if y.ndim != 4 or y.shape[1] != 1:
            raise ValueError(f"label must be single-channel, got shape {y.shape}")
        if y.shape[2:] != (cfg.image_size, cfg.image_size):
            raise ValueError("label resolution does not match config")
        N, g = y.shape[0], cfg.grid
        t = nk.conv2d(y, P["label.proj.w"], P["label.proj.b"], stride=cfg.patch_size)
        t = t.reshape(N, cfg.dim, g * g).transpose(0, 2, 1) + P["label.pos"]
        return TokenGrid(t, g, g)

    # -- matching --------------------------------------------------------
    def match(self, q: TokenGrid, keys: Sequence[TokenGrid] | TokenGrid,
              values: Sequence[TokenGrid] | TokenGrid, level: int) -> TokenGrid:
        """Infer query label tokens by attending from query to prompt tokens.

        ``q`` holds (Q, T, d) tokens; keys/values are N grids of (T, d) each, or
        one batched grid of (N, T, d).  All prompt tokens are pooled into a
        single key/value sequence shared by every query.
        """
        cfg, P = self.cfg, self.params
        kt = _stack_prompts(keys)
        vt = _stack_prompts(values)
        if kt.shape[0] == 0:
            raise ValueError("matching needs at least one prompt")
        if kt.shape != vt.shape:
            raise ValueError(f"key/value shape mismatch {kt.shape} vs {vt.shape}")
        qt = q.tokens if q.tokens.ndim == 3 else q.tokens.reshape(1, *q.tokens.shape)
        if qt.shape[-1] != kt.shape[-1] or qt.shape[-2] != kt.shape[-2]:
            raise ValueError("query and prompt grids differ in token count or dim")
        self.match_calls += 1
        Q, T, d = qt.shape
        H, dh = cfg.heads, cfg.head_dim
        pre = f"match.level{level}."
        kt = kt.reshape(-1, d)
        vt = vt.reshape(-1, d)
        L = kt.shape[0]
        qh = (qt @ P[pre + "wq"]).reshape(Q, T, H, dh).transpose(0, 2, 1, 3)
        kh = (kt @ P[pre + "wk"]).reshape(L, H, dh).transpose(1, 2, 0)
        vh = (vt @ P[pre + "wv"]).reshape(L, H, dh).transpose(1, 0, 2)
        att = nk.softmax((qh @ kh) * (1.0 / np.sqrt(dh)), axis=-1)
        if self.attention_hook is not None:
            self.attention_hook(level, att.data)
        o = (att @ vh).transpose(0, 2, 1, 3).reshape(Q, T, d)
        m = o @ P[pre + "wo"]
        if q.tokens.ndim == 2:
            m = m.reshape(T, d)
        return TokenGrid(m, q.h, q.w)

    # -- decoders --------------------------------------------------------
    def decode_dense(self, matched: Sequence[TokenGrid]) -> Tensor:
        """Fuse per-level label tokens into (B, 1, S, S) logits."""
        cfg, P = self.cfg, self.params
        if len(matched) != cfg.hierarchies:
            raise ValueError(f"expected {cfg.hierarchies} grids, got {len(matched)}")
        first = matched[0]
        for m in matched:
            if (m.h, m.w) != (first.h, first.w) or m.tokens.shape != first.tokens.shape:
                raise ValueError("inconsistent token grids")
        feats = []
        for j, (m, scale) in enumerate(zip(matched, _level_scales(cfg))):
            t = m.tokens if m.tokens.ndim == 3 else m.tokens.reshape(1, *m.tokens.shape)
            B, T, d = t.shape
            fmap = t.transpose(0, 2, 1).reshape(B, d, m.h, m.w)
            fmap = nk.conv2d(fmap, P[f"decoder.reassemble{j}.proj.w"])
            rw, rb = P[f"decoder.reassemble{j}.resample.w"], P[f"decoder.reassemble{j}.resample.b"]
            if scale > 1:
                fmap = nk.conv_transpose2d(fmap, rw, rb, stride=int(scale))
            elif scale == 1:
                fmap = nk.conv2d(fmap, rw, rb, pad=1, pad_mode="edge")
            else:
                fmap = nk.conv2d(fmap, rw, rb, stride=2, pad=1, pad_mode="edge")
            feats.append(fmap)
        path = None
        for j in reversed(range(len(feats))):
            x = feats[j] if path is None else path + feats[j]
            x = x + nk.conv2d(nk.gelu(x), P[f"decoder.fuse{j}.conv.w"], P[f"decoder.fuse{j}.conv.b"],
                              pad=1, pad_mode="edge")
            path = nk.upsample_nearest(x, 2) if j > 0 else x
        res = path.shape[-1]
        if res != cfg.image_size:
            path = nk.upsample_nearest(path, cfg.image_size // res)
        h = nk.gelu(nk.conv2d(nk.gelu(path), P["decoder.head.conv.w"], P["decoder.head.conv.b"],
                              pad=1, pad_mode="edge"))
        return nk.conv2d(h, P["decoder.head.out.w"], P["decoder.head.out.b"])

    def decode_class(self, query_encoding: TokenGrid, prototype: Tensor | None = None) -> Tensor:
        """Linear score on the mean-pooled final-block tokens.

        When ``prototype`` (pooled prompt tokens, shape (d,)) is given, the pooled
        query is gated elementwise by it before the linear layer, so the score
        says whether the query looks like the prompt class.
        """
        P = self.params
        t = query_encoding.tokens
        pooled = t.mean(axis=-2)
        if prototype is not None:
            pooled = pooled * prototype
        return (pooled * P["cls.w"]).sum(axis=-1) + P["cls.b"]

    # -- composition -----------------------------------------------------
    def forward(self, queries, prompt_images, prompt_labels, task: "TaskId | str",
                bank: "TaskId | str | None" = None) -> Tensor:
        """Batched forward for one prompt set.

        Dense tasks return (Q, 1, S, S) logits; CLS returns (Q,) logits.
        """
        task = TaskId.parse(task)
        q = self._arr(queries)
        if q.ndim == 3:
            q = q.reshape(1, *q.shape)
        pimg = self._arr(prompt_images)
        if pimg.ndim == 3:
            pimg = pimg.reshape(1, *pimg.shape)
        n_prompts = pimg.shape[0]
        if n_prompts == 0:
            raise ValueError("prompt set is empty")
        Qn = q.shape[0]
        grids = self.encode_image(nk.concat([q, pimg], axis=0), task, bank=bank)
        if task is TaskId.CLS:
            final = grids[-1].tokens
            qg = TokenGrid(final[:Qn], grids[-1].h, grids[-1].w)
            proto = final[Qn:].mean(axis=(0, 1))
            return self.decode_class(qg, proto)
        if prompt_labels is None:
            raise ValueError("dense tasks need prompt labels")
        lab = self._arr(prompt_labels)
        if lab.shape[0] != n_prompts:
            raise ValueError("prompt images and labels differ in count")
        v = self.encode_label(lab)
        matched = []
        for j, gr in enumerate(grids):
            qg = TokenGrid(gr.tokens[:Qn], gr.h, gr.w)
            kg = TokenGrid(gr.tokens[Qn:], gr.h, gr.w)
            matched.append(self.match(qg, kg, v, level=j))
        return self.decode_dense(matched)


def _stack_prompts(grids) -> Tensor:
    if isinstance(grids, TokenGrid):
        t = grids.tokens
        return t if t.ndim == 3 else t.reshape(1, *t.shape)
    grids = list(grids)
    if not grids:
        return Tensor(np.zeros((0, 1, 1), np.float32))
    return nk.stack([g.tokens for g in grids], axis=0)


def predict_one(model: Model, query_image, prompts: Sequence[tuple[np.ndarray, np.ndarray | None]],
                task: "TaskId | str") -> Prediction:
    """Single-query convenience wrapper returning a :class:`Prediction`."""
    task = TaskId.parse(task)
    if task in DENSE_TASKS and not prompts:
        raise ValueError("dense tasks need at least one prompt")
    imgs = np.stack([p[0] for p in prompts]) if prompts else None
    if task is TaskId.CLS:
        if imgs is None:
            raise ValueError("classification needs prompt images to define the class")
        out = model.forward(query_image, imgs, None, task)
        return Prediction(task, score=float(out.data.reshape(-1)[0]))
    labs = np.stack([p[1] for p in prompts])
    out = model.forward(query_image, imgs, labs, task)
    return Prediction(task, dense=np.array(out.data[0]))


def param_accounting(params: ParamStore, task: "TaskId | str | None" = None) -> dict[str, int]:
    """Task-specific (one bias bank) versus shared parameter counts."""
    tasks = sorted({bank_of(n) for n in params if is_bank_param(n)})
    task = TaskId.parse(task).value if task is not None else tasks[0]
    specific = params.count(lambda p: bank_of(p.name) == task)
    shared = params.count(lambda p: not is_bank_param(p.name) and not p.name.startswith("loss."))
    return {"task_specific": specific, "shared": shared, "banks": len(tasks),
            "weights": params.count(lambda p: p.kind == "weight"),
            "biases": params.count(lambda p: p.kind == "bias")}
