"""Command-line entry point: ``promptperc <subcommand> ...``.

Subcommands: gen-data, train, adapt, eval, sweep-shots, inspect.
Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or data.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from . import checkpoint as ckpt
from .episodic import ABLATION_MODES, SPLIT_MODES, AdaptConfig, EvalConfig, TrainConfig, adapt, evaluate, train
from .metrics import MetricReport
from .model import Model, ModelConfig, TaskId, param_accounting
from .synthdata import Dataset, DataSpec, ManifestError, default_spec, generate_dataset, load_manifest, save_manifest


class ConfigError(ValueError):
    pass


# -- run configuration ----------------------------------------------------------
@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    manifest: str | None = None
    output_dir: str = "runs"
    ablation_mode: str = "awl_bt"
    split_mode: str = "ID"
    shot_list: list[int] = field(default_factory=lambda: [1, 5, 10])
    task: str = "PE"
    checkpoint_every: int = 0
    eval_queries: int | None = None
    sigma: float = 0.2

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["model"] = self.model.to_dict()
        d["train"] = self.train.to_dict()
        d["adapt"] = dataclasses.asdict(self.adapt)
        return d

    def hash(self) -> str:
        import hashlib

        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _build(cls, raw: Any, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kw = dict(raw)
    for k in ("tasks", "classes"):
        if isinstance(kw.get(k), list):
            kw[k] = tuple(kw[k])
    try:
        return cls(**kw)
    except (TypeError, ValueError, KeyError) as e:
        raise ConfigError(f"{where}: {e}") from None


def parse_run_config(raw: dict, require_manifest: bool = False) -> RunConfig:
    """Validate a JSON document into a :class:`RunConfig`; unknown keys are errors."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    top = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    kw = dict(raw)
    kw["model"] = _build(ModelConfig, raw.get("model", {}), "model")
    mode = raw.get("ablation_mode", "awl_bt")
    if mode not in ABLATION_MODES:
        raise ConfigError(f"ablation_mode must be one of {ABLATION_MODES}")
    tr = dict(raw.get("train", {}))
    if isinstance(tr, dict) and "ablation_mode" in tr and tr["ablation_mode"] != mode:
        raise ConfigError("train.ablation_mode disagrees with ablation_mode")
    if isinstance(tr, dict):
        tr["ablation_mode"] = mode
    kw["train"] = _build(TrainConfig, tr, "train")
    ad = dict(raw.get("adapt", {}))
    if isinstance(ad, dict) and mode == "awl_ft":
        ad.setdefault("scope", "full")
    kw["adapt"] = _build(AdaptConfig, ad, "adapt")
    if kw.get("split_mode", "ID") not in SPLIT_MODES:
        raise ConfigError(f"split_mode must be one of {SPLIT_MODES}")
    shots = kw.get("shot_list", [1, 5, 10])
    if not isinstance(shots, list) or not shots or any(not isinstance(s, int) or s < 1 for s in shots):
        raise ConfigError("shot_list must be a non-empty list of positive integers")
    if any(b <= a for a, b in zip(shots, shots[1:])):
        raise ConfigError("shot_list must be strictly increasing")
    try:
        TaskId.parse(kw.get("task", "PE"))
    except KeyError as e:
        raise ConfigError(str(e)) from None
    man = kw.get("manifest")
    if man is not None and not Path(man).exists():
        raise ConfigError(f"manifest path {man} does not exist")
    if require_manifest and man is None:
        raise ConfigError("this command needs 'manifest' in the config or --manifest")
    return RunConfig(**kw)


def read_run_config(path: str | None, overrides: dict | None = None, require_manifest: bool = False) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path}: {e}") from None
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k == "seed":
            raw.setdefault("train", {})
            raw["train"] = dict(raw["train"], seed=v)
        else:
            raw[k] = v
    return parse_run_config(raw, require_manifest)


# -- artifacts ------------------------------------------------------------------
def version_string() -> str:
    return f"v{__version__}"


def csv_header(seed: int, config_hash: str) -> str:
    return f"# seed={seed} config_hash={config_hash} version={version_string()}\n"


def _load_dataset(rc: RunConfig, manifest: str | None = None) -> Dataset:
    path = manifest or rc.manifest
    man = load_manifest(path)  # raises ManifestError on overlapping splits
    return Dataset.from_manifest(man, size=rc.model.image_size)


def _limit_threads():
    n = os.environ.get("UNIAP_NUM_THREADS")
    if not n:
        return None
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - optional
        return None
    return threadpool_limits(limits=int(n))


# -- subcommands ----------------------------------------------------------------
def cmd_gen_data(args) -> int:
    if args.spec:
        try:
            spec = DataSpec.from_dict(json.loads(Path(args.spec).read_text()))
        except (OSError, ValueError, TypeError, KeyError) as e:
            raise ConfigError(f"invalid data spec: {e}") from None
    else:
        spec = default_spec(args.train_classes, args.val_classes, args.test_classes, args.samples)
    man = generate_dataset(spec, args.seed)
    path = save_manifest(man, args.out)
    print(f"wrote {len(man.samples)} samples to {path}")
    return 0


def cmd_train(args) -> int:
    rc = read_run_config(args.config, {"seed": args.seed, "manifest": args.manifest}, require_manifest=True)
    ds = _load_dataset(rc)
    out = Path(args.out or rc.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    tc = rc.train
    model = Model.create(rc.model, seed=tc.seed)
    log_path = out / "train_log.csv"
    with open(log_path, "w") as fh:
        fh.write(csv_header(tc.seed, rc.hash()))
        fh.write("iter,task,loss_t,s_t,lr\n")

        def log(row):
            fh.write(f"{row.iter},{row.task},{row.loss_t:.8g},{row.s_t:.8g},{row.lr:.8g}\n")

        def every(it, m):
            k = rc.checkpoint_every
            if k and (it + 1) % k == 0 and it + 1 < tc.total_iters:
                ckpt.save(out / f"ckpt_{it + 1:06d}.uapckpt", m, it + 1, _rng_state(tc, it + 1), _ck_extra(rc))

        train(model, ds, tc, callback=every, log=log)
    final = ckpt.save(out / "final.uapckpt", model, tc.total_iters, _rng_state(tc, tc.total_iters), _ck_extra(rc))
    print(f"wrote {final} and {log_path}")
    return 0


def _rng_state(tc: TrainConfig, next_iter: int) -> dict:
    # every draw comes from a counter-based stream keyed on (seed, "train", iter)
    return {"generator": "philox", "seed": tc.seed, "next_iter": int(next_iter)}


def _ck_extra(rc: RunConfig) -> dict:
    return {"run_config_hash": rc.hash(), "seed": rc.train.seed, "ablation_mode": rc.ablation_mode,
            "version": version_string()}


def _load_model(rc: RunConfig, path: str, force: bool) -> Model:
    try:
        model, _ = ckpt.load(path, expect_hash=rc.model.hash(), force=force)
    except ckpt.CheckpointError as e:
        raise ConfigError(str(e)) from None
    return model


def cmd_adapt(args) -> int:
    rc = read_run_config(args.config, {"manifest": args.manifest, "task": args.task}, require_manifest=True)
    ds = _load_dataset(rc)
    model = _load_model(rc, args.checkpoint, args.force)
    split = args.split
    members = ds.indices(split, args.class_id)
    if len(members) < args.shots:
        raise ConfigError(f"class {args.class_id} has {len(members)} samples in split {split}, need {args.shots}")
    from .numkit import stream

    rng = stream(rc.adapt.seed, "adapt-prompts", args.class_id)
    prompts = rng.choice(members, size=args.shots, replace=False)
    adapted = adapt(model, ds, prompts, rc.task, rc.adapt)
    out = ckpt.save(args.out, adapted, 0, extra={**_ck_extra(rc), "adapted_class": args.class_id,
                                                 "prompt_idx": [int(i) for i in prompts], "task": rc.task})
    print(f"wrote {out}")
    return 0


def _eval_cfg(rc: RunConfig, shots: int, mode: str, with_adapt: bool) -> EvalConfig:
    return EvalConfig(shots=shots, mode=mode, seed=rc.train.seed, sigma=rc.sigma, n_queries=rc.eval_queries,
                      adapt=rc.adapt if with_adapt else None)


def cmd_eval(args) -> int:
    rc = read_run_config(args.config, {"manifest": args.manifest, "task": args.task, "split_mode": args.mode},
                         require_manifest=True)
    ds = _load_dataset(rc)
    model = _load_model(rc, args.checkpoint, args.force)
    shots = args.shots or rc.shot_list[-1]
    res = evaluate(model, ds, rc.task, _eval_cfg(rc, shots, rc.split_mode, args.adapt))
    rep = MetricReport(res.metric, res.per_class, shots, rc.split_mode, rc.train.seed,
                       {"task": rc.task, "adapted": bool(args.adapt)})
    out = Path(args.out or rc.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"eval_{rc.task}_{rc.split_mode}_{shots}shot"
    (out / f"{stem}.csv").write_text(rep.to_csv(csv_header(rc.train.seed, rc.hash())))
    (out / f"{stem}.json").write_text(rep.to_json())
    print(f"{res.metric} {rep.macro:.2f} ({', '.join(f'{k}={v:.1f}' for k, v in rep.per_class.items())})")
    return 0


def cmd_sweep_shots(args) -> int:
    rc = read_run_config(args.config, {"manifest": args.manifest, "task": args.task, "split_mode": args.mode},
                         require_manifest=True)
    ds = _load_dataset(rc)
    model = _load_model(rc, args.checkpoint, args.force)
    out = Path(args.out or rc.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"shots_{rc.task}_{rc.split_mode}.csv"
    with open(path, "w") as fh:
        fh.write(csv_header(rc.train.seed, rc.hash()))
        fh.write("shots,metric,value,seed,adapted\n")
        for shots in rc.shot_list:
            for adapted in (False, True):
                res = evaluate(model, ds, rc.task, _eval_cfg(rc, shots, rc.split_mode, adapted))
                fh.write(f"{shots},{res.metric},{res.macro:.6f},{rc.train.seed},{int(adapted)}\n")
                print(f"shots={shots} adapted={adapted} {res.metric}={res.macro:.2f}")
    print(f"wrote {path}")
    return 0


def cmd_inspect(args) -> int:
    try:
        model, ck = ckpt.load(args.checkpoint)
    except (ckpt.CheckpointError, OSError) as e:
        raise ConfigError(str(e)) from None
    acc = param_accounting(model.params)
    ratio = acc["task_specific"] / acc["shared"]
    report = {**acc, "ratio": ratio, "config_hash": ck.config_hash, "iteration": ck.meta.get("iteration")}
    if args.json:
        print(json.dumps(report, sort_keys=True))
    else:
        print(f"task-specific parameters (one bias bank): {acc['task_specific']}")
        print(f"shared parameters:                         {acc['shared']}")
        print(f"bias banks:                                {acc['banks']}")
        print(f"weight-kind / bias-kind parameters:        {acc['weights']} / {acc['biases']}")
        print(f"task-specific / shared ratio:              {100 * ratio:.3f}%")
    return 0


# -- entry point ----------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="promptperc", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=version_string())
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic shapes dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--spec", help="JSON data spec; overrides the class-count flags")
    g.add_argument("--train-classes", type=int, default=4)
    g.add_argument("--val-classes", type=int, default=0)
    g.add_argument("--test-classes", type=int, default=2)
    g.add_argument("--samples", type=int, default=30)
    g.set_defaults(func=cmd_gen_data)

    def common(sp, ckpt_needed=True):
        sp.add_argument("--config")
        sp.add_argument("--manifest")
        sp.add_argument("--out")
        if ckpt_needed:
            sp.add_argument("--checkpoint", required=True)
            sp.add_argument("--force", action="store_true", help="accept a config-hash mismatch")

    t = sub.add_parser("train", help="episodic multi-task training")
    common(t, ckpt_needed=False)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("adapt", help="bias-only adaptation on a prompt set")
    common(a)
    a.add_argument("--task")
    a.add_argument("--class-id", type=int, required=True)
    a.add_argument("--shots", type=int, default=10)
    a.add_argument("--split", default="test")
    a.set_defaults(func=cmd_adapt)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e)
    e.add_argument("--task")
    e.add_argument("--mode", choices=SPLIT_MODES)
    e.add_argument("--shots", type=int)
    e.add_argument("--adapt", action="store_true", help="adapt on each prompt set before scoring")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep-shots", help="metric versus shot count, with and without adaptation")
    common(s)
    s.add_argument("--task")
    s.add_argument("--mode", choices=SPLIT_MODES)
    s.set_defaults(func=cmd_sweep_shots)

    i = sub.add_parser("inspect", help="parameter accounting of a checkpoint")
    i.add_argument("checkpoint")
    i.add_argument("--json", action="store_true")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    limits = _limit_threads()
    try:
        return args.func(args)
    except (ConfigError, ManifestError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - report any runtime failure as exit 1
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    finally:
        if limits is not None:
            limits.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
