"""Command-line experiment runner.

An experiment is described by a JSON file (``--spec``) and/or flags; flags
win over file values. Every run writes its artifacts plus ``summary.json``
into the output directory.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field

from .backprop import write_profile_csv
from .cells import init_model, load_checkpoint, save_checkpoint
from .numeric import SeededRng
from .tasks import CopyConfig, biased_sgd_sweep, gen_copy
from .trainer import TrainConfig, TrainingDiverged, adapt_truncation, train
from .truncation import write_bias_table_csv

log = logging.getLogger(__name__)

TASKS = ("copy-fixed", "copy-variable", "sgd-testbed", "profile-only")
SUMMARY_KEYS = ("task", "mode", "delta_or_K", "best_valid_ppl", "test_ppl_at_best", "epochs_run", "seed")


class SpecError(ValueError):
    pass


@dataclass
class ModelSpec:
    cell: str = "lstm"
    d_emb: int = 6
    d_hidden: list = field(default_factory=lambda: [50, 50])
    init_scale: float = 0.1
    activation: str = "tanh"
    checkpoint: str | None = None

    def __post_init__(self):
        if self.cell not in ("lstm", "rnn"):
            raise SpecError(f"model.cell: expected 'lstm' or 'rnn', got {self.cell!r}")
        if not self.d_hidden or any(int(d) < 1 for d in self.d_hidden):
            raise SpecError("model.d_hidden: need at least one positive layer width")
        if self.d_emb < 1:
            raise SpecError("model.d_emb: must be positive")
        if not self.init_scale > 0:
            raise SpecError("model.init_scale: must be positive")
        if self.activation not in ("tanh", "linear"):
            raise SpecError(f"model.activation: unknown {self.activation!r}")


@dataclass
class DataSpec:
    I: int = 6
    m_low: int = 10
    m_high: int = 10
    T_train: int = 256_000
    T_valid: int = 64_000
    T_test: int = 64_000

    def copy_config(self, T: int, seed: int) -> CopyConfig:
        return CopyConfig(self.I, self.m_low, self.m_high, T, seed)


@dataclass
class TestbedSpec:
    d: int = 20
    a: float = 0.5
    b: float = 2.0
    sigma: float = 1.5
    N: int = 10_000
    deltas: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 0.9])
    seeds: int = 20
    theta_range: float = 3.0
    schedule: str = "optimal-constant"

    def __post_init__(self):
        if self.schedule not in ("optimal-constant", "inverse-sqrt"):
            raise SpecError(f"testbed.schedule: unknown {self.schedule!r}")
        if self.N < 1 or self.seeds < 1 or self.d < 1:
            raise SpecError("testbed: N, seeds and d must be positive")
        for dl in self.deltas:
            if not 0.0 <= dl < 1.0:
                raise SpecError(f"testbed.deltas: {dl} outside [0, 1)")


@dataclass
class ExperimentSpec:
    task: str
    seed: int = 0
    out: str = "runs/out"
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    data: DataSpec = field(default_factory=DataSpec)
    testbed: TestbedSpec = field(default_factory=TestbedSpec)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_SECTIONS = {"train": TrainConfig, "model": ModelSpec, "data": DataSpec, "testbed": TestbedSpec}


def _coerce(key: str, value, default, annotation: str):
    """Check a JSON value against the field's default/annotation, naming ``key`` on failure."""
    if value is None:
        if "None" in annotation:
            return None
        raise SpecError(f"{key}: null is not allowed")
    kind = type(default) if default is not None else None
    if kind is None:
        if "int" in annotation:
            kind = int
        elif "str" in annotation:
            kind = str
    try:
        if kind is bool:
            if not isinstance(value, bool):
                raise TypeError
            return value
        if kind is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if kind is float:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise TypeError
            return float(value)
        if kind is str:
            if not isinstance(value, str):
                raise TypeError
            return value
        if kind is list:
            if not isinstance(value, list):
                raise TypeError
            return list(value)
    except (TypeError, ValueError):
        raise SpecError(f"{key}: malformed value {value!r}") from None
    return value


def _build(cls, raw: dict, prefix: str):
    if not isinstance(raw, dict):
        raise SpecError(f"{prefix}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise SpecError(f"unknown key {prefix}.{unknown[0]}" if prefix else f"unknown key {unknown[0]}")
    kwargs = {}
    for name, value in raw.items():
        f = fields[name]
        key = f"{prefix}.{name}" if prefix else name
        if name in _SECTIONS and not prefix:
            kwargs[name] = _build(_SECTIONS[name], value, name)
            continue
        default = f.default if f.default is not dataclasses.MISSING else (
            f.default_factory() if f.default_factory is not dataclasses.MISSING else None)
        kwargs[name] = _coerce(key, value, default, str(f.type))
    try:
        return cls(**kwargs)
    except SpecError:
        raise
    except (TypeError, ValueError) as exc:
        raise SpecError(f"{prefix or 'spec'}: {exc}") from None


def spec_from_dict(raw: dict) -> ExperimentSpec:
    if not isinstance(raw, dict):
        raise SpecError("spec must be a JSON object")
    if "task" not in raw:
        raise SpecError("missing required key task")
    if raw["task"] not in TASKS:
        raise SpecError(f"task: expected one of {', '.join(TASKS)}, got {raw['task']!r}")
    raw = dict(raw)
    if raw["task"] == "copy-variable":
        data = dict(raw.get("data", {}))
        data.setdefault("m_low", 5)
        raw["data"] = data
    spec = _build(ExperimentSpec, raw, "")
    # one seed drives everything; train.seed may restate it but not contradict it
    train_seed = raw.get("train", {}).get("seed")
    if "seed" not in raw and train_seed is not None:
        spec.seed = spec.train.seed
    elif train_seed is not None and spec.train.seed != spec.seed:
        raise SpecError("train.seed: conflicts with top-level seed")
    spec.train = dataclasses.replace(spec.train, seed=spec.seed)
    try:
        spec.data.copy_config(spec.data.T_train, 0)
    except ValueError as exc:
        raise SpecError(f"data: {exc}") from None
    return spec


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adaptbptt", description="Adaptively truncated BPTT experiments.")
    p.add_argument("--spec", help="JSON experiment spec")
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--mode", choices=("adaptive", "fixed"))
    p.add_argument("--delta", type=float)
    p.add_argument("--K", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def parse_spec(argv=None) -> ExperimentSpec:
    """Merge ``--spec`` file contents with flag overrides into a validated spec."""
    args = build_parser().parse_args(argv)
    raw: dict = {}
    if args.spec:
        try:
            with open(args.spec, encoding="utf-8") as f:
                raw = json.load(f)
        except OSError as exc:
            raise SpecError(f"cannot read spec file: {exc}") from None
        except json.JSONDecodeError as exc:
            raise SpecError(f"spec file is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise SpecError("spec must be a JSON object")
    if args.task:
        raw["task"] = args.task
    if args.seed is not None:
        raw["seed"] = args.seed
        if isinstance(raw.get("train"), dict):
            raw["train"]["seed"] = args.seed
    if args.out:
        raw["out"] = args.out
    overrides = {"mode": args.mode, "delta": args.delta, "K": args.K, "epochs": args.epochs}
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if overrides:
        raw["train"] = {**raw.get("train", {}), **overrides}
    return spec_from_dict(raw)


def _summary(spec: ExperimentSpec, best_valid, test_at_best, epochs_run, **extra) -> dict:
    cfg = spec.train
    out = {
        "task": spec.task,
        "mode": cfg.mode,
        "delta_or_K": cfg.delta if cfg.mode == "adaptive" else cfg.K,
        "best_valid_ppl": best_valid,
        "test_ppl_at_best": test_at_best,
        "epochs_run": epochs_run,
        "seed": spec.seed,
    }
    out.update(extra)
    return out


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True, allow_nan=True)
        f.write("\n")


def _finite_or_none(x):
    return None if x is None or not math.isfinite(x) else float(x)


def _copy_splits(spec: ExperimentSpec):
    root = SeededRng(spec.seed).spawn(0xC09)
    seeds = [int(root.next_u64()) for _ in range(3)]
    d = spec.data
    return (gen_copy(d.copy_config(d.T_train, seeds[0])),
            gen_copy(d.copy_config(d.T_valid, seeds[1])),
            gen_copy(d.copy_config(d.T_test, seeds[2])))


def _model(spec: ExperimentSpec):
    m = spec.model
    if m.checkpoint:
        return load_checkpoint(m.checkpoint)
    vocab = spec.data.I + 2
    return init_model(m.cell, vocab, m.d_emb, tuple(int(d) for d in m.d_hidden),
                      SeededRng(spec.seed).spawn(0x1417), scale=m.init_scale, activation=m.activation)


def _run_copy(spec: ExperimentSpec) -> int:
    train_data, valid, test = _copy_splits(spec)
    params = _model(spec)
    try:
        res = train(params, train_data, valid, test, spec.train, out_dir=spec.out)
    except TrainingDiverged as exc:
        log.error("training aborted: %s", exc)
        save_checkpoint(os.path.join(spec.out, "final.ckpt"), params)
        _write_json(os.path.join(spec.out, "summary.json"),
                    _summary(spec, None, None, None, status="diverged", error=str(exc)))
        return 2
    save_checkpoint(os.path.join(spec.out, "final.ckpt"), params)
    _write_json(os.path.join(spec.out, "summary.json"),
                _summary(spec, _finite_or_none(res.best_valid_ppl), _finite_or_none(res.test_ppl_at_best),
                         len(res.history), status="ok"))
    return 0


def _run_profile(spec: ExperimentSpec) -> int:
    train_data, _, _ = _copy_splits(spec)
    params = _model(spec)
    cfg = spec.train
    sel, profile = adapt_truncation(params, train_data, cfg, SeededRng(cfg.seed).spawn(0xADA97),
                                    K_min=min(cfg.K_min, cfg.R), K_max=min(cfg.K_max, cfg.R))
    write_profile_csv(os.path.join(spec.out, "profile.csv"), profile)
    write_bias_table_csv(os.path.join(spec.out, "bias.csv"), sel.table)
    _write_json(os.path.join(spec.out, "summary.json"),
                _summary(spec, None, None, 0, status="ok", K_selected=sel.K_selected,
                         clamped=sel.clamped, beta_hat=_finite_or_none(sel.table.decay.beta_hat)))
    return 0


def _run_testbed(spec: ExperimentSpec) -> int:
    tb = spec.testbed
    rows = biased_sgd_sweep(tb.deltas, tb.seeds, tb.N, tb.d, tb.a, tb.b, tb.sigma, tb.theta_range, tb.schedule,
                            seed=spec.seed)
    for r in rows:
        if not r["cap_ok"]:
            log.warning("delta=%g seed=%d: stepsize above the cap", r["delta"], r["seed"])
    with open(os.path.join(spec.out, "testbed.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    violations = sum(r["violated"] for r in rows)
    _write_json(os.path.join(spec.out, "summary.json"),
                _summary(spec, None, None, 0, status="ok", runs=len(rows), violations=violations))
    return 0


def run(spec: ExperimentSpec) -> int:
    """Execute an experiment; returns the process exit code."""
    os.makedirs(spec.out, exist_ok=True)
    _write_json(os.path.join(spec.out, "spec.json"), spec.to_dict())
    if spec.task in ("copy-fixed", "copy-variable"):
        return _run_copy(spec)
    if spec.task == "profile-only":
        return _run_profile(spec)
    return _run_testbed(spec)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    verbose = "-v" in argv or "--verbose" in argv
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        spec = parse_spec(argv)
    except SpecError as exc:
        print(f"adaptbptt: error: {exc}", file=sys.stderr)
        return 2
    return run(spec)


if __name__ == "__main__":
    sys.exit(main())
