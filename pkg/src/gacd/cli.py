"""Command-line experiment runner.

Every subcommand reads one YAML config (see ``configs/desk.yaml``), applies
``--set dotted.key=value`` overrides, validates, and writes its artifacts
under ``output_dir``:

    teacher.pt, natural.pt, kd.pt, gacd.pt, <model>_aft.pt   model checkpoints
    distill/metrics.jsonl, distill/distill_state.pt          distillation log/state
    kd/metrics.jsonl                                         KD log
    analysis/                                                correlation grids, feature dump
    results.jsonl                                            one ResultRecord per stage run
    config.yaml                                              resolved config with its hash

``report`` renders the eval (or transfer) records of one or more run
directories as a Nat./Adv. table.
"""
import argparse
import dataclasses
import hashlib
import json
import logging
import random
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .analysis import (
    confusion_pair_spec,
    correlation_difference,
    export_features,
    logits_correlation,
    save_grid,
)
from .artifacts import atomic_write_text, config_hash, load_model, save_model
from .attacks import AttackBudget
from .data import ingest_dataset
from .distill import DistillConfig, KDConfig, distill_train, kd_baseline_train
from .finetune_eval import (
    TrainConfig,
    adversarial_finetune,
    evaluate,
    linear_probe_transfer,
    supervised_train,
)
from .models import ARCHITECTURES, build_model

log = logging.getLogger("gacd")

STAGES = ("train-teacher", "train-natural", "distill", "kd-baseline", "finetune", "eval",
          "transfer", "analyze")


class ConfigError(ValueError):
    pass


# -- config ---------------------------------------------------------------------

@dataclass
class DatasetSection:
    name: str = "fixture"
    path: str = None
    strict: bool = True
    options: dict = field(default_factory=dict)  # keyword arguments for the fixtures

    def load(self):
        return ingest_dataset(self.name, self.path, self.strict, **self.options)


@dataclass
class TrainSection:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_milestones: list = field(default_factory=list)
    lr_gamma: float = 0.1

    def to_train_config(self, seed):
        return TrainConfig(self.epochs, self.batch_size, self.lr, self.momentum,
                           self.weight_decay, tuple(self.lr_milestones), self.lr_gamma, seed)


def _pgd7():
    return AttackBudget(steps=7)


@dataclass
class TeacherSection:
    checkpoint: str = None  # default <output_dir>/teacher.pt
    arch: str = "small_cnn"
    options: dict = field(default_factory=dict)
    train: TrainSection = field(default_factory=lambda: TrainSection(epochs=15))
    attack: AttackBudget = field(default_factory=_pgd7)


@dataclass
class StudentSection:
    arch: str = "small_cnn"
    options: dict = field(default_factory=dict)


@dataclass
class FinetuneSection:
    epochs: int = 10
    lr: float = 0.01
    batch_size: int = 64
    attack: AttackBudget = field(default_factory=_pgd7)


@dataclass
class EvalSection:
    attack: AttackBudget = field(default_factory=AttackBudget)
    batch_size: int = 256
    probe_epochs: int = 30  # linear probe for headless (distilled) backbones
    probe_lr: float = 0.01


@dataclass
class TransferSection:
    dataset: DatasetSection = field(default_factory=lambda: DatasetSection("fixture-transfer"))
    epochs: int = 30
    lr: float = 0.01
    batch_size: int = 64
    attack: AttackBudget = field(default_factory=_pgd7)


@dataclass
class AnalyzeSection:
    reference: str = "teacher"
    attack: AttackBudget = field(default_factory=AttackBudget)
    shared_inputs: bool = True  # craft adversarial inputs against the reference model
    natural_class: int = 0
    attacked_class: int = 1
    count: int = 100


@dataclass
class ExperimentConfig:
    output_dir: str = "runs/default"
    seed: int = 0
    deterministic: bool = True
    dataset: DatasetSection = field(default_factory=DatasetSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    student: StudentSection = field(default_factory=StudentSection)
    natural: TrainSection = field(default_factory=lambda: TrainSection(epochs=12))
    distill: DistillConfig = field(default_factory=DistillConfig)
    kd: KDConfig = field(default_factory=KDConfig)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    eval: EvalSection = field(default_factory=EvalSection)
    transfer: TransferSection = field(default_factory=TransferSection)
    analyze: AnalyzeSection = field(default_factory=AnalyzeSection)

    def to_dict(self):
        return _to_plain(self)

    def hash(self):
        return config_hash(self.to_dict())

    @property
    def out(self):
        return Path(self.output_dir)

    @property
    def teacher_path(self):
        return Path(self.teacher.checkpoint) if self.teacher.checkpoint else self.out / "teacher.pt"


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    return obj


def _build(cls, data, where):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {where + '.' if where else ''}{key}")
        ftype = fields[key].type
        path = f"{where}.{key}" if where else key
        if dataclasses.is_dataclass(ftype) and isinstance(value, dict):
            # partial sections keep the section's own defaults for missing keys
            f = fields[key]
            default = f.default_factory() if f.default_factory is not dataclasses.MISSING \
                else ftype()
            value = _build(ftype, {**_shallow(default), **value}, path)
        kwargs[key] = value
    return _make(cls, kwargs, where)


def _shallow(obj):
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}


def _make(cls, kwargs, where):
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where or 'config'}: {exc}") from exc


def _set_dotted(doc, dotted, value):
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted}: {k} is not a section")
    node[keys[-1]] = value


def load_config(path=None, overrides=()):
    """Parse YAML plus ``key.path=value`` overrides into a validated config."""
    doc = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        doc = yaml.safe_load(path.read_text()) or {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key.path=value")
        key, raw = item.split("=", 1)
        _set_dotted(doc, key.strip(), yaml.safe_load(raw))
    # sub-config seeds follow the global seed
    for section in ("distill", "kd"):
        if isinstance(doc.get(section), dict) and "seed" in doc[section]:
            raise ConfigError(f"{section}.seed is derived from the top-level seed")
    cfg = _build(ExperimentConfig, doc, "")
    cfg.distill.seed = cfg.seed
    cfg.kd.seed = cfg.seed
    for name, arch in (("teacher", cfg.teacher.arch), ("student", cfg.student.arch)):
        if arch not in ARCHITECTURES:
            raise ConfigError(f"{name}.arch {arch!r} unknown; known: {sorted(ARCHITECTURES)}")
    return cfg


def validate_for(cfg, stage, model=None):
    """Check the files a stage needs exist, before anything is written."""
    for ds in (cfg.dataset, cfg.transfer.dataset):
        if ds.path is not None and not Path(ds.path).exists():
            raise ConfigError(f"dataset path does not exist: {ds.path}")
    needs_teacher = stage in ("distill", "kd-baseline") or (
        stage == "analyze" and cfg.analyze.reference == "teacher")
    if needs_teacher and not cfg.teacher_path.exists():
        raise ConfigError(f"teacher checkpoint not found: {cfg.teacher_path} "
                          "(run train-teacher or set teacher.checkpoint)")
    if stage in ("finetune", "eval", "transfer", "analyze"):
        if not model:
            raise ConfigError(f"{stage} needs --model")
        if not model_path(cfg, model).exists():
            raise ConfigError(f"model checkpoint not found: {model_path(cfg, model)}")


def model_path(cfg, name):
    if name == "teacher":
        return cfg.teacher_path
    return cfg.out / f"{name}.pt"


# -- records ----------------------------------------------------------------------

def _run_id(cfg_hash, stage, model, extra=""):
    blob = f"{cfg_hash}|{stage}|{model}|{extra}".encode()
    return f"{stage}-{hashlib.sha256(blob).hexdigest()[:12]}"


def make_record(cfg, stage, model, metrics, started, extra=""):
    h = cfg.hash()
    return {
        "run_id": _run_id(h, stage, model, extra),
        "config_hash": h,
        "stage": stage,
        "model": model,
        "metrics": metrics,
        "started": started,
        "finished": time.time(),
        "code_version": __version__,
    }


def append_record(path, record):
    """Append-only results log; each write replaces the file atomically."""
    path = Path(path)
    old = path.read_text() if path.exists() else ""
    atomic_write_text(path, old + json.dumps(record, sort_keys=True) + "\n")


def read_records(path):
    path = Path(path)
    if path.is_dir():
        path = path / "results.jsonl"
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


METHOD_LABELS = {"teacher": "Teacher", "natural": "Natural", "kd": "KD", "gacd": "GACD",
                 "gacd_aft": "GACD+AFT", "kd_aft": "KD+AFT"}


def render_report(records, stage="eval"):
    """Nat./Adv. table per (dataset, attack); later records win for a model."""
    rows = [r for r in records if r["stage"] == stage]
    if not rows:
        raise ValueError(f"no {stage} records to report")
    counts = {r["metrics"].get("num_classes") for r in rows}
    if len(counts) > 1:
        raise ValueError(f"refusing to mix records with different class counts: {sorted(counts)}")
    groups = {}
    for r in rows:
        m = r["metrics"]
        groups.setdefault((m.get("dataset", ""), m.get("attack", "")), {})[r["model"]] = m
    lines = []
    width = max(12, *(len(METHOD_LABELS.get(r["model"], r["model"])) for r in rows)) + 2
    for (dataset, attack), models in groups.items():
        k = next(iter(models.values())).get("num_classes")
        lines.append(f"{dataset} ({k} classes), {attack}")
        lines.append(f"{'Method':<{width}}{'Nat.':>8}{'Adv.':>8}")
        lines.append("-" * (width + 16))
        for model, m in models.items():
            adv = m.get("adversarial_acc")
            adv_s = f"{adv:8.2f}" if adv is not None else f"{'-':>8}"
            lines.append(f"{METHOD_LABELS.get(model, model):<{width}}{m['natural_acc']:8.2f}{adv_s}")
        lines.append("")
    return "\n".join(lines)


# -- stages -----------------------------------------------------------------------

def seed_everything(seed, deterministic):
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(bool(deterministic))


def _save(cfg, path, model, arch, options, num_classes, **extra):
    save_model(path, model, arch, num_classes, options, cfg.hash(), **extra)


def _train_teacher(cfg, ds, args):
    t = cfg.teacher
    model = build_model(t.arch, ds.num_classes, seed=cfg.seed, **t.options)
    history = supervised_train(model, ds.train, t.train.to_train_config(cfg.seed), budget=t.attack)
    _save(cfg, cfg.teacher_path, model, t.arch, t.options, ds.num_classes, role="teacher")
    return "teacher", {"train_loss": history}


def _train_natural(cfg, ds, args):
    s = cfg.student
    model = build_model(s.arch, ds.num_classes, seed=cfg.seed + 1, **s.options)
    history = supervised_train(model, ds.train, cfg.natural.to_train_config(cfg.seed))
    _save(cfg, model_path(cfg, "natural"), model, s.arch, s.options, ds.num_classes,
          role="natural")
    return "natural", {"train_loss": history}


def _student(cfg, ds):
    s = cfg.student
    return build_model(s.arch, ds.num_classes, seed=cfg.seed + 2, **s.options)


def _distill(cfg, ds, args):
    teacher, _ = load_model(cfg.teacher_path)
    student = _student(cfg, ds)
    out = cfg.out / "distill"
    state, metrics = distill_train(teacher, student, ds, cfg.distill, out_dir=out,
                                   resume=args.resume, stop_after=args.stop_after,
                                   run_hash=cfg.hash())
    finished = state.epoch >= cfg.distill.epochs
    if finished:
        _save(cfg, model_path(cfg, "gacd"), student, cfg.student.arch, cfg.student.options,
              ds.num_classes, role="gacd", headless=True)
    return "gacd", {"epochs": [r["epoch"] for r in metrics],
                    "loss": [r["loss"] for r in metrics],
                    "mi_lower_bound": [r["mi_lower_bound"] for r in metrics],
                    "mean_weight": [r["mean_weight"] for r in metrics],
                    "saturated": state.stats["saturated"], "complete": finished}


def _kd(cfg, ds, args):
    teacher, _ = load_model(cfg.teacher_path)
    student = _student(cfg, ds)
    history = kd_baseline_train(teacher, student, ds, cfg.kd, out_dir=cfg.out / "kd",
                                run_hash=cfg.hash())
    _save(cfg, model_path(cfg, "kd"), student, cfg.student.arch, cfg.student.options,
          ds.num_classes, role="kd")
    return "kd", {"loss": [r["loss"] for r in history]}


def _finetune(cfg, ds, args):
    model, payload = load_model(model_path(cfg, args.model))
    f = cfg.finetune
    tc = TrainConfig(epochs=f.epochs, batch_size=f.batch_size, lr=f.lr, seed=cfg.seed)
    adversarial_finetune(model, ds.train, budget=f.attack, cfg=tc)
    name = f"{args.model}_aft"
    _save(cfg, model_path(cfg, name), model, payload["arch"], payload["arch_kwargs"],
          payload["num_classes"], role=name)
    return name, {"source": args.model, "epochs": f.epochs}


def _eval(cfg, ds, args):
    model, payload = load_model(model_path(cfg, args.model))
    e = cfg.eval
    if payload.get("headless"):
        rep, _ = linear_probe_transfer(model, ds, e.attack, epochs=e.probe_epochs, lr=e.probe_lr,
                                       seed=cfg.seed, model_id=args.model)
        metrics = rep.to_dict()
        metrics["classifier"] = "linear probe"
    else:
        metrics = evaluate(model, ds.test, e.attack, e.batch_size, seed=cfg.seed,
                           dataset=ds.name, model_id=args.model).to_dict()
    return args.model, metrics


def _transfer(cfg, ds, args):
    model, _ = load_model(model_path(cfg, args.model))
    t = cfg.transfer
    target = t.dataset.load()
    rep, _ = linear_probe_transfer(model, target, t.attack, epochs=t.epochs, lr=t.lr,
                                   batch_size=t.batch_size, seed=cfg.seed, model_id=args.model)
    return args.model, rep.to_dict()


def _analyze(cfg, ds, args):
    a = cfg.analyze
    model, _ = load_model(model_path(cfg, args.model))
    ref, _ = load_model(model_path(cfg, a.reference))
    out = cfg.out / "analysis"
    h = cfg.hash()
    names = ds.class_names or None
    metrics = {"reference": a.reference}
    for variant, budget in (("natural", None), ("adversarial", a.attack)):
        source = ref if (budget is not None and a.shared_inputs) else None
        c_ref = logits_correlation(ref, ds.test, budget, attack_model=source,
                                   class_names=names, seed=cfg.seed)
        c_mod = logits_correlation(model, ds.test, budget, attack_model=source,
                                   class_names=names, seed=cfg.seed)
        diff, summary = correlation_difference(c_ref, c_mod)
        save_grid(out / f"{a.reference}_corr_{variant}.csv", c_ref, config_hash=h)
        save_grid(out / f"{args.model}_corr_{variant}.csv", c_mod, config_hash=h)
        save_grid(out / f"{args.model}_corrdiff_{variant}.csv", diff, names, config_hash=h)
        metrics[f"corr_diff_{variant}"] = summary
        metrics[f"zero_variance_{variant}"] = c_mod.zero_variance
    spec = confusion_pair_spec(a.natural_class, a.attacked_class, a.count)
    _, stats = export_features(model, ds.test, spec, out / f"{args.model}_features.csv",
                               budget=a.attack, seed=cfg.seed, config_hash=h)
    metrics["feature_rows"] = stats["rows"]
    metrics["feature_rows_omitted"] = stats["omitted"]
    return args.model, metrics


HANDLERS = {
    "train-teacher": _train_teacher,
    "train-natural": _train_natural,
    "distill": _distill,
    "kd-baseline": _kd,
    "finetune": _finetune,
    "eval": _eval,
    "transfer": _transfer,
    "analyze": _analyze,
}

RECORD_STAGE = {"train-teacher": "train", "train-natural": "train", "kd-baseline": "distill"}


def run_stage(cfg, stage, args):
    validate_for(cfg, stage, getattr(args, "model", None))
    seed_everything(cfg.seed, cfg.deterministic)
    started = time.time()
    ds = cfg.dataset.load()
    cfg.out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(cfg.out / "config.yaml",
                      f"# config_hash: {cfg.hash()}\n" + yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    model, metrics = HANDLERS[stage](cfg, ds, args)
    metrics.setdefault("num_classes", ds.num_classes)
    metrics.setdefault("dataset", ds.name)
    record = make_record(cfg, RECORD_STAGE.get(stage, stage), model, metrics, started,
                         extra=stage)
    append_record(cfg.out / "results.jsonl", record)
    log.info("%s done: %s", stage, json.dumps(metrics)[:300])
    return record


def build_parser():
    p = argparse.ArgumentParser(prog="gacd", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        sp = sub.add_parser(stage)
        sp.add_argument("-c", "--config", help="YAML experiment config")
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="dotted-path override, repeatable")
        if stage in ("finetune", "eval", "transfer", "analyze"):
            sp.add_argument("--model", required=True,
                            help="checkpoint name under output_dir (e.g. gacd, kd, gacd_aft)")
        if stage == "distill":
            sp.add_argument("--resume", action="store_true",
                            help="continue from output_dir/distill/distill_state.pt")
            sp.add_argument("--stop-after", type=int, default=None,
                            help="stop after this many epochs (resumable)")
    rp = sub.add_parser("report")
    rp.add_argument("runs", nargs="+", help="run directories or results.jsonl files")
    rp.add_argument("--stage", default="eval", choices=["eval", "transfer"])
    rp.add_argument("-o", "--output", help="also write the table to this file")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.command == "report":
            records = [r for run in args.runs for r in read_records(run)]
            text = render_report(records, args.stage)
            print(text)
            if args.output:
                atomic_write_text(args.output, text + "\n")
            return 0
        cfg = load_config(args.config, args.overrides)
        record = run_stage(cfg, args.command, args)
        print(json.dumps(record, sort_keys=True))
        return 0
    except ConfigError as exc:
        print(f"gacd: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and exit nonzero
        if args.verbose:
            log.exception("failed")
        print(f"gacd: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
