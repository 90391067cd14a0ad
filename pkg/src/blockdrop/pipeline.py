"""Training and evaluation stages shared by the command line and the experiments.

Every stage reads its inputs from, and writes its outputs to, one run
directory. All randomness comes from named streams of the config's root seed.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .backbone import Architecture, GatedBackbone, train_backbone
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .data import Dataset, generate_synthetic, load_cifar10
from .evaluation import EvalSummary, evaluate
from .policy import PolicyNetwork
from .sequential import SequentialGates, train_sequential
from .trainer import RewardConfig, curriculum_train, joint_finetune

log = logging.getLogger(__name__)

METRICS_HEADER = [
    "run_id", "phase", "epoch", "strategy", "gamma", "accuracy",
    "blocks_mean", "blocks_std", "flops_mean", "flops_std", "seed",
]
DIFFICULTY_HEADER = ["run_id", "row_type", "tag", "index", "n", "blocks_mean", "blocks_std", "accuracy", "note", "seed"]


class MissingArtifactError(FileNotFoundError):
    pass


def fmt(v) -> str:
    """Fixed decimal notation, never scientific, never empty."""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if not np.isfinite(v):
            return "nan"
        return f"{v:.6f}"
    s = str(v)
    return s if s else "-"


class CsvSink:
    """Row-at-a-time CSV writer.

    Rows land in ``<path>.partial`` and are flushed immediately; the file is
    renamed to ``path`` only by :meth:`close`. An aborted command therefore
    leaves its completed rows in a clearly marked partial file.
    """

    def __init__(self, path: Path, header: list[str]):
        self.path = Path(path)
        self.partial = self.path.with_name(self.path.name + ".partial")
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if self.path.exists():
            self.path.unlink()
        self._fh = open(self.partial, "w", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(header)
        self.header = header

    def write(self, row: dict) -> None:
        self._w.writerow([fmt(row[k]) for k in self.header])
        self._fh.flush()

    def close(self) -> Path:
        self._fh.close()
        os.replace(self.partial, self.path)
        return self.path

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self._fh.close()
        return False


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# run directory ---------------------------------------------------------------


@dataclass
class RunDir:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    def gamma_dir(self, gamma: float, main: float) -> "RunDir":
        """Artifacts for ``gamma``; the config's own gamma lives at the root."""
        if gamma == main:
            return self
        return RunDir(self.root / "sweep" / f"gamma_{gamma:.3f}")

    backbone = property(lambda self: self.root / "backbone.bdck")
    policy = property(lambda self: self.root / "policy.bdck")
    backbone_ft = property(lambda self: self.root / "backbone_ft.bdck")
    policy_ft = property(lambda self: self.root / "policy_ft.bdck")
    gates = property(lambda self: self.root / "gates.bdck")
    config = property(lambda self: self.root / "config.json")

    def need(self, *paths: Path) -> None:
        missing = [str(p) for p in paths if not p.exists()]
        if missing:
            raise MissingArtifactError(f"missing prerequisite checkpoint(s): {', '.join(missing)}")


def write_effective_config(cfg: RunConfig) -> Path:
    rd = RunDir(cfg.out)
    rd.root.mkdir(parents=True, exist_ok=True)
    rd.config.write_text(cfg.dumps())
    return rd.config


# data and models -------------------------------------------------------------


def _seed_int(cfg: RunConfig, purpose: str) -> int:
    return int(cfg.rng(purpose).integers(0, 2**31 - 1))


def check_dataset(cfg: RunConfig) -> None:
    """Fail before any side effect if the dataset cannot be read."""
    if cfg.dataset.kind == "cifar10":
        d = Path(cfg.dataset.dir)
        if not d.is_dir():
            raise ConfigError(f"dataset directory {d} does not exist")


def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    ds = cfg.dataset
    if ds.kind == "cifar10":
        return load_cifar10(ds.dir)
    train = generate_synthetic(ds.n_train, _seed_int(cfg, "data-train"))
    test = generate_synthetic(ds.n_test, _seed_int(cfg, "data-test"))
    return train, test


def backbone_arch(cfg: RunConfig, data: Dataset) -> Architecture:
    b = cfg.backbone
    return Architecture(b.family, data.shape, tuple(b.segments), b.width, data.classes)


def policy_arch(cfg: RunConfig, data: Dataset, K: int) -> Architecture:
    p = cfg.policy
    return Architecture(p.family, data.shape, tuple(p.segments), p.width, K, p.stem_stride)


def _gamma_key(gamma: float) -> int:
    return int(round(gamma * 1000))


def _summary_row(cfg: RunConfig, phase: str, epoch: int, gamma: float, s: EvalSummary) -> dict:
    return {"run_id": cfg.id, "phase": phase, "epoch": epoch, "gamma": gamma, "seed": cfg.seed, **s.row()}


# stages ----------------------------------------------------------------------


def stage_backbone(cfg: RunConfig, train: Dataset, test: Dataset, sink: CsvSink | None = None) -> GatedBackbone:
    """Pretrain the backbone with all blocks on and save it."""
    net = GatedBackbone(backbone_arch(cfg, train), cfg.rng("backbone-init"))

    def on_epoch(row):
        if sink is not None:
            s = evaluate(net, "full", test, batch_size=cfg.eval.batch_size, workers=cfg.workers)
            sink.write(_summary_row(cfg, "backbone", row["epoch"], cfg.reward.gamma, s))

    b = cfg.backbone
    train_backbone(net, train, b.epochs, b.lr, b.batch_size, cfg.rng("backbone-train"), on_epoch=on_epoch)
    save_checkpoint(net, RunDir(cfg.out).backbone, {"epochs": b.epochs})
    return net


def _eval_policy(cfg: RunConfig, net, pn, test: Dataset, purpose: str) -> EvalSummary:
    return evaluate(
        net, "policy", test, policy=pn, rng=cfg.rng(purpose), sample=cfg.eval.inference == "sample",
        batch_size=cfg.eval.batch_size, workers=cfg.workers,
    )


def stage_curriculum(
    cfg: RunConfig, train: Dataset, test: Dataset, gamma: float | None = None, sink: CsvSink | None = None
) -> PolicyNetwork:
    """Train the policy on the frozen pretrained backbone under the curriculum."""
    gamma = cfg.reward.gamma if gamma is None else gamma
    root = RunDir(cfg.out)
    rd = root.gamma_dir(gamma, cfg.reward.gamma)
    root.need(root.backbone)
    net = load_checkpoint(root.backbone, expect="backbone")
    g = _gamma_key(gamma)
    pn = PolicyNetwork(policy_arch(cfg, train, net.K), cfg.rng("policy-init", g), alpha=cfg.schedule.alpha)

    def on_epoch(rec):
        if sink is not None:
            s = _eval_policy(cfg, net, pn, test, "eval-curriculum")
            sink.write(_summary_row(cfg, "curriculum", rec.epoch, gamma, s))

    curriculum_train(pn, net, train, RewardConfig(gamma), cfg.schedule, cfg.rng("curriculum", g), on_epoch)
    save_checkpoint(pn, rd.policy, {"gamma": gamma, "epochs": cfg.schedule.curriculum_epochs})
    return pn


@dataclass
class FinetuneResult:
    backbone: GatedBackbone
    policy: PolicyNetwork
    pre: EvalSummary  # curriculum policy on the pretrained backbone
    post: EvalSummary  # finetuned policy on the finetuned backbone
    pre_matched: EvalSummary  # pretrained backbone under the finetuned policy's actions


def stage_finetune(
    cfg: RunConfig, train: Dataset, test: Dataset, gamma: float | None = None, sink: CsvSink | None = None
) -> FinetuneResult:
    """Jointly finetune backbone and policy; report before and after."""
    gamma = cfg.reward.gamma if gamma is None else gamma
    root = RunDir(cfg.out)
    rd = root.gamma_dir(gamma, cfg.reward.gamma)
    root.need(root.backbone, rd.policy)
    net0 = load_checkpoint(root.backbone, expect="backbone")
    pn = load_checkpoint(rd.policy, expect="policy")
    pre = _eval_policy(cfg, net0, pn, test, "eval-pre")
    if sink is not None:
        sink.write(_summary_row(cfg, "pre-finetune", 0, gamma, pre))
    net = net0.copy()

    def on_epoch(rec):
        if sink is not None:
            s = _eval_policy(cfg, net, pn, test, "eval-finetune")
            sink.write(_summary_row(cfg, "finetune", rec.epoch, gamma, s))

    g = _gamma_key(gamma)
    joint_finetune(pn, net, train, RewardConfig(gamma), cfg.schedule, cfg.rng("finetune", g), on_epoch)
    post = _eval_policy(cfg, net, pn, test, "eval-post")
    matched = _replay(cfg, net0, test, post.actions, "policy")
    if sink is not None:
        sink.write(_summary_row(cfg, "post-finetune", cfg.schedule.finetune_epochs, gamma, post))
        sink.write(_summary_row(cfg, "pre-finetune-matched", 0, gamma, matched))
    save_checkpoint(net, rd.backbone_ft, {"gamma": gamma, "epochs": cfg.schedule.finetune_epochs})
    save_checkpoint(pn, rd.policy_ft, {"gamma": gamma, "epochs": cfg.schedule.finetune_epochs})
    return FinetuneResult(net, pn, pre, post, matched)


def _replay(cfg: RunConfig, net: GatedBackbone, data: Dataset, actions: np.ndarray, label: str) -> EvalSummary:
    """Evaluate ``net`` under fixed per-image actions (usage matched by construction)."""
    from .backbone import predict
    from .evaluation import summarize

    ok = predict(net, data.images, actions, batch_size=cfg.eval.batch_size) == data.labels
    flops = net.flops_report().dynamic(actions)
    return summarize(label, ok, actions, flops)


def stage_seq(cfg: RunConfig, train: Dataset) -> SequentialGates:
    """Train per-block gates on the frozen pretrained backbone (no curriculum)."""
    root = RunDir(cfg.out)
    root.need(root.backbone)
    net = load_checkpoint(root.backbone, expect="backbone")
    gates = SequentialGates(net, cfg.rng("gates-init"), keep_bias=2.0)
    s = cfg.seq
    train_sequential(net, gates, train, cfg.reward, s.epochs, s.lr, s.batch_size, cfg.rng("gates-train"))
    save_checkpoint(gates, root.gates, {"gamma": cfg.reward.gamma, "epochs": s.epochs})
    return gates


def final_models(cfg: RunConfig, gamma: float | None = None) -> tuple[GatedBackbone, PolicyNetwork, bool]:
    """The finetuned pair when present, else the curriculum policy on the pretrained backbone."""
    gamma = cfg.reward.gamma if gamma is None else gamma
    root = RunDir(cfg.out)
    rd = root.gamma_dir(gamma, cfg.reward.gamma)
    if rd.backbone_ft.exists() and rd.policy_ft.exists():
        return load_checkpoint(rd.backbone_ft, expect="backbone"), load_checkpoint(rd.policy_ft, expect="policy"), True
    root.need(root.backbone, rd.policy)
    return load_checkpoint(root.backbone, expect="backbone"), load_checkpoint(rd.policy, expect="policy"), False


def stage_eval(cfg: RunConfig, test: Dataset, strategies: Iterable[str], sink: CsvSink | None = None) -> dict[str, EvalSummary]:
    """Evaluate the requested strategies; heuristics are matched to the policy's usage."""
    strategies = list(dict.fromkeys(s.lower() for s in strategies))
    root = RunDir(cfg.out)
    needs_policy = any(s != "full" and s != "seq" for s in strategies)
    if needs_policy:
        net, pn, _ = final_models(cfg)
    else:
        root.need(root.backbone)
        net = load_checkpoint(root.backbone_ft if root.backbone_ft.exists() else root.backbone, expect="backbone")
        pn = None
    out: dict[str, EvalSummary] = {}
    policy_summary = None
    if needs_policy:
        policy_summary = _eval_policy(cfg, net, pn, test, "eval-policy")
    for name in strategies:
        kw = dict(batch_size=cfg.eval.batch_size, workers=cfg.workers, rng=cfg.rng("eval-" + name))
        if name == "policy":
            s = policy_summary
        elif name == "full":
            s = evaluate(net, "full", test, **kw)
        elif name == "seq":
            root.need(root.backbone, root.gates)
            base = load_checkpoint(root.backbone, expect="backbone")
            gates = load_checkpoint(root.gates, expect="gates", backbone=base)
            s = evaluate(base, "seq", test, gates=gates, **kw)
        else:
            s = evaluate(net, name, test, match=policy_summary, **kw)
        out[name] = s
        if sink is not None:
            sink.write(_summary_row(cfg, "eval", 0, cfg.reward.gamma, s))
    return out


def stage_sweep(cfg: RunConfig, train: Dataset, test: Dataset, sink: CsvSink | None = None) -> list[tuple[float, EvalSummary]]:
    """Curriculum + finetune + eval per gamma, reusing finished runs; one row per gamma."""
    from .evaluation import sweep_gamma

    def run(gamma: float) -> EvalSummary:
        rd = RunDir(cfg.out).gamma_dir(gamma, cfg.reward.gamma)
        if not (rd.backbone_ft.exists() and rd.policy_ft.exists()):
            if not rd.policy.exists():
                stage_curriculum(cfg, train, test, gamma)
            stage_finetune(cfg, train, test, gamma)
        net, pn, _ = final_models(cfg, gamma)
        return _eval_policy(cfg, net, pn, test, "eval-sweep")

    def on_point(p):
        if sink is not None:
            sink.write(_summary_row(cfg, "sweep", cfg.schedule.finetune_epochs, p.gamma, p.summary))

    points = sweep_gamma(cfg.gammas, run, on_point)
    return [(p.gamma, p.summary) for p in points]


def difficulty_rows(cfg: RunConfig, test: Dataset, summary: EvalSummary) -> list[dict]:
    """Per-image usage rows plus one summary row per tag (warning rows for empty tags)."""
    usage = summary.usage
    tags = test.tags if test.tags is not None else np.array(["untagged"] * len(test))
    rows = []
    base = {"run_id": cfg.id, "seed": cfg.seed}
    for i in range(len(test)):
        rows.append({**base, "row_type": "image", "tag": tags[i], "index": i, "n": 1,
                     "blocks_mean": float(usage[i]), "blocks_std": 0.0,
                     "accuracy": float(summary.correct[i]), "note": "-"})
    wanted = ["easy", "hard"] if test.tags is not None else ["untagged"]
    for tag in wanted:
        m = tags == tag
        if not m.any():
            rows.append({**base, "row_type": "warning", "tag": tag, "index": -1, "n": 0,
                         "blocks_mean": float("nan"), "blocks_std": float("nan"),
                         "accuracy": float("nan"), "note": f"no images tagged {tag}"})
            log.warning("difficulty report: no images tagged %s", tag)
            continue
        rows.append({**base, "row_type": "tag", "tag": tag, "index": -1, "n": int(m.sum()),
                     "blocks_mean": float(usage[m].mean()), "blocks_std": float(usage[m].std()),
                     "accuracy": float(summary.correct[m].mean()), "note": "-"})
    return rows


def stage_difficulty(cfg: RunConfig, test: Dataset, sink: CsvSink | None = None) -> list[dict]:
    net, pn, _ = final_models(cfg)
    s = _eval_policy(cfg, net, pn, test, "eval-difficulty")
    rows = difficulty_rows(cfg, test, s)
    if sink is not None:
        for r in rows:
            sink.write(r)
    return rows
