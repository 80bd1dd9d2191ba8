"""Experiment harness: configs, runners, ablations, and report emission.

Experiments are described by a small versioned YAML config. Each seed runs
the full task sequence and persists its trace, retrieval report, and
checkpoints under its own subdirectory. The report path writes delimited
curve data plus a rendered figure next to it.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from .data import (
    BatchSpec,
    Dataset,
    load_dataset,
    make_blobs,
    merge_tasks,
    split_even,
    split_half_pretrain,
)
from .errors import ConfigError, InconsistentCheckpoints
from .evaluate import RetrievalReport
from .losses import LossWeights
from .models import reference_network, save_checkpoint
from .training import TrainConfig, config_for_mask, run_sequence

CONFIG_VERSION = 1

VALID_COMPONENTS = ("ce", "triplet", "kd", "csd")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    dataset: dict  # {"manifest": path} or {"synth": {...}}
    protocol: str  # "even" | "half_pretrain" | "joint"
    num_tasks: int
    model: dict  # hidden_dims, feature_dim, classifier_bias
    train: TrainConfig
    components: tuple  # loss-component mask, always contains "ce"
    eval_ks: tuple
    out_dir: str
    seeds: tuple
    version: int = CONFIG_VERSION

    def __post_init__(self):
        if "ce" not in self.components:
            raise ConfigError("components: mask must include 'ce'")
        bad = set(self.components) - set(VALID_COMPONENTS)
        if bad:
            raise ConfigError(f"components: unknown entries {sorted(bad)}")
        if self.num_tasks < 1:
            raise ConfigError("num_tasks: must be >= 1")
        if self.protocol not in ("even", "half_pretrain", "joint"):
            raise ConfigError(f"protocol: unknown protocol {self.protocol!r}")
        if not self.seeds:
            raise ConfigError("seeds: at least one seed required")
        if not ("manifest" in self.dataset or "synth" in self.dataset):
            raise ConfigError("dataset: needs a 'manifest' or 'synth' entry")

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        t = self.train
        return {
            "version": self.version,
            "name": self.name,
            "dataset": self.dataset,
            "protocol": self.protocol,
            "num_tasks": self.num_tasks,
            "model": self.model,
            "train": {
                "epochs_per_task": t.epochs_per_task,
                "classes_per_batch": t.batch_spec.num_classes_per_batch,
                "samples_per_class": t.batch_spec.samples_per_class,
                "lr_first_task": t.lr_first_task,
                "lr_later_tasks": t.lr_later_tasks,
                "classifier_lr": t.classifier_lr,
                "lambda_kd": t.loss_weights.lambda_kd,
                "lambda_csd": t.loss_weights.lambda_csd,
                "triplet_margin": t.loss_weights.triplet_margin,
                "kd_temperature": t.loss_weights.kd_temperature,
                "csd_temperature": t.loss_weights.csd_temperature,
                "normalize_csd_features": t.loss_weights.normalize_csd_features,
                "random_crop": t.random_crop,
                "horizontal_flip": t.horizontal_flip,
                "deterministic": t.deterministic,
            },
            "components": sorted(self.components),
            "eval_ks": list(self.eval_ks),
            "out_dir": self.out_dir,
            "seeds": list(self.seeds),
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        try:
            t = dict(raw.get("train", {}))
            spec = BatchSpec(
                num_classes_per_batch=t.pop("classes_per_batch", 8),
                samples_per_class=t.pop("samples_per_class", 4),
            )
            weights = LossWeights(
                lambda_kd=t.pop("lambda_kd", 1.0),
                lambda_csd=t.pop("lambda_csd", 1.0),
                triplet_margin=t.pop("triplet_margin", 0.3),
                kd_temperature=t.pop("kd_temperature", 1.0),
                csd_temperature=t.pop("csd_temperature", 1.0),
                normalize_csd_features=t.pop("normalize_csd_features", False),
            )
            train = TrainConfig(
                batch_spec=spec, loss_weights=weights,
                **{k: v for k, v in t.items() if k != "seed"},
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train: {exc}") from exc
        return cls(
            name=raw.get("name", "experiment"),
            dataset=raw["dataset"],
            protocol=raw.get("protocol", "even"),
            num_tasks=int(raw.get("num_tasks", 1)),
            model=raw.get("model", {}),
            train=train,
            components=tuple(raw.get("components", list(VALID_COMPONENTS))),
            eval_ks=tuple(raw.get("eval_ks", [1])),
            out_dir=raw.get("out_dir", "runs"),
            seeds=tuple(raw.get("seeds", [0])),
            version=int(raw.get("version", CONFIG_VERSION)),
        )

    @classmethod
    def from_yaml(cls, path: str) -> "ExperimentConfig":
        with open(path) as fh:
            raw = yaml.safe_load(fh)
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config root must be a mapping")
        return cls.from_dict(raw)


@dataclass
class RunRecord:
    label: str
    seed: int
    config_hash: str
    report: RetrievalReport
    trace: list
    wall_clock: float

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "report": self.report.to_dict(),
            "trace": [json.loads(r.to_json()) for r in self.trace],
            "wall_clock": self.wall_clock,
        }

    @classmethod
    def load(cls, path: str) -> "RunRecord":
        with open(path) as fh:
            blob = json.load(fh)
        return cls(
            label=blob["label"],
            seed=blob["seed"],
            config_hash=blob["config_hash"],
            report=RetrievalReport.from_dict(blob["report"]),
            trace=blob["trace"],
            wall_clock=blob["wall_clock"],
        )


def build_dataset(descriptor: dict) -> Dataset:
    if "manifest" in descriptor:
        return load_dataset(descriptor["manifest"])
    if "synth" in descriptor:
        s = descriptor["synth"]
        return make_blobs(
            num_classes=int(s.get("classes", 8)),
            dim=int(s.get("dim", 16)),
            per_class=int(s.get("per_class", 50)),
            spread=float(s.get("spread", 1.0)),
            seed=int(s.get("seed", 0)),
        )
    raise ConfigError("dataset: needs a 'manifest' or 'synth' entry")


def build_sequence(dataset: Dataset, config: ExperimentConfig, seed: int):
    if config.protocol == "half_pretrain":
        return split_half_pretrain(dataset, config.num_tasks, seed)
    seq = split_even(dataset, config.num_tasks, seed)
    if config.protocol == "joint":
        seq = merge_tasks(seq)
    return seq


def _seed_dir(config: ExperimentConfig, seed: int) -> str:
    return os.path.join(config.out_dir, config.name, f"seed{seed}")


def run_single_seed(config: ExperimentConfig, seed: int,
                    overwrite: bool = False) -> RunRecord:
    out = _seed_dir(config, seed)
    done = os.path.join(out, "DONE")
    record_path = os.path.join(out, "record.json")
    if os.path.exists(done) and not overwrite:
        return RunRecord.load(record_path)
    os.makedirs(out, exist_ok=True)

    dataset = build_dataset(config.dataset)
    seq = build_sequence(dataset, config, seed)
    input_dim = int(np.prod(dataset.inputs.shape[1:]))
    model = reference_network(
        input_dim,
        config.model.get("hidden_dims", [32]),
        config.model.get("feature_dim", 8),
        seed=seed,
        classifier_bias=config.model.get("classifier_bias", False),
    )
    train = replace(config_for_mask(config.train, set(config.components)),
                    seed=seed)

    def checkpoint_hook(m, index, label):
        save_checkpoint(m, os.path.join(out, f"checkpoint_{index:02d}.pt"))

    t0 = time.perf_counter()
    _, _, report, trace = run_sequence(
        model, seq, train, ks=config.eval_ks, checkpoint_hook=checkpoint_hook
    )
    record = RunRecord(
        label=config.name,
        seed=seed,
        config_hash=config.config_hash(),
        report=report,
        trace=trace,
        wall_clock=time.perf_counter() - t0,
    )
    with open(record_path, "w") as fh:
        json.dump(record.to_dict(), fh, indent=1)
    with open(os.path.join(out, "trace.jsonl"), "w") as fh:
        for r in trace:
            fh.write(r.to_json() + "\n")
    with open(os.path.join(out, "report.txt"), "w") as fh:
        fh.write(report.format_text())
    with open(done, "w") as fh:
        fh.write(record.config_hash + "\n")
    return record


def run_experiment(config: ExperimentConfig, overwrite: bool = False
                   ) -> list[RunRecord]:
    """Run the configured sequence for every seed; idempotent per seed."""
    return [run_single_seed(config, s, overwrite) for s in config.seeds]


def summarize(records: list[RunRecord], k: int = 1) -> dict:
    """Mean and std across seeds of first-task / last-task / average recall."""
    firsts, lasts, avgs = [], [], []
    for r in records:
        row = next(x for x in r.report.summary_rows() if x["k"] == k)
        firsts.append(row["first_task"])
        lasts.append(row["last_task"])
        avgs.append(row["average"])
    agg = lambda v: {"mean": float(np.mean(v)), "std": float(np.std(v))}
    return {"k": k, "first_task": agg(firsts), "last_task": agg(lasts),
            "average": agg(avgs), "num_seeds": len(records)}


def format_summary_table(label_to_summary: dict, k: int = 1) -> str:
    """Method rows with first-task, last-task, and average Recall@k columns."""
    lines = [
        f"{'method':<24} {'R@%d first' % k:>12} {'R@%d last' % k:>12} "
        f"{'R@%d avg' % k:>12}"
    ]
    for label, s in label_to_summary.items():
        lines.append(
            f"{label:<24} "
            f"{100 * s['first_task']['mean']:>12.1f} "
            f"{100 * s['last_task']['mean']:>12.1f} "
            f"{100 * s['average']['mean']:>12.1f}"
        )
    return "\n".join(lines) + "\n"


def run_lambda_grid(config: ExperimentConfig, values,
                    overwrite: bool = False) -> dict:
    """Cartesian (lambda_kd, lambda_csd) sweep of the stability weights."""
    if not values:
        raise ConfigError("lambda grid needs at least one value")
    grid = {}
    for lam_kd, lam_csd in itertools.product(values, values):
        w = replace(config.train.loss_weights,
                    lambda_kd=float(lam_kd), lambda_csd=float(lam_csd))
        cell = replace(
            config,
            name=f"{config.name}_kd{lam_kd}_csd{lam_csd}",
            train=replace(config.train, loss_weights=w),
        )
        grid[(lam_kd, lam_csd)] = run_experiment(cell, overwrite)
    return grid


def format_lambda_grid(grid: dict, k: int = 1) -> str:
    lines = [
        f"{'lambda_kd':>10} {'lambda_csd':>11} {'first':>8} {'last':>8} "
        f"{'average':>8}"
    ]
    for (lam_kd, lam_csd), records in grid.items():
        s = summarize(records, k)
        lines.append(
            f"{lam_kd:>10} {lam_csd:>11} "
            f"{100 * s['first_task']['mean']:>8.2f} "
            f"{100 * s['last_task']['mean']:>8.2f} "
            f"{100 * s['average']['mean']:>8.2f}"
        )
    return "\n".join(lines) + "\n"


def mask_label(mask) -> str:
    order = {c: i for i, c in enumerate(VALID_COMPONENTS)}
    return "+".join(sorted(mask, key=order.get))


def run_component_ablation(config: ExperimentConfig, masks,
                           overwrite: bool = False) -> dict:
    """One sequence per loss-component mask; keyed by mask label."""
    results = {}
    for mask in masks:
        mask = set(mask)
        label = mask_label(mask)
        cell = replace(
            config,
            name=f"{config.name}_{label.replace('+', '-')}",
            components=tuple(sorted(mask)),
        )
        results[label] = run_experiment(cell, overwrite)
    return results


# ---------------------------------------------------------------------------
# Plot data emission: delimited curve files plus a rendered figure


def emit_plot_data(labeled_records: dict, out_path: str, k: int = 1,
                   render: bool = True) -> str:
    """Write Recall@k curves as tab-delimited rows (checkpoint, label, value).

    Multi-seed entries are averaged per checkpoint. A PNG figure with the
    overlaid curves is rendered next to the data file.
    """
    curves = {}
    n_checkpoints = None
    for label, records in labeled_records.items():
        if isinstance(records, RunRecord):
            records = [records]
        per_seed = []
        for r in records:
            curve = [c.per_task[1][k] for c in r.report.checkpoints]
            per_seed.append(curve)
        lengths = {len(c) for c in per_seed}
        if len(lengths) != 1:
            raise InconsistentCheckpoints(f"{label}: ragged checkpoint counts")
        n = lengths.pop()
        if n_checkpoints is None:
            n_checkpoints = n
        elif n != n_checkpoints:
            raise InconsistentCheckpoints(
                f"{label}: {n} checkpoints, expected {n_checkpoints}"
            )
        curves[label] = np.mean(per_seed, axis=0)

    with open(out_path, "w") as fh:
        fh.write(f"checkpoint\tlabel\trecall_at_{k}\n")
        for i in range(n_checkpoints or 0):
            for label, curve in curves.items():
                fh.write(f"{i}\t{label}\t{float(curve[i])!r}\n")
    if render:
        render_curve_figure(curves, os.path.splitext(out_path)[0] + ".png", k)
    return out_path


def render_curve_figure(curves: dict, out_path: str, k: int = 1):
    """Overlay forgetting curves (first-task Recall@k vs checkpoint)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, curve in curves.items():
        ax.plot(range(len(curve)), [100 * v for v in curve],
                marker="o", label=label)
    ax.set_xlabel("checkpoint (tasks learned)")
    ax.set_ylabel(f"Recall@{k} on first task (%)")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def parse_plot_file(path: str) -> dict:
    """Inverse of emit_plot_data: label -> list of recall values."""
    curves = {}
    with open(path) as fh:
        next(fh)
        for line in fh:
            idx, label, value = line.rstrip("\n").split("\t")
            curves.setdefault(label, []).append((int(idx), float(value)))
    return {
        label: [v for _, v in sorted(points)]
        for label, points in curves.items()
    }
