"""Command-line driver: ``advkit {train,attack,analyze,report} --config PATH``.

Artifacts live in the output directory::

    models/<path>            weight files (relative model paths resolve here)
    train_summary.json       clean accuracy and final loss per trained model
    results.csv              one row per (model, loss, sample)
    adv/<model>__<loss>.npy  adversarial inputs, in sample order
    summary.json             robust accuracy per model and loss
    timing.json              wall-clock timings (not part of the determinism contract)
    analysis.json            every analysis structure
    table.csv, ablation.csv, norms.csv
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis as an
from .attacks import AttackConfig, Engine, attack, tune_sigma
from .config import ConfigError, ExperimentConfig, ModelSpec, parse_config
from .io import (ResultRow, read_cifar10_binary, read_report, read_results, write_csv, write_report,
                 write_results)
from .losses import LossConfig, LossKind
from .model import Classifier, load_weights, save_weights
from .seeding import derive_seed, rng as seeded_rng
from .training import Dataset, TrainConfig, evaluate_accuracy, generate_synthetic, inner_attack, train_adversarial, \
    train_standard

ABLATION = (("CE", "ce"), ("CE + scaled", "ce-scaled"), ("scaled + L2", "l2-scaled"), ("Jitter", "jitter"))
TUNABLE = (LossKind.NOISE.value, LossKind.JITTER.value)


class MissingArtifactError(RuntimeError):
    def __init__(self, path: Path, command: str):
        super().__init__(f"{path} not found; run `advkit {command}` with this config first")
        self.path = path
        self.command = command


class Run:
    """A parsed config plus command-line overrides and path helpers."""

    def __init__(self, config: ExperimentConfig, out: Path):
        self.config = config
        self.out = out
        self.dtype = np.float64 if config.precision == 64 else np.float32

    def model_path(self, spec: ModelSpec) -> Path:
        p = Path(spec.path)
        return p if p.is_absolute() else self.out / "models" / p

    def require(self, path: Path, command: str) -> Path:
        if not path.exists():
            raise MissingArtifactError(path, command)
        return path

    def load_model(self, spec: ModelSpec) -> Classifier:
        return load_weights(self.require(self.model_path(spec), "train"), logit_scale=spec.logit_scale,
                            dtype=self.dtype)

    def dataset(self, split: str) -> Dataset:
        d = self.config.dataset
        if d.kind == "cifar10":
            if split == "train":
                if not d.train_files:
                    raise ConfigError("dataset.train_files", "training on cifar10 needs train_files")
                parts = [read_cifar10_binary(f) for f in d.train_files]
                data = Dataset(np.concatenate([p.inputs for p in parts]), np.concatenate([p.labels for p in parts]),
                               10, "train", {"source": "cifar10", "files": list(d.train_files)})
            else:
                data = read_cifar10_binary(d.test_file)
        else:
            per_class = d.samples_per_class if split == "train" else d.test_samples_per_class
            data = generate_synthetic(d.classes, d.dim, per_class, d.spread, self.config.seed, split=split,
                                      fragile_dims=d.fragile_dims, fragile_amplitude=d.fragile_amplitude,
                                      fragile_noise=d.fragile_noise)
        if d.limit is not None and split == "test":
            data = data.subset(np.arange(min(d.limit, len(data))))
        return data

    def attack_inputs(self) -> Dataset:
        data = self.dataset("test")
        n = self.config.attack.samples
        return data if n is None else data.subset(np.arange(min(n, len(data))))

    def attack_config(self, loss: str, model_id: str) -> AttackConfig:
        a = self.config.attack
        return AttackConfig(
            loss=LossConfig(kind=LossKind(loss), scale_alpha=a.scale_alpha, sigma=a.sigma, norm=a.norm),
            epsilon=a.epsilon, iterations=a.iterations, restarts=a.restarts, step_size=a.step_size,
            engine=Engine(a.engine), seed=derive_seed(self.config.seed, f"attack/{model_id}/{loss}"),
            chunk_size=a.chunk_size, threads=self.config.threads)


def command_train(run: Run) -> dict:
    train, test = run.dataset("train"), run.dataset("test")
    summary = {}
    for spec in run.config.models:
        if spec.train is None:
            continue
        t = spec.train
        dims = [train.dim, *spec.hidden, train.num_classes]
        model = Classifier.init(dims, seeded_rng(run.config.seed, f"init/{spec.id}"), dtype=run.dtype)
        inner = None
        if t.adversarial is not None:
            inner = replace(inner_attack(t.adversarial.epsilon), iterations=t.adversarial.iterations,
                            threads=run.config.threads)
            if t.adversarial.step_size is not None:
                inner = replace(inner, step_size=t.adversarial.step_size)
        cfg = TrainConfig(epochs=t.epochs, batch_size=t.batch_size, learning_rate=t.learning_rate,
                          adversarial=inner, seed=derive_seed(run.config.seed, f"train/{spec.id}"))
        history: list[float] = []
        trainer = train_standard if inner is None else train_adversarial
        model = trainer(model, train, cfg, history)
        path = run.model_path(spec)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_weights(model, path)
        scaled = model.with_logit_scale(spec.logit_scale)
        summary[spec.id] = {"path": str(spec.path), "adversarial": inner is not None,
                            "clean_accuracy": evaluate_accuracy(scaled, test).clean,
                            "final_loss": history[-1] if history else None, "steps": len(history)}
        print(f"trained {spec.id}: clean accuracy {summary[spec.id]['clean_accuracy']:.4f}")
    write_report({"models": summary, "dataset": train.provenance}, run.out / "train_summary.json")
    return summary


def _summary_row(outcomes) -> dict:
    n = len(outcomes)
    succ = sum(o.success for o in outcomes)
    clean = sum(o.clean_pred == o.label for o in outcomes)
    return {"samples": n, "successes": int(succ), "clean_accuracy": clean / n if n else float("nan"),
            "robust_accuracy": (n - succ) / n if n else float("nan")}


def _mark_best(per_loss: dict) -> dict:
    """Flag the strongest loss (lowest robust accuracy) and the Jitter gap to the best other loss."""
    if not per_loss:
        return {"best": [], "diff": None}
    best_acc = min(v["robust_accuracy"] for v in per_loss.values())
    for v in per_loss.values():
        v["best"] = v["robust_accuracy"] == best_acc
    others = [v["robust_accuracy"] for k, v in per_loss.items() if k != "jitter"]
    diff = None
    if "jitter" in per_loss and others:
        diff = per_loss["jitter"]["robust_accuracy"] - min(others)
    return {"best": sorted(k for k, v in per_loss.items() if v["best"]), "diff": diff}


def command_attack(run: Run) -> dict:
    data = run.attack_inputs()
    a = run.config.attack
    rows: list[ResultRow] = []
    summary: dict = {"models": {}, "attack": a.to_dict(), "samples": len(data)}
    timing: dict = {}
    for spec in run.config.models:
        model = run.load_model(spec)
        per_loss, tuning = {}, {}
        for loss in a.losses:
            cfg = run.attack_config(loss, spec.id)
            if a.tune_sigma and loss in TUNABLE:
                n = min(a.tuning_samples, len(data))
                tune_cfg = replace(cfg, seed=derive_seed(run.config.seed, f"tune/{spec.id}/{loss}"))
                start = time.perf_counter()
                sigma, rates = tune_sigma(model, data.inputs[:n], data.labels[:n], tune_cfg, grid=a.sigma_grid)
                tuned = time.perf_counter() - start
                cfg = replace(cfg, loss=replace(cfg.loss, sigma=sigma))
                tuning[loss] = {"sigma": sigma, "rates": {f"{s:g}": r for s, r in rates.items()},
                                "sample_attacks": len(rates) * n * a.restarts}
                timing.setdefault(spec.id, {})[f"{loss}/tuning"] = tuned
            start = time.perf_counter()
            outcomes = attack(model, data.inputs, data.labels, cfg)
            timing.setdefault(spec.id, {})[loss] = time.perf_counter() - start
            adv_path = run.out / "adv" / f"{spec.id}__{loss}.npy"
            adv_path.parent.mkdir(parents=True, exist_ok=True)
            np.save(adv_path, np.stack([o.x_adv for o in outcomes]) if outcomes
                    else np.zeros((0, model.input_dim), model.dtype))
            rows.extend(ResultRow.from_outcome(i, o, loss, spec.id, cfg.seed) for i, o in enumerate(outcomes))
            per_loss[loss] = _summary_row(outcomes)
            if cfg.loss.stochastic:
                per_loss[loss]["sigma"] = cfg.loss.sigma
            print(f"attacked {spec.id} with {loss}: robust accuracy {per_loss[loss]['robust_accuracy']:.4f}")
        summary["models"][spec.id] = {"losses": per_loss, **_mark_best(per_loss), "tuning": tuning}
    write_results(rows, run.out / "results.csv")
    write_report(summary, run.out / "summary.json")
    main = {m: sum(v for k, v in t.items() if not k.endswith("/tuning")) for m, t in timing.items()}
    tune = {m: sum(v for k, v in t.items() if k.endswith("/tuning")) for m, t in timing.items()}
    write_report({"seconds": timing, "tuning_overhead": {m: tune[m] / main[m] if main[m] else None for m in main}},
                 run.out / "timing.json")
    return summary


def _group(rows: list[ResultRow]) -> dict[str, dict[str, list[ResultRow]]]:
    out: dict[str, dict[str, list[ResultRow]]] = {}
    for r in rows:
        out.setdefault(r.model, {}).setdefault(r.loss, []).append(r)
    return out


def command_analyze(run: Run) -> dict:
    rows = read_results(run.require(run.out / "results.csv", "attack"))
    grouped = _group(rows)
    data = run.attack_inputs()
    cfg = run.config.analysis
    c = data.num_classes
    report: dict = {"confusion": {}, "partition": {}, "class_distribution": {}, "logits": {}, "csm": {},
                    "landscape": {}, "norms": {}, "perturbation_magnitude": {}}
    losses = sorted({r.loss for r in rows})
    for loss in losses:
        per_model = [grouped[m.id][loss] for m in run.config.models if loss in grouped.get(m.id, {})]
        if not per_model:
            continue
        partition = an.partition_robustness(per_model)
        report["partition"][loss] = partition.to_dict()
        dist = an.class_distribution(partition, data.labels[:len(partition.counts)], c)
        report["class_distribution"][loss] = {**{k: v.tolist() for k, v in dist.items()},
                                              "chi_square": an.chi_square(dist["robust"], dist["non_robust"])}
    reference = "jitter" if "jitter" in losses else (losses[0] if losses else None)
    for spec in run.config.models:
        if spec.id not in grouped:
            raise MissingArtifactError(run.out / "results.csv", "attack")
        model = run.load_model(spec)
        by_loss = grouped[spec.id]
        report["confusion"][spec.id] = {loss: {v: an.confusion(outs, c, v).to_dict() for v in an.VARIANTS}
                                       for loss, outs in by_loss.items()}
        report["logits"][spec.id] = an.logit_stats(model, data.inputs).to_dict()
        n = min(cfg.csm_samples, len(data))
        partition = None
        if reference is not None and n:
            per_model = [grouped[m.id][reference][:n] for m in run.config.models if reference in grouped.get(m.id, {})]
            partition = an.partition_robustness(per_model)
        report["csm"][spec.id] = an.csm_stats(model, data.inputs[:n], partition).to_dict()
        report["norms"][spec.id] = {k: v.to_dict() for k, v in an.norm_stats(by_loss).items()}
        curves, magnitude = {}, {}
        for loss, outs in by_loss.items():
            adv = np.load(run.require(run.out / "adv" / f"{spec.id}__{loss}.npy", "attack"))
            if len(adv):
                magnitude[loss] = an.perturbation_magnitude(data.inputs[:len(adv)], adv, cfg.channels).mean(axis=0)
            if loss not in cfg.landscape_losses:
                continue
            found = []
            for o in an.attacked_successes(outs):
                gamma = adv[o.index].astype(np.float64) - data.inputs[o.index]
                if np.any(gamma):
                    found.append(an.landscape(model, data.inputs[o.index], gamma, o.true_label,
                                              cfg.landscape_t_max, cfg.landscape_steps))
            curves[loss] = an.mean_curve(found).to_dict() if found else None
        report["landscape"][spec.id] = curves
        report["perturbation_magnitude"][spec.id] = magnitude
    write_report(report, run.out / "analysis.json")
    print(f"wrote {run.out / 'analysis.json'}")
    return report


def command_report(run: Run) -> list[Path]:
    summary = read_report(run.require(run.out / "summary.json", "attack"))
    losses = list(summary["attack"]["losses"])
    written = []
    table = []
    for model_id, entry in summary["models"].items():
        accs = [entry["losses"][k]["robust_accuracy"] for k in losses]
        table.append([model_id, *accs, "|".join(entry["best"]), "" if entry["diff"] is None else entry["diff"]])
    write_csv(["model", *losses, "best", "diff"], table, run.out / "table.csv")
    written.append(run.out / "table.csv")
    if all(k in losses for _, k in ABLATION):
        ablation = []
        for model_id, entry in summary["models"].items():
            base = entry["losses"]["ce"]["robust_accuracy"]
            for name, k in ABLATION:
                acc = entry["losses"][k]["robust_accuracy"]
                ablation.append([model_id, name, acc, acc - base])
        write_csv(["model", "component", "accuracy", "delta"], ablation, run.out / "ablation.csv")
        written.append(run.out / "ablation.csv")
    analysis_path = run.out / "analysis.json"
    if analysis_path.exists():
        norms = []
        for model_id, by_loss in read_report(analysis_path)["norms"].items():
            for loss in sorted(by_loss):
                s = by_loss[loss]
                norms.append([model_id, loss, s["successes"], s["total"], _num(s["l2"]["mean"]),
                              _num(s["l2"]["median"]), _num(s["linf"]["mean"])])
        write_csv(["model", "loss", "successes", "total", "l2_mean", "l2_median", "linf_mean"], norms,
                  run.out / "norms.csv")
        written.append(run.out / "norms.csv")
    for p in written:
        print(f"wrote {p}")
    return written


def _num(v):
    return "" if v is None else float(v)


COMMANDS = {"train": command_train, "attack": command_attack, "analyze": command_analyze, "report": command_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advkit", description="Seeded adversarial-robustness experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path, help="experiment JSON file")
        p.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="root seed (overrides seed)")
        p.add_argument("--precision", type=int, choices=(32, 64), help="floating point width")
        p.add_argument("--threads", type=int, help="worker threads for attacks")
    return parser


def make_run(args: argparse.Namespace) -> Run:
    config = parse_config(args.config)
    overrides = {"command": args.command}
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed", "must be an unsigned 64-bit integer")
        overrides["seed"] = args.seed
    if args.precision is not None:
        overrides["precision"] = args.precision
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads", "must be positive")
        overrides["threads"] = args.threads
    if args.out is not None:
        overrides["output_dir"] = str(args.out)
    config = replace(config, **overrides)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return Run(config, out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run = make_run(args)
        COMMANDS[args.command](run)
    except (ConfigError, MissingArtifactError, OSError, ValueError) as exc:
        print(f"advkit {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
