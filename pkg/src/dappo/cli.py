"""Command-line pipeline: expert, datasets, classifier, policies, evaluation, deployment demo."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import control, report
from . import damage as dmg
from . import diagnosis as dg
from .config import ExperimentConfig
from .errors import ConfigurationError, InvalidInputError, TrainingDivergedError
from .nn import dump_checkpoint, read_checkpoint
from .ppo import METRIC_FIELDS, GaussianPolicy, ValueNet, evaluate_policy, train

log = logging.getLogger("dappo")

EXPERT, SAMPLES, CLASSIFIER = "expert.json", "samples.bin", "classifier.json"
POLICY = {"dappo": "dappo.json", "unaware": "unaware.json"}
PRODUCER = {EXPERT: "train-expert", SAMPLES: "collect", CLASSIFIER: "train-diagnose",
            POLICY["dappo"]: "train-dappo", POLICY["unaware"]: "train-unaware"}


class MissingArtifactError(ConfigurationError):
    pass


def run_dir(cfg: ExperimentConfig, seed: int) -> Path:
    d = Path(cfg.out) / cfg.robot / f"seed_{seed}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def top_dir(cfg: ExperimentConfig) -> Path:
    d = Path(cfg.out) / cfg.robot
    d.mkdir(parents=True, exist_ok=True)
    return d


def require(cfg: ExperimentConfig, seed: int, name: str) -> Path:
    path = run_dir(cfg, seed) / name
    if not path.exists():
        raise MissingArtifactError(f"{path} not found; run `dappo {PRODUCER[name]}` first")
    return path


def meta(cfg: ExperimentConfig, seed=None) -> dict:
    return {"config_hash": cfg.hash(seed), "seed": cfg.seeds if seed is None else seed, "robot": cfg.robot}


def load_policy(cfg, seed, name) -> GaussianPolicy:
    return GaussianPolicy.from_json(read_checkpoint(require(cfg, seed, name))["policy"])


def load_classifier(cfg, seed) -> dg.SequenceClassifier:
    return dg.SequenceClassifier.from_json(read_checkpoint(require(cfg, seed, CLASSIFIER))["classifier"])


def _train_policy(cfg, seed, stages, aware, stem):
    result = train(cfg.ppo, cfg.spec, stages, seed, aware)
    d = run_dir(cfg, seed)
    dump_checkpoint(d / f"{stem}.json", {
        **meta(cfg, seed), "aware": aware, "stages": [list(s) for s in stages],
        "policy": result.policy.to_json(), "value": result.value.to_json(),
        "beta": result.beta, "lr": result.lr,
    })
    report.write_csv(d / f"{stem}_metrics.csv", METRIC_FIELDS,
                     ([m[f] for f in METRIC_FIELDS] for m in result.metrics), meta(cfg, seed))
    return result


def cmd_train_expert(cfg: ExperimentConfig):
    for seed in cfg.seeds:
        res = _train_policy(cfg, seed, (("I", cfg.data["expert"]["iterations"]),), False, "expert")
        log.info("seed %d: expert trained, last forward reward %s", seed,
                 res.metrics[-1]["mean_forward_reward"] if res.metrics else "n/a")


def cmd_collect(cfg: ExperimentConfig):
    for seed in cfg.seeds:
        expert = load_policy(cfg, seed, EXPERT)
        samples = dg.collect_samples(cfg.collection(seed), cfg.spec, expert)
        dg.save_samples(run_dir(cfg, seed) / SAMPLES, samples, meta(cfg, seed))
        log.info("seed %d: %d samples, %d truncated", seed, len(samples), int(samples.truncated.sum()))


def _grid_cells(cfg, seed, expert):
    """Validation accuracy for every (T, rollouts, method) cell from one set of rollouts.

    Samples are ordered by rollout, so the first R rollouts are a prefix; a
    T-step sample is a column prefix of the longest one.
    """
    g = cfg.data["diagnose"]
    Tmax, Rmax = max(g["grid_timesteps"]), max(g["grid_rollouts"])
    base = cfg.collection(seed)
    coll = dg.CollectionConfig(Rmax, Tmax, base.seed_base, base.method, base.class_ids)
    sets = dg.collect_samples(coll, cfg.spec, expert, methods=tuple(g["grid_methods"]))
    D = sets[g["grid_methods"][0]].n_classes
    cells = {}
    for T in g["grid_timesteps"]:
        for R in g["grid_rollouts"]:
            for m in g["grid_methods"]:
                full = sets[m]
                sub = dg.SampleSet(full.X[: R * D, :, :T], full.labels[: R * D], m, D, full.seed_base)
                _, rep = dg.train_classifier(sub, g["split"], seed=seed, config=cfg.train_config)
                cells[(T, R, m)] = rep.val_accuracy
                log.info("seed %d grid T=%d R=%d %s: %.4f", seed, T, R, m, rep.val_accuracy)
    return cells


def cmd_train_diagnose(cfg: ExperimentConfig, grid: bool = True):
    g = cfg.data["diagnose"]
    per_seed = []
    for seed in cfg.seeds:
        samples, _ = dg.load_samples(require(cfg, seed, SAMPLES))
        model, rep = dg.train_classifier(samples, g["split"], seed=seed, config=cfg.train_config)
        d = run_dir(cfg, seed)
        dump_checkpoint(d / CLASSIFIER, {**meta(cfg, seed), "classifier": model.to_json(),
                                         "val_accuracy": rep.val_accuracy, "train_accuracy": rep.train_accuracy})
        report.write_csv(d / "classifier_history.csv", ("epoch", "val_loss", "val_accuracy"),
                         ([h["epoch"], h["val_loss"], h["val_accuracy"]] for h in rep.history), meta(cfg, seed))
        cm = dg.confusion_matrix(model, samples, rep.val_idx)
        report.write_csv(d / "confusion.csv", ["true"] + [str(c) for c in range(cm.shape[1])],
                         ([i, *row.tolist()] for i, row in enumerate(cm)), meta(cfg, seed))
        log.info("seed %d: classifier validation accuracy %.4f", seed, rep.val_accuracy)
        if grid:
            per_seed.append(_grid_cells(cfg, seed, load_policy(cfg, seed, EXPERT)))
    if grid:
        rows = []
        for key in per_seed[0]:
            acc = np.array([cells[key] for cells in per_seed])
            rows.append([*key, float(acc.mean()), float(acc.std()), len(acc)])
        report.write_csv(top_dir(cfg) / "diagnosis_grid.csv",
                         ("timesteps", "rollouts", "method", "mean_accuracy", "std_accuracy", "n_seeds"),
                         rows, meta(cfg))


def cmd_train_dappo(cfg: ExperimentConfig):
    for seed in cfg.seeds:
        _train_policy(cfg, seed, cfg.stages, True, "dappo")


def cmd_train_unaware(cfg: ExperimentConfig):
    for seed in cfg.seeds:
        _train_policy(cfg, seed, cfg.stages, False, "unaware")


def per_class_forward(cfg, seed, policy, aware) -> np.ndarray:
    e = cfg.data["evaluate"]
    spec = cfg.spec
    D = dmg.count_classes(spec.n_legs, 2)
    seeds = [e["seed_base"] + i for i in range(e["episodes"])]
    _, fwd = evaluate_policy(policy, spec, range(D), seeds, aware, deterministic=e["deterministic"],
                             noise_seed=seed)
    return fwd.mean(axis=1)


def _class_accuracy(cfg, seed, D):
    path = run_dir(cfg, seed) / "confusion.csv"
    if not path.exists():
        return None
    cm = np.array([[int(r[str(c)]) for c in range(D)] for r in report.read_csv(path)])
    return np.diag(cm) / np.maximum(cm.sum(axis=1), 1)


def cmd_evaluate(cfg: ExperimentConfig):
    spec = cfg.spec
    D = dmg.count_classes(spec.n_legs, 2)
    da, un, accs = [], [], []
    for seed in cfg.seeds:
        da.append(per_class_forward(cfg, seed, load_policy(cfg, seed, POLICY["dappo"]), True))
        un.append(per_class_forward(cfg, seed, load_policy(cfg, seed, POLICY["unaware"]), False))
        acc = _class_accuracy(cfg, seed, D)
        if acc is not None:
            accs.append(acc)
    da, un = np.mean(da, axis=0), np.mean(un, axis=0)
    acc = np.mean(accs, axis=0) if accs else None
    summary = report.compare(da, un)
    labels = [report.class_label(c, spec.n_legs) for c in range(D)]
    per_class = []
    for c in range(D):
        outcome = "win" if da[c] > un[c] else "tie" if da[c] == un[c] else "loss"
        per_class.append({"class_id": c, "label": labels[c], "dappo": float(da[c]), "unaware": float(un[c]),
                          "outcome": outcome, "classifier_accuracy": None if acc is None else float(acc[c])})
    out = top_dir(cfg)
    report.write_json(out / "evaluation.json", {**meta(cfg), **summary, "n_classes": D,
                                                "episodes_per_class": cfg.data["evaluate"]["episodes"],
                                                "per_class": per_class})
    report.write_csv(out / "evaluation.csv", ("class_id", "label", "dappo", "unaware", "outcome",
                                              "classifier_accuracy"),
                     ([r["class_id"], r["label"], r["dappo"], r["unaware"], r["outcome"],
                       "" if r["classifier_accuracy"] is None else r["classifier_accuracy"]] for r in per_class),
                     meta(cfg))
    report.per_class_bars(out / "per_class_forward.svg", labels, da, un,
                          f"{cfg.robot}: {summary['improvement_pct']:+.1f}% , win rate {summary['win_rate']:.2f}")
    curves = {}
    for stem in ("dappo", "unaware"):
        rows = [report.read_csv(run_dir(cfg, s) / f"{stem}_metrics.csv") for s in cfg.seeds
                if (run_dir(cfg, s) / f"{stem}_metrics.csv").exists()]
        if rows:
            n = min(len(r) for r in rows)
            vals = np.nanmean([[float(r[i]["mean_forward_reward"]) for i in range(n)] for r in rows], axis=0)
            curves[stem] = (np.arange(n), vals)
    bounds = np.cumsum([n for _, n in cfg.stages])[:-1]
    report.training_curves(out / "training_curves.svg", curves, bounds)
    log.info("improvement %.2f%%, win rate %.3f", summary["improvement_pct"], summary["win_rate"])
    return summary


def cmd_deploy_demo(cfg: ExperimentConfig):
    c = cfg.data["control"]
    spec = cfg.spec
    events = {int(k): int(v) for k, v in c["events"].items()}
    D = dmg.count_classes(spec.n_legs, 2)
    if any(not 0 <= v < D for v in events.values()):
        raise ConfigurationError(f"event classes must lie in [0, {D})")
    for seed in cfg.seeds:
        policy = load_policy(cfg, seed, POLICY["dappo"])
        classifier = control.model_classifier(load_classifier(cfg, seed))
        expert = load_policy(cfg, seed, EXPERT)
        baseline = control.calibrate_baseline(policy, spec, c["baseline_episodes"], seed, c["trigger_signal"])
        rows, agent = control.deploy(policy, classifier, expert, spec, c["episodes"], events,
                                     c["probe_timesteps"], seed, baseline, c["trigger_fraction"],
                                     c["method"], c["probe_seed_offset"], c["trigger_signal"])
        with open(run_dir(cfg, seed) / "deploy_log.jsonl", "w") as fh:
            fh.write(json.dumps({"type": "header", **meta(cfg, seed), "baseline": baseline,
                                 "events": {str(k): v for k, v in sorted(events.items())}}, sort_keys=True) + "\n")
            for r in rows:
                fh.write(json.dumps({"type": "episode", **r}, sort_keys=True) + "\n")
            fh.write(json.dumps({"type": "summary", "diagnoses": agent.diagnosis_count,
                                 "probe_steps": agent.probe_steps, "final_mu": agent.mu}, sort_keys=True) + "\n")
        log.info("seed %d: %d diagnoses over %d episodes", seed, agent.diagnosis_count, c["episodes"])


COMMANDS = {
    "train-expert": cmd_train_expert,
    "collect": cmd_collect,
    "train-diagnose": cmd_train_diagnose,
    "train-dappo": cmd_train_dappo,
    "train-unaware": cmd_train_unaware,
    "evaluate": cmd_evaluate,
    "deploy-demo": cmd_deploy_demo,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dappo", description=__doc__)
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON file overriding the defaults")
    p.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    p.add_argument("--out", help="output directory")
    p.add_argument("--robot", choices=("quad", "hex"))
    p.add_argument("--no-grid", action="store_true", help="train-diagnose: skip the accuracy grid")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config, args.robot, args.seed, args.out)
        if args.command == "train-diagnose":
            cmd_train_diagnose(cfg, grid=not args.no_grid)
        else:
            COMMANDS[args.command](cfg)
    except (ConfigurationError, InvalidInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"error: training diverged: {exc}\n{json.dumps(exc.dump, default=str, sort_keys=True)}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
