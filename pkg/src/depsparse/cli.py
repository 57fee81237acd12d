"""Command-line orchestration: gen, train, eval, check, sweep.

Every experiment is driven by one strict JSON config (unknown fields are
rejected at every level); file outputs embed the resolved config and the
tool version, and are written atomically (temp file + rename). Exit codes:
0 ok, 2 config/validation failure, 3 generation failure, 4 numeric
divergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import __version__, metrics, setalg, synth, trainer
from .ioutil import atomic_write_text
from .errors import (
    ConfigError,
    DegenerateMapError,
    DepsparseError,
    EvaluationError,
    FormatError,
    GenerationError,
    NumericError,
    TrainingError,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_GENERATION = 3
EXIT_NUMERIC = 4

SWEEP_PARAMS = ("alpha", "d_z", "noise_std", "pattern")
SWEEP_COLUMNS = (
    "param",
    "value",
    "seed",
    "status",
    "mcc_spearman",
    "mcc_pearson",
    "shd",
    "r2_int",
    "r2_symdiff",
    "r2_compA",
    "r2_compB",
    "r2_ref",
    "final_recon",
    "final_penalty",
)


def _take(d: dict, section: str, allowed: dict) -> dict:
    """Pop known keys with defaults; reject anything unknown."""
    raw = d.get(section, {})
    if not isinstance(raw, dict):
        raise ConfigError(f"section {section!r} must be an object")
    unknown = set(raw) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown field(s) in {section!r}: {sorted(unknown)}")
    out = dict(allowed)
    out.update(raw)
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated, fully resolved experiment description."""

    support: dict
    ground_truth: dict
    dataset: dict
    estimator: dict
    evaluation: dict
    seeds: tuple[int, ...]
    out_dir: str

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config root must be a JSON object")
        known_sections = {
            "support",
            "ground_truth",
            "dataset",
            "estimator",
            "evaluation",
            "seeds",
            "out_dir",
        }
        unknown = set(d) - known_sections
        if unknown:
            raise ConfigError(f"unknown top-level field(s): {sorted(unknown)}")

        support = _take(
            d,
            "support",
            {"pattern": "diverse", "d_x": 3, "d_z": 3, "path": None, "density": 0.4},
        )
        ground_truth = _take(
            d,
            "ground_truth",
            {"depth": 2, "width": 16, "prior": "standard-normal", "cov": None},
        )
        dataset = _take(
            d,
            "dataset",
            {"n": 10000, "noise_std": 0.0, "noise_mode": "absolute"},
        )
        estimator = _take(
            d,
            "estimator",
            {
                "mode": "vae",
                "depth": 2,
                "width": 64,
                "alpha": 0.05,
                "beta": 0.05,
                "epochs": 200,
                "batch_size": 256,
                "learning_rate": 1e-3,
                "tau": 0.05,
            },
        )
        evaluation = _take(d, "evaluation", {"splits": None})
        seeds = d.get("seeds", [1, 2, 3])
        if (
            not isinstance(seeds, (list, tuple))
            or not seeds
            or not all(isinstance(s, int) for s in seeds)
        ):
            raise ConfigError("seeds must be a nonempty list of integers")
        out_dir = d.get("out_dir", "out")

        cfg = cls(
            support=support,
            ground_truth=ground_truth,
            dataset=dataset,
            estimator=estimator,
            evaluation=evaluation,
            seeds=tuple(seeds),
            out_dir=str(out_dir),
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        s = self.support
        if s["pattern"] not in ("diverse", "dense", "custom"):
            raise ConfigError(f"unknown support pattern {s['pattern']!r}")
        if s["pattern"] == "custom" and not s["path"]:
            raise ConfigError("custom support pattern needs support.path")
        if not (isinstance(s["d_x"], int) and isinstance(s["d_z"], int)):
            raise ConfigError("support d_x and d_z must be integers")
        if not s["d_x"] >= s["d_z"] >= 1:
            raise ConfigError(f"need d_x >= d_z >= 1, got {s['d_x']}, {s['d_z']}")
        if self.dataset["n"] < 0:
            raise ConfigError("dataset.n must be nonnegative")
        if self.dataset["noise_mode"] not in ("absolute", "relative"):
            raise ConfigError("dataset.noise_mode must be 'absolute' or 'relative'")
        if self.dataset["noise_std"] < 0:
            raise ConfigError("dataset.noise_std must be nonnegative")
        # estimator fields are validated by EstimatorConfig; build it early
        self.estimator_config(seed=0)
        splits = self.evaluation["splits"]
        if splits is not None:
            for pair in splits:
                if (
                    not isinstance(pair, (list, tuple))
                    or len(pair) != 2
                    or not all(isinstance(g, (list, tuple)) and g for g in pair)
                ):
                    raise ConfigError("each split must be [K, V] with nonempty lists")
                for g in pair:
                    for i in g:
                        if not isinstance(i, int) or not 1 <= i <= s["d_x"]:
                            raise ConfigError(
                                f"split index {i} outside [1, {s['d_x']}]"
                            )

    def estimator_config(self, seed: int) -> trainer.EstimatorConfig:
        e = self.estimator
        return trainer.EstimatorConfig(
            mode=e["mode"],
            d_z=self.support["d_z"],
            depth=e["depth"],
            width=e["width"],
            alpha=e["alpha"],
            beta=e["beta"],
            epochs=e["epochs"],
            batch_size=e["batch_size"],
            learning_rate=e["learning_rate"],
            seed=seed,
            tau=e["tau"],
        )

    def splits(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        raw = self.evaluation["splits"]
        if raw is None:
            d_x = self.support["d_x"]
            rest = tuple(range(2, d_x + 1))
            return [((1,), rest)] if rest else [((1,), (1,))]
        return [(tuple(k), tuple(v)) for k, v in raw]

    def to_dict(self) -> dict:
        return {
            "support": dict(self.support),
            "ground_truth": dict(self.ground_truth),
            "dataset": dict(self.dataset),
            "estimator": dict(self.estimator),
            "evaluation": dict(self.evaluation),
            "seeds": list(self.seeds),
            "out_dir": self.out_dir,
        }


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(raw)


def _meta(config: ExperimentConfig, seed: int) -> dict:
    return {"version": __version__, "seed": seed, "config": config.to_dict()}


def _write_json(path: Path, payload: dict) -> None:
    atomic_write_text(path, json.dumps(payload, sort_keys=True, indent=1) + "\n")


def _prior(config: ExperimentConfig, d_z: int) -> synth.LatentPrior:
    g = config.ground_truth
    cov = np.asarray(g["cov"]) if g["cov"] is not None else None
    return synth.LatentPrior(d_z, g["prior"], cov)


def run_generation(config: ExperimentConfig, seed: int):
    """Support + mixing + dataset for one seed (pure, no file output)."""
    s = config.support
    support = synth.make_support(
        s["d_x"],
        s["d_z"],
        s["pattern"],
        seed=seed,
        density=s["density"],
        custom_path=s["path"],
    )
    arch = synth.MixingArch(config.ground_truth["depth"], config.ground_truth["width"])
    model = synth.make_ground_truth(
        support, arch, seed=seed, prior=_prior(config, support.d_z)
    )
    noise = config.dataset["noise_std"]
    if config.dataset["noise_mode"] == "relative" and noise > 0:
        clean = synth.sample_dataset(model, config.dataset["n"], 0.0, seed=seed)
        noise = noise * clean.x.std(axis=0)
    dataset = synth.sample_dataset(model, config.dataset["n"], noise, seed=seed)
    return support, model, dataset


def cmd_gen(config: ExperimentConfig, out_dir: Union[str, Path], seed: int, quiet: bool = False) -> int:
    out = Path(out_dir)
    support, model, dataset = run_generation(config, seed)
    atomic_write_text(out / "support.txt", support.to_text())
    payload = model.to_dict()
    payload["meta"] = _meta(config, seed)
    _write_json(out / "model.json", payload)
    dataset.to_csv(out / "dataset.csv", meta=_meta(config, seed))
    verdicts = setalg.check_sufficient_diversity(support)
    if not quiet:
        print(f"wrote {out / 'support.txt'}, {out / 'model.json'}, {out / 'dataset.csv'}")
        print(f"support {support.d_x}x{support.d_z}, pattern={config.support['pattern']}")
        for v in verdicts:
            clause = v.clause if v.clause is not None else "none"
            print(f"  latent {v.latent}: satisfied={v.satisfied} clause={clause}")
        predicted = all(v.satisfied for v in verdicts)
        print(f"element identifiability predicted: {predicted}")
    return EXIT_OK


def cmd_train(
    config: ExperimentConfig,
    dataset_path: Union[str, Path],
    out_dir: Union[str, Path],
    seed: int,
    quiet: bool = False,
) -> int:
    out = Path(out_dir)
    dataset = synth.Dataset.from_csv(dataset_path)
    if dataset.d_x != config.support["d_x"] or dataset.d_z != config.support["d_z"]:
        raise ConfigError(
            f"dataset is {dataset.d_z} latents x {dataset.d_x} observed, config says "
            f"{config.support['d_z']} x {config.support['d_x']}"
        )
    est = trainer.train(dataset, config.estimator_config(seed))
    payload = est.to_dict()
    payload["meta"] = _meta(config, seed)
    _write_json(out / "estimator.json", payload)
    trainer.write_train_log(est.history, out / "train_log.csv", meta=_meta(config, seed))
    if not quiet:
        h = est.history[-1]
        print(f"wrote {out / 'estimator.json'}, {out / 'train_log.csv'}")
        print(
            f"final loss: total={h.total:.6f} recon={h.recon:.6f} "
            f"kl={h.kl:.6f} penalty={h.penalty:.6f}"
        )
        print(f"reconstruction ratio {est.recon_ratio:.4f} flagged={est.flagged}")
        print("empirical support:")
        for row in est.empirical_support.to_text().splitlines()[1:]:
            print(f"  {row}")
    return EXIT_OK


def cmd_eval(
    estimator_path: Union[str, Path],
    dataset_path: Union[str, Path],
    model_path: Union[str, Path],
    splits: Sequence[tuple[Sequence[int], Sequence[int]]],
    out_dir: Union[str, Path],
    quiet: bool = False,
    config: Optional[ExperimentConfig] = None,
) -> int:
    out = Path(out_dir)
    est = trainer.estimator_from_json(estimator_path)
    dataset = synth.Dataset.from_csv(dataset_path)
    model = synth.model_from_json(model_path)
    if dataset.d_x != model.d_x or dataset.d_z != model.d_z:
        raise ConfigError("dataset dimensions do not match the model")
    if est.d_x != model.d_x:
        raise ConfigError("estimator dimensions do not match the model")
    report = metrics.evaluate(est, dataset, model, splits)
    payload = report.to_dict()
    payload["meta"] = {
        "version": __version__,
        "config": config.to_dict() if config else None,
    }
    _write_json(out / "report.json", payload)
    if not quiet:
        print(f"wrote {out / 'report.json'}")
        print(
            f"MCC {report.mcc_spearman.score:.3f} (spearman) "
            f"{report.mcc_pearson.score:.3f} (pearson)   SHD {report.structure.shd}"
        )
        print(f"{'split':24s} {'Int':>7s} {'SymDiff':>7s} {'CompA':>7s} {'CompB':>7s} {'Ref':>7s}")
        for suite in report.r2_suites:
            cells = [
                "   --- " if suite.scores[n] is None else f"{suite.scores[n]:7.3f}"
                for n in ("Int", "SymDiff", "CompA", "CompB", "Ref")
            ]
            label = f"K={list(suite.observed_k)} V={list(suite.observed_v)}"
            print(f"{label:24s} {' '.join(cells)}")
    return EXIT_OK


def cmd_check(
    support_path: Union[str, Path],
    out_dir: Union[str, Path],
    model_path: Optional[Union[str, Path]] = None,
    dataset_path: Optional[Union[str, Path]] = None,
    max_union: int = 2,
    quiet: bool = False,
) -> int:
    out = Path(out_dir)
    support = setalg.SupportMatrix.from_text(Path(support_path).read_text())
    verdicts = setalg.check_sufficient_diversity(support)
    family = [support.row_set(i) for i in range(1, support.d_x + 1)]
    regions = setalg.atomic_regions(family, support.d_z)
    certs = [
        setalg.certify_region(r, family, support, max_union=max_union) for r in regions
    ]
    payload = {
        "meta": {"version": __version__, "support": support.to_text().splitlines()},
        "diversity": setalg.verdicts_to_dicts(verdicts),
        "element_identifiability_predicted": all(v.satisfied for v in verdicts),
        "atomic_regions": [c.to_dict() for c in certs],
    }
    if model_path and dataset_path:
        model = synth.model_from_json(model_path)
        dataset = synth.Dataset.from_csv(dataset_path)
        nonlin = metrics.check_sufficient_nonlinearity(
            model, support, dataset.z[:1000]
        )
        payload["nonlinearity"] = [
            {"row": v.row, "achieved": v.achieved, "required": v.required, "passed": v.passed}
            for v in nonlin
        ]
    _write_json(out / "check.json", payload)
    if not quiet:
        print(f"wrote {out / 'check.json'}")
        certified = sum(isinstance(c, setalg.Certificate) for c in certs)
        print(
            f"{len(regions)} atomic regions, {certified} certified "
            f"(search bound: unions of size <= {max_union})"
        )
        for v in verdicts:
            clause = v.clause if v.clause is not None else "none"
            print(f"  latent {v.latent}: clause={clause}")
    return EXIT_OK


def _sweep_value_config(config: ExperimentConfig, param: str, value) -> ExperimentConfig:
    d = config.to_dict()
    if param == "alpha":
        d["estimator"]["alpha"] = float(value)
    elif param == "d_z":
        d["support"]["d_z"] = int(value)
        d["support"]["d_x"] = int(value)
    elif param == "noise_std":
        d["dataset"]["noise_std"] = float(value)
    elif param == "pattern":
        d["support"]["pattern"] = str(value)
    else:
        raise ConfigError(f"sweep parameter must be one of {SWEEP_PARAMS}, got {param!r}")
    return ExperimentConfig.from_dict(d)


def run_pipeline(config: ExperimentConfig, seed: int) -> dict:
    """gen -> train -> eval in memory; returns one sweep row of metrics."""
    support, model, dataset = run_generation(config, seed)
    est = trainer.train(dataset, config.estimator_config(seed))
    report = metrics.evaluate(est, dataset, model, config.splits())
    suite = report.r2_suites[0]

    def cell(name):
        v = suite.scores[name]
        return "" if v is None else f"{v:.6f}"

    h = est.history[-1]
    return {
        "status": "ok",
        "mcc_spearman": f"{report.mcc_spearman.score:.6f}",
        "mcc_pearson": f"{report.mcc_pearson.score:.6f}",
        "shd": str(report.structure.shd),
        "r2_int": cell("Int"),
        "r2_symdiff": cell("SymDiff"),
        "r2_compA": cell("CompA"),
        "r2_compB": cell("CompB"),
        "r2_ref": cell("Ref"),
        "final_recon": f"{h.recon:.6f}",
        "final_penalty": f"{h.penalty:.6f}",
    }


def _sweep_one(args) -> dict:
    config_dict, param, value, seed = args
    row = {c: "" for c in SWEEP_COLUMNS}
    row.update({"param": param, "value": str(value), "seed": str(seed)})
    try:
        cfg = _sweep_value_config(ExperimentConfig.from_dict(config_dict), param, value)
        row.update(run_pipeline(cfg, seed))
    except DepsparseError as exc:
        row["status"] = f"error:{type(exc).__name__}"
    return row


def cmd_sweep(
    config: ExperimentConfig,
    param: str,
    values: Sequence,
    out_dir: Union[str, Path],
    workers: int = 1,
    quiet: bool = False,
) -> int:
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"sweep parameter must be one of {SWEEP_PARAMS}, got {param!r}")
    out = Path(out_dir)
    jobs = [
        (config.to_dict(), param, value, seed)
        for value in values
        for seed in config.seeds
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(j) for j in jobs]

    buf = io.StringIO()
    buf.write("# " + json.dumps({"version": __version__, "config": config.to_dict()}, sort_keys=True) + "\n")
    writer = csv.DictWriter(buf, fieldnames=list(SWEEP_COLUMNS))
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    atomic_write_text(out / "sweep.csv", buf.getvalue())

    ok_rows = [r for r in rows if r["status"] == "ok"]
    if not quiet:
        print(f"wrote {out / 'sweep.csv'} ({len(ok_rows)}/{len(rows)} runs ok)")
        for value in values:
            scores = [
                float(r["mcc_spearman"])
                for r in ok_rows
                if r["value"] == str(value)
            ]
            if scores:
                print(
                    f"  {param}={value}: mcc {np.mean(scores):.4f} +/- {np.std(scores):.4f} "
                    f"({len(scores)} seeds)"
                )
            else:
                print(f"  {param}={value}: no successful runs")
    return EXIT_OK if ok_rows else EXIT_GENERATION


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="depsparse",
        description="dependency-sparsity lab: generate, train, evaluate, check, sweep",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--out", default=None, help="output directory (default: config out_dir)")
        p.add_argument("--seed", type=int, default=None, help="override the first config seed")
        p.add_argument("--quiet", action="store_true")

    p_gen = sub.add_parser("gen", help="generate support, mixing model, and dataset")
    common(p_gen)

    p_train = sub.add_parser("train", help="train an estimator on a dataset")
    common(p_train)
    p_train.add_argument("--dataset", required=True)

    p_eval = sub.add_parser("eval", help="evaluate an estimator against ground truth")
    common(p_eval)
    p_eval.add_argument("--estimator", required=True)
    p_eval.add_argument("--dataset", required=True)
    p_eval.add_argument("--model", required=True)

    p_check = sub.add_parser("check", help="structural checks and certificates")
    p_check.add_argument("--support", required=True)
    p_check.add_argument("--model", default=None)
    p_check.add_argument("--dataset", default=None)
    p_check.add_argument("--out", default="out")
    p_check.add_argument("--max-union", type=int, default=2)
    p_check.add_argument("--quiet", action="store_true")

    p_sweep = sub.add_parser("sweep", help="run the pipeline over a parameter grid")
    common(p_sweep)
    p_sweep.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    p_sweep.add_argument("--workers", type=int, default=1)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.verb == "check":
            return cmd_check(
                args.support,
                args.out,
                model_path=args.model,
                dataset_path=args.dataset,
                max_union=args.max_union,
                quiet=args.quiet,
            )
        config = load_config(args.config)
        out_dir = args.out if args.out else config.out_dir
        seed = args.seed if args.seed is not None else config.seeds[0]
        if args.verb == "gen":
            return cmd_gen(config, out_dir, seed, quiet=args.quiet)
        if args.verb == "train":
            return cmd_train(config, args.dataset, out_dir, seed, quiet=args.quiet)
        if args.verb == "eval":
            return cmd_eval(
                args.estimator,
                args.dataset,
                args.model,
                config.splits(),
                out_dir,
                quiet=args.quiet,
                config=config,
            )
        if args.verb == "sweep":
            if args.param == "pattern":
                values = [v.strip() for v in args.values.split(",")]
            elif args.param == "d_z":
                values = [int(v) for v in args.values.split(",")]
            else:
                values = [float(v) for v in args.values.split(",")]
            return cmd_sweep(
                config, args.param, values, out_dir, workers=args.workers, quiet=args.quiet
            )
        raise ConfigError(f"unknown verb {args.verb}")
    except (ConfigError, FormatError, EvaluationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GenerationError, DegenerateMapError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GENERATION
    except (TrainingError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def console_entry() -> None:
    sys.exit(main())
