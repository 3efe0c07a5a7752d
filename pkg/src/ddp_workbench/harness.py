"""Experiment orchestration: config handling, data loading and artifact writing.

A run directory always contains ``manifest.json``.  It is written as
``incomplete`` before any compute and rewritten as ``complete`` at the end,
so a crashed run leaves a manifest naming the failed stage.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .alignment import AlignConfig, alignment_retrain, load_rationale, write_report_csv
from .data import Corpus, SynthConfig, ingest, split_corpus, synthesize, write_corpus, write_embeddings
from .interpreters import (
    CSA, DEFINITIONS, METHODS, MMA, NATIVE, InterpreterConfig, ZeroGradient, default_sigma,
    interpret, write_jsonl,
)
from .metrics import MetricBudget, cross_evaluate, sample_instances, write_curves_csv
from .models import (
    ARCHITECTURES, ClassifierModel, EmbeddingTable, TrainConfig, accuracy, build_model,
    load_model, save_model, train,
)
from .svgplot import line_plot, write_svg

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = ("method", "metric", "native", "mean_over_budgets", "best_points", "n_points")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    """Failure of one pipeline stage; ``str()`` starts with the stage tag."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _strs(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _opt_float(text: str) -> float | None:
    return None if text.strip().lower() in ("", "none", "auto") else float(text)


def _opt(parse: Callable, default, help: str = ""):
    if isinstance(default, list):
        return field(default_factory=lambda d=default: list(d), metadata={"parse": parse, "help": help})
    return field(default=default, metadata={"parse": parse, "help": help})


@dataclass
class ExperimentConfig:
    """Every knob of a run.  Empty ``methods``/``metrics`` mean all that apply."""

    # model and training
    arch: str = _opt(str, "bag", "bag or attention")
    hidden: int = _opt(int, 16, "hidden width")
    pooling: str = _opt(str, "mean", "bag pooling: mean or sum")
    window: int = _opt(int, 1, "attention encoder neighbour window")
    lr: float = _opt(float, 0.5, "SGD learning rate")
    epochs: int = _opt(int, 5, "training epochs")
    batch: int = _opt(int, 8, "minibatch size")
    model_seed: int = _opt(int, 0, "parameter initialisation seed")
    train_seed: int = _opt(int, 0, "minibatch shuffling seed")
    model_path: str = _opt(str, "", "load this checkpoint instead of training")
    # data
    corpus: str = _opt(str, "", "JSON-lines corpus; empty means synthetic")
    embeddings: str = _opt(str, "", "embedding file for --corpus")
    synth_seed: int = _opt(int, 0, "synthetic corpus seed")
    synth_instances: int = _opt(int, 600, "synthetic corpus size")
    vocab_size: int = _opt(int, 59, "synthetic vocabulary size, unk excluded")
    dim: int = _opt(int, 8, "synthetic embedding dimension")
    split_seed: int = _opt(int, 0, "train/valid/test split seed")
    # interpretation and evaluation
    methods: list = _opt(_strs, [], "comma-separated methods")
    metrics: list = _opt(_strs, [], "comma-separated metrics (CSA, ERA, MMA)")
    csa_grid: list = _opt(_floats, [round(0.1 * k, 1) for k in range(1, 11)], "CSA radii")
    era_grid: list = _opt(_ints, [1, 2, 3, 4, 5], "ERA word counts")
    mma_grid: list = _opt(_ints, [1, 2, 3, 4, 5], "MMA mask sizes")
    sample_size: int = _opt(int, 300, "evaluation instances drawn from the test split")
    sample_seed: int = _opt(int, 0, "evaluation sample seed")
    interp_seed: int = _opt(int, 0, "base seed for stochastic interpreters")
    smoothgrad_samples: int = _opt(int, 20, "SmoothGrad noise samples")
    smoothgrad_sigma: float | None = _opt(_opt_float, None, "SmoothGrad noise scale; auto = 0.1 x mean word norm")
    itergrad_steps: int = _opt(int, 25, "IterGrad iterations")
    integrad_points: int = _opt(int, 20, "IntegGrad path points")
    interpret_eps: float = _opt(float, 0.5, "radius for CSA methods under ERA and MMA")
    # alignment
    rationale: str = _opt(str, "", "rationale JSON file")
    rationale_k: int = _opt(int, 8, "nearest neighbours added per rationale seed word")
    rounds: int = _opt(int, 5, "alignment rounds")
    align_eps: float = _opt(float, 0.5, "alignment adversary radius")
    align_lr: float = _opt(float, 0.3, "retraining learning rate")
    align_epochs: int = _opt(int, 5, "retraining epochs per round")
    align_base_lr: float = _opt(float, 0.1, "learning rate of the model to be aligned")
    align_base_epochs: int = _opt(int, 5, "epochs of the model to be aligned")
    n_annotated: int = _opt(int, 0, "annotated training instances; 0 means all")
    # output
    out: str = _opt(str, "runs/experiment", "output directory")

    def resolved_methods(self) -> list[str]:
        if self.methods:
            return list(self.methods)
        return [m for m in METHODS if self.arch == "attention" or NATIVE[m] != MMA]

    def resolved_metrics(self) -> list[str]:
        if self.metrics:
            return list(self.metrics)
        return [d for d in DEFINITIONS if self.arch == "attention" or d != MMA]

    def budgets(self) -> list[MetricBudget]:
        grids = {CSA: self.csa_grid, "ERA": self.era_grid, MMA: self.mma_grid}
        return [MetricBudget(m, grids[m]) for m in self.resolved_metrics()]

    def validate(self) -> "ExperimentConfig":
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"unknown arch {self.arch!r}; choose from {sorted(ARCHITECTURES)}")
        for m in self.resolved_methods():
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}")
        for d in self.resolved_metrics():
            if d not in DEFINITIONS:
                raise ConfigError(f"unknown metric {d!r}")
        if self.arch != "attention":
            if MMA in self.resolved_metrics():
                raise ConfigError(f"metric MMA needs arch=attention, got arch={self.arch}")
            if "rankmask" in self.resolved_methods():
                raise ConfigError(f"method rankmask needs arch=attention, got arch={self.arch}")
        if self.sample_size < 1:
            raise ConfigError("sample_size must be >= 1")
        if bool(self.corpus) != bool(self.embeddings):
            raise ConfigError("corpus and embeddings must be given together")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        try:
            self.budgets()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def interpreter_config(self, sigma: float) -> InterpreterConfig:
        return InterpreterConfig(smoothgrad_samples=self.smoothgrad_samples, smoothgrad_sigma=sigma,
                                 itergrad_steps=self.itergrad_steps,
                                 integrad_points=self.integrad_points, seed=self.interp_seed)

    def seeds(self) -> dict[str, int]:
        return {k: getattr(self, k) for k in
                ("model_seed", "train_seed", "synth_seed", "split_seed", "sample_seed", "interp_seed")}

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def parse_value(key: str, text: str):
    if key not in CONFIG_FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return CONFIG_FIELDS[key].metadata["parse"](text)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, text = (s.strip() for s in line.split("=", 1))
        values[key] = parse_value(key, text)
    return values


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    values = read_config_file(path) if path else {}
    values.update(overrides or {})
    return ExperimentConfig(**values).validate()


def write_config_file(path, config: ExperimentConfig) -> None:
    with open(path, "w") as fh:
        for key, value in config.to_dict().items():
            if isinstance(value, list):
                value = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
            elif value is None:
                value = "auto"
            fh.write(f"{key} = {value}\n")


# -- pipeline pieces ------------------------------------------------------------

@dataclass
class Dataset:
    table: EmbeddingTable
    splits: dict[str, Corpus]
    num_classes: int
    source: str


def load_data(config: ExperimentConfig) -> Dataset:
    if config.corpus:
        corpus, table = ingest(config.corpus, config.embeddings)
        source = str(config.corpus)
    else:
        task = synthesize(SynthConfig(vocab_size=config.vocab_size, dim=config.dim,
                                      n_instances=config.synth_instances, seed=config.synth_seed))
        corpus, table, source = task.corpus, task.table, "synthetic"
    if len(corpus) < 3:
        raise ValueError(f"corpus has {len(corpus)} usable instances; need at least 3")
    return Dataset(table, split_corpus(corpus, seed=config.split_seed), corpus.num_classes, source)


def model_kwargs(config: ExperimentConfig) -> dict:
    if config.arch == "attention":
        return {"hidden": config.hidden, "window": config.window}
    return {"hidden": config.hidden, "pooling": config.pooling}


def fit_model(config: ExperimentConfig, data: Dataset, lr: float | None = None,
              epochs: int | None = None) -> ClassifierModel:
    if config.model_path:
        model = load_model(config.model_path)
        if model.arch != config.arch:
            raise ValueError(f"checkpoint arch {model.arch!r} differs from arch={config.arch}")
        return model
    model = build_model(config.arch, data.table.dim, data.num_classes, seed=config.model_seed,
                        **model_kwargs(config))
    texts = data.splits["train"].embedded(data.table)
    tc = TrainConfig(lr=config.lr if lr is None else lr, epochs=config.epochs if epochs is None else epochs,
                     seed=config.train_seed, batch=config.batch)
    return train(model, texts, data.splits["train"].labels, tc).model


class Run:
    """Tracks stages and files of one output directory through its manifest."""

    def __init__(self, config: ExperimentConfig, kind: str):
        self.dir = Path(config.out)
        self.manifest = {
            "kind": kind, "status": "incomplete", "failed_stage": None, "error": None,
            "seeds": config.seeds(), "config": config.to_dict(),
            "versions": {"ddp_workbench": __version__, "numpy": np.__version__,
                         "python": platform.python_version()},
            "files": [], "results": {},
        }
        self.stage = "setup"

    def start(self, stage: str) -> None:
        self.stage = stage
        log.info("stage %s", stage)

    def path(self, name: str) -> Path:
        if name not in self.manifest["files"]:
            self.manifest["files"].append(name)
        return self.dir / name

    def save(self) -> None:
        with open(self.dir / "manifest.json", "w") as fh:
            json.dump(self.manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def __enter__(self):
        self.dir.mkdir(parents=True, exist_ok=True)
        self.save()
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is None:
            self.manifest["status"] = "complete"
            self.save()
            return False
        self.manifest["failed_stage"] = self.stage
        self.manifest["error"] = f"{exc_type.__name__}: {exc}"
        self.save()
        if isinstance(exc, StageError):
            return False
        raise StageError(self.stage, str(exc)) from exc


def _validated(config: ExperimentConfig) -> ExperimentConfig:
    try:
        return config.validate()
    except ConfigError as exc:
        raise StageError("config", str(exc)) from None


def _sigma(config: ExperimentConfig, data: Dataset) -> float:
    if config.smoothgrad_sigma is not None:
        return config.smoothgrad_sigma
    return default_sigma(data.splits["train"].embedded(data.table))


def _eval_sample(config: ExperimentConfig, data: Dataset):
    pool = data.splits["test"]
    idx = sample_instances(len(pool), config.sample_size, config.sample_seed)
    if len(idx) < config.sample_size:
        log.warning("test split holds %d instances; sample_size %d capped", len(pool), config.sample_size)
    return idx, pool.subset(idx).embedded(data.table)


def summarize(curves) -> list[tuple]:
    """Per (method, metric): mean drop over the grid and points where it is best."""
    rows = []
    for metric in dict.fromkeys(c.metric for c in curves):
        group = [c for c in curves if c.metric == metric]
        n = len(group[0].means)
        best = [max(c.means[i] for c in group) for i in range(n)]
        for c in group:
            finite = [m for m in c.means if np.isfinite(m)]
            mean = float(np.mean(finite)) if finite else float("nan")
            wins = sum(1 for i in range(n) if c.means[i] >= best[i])
            rows.append((c.method, metric, NATIVE[c.method] == metric, mean, wins, n))
    return rows


def write_summary_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for method, metric, native, mean, wins, n in rows:
            w.writerow([method, metric, int(native), repr(mean), wins, n])


def curve_svg(curves, arch: str, metric: str) -> str:
    series = {c.method: (c.budgets, c.means) for c in curves if c.metric == metric}
    xlabel = "epsilon" if metric == CSA else "s"
    return line_plot(series, title=f"{metric} metric, {arch} model", xlabel=xlabel, ylabel="mean drop")


# -- entry points ---------------------------------------------------------------

def run_train(config: ExperimentConfig) -> Path:
    config = _validated(config)
    with Run(config, "train") as run:
        run.start("data")
        data = load_data(config)
        run.start("train")
        model = fit_model(config, data)
        run.start("write")
        save_model(model, run.path("model.json"))
        test = data.splits["test"]
        run.manifest["results"] = {
            "train_accuracy": accuracy(model, data.splits["train"].embedded(data.table), data.splits["train"].labels),
            "test_accuracy": accuracy(model, test.embedded(data.table), test.labels),
        }
    return run.dir


def run_interpret(config: ExperimentConfig) -> Path:
    """Attributions of every requested method on the evaluation sample, as JSON lines."""
    config = _validated(config)
    with Run(config, "interpret") as run:
        run.start("data")
        data = load_data(config)
        run.start("train")
        model = fit_model(config, data)
        run.start("interpret")
        idx, texts = _eval_sample(config, data)
        icfg = config.interpreter_config(_sigma(config, data))
        skipped = 0
        for method in config.resolved_methods():
            attrs = []
            for i, x in enumerate(texts):
                c = int(np.argmax(model.predict(x)))
                try:
                    attrs.append(interpret(method, model, x, c, config.interpret_eps, icfg,
                                           seed=config.interp_seed + i))
                except ZeroGradient:
                    skipped += 1
            write_jsonl(run.path(f"attributions_{method}.jsonl"), attrs)
        run.manifest["results"] = {"n_instances": len(idx), "n_skipped": skipped}
    return run.dir


def run_experiment(config: ExperimentConfig, cross: bool = True) -> Path:
    """Train or load a model and sweep methods against metric budgets.

    With ``cross=False`` each method is only scored under the metric of its
    own definition.
    """
    config = _validated(config)
    with Run(config, "cross-eval" if cross else "evaluate") as run:
        run.start("data")
        data = load_data(config)
        run.start("train")
        model = fit_model(config, data)
        run.start("evaluate")
        idx, texts = _eval_sample(config, data)
        sigma = _sigma(config, data)
        icfg = config.interpreter_config(sigma)
        methods = config.resolved_methods()
        curves = []
        if cross:
            curves = cross_evaluate(model, texts, methods, config.budgets(), icfg, config.interpret_eps)
        else:
            for budget in config.budgets():
                native = [m for m in methods if NATIVE[m] == budget.variant]
                if native:
                    curves += cross_evaluate(model, texts, native, [budget], icfg, config.interpret_eps)
        run.start("write")
        write_curves_csv(run.path("curves.csv"), curves)
        write_summary_csv(run.path("summary.csv"), summarize(curves))
        for metric in dict.fromkeys(c.metric for c in curves):
            write_svg(run.path(f"{config.arch}_{metric}.svg"), curve_svg(curves, config.arch, metric))
        write_config_file(run.path("config.txt"), config)
        test = data.splits["test"]
        run.manifest["results"] = {
            "data_source": data.source, "n_instances": len(idx), "sample_indices": idx,
            "smoothgrad_sigma": sigma,
            "test_accuracy": accuracy(model, test.embedded(data.table), test.labels),
        }
    return run.dir


def run_alignment(config: ExperimentConfig) -> Path:
    """Retrain a lightly trained model towards the rationale; report per round."""
    config = _validated(config)
    if not config.rationale:
        raise StageError("config", "alignment needs a rationale file (rationale = path)")
    if config.arch == "bag":
        log.warning("bag models give every word the same input gradient; similarity cannot move")
    with Run(config, "align") as run:
        run.start("data")
        data = load_data(config)
        rationale = load_rationale(config.rationale, data.table, config.rationale_k)
        run.start("train")
        model = fit_model(config, data, lr=config.align_base_lr, epochs=config.align_base_epochs)
        run.start("align")
        train_split = data.splits["train"]
        texts = train_split.embedded(data.table)
        if config.n_annotated:
            texts = texts[:config.n_annotated]
        test = data.splits["test"]
        acfg = AlignConfig(rounds=config.rounds, eps=config.align_eps, lr=config.align_lr,
                           epochs=config.align_epochs, batch=config.batch, seed=config.train_seed,
                           itergrad_steps=config.itergrad_steps)
        aligned, report = alignment_retrain(model, texts, rationale, test.embedded(data.table),
                                            test.labels, acfg)
        run.start("write")
        write_report_csv(run.path("alignment.csv"), report)
        write_svg(run.path("similarity.svg"),
                  line_plot({"similarity": (report.rounds, report.similarity_mean)},
                            title="rationale similarity by round", xlabel="round", ylabel="mean similarity"))
        save_model(aligned, run.path("model_aligned.json"))
        write_config_file(run.path("config.txt"), config)
        run.manifest["results"] = {
            "n_annotated": len(texts), "n_excluded": report.n_excluded, "round_loss": report.round_loss,
        }
    return run.dir


def write_rationale(path, tokens) -> None:
    with open(path, "w") as fh:
        json.dump({t: True for t in tokens}, fh, indent=1)
        fh.write("\n")


def run_synth(config: ExperimentConfig) -> Path:
    """Write the synthetic corpus, its embeddings and the planted rationale."""
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    task = synthesize(SynthConfig(vocab_size=config.vocab_size, dim=config.dim,
                                  n_instances=config.synth_instances, seed=config.synth_seed))
    write_corpus(out / "corpus.jsonl", task.corpus, task.table)
    write_embeddings(out / "embeddings.txt", task.table)
    write_rationale(out / "rationale.json", task.positive[:3] + task.negative[:3])
    return out
