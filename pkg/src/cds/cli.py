"""Command-line entry point: generation, evaluation, dataset, and classifier runs.

Configs are YAML documents versioned with a ``format: cds-config/1`` header;
paths inside a config resolve relative to the config file. Exit codes: 0 on
success, 1 on runtime generation/eval failure, 2 on configuration or input
errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import yaml

from .classifier import (
    ClassifierMode,
    ConstantClassifier,
    CriticalTokenClassifier,
    DecisionLabel,
    ExtractorSpec,
    FeatureClassifier,
    GeneratorSpec,
    HeuristicClassifier,
    HeuristicRules,
    RemoteClassifier,
    TrainConfig,
    evaluate_classifier,
    load_instances,
    save_instances,
    train_feature_classifier,
    generate_dataset,
)
from .core import PrefixTriple
from .decoding import (
    GAMMA_BY_FAMILY,
    GenerationError,
    GenerationResult,
    Strategy,
    StrategyConfig,
    cost_report,
    export_trace,
    response_text,
    run_strategy,
)
from .evaluation import (
    ExperimentConfig,
    QARecord,
    load_qa_records,
    run_experiment,
    write_summary_csv,
)
from .models import (
    FewShotSpec,
    LanguageModel,
    RemoteConfig,
    RemoteModel,
    WhitespaceTokenizer,
    load_model,
    render_fewshot_prefix,
)

CONFIG_FORMAT = "cds-config/1"

# Shipped system prompt presets; "basic" suits QA runs, "safe" biography runs.
PRESET_SYSTEM_PROMPTS = {
    "basic": (
        "You are a helpful, respectful and honest assistant. "
        "Always answer as helpfully as possible."
    ),
    "safe": (
        "You are a helpful, respectful and honest assistant. Always answer as "
        "helpfully as possible, while being safe.  Your answers should not include "
        "any harmful, unethical, racist, sexist, toxic, dangerous, or illegal "
        "content. Please ensure that your responses are socially unbiased and "
        "positive in nature."
    ),
}

_REQUIRED_ROLES = {
    Strategy.ALIGNED_SAMPLING: {"aligned"},
    Strategy.ALIGNED_GREEDY: {"aligned"},
    Strategy.PRETRAINED_SAMPLING: {"pretrained"},
    Strategy.PRETRAINED_GREEDY: {"pretrained"},
    Strategy.MODEL_CDS: {"aligned", "pretrained", "classifier"},
    Strategy.ENTROPY_CDS: {"aligned", "pretrained"},
    Strategy.SELF_CDS: {"aligned"},
    Strategy.SOFT_MIXING_CDS: {"aligned", "pretrained", "classifier"},
}


class ConfigError(Exception):
    """Configuration or input problem; maps to exit code 2."""


@dataclass
class RunConfig:
    base_dir: Path
    strategy: Strategy
    temperature: float = 1.0
    gamma: float | None = None
    lambda_mix: float = 0.5
    max_tokens: int = 64
    seed: int = 0
    shots: int = 5
    system_prompt: str = ""
    aligned_template: str = "Question: {question} Answer:"
    fewshot: FewShotSpec = FewShotSpec()
    stop_tokens: tuple[str, ...] = ()
    models: dict = dataclasses.field(default_factory=dict)
    classifier_mode: str = ClassifierMode.CT
    dataset: Path | None = None
    out: Path | None = None
    parallel: int = 1
    bootstrap_iterations: int = 1000
    generator: dict = dataclasses.field(default_factory=dict)
    extractor: dict = dataclasses.field(default_factory=dict)
    classifier_train: dict = dataclasses.field(default_factory=dict)


def load_run_config(path: str | Path) -> RunConfig:
    config_path = Path(path)
    if not config_path.exists():
        raise ConfigError(f"config file not found: {config_path}")
    try:
        doc = yaml.safe_load(config_path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{config_path}: invalid YAML: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != CONFIG_FORMAT:
        raise ConfigError(f"{config_path}: expected a document with format: {CONFIG_FORMAT}")

    base = config_path.parent
    try:
        strategy = Strategy(doc.get("strategy", "aligned_sampling"))
    except ValueError as exc:
        raise ConfigError(f"{config_path}: unknown strategy {doc.get('strategy')!r}") from exc

    system_prompt = doc.get("system_prompt", "")
    preset = doc.get("system_prompt_preset")
    if preset is not None:
        if preset not in PRESET_SYSTEM_PROMPTS:
            raise ConfigError(
                f"{config_path}: unknown system prompt preset {preset!r}; "
                f"available: {sorted(PRESET_SYSTEM_PROMPTS)}"
            )
        system_prompt = PRESET_SYSTEM_PROMPTS[preset]

    gamma = doc.get("gamma")
    family = doc.get("model_family")
    if gamma is None and family is not None:
        if family not in GAMMA_BY_FAMILY:
            raise ConfigError(f"{config_path}: unknown model family {family!r}")
        gamma = GAMMA_BY_FAMILY[family]

    shots_doc = doc.get("fewshot", [])
    try:
        fewshot = FewShotSpec(
            tuple((item["question"], item["answer"]) for item in shots_doc)
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{config_path}: invalid fewshot section: {exc}") from exc

    def _opt_path(key: str) -> Path | None:
        value = doc.get(key)
        return (base / value) if value is not None else None

    config = RunConfig(
        base_dir=base,
        strategy=strategy,
        temperature=float(doc.get("temperature", 1.0)),
        gamma=float(gamma) if gamma is not None else None,
        lambda_mix=float(doc.get("lambda_mix", 0.5)),
        max_tokens=int(doc.get("max_tokens", 64)),
        seed=int(doc.get("seed", 0)),
        shots=int(doc.get("shots", min(5, len(fewshot.shots)))),
        system_prompt=system_prompt,
        aligned_template=doc.get("aligned_template", "Question: {question} Answer:"),
        fewshot=fewshot,
        stop_tokens=tuple(doc.get("stop_tokens", [])),
        models=doc.get("models", {}) or {},
        classifier_mode=doc.get("classifier_mode", ClassifierMode.CT),
        dataset=_opt_path("dataset"),
        out=_opt_path("out"),
        parallel=int(doc.get("parallel", 0)) or (os.cpu_count() or 1),
        bootstrap_iterations=int(doc.get("bootstrap_iterations", 1000)),
        generator=doc.get("generator", {}) or {},
        extractor=doc.get("extractor", {}) or {},
        classifier_train=doc.get("classifier_train", {}) or {},
    )
    if config.dataset is not None and not config.dataset.exists():
        raise ConfigError(f"{config_path}: dataset file not found: {config.dataset}")
    return config


@dataclass
class Runtime:
    """Loaded models and classifier for one configured run."""

    config: RunConfig
    aligned: LanguageModel | None = None
    pretrained: LanguageModel | None = None
    classifier: CriticalTokenClassifier | None = None

    def strategy_config(self, strategy: Strategy, seed: int) -> StrategyConfig:
        cfg = self.config
        if strategy in (Strategy.ENTROPY_CDS, Strategy.SELF_CDS) and cfg.gamma is None:
            raise ConfigError(
                f"strategy {strategy.value} needs gamma (or model_family) in the config"
            )
        return StrategyConfig(
            strategy=strategy,
            temperature=cfg.temperature,
            gamma=cfg.gamma,
            lambda_mix=cfg.lambda_mix,
            max_tokens=cfg.max_tokens,
            seed=seed,
        )

    def build_prefixes(self, question: str, shots: int) -> PrefixTriple:
        aligned_ids: tuple[int, ...] = ()
        if self.aligned is not None:
            text = self.config.aligned_template.format(question=question)
            if self.config.system_prompt:
                text = f"{self.config.system_prompt} {text}"
            aligned_ids = tuple(WhitespaceTokenizer(self.aligned.vocabulary()).encode(text))
        pretrained_ids: tuple[int, ...] = ()
        if self.pretrained is not None:
            spec = self.config.fewshot.truncated(min(shots, len(self.config.fewshot.shots)))
            pretrained_ids = tuple(
                render_fewshot_prefix(
                    spec, question, WhitespaceTokenizer(self.pretrained.vocabulary())
                )
            )
        return PrefixTriple(pretrained=pretrained_ids, aligned=aligned_ids, classifier=())

    def run(
        self, question: str, strategy: Strategy, seed: int, shots: int
    ) -> GenerationResult:
        config = self.strategy_config(strategy, seed)
        if self.config.stop_tokens:
            vocab = self.response_vocabulary(strategy)
            try:
                ids = frozenset(vocab.id_of(t) for t in self.config.stop_tokens)
            except ValueError as exc:
                raise ConfigError(f"stop_tokens: {exc}") from exc
            config = dataclasses.replace(config, stop_ids=ids)
        return run_strategy(
            config,
            aligned=self.aligned,
            pretrained=self.pretrained,
            classifier=self.classifier,
            prefixes=self.build_prefixes(question, shots),
            question=question,
        )

    def response_vocabulary(self, strategy: Strategy):
        model = self.pretrained if strategy in (
            Strategy.PRETRAINED_SAMPLING,
            Strategy.PRETRAINED_GREEDY,
        ) else self.aligned
        assert model is not None
        return model.vocabulary()


def _load_role_model(config: RunConfig, role: str) -> LanguageModel | None:
    spec = config.models.get(role)
    if spec is None:
        return None
    if not isinstance(spec, dict):
        raise ConfigError(f"model spec for role {role!r} must be a mapping")
    if "path" in spec:
        path = config.base_dir / spec["path"]
        if not path.exists():
            raise ConfigError(f"{role} model file not found: {path}")
        try:
            return load_model(path)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"{role} model file {path} is invalid: {exc}") from exc
    if "endpoint" in spec:
        return RemoteModel(
            spec["endpoint"], RemoteConfig(top_k=int(spec.get("top_k", 128)))
        )
    raise ConfigError(f"model spec for role {role!r} needs a 'path' or an 'endpoint'")


def _build_classifier(config: RunConfig) -> CriticalTokenClassifier | None:
    spec = config.models.get("classifier")
    if spec is None:
        return None
    if not isinstance(spec, dict):
        raise ConfigError("classifier spec must be a mapping")
    kind = spec.get("kind")
    if kind == "heuristic":
        rules = HeuristicRules(
            continuation_tokens=frozenset(
                t.lower() for t in spec.get("continuation_tokens", [])
            )
        )
        return HeuristicClassifier(rules)
    if kind == "constant":
        try:
            label = DecisionLabel.from_string(spec.get("label", "No"))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return ConstantClassifier(label, mode=config.classifier_mode)
    if "path" in spec:
        path = config.base_dir / spec["path"]
        if not path.exists():
            raise ConfigError(f"classifier file not found: {path}")
        try:
            return FeatureClassifier.load(path)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"classifier file {path} is invalid: {exc}") from exc
    if "endpoint" in spec:
        return RemoteClassifier(spec["endpoint"], mode=config.classifier_mode)
    raise ConfigError("classifier spec needs a 'kind', 'path', or 'endpoint'")


def build_runtime(config: RunConfig, strategy: Strategy | None = None) -> Runtime:
    strategy = strategy or config.strategy
    runtime = Runtime(
        config=config,
        aligned=_load_role_model(config, "aligned"),
        pretrained=_load_role_model(config, "pretrained"),
        classifier=_build_classifier(config),
    )
    missing = {
        role
        for role in _REQUIRED_ROLES[strategy]
        if getattr(runtime, role if role != "classifier" else "classifier") is None
    }
    if missing:
        raise ConfigError(
            f"strategy {strategy.value} requires model roles {sorted(missing)} "
            "missing from the config"
        )
    return runtime


def _parse_strategies(arg: str | None, default: Strategy) -> list[Strategy]:
    if not arg:
        return [default]
    names = [s.strip() for s in arg.split(",") if s.strip()]
    try:
        return [Strategy(name) for name in names]
    except ValueError as exc:
        raise ConfigError(f"unknown strategy in --strategy: {exc}") from exc


def _parse_shots(arg: str | None, default: int) -> list[int]:
    if not arg:
        return [default]
    if ".." in arg:
        lo_text, hi_text = arg.split("..", 1)
        try:
            lo, hi = int(lo_text), int(hi_text)
        except ValueError as exc:
            raise ConfigError(f"invalid --shots range {arg!r}") from exc
        if not (0 <= lo <= hi <= FewShotSpec.MAX_SHOTS):
            raise ConfigError(f"--shots range must lie within 0..{FewShotSpec.MAX_SHOTS}")
        return list(range(lo, hi + 1))
    try:
        value = int(arg)
    except ValueError as exc:
        raise ConfigError(f"invalid --shots value {arg!r}") from exc
    if not (0 <= value <= FewShotSpec.MAX_SHOTS):
        raise ConfigError(f"--shots must lie within 0..{FewShotSpec.MAX_SHOTS}")
    return [value]


def cmd_generate(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    runtime = build_runtime(config)
    result = runtime.run(args.prompt, config.strategy, config.seed, config.shots)
    print(response_text(result, runtime.response_vocabulary(config.strategy)))
    if args.trace:
        context_charge = len(runtime.build_prefixes(args.prompt, config.shots).pretrained)
        export_trace(result, args.trace, context_charge=context_charge)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.parallel is not None:
        config.parallel = args.parallel
    if args.out is not None:
        config.out = Path(args.out)
    if config.dataset is None:
        raise ConfigError("eval needs a dataset path in the config")
    try:
        dataset = load_qa_records(config.dataset)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if not dataset:
        raise ConfigError(f"dataset {config.dataset} is empty")

    strategies = _parse_strategies(args.strategy, config.strategy)
    shots_list = _parse_shots(args.shots, config.shots)
    out_dir = config.out or (config.base_dir / "runs")
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for strategy in strategies:
        runtime = build_runtime(config, strategy)
        for shots in shots_list:
            results: list[GenerationResult | None] = [None] * len(dataset)
            vocab = runtime.response_vocabulary(strategy)

            def runner(record: QARecord, seed: int) -> str:
                index = seed - config.seed
                result = runtime.run(record.question, strategy, seed, shots)
                results[index] = result
                return response_text(result, vocab)

            name = f"{strategy.value}.shots{shots}"
            report = run_experiment(
                dataset,
                runner,
                ExperimentConfig(
                    seed=config.seed,
                    bootstrap_iterations=config.bootstrap_iterations,
                    parallel=config.parallel,
                    out_dir=out_dir,
                    name=name,
                ),
            )

            total_tokens = 0
            total_yes = 0
            total_cost = 0
            for index, result in enumerate(results):
                if result is None:
                    continue
                charge = len(runtime.build_prefixes(dataset[index].question, shots).pretrained)
                cost = cost_report(result.trace, context_charge=charge)
                total_cost += cost.total
                total_tokens += len(result.trace.steps)
                total_yes += sum(
                    1 for s in result.trace.steps if s.decision is DecisionLabel.YES
                )
            rows.append(
                {
                    "strategy": strategy.value,
                    "dataset": config.dataset.stem,
                    "accuracy": f"{report.accuracy:.4f}",
                    "stddev": "" if report.bootstrap_stddev is None else f"{report.bootstrap_stddev:.4f}",
                    "critical_fraction": f"{(total_yes / total_tokens) if total_tokens else 0.0:.4f}",
                    "cost_total": total_cost,
                    "shots": shots,
                }
            )
            stddev_note = rows[-1]["stddev"] or "n/a"
            print(
                f"{name}: accuracy={report.accuracy:.4f} n={report.n} "
                f"errors={report.errors} stddev={stddev_note}"
            )

    write_summary_csv(out_dir / "summary.csv", rows)
    print(f"summary written to {out_dir / 'summary.csv'}")
    return 0


def _pipeline_spec(config: RunConfig, section: dict, which: str):
    model_path = section.get("model")
    if model_path is None:
        raise ConfigError(f"{which} section needs a 'model' path")
    path = config.base_dir / model_path
    if not path.exists():
        raise ConfigError(f"{which} model file not found: {path}")
    return load_model(path)


def cmd_dataset(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    documents_path = Path(args.documents)
    if not documents_path.exists():
        raise ConfigError(f"documents file not found: {documents_path}")
    documents = [
        line.strip()
        for line in documents_path.read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]

    generator = GeneratorSpec(
        model=_pipeline_spec(config, config.generator, "generator"),
        question_template=config.generator.get(
            "question_template", GeneratorSpec.question_template
        ),
        answer_template=config.generator.get("answer_template", GeneratorSpec.answer_template),
        questions_per_document=int(config.generator.get("questions_per_document", 5)),
        max_tokens=int(config.generator.get("max_tokens", 64)),
    )
    extractor = ExtractorSpec(
        model=_pipeline_spec(config, config.extractor, "extractor"),
        template=config.extractor.get("template", ExtractorSpec.template),
        max_tokens=int(config.extractor.get("max_tokens", 64)),
    )

    if not documents:
        print("warning: no documents found; writing empty dataset", file=sys.stderr)
        Path(args.out).write_text("", encoding="utf-8")
        print(f"wrote 0 instances to {args.out} (skipped 0)")
        return 0

    report = generate_dataset(documents, generator, extractor)
    save_instances(report.instances, args.out)
    print(f"wrote {len(report.instances)} instances to {args.out} (skipped {report.skipped})")
    return 0


def _format_metric(value: float | None) -> str:
    return f"{value:.2f}" if value is not None else "-"


def cmd_classifier(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    try:
        instances = load_instances(args.data)
    except (OSError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if not instances:
        raise ConfigError(f"dataset {args.data} is empty")

    if args.classifier_command == "train":
        section = config.classifier_train
        train_config = TrainConfig(
            mode=config.classifier_mode,
            window=int(section.get("window", 2)),
            learning_rate=float(section.get("learning_rate", 1.0)),
            epochs=int(section.get("epochs", 200)),
            l2=float(section.get("l2", 0.0)),
            seed=int(section.get("seed", config.seed)),
        )
        try:
            model = train_feature_classifier(instances, train_config)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        model.save(args.out)
        print(f"trained {train_config.mode} classifier on {len(instances)} instances -> {args.out}")
        return 0

    # eval
    if args.model is not None:
        path = Path(args.model)
        if not path.exists():
            raise ConfigError(f"classifier file not found: {path}")
        classifier = FeatureClassifier.load(path)
    else:
        classifier = _build_classifier(config)
        if classifier is None:
            raise ConfigError("classifier eval needs --model or a classifier in the config")
    metrics = evaluate_classifier(classifier, instances)
    print(f"{'':<6}{'All':<18}{'Switch'}")
    print(f"{'':<6}{'Yes-F1':<9}{'Acc.':<9}{'Yes-F1':<9}{'Acc.'}")
    print(
        f"{classifier.mode:<6}"
        f"{_format_metric(metrics.all_yes_f1):<9}"
        f"{_format_metric(metrics.all_accuracy):<9}"
        f"{_format_metric(metrics.switch_yes_f1):<9}"
        f"{_format_metric(metrics.switch_accuracy)}"
    )
    print(f"gold Yes rate: {metrics.yes_rate:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cds", description="Collaborative decoding engine command line"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="generate one response for a prompt")
    p_gen.add_argument("--config", required=True)
    p_gen.add_argument("--prompt", required=True)
    p_gen.add_argument("--seed", type=int, default=None)
    p_gen.add_argument("--trace", default=None, help="write a JSONL trace to this path")
    p_gen.set_defaults(func=cmd_generate)

    p_eval = sub.add_parser("eval", help="run a dataset evaluation")
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--strategy", default=None, help="comma-separated strategy sweep")
    p_eval.add_argument("--shots", default=None, help="shot count K or sweep A..B")
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.add_argument("--out", default=None)
    p_eval.add_argument("--parallel", type=int, default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_data = sub.add_parser("dataset", help="build a critical-token dataset from documents")
    p_data.add_argument("--config", required=True)
    p_data.add_argument("--documents", required=True)
    p_data.add_argument("--out", required=True)
    p_data.set_defaults(func=cmd_dataset)

    p_clf = sub.add_parser("classifier", help="train or evaluate a critical-token classifier")
    clf_sub = p_clf.add_subparsers(dest="classifier_command", required=True)
    p_train = clf_sub.add_parser("train")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--data", required=True)
    p_train.add_argument("--out", required=True)
    p_train.set_defaults(func=cmd_classifier)
    p_ceval = clf_sub.add_parser("eval")
    p_ceval.add_argument("--config", required=True)
    p_ceval.add_argument("--data", required=True)
    p_ceval.add_argument("--model", default=None)
    p_ceval.set_defaults(func=cmd_classifier)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (GenerationError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
