import json
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

from dotenv import load_dotenv
from rich.markdown import Markdown
from rich.panel import Panel

from func import (
    CLIConfig, cli_config_from_args, console, parse_args, parse_params, print_header, print_separator, print_trials
)
from WSCompiler.compiler.candidates import ArchChoice, enumerate_candidates
from WSCompiler.compiler.compiler import compile as compile_model
from WSCompiler.labels.artifacts import (
    fit_task_labels, label_digests, labels_path, load_all_labels, prob_labels, save_labels
)
from WSCompiler.monitor.monitor import default_tags, evaluate, export_report
from WSCompiler.monitor.scaling import export_scaling, scaling_curve
from WSCompiler.schema.schema import Schema, load_schema, override_tuning
from WSCompiler.search.search import export_trials, run_search, trials_frame
from WSCompiler.store.rowstore import RowStore, check_records, ingest
from WSCompiler.synthetic.generators import generate, write_dataset
from WSCompiler.templates.loader import render_report_summary, write_report_summary
from WSCompiler.training.model_io import load_model, save_model
from WSCompiler.training.trainer import TrainConfig, predict, prepare_input, train
from WSCompiler.utils.config import Config, load_config_from_env
from WSCompiler.utils.errors import EXIT_OK, EXIT_VALIDATION, StoreIoError, ValidationFailure, WSCError, exit_code_for
from WSCompiler.utils.logger import (
    get_logger, print_error, print_info, print_step, print_success, print_warning, setup_logger
)
from WSCompiler.workflow.graph import PipelineWorkflow

logger = get_logger("cli")


def _open_store(schema: Schema, store_path: str) -> RowStore:
    store = RowStore.open(store_path)
    store.check_schema(schema)
    return store


def _labels(schema: Schema, store_path: str):
    labels = load_all_labels(store_path, schema)
    missing = [t.name for t in schema.tasks if t.name not in labels]
    if missing:
        print_warning(f"no labels artifact for {', '.join(missing)}; run fit-labels first to train on them")
    return labels


def _choice(schema: Schema, seed: int, params: Dict[str, Any]) -> ArchChoice:
    base = enumerate_candidates(override_tuning(schema.tuning, seed=seed, budget=1))[0]
    return ArchChoice.from_values({**base.values, **params})


def cmd_validate(args, config: Config) -> int:
    try:
        schema = load_schema(args.schema)
    except ValidationFailure as e:
        print_error(str(e))
        return EXIT_VALIDATION
    print_info(f"schema: {len(schema.payloads)} payloads, {len(schema.tasks)} tasks, {len(schema.slices)} slices")
    if args.data:
        total, errors = check_records(schema, Path(args.data))
        for err in errors:
            print_error(str(err))
        if errors:
            print_warning(f"{len(errors)} of {total} records rejected")
            return EXIT_VALIDATION
        print_info(f"{total} records conform to the schema")
    print_success("OK")
    return EXIT_OK


def cmd_ingest(args, config: Config) -> int:
    schema = load_schema(args.schema)
    result = ingest(schema, Path(args.data), args.store)
    for err in result.errors:
        print_warning(str(err))
    print_success(f"{result.store.count} rows written to {args.store} ({len(result.errors)} skipped)")
    for tag in result.store.tags:
        print_info(f"tag {tag}: {len(result.store.rows_with_tag(tag))} rows")
    return EXIT_OK


def cmd_fit_labels(args, config: Config) -> int:
    schema = load_schema(args.schema)
    store = _open_store(schema, args.store)
    rows = store.rows_with_tag("train")
    tasks = args.task or [t.name for t in schema.tasks]
    for name in tasks:
        schema.task(name)
        print_step(f"fitting label model for {name}")
        _, task_labels = fit_task_labels(store, schema, name, rows, config.label_model, args.seed)
        path = save_labels(labels_path(args.store, name), task_labels)
        accuracies = ", ".join(f"{s}={a:.3f}" for s, a in sorted(task_labels.model.accuracies.items()))
        print_success(f"{name}: coverage {task_labels.coverage:.1%}, accuracies {accuracies} -> {path}")
    return EXIT_OK


def cmd_train(args, config: Config) -> int:
    schema = load_schema(args.schema)
    store = _open_store(schema, args.store)
    labels = _labels(schema, args.store)
    choice = _choice(schema, args.seed, parse_params(args.param))
    ir = compile_model(schema, choice)
    cfg = TrainConfig.from_choice(choice, config.train, args.seed)
    model = train(ir, store, prob_labels(labels), cfg, label_digests=label_digests(labels))
    save_model(model, args.out)
    print_success(f"model written to {args.out} (final loss {model.train_log[-1].total_loss:.6f})")
    return EXIT_OK


def cmd_search(args, config: Config) -> int:
    schema = load_schema(args.schema)
    store = _open_store(schema, args.store)
    labels = _labels(schema, args.store)
    tuning = override_tuning(schema.tuning, seed=args.seed, budget=args.budget)
    result = run_search(schema, store, prob_labels(labels), tuning, config.train,
                        config.runtime.threads, label_digests(labels))
    out_dir = Path(args.out_dir)
    save_model(result.best, out_dir / "model.ovm")
    export_trials(schema, result.trials, out_dir / "search.results.csv", config.runtime.record_timing)
    print_trials(trials_frame(schema, result.trials).to_dict("records"), result.best_trial)
    print_success(f"best trial {result.best_trial}; artifacts in {out_dir}")
    return EXIT_OK


def cmd_evaluate(args, config: Config) -> int:
    model = load_model(args.model)
    store = _open_store(model.schema, args.store)
    tags = [t.strip() for t in args.tags.split(",") if t.strip()] if args.tags else default_tags(model.schema)
    report = evaluate(model, store, tags)
    export_report(report, args.out, args.format)
    for row in report.rows:
        if row.has_metrics:
            print_info(f"{row.tag}/{row.task}: n={row.n_units} acc={row.accuracy:.4f} f1={row.f1:.4f}")
        else:
            print_warning(f"{row.tag}/{row.task}: {row.note}")
    print_success(f"report written to {args.out}")
    return EXIT_OK


def cmd_report(args, config: Config) -> int:
    if args.out:
        write_report_summary(args.report, args.out)
        print_success(f"summary written to {args.out}")
    else:
        text = render_report_summary(args.report)
        console.print(Panel(Markdown(text), title="report", border_style="green"))
    return EXIT_OK


def cmd_scaling(args, config: Config) -> int:
    schema = load_schema(args.schema)
    store = _open_store(schema, args.store)
    labels = _labels(schema, args.store)
    choice = _choice(schema, schema.tuning.seed, parse_params(args.param))
    result = scaling_curve(schema, store, prob_labels(labels), choice, args.fractions, args.seeds, config.train)
    export_scaling(result, args.out)
    for _, row in result.summary().iterrows():
        print_info(f"{row['task']} {int(row['multiplier'])}x: relative quality {row['relative_quality']:.4f}")
    print_success(f"scaling table written to {args.out}")
    return EXIT_OK


def _read_inputs(path: str) -> List[Any]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise StoreIoError(f"Cannot read input {path}: {e}")
    try:
        return [json.loads(text)]
    except ValueError:
        return [json.loads(line) for line in text.splitlines() if line.strip()]


def cmd_predict(args, config: Config) -> int:
    model = load_model(args.model)
    for obj in _read_inputs(args.input):
        prediction = predict(model, prepare_input(model, obj))
        # 标准输出只放预测结果，日志走 stderr
        sys.stdout.write(json.dumps(prediction, sort_keys=True, ensure_ascii=False) + "\n")
    sys.stdout.flush()
    return EXIT_OK


def cmd_gen_synthetic(args, config: Config) -> int:
    dataset = generate(args.kind, args.n, args.seed)
    schema_path, data_path = write_dataset(dataset, args.out_dir)
    print_success(f"{args.kind}: {len(dataset.records)} records -> {data_path}, schema -> {schema_path}")
    return EXIT_OK


def cmd_pipeline(args, config: Config, cli: Optional[CLIConfig] = None) -> int:
    print_header("WSCompiler pipeline")
    workflow = PipelineWorkflow(config)
    final = None
    for state in workflow.stream(args.schema, args.data, args.out_dir, args.seed, args.budget):
        final = state
        if cli and cli.show_steps:
            console.print(f"[magenta]步骤：{state.get('current_step')}[/magenta]")
    print_separator("-")
    for name, path in sorted(final["artifacts"].items()):
        print_info(f"{name}: {path}")
    print_success(f"pipeline finished, best trial {final['best_trial']}")
    return EXIT_OK


COMMANDS: Dict[str, Callable[..., int]] = {
    "validate": cmd_validate,
    "ingest": cmd_ingest,
    "fit-labels": cmd_fit_labels,
    "train": cmd_train,
    "search": cmd_search,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "scaling": cmd_scaling,
    "predict": cmd_predict,
    "gen-synthetic": cmd_gen_synthetic,
}


def main(argv: Any = None) -> int:
    """主入口函数"""
    load_dotenv()
    args = parse_args(argv if argv is not None else sys.argv[1:])
    cli = cli_config_from_args(args)

    try:
        config = cli.apply(load_config_from_env())
        setup_logger(level=config.runtime.log_level, log_file=config.runtime.log_file)
        if args.command == "pipeline":
            return cmd_pipeline(args, config, cli)
        return COMMANDS[args.command](args, config)
    except KeyboardInterrupt:
        print_warning("interrupted")
        return exit_code_for(KeyboardInterrupt())
    except WSCError as e:
        print_error(str(e))
        return exit_code_for(e)
    except Exception as e:
        print_error(f"unexpected error: {e}")
        logger.exception("%s failed", args.command)
        return exit_code_for(e)


if __name__ == "__main__":
    raise SystemExit(main())
