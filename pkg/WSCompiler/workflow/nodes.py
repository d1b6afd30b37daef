import json
from pathlib import Path
from typing import Dict, List, Optional

from WSCompiler.compiler.candidates import enumerate_candidates
from WSCompiler.labels.artifacts import fit_task_labels, label_digests, labels_path, prob_labels, save_labels
from WSCompiler.monitor.monitor import default_tags, evaluate, export_report
from WSCompiler.schema.schema import load_schema, override_tuning
from WSCompiler.search.search import RandomSearch, export_trials
from WSCompiler.store.rowstore import ingest, tags_path
from WSCompiler.training.model_io import save_model
from WSCompiler.utils.config import Config
from WSCompiler.utils.errors import StoreIoError
from WSCompiler.utils.hashing import sha256_file
from WSCompiler.utils.logger import LoggerMixin, log_stage
from WSCompiler.workflow.state import PipelineState

STORE_NAME = "store.ovrs"
MODEL_NAME = "model.ovm"
SEARCH_RESULTS_NAME = "search.results.csv"
REPORT_NAME = "report.csv"
PROVENANCE_NAME = "provenance.json"


class PipelineNodes(LoggerMixin):
    def __init__(self, config: Optional[Config] = None):
        self.config = config or Config()
        self.written: List[Path] = []  # 本次运行写出的文件，失败时删除

    def _record(self, state: PipelineState, name: str, path: Path) -> None:
        state["artifacts"][name] = str(path)
        self.written.append(Path(path))

    def _search(self, state: PipelineState) -> RandomSearch:
        return RandomSearch(
            state["schema"], state["store"], prob_labels(state["labels"]),
            tuning=state["tuning"], defaults=self.config.train,
            threads=self.config.runtime.threads, label_digests=label_digests(state["labels"])
        )

    @log_stage("ingest")
    def ingest_node(self, state: PipelineState) -> PipelineState:
        state["current_step"] = "ingesting"
        schema = load_schema(state["schema_path"])
        state["schema"] = schema
        state["tuning"] = override_tuning(schema.tuning, seed=state["seed"], budget=state.get("budget"))

        out_dir = Path(state["out_dir"])
        store_path = out_dir / STORE_NAME
        self.written.extend([store_path, tags_path(store_path)])
        result = ingest(schema, Path(state["data_path"]), store_path)
        for err in result.errors:
            self.logger.warning("skipped %s", err)
        state["store"] = result.store
        state["record_errors"] = result.errors
        self._record(state, "store", store_path)
        self._record(state, "store_tags", tags_path(store_path))
        return state

    @log_stage("fit-labels")
    def fit_labels_node(self, state: PipelineState) -> PipelineState:
        state["current_step"] = "fitting_labels"
        schema, store = state["schema"], state["store"]
        rows = store.rows_with_tag("train")
        for task in schema.tasks:
            _, task_labels = fit_task_labels(store, schema, task.name, rows, self.config.label_model, state["seed"])
            path = labels_path(store.path, task.name)
            save_labels(path, task_labels)
            state["labels"][task.name] = task_labels
            self._record(state, f"labels.{task.name}", path)
        return state

    @log_stage("search")
    def search_node(self, state: PipelineState) -> PipelineState:
        state["current_step"] = "searching"
        result = self._search(state).run()
        state["trials"] = result.trials
        state["best_trial"] = result.best_trial
        state["model"] = result.best
        return state

    @log_stage("train")
    def train_node(self, state: PipelineState) -> PipelineState:
        state["current_step"] = "training"
        choice = enumerate_candidates(state["tuning"])[0]
        # 单次训练：错误直接抛出，保留原始退出码
        trial = self._search(state).run_trial(0, choice, raise_errors=True)
        state["trials"] = [trial]
        state["best_trial"] = trial.trial_id
        state["model"] = trial.model
        return state

    @log_stage("evaluate")
    def evaluate_node(self, state: PipelineState) -> PipelineState:
        state["current_step"] = "evaluating"
        state["report"] = evaluate(state["model"], state["store"], default_tags(state["schema"]))
        return state

    @log_stage("export")
    def export_node(self, state: PipelineState) -> PipelineState:
        state["current_step"] = "exporting"
        out_dir = Path(state["out_dir"])
        schema = state["schema"]

        model_path = out_dir / MODEL_NAME
        self.written.append(model_path)
        save_model(state["model"], model_path)
        self._record(state, "model", model_path)

        trials_path = out_dir / SEARCH_RESULTS_NAME
        self.written.append(trials_path)
        export_trials(schema, state["trials"], trials_path, self.config.runtime.record_timing)
        self._record(state, "search_results", trials_path)

        report_path = out_dir / REPORT_NAME
        self.written.append(report_path)
        export_report(state["report"], report_path, "csv")
        self._record(state, "report", report_path)

        state["provenance"] = self.write_provenance(state, out_dir / PROVENANCE_NAME)
        state["current_step"] = "completed"
        return state

    def write_provenance(self, state: PipelineState, path: Path) -> Dict:
        provenance = {
            "inputs": {
                "schema": sha256_file(state["schema_path"]),
                "data": sha256_file(state["data_path"]),
            },
            "seed": state["seed"],
            "budget": state["tuning"].budget,
            "best_trial": state["best_trial"],
            "skipped_lines": [e.line for e in state["record_errors"]],
            "artifacts": {
                name: {"path": Path(p).name, "sha256": sha256_file(p)}
                for name, p in sorted(state["artifacts"].items())
            },
        }
        self.written.append(path)
        try:
            path.write_text(json.dumps(provenance, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        except OSError as e:
            raise StoreIoError(f"Cannot write provenance {path}: {e}")
        state["artifacts"]["provenance"] = str(path)
        return provenance

    def cleanup(self) -> None:
        for path in self.written:
            try:
                path.unlink()
            except FileNotFoundError:
                pass
            except OSError as e:
                self.logger.warning("could not remove partial artifact %s: %s", path, e)
        self.written = []

    # 预算大于 1 才搜索，否则直接训练
    def should_search(self, state: PipelineState) -> str:
        if state["tuning"].budget > 1:
            return "search"
        return "train"
