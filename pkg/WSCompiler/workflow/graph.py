from pathlib import Path
from typing import Iterator, Optional, Union

from langgraph.graph import END, START, StateGraph

from WSCompiler.utils.config import Config
from WSCompiler.utils.logger import LoggerMixin
from WSCompiler.workflow.nodes import PipelineNodes
from WSCompiler.workflow.state import PipelineState, initial_state


def create_pipeline_graph(nodes: PipelineNodes):
    workflow = StateGraph(PipelineState)

    # 添加节点
    workflow.add_node("ingest", nodes.ingest_node)
    workflow.add_node("fit_labels", nodes.fit_labels_node)
    workflow.add_node("search", nodes.search_node)
    workflow.add_node("train", nodes.train_node)
    workflow.add_node("evaluate", nodes.evaluate_node)
    workflow.add_node("export", nodes.export_node)

    workflow.add_edge(START, "ingest")
    workflow.add_edge("ingest", "fit_labels")
    # 预算为 1 时跳过搜索
    workflow.add_conditional_edges(
        "fit_labels",
        nodes.should_search,
        {
            "search": "search",
            "train": "train"
        }
    )
    workflow.add_edge("search", "evaluate")
    workflow.add_edge("train", "evaluate")
    workflow.add_edge("evaluate", "export")
    workflow.add_edge("export", END)

    return workflow.compile()


class PipelineWorkflow(LoggerMixin):
    def __init__(self, config: Optional[Config] = None):
        self.config = config or Config()
        self.nodes = PipelineNodes(self.config)
        self.graph = create_pipeline_graph(self.nodes)

    def stream(self, schema_path: Union[str, Path], data_path: Union[str, Path], out_dir: Union[str, Path],
               seed: int = 0, budget: Optional[int] = None) -> Iterator[dict]:
        """Yield one update per finished node; partial artifacts are removed if any node fails."""
        state = initial_state(str(schema_path), str(data_path), str(out_dir), seed, budget)
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        self.nodes.written = []
        try:
            for output in self.graph.stream(state, stream_mode="values"):
                yield output
        except Exception:
            self.logger.warning("pipeline failed, removing %d partial artifacts", len(self.nodes.written))
            self.nodes.cleanup()
            raise

    def run(self, schema_path: Union[str, Path], data_path: Union[str, Path], out_dir: Union[str, Path],
            seed: int = 0, budget: Optional[int] = None) -> PipelineState:
        final = None
        for final in self.stream(schema_path, data_path, out_dir, seed, budget):
            pass
        return final

    def visualize(self, output_path: Optional[str] = None) -> str:
        mermaid = self.graph.get_graph().draw_mermaid()
        if output_path:
            Path(output_path).write_text(mermaid, encoding="utf-8")
            return output_path
        return mermaid
