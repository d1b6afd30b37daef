from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import pandas as pd
from jinja2 import Environment, FileSystemLoader, TemplateNotFound

from WSCompiler.monitor.monitor import METRIC_COLUMNS, NO_GOLD, read_report
from WSCompiler.utils.errors import StoreIoError


class TemplateLoader:
    def __init__(self, templates_dir: Optional[str] = None):
        if templates_dir is None:
            templates_dir = Path(__file__).parent
        self.templates_dir = Path(templates_dir)

        self.env = Environment(
            loader=FileSystemLoader(str(self.templates_dir)),
            trim_blocks=True,
            lstrip_blocks=True,
            keep_trailing_newline=True
        )

    # 加载并渲染模板；输出里不放时间戳，重复渲染结果一致
    def load(self, template_name: str, **variables: Any) -> str:
        try:
            template = self.env.get_template(f"{template_name}.md")
        except TemplateNotFound as e:
            raise FileNotFoundError(
                f"Could not load template '{template_name}' from {self.templates_dir}: {e}"
            )
        return template.render(**variables)


_default_loader = None

def get_default_loader() -> TemplateLoader:
    global _default_loader
    if _default_loader is None:
        _default_loader = TemplateLoader()
    return _default_loader


def _fmt(value: Any) -> str:
    if value is None or (isinstance(value, float) and pd.isna(value)):
        return "-"
    return f"{float(value):.4f}"


def summary_sections(frame: pd.DataFrame) -> List[Dict[str, Any]]:
    """Group report rows by tag, keeping the order tags first appear in."""
    sections: Dict[str, Dict[str, Any]] = {}
    for _, r in frame.iterrows():
        tag = str(r["tag"])
        section = sections.setdefault(tag, {"tag": tag, "is_slice": False, "rows": []})
        is_slice = r["is_slice"]
        section["is_slice"] = section["is_slice"] or is_slice is True or str(is_slice).lower() == "true"
        note = "" if pd.isna(r["note"]) else str(r["note"])
        section["rows"].append({
            "task": str(r["task"]),
            "n": int(r["n"]),
            "no_gold": note == NO_GOLD,
            **{m: _fmt(r[m]) for m in METRIC_COLUMNS},
        })
    return list(sections.values())


def render_report_summary(report_path: Union[str, Path], loader: Optional[TemplateLoader] = None) -> str:
    frame = read_report(report_path)
    loader = loader or get_default_loader()
    sections = summary_sections(frame)
    return loader.load(
        "report_summary",
        source=Path(report_path).name,
        sections=[s for s in sections if not s["is_slice"]],
        slices=[s for s in sections if s["is_slice"]],
        metrics=list(METRIC_COLUMNS),
    )


def write_report_summary(report_path: Union[str, Path], out_path: Union[str, Path]) -> Path:
    text = render_report_summary(report_path)
    out_path = Path(out_path)
    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_bytes(text.encode("utf-8"))
    except OSError as e:
        raise StoreIoError(f"Cannot write summary {out_path}: {e}")
    return out_path
