"""
model.ovm: a ZIP container with fixed timestamps and sorted entries, so
that identical models give identical bytes.
"""

import io
import json
import zipfile
from pathlib import Path
from typing import Dict, List, Union

import pandas as pd

from WSCompiler.compiler.ir import ModelIR, ServingSignature
from WSCompiler.numerics.tensor import ParamStore, check_params
from WSCompiler.training.trainer import EpochLog, TrainedModel
from WSCompiler.utils.errors import StoreFormatError, StoreIoError
from WSCompiler.utils.hashing import sha256_file
from WSCompiler.utils.logger import get_logger

logger = get_logger(__name__)

IR_ENTRY = "model.ir.json"
SIG_ENTRY = "model.sig.json"
PARAMS_ENTRY = "params.bin"
PROVENANCE_ENTRY = "provenance.json"
TRAIN_LOG_ENTRY = "train.log.csv"
ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def train_log_frame(log: List[EpochLog]) -> pd.DataFrame:
    tasks = sorted({name for entry in log for name in entry.task_losses})
    rows = []
    for entry in log:
        row = {"epoch": entry.epoch, "total_loss": entry.total_loss}
        for name in tasks:
            row[f"loss_{name}"] = entry.task_losses.get(name, 0.0)
        rows.append(row)
    return pd.DataFrame(rows, columns=["epoch", "total_loss"] + [f"loss_{t}" for t in tasks])


def train_log_csv(log: List[EpochLog]) -> str:
    return train_log_frame(log).to_csv(index=False, lineterminator="\n", float_format="%.9e")


def parse_train_log(text: str) -> List[EpochLog]:
    if not text.strip():
        return []
    df = pd.read_csv(io.StringIO(text))
    tasks = [c for c in df.columns if c.startswith("loss_")]
    return [
        EpochLog(
            epoch=int(row["epoch"]),
            total_loss=float(row["total_loss"]),
            task_losses={c[len("loss_"):]: float(row[c]) for c in tasks}
        )
        for _, row in df.iterrows()
    ]


def provenance_json(provenance: Dict) -> str:
    return json.dumps(provenance, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def model_entries(model: TrainedModel) -> Dict[str, bytes]:
    return {
        IR_ENTRY: model.ir.to_json().encode("utf-8"),
        SIG_ENTRY: model.signature.to_json().encode("utf-8"),
        PARAMS_ENTRY: model.params.to_bytes(),
        PROVENANCE_ENTRY: provenance_json(model.provenance).encode("utf-8"),
        TRAIN_LOG_ENTRY: train_log_csv(model.train_log).encode("utf-8"),
    }


def save_model(model: TrainedModel, path: Union[str, Path]) -> Path:
    path = Path(path)
    buffer = io.BytesIO()
    with zipfile.ZipFile(buffer, "w", compression=zipfile.ZIP_STORED) as archive:
        for name, data in sorted(model_entries(model).items()):
            info = zipfile.ZipInfo(name, date_time=ZIP_EPOCH)
            info.compress_type = zipfile.ZIP_STORED
            info.external_attr = 0o644 << 16
            archive.writestr(info, data)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(buffer.getvalue())
    except OSError as e:
        raise StoreIoError(f"Cannot write model {path}: {e}")
    logger.info("saved model to %s", path)
    return path


def load_model(path: Union[str, Path]) -> TrainedModel:
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as archive:
            entries = {name: archive.read(name) for name in archive.namelist()}
    except OSError as e:
        raise StoreIoError(f"Cannot read model {path}: {e}")
    except zipfile.BadZipFile as e:
        raise StoreFormatError(f"{path} is not a model container: {e}")

    missing = [n for n in (IR_ENTRY, SIG_ENTRY, PARAMS_ENTRY, PROVENANCE_ENTRY) if n not in entries]
    if missing:
        raise StoreFormatError(f"{path} is missing {missing}")
    ir = ModelIR.from_json(entries[IR_ENTRY].decode("utf-8"))
    params = ParamStore.from_bytes(entries[PARAMS_ENTRY])
    check_params(ir, params)
    signature = ServingSignature.from_json(entries[SIG_ENTRY].decode("utf-8"))
    if signature != ir.signature:
        raise StoreFormatError(f"{path}: serving signature does not match the IR")
    return TrainedModel(
        ir=ir,
        params=params,
        signature=signature,
        provenance=json.loads(entries[PROVENANCE_ENTRY].decode("utf-8")),
        train_log=parse_train_log(entries.get(TRAIN_LOG_ENTRY, b"").decode("utf-8"))
    )


def model_digest(path: Union[str, Path]) -> str:
    return sha256_file(path)
