"""
Формат файлов с именованными тензорами: версия, JSON-заголовок, float32 row-major
"""
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, List, Tuple

import numpy as np

from .errors import IoError

logger = logging.getLogger(__name__)

MAGIC = b"GHNF"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")  # magic, version, длина заголовка


def write_records(path: Path, kind: str, records: List[Tuple[str, np.ndarray]],
                  meta: Dict[str, Any]) -> None:
    """Записывает упорядоченные записи (имя, форма, данные float32)"""
    entries = []
    payload = []
    offset = 0
    for name, array in records:
        data = np.ascontiguousarray(array, dtype="<f4")
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        blob = data.tobytes()
        payload.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"kind": kind, "meta": meta, "records": entries}, sort_keys=True
    ).encode("utf-8")
    try:
        with open(path, "wb") as f:
            f.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)))
            f.write(header)
            for blob in payload:
                f.write(blob)
    except OSError as e:
        raise IoError(f"Cannot write {kind} checkpoint {path}: {e}") from e
    logger.debug(f"Wrote {len(records)} {kind} records to {path}")


def read_records(path: Path, kind: str) -> Tuple[Dict[str, Any], List[Tuple[str, np.ndarray]]]:
    """Читает файл записей и проверяет тип и версию"""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise IoError(f"Cannot read checkpoint {path}: {e}") from e
    if len(raw) < _PREFIX.size:
        raise IoError(f"Checkpoint {path} is truncated")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise IoError(f"{path} is not a ghnforge checkpoint")
    if version != FORMAT_VERSION:
        raise IoError(f"{path}: unsupported checkpoint version {version}")
    start = _PREFIX.size
    header = json.loads(raw[start:start + header_len].decode("utf-8"))
    if header["kind"] != kind:
        raise IoError(f"{path}: expected a {kind} checkpoint, found {header['kind']}")
    body = memoryview(raw)[start + header_len:]
    records = []
    for entry in header["records"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        array = np.frombuffer(body, dtype="<f4", count=count, offset=entry["offset"])
        records.append((entry["name"], array.reshape(entry["shape"]).copy()))
    return header["meta"], records
