"""
Журнал запуска: манифест, метрики обучения, отчёты и данные для графиков
"""
import csv
import json
import logging
import os
import subprocess
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import psutil
from pydantic import BaseModel

from .errors import IoError
from .models import EvalReport, RunManifest

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "epoch", "lr", "ce", "reg", "loss", "grad_norm", "wallclock")
REPORT_COLUMNS = ("arch", "init", "steps", "accuracy", "lr")


def git_hash(cwd: Optional[Path] = None) -> Optional[str]:
    """HEAD текущего репозитория или None вне git"""
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], cwd=cwd, capture_output=True, text=True,
            timeout=5, check=True,
        )
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None


def rss_mb() -> float:
    return psutil.Process().memory_info().rss / 2 ** 20


def atomic_write_json(path: Path, data: Any) -> None:
    """Запись через временный файл и rename"""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, sort_keys=True, default=str)
            f.flush()
            os.fsync(f.fileno())
        tmp.replace(path)
    except OSError as e:
        raise IoError(f"Cannot write {path}: {e}") from e


def write_csv(path: Path, rows: Iterable[Dict[str, Any]], columns: Sequence[str]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore")
            writer.writeheader()
            for row in rows:
                writer.writerow(row)
    except OSError as e:
        raise IoError(f"Cannot write {path}: {e}") from e
    return path


def read_csv(path: Path) -> List[Dict[str, str]]:
    try:
        with open(path, newline="", encoding="utf-8") as f:
            return list(csv.DictReader(f))
    except OSError as e:
        raise IoError(f"Cannot read {path}: {e}") from e


class MetricsWriter:
    """CSV метрик обучения с фиксированным порядком колонок"""

    def __init__(self, path: Path, columns: Sequence[str] = METRIC_COLUMNS):
        self.path = Path(path)
        self.columns = list(columns)

    def reset(self, keep_until_step: Optional[int] = None) -> None:
        """
        Пересоздаёт файл. При возобновлении сохраняются строки со step
        не больше keep_until_step, более поздние отбрасываются.
        """
        kept: List[Dict[str, str]] = []
        if keep_until_step is not None and self.path.exists():
            kept = [r for r in read_csv(self.path) if int(r["step"]) <= keep_until_step]
        write_csv(self.path, kept, self.columns)

    def append(self, row: Dict[str, Any]) -> None:
        try:
            with open(self.path, "a", newline="", encoding="utf-8") as f:
                csv.DictWriter(f, fieldnames=self.columns, extrasaction="ignore").writerow(row)
        except OSError as e:
            raise IoError(f"Cannot append metrics to {self.path}: {e}") from e


class RunRecorder:
    """Все артефакты одной команды в каталоге вывода"""

    def __init__(self, out_dir: Path):
        self.out_dir = Path(out_dir)
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise IoError(f"Cannot create output directory {self.out_dir}: {e}") from e

    def path(self, *parts: str) -> Path:
        return self.out_dir.joinpath(*parts)

    def write_manifest(self, manifest: RunManifest) -> Path:
        path = self.path("manifest.json")
        data = manifest.model_dump(mode="json")
        data["rss_mb"] = round(rss_mb(), 1)
        atomic_write_json(path, data)
        logger.info(f"Manifest written to {path} (config {manifest.config_hash[:12]})")
        return path

    def write_json(self, name: str, data: Any) -> Path:
        path = self.path(name)
        if isinstance(data, BaseModel):
            data = data.model_dump(mode="json")
        atomic_write_json(path, data)
        return path

    def write_report(self, report: EvalReport, stem: Optional[str] = None) -> Path:
        """JSON со сводкой и CSV со строками отчёта"""
        stem = stem or report.protocol
        data = report.model_dump(mode="json")
        data["summary"] = report.summary()
        self.write_json(f"{stem}.json", data)
        write_csv(self.path(f"{stem}.csv"), (r.model_dump() for r in report.rows), REPORT_COLUMNS)
        logger.info(
            f"Report {stem}: {len(report.rows)} rows, {len(report.errors)} errors, "
            f"took {report.human_duration}"
        )
        return self.path(f"{stem}.json")

    def write_table(self, name: str, rows: List[Dict[str, Any]],
                    columns: Optional[Sequence[str]] = None) -> Path:
        columns = columns or (list(rows[0].keys()) if rows else [])
        return write_csv(self.path(name), rows, columns)

    def write_plot_data(self, name: str, series: Dict[str, List[float]],
                        index: str = "layer") -> Path:
        """Колоночные данные для графиков; короткие серии дополняются пустыми ячейками"""
        length = max((len(v) for v in series.values()), default=0)
        names = sorted(series)
        rows = []
        for i in range(length):
            row: Dict[str, Any] = {index: i}
            for key in names:
                row[key] = series[key][i] if i < len(series[key]) else ""
            rows.append(row)
        return write_csv(self.path("plots", f"{name}.csv"), rows, [index] + names)
