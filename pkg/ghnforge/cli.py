"""
Командная строка ghnforge: gen-space, train, predict, eval, finetune, analyze, ablate
"""
import functools
import json
import logging
import math
import statistics
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import click
import humanize
import psutil
import torch
from pythonjsonlogger import jsonlogger

from . import __version__
from .ablation import ablation_sweep, summarize_cells
from .analysis import (
    diversity_by_shape, kendall_tau, mean_abs_param, mean_distance,
    variance_series,
)
from .arch_space import load_space, sample_space, write_space
from .archgraph import ArchGraph, parse_graph
from .config import ExperimentConfig, config_hash, load_config
from .data import ImageDataset, ensure_dataset, load_dataset
from .errors import ConfigError, GhnForgeError, IoError
from .ghn import GhnModel, load_model, provenance
from .models import ArchSpaceConfig, FinetuneSchedule, MatchingMode, RunManifest
from .protocol_manager import ProtocolManager
from .protocols import CompareInitsProtocol, NoFinetuneProtocol, TransferProtocol
from .run_recorder import RunRecorder, read_csv, rss_mb, git_hash
from .target_net import ParamSet, random_init, save_params, sgd_finetune
from .trainer import train as train_model

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
LOG_FILE = "run.log.jsonl"
SPLITS = ("train", "test", "wide", "deep", "dense", "bn_free")


def setup_logging(level: str = "INFO", log_file: Optional[Path] = None,
                  json_logs: bool = True) -> None:
    """Настройка логирования: stderr и, при наличии каталога вывода, файл"""
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file is not None:
        file_handler = logging.FileHandler(log_file, encoding="utf-8")
        if json_logs:
            file_handler.setFormatter(
                jsonlogger.JsonFormatter("%(asctime)s %(name)s %(levelname)s %(message)s")
            )
        handlers.append(file_handler)
    logging.basicConfig(level=level.upper(), format=LOG_FORMAT, handlers=handlers, force=True)


@dataclass
class AppContext:
    command: str
    cfg: ExperimentConfig
    recorder: RunRecorder
    threads: int

    @property
    def seed(self) -> int:
        return self.cfg.seed


def common_options(f):
    """--config, --out, --threads, --log-level, --json-logs у каждой команды"""
    options = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path),
                     default=None, help="Experiment config (.toml or .yaml)"),
        click.option("--out", type=click.Path(file_okay=False, path_type=Path),
                     default=Path("runs/latest"), show_default=True, help="Output directory"),
        click.option("--threads", type=click.IntRange(min=1), default=None,
                     help="Worker cap (default: physical cores)"),
        click.option("--log-level", default="INFO", show_default=True,
                     type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"],
                                       case_sensitive=False)),
        click.option("--json-logs/--plain-logs", default=True, show_default=True,
                     help="Format of the run.log.jsonl file"),
    ]
    return functools.reduce(lambda acc, option: option(acc), reversed(options), f)


def start(command: str, config_path: Optional[Path], out: Path, threads: Optional[int],
          log_level: str, json_logs: bool) -> AppContext:
    """Логирование, конфигурация, сиды и манифест до начала тяжёлой работы"""
    recorder = RunRecorder(out)
    setup_logging(log_level, recorder.path(LOG_FILE), json_logs)
    cfg = load_config(config_path)
    threads = threads or psutil.cpu_count(logical=False) or 1
    torch.set_num_threads(threads)
    torch.manual_seed(cfg.seed)
    recorder.write_manifest(RunManifest(
        command=command,
        config_hash=config_hash(cfg),
        git_hash=git_hash(),
        seed=cfg.seed,
        version=__version__,
        argv=sys.argv[1:],
        cpu_count=psutil.cpu_count(),
        threads=threads,
    ))
    recorder.write_json("config.json", cfg)
    logger.info(f"Starting {command} (seed={cfg.seed}, threads={threads}) -> {out}")
    return AppContext(command, cfg, recorder, threads)


def load_graphs(path: Optional[Path], fallback: ArchSpaceConfig) -> List[ArchGraph]:
    """Каталог пространства, каталог с JSON графами, один JSON граф или генерация"""
    if path is None:
        return sample_space(fallback)
    path = Path(path)
    if path.is_dir():
        if (path / "manifest.json").exists():
            return load_space(path)[0]
        files = sorted(path.glob("*.json"))
        if not files:
            raise IoError(f"No graph JSON files in {path}")
        return [_read_graph(f) for f in files]
    return [_read_graph(path)]


def _read_graph(path: Path) -> ArchGraph:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise IoError(f"Cannot read graph {path}: {e}") from e
    return parse_graph(text)


def load_data(app: AppContext) -> ImageDataset:
    return load_dataset(ensure_dataset(app.cfg.data, app.cfg.data.seed or app.seed))


def split_config(cfg: ExperimentConfig, split: str) -> ArchSpaceConfig:
    if split == "train":
        return cfg.space
    holdout = cfg.eval.holdout
    if split == "test":
        return holdout
    overrides = holdout.model_dump(exclude={"name"})
    return ArchSpaceConfig.preset(split, **overrides)


@click.group()
@click.version_option(__version__, prog_name="ghnforge")
def cli():
    """Графовые гиперсети: обучение, предсказание параметров и оценка"""


@cli.command("gen-space")
@common_options
@click.option("--split", type=click.Choice(SPLITS), default="train", show_default=True)
def gen_space(config_path, out, threads, log_level, json_logs, split):
    """Генерирует пространство архитектур"""
    app = start("gen-space", config_path, out, threads, log_level, json_logs)
    space_cfg = split_config(app.cfg, split)
    graphs = sample_space(space_cfg)
    path = write_space(graphs, space_cfg, app.recorder.path(f"space_{split}"))
    click.echo(f"Wrote {len(graphs)} architectures to {path.parent}")


@cli.command()
@common_options
@click.option("--space", "space_dir", type=click.Path(exists=True, path_type=Path), default=None,
              help="Space directory from gen-space (default: sample from config)")
@click.option("--resume", type=click.Path(exists=True, file_okay=False, path_type=Path),
              default=None, help="Run directory with run_state.pt")
def train(config_path, out, threads, log_level, json_logs, space_dir, resume):
    """Обучает гиперсеть"""
    app = start("train", config_path, out, threads, log_level, json_logs)
    space = load_graphs(space_dir, app.cfg.space)
    dataset = load_data(app)
    space = [g.with_num_classes(dataset.num_classes) for g in space]
    model = GhnModel(app.cfg.ghn, seed=app.seed)
    _, metrics = train_model(model, space, dataset, app.cfg.train, app.recorder.out_dir,
                             resume=resume, threads=app.threads)
    if metrics:
        last = metrics[-1]
        click.echo(f"Trained {last['step'] + 1} steps, final ce={last['ce']:.4f}, "
                   f"rss {rss_mb():.0f} MiB")


@cli.command()
@common_options
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              required=True)
@click.option("--graph", "graph_path", type=click.Path(exists=True, path_type=Path),
              required=True, help="Graph JSON file or a directory of graphs")
def predict(config_path, out, threads, log_level, json_logs, model_path, graph_path):
    """Предсказывает параметры для графа или пространства"""
    app = start("predict", config_path, out, threads, log_level, json_logs)
    model, _ = load_model(model_path)
    target = app.recorder.path("predicted")
    target.mkdir(parents=True, exist_ok=True)
    for g in load_graphs(graph_path, app.cfg.space):
        started = time.perf_counter()
        with torch.no_grad():
            p = model.predict_params(g)
        elapsed = time.perf_counter() - started
        save_params(p, target / f"{g.name}.params", {"graph": g.name})
        info = provenance(model, g, p)
        app.recorder.write_json(f"predicted/{g.name}.provenance.json", info)
        logger.info(f"{g.name}: predicted {humanize.intword(g.num_params)} parameters "
                    f"in {elapsed * 1000:.0f} ms")
    click.echo(f"Predictions written to {target}")


@cli.command("eval")
@common_options
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              required=True)
@click.option("--space", "space_dir", type=click.Path(exists=True, path_type=Path), default=None,
              help="Held-out space (default: sample eval.holdout)")
@click.option("--with-random/--no-random", default=False, help="Also score random init")
def eval_cmd(config_path, out, threads, log_level, json_logs, model_path, space_dir, with_random):
    """Точность без дообучения на отложенных архитектурах"""
    app = start("eval", config_path, out, threads, log_level, json_logs)
    model, _ = load_model(model_path)
    archs = load_graphs(space_dir, app.cfg.eval.holdout)
    manager = ProtocolManager(app.recorder)
    manager.register_protocol_class(NoFinetuneProtocol, model=model, dataset=load_data(app),
                                    config=app.cfg.eval, seed=app.seed, with_random=with_random)
    _echo_reports(manager.run(archs))


@cli.command()
@common_options
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              required=True)
@click.option("--space", "space_dir", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--protocol", type=click.Choice(["compare", "transfer"]), default="compare",
              show_default=True)
@click.option("--steps", type=click.IntRange(min=0), default=None,
              help="Override the fine-tuning budget in steps")
def finetune(config_path, out, threads, log_level, json_logs, model_path, space_dir, protocol,
             steps):
    """Дообучение с предсказанной и случайной инициализацией"""
    app = start("finetune", config_path, out, threads, log_level, json_logs)
    model, _ = load_model(model_path)
    archs = load_graphs(space_dir, app.cfg.eval.holdout)
    dataset = load_data(app)
    manager = ProtocolManager(app.recorder)
    if protocol == "compare":
        schedule = app.cfg.finetune
        if steps is not None:
            schedule = schedule.model_copy(update={"steps": steps})
        manager.register_protocol_class(CompareInitsProtocol, model=model, dataset=dataset,
                                        schedule=schedule, config=app.cfg.eval,
                                        seed=app.cfg.finetune.seed or app.seed)
    else:
        transfer = app.cfg.transfer
        if steps is not None:
            transfer = transfer.model_copy(update={
                "budget": transfer.budget.model_copy(update={"steps": steps})
            })
        dst_cfg = transfer.dst
        dst = load_dataset(ensure_dataset(dst_cfg, dst_cfg.seed or app.seed))
        manager.register_protocol_class(TransferProtocol, model=model, src=dataset, dst=dst,
                                        transfer=transfer, config=app.cfg.eval, seed=app.seed)
    _echo_reports(manager.run(archs))


@cli.command()
@common_options
@click.option("--model", "model_paths", multiple=True,
              type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--space", "space_dir", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--diversity", is_flag=True, help="Pairwise absolute cosine distance per shape")
@click.option("--variance", is_flag=True, help="Per-layer activation variance probe")
@click.option("--tau", is_flag=True, help="Kendall tau between two report CSVs")
@click.option("--reports", multiple=True, type=click.Path(exists=True, path_type=Path),
              help="Two report CSVs for --tau")
@click.option("--init", "init_filter", default=None, help="Row filter for --tau")
def analyze(config_path, out, threads, log_level, json_logs, model_paths, space_dir, diversity,
            variance, tau, reports, init_filter):
    """Разнообразие параметров, дисперсии активаций, ранговая корреляция"""
    if not (diversity or variance or tau):
        raise click.UsageError("choose at least one of --diversity, --variance, --tau")
    if tau and len(reports) != 2:
        raise click.UsageError("--tau needs exactly two --reports")
    if (diversity or variance) and not model_paths:
        raise click.UsageError("--diversity and --variance need at least one --model")
    app = start("analyze", config_path, out, threads, log_level, json_logs)

    if diversity or variance:
        models = {f"{path.parent.name}_{path.stem}": load_model(path)[0] for path in model_paths}
        archs = [g.with_num_classes(app.cfg.data.num_classes)
                 for g in load_graphs(space_dir, app.cfg.eval.holdout)]
        dataset = load_data(app)
        inits = _init_param_sets(models, archs, app.seed, dataset, app.cfg.finetune)
        if diversity:
            _analyze_diversity(app, inits)
        if variance:
            _analyze_variance(app, archs, inits, dataset)
    if tau:
        _analyze_tau(app, reports, init_filter)


@cli.command()
@common_options
@click.option("--space", "space_dir", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--holdout", "holdout_dir", type=click.Path(exists=True, path_type=Path),
              default=None)
def ablate(config_path, out, threads, log_level, json_logs, space_dir, holdout_dir):
    """Сетка абляций гиперсети"""
    app = start("ablate", config_path, out, threads, log_level, json_logs)
    dataset = load_data(app)
    space = [g.with_num_classes(dataset.num_classes)
             for g in load_graphs(space_dir, app.cfg.space)]
    holdout = load_graphs(holdout_dir, app.cfg.eval.holdout)
    rows = ablation_sweep(space, holdout, dataset, app.cfg.ghn, app.cfg.train, app.cfg.ablation,
                          app.cfg.eval, app.recorder.path("cells"), app.threads)
    app.recorder.write_table("ablation.csv", [r.model_dump() for r in rows])
    summary = summarize_cells(rows)
    app.recorder.write_table("ablation_summary.csv", summary)
    for row in summary:
        click.echo(f"{row['cell']:>14} γ={row['reg_coef']:g} λ={row['weight_decay']:g}: "
                   f"{row['accuracy_mean']}")


def _echo_reports(reports) -> None:
    for key, report in reports.items():
        for init, agg in report.summary().items():
            click.echo(f"{key} [{init}] mean={agg['mean']:.2f} std={agg['std']:.2f} "
                       f"top{report.top_k}={agg['top_mean']:.2f} (n={agg['n']})")
        if "comparison" in report.extras:
            c = report.extras["comparison"]
            click.echo(f"{key}: wins {c['wins']}/{c['n_pairs']}, avg gain {c['avg_gain']:+.2f}")


def _init_param_sets(models: Dict[str, GhnModel], archs: List[ArchGraph], seed: int,
                     dataset: Optional[ImageDataset] = None,
                     schedule: Optional[FinetuneSchedule] = None) -> Dict[str, List[ParamSet]]:
    """
    Параметры каждой архитектуры: случайные, от каждой модели и, если
    передан набор данных, случайные после дообучения SGD
    """
    inits: Dict[str, List[ParamSet]] = {"random": [random_init(g, seed + i)
                                                   for i, g in enumerate(archs)]}
    if dataset is not None:
        schedule = schedule or FinetuneSchedule()
        inits["sgd"] = [
            sgd_finetune(g, p, dataset, schedule, seed=seed).params
            for g, p in zip(archs, inits["random"])
        ]
        logger.info(f"Fine-tuned {len(archs)} random inits for the sgd baseline")
    with torch.no_grad():
        for name, model in models.items():
            inits[name] = [model.predict_params(g).detached() for g in archs]
    return inits


def _analyze_diversity(app: AppContext, inits: Dict[str, List[ParamSet]]) -> None:
    rows, result = [], {}
    for name, param_sets in inits.items():
        result[name] = {}
        for matching in MatchingMode:
            reports = diversity_by_shape(param_sets, matching)
            result[name][matching.value] = mean_distance(reports)
            rows.extend({"init": name, **r.model_dump(mode="json")} for r in reports)
            click.echo(f"diversity {name} [{matching.value}]: {result[name][matching.value]:.4f}")
    app.recorder.write_json("diversity.json", result)
    app.recorder.write_table("diversity.csv", rows)


def _analyze_variance(app: AppContext, archs: List[ArchGraph],
                      inits: Dict[str, List[ParamSet]], dataset: ImageDataset) -> None:
    images = dataset.val.images[: app.cfg.eval.batch_size]
    summary: Dict[str, Dict[str, float]] = {}
    for i, g in enumerate(archs):
        per_init = {name: param_sets[i] for name, param_sets in inits.items()}
        series = variance_series(g, per_init, images)
        app.recorder.write_plot_data(f"variance_{g.name}", series)
        summary[g.name] = {
            name: statistics.median(values) if values else math.nan
            for name, values in series.items()
        }
        summary[g.name].update({f"{name}_mean_abs": mean_abs_param(p)
                                for name, p in per_init.items()})
    app.recorder.write_json("variance.json", summary)
    click.echo(f"Variance series for {len(archs)} architectures in {app.recorder.path('plots')}")


def _analyze_tau(app: AppContext, reports, init_filter: Optional[str]) -> None:
    tables = []
    for path in reports:
        rows = read_csv(path)
        tables.append({r["arch"]: float(r["accuracy"]) for r in rows
                       if init_filter is None or r["init"] == init_filter})
    archs = sorted(set(tables[0]) & set(tables[1]))
    if len(archs) < 2:
        raise ConfigError(f"reports share only {len(archs)} architectures", path="reports")
    value = kendall_tau([tables[0][a] for a in archs], [tables[1][a] for a in archs])
    app.recorder.write_json("tau.json", {"tau": value, "n": len(archs), "init": init_filter,
                                         "reports": [str(p) for p in reports]})
    click.echo(f"Kendall tau-b = {value:.4f} over {len(archs)} architectures")


def _report_error(e: BaseException, exit_code: int) -> None:
    payload = {"error": type(e).__name__, "message": str(e), "exit_code": exit_code}
    path = getattr(e, "path", None)
    if path:
        payload["path"] = path
    click.echo(json.dumps(payload), err=True)


def run(argv: Optional[List[str]] = None) -> int:
    """Запуск CLI без sys.exit; возвращает код выхода"""
    try:
        cli.main(args=argv, prog_name="ghnforge", standalone_mode=False)
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except click.exceptions.Abort:
        click.echo("Aborted!", err=True)
        return 1
    except GhnForgeError as e:
        logger.error(f"{type(e).__name__}: {e}")
        _report_error(e, e.exit_code)
        return e.exit_code
    except Exception as e:
        logger.error(f"Unexpected failure: {e}", exc_info=True)
        _report_error(e, 1)
        return 1
    return 0


def main() -> None:
    sys.exit(run())
