"""
Менеджер для регистрации и запуска протоколов оценки
"""
import importlib
import logging
import pkgutil
from typing import Dict, List, Optional, Type

from .archgraph import ArchGraph
from .base_protocol import BaseProtocol
from .models import EvalReport
from .run_recorder import RunRecorder

logger = logging.getLogger(__name__)


def discover_protocol_classes(package: str = "ghnforge.protocols") -> Dict[str, Type[BaseProtocol]]:
    """Находит наследников BaseProtocol в модулях пакета по ключу cls.key"""
    found: Dict[str, Type[BaseProtocol]] = {}
    module = importlib.import_module(package)
    for _, name, ispkg in pkgutil.iter_modules(module.__path__, module.__name__ + "."):
        if ispkg:
            continue
        submodule = importlib.import_module(name)
        for attr_name in dir(submodule):
            attr = getattr(submodule, attr_name)
            if (isinstance(attr, type) and issubclass(attr, BaseProtocol)
                    and attr is not BaseProtocol and attr.key):
                found[attr.key] = attr
                logger.debug(f"Discovered protocol: {attr.key} ({attr_name})")
    return found


class ProtocolManager:
    """Регистрирует протоколы и пишет их отчёты в каталог запуска"""

    def __init__(self, recorder: Optional[RunRecorder] = None):
        self.protocols: List[BaseProtocol] = []
        self.recorder = recorder

    def register_protocol(self, protocol: BaseProtocol) -> None:
        self.protocols.append(protocol)
        logger.debug(f"Registered protocol: {protocol.name}")

    def register_protocol_class(self, protocol_class: Type[BaseProtocol], **kwargs) -> None:
        self.register_protocol(protocol_class(**kwargs))

    def run(self, archs: List[ArchGraph],
            protocol_keys: Optional[List[str]] = None) -> Dict[str, EvalReport]:
        """Запускает протоколы по очереди; сбой протокола не останавливает остальные"""
        reports: Dict[str, EvalReport] = {}
        for protocol in self._filter_protocols(protocol_keys):
            key = protocol.key or protocol.name
            try:
                report = protocol.run(archs)
            except Exception as e:
                logger.error(f"Protocol {protocol.name} failed: {e}", exc_info=True)
                report = EvalReport(protocol=key, errors=[f"{type(e).__name__}: {e}"])
            reports[key] = report
            if self.recorder is not None:
                self.recorder.write_report(report)
            for init, agg in report.summary().items():
                logger.info(
                    f"{key} [{init}]: mean {agg['mean']:.2f} ± {agg['std']:.2f} "
                    f"over {agg['n']} archs, top-{report.top_k} {agg['top_mean']:.2f}"
                )
        return reports

    def get_protocol_info(self) -> List[Dict]:
        return [
            {"key": p.key, "name": p.name, "description": p.description}
            for p in self.protocols
        ]

    def _filter_protocols(self, protocol_keys: Optional[List[str]]) -> List[BaseProtocol]:
        if not protocol_keys:
            return list(self.protocols)
        return [p for p in self.protocols if p.key in protocol_keys]
