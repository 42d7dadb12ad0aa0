"""
Промежуточное представление архитектуры: граф операций, структурные признаки, JSON
"""
import hashlib
import json
import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple, Union

import networkx as nx
import numpy as np
from pydantic import BaseModel, ConfigDict, PrivateAttr

from .errors import CycleError, DanglingNode, GraphError, ShapeMismatch
from .models import DEFAULT_MAX_DIST, BnRole, OpKind

logger = logging.getLogger(__name__)

_SINGLE_INPUT_OPS = frozenset(set(OpKind) - {OpKind.ADD, OpKind.CONCAT, OpKind.INPUT})


class NodeAttrs(BaseModel):
    """Статические атрибуты узла"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    channels: Optional[int] = None
    kernel: Optional[int] = None
    stride: Optional[int] = None
    bn_role: Optional[BnRole] = None


class ArchNode(BaseModel):
    """Узел графа: операция и форма слота параметров"""
    model_config = ConfigDict(frozen=True)

    id: int
    op: OpKind
    shape: Optional[Tuple[int, ...]] = None
    attrs: NodeAttrs = NodeAttrs()


class ArchGraph(BaseModel):
    """Вычислительный граф целевой сети в топологическом порядке"""
    model_config = ConfigDict(frozen=True)

    name: str
    nodes: Tuple[ArchNode, ...]
    edges: Tuple[Tuple[int, int], ...]

    _preds: List[List[int]] = PrivateAttr(default_factory=list)
    _succs: List[List[int]] = PrivateAttr(default_factory=list)

    def model_post_init(self, __context: Any) -> None:
        preds: List[List[int]] = [[] for _ in self.nodes]
        succs: List[List[int]] = [[] for _ in self.nodes]
        for src, dst in self.edges:
            preds[dst].append(src)
            succs[src].append(dst)
        self._preds = [sorted(p) for p in preds]
        self._succs = [sorted(s) for s in succs]

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def predecessors(self, node_id: int) -> List[int]:
        return self._preds[node_id]

    def successors(self, node_id: int) -> List[int]:
        return self._succs[node_id]

    @property
    def parametric_nodes(self) -> List[ArchNode]:
        return [n for n in self.nodes if n.op.is_parametric]

    @property
    def head(self) -> ArchNode:
        return next(n for n in self.nodes if n.op == OpKind.CLASSIFIER_HEAD)

    @property
    def num_classes(self) -> int:
        return self.head.shape[0]

    @property
    def num_params(self) -> int:
        return int(sum(int(np.prod(n.shape)) for n in self.parametric_nodes))

    def to_networkx(self) -> nx.DiGraph:
        graph = nx.DiGraph()
        graph.add_nodes_from(range(self.num_nodes))
        graph.add_edges_from(self.edges)
        return graph

    def to_dict(self) -> Dict[str, Any]:
        """Словарь в формате JSON-схемы графа"""
        nodes = []
        for node in self.nodes:
            item: Dict[str, Any] = {"id": node.id, "op": node.op.value}
            if node.shape is not None:
                item["shape"] = list(node.shape)
            attrs = node.attrs.model_dump(mode="json", exclude_none=True)
            if attrs:
                item["attrs"] = attrs
            nodes.append(item)
        return {"name": self.name, "nodes": nodes, "edges": [list(e) for e in self.edges]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def with_num_classes(self, num_classes: int) -> "ArchGraph":
        """Копия графа с другим числом классов классификатора"""
        spec = self.to_dict()
        for item in spec["nodes"]:
            if item["op"] == OpKind.CLASSIFIER_HEAD.value:
                item["attrs"]["channels"] = num_classes
                item.pop("shape", None)
        return build_graph(spec)


@dataclass(frozen=True)
class GraphFeatures:
    """Предвычисленные структурные признаки графа"""
    in_degree: np.ndarray
    out_degree: np.ndarray
    spd_fw: np.ndarray
    spd_bw: np.ndarray
    input_dist: np.ndarray
    max_dist: int

    @property
    def unreachable(self) -> int:
        return self.max_dist + 1

    @property
    def num_nodes(self) -> int:
        return len(self.in_degree)

    def permuted(self, perm: np.ndarray) -> "GraphFeatures":
        """Признаки после переименования узлов: новый узел i соответствует старому perm[i]"""
        perm = np.asarray(perm)
        grid = np.ix_(perm, perm)
        return GraphFeatures(
            in_degree=self.in_degree[perm],
            out_degree=self.out_degree[perm],
            spd_fw=self.spd_fw[grid],
            spd_bw=self.spd_bw[grid],
            input_dist=self.input_dist[perm],
            max_dist=self.max_dist,
        )


@dataclass
class _Flow:
    """Состояние тензора на выходе узла при выводе форм"""
    channels: int
    stride: int
    vector: bool


def _attrs_of(raw: Dict[str, Any]) -> NodeAttrs:
    try:
        return NodeAttrs(**(raw.get("attrs") or {}))
    except Exception as e:
        raise GraphError(f"Invalid attrs for node {raw.get('id')}: {e}") from e


def build_graph(spec: Union[Dict[str, Any], str]) -> ArchGraph:
    """
    Строит и проверяет граф по описанию {name, nodes, edges}.
    Узлы нумеруются топологически, ничьи разрешаются порядком вставки.
    """
    if isinstance(spec, str):
        spec = json.loads(spec)
    name = str(spec.get("name", "arch"))
    raw_nodes = list(spec.get("nodes", []))
    raw_edges = [tuple(e) for e in spec.get("edges", [])]

    order_of: Dict[Any, int] = {}
    for pos, raw in enumerate(raw_nodes):
        if raw["id"] in order_of:
            raise GraphError(f"Duplicate node id {raw['id']!r} in {name}")
        order_of[raw["id"]] = pos

    graph = nx.DiGraph()
    graph.add_nodes_from(order_of)
    for src, dst in raw_edges:
        if src not in order_of or dst not in order_of:
            raise GraphError(f"Edge ({src!r}, {dst!r}) references an unknown node in {name}")
        if graph.has_edge(src, dst):
            raise GraphError(f"Duplicate edge ({src!r}, {dst!r}) in {name}")
        graph.add_edge(src, dst)

    if not nx.is_directed_acyclic_graph(graph):
        cycle = nx.find_cycle(graph)
        raise CycleError(f"Graph {name} contains a cycle: {cycle}")

    ops = {raw["id"]: OpKind(raw["op"]) for raw in raw_nodes}
    inputs = [n for n, op in ops.items() if op == OpKind.INPUT]
    heads = [n for n, op in ops.items() if op == OpKind.CLASSIFIER_HEAD]
    if len(inputs) != 1 or len(heads) != 1:
        raise GraphError(
            f"Graph {name} needs exactly one input and one classifier_head, "
            f"got {len(inputs)} and {len(heads)}"
        )
    source, sink = inputs[0], heads[0]
    if graph.in_degree(source) or graph.out_degree(sink):
        raise GraphError(f"Graph {name}: input must be a source and classifier_head the sink")

    reachable = nx.descendants(graph, source) | {source}
    reaching = nx.ancestors(graph, sink) | {sink}
    dangling = [n for n in order_of if n not in reachable or n not in reaching]
    if dangling:
        raise DanglingNode(f"Graph {name} has dangling nodes: {dangling}")

    order = list(nx.lexicographical_topological_sort(graph, key=lambda n: order_of[n]))
    new_id = {old: i for i, old in enumerate(order)}
    raw_by_id = {raw["id"]: raw for raw in raw_nodes}

    flows: List[_Flow] = []
    nodes: List[ArchNode] = []
    for old in order:
        raw = raw_by_id[old]
        op = ops[old]
        preds = sorted(new_id[p] for p in graph.predecessors(old))
        attrs = _attrs_of(raw)
        flow, shape, attrs = _infer_node(name, new_id[old], op, attrs, [flows[p] for p in preds])
        given = raw.get("shape")
        if given is not None and shape is not None and tuple(given) != shape:
            raise ShapeMismatch(
                f"Graph {name}: node {old!r} declares shape {tuple(given)}, inferred {shape}"
            )
        flows.append(flow)
        nodes.append(ArchNode(id=new_id[old], op=op, shape=shape, attrs=attrs))

    edges = tuple(sorted((new_id[s], new_id[d]) for s, d in graph.edges))
    return ArchGraph(name=name, nodes=tuple(nodes), edges=edges)


def _infer_node(
    name: str, node_id: int, op: OpKind, attrs: NodeAttrs, inputs: List[_Flow]
) -> Tuple[_Flow, Optional[Tuple[int, ...]], NodeAttrs]:
    """Вывод формы параметров и выходного тензора узла"""
    where = f"Graph {name}, node {node_id} ({op.value})"

    if op == OpKind.INPUT:
        channels = attrs.channels or 3
        return _Flow(channels, 1, False), None, NodeAttrs(channels=channels)

    if op in _SINGLE_INPUT_OPS and len(inputs) != 1:
        raise ShapeMismatch(f"{where}: expects exactly one input, got {len(inputs)}")
    if op in (OpKind.ADD, OpKind.CONCAT):
        if len(inputs) < 2:
            raise ShapeMismatch(f"{where}: join needs at least two inputs, got {len(inputs)}")
        if len({(f.stride, f.vector) for f in inputs}) != 1:
            raise ShapeMismatch(f"{where}: joined tensors have different spatial sizes")
        first = inputs[0]
        if op == OpKind.ADD:
            channels = {f.channels for f in inputs}
            if len(channels) != 1:
                raise ShapeMismatch(f"{where}: add of tensors with channels {sorted(channels)}")
            return _Flow(first.channels, first.stride, first.vector), None, NodeAttrs()
        total = sum(f.channels for f in inputs)
        return _Flow(total, first.stride, first.vector), None, NodeAttrs()

    inp = inputs[0]
    if op == OpKind.CONV2D:
        if inp.vector:
            raise ShapeMismatch(f"{where}: convolution over a pooled vector")
        kernel = attrs.kernel or 3
        stride = attrs.stride or 1
        if not attrs.channels:
            raise ShapeMismatch(f"{where}: output channels are required")
        if kernel % 2 == 0:
            raise ShapeMismatch(f"{where}: kernel size must be odd, got {kernel}")
        shape = (attrs.channels, inp.channels, kernel, kernel)
        return (
            _Flow(attrs.channels, inp.stride * stride, False),
            shape,
            NodeAttrs(channels=attrs.channels, kernel=kernel, stride=stride),
        )

    if op in (OpKind.LINEAR, OpKind.CLASSIFIER_HEAD):
        if not inp.vector:
            raise ShapeMismatch(f"{where}: needs a pooled vector input")
        if not attrs.channels:
            raise ShapeMismatch(f"{where}: output features are required")
        shape = (attrs.channels, inp.channels)
        return _Flow(attrs.channels, inp.stride, True), shape, NodeAttrs(channels=attrs.channels)

    if op == OpKind.BATCHNORM:
        role = attrs.bn_role or BnRole.SCALE
        return _Flow(inp.channels, inp.stride, inp.vector), (inp.channels,), NodeAttrs(bn_role=role)

    if op in (OpKind.MAXPOOL, OpKind.AVGPOOL):
        if inp.vector:
            raise ShapeMismatch(f"{where}: pooling over a pooled vector")
        kernel = attrs.kernel or 3
        stride = attrs.stride or 2
        if kernel % 2 == 0:
            raise ShapeMismatch(f"{where}: kernel size must be odd, got {kernel}")
        return (
            _Flow(inp.channels, inp.stride * stride, False),
            None,
            NodeAttrs(kernel=kernel, stride=stride),
        )

    if op == OpKind.GLOBAL_AVG_POOL:
        if inp.vector:
            raise ShapeMismatch(f"{where}: input is already pooled")
        return _Flow(inp.channels, inp.stride, True), None, NodeAttrs()

    # активации
    return _Flow(inp.channels, inp.stride, inp.vector), None, NodeAttrs()


def parse_graph(text: str) -> ArchGraph:
    return build_graph(json.loads(text))


def graph_hash(g: ArchGraph) -> str:
    return hashlib.sha256(g.to_json().encode("utf-8")).hexdigest()


def _bfs_lengths(g: ArchGraph) -> List[Dict[int, int]]:
    graph = g.to_networkx()
    return [nx.single_source_shortest_path_length(graph, i) for i in range(g.num_nodes)]


def compute_features(g: ArchGraph, max_dist: int = DEFAULT_MAX_DIST) -> GraphFeatures:
    """Степени узлов и ограниченные кратчайшие пути вперёд/назад"""
    if max_dist < 1:
        raise ValueError(f"max_dist must be >= 1, got {max_dist}")
    n = g.num_nodes
    unreachable = max_dist + 1
    spd_fw = np.full((n, n), unreachable, dtype=np.int64)
    for i, lengths in enumerate(_bfs_lengths(g)):
        for j, dist in lengths.items():
            spd_fw[i, j] = min(dist, max_dist)

    in_degree = np.zeros(n, dtype=np.int64)
    out_degree = np.zeros(n, dtype=np.int64)
    for src, dst in g.edges:
        out_degree[src] += 1
        in_degree[dst] += 1

    return GraphFeatures(
        in_degree=in_degree,
        out_degree=out_degree,
        spd_fw=spd_fw,
        spd_bw=spd_fw.T.copy(),
        input_dist=spd_fw[0].copy(),
        max_dist=max_dist,
    )


def graph_stats(g: ArchGraph) -> Dict[str, float]:
    """Число параметров, узлов, средняя степень и средняя длина пути"""
    lengths = [
        dist
        for i, row in enumerate(_bfs_lengths(g))
        for j, dist in row.items()
        if i != j
    ]
    return {
        "params": float(g.num_params),
        "nodes": float(g.num_nodes),
        "degree": 2.0 * len(g.edges) / g.num_nodes,
        "path_length": float(np.mean(lengths)) if lengths else 0.0,
    }
