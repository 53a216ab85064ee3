"""Compiler IR: a DAG of layers with inverted-residual-block annotations."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

from .core import (
    Activation,
    ActivationKind,
    Add,
    AvgPool,
    BatchNormLayer,
    ConvLayer,
    Flatten,
    Layer,
    Linear,
    Tensor,
    execute_layer,
    layer_out_dims,
)
from .errors import GraphError, ShapeError


@dataclass(frozen=True)
class Node:
    node_id: str
    layer: Layer
    input_ids: Tuple[str, ...]


@dataclass(frozen=True)
class BlockAnnotation:
    """One inverted-residual (or plain-conv) block; the unit of masking and merging."""

    block_id: int
    kind: str  # "inverted_residual" | "plain_conv"
    node_ids: Tuple[str, ...]
    expand_ratio: float
    dw_kernel: int
    stride: int
    has_residual: bool
    act_node_ids: Tuple[str, ...]  # exactly 0 or 2 ids; the two share one mask slot


@dataclass(frozen=True)
class LatencyTable:
    entries: Tuple[Tuple[int, float], ...]  # (block_id, latency_ms)

    def as_dict(self) -> Dict[int, float]:
        return dict(self.entries)


@dataclass(frozen=True)
class NetGraph:
    nodes: Tuple[Node, ...]
    input_dims: Tuple[int, int, int, int]
    blocks: Tuple[BlockAnnotation, ...] = ()
    metadata: Dict[str, str] = field(default_factory=dict)

    def node(self, node_id: str) -> Node:
        for n in self.nodes:
            if n.node_id == node_id:
                return n
        raise GraphError(f"no node {node_id!r}")

    @property
    def node_index(self) -> Dict[str, Node]:
        return {n.node_id: n for n in self.nodes}


# The canonical op sequence of an inverted residual block (Add optional at the end).
IRB_PATTERN = (ConvLayer, BatchNormLayer, Activation, ConvLayer, BatchNormLayer,
               Activation, ConvLayer, BatchNormLayer)


def topological_order(graph: NetGraph) -> List[Node]:
    index = {}
    for n in graph.nodes:
        if n.node_id in index:
            raise GraphError(f"duplicate node id {n.node_id!r}")
        index[n.node_id] = n
    for n in graph.nodes:
        for ref in n.input_ids:
            if ref not in index:
                raise GraphError(f"node {n.node_id!r} references unknown input {ref!r}")
    order: List[Node] = []
    state: Dict[str, int] = {}  # 0 visiting, 1 done

    for root in graph.nodes:
        if root.node_id in state:
            continue
        stack = [(root, iter(root.input_ids))]
        state[root.node_id] = 0
        while stack:
            node, it = stack[-1]
            advanced = False
            for ref in it:
                if state.get(ref) == 0:
                    raise GraphError(f"cycle involving node {ref!r}")
                if ref not in state:
                    state[ref] = 0
                    stack.append((index[ref], iter(index[ref].input_ids)))
                    advanced = True
                    break
            if not advanced:
                stack.pop()
                state[node.node_id] = 1
                order.append(node)
    return order


def graph_sink(graph: NetGraph) -> Node:
    consumed = {ref for n in graph.nodes for ref in n.input_ids}
    sinks = [n for n in graph.nodes if n.node_id not in consumed]
    if len(sinks) != 1:
        raise GraphError(f"graph must have exactly one sink, found {len(sinks)}")
    return sinks[0]


def _check_block(graph: NetGraph, block: BlockAnnotation, index: Dict[str, Node],
                 consumers: Dict[str, List[str]], nested_ids: set) -> None:
    bid = block.block_id
    members = set(block.node_ids)
    if not block.node_ids:
        raise GraphError(f"block {bid}: empty node list")
    for nid in block.node_ids:
        if nid not in index:
            raise GraphError(f"block {bid}: unknown node {nid!r}")
    chain = [nid for nid in block.node_ids if not isinstance(index[nid].layer, Add)]
    add_ids = [nid for nid in block.node_ids if isinstance(index[nid].layer, Add)]
    if len(add_ids) > 1:
        raise GraphError(f"block {bid}: more than one Add node")
    # single-entry single-exit chain
    for prev, cur in zip(chain, chain[1:]):
        node = index[cur]
        if tuple(node.input_ids) != (prev,):
            raise GraphError(f"block {bid}: {cur!r} does not chain from {prev!r}")
    entry = index[chain[0]]
    entry_inputs = [i for i in entry.input_ids if i not in members]
    if len(entry.input_ids) > 1:
        raise GraphError(f"block {bid}: entry {entry.node_id!r} has multiple inputs")
    interior = chain[:-1] if not add_ids else chain
    for nid in interior:
        outside = [c for c in consumers.get(nid, []) if c not in members]
        if outside and nid != chain[-1]:
            raise GraphError(
                f"block {bid}: interior node {nid!r} consumed outside the block"
            )
    if add_ids:
        add_node = index[add_ids[0]]
        src = entry_inputs[0] if entry_inputs else None
        expected = {chain[-1], src}
        if set(add_node.input_ids) != expected:
            raise GraphError(
                f"block {bid}: Add must join block entry input and chain exit"
            )
        if not block.has_residual:
            raise GraphError(f"block {bid}: Add present but has_residual is false")
    elif block.has_residual:
        raise GraphError(f"block {bid}: has_residual set but no Add node")
    if len(block.act_node_ids) not in (0, 2):
        raise GraphError(f"block {bid}: act_node_ids must have 0 or 2 entries")
    for aid in block.act_node_ids:
        if aid not in members or not isinstance(index[aid].layer, Activation):
            raise GraphError(f"block {bid}: {aid!r} is not an activation in the block")
    if block.kind == "inverted_residual" and not (members & nested_ids):
        layers = tuple(type(index[nid].layer) for nid in chain)
        if layers != IRB_PATTERN:
            raise GraphError(
                f"block {bid}: node sequence does not match PW-BN-Act-DW-BN-Act-PW-BN"
            )
        pw1, dw, pw2 = (index[chain[i]].layer for i in (0, 3, 6))
        if block.has_residual and (block.stride != 1 or pw1.c_in != pw2.c_out):
            raise GraphError(
                f"block {bid}: residual requires stride 1 and equal in/out channels"
            )


def validate_graph(graph: NetGraph) -> Dict[str, tuple]:
    """Check all invariants and return node_id -> output dims."""
    if not graph.nodes:
        raise GraphError("empty graph")
    order = topological_order(graph)
    graph_sink(graph)
    index = graph.node_index
    consumers: Dict[str, List[str]] = {}
    for n in graph.nodes:
        for ref in n.input_ids:
            consumers.setdefault(ref, []).append(n.node_id)

    shapes: Dict[str, tuple] = {}
    for node in order:
        in_dims = [shapes[ref] if ref in shapes else graph.input_dims
                   for ref in node.input_ids]
        if not node.input_ids:
            in_dims = [graph.input_dims]
        try:
            if isinstance(node.layer, Add):
                a, b = in_dims
                if a != b:
                    raise ShapeError(f"Add inputs differ: {a} vs {b}")
                shapes[node.node_id] = a
            else:
                (dims,) = in_dims
                shapes[node.node_id] = layer_out_dims(node.layer, dims)
        except ShapeError as exc:
            raise GraphError(f"shape conflict at node {node.node_id!r}: {exc}") from exc

    # block_ids must be 0..B-1 in network (topological) order
    position = {n.node_id: i for i, n in enumerate(order)}
    # ties (a nested block sharing its entry with the containing block) rank
    # the containing block first
    expected_order = sorted(
        graph.blocks, key=lambda b: (position[b.node_ids[0]], -len(b.node_ids)))
    for want, block in zip(range(len(graph.blocks)), expected_order):
        if block.block_id != want:
            raise GraphError(
                f"blocks out of order: block at network position {want} "
                f"has block_id {block.block_id}; re-index blocks in network order"
            )
    nested_ids = set()
    for a in graph.blocks:
        for b in graph.blocks:
            if a is not b and set(a.node_ids) < set(b.node_ids):
                nested_ids.update(a.node_ids)
    for block in graph.blocks:
        _check_block(graph, block, index, consumers, nested_ids)
    return shapes


def execute_graph(graph: NetGraph, x: Tensor) -> Tensor:
    """Evaluate the graph in topological order; nodes with no inputs read the graph input."""
    if x.dims[1:] != tuple(graph.input_dims)[1:]:
        raise ShapeError(
            f"input dims {x.dims} incompatible with graph input {graph.input_dims}"
        )
    order = topological_order(graph)
    graph_sink(graph)
    values: Dict[str, Tensor] = {}
    for node in order:
        ins = [values[ref] for ref in node.input_ids] if node.input_ids else [x]
        values[node.node_id] = execute_layer(node.layer, *ins)
    return values[graph_sink(graph).node_id]


def apply_mask_vector(graph: NetGraph, mask) -> NetGraph:
    """Replace both activations of every mask-0 block with Identity."""
    mask = list(mask)
    if len(mask) != len(graph.blocks):
        raise GraphError(
            f"mask length {len(mask)} != block count {len(graph.blocks)}"
        )
    off = set()
    for block, bit in zip(sorted(graph.blocks, key=lambda b: b.block_id), mask):
        if bit not in (0, 1):
            raise GraphError(f"mask entries must be 0/1, got {bit!r}")
        if bit == 0:
            off.update(block.act_node_ids)
    nodes = tuple(
        replace(n, layer=Activation(ActivationKind.IDENTITY)) if n.node_id in off else n
        for n in graph.nodes
    )
    return replace(graph, nodes=nodes)
