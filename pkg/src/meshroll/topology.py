"""Node layouts: the lamppost chain generator, a small lab layout, and the
line-oriented topology file format."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .engine import stream

SPAN_M = 7200.0


class Role(str, Enum):
    SOURCE = "source"
    CONSUMER = "consumer"


class Side(str, Enum):
    EAST = "east"
    WEST = "west"
    BOTH = "both"


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class NodeSpec:
    id: int
    x: float
    y: float
    role: Role = Role.CONSUMER
    indoor: bool = False

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass
class Topology:
    nodes: list[NodeSpec]
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        validate(self.nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def source(self) -> NodeSpec:
        return next(n for n in self.nodes if n.role is Role.SOURCE)

    @property
    def consumers(self) -> list[NodeSpec]:
        return [n for n in self.nodes if n.role is Role.CONSUMER and not n.indoor]

    def side_of(self, node: NodeSpec | int) -> Side:
        if isinstance(node, int):
            node = self.nodes[node]
        return Side.EAST if node.x > self.source.x else Side.WEST

    def positions(self) -> np.ndarray:
        return np.array([[n.x, n.y] for n in self.nodes], dtype=float)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Topology) and self.nodes == other.nodes


def validate(nodes: list[NodeSpec]) -> None:
    ids = [n.id for n in nodes]
    if len(set(ids)) != len(ids):
        raise TopologyError("duplicate node id")
    if sorted(ids) != list(range(len(ids))):
        raise TopologyError("node ids must be dense in [0, N)")
    sources = sum(1 for n in nodes if n.role is Role.SOURCE)
    if sources == 0:
        raise TopologyError("no source node")
    if sources > 1:
        raise TopologyError("multiple source nodes")
    for n in nodes:
        if not (math.isfinite(n.x) and math.isfinite(n.y)):
            raise TopologyError(f"node {n.id} has a non-finite position")


def generate_umbrella(
    n_east: int = 75,
    n_west: int = 74,
    spacing_east: float = 87.0,
    spacing_west: float = 94.0,
    jitter: float = 5.0,
    seed: int = 0,
    rng: np.random.Generator | None = None,
    name: str = "umbrella-spacing",
) -> Topology:
    """Lamppost chain with the source at the origin.

    East node ``k`` sits at ``x = k * spacing_east`` and west node ``k`` at
    ``x = -k * spacing_west``, both displaced by ``U(-jitter, jitter)`` on each
    axis. Ids: source 0, then east outward, then west outward.
    """
    if n_east < 0 or n_west < 0:
        raise ValueError("node counts must be non-negative")
    if spacing_east <= 0 or spacing_west <= 0:
        raise ValueError("spacings must be positive")
    if jitter < 0:
        raise ValueError("jitter must be non-negative")
    if rng is None:
        rng = stream(seed, "topology")

    def jit() -> float:
        return float(rng.uniform(-jitter, jitter)) if jitter > 0 else 0.0

    nodes = [NodeSpec(0, 0.0, 0.0, Role.SOURCE)]
    for k in range(1, n_east + 1):
        nodes.append(NodeSpec(len(nodes), k * spacing_east + jit(), jit()))
    for k in range(1, n_west + 1):
        nodes.append(NodeSpec(len(nodes), -k * spacing_west + jit(), jit()))
    params = dict(
        n_east=n_east,
        n_west=n_west,
        spacing_east=spacing_east,
        spacing_west=spacing_west,
        jitter=jitter,
        seed=seed,
    )
    return Topology(nodes, name=name, params=params)


def scale_to_span(topo: Topology, span: float = SPAN_M) -> Topology:
    xs = [n.x for n in topo.nodes]
    width = max(xs) - min(xs)
    if width <= 0:
        return topo
    f = span / width
    nodes = [NodeSpec(n.id, n.x * f, n.y * f, n.role, n.indoor) for n in topo.nodes]
    return Topology(nodes, name=topo.name, params={**topo.params, "span": span})


def lab_square(size: float = 10.0) -> Topology:
    nodes = [
        NodeSpec(0, 0.0, 0.0, Role.SOURCE),
        NodeSpec(1, size, 0.0),
        NodeSpec(2, size, size),
        NodeSpec(3, 0.0, size),
    ]
    return Topology(nodes, name="lab4", params={"size": size})


def chain(n: int, spacing: float) -> Topology:
    """Straight line: source at x=0 then ``n - 1`` consumers eastwards."""
    nodes = [NodeSpec(0, 0.0, 0.0, Role.SOURCE)]
    nodes += [NodeSpec(k, k * spacing, 0.0) for k in range(1, n)]
    return Topology(nodes, name="chain", params={"n": n, "spacing": spacing})


PRESETS = ("umbrella-spacing", "umbrella-span", "umbrella-east", "umbrella-west", "lab4")


def preset(name: str, seed: int = 0, **overrides) -> Topology:
    if name == "lab4":
        return lab_square(**overrides)
    if name in ("umbrella-spacing", "umbrella-east", "umbrella-west"):
        topo = generate_umbrella(seed=seed, **overrides)
        if name == "umbrella-east":
            return side_filter(topo, Side.EAST)
        if name == "umbrella-west":
            return side_filter(topo, Side.WEST)
        return topo
    if name == "umbrella-span":
        topo = generate_umbrella(seed=seed, name="umbrella-span", **overrides)
        return scale_to_span(topo)
    raise TopologyError(f"unknown topology preset {name!r}")


def side_filter(topo: Topology, side: Side | str) -> Topology:
    """Keep the source plus one side's consumers; ids are renumbered densely
    in their original order."""
    side = Side(side)
    if side is Side.BOTH:
        return topo
    keep = [
        n for n in topo.nodes if n.role is Role.SOURCE or topo.side_of(n) is side
    ]
    nodes = [NodeSpec(i, n.x, n.y, n.role, n.indoor) for i, n in enumerate(keep)]
    params = {**topo.params, "side": side.value, "parent_ids": [n.id for n in keep]}
    return Topology(nodes, name=f"{topo.name}/{side.value}", params=params)


# -- file format -------------------------------------------------------------

def dumps(topo: Topology) -> str:
    lines = [f"# topology {topo.name}"]
    for key, value in topo.params.items():
        if key == "parent_ids":
            continue
        lines.append(f"# {key}={value}")
    lines.append("# id,x_m,y_m,role,indoor")
    for n in topo.nodes:
        lines.append(f"{n.id},{n.x!r},{n.y!r},{n.role.value},{int(n.indoor)}")
    return "\n".join(lines) + "\n"


def save_topology(topo: Topology, path: str | Path) -> None:
    Path(path).write_text(dumps(topo), encoding="utf-8")


def loads(text: str, name: str = "file") -> Topology:
    nodes: list[NodeSpec] = []
    seen: set[int] = set()
    sources = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            if raw.startswith("# topology "):
                name = raw[len("# topology ") :].strip()
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 5:
            raise TopologyError(f"line {lineno}: expected 5 fields, got {len(parts)}")
        try:
            nid = int(parts[0])
            x, y = float(parts[1]), float(parts[2])
            role = Role(parts[3].lower())
            indoor = parts[4].lower() in ("1", "true", "yes")
            if parts[4].lower() not in ("0", "1", "true", "false", "yes", "no"):
                raise ValueError(f"bad indoor flag {parts[4]!r}")
        except ValueError as exc:
            raise TopologyError(f"line {lineno}: malformed row ({exc})") from None
        if nid in seen:
            raise TopologyError(f"line {lineno}: duplicate id {nid}")
        if role is Role.SOURCE:
            sources += 1
            if sources > 1:
                raise TopologyError(f"line {lineno}: multiple source nodes")
        seen.add(nid)
        nodes.append(NodeSpec(nid, x, y, role, indoor))
    nodes.sort(key=lambda n: n.id)
    return Topology(nodes, name=name)


def load_topology(path: str | Path) -> Topology:
    path = Path(path)
    return loads(path.read_text(encoding="utf-8"), name=path.stem)
