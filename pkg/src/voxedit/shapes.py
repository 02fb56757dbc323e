"""Procedural CSG shapes rasterised to binary occupancy grids.

A shape is a tree of :class:`ShapeSpec` nodes. A node's occupancy is its own
primitive, then each child is folded in order with the child's ``op``
(``union`` adds, ``difference`` carves). The root's ``op`` is ignored.

Primitive parameters, all in normalised ``[0, 1]`` grid coordinates:

* ``sphere``   -- ``size[0]`` is the radius.
* ``box``      -- ``size`` holds the three half extents.
* ``cylinder`` -- axis parallel to the depth axis; ``size[0]`` is the radius,
  ``size[2]`` the half length (``size[1]`` is unused).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .latent import voxel_centers

KINDS = ("sphere", "box", "cylinder")
OPS = ("union", "difference")


@dataclass
class ShapeSpec:
    kind: str
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    op: str = "union"
    children: list["ShapeSpec"] = field(default_factory=list)
    color: tuple[float, float, float] = (0.8, 0.8, 0.8)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if self.op not in OPS:
            raise ValueError(f"unknown boolean op {self.op!r}")
        self.center = tuple(float(c) for c in self.center)
        self.size = tuple(float(s) for s in self.size)
        self.color = tuple(float(c) for c in self.color)
        if len(self.center) != 3 or len(self.size) != 3 or len(self.color) != 3:
            raise ValueError("center, size and color must be 3-vectors")
        for v in (*self.center, *self.size):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"shape parameter {v} outside [0, 1]")

    def walk(self):
        """Pre-order traversal."""
        yield self
        for child in self.children:
            yield from child.walk()


def primitive_inside(spec: ShapeSpec, points: np.ndarray) -> np.ndarray:
    d = points - np.asarray(spec.center)
    if spec.kind == "sphere":
        return np.sum(d * d, axis=-1) <= spec.size[0] ** 2
    if spec.kind == "box":
        return np.all(np.abs(d) <= np.asarray(spec.size), axis=-1)
    radial = d[..., 0] ** 2 + d[..., 1] ** 2
    return (radial <= spec.size[0] ** 2) & (np.abs(d[..., 2]) <= spec.size[2])


def inside(spec: ShapeSpec, points: np.ndarray) -> np.ndarray:
    """CSG predicate evaluated at an array of points ``(..., 3)``."""
    occ = primitive_inside(spec, points)
    for child in spec.children:
        sub = inside(child, points)
        occ = occ | sub if child.op == "union" else occ & ~sub
    return occ


def rasterize(spec: ShapeSpec | None, R: int) -> np.ndarray:
    """Binary occupancy grid: a voxel is set iff its centre is inside."""
    if R < 4:
        raise ValueError(f"resolution must be at least 4, got {R}")
    if spec is None:
        raise ValueError("empty shape tree")
    return inside(spec, voxel_centers(R)).astype(np.float64)


def color_field(spec: ShapeSpec, points: np.ndarray) -> np.ndarray:
    """Albedo at each point: colour of the last union part containing it.

    Points outside the shape get zeros.
    """
    out = np.zeros(points.shape[:-1] + (3,))

    def paint(node: ShapeSpec, region: np.ndarray):
        own = primitive_inside(node, points) & region
        out[own] = node.color
        for child in node.children:
            if child.op == "union":
                paint(child, region)

    paint(spec, np.ones(points.shape[:-1], dtype=bool))
    out[~inside(spec, points)] = 0.0
    return out


def _fmt(v) -> str:
    return " ".join(repr(float(x)) for x in v)


def dumps(spec: ShapeSpec) -> str:
    """Serialise a tree as pre-order ``key=value`` blocks separated by blank lines."""
    blocks = []
    for node in spec.walk():
        blocks.append(
            "\n".join(
                [
                    f"kind={node.kind}",
                    f"center={_fmt(node.center)}",
                    f"size={_fmt(node.size)}",
                    f"op={node.op}",
                    f"color={_fmt(node.color)}",
                    f"children={len(node.children)}",
                ]
            )
        )
    return "\n\n".join(blocks) + "\n"


def loads(text: str) -> ShapeSpec:
    records = []
    for block in text.strip().split("\n\n"):
        rec = {}
        for line in block.strip().splitlines():
            key, _, value = line.partition("=")
            rec[key.strip()] = value.strip()
        records.append(rec)
    if not records or not records[0]:
        raise ValueError("empty shape tree")
    pos = 0

    def build() -> ShapeSpec:
        nonlocal pos
        rec = records[pos]
        pos += 1
        vec = lambda s: tuple(float(x) for x in s.split())  # noqa: E731
        node = ShapeSpec(
            kind=rec["kind"],
            center=vec(rec["center"]),
            size=vec(rec["size"]),
            op=rec.get("op", "union"),
            color=vec(rec["color"]) if "color" in rec else (0.8, 0.8, 0.8),
        )
        for _ in range(int(rec.get("children", "0"))):
            node.children.append(build())
        return node

    root = build()
    if pos != len(records):
        raise ValueError("trailing records after shape tree")
    return root
