"""Procedural edit cases: a source shape, a local edit and its region mask."""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import shapes
from .latent import voxel_centers
from .shapes import ShapeSpec

EDIT_KINDS = ("add-bump", "carve-hole", "resize-part")

PALETTE = (
    (0.85, 0.35, 0.25),
    (0.25, 0.55, 0.85),
    (0.35, 0.75, 0.35),
    (0.90, 0.80, 0.30),
    (0.60, 0.40, 0.75),
    (0.30, 0.75, 0.75),
    (0.95, 0.55, 0.20),
    (0.55, 0.55, 0.55),
)


@dataclass
class EditCase:
    case_id: str
    kind: str
    source: ShapeSpec
    target: ShapeSpec
    mask_lo: tuple[float, float, float]
    mask_hi: tuple[float, float, float]
    seed: int

    def mask(self, R: int) -> np.ndarray:
        """Mesh-space edit region rasterised at ``R``."""
        p = voxel_centers(R)
        inside = np.all((p >= np.asarray(self.mask_lo)) & (p <= np.asarray(self.mask_hi)), axis=-1)
        return inside.astype(np.float64)

    def dumps(self) -> str:
        head = "\n".join(
            [
                f"case_id={self.case_id}",
                f"kind={self.kind}",
                f"seed={self.seed}",
                "mask_lo=" + " ".join(repr(float(v)) for v in self.mask_lo),
                "mask_hi=" + " ".join(repr(float(v)) for v in self.mask_hi),
            ]
        )
        return f"{head}\n\n[source]\n{shapes.dumps(self.source)}\n[target]\n{shapes.dumps(self.target)}"

    @classmethod
    def loads(cls, text: str) -> "EditCase":
        head, _, rest = text.partition("\n\n[source]\n")
        src_text, _, tgt_text = rest.partition("\n[target]\n")
        meta = dict(line.split("=", 1) for line in head.strip().splitlines())
        vec = lambda s: tuple(float(v) for v in s.split())  # noqa: E731
        return cls(
            case_id=meta["case_id"],
            kind=meta["kind"],
            source=shapes.loads(src_text),
            target=shapes.loads(tgt_text),
            mask_lo=vec(meta["mask_lo"]),
            mask_hi=vec(meta["mask_hi"]),
            seed=int(meta["seed"]),
        )


def _bounds(spec: ShapeSpec) -> tuple[np.ndarray, np.ndarray]:
    c = np.asarray(spec.center)
    s = np.asarray(spec.size)
    if spec.kind == "sphere":
        half = np.full(3, s[0])
    elif spec.kind == "box":
        half = s
    else:
        half = np.array([s[0], s[0], s[2]])
    return c - half, c + half


def _colors(rng, n):
    idx = rng.permutation(len(PALETTE))[:n]
    return [PALETTE[i] for i in idx]


def _random_source(rng) -> ShapeSpec:
    base_color, part_color, _ = _colors(rng, 3)
    kind = rng.choice(["box", "sphere", "cylinder"])
    c = 0.5 + rng.uniform(-0.04, 0.04, 3)
    if kind == "box":
        size = rng.uniform(0.16, 0.24, 3)
    elif kind == "sphere":
        size = np.full(3, rng.uniform(0.2, 0.26))
    else:
        size = np.array([rng.uniform(0.18, 0.24), 0.0, rng.uniform(0.14, 0.22)])
    base = ShapeSpec(str(kind), tuple(c), tuple(size), color=base_color)
    # one attached part, stuck to a random side in the image plane
    axis = int(rng.integers(0, 2))
    sign = rng.choice([-1.0, 1.0])
    lo, hi = _bounds(base)
    pc = c.copy()
    pc[axis] = (hi[axis] if sign > 0 else lo[axis]) + sign * 0.02
    pc[1 - axis] += rng.uniform(-0.06, 0.06)
    psize = np.array([0.06, 0.06, rng.uniform(0.06, 0.1)])
    psize[axis] = rng.uniform(0.07, 0.1)
    base.children.append(ShapeSpec("box", tuple(pc), tuple(psize), color=part_color))
    return base


def _pad_box(lo, hi, pad):
    return tuple(np.clip(lo - pad, 0.0, 1.0)), tuple(np.clip(hi + pad, 0.0, 1.0))


def make_case(case_id: str, seed: int, kind: str | None = None, R: int = 32) -> EditCase:
    """Draw one local edit; resamples until source and target differ only inside the mask."""
    rng = np.random.default_rng(seed)
    pad = 2.0 / R
    for _ in range(100):
        k = kind or str(rng.choice(EDIT_KINDS))
        source = _random_source(rng)
        target = copy.deepcopy(source)
        base_lo, base_hi = _bounds(source)
        edit_color = _colors(rng, 1)[0]
        if k == "add-bump":
            # free side: opposite the existing part when possible
            part = source.children[0]
            axis = 1 - int(np.argmax(np.abs(np.asarray(part.center)[:2] - np.asarray(source.center)[:2])))
            sign = rng.choice([-1.0, 1.0])
            bc = np.asarray(source.center, dtype=float).copy()
            bc[axis] = (base_hi[axis] if sign > 0 else base_lo[axis]) + sign * rng.uniform(0.0, 0.03)
            bc[1 - axis] += rng.uniform(-0.05, 0.05)
            r = rng.uniform(0.08, 0.11)
            bump = ShapeSpec("sphere", tuple(np.clip(bc, 0, 1)), (r, r, r), color=edit_color)
            target.children.append(bump)
            lo, hi = _bounds(bump)
        elif k == "carve-hole":
            c = np.asarray(source.center, dtype=float).copy()
            span = 0.35 * (base_hi - base_lo)
            c[:2] += rng.uniform(-span[:2] / 2, span[:2] / 2)
            r = rng.uniform(0.055, 0.08)
            hole = ShapeSpec("cylinder", tuple(np.clip(c, 0, 1)), (r, 0.0, 0.5), op="difference")
            target.children.append(hole)
            lo, hi = _bounds(hole)
            lo[2], hi[2] = 0.0, 1.0
        else:
            part_src = source.children[0]
            part_tgt = target.children[0]
            direction = np.asarray(part_src.center)[:2] - np.asarray(source.center)[:2]
            axis = int(np.argmax(np.abs(direction)))
            sign = np.sign(direction[axis])
            size = np.asarray(part_tgt.size, dtype=float)
            center = np.asarray(part_tgt.center, dtype=float)
            grow = rng.uniform(0.06, 0.1)
            size[axis] += grow / 2
            center[axis] += sign * grow / 2
            size[1 - axis] *= rng.uniform(1.2, 1.5)
            part_tgt.size = tuple(np.clip(size, 0, 1))
            part_tgt.center = tuple(np.clip(center, 0, 1))
            part_tgt.color = edit_color
            lo0, hi0 = _bounds(part_src)
            lo1, hi1 = _bounds(part_tgt)
            lo, hi = np.minimum(lo0, lo1), np.maximum(hi0, hi1)
        mask_lo, mask_hi = _pad_box(lo, hi, pad)
        case = EditCase(case_id, k, source, target, mask_lo, mask_hi, seed)
        src = shapes.rasterize(source, R)
        tgt = shapes.rasterize(target, R)
        outside = case.mask(R) == 0
        changed = np.any(src != tgt)
        if changed and np.array_equal(src[outside], tgt[outside]):
            return case
    raise RuntimeError(f"could not draw a local edit for seed {seed}")


def appearance_field(spec: ShapeSpec, R: int) -> np.ndarray:
    """Per-voxel features: RGB albedo plus a material channel (1 inside, 0 outside)."""
    p = voxel_centers(R)
    rgb = shapes.color_field(spec, p)
    occ = shapes.inside(spec, p).astype(np.float64)
    return np.concatenate([rgb, occ[..., None]], axis=-1)


def color_thumbnail(features: np.ndarray, occupancy: np.ndarray, size: int) -> np.ndarray:
    """Front-view colour image: albedo of the first occupied voxel along depth."""
    R = occupancy.shape[0]
    occ = occupancy > 0.5
    first = np.argmax(occ, axis=2)
    hit = occ.any(axis=2)
    ii, jj = np.meshgrid(np.arange(R), np.arange(R), indexing="ij")
    img = features[ii, jj, first, :3] * hit[..., None]
    f = R // size
    return img.reshape(size, f, size, f, 3).mean(axis=(1, 3))
