"""Procedural articulated figures with an exact signed-distance oracle.

A figure is a union of capsules (torso, neck, limbs), one ellipsoid head and
up to two box accessories. Every primitive exposes an exact SDF, so the
union min-SDF is Lipschitz-1, its sign is exact everywhere, and occupancy
ground truth needs no mesh lookups.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray

# Figures are rejected/rescaled to keep total height in this range and the
# whole body inside a 2.2 m cube around its center.
HEIGHT_RANGE = (1.4, 2.0)
BOUNDING_CUBE = 2.2


def _unit(v: Array) -> Array:
    return v / np.linalg.norm(v)


def _rot_xyz(rx: float, ry: float, rz: float) -> Array:
    """Rotation from intrinsic x-y-z Euler angles (radians)."""
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rx @ Ry @ Rz


@dataclass
class Capsule:
    a: Array
    b: Array
    radius: float
    color: Array

    def sdf(self, p: Array) -> Array:
        ab = self.b - self.a
        ap = p - self.a
        t = np.clip(ap @ ab / (ab @ ab), 0.0, 1.0)
        return np.linalg.norm(ap - t[:, None] * ab[None, :], axis=1) - self.radius

    def aabb(self) -> tuple[Array, Array]:
        lo = np.minimum(self.a, self.b) - self.radius
        hi = np.maximum(self.a, self.b) + self.radius
        return lo, hi

    def to_dict(self) -> dict:
        return {
            "kind": "capsule",
            "a": self.a.tolist(),
            "b": self.b.tolist(),
            "radius": self.radius,
            "color": self.color.tolist(),
        }


@dataclass
class Ellipsoid:
    center: Array
    radii: Array
    color: Array

    def sdf(self, p: Array) -> Array:
        return _ellipsoid_sdf(p - self.center, self.radii)

    def aabb(self) -> tuple[Array, Array]:
        return self.center - self.radii, self.center + self.radii

    def to_dict(self) -> dict:
        return {
            "kind": "ellipsoid",
            "center": self.center.tolist(),
            "radii": self.radii.tolist(),
            "color": self.color.tolist(),
        }


@dataclass
class Box:
    center: Array
    half_extents: Array
    rotation: Array  # world-from-local
    color: Array

    def sdf(self, p: Array) -> Array:
        local = (p - self.center) @ self.rotation  # R^T applied to rows
        q = np.abs(local) - self.half_extents
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(np.max(q, axis=1), 0.0)
        return outside + inside

    def aabb(self) -> tuple[Array, Array]:
        reach = np.abs(self.rotation) @ self.half_extents
        return self.center - reach, self.center + reach

    def to_dict(self) -> dict:
        return {
            "kind": "box",
            "center": self.center.tolist(),
            "half_extents": self.half_extents.tolist(),
            "rotation": self.rotation.tolist(),
            "color": self.color.tolist(),
        }


def _ellipsoid_sdf(p: Array, radii: Array) -> Array:
    """Exact signed distance to an axis-aligned ellipsoid at the origin.

    Solves sum_i (a_i x_i / (t + a_i^2))^2 = 1 for the Lagrange parameter t
    by bisection; the nearest surface point is x_i a_i^2 / (t + a_i^2).
    Coordinates are nudged off the symmetry planes so the bracket's
    asymptote at t = -min(a_i^2) always exists.
    """
    a = np.asarray(radii, dtype=np.float64)
    x = np.abs(np.asarray(p, dtype=np.float64))
    x = np.maximum(x, 1e-9 * a)  # off the symmetry planes
    a2 = a * a
    k = np.einsum("ij,j->i", x * x, 1.0 / a2)
    inside = k <= 1.0

    norm = np.linalg.norm(x, axis=1)
    lo = np.where(inside, -a2.min() * (1.0 - 1e-12), 0.0)
    hi = np.where(inside, 0.0, a.max() * norm + a2.max())
    for _ in range(80):
        t = 0.5 * (lo + hi)
        f = ((a * x / (t[:, None] + a2)) ** 2).sum(axis=1)
        too_low = f > 1.0  # t below the root
        lo = np.where(too_low, t, lo)
        hi = np.where(too_low, hi, t)
    t = 0.5 * (lo + hi)
    d = np.linalg.norm(x * t[:, None] / (t[:, None] + a2), axis=1)
    return np.where(inside, -d, d)


_PRIMITIVES = {"capsule": Capsule, "ellipsoid": Ellipsoid, "box": Box}


def _part_from_dict(d: dict):
    kind = d["kind"]
    if kind == "capsule":
        return Capsule(
            a=np.array(d["a"]), b=np.array(d["b"]), radius=float(d["radius"]),
            color=np.array(d["color"]),
        )
    if kind == "ellipsoid":
        return Ellipsoid(
            center=np.array(d["center"]), radii=np.array(d["radii"]),
            color=np.array(d["color"]),
        )
    if kind == "box":
        return Box(
            center=np.array(d["center"]), half_extents=np.array(d["half_extents"]),
            rotation=np.array(d["rotation"]), color=np.array(d["color"]),
        )
    raise ValueError(f"unknown primitive kind {kind!r}")


@dataclass
class FigureSpec:
    """One generated figure: primitive parts plus a world placement offset."""

    seed: int
    parts: list = field(default_factory=list)
    offset: Array = field(default_factory=lambda: np.zeros(3))

    def sdf(self, pts: Array) -> Array:
        return self.sdf_and_part(pts)[0]

    def _capsule_stack(self):
        # cached (a, ab, 1/|ab|^2, r, part index) arrays over all capsules
        cached = getattr(self, "_caps", None)
        if cached is None:
            caps = [(i, p) for i, p in enumerate(self.parts) if isinstance(p, Capsule)]
            a = np.array([c.a for _, c in caps])
            b = np.array([c.b for _, c in caps])
            ab = b - a
            cached = (
                a,
                ab,
                1.0 / np.einsum("ij,ij->i", ab, ab),
                np.array([c.radius for _, c in caps]),
                np.array([i for i, _ in caps], dtype=np.intp),
            )
            object.__setattr__(self, "_caps", cached)
        return cached

    def sdf_and_part(self, pts: Array, chunk: int = 65536) -> tuple[Array, Array]:
        """Union min-SDF at (N, 3) world points, plus nearest-part indices.

        Capsules are evaluated as one stacked batch. Ellipsoids go last and
        only where their bounding-sphere lower bound could still win the
        min: the iterative exact solve is the expensive primitive, and the
        early-out keeps the union SDF exact while skipping it almost
        everywhere.
        """
        p_all = np.asarray(pts, dtype=np.float64).reshape(-1, 3) - self.offset
        n = len(p_all)
        d = np.empty(n)
        idx = np.empty(n, dtype=np.intp)
        cap_a, cap_ab, cap_inv, cap_r, cap_idx = self._capsule_stack()
        others = [
            (i, p) for i, p in enumerate(self.parts)
            if not isinstance(p, (Capsule, Ellipsoid))
        ]
        ellipsoids = [(i, p) for i, p in enumerate(self.parts) if isinstance(p, Ellipsoid)]

        for s in range(0, n, chunk):
            p = p_all[s : s + chunk]
            ap = p[:, None, :] - cap_a[None, :, :]
            t = np.einsum("npj,pj->np", ap, cap_ab) * cap_inv
            np.clip(t, 0.0, 1.0, out=t)
            diff = ap - t[:, :, None] * cap_ab[None, :, :]
            dc = np.sqrt(np.einsum("npj,npj->np", diff, diff)) - cap_r
            best = dc.argmin(axis=1)
            rows = np.arange(len(p))
            dmin = dc[rows, best]
            imin = cap_idx[best]
            for i, part in others:
                di = part.sdf(p)
                closer = di < dmin
                dmin = np.where(closer, di, dmin)
                imin = np.where(closer, i, imin)
            for i, part in ellipsoids:
                bound = np.linalg.norm(p - part.center, axis=1) - part.radii.max()
                maybe = bound < dmin
                if maybe.any():
                    di = part.sdf(p[maybe])
                    sub = dmin[maybe]
                    closer = di < sub
                    sub[closer] = di[closer]
                    dmin[maybe] = sub
                    sub_idx = imin[maybe]
                    sub_idx[closer] = i
                    imin[maybe] = sub_idx
            d[s : s + chunk] = dmin
            idx[s : s + chunk] = imin
        return d, idx

    def aabb(self) -> tuple[Array, Array]:
        los, his = zip(*(part.aabb() for part in self.parts))
        return np.min(los, axis=0) + self.offset, np.max(his, axis=0) + self.offset

    @property
    def height(self) -> float:
        lo, hi = self.aabb()
        return float(hi[1] - lo[1])

    def colors(self) -> Array:
        return np.array([part.color for part in self.parts])

    def to_json(self) -> str:
        return json.dumps(
            {
                "seed": self.seed,
                "offset": self.offset.tolist(),
                "parts": [part.to_dict() for part in self.parts],
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "FigureSpec":
        d = json.loads(text)
        return cls(
            seed=int(d["seed"]),
            parts=[_part_from_dict(p) for p in d["parts"]],
            offset=np.array(d["offset"], dtype=np.float64),
        )


def occupancy_oracle(figure: FigureSpec, pts: Array) -> Array:
    """1 where the union SDF is <= 0, else 0. Shape (N,)."""
    single = np.asarray(pts).ndim == 1
    occ = (figure.sdf(np.atleast_2d(pts)) <= 0.0).astype(np.float64)
    return occ[0] if single else occ


def place_randomly(figure: FigureSpec, range_xyz, rng) -> FigureSpec:
    """Copy of the figure offset by Uniform(-range, +range) per axis.

    A zero y range keeps the feet on the ground plane; cameras are left
    untouched, so the figure's perspective appearance changes.
    """
    r = np.asarray(range_xyz, dtype=np.float64)
    if (r < 0).any():
        raise ValueError("placement range must be non-negative")
    delta = rng.uniform(-r, r) if r.any() else np.zeros(3)
    return translate(figure, delta)


def translate(figure: FigureSpec, delta) -> FigureSpec:
    return FigureSpec(
        seed=figure.seed,
        parts=figure.parts,
        offset=figure.offset + np.asarray(delta, dtype=np.float64),
    )


def _limb(root, direction, length, radius, color) -> Capsule:
    return Capsule(a=root, b=root + length * _unit(direction), radius=radius, color=color)


def random_figure(rng: np.random.Generator, seed: int = 0) -> FigureSpec:
    """Sample a standing articulated figure with feet on the y=0 plane.

    Limb lengths, radii and small joint angles are randomized; poses stay
    close to standing so occlusion patterns resemble the capture scenario.
    """
    def color():
        return rng.uniform(0.25, 0.9, size=3)

    # Proportions (meters), drawn until the total height lands in range.
    for _ in range(100):
        leg_len = rng.uniform(0.70, 0.95)
        torso_len = rng.uniform(0.42, 0.62)
        neck_len = rng.uniform(0.05, 0.10)
        head_ry = rng.uniform(0.095, 0.125)
        total = leg_len + torso_len + neck_len + 2 * head_ry + 0.06
        if HEIGHT_RANGE[0] + 0.02 <= total <= HEIGHT_RANGE[1] - 0.02:
            break

    torso_r = rng.uniform(0.10, 0.15)
    parts: list = []

    hip_y = leg_len
    pelvis = np.array([0.0, hip_y, 0.0])
    chest = pelvis + np.array([0.0, torso_len, 0.0])
    parts.append(Capsule(a=pelvis, b=chest, radius=torso_r, color=color()))

    neck_top = chest + np.array([0.0, torso_len * 0.12 + neck_len, 0.0])
    parts.append(Capsule(a=chest + [0, torso_len * 0.08, 0], b=neck_top,
                         radius=torso_r * 0.38, color=color()))

    head_radii = np.array(
        [head_ry * rng.uniform(0.75, 0.9), head_ry, head_ry * rng.uniform(0.8, 0.95)]
    )
    parts.append(Ellipsoid(center=neck_top + [0, head_radii[1] * 0.9, 0],
                           radii=head_radii, color=color()))

    # Legs: thigh + shin per side, slight spread and random swing.
    hip_off = torso_r * rng.uniform(0.55, 0.75)
    for side in (-1.0, 1.0):
        hip = pelvis + np.array([side * hip_off, 0.0, 0.0])
        swing = rng.uniform(-0.12, 0.12)
        spread = side * rng.uniform(0.0, 0.10)
        thigh_dir = np.array([np.sin(spread), -1.0, np.sin(swing)])
        thigh_r = rng.uniform(0.055, 0.075)
        thigh = _limb(hip, thigh_dir, leg_len * 0.52, thigh_r, color())
        parts.append(thigh)
        shin_dir = np.array([np.sin(spread) * 0.5, -1.0, np.sin(swing * 0.3)])
        shin = _limb(thigh.b, shin_dir, leg_len * 0.48 - thigh_r * 0.4,
                     thigh_r * 0.8, color())
        parts.append(shin)
        if rng.random() < 0.7:  # feet
            foot_dir = np.array([0.0, -0.15, 1.0])
            parts.append(_limb(shin.b, foot_dir, rng.uniform(0.10, 0.16),
                               thigh_r * 0.55, color()))

    # Arms: upper + forearm per side, lowered A-pose with random lift.
    shoulder = chest + np.array([0.0, torso_r * 0.15, 0.0])
    for side in (-1.0, 1.0):
        root = shoulder + np.array([side * (torso_r + 0.01), 0.0, 0.0])
        lift = rng.uniform(0.15, 0.65)
        fwd = rng.uniform(-0.25, 0.25)
        up_dir = np.array([side * np.sin(lift), -np.cos(lift), np.sin(fwd)])
        arm_r = rng.uniform(0.038, 0.052)
        upper_len = rng.uniform(0.26, 0.33)
        upper = _limb(root, up_dir, upper_len, arm_r, color())
        parts.append(upper)
        bend = rng.uniform(0.0, 0.8)
        fore_dir = np.array(
            [side * np.sin(lift * 0.5), -np.cos(lift * 0.5 + bend * 0.3), np.sin(fwd + bend * 0.4)]
        )
        parts.append(_limb(upper.b, fore_dir, upper_len * 0.92, arm_r * 0.85, color()))

    # Accessories: 0-2 boxes (backpack and/or hip bag).
    if rng.random() < 0.5:
        size = np.array([rng.uniform(0.10, 0.16), rng.uniform(0.14, 0.22), rng.uniform(0.05, 0.10)])
        center = chest * [1, 0.9, 1] + np.array([0.0, 0.0, -(torso_r + size[2] * 0.8)])
        rot = _rot_xyz(rng.uniform(-0.1, 0.1), rng.uniform(-0.2, 0.2), 0.0)
        parts.append(Box(center=center, half_extents=size, rotation=rot, color=color()))
    if rng.random() < 0.25:
        size = np.array([rng.uniform(0.05, 0.09)] * 3)
        center = pelvis + np.array([rng.choice([-1, 1]) * (torso_r + size[0]), 0.05, 0.0])
        parts.append(Box(center=center, half_extents=size,
                         rotation=_rot_xyz(0, rng.uniform(0, 0.5), 0), color=color()))

    fig = FigureSpec(seed=seed, parts=parts)

    # Drop the feet exactly onto the ground plane and enforce the envelope.
    lo, hi = fig.aabb()
    fig = translate(fig, [0.0, -lo[1], 0.0])
    lo, hi = fig.aabb()
    extent = hi - lo
    if fig.height < HEIGHT_RANGE[0] or fig.height > HEIGHT_RANGE[1]:
        raise RuntimeError(f"figure height {fig.height:.3f} m out of range")
    if (extent > BOUNDING_CUBE).any():
        raise RuntimeError("figure exceeds its bounding cube")
    return fig
