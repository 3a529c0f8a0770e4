"""Small planar/spatial helpers shared by the simulator, CMSR and the goal checks."""

from __future__ import annotations

import math
from typing import Iterable, Sequence

Vec3 = tuple[float, float, float]

# drone body radius used for obstacle inflation and frame clearance
DRONE_RADIUS = 0.15
SAMPLE_STEP = 0.5
ROUND = 9


def cos_sin(deg: float) -> tuple[float, float]:
    """cos/sin of an angle in degrees, exact at multiples of 90."""
    q, r = divmod(deg, 90.0)
    if abs(r) < 1e-12 or abs(r - 90.0) < 1e-12:
        k = int(round(deg / 90.0)) % 4
        return ((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0))[k]
    rad = math.radians(deg)
    return math.cos(rad), math.sin(rad)


def norm_yaw(deg: float) -> float:
    """Normalize to [0, 360)."""
    y = math.fmod(deg, 360.0)
    if y < 0:
        y += 360.0
    y = round(y, ROUND)
    return 0.0 if y >= 360.0 else y + 0.0


def wrap180(deg: float) -> float:
    """Normalize to (-180, 180]."""
    y = math.fmod(deg, 360.0)
    if y <= -180.0:
        y += 360.0
    elif y > 180.0:
        y -= 360.0
    return y + 0.0


def body_to_world(forward: float, left: float, yaw: float) -> tuple[float, float]:
    c, s = cos_sin(yaw)
    return forward * c - left * s, forward * s + left * c


def lerp(a: Sequence[float], b: Sequence[float], t: float) -> tuple[float, ...]:
    return tuple(x + (y - x) * t for x, y in zip(a, b))


def dist(a: Sequence[float], b: Sequence[float]) -> float:
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))


def dist2d(a: Sequence[float], b: Sequence[float]) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def segment_params(length: float, step: float = SAMPLE_STEP) -> list[float]:
    """Path parameters in (0, 1] sampling a segment at no more than `step` spacing."""
    n = max(1, math.ceil(length / step - 1e-9))
    return [k / n for k in range(1, n + 1)]


def point_segment_dist2d(p: Sequence[float], a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Horizontal distance from p to segment ab and the parameter of the closest point."""
    dx, dy = b[0] - a[0], b[1] - a[1]
    den = dx * dx + dy * dy
    t = 0.0 if den == 0 else max(0.0, min(1.0, ((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / den))
    return math.hypot(a[0] + t * dx - p[0], a[1] + t * dy - p[1]), t


def square_chord(a: Sequence[float], b: Sequence[float], center: Sequence[float], half: float) -> tuple[float, float] | None:
    """Parameter interval where segment ab (xy only) lies strictly inside an axis-aligned square.

    Returns None if the open square is never entered (touching the boundary is allowed).
    """
    t0, t1 = 0.0, 1.0
    for axis in (0, 1):
        lo, hi = center[axis] - half, center[axis] + half
        d = b[axis] - a[axis]
        if abs(d) < 1e-15:
            if not lo < a[axis] < hi:
                return None
            continue
        u0, u1 = (lo - a[axis]) / d, (hi - a[axis]) / d
        if u0 > u1:
            u0, u1 = u1, u0
        t0, t1 = max(t0, u0), min(t1, u1)
        if t1 - t0 <= 1e-12:
            return None
    return t0, t1


def in_open_square(p: Sequence[float], center: Sequence[float], half: float) -> bool:
    return abs(p[0] - center[0]) < half and abs(p[1] - center[1]) < half


def frame_axes(yaw: float) -> tuple[tuple[float, float], tuple[float, float]]:
    """(normal, lateral) horizontal unit vectors of a vertical frame facing `yaw`."""
    c, s = cos_sin(yaw)
    return (c, s), (-s, c)


def frame_coords(p: Sequence[float], center: Vec3, yaw: float) -> tuple[float, float, float]:
    """(signed normal distance, lateral offset, vertical offset) of p in the frame's coordinates."""
    (nx, ny), (lx, ly) = frame_axes(yaw)
    dx, dy, dz = p[0] - center[0], p[1] - center[1], p[2] - center[2]
    return dx * nx + dy * ny, dx * lx + dy * ly, dz


def plane_crossings(points: Sequence[Sequence[float]], center: Vec3, yaw: float) -> Iterable[tuple[int, tuple[float, ...]]]:
    """Points where a polyline passes from the near side to the far side of the frame plane.

    Yields (index of the polyline vertex ending the crossing, crossing point). A vertex lying
    exactly on the plane counts as the crossing point when the path continues to the far side.
    """
    last_sign, last_idx = 0, -1
    for i, p in enumerate(points):
        d = frame_coords(p, center, yaw)[0]
        sign = 0 if abs(d) < 1e-12 else (1 if d > 0 else -1)
        if sign == 0:
            continue
        if last_sign == -1 and sign == 1:
            # locate the first zero of d along the polyline between last_idx and i
            for j in range(last_idx + 1, i + 1):
                a, b = points[j - 1], points[j]
                da = frame_coords(a, center, yaw)[0]
                db = frame_coords(b, center, yaw)[0]
                if abs(da) < 1e-12:
                    yield j, tuple(a)
                    break
                if da < 0 <= db or (da < 0 and db > 0):
                    t = da / (da - db)
                    yield j, tuple(lerp(a, b, t))
                    break
        last_sign, last_idx = sign, i


def fmt_num(v: float, min_decimals: int = 0) -> str:
    """Fixed rendering: at most 6 decimals, trailing zeros stripped, never '-0'."""
    s = f"{v:.6f}".rstrip("0")
    if s.endswith("."):
        s = s[:-1]
    if s in ("-0", ""):
        s = "0"
    if min_decimals and "." not in s:
        s += "." + "0" * min_decimals
    return s
