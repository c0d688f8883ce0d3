"""Planar affine transforms in continuous pixel coordinates, and box mapping."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .boxes import MIN_BOX_SIDE, BBox, clip_box, with_box

PROVENANCE = ("identity", "resize", "flip", "shear", "translate", "rotate", "compose")


@dataclass(frozen=True, eq=False)
class AffineTransform:
    """A 2x3 affine map ``p' = A @ [x, y, 1]``.

    Composition follows function order: ``(f @ g)`` applies ``g`` first.
    """
    matrix: np.ndarray
    tag: str = "compose"

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape == (3, 3):
            m = m[:2]
        if m.shape != (2, 3):
            raise ValueError(f"affine matrix must be 2x3, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("affine matrix is not finite")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        if self.tag not in PROVENANCE:
            raise ValueError(f"unknown provenance tag {self.tag!r}")

    @property
    def homogeneous(self) -> np.ndarray:
        return np.vstack([self.matrix, [0.0, 0.0, 1.0]])

    @property
    def determinant(self) -> float:
        return float(np.linalg.det(self.matrix[:, :2]))

    def inverse(self) -> "AffineTransform":
        if abs(self.determinant) < 1e-12:
            raise np.linalg.LinAlgError("affine transform is not invertible")
        return AffineTransform(np.linalg.inv(self.homogeneous), self.tag)

    def __matmul__(self, other: "AffineTransform") -> "AffineTransform":
        return AffineTransform(self.homogeneous @ other.homogeneous, "compose")

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return pts @ self.matrix[:, :2].T + self.matrix[:, 2]

    def map_box(self, box: BBox) -> Optional[BBox]:
        """Axis-aligned hull of the transformed corners (unclipped)."""
        pts = self.apply(box.corners())
        x1, y1 = pts.min(axis=0)
        x2, y2 = pts.max(axis=0)
        if x2 <= x1 or y2 <= y1:
            return None
        return BBox(float(x1), float(y1), float(x2), float(y2))

    def allclose(self, other: "AffineTransform", atol=1e-6) -> bool:
        return bool(np.allclose(self.matrix, other.matrix, atol=atol, rtol=0))

    def __repr__(self):
        return f"AffineTransform({self.tag}, {self.matrix.tolist()})"

    # factories -----------------------------------------------------------

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(3), "identity")

    @classmethod
    def scale(cls, sx: float, sy: Optional[float] = None) -> "AffineTransform":
        sy = sx if sy is None else sy
        return cls([[sx, 0, 0], [0, sy, 0]], "resize")

    @classmethod
    def hflip(cls, width: float) -> "AffineTransform":
        return cls([[-1, 0, width], [0, 1, 0]], "flip")

    @classmethod
    def translate(cls, dx: float, dy: float) -> "AffineTransform":
        return cls([[1, 0, dx], [0, 1, dy]], "translate")

    @classmethod
    def shear(cls, sx: float, sy: float, center=(0.0, 0.0)) -> "AffineTransform":
        """x' = x + sx * (y - cy), y' = y + sy * (x - cx)."""
        cx, cy = center
        return cls([[1, sx, -sx * cy], [sy, 1, -sy * cx]], "shear")

    @classmethod
    def rotate(cls, degrees: float, center=(0.0, 0.0)) -> "AffineTransform":
        """Counter-clockwise as displayed (y axis points down)."""
        t = math.radians(degrees)
        c, s = math.cos(t), math.sin(t)
        cx, cy = center
        return cls([[c, s, (1 - c) * cx - s * cy],
                    [-s, c, s * cx + (1 - c) * cy]], "rotate")


def warp_labels(labels: Iterable, tf: AffineTransform, size, min_side: float = MIN_BOX_SIDE) -> list:
    """Map labels through ``tf``, hull-box, clip to ``size`` and drop degenerates."""
    w, h = size
    out = []
    for lab in labels:
        box = tf.map_box(lab.box)
        if box is None:
            continue
        box = clip_box(box, w, h, min_side=min_side)
        if box is not None:
            out.append(with_box(lab, box))
    return out


def to_index_space(tf: AffineTransform) -> np.ndarray:
    """Matrix for OpenCV, whose pixel i is centred at i rather than i + 0.5."""
    shift = np.array([[1, 0, 0.5], [0, 1, 0.5], [0, 0, 1.0]])
    unshift = np.array([[1, 0, -0.5], [0, 1, -0.5], [0, 0, 1.0]])
    return (unshift @ tf.homogeneous @ shift)[:2]
