import numpy as np
from numpy.polynomial.legendre import leggauss


def line_rule(order):
    """
    Gauss-Legendre rule on [0, 1] exact for polynomials of degree `order`.

    Returns:
        (points (n,), weights (n,))
    """
    n = max(1, order // 2 + 1)
    x, w = leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def triangle_rule(order):
    """
    Collapsed (Duffy) Gauss rule on the reference triangle (0,0),(1,0),(0,1).

    The Duffy map (s, t) -> (s, t(1-s)) adds one degree in s, so the s-direction
    gets one extra point compared to a plain tensor rule.

    Returns:
        (points (n, 2), weights (n,)) with weights summing to 1/2.
    """
    n = max(1, (order + 3) // 2)
    s, ws = leggauss(n)
    s = 0.5 * (s + 1.0)
    ws = 0.5 * ws
    S, T = np.meshgrid(s, s, indexing='ij')
    WS, WT = np.meshgrid(ws, ws, indexing='ij')
    x = S
    y = T * (1.0 - S)
    w = WS * WT * (1.0 - S)
    return np.column_stack([x.ravel(), y.ravel()]), w.ravel()


def map_to_triangles(corners, order):
    """
    Push the reference triangle rule onto a batch of physical triangles.

    Args:
        corners: (..., 3, 2) triangle vertices.
        order: polynomial exactness.

    Returns:
        points (..., n, 2), weights (..., n). Degenerate triangles get zero weights.
    """
    ref_pts, ref_w = triangle_rule(order)
    p0 = corners[..., 0, :]
    e1 = corners[..., 1, :] - p0
    e2 = corners[..., 2, :] - p0
    points = (p0[..., None, :]
              + ref_pts[:, 0, None] * e1[..., None, :]
              + ref_pts[:, 1, None] * e2[..., None, :])
    area2 = np.abs(e1[..., 0] * e2[..., 1] - e1[..., 1] * e2[..., 0])
    weights = area2[..., None] * ref_w
    return points, weights


def map_to_segments(start, end, order):
    """
    Push the Gauss line rule onto a batch of segments.

    Args:
        start, end: (..., 2) segment endpoints.

    Returns:
        points (..., n, 2), weights (..., n) in arc length.
    """
    t, w = line_rule(order)
    d = end - start
    points = start[..., None, :] + t[:, None] * d[..., None, :]
    length = np.linalg.norm(d, axis=-1)
    return points, length[..., None] * w


class ElementQuadrature:
    """
    Quadrature points grouped by element in a rectangular (E, Q) layout.

    `xi` are reference-triangle coordinates inside each element, `weights` carry the
    measure of the piecewise linear reference configuration (area or arc length).
    Line rules also carry the unit `normals` of the reference configuration.
    """
    def __init__(self, elements, xi, weights, normals=None):
        self.elements = np.asarray(elements, dtype=np.int64)
        self.xi = xi
        self.weights = weights
        self.normals = normals

    def __len__(self):
        return len(self.elements)

    @property
    def is_empty(self):
        return len(self.elements) == 0

    def chunks(self, size=2048):
        for start in range(0, len(self.elements), size):
            sl = slice(start, start + size)
            yield ElementQuadrature(self.elements[sl], self.xi[sl], self.weights[sl],
                                    None if self.normals is None else self.normals[sl])

    def total_weight(self):
        return float(self.weights.sum())


class FacetQuadrature:
    """
    Line rule on interior facets, with reference coordinates seen from both neighbors.
    """
    def __init__(self, left, right, xi_left, xi_right, weights, normals):
        self.left = left
        self.right = right
        self.xi_left = xi_left
        self.xi_right = xi_right
        self.weights = weights
        self.normals = normals

    def __len__(self):
        return len(self.left)

    def chunks(self, size=2048):
        for start in range(0, len(self.left), size):
            sl = slice(start, start + size)
            yield FacetQuadrature(self.left[sl], self.right[sl], self.xi_left[sl],
                                  self.xi_right[sl], self.weights[sl], self.normals[sl])
