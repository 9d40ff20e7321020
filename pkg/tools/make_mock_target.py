#!/usr/bin/env python3
"""Regenerate the packaged mock-target surface model.

A desk-scale satellite mockup: a rectangular bus with an offset panel and a
short boom. The distinct, non-parallel surfaces lock all six pose degrees of
freedom for registration (a bare convex hull lets point-to-point ICP slide
tangentially). Coordinates are in the grapple-anchored model frame: the
origin sits on the bus near one corner; the bus volume (and a realistic CoM)
lies on the +x side. Faces are wound right-handed with outward normals.

Usage: python tools/make_mock_target.py [out.obj]
"""

import sys

import numpy as np

# Outward-wound triangles of the unit cube [0,1]^3.
_CUBE_FACES = [
    (0, 2, 1), (0, 3, 2),  # z = 0
    (4, 5, 6), (4, 6, 7),  # z = 1
    (0, 1, 5), (0, 5, 4),  # y = 0
    (3, 6, 2), (3, 7, 6),  # y = 1
    (0, 7, 3), (0, 4, 7),  # x = 0
    (1, 2, 6), (1, 6, 5),  # x = 1
]
_CUBE_VERTS = np.array(
    [
        [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
        [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1],
    ],
    dtype=float,
)


def box(lo, hi):
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    return lo + _CUBE_VERTS * (hi - lo), np.array(_CUBE_FACES)


def build_model():
    parts = [
        box([0.0, -0.08, -0.05], [0.24, 0.10, 0.07]),     # bus
        box([0.06, 0.10, -0.01], [0.18, 0.30, 0.01]),     # panel
        box([0.16, -0.04, -0.15], [0.24, 0.04, -0.05]),   # boom
        box([0.02, -0.20, 0.00], [0.10, -0.08, 0.04]),    # antenna base
    ]
    verts = []
    faces = []
    offset = 0
    for v, f in parts:
        verts.append(v)
        faces.append(f + offset)
        offset += len(v)
    return np.vstack(verts), np.vstack(faces)


def main():
    out = sys.argv[1] if len(sys.argv) > 1 else "src/capsim/data/mock_target.obj"
    verts, faces = build_model()
    with open(out, "w") as fh:
        fh.write("# satellite mockup, meters, grapple-anchored frame\n")
        for v in verts:
            fh.write(f"v {v[0]:.8f} {v[1]:.8f} {v[2]:.8f}\n")
        for f in faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
    extent = verts.max(axis=0) - verts.min(axis=0)
    print(f"wrote {out}: {len(verts)} vertices, {len(faces)} faces, extent {extent}")


if __name__ == "__main__":
    main()
