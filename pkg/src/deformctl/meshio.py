"""ASCII OBJ / PLY reading and writing for triangle meshes."""
from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .geometry import MeshError, TriangleMesh


def load_mesh(path) -> TriangleMesh:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        return load_obj(path)
    if suffix == ".ply":
        return load_ply(path)
    raise MeshError(f"{path}: unsupported mesh format {suffix!r} (expected .obj or .ply)")


def save_mesh(mesh: TriangleMesh, path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        save_ply(mesh, path)
    else:
        save_obj(mesh, path)


def load_obj(path) -> TriangleMesh:
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise MeshError(f"{path}:{lineno}: non-triangle face with {len(parts) - 1} vertices")
                idx = []
                for tok in parts[1:]:
                    i = int(tok.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                faces.append(idx)
            # vn lines are ignored: normals are recomputed from the geometry
    if not faces:
        raise MeshError(f"{path}: no faces")
    return TriangleMesh(verts, faces)


def save_obj(mesh: TriangleMesh, path) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write("v %r %r %r\n" % tuple(map(float, v)))
        for n in mesh.vertex_normals:
            fh.write("vn %r %r %r\n" % tuple(map(float, n)))
        for a, b, c in mesh.triangles + 1:
            fh.write(f"f {a}//{a} {b}//{b} {c}//{c}\n")


def load_ply(path) -> TriangleMesh:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MeshError(f"{path}: not a PLY file")
    n_vert = n_face = 0
    props = []
    element = None
    body = None
    for i, line in enumerate(lines[1:], 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise MeshError(f"{path}: only ASCII PLY is supported")
        elif parts[0] == "element":
            element = parts[1]
            if element == "vertex":
                n_vert = int(parts[2])
            elif element == "face":
                n_face = int(parts[2])
        elif parts[0] == "property" and element == "vertex":
            props.append(parts[-1])
        elif parts[0] == "end_header":
            body = i + 1
            break
    if body is None:
        raise MeshError(f"{path}: missing end_header")
    try:
        cols = [props.index(k) for k in ("x", "y", "z")]
    except ValueError:
        raise MeshError(f"{path}: vertex element lacks x/y/z properties") from None
    verts = []
    for line in lines[body:body + n_vert]:
        vals = line.split()
        verts.append([float(vals[c]) for c in cols])
    faces = []
    for k, line in enumerate(lines[body + n_vert:body + n_vert + n_face]):
        vals = [int(x) for x in line.split()]
        if vals[0] != 3:
            raise MeshError(f"{path}: non-triangle face {k} with {vals[0]} vertices")
        faces.append(vals[1:4])
    if len(verts) != n_vert or len(faces) != n_face:
        raise MeshError(f"{path}: truncated file")
    return TriangleMesh(verts, faces)


def save_ply(mesh: TriangleMesh, path) -> None:
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(mesh.vertices)}\n")
        for p in ("x", "y", "z", "nx", "ny", "nz"):
            fh.write(f"property double {p}\n")
        fh.write(f"element face {len(mesh.triangles)}\n")
        fh.write("property list uchar int vertex_indices\nend_header\n")
        for v, n in zip(mesh.vertices, mesh.vertex_normals):
            fh.write("%r %r %r %r %r %r\n" % tuple(map(float, (*v, *n))))
        for a, b, c in mesh.triangles:
            fh.write(f"3 {a} {b} {c}\n")


def mesh_digest(mesh: TriangleMesh) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(mesh.vertices).tobytes())
    h.update(np.ascontiguousarray(mesh.triangles).tobytes())
    return h.hexdigest()
