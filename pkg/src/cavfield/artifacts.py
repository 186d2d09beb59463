"""File emission: VTK legacy fields, CSV curves, JSON reports, run manifests.

Reports are serialized canonically (sorted keys, repr floats, no timestamps),
so reruns with identical inputs produce bit-identical files.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path


def write_vtk(path, mesh, point_data):
    """Legacy ASCII VTK with one POINT_DATA scalar field per dict entry."""
    lines = [
        "# vtk DataFile Version 3.0",
        "cavfield field export",
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {mesh.num_nodes} double",
    ]
    for x, y in mesh.nodes:
        lines.append(f"{x:.17g} {y:.17g} 0.0")
    lines.append(f"CELLS {mesh.num_cells} {4 * mesh.num_cells}")
    for a, b, c in mesh.triangles:
        lines.append(f"3 {a} {b} {c}")
    lines.append(f"CELL_TYPES {mesh.num_cells}")
    lines.extend(["5"] * mesh.num_cells)
    lines.append(f"POINT_DATA {mesh.num_nodes}")
    for name, values in point_data.items():
        lines.append(f"SCALARS {name} double 1")
        lines.append("LOOKUP_TABLE default")
        lines.extend(f"{float(v):.17g}" for v in values)
    Path(path).write_text("\n".join(lines) + "\n")
    return str(path)


def canonical_json(doc):
    return json.dumps(_plain(doc), sort_keys=True, indent=1) + "\n"


def _plain(obj):
    import numpy as np

    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    return obj


def write_json(path, doc):
    Path(path).write_text(canonical_json(doc))
    return str(path)


def write_csv(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(x)) if isinstance(x, float) else x for x in row])
    Path(path).write_text(buf.getvalue())
    return str(path)


def write_polylines_csv(path, mesh, polylines):
    """Closed boundary loops as (loop, x, y) rows."""
    rows = []
    for k, loop in enumerate(polylines):
        for node in loop:
            x, y = mesh.nodes[node]
            rows.append([k, float(x), float(y)])
    return write_csv(path, ["loop", "x", "y"], rows)


def write_manifest(outdir, command, cfg_hash, mesh_id, seed, inputs=None, outputs=None):
    doc = {
        "command": command,
        "config_sha256": cfg_hash,
        "mesh_id": mesh_id,
        "seed": seed,
        "inputs": inputs or {},
        "outputs": sorted(outputs or []),
    }
    return write_json(Path(outdir) / "manifest.json", doc)
