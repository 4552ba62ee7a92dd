"""CSV, JSON and legacy VTK writers for benchmark artifacts."""
from __future__ import annotations

import csv
import json

import numpy as np

from .fem import GAUSS_2X2

RESIDUAL_HEADER = ["iteration", "residual_norm", "objective", "step_length", "backtracks"]
LINE_SEARCH_HEADER = ["s", "objective", "first_order", "second_order", "sufficient_decrease"]
IP_FIELDS_HEADER = ["ip", "element", "gauss_point", "x", "y", "sigma_xx", "sigma_yy", "sigma_xy",
                    "von_mises", "alpha_ih", "first_yield_increment"]


def _num(x):
    return "" if x is None else repr(float(x))


def write_residuals(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESIDUAL_HEADER)
        for r in records:
            w.writerow([r.iteration, _num(r.residual_norm), _num(r.objective),
                        _num(r.step_length), "" if r.backtracks is None else r.backtracks])


def write_line_search(path, table):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LINE_SEARCH_HEADER)
        for row in table:
            w.writerow([_num(v) for v in row])


def yield_codes(first_yield, ips_per_element=4):
    """Per-element classification of where plastic flow started.

    0: no integration point yielded.  1: all yielded, all in increment 1.
    2: all yielded, some only in a later increment.  3: some but not all
    integration points yielded.
    """
    fy = np.asarray(first_yield).reshape(-1, ips_per_element)
    n_yielded = np.count_nonzero(fy, axis=1)
    codes = np.where(fy.max(axis=1) <= 1, 1, 2)
    codes[n_yielded == 0] = 0
    codes[(n_yielded > 0) & (n_yielded < ips_per_element)] = 3
    return codes


def write_vtk(path, mesh, cell_data, point_vectors=None, title="dualplast fields"):
    """Legacy ASCII VTK unstructured grid of quads with cell scalars.

    ``cell_data`` maps names to per-element arrays; integer arrays are
    written as ``int``, everything else as ``double``.
    """
    n, ne = mesh.n_nodes, mesh.n_elements
    out = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID",
           f"POINTS {n} double"]
    out += [f"{x!r} {y!r} 0.0" for x, y in mesh.nodes.tolist()]
    out.append(f"CELLS {ne} {5 * ne}")
    out += ["4 " + " ".join(map(str, e)) for e in mesh.elements.tolist()]
    out.append(f"CELL_TYPES {ne}")
    out += ["9"] * ne
    out.append(f"CELL_DATA {ne}")
    for name, values in cell_data.items():
        values = np.asarray(values)
        integer = np.issubdtype(values.dtype, np.integer)
        out.append(f"SCALARS {name} {'int' if integer else 'double'} 1")
        out.append("LOOKUP_TABLE default")
        out += [str(v) if integer else repr(v) for v in values.tolist()]
    if point_vectors:
        out.append(f"POINT_DATA {n}")
        for name, vec in point_vectors.items():
            vec = np.asarray(vec, dtype=float).reshape(n, -1)
            out.append(f"VECTORS {name} double")
            out += [f"{a!r} {b!r} 0.0" for a, b in vec[:, :2].tolist()]
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")


def read_vtk_cell_data(path):
    """Minimal reader for files from :func:`write_vtk`; returns (points, cells, data)."""
    with open(path) as fh:
        lines = fh.read().split("\n")
    if not lines[0].startswith("# vtk DataFile Version"):
        raise ValueError(f"{path}: not a legacy VTK file")
    if lines[2].strip() != "ASCII" or lines[3].split()[-1] != "UNSTRUCTURED_GRID":
        raise ValueError(f"{path}: expected an ASCII unstructured grid")
    i = 4
    points = cells = None
    data = {}
    n_cells = 0
    while i < len(lines):
        head = lines[i].split()
        if not head:
            i += 1
            continue
        if head[0] == "POINTS":
            n = int(head[1])
            points = np.array([list(map(float, lines[i + 1 + k].split())) for k in range(n)])
            i += n + 1
        elif head[0] == "CELLS":
            n_cells = int(head[1])
            cells = np.array([list(map(int, lines[i + 1 + k].split()))[1:] for k in range(n_cells)])
            i += n_cells + 1
        elif head[0] == "CELL_TYPES":
            i += int(head[1]) + 1
        elif head[0] == "SCALARS":
            conv = int if head[2] == "int" else float
            data[head[1]] = np.array([conv(lines[i + 2 + k]) for k in range(n_cells)])
            i += n_cells + 2
        elif head[0] == "VECTORS":
            n = len(points)
            data[head[1]] = np.array([list(map(float, lines[i + 1 + k].split())) for k in range(n)])
            i += n + 1
        else:
            i += 1
    return points, cells, data


def write_ip_fields(path, disc, sigma, von_mises, alpha_ih, first_yield):
    gp_xy = ip_coordinates(disc)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(IP_FIELDS_HEADER)
        for m in range(disc.n_ip):
            w.writerow([m, int(disc.ip_element[m]), m % 4, _num(gp_xy[m, 0]), _num(gp_xy[m, 1]),
                        *(_num(v) for v in sigma[m]), _num(von_mises[m]), _num(alpha_ih[m]),
                        int(first_yield[m])])


def ip_coordinates(disc):
    xi, eta = GAUSS_2X2[:, 0], GAUSS_2X2[:, 1]
    N = 0.25 * np.stack([(1 - xi) * (1 - eta), (1 + xi) * (1 - eta),
                         (1 + xi) * (1 + eta), (1 - xi) * (1 + eta)], axis=1)
    xy = disc.mesh.nodes[disc.mesh.elements]
    return np.einsum("gk,ekd->egd", N, xy).reshape(-1, 2)


def write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
