"""Ground-truth cavities and noisy boundary measurements.

Clean traces come from a finer synthesis mesh (at least twice the
reconstruction density) and are interpolated onto the coarse arc nodes, so a
reconstruction never sees data produced by its own discretization unless the
caller explicitly allows that.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from . import config as config_mod
from . import fem, forward, geometry
from .errors import ConfigError


@dataclass(frozen=True)
class MeasurementTrace:
    """Sampled potential along the arc with noise metadata."""

    s: np.ndarray                 # arc-length coordinates, strictly increasing
    values: np.ndarray
    eta: float
    seed: int
    fine_mesh_id: str
    realized_l2_noise: float

    def __post_init__(self):
        s = np.asarray(self.s, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        if s.ndim != 1 or s.shape != vals.shape:
            raise ValueError("arc coordinates and values must be matching vectors")
        if np.any(np.diff(s) <= 0):
            raise ValueError("arc coordinates must be strictly increasing")
        if self.eta < 0:
            raise ValueError("noise level must be nonnegative")
        s.flags.writeable = False
        vals.flags.writeable = False
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "values", vals)

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["s", "value"])
        for si, vi in zip(self.s, self.values):
            writer.writerow([repr(float(si)), repr(float(vi))])
        return buf.getvalue()

    def sidecar(self):
        return {"eta": self.eta, "seed": self.seed,
                "fine_mesh_id": self.fine_mesh_id,
                "realized_l2_noise": self.realized_l2_noise}

    @staticmethod
    def from_csv(csv_text, sidecar):
        rows = list(csv.reader(io.StringIO(csv_text)))
        if rows[0] != ["s", "value"]:
            raise ValueError("trace file must start with the header 's,value'")
        data = np.asarray([[float(a), float(b)] for a, b in rows[1:]])
        return MeasurementTrace(s=data[:, 0], values=data[:, 1],
                                eta=float(sidecar["eta"]), seed=int(sidecar["seed"]),
                                fine_mesh_id=str(sidecar["fine_mesh_id"]),
                                realized_l2_noise=float(sidecar["realized_l2_noise"]))


def generate_measurement(setup, shape, eta, seed, refine=None):
    """Fine-mesh reference solve, arc interpolation, and seeded Gaussian noise.

    The noise standard deviation is eta times the peak of the clean trace; the
    realized arc-L2 perturbation is recorded in the metadata.
    """
    cfg = setup.config
    refine = cfg.synth_refine if refine is None else int(refine)
    if refine < 2:
        raise ConfigError("synthesis mesh must be at least twice as fine")
    fine = config_mod.build_setup(cfg, refine=refine)
    sol = forward.solve_cavity_reference(fine.mesh, fine.labels, fine.coeff,
                                         shape, fine.f, opts=fine.newton)
    clean_fine = geometry.sigma_trace(fine.labels, sol.u)
    s_coarse = setup.labels.sigma_arc
    clean = np.interp(s_coarse, fine.labels.sigma_arc, clean_fine)

    rng = np.random.default_rng(seed)
    scale = float(np.abs(clean).max())
    noise = rng.normal(0.0, eta * scale, size=clean.shape) if eta > 0 \
        else np.zeros_like(clean)
    nodal = np.zeros(setup.mesh.num_nodes)
    nodal[setup.labels.sigma_nodes] = noise
    realized = fem.sigma_l2_norm(setup.sigma_mass, nodal)
    return MeasurementTrace(s=s_coarse, values=clean + noise, eta=float(eta),
                            seed=int(seed), fine_mesh_id=fine.mesh.content_id(),
                            realized_l2_noise=realized)


def check_inverse_crime(trace, mesh, allow=False):
    """Refuse measurements synthesized on the reconstruction mesh itself."""
    if trace.fine_mesh_id == mesh.content_id() and not allow:
        raise ConfigError(
            "measurement was synthesized on the reconstruction mesh "
            "(pass allow_inverse_crime to override)")


def values_on_sigma(trace, labels, tol=1e-9):
    """Trace values at the arc nodes of a mesh, interpolated along arc length."""
    s = labels.sigma_arc
    if s[0] < trace.s[0] - tol or s[-1] > trace.s[-1] + tol:
        raise ValueError("measurement does not cover the requested arc")
    return np.interp(s, trace.s, trace.values)


@dataclass(frozen=True)
class BenchmarkCase:
    name: str
    shape: geometry.CavityShape


def catalog_cases():
    """Named ground-truth cavities for the default unit-square geometry.

    All shapes keep the safety distance from the default collar; the half disk
    touches the top wall, far from the measurement arc at the bottom.
    """
    disk = geometry.CavityShape.disk((0.5, 0.65), 0.2)
    ellipse = geometry.CavityShape.ellipse((0.35, 0.62), 0.16, 0.1)
    square = geometry.CavityShape.polygon(
        [(0.55, 0.5), (0.8, 0.5), (0.8, 0.75), (0.55, 0.75)])
    half_disk = geometry.CavityShape.half_disk((0.5, 1.0), 0.2)
    empty = geometry.CavityShape.empty()
    return [
        BenchmarkCase("disk", disk),
        BenchmarkCase("ellipse", ellipse),
        BenchmarkCase("square", square),
        BenchmarkCase("half_disk", half_disk),
        BenchmarkCase("empty", empty),
    ]


def catalog_case(name):
    for case in catalog_cases():
        if case.name == name:
            return case
    known = ", ".join(c.name for c in catalog_cases())
    raise ConfigError(f"unknown benchmark case {name!r} (known: {known})")


def write_trace(path_base, trace):
    """Write the CSV samples and the JSON sidecar next to each other."""
    csv_path = str(path_base) + ".csv"
    json_path = str(path_base) + ".json"
    with open(csv_path, "w") as fh:
        fh.write(trace.to_csv())
    with open(json_path, "w") as fh:
        json.dump(trace.sidecar(), fh, sort_keys=True, indent=1)
        fh.write("\n")
    return csv_path, json_path


def read_trace(csv_path):
    json_path = str(csv_path)[:-4] + ".json" if str(csv_path).endswith(".csv") \
        else str(csv_path) + ".json"
    with open(csv_path) as fh:
        csv_text = fh.read()
    with open(json_path) as fh:
        sidecar = json.load(fh)
    return MeasurementTrace.from_csv(csv_text, sidecar)
