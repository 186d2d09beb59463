"""Flat key-value configuration (TOML syntax) and the assembled problem bundle.

Parsing is strict: unknown keys are fatal, every invariant is validated before
any compute.  ``Setup`` carries the mesh, labels, coefficient and source
fields plus cached assembly data shared by the solvers and studies.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:            # Python 3.10
    import tomli as tomllib

from . import fem, geometry
from .adjoint import GAMMA_DEFAULT, unit_stiffness
from .errors import ConfigError
from .forward import NewtonOptions
from .optimizer import OptimizerOptions, alpha_from_noise


@dataclass(frozen=True)
class SolverConfig:
    # mesh
    nx: int = 64
    ny: int = 64
    rect: tuple = (0.0, 0.0, 1.0, 1.0)
    # regions
    omega1: tuple = (0.0, 0.0, 1.0, 0.25)
    omega2: tuple = (0.0, 0.0, 1.0, 0.15)
    sigma_side: str = "bottom"
    sigma_span: tuple = (0.0, 1.0)
    # conductivity tensor
    coeff: str = "identity"
    coeff_entries: tuple = (1.0, 0.0, 1.0)
    coeff_lambda: float | None = None
    coeff_Lambda: float | None = None
    # source: plateau rectangle with a linear skirt; keep corners and skirt on
    # common grid lines (multiples of 1/16) so all meshes carry the same mass
    source_value: float = 8.0
    source_rect: tuple = (0.25, 0.0, 0.75, 0.0625)
    source_skirt: float = 0.0625
    # continuous parameters
    delta: float = 1e-3
    epsilons: tuple = ()               # empty: 4h, 2h from the mesh
    alpha: float | None = None         # None: tie to the noise level
    eta: float = 0.0
    alpha_scale: float = 10.0
    alpha_floor: float = 1e-6
    gamma: float = GAMMA_DEFAULT
    # Newton / linear solver
    newton_tol: float = 1e-11
    newton_max_iters: int = 60
    armijo_c: float = 1e-4
    backtrack: float = 0.5
    jacobian_shift: float | None = None
    cg_tol: float = 1e-12
    cg_max_iter: int = 50000
    # optimizer
    opt_max_iters: int = 200
    opt_tol_J: float = 1e-8
    opt_tol_pg: float = 1e-9
    opt_patience: int = 5
    opt_s0: float = 1.0
    opt_s_min: float = 1e-12
    opt_warm_step: bool = True
    # synthesis and bookkeeping
    synth_refine: int = 2
    seed: int = 0
    outdir: str = "out"

    def resolved_alpha(self):
        if self.alpha is not None:
            return float(self.alpha)
        return alpha_from_noise(self.eta, self.alpha_scale, self.alpha_floor)

    def resolved_epsilons(self, mesh):
        return tuple(self.epsilons) if self.epsilons else (4.0 * mesh.h, 2.0 * mesh.h)

    def newton_options(self):
        return NewtonOptions(tol_residual=self.newton_tol,
                             max_iters=self.newton_max_iters,
                             armijo_c=self.armijo_c,
                             backtrack_factor=self.backtrack,
                             jacobian_shift=self.jacobian_shift,
                             cg_tol=self.cg_tol, cg_max_iter=self.cg_max_iter)

    def optimizer_options(self, eps):
        return OptimizerOptions(eps=eps, alpha=self.resolved_alpha(),
                                gamma=self.gamma, s0=self.opt_s0,
                                backtrack=self.backtrack, armijo_c=self.armijo_c,
                                tol_J=self.opt_tol_J, tol_pg=self.opt_tol_pg,
                                patience=self.opt_patience,
                                max_iters=self.opt_max_iters,
                                s_min=self.opt_s_min, warm_step=self.opt_warm_step)


_RECT_KEYS = {"rect", "omega1", "omega2", "source_rect"}
_PAIR_KEYS = {"sigma_span"}
_TUPLE_KEYS = _RECT_KEYS | _PAIR_KEYS | {"coeff_entries", "epsilons"}
_INT_KEYS = {"nx", "ny", "newton_max_iters", "cg_max_iter", "opt_max_iters",
             "opt_patience", "synth_refine", "seed"}
_STR_KEYS = {"sigma_side", "coeff", "outdir"}
_BOOL_KEYS = {"opt_warm_step"}
_OPTIONAL_KEYS = {"alpha", "coeff_lambda", "coeff_Lambda", "jacobian_shift"}
_ALL_KEYS = {f.name for f in fields(SolverConfig)}


def parse_config(text):
    """Parse a flat TOML configuration string into a validated SolverConfig."""
    try:
        doc = tomllib.loads(str(text))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"configuration is not valid TOML: {exc}") from exc
    unknown = sorted(set(doc) - _ALL_KEYS)
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    kwargs = {}
    for key, raw in doc.items():
        try:
            if key in _TUPLE_KEYS:
                kwargs[key] = tuple(float(x) for x in raw)
            elif key in _INT_KEYS:
                kwargs[key] = int(raw)
            elif key in _STR_KEYS:
                kwargs[key] = str(raw)
            elif key in _BOOL_KEYS:
                kwargs[key] = bool(raw)
            else:
                kwargs[key] = float(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for key {key!r}: {raw!r}") from exc
    cfg = SolverConfig(**kwargs)
    validate_config(cfg)
    return cfg


def load_config(path):
    with open(path, "rb") as fh:
        doc = fh.read().decode()
    return parse_config(doc)


def validate_config(cfg):
    def fail(msg):
        raise ConfigError(msg)

    if cfg.nx < 2 or cfg.ny < 2:
        fail("nx and ny must be at least 2")
    for key in _RECT_KEYS:
        x0, y0, x1, y1 = getattr(cfg, key)
        if not (x1 > x0 and y1 > y0):
            fail(f"{key} is a degenerate rectangle")
    if not _rect_inside(cfg.omega1, cfg.rect) or not _rect_inside(cfg.omega2, cfg.omega1):
        fail("regions must nest: source region inside collar inside domain")
    if cfg.source_skirt < 0:
        fail("source_skirt must be nonnegative")
    support = _dilate_rect(cfg.source_rect, cfg.source_skirt, cfg.rect)
    if not _rect_inside(support, cfg.omega2):
        fail("source support (plateau plus skirt) must lie inside omega2")
    if cfg.sigma_side not in ("bottom", "top", "left", "right"):
        fail(f"unknown sigma_side {cfg.sigma_side!r}")
    if cfg.sigma_span[0] >= cfg.sigma_span[1]:
        fail("sigma_span must be a nondegenerate interval")
    if cfg.coeff not in ("identity", "constant", "sinusoidal"):
        fail(f"unknown coefficient kind {cfg.coeff!r}")
    if cfg.coeff == "constant":
        a11, a12, a22 = cfg.coeff_entries
        eigs = np.linalg.eigvalsh(np.array([[a11, a12], [a12, a22]]))
        lam = cfg.coeff_lambda if cfg.coeff_lambda is not None else eigs[0]
        Lam = cfg.coeff_Lambda if cfg.coeff_Lambda is not None else eigs[1]
        if not (0 < lam <= Lam):
            fail("ellipticity bounds need 0 < lambda <= Lambda")
        if eigs[0] < lam - 1e-12 or eigs[1] > Lam + 1e-12:
            fail("coefficient eigenvalues leave the declared ellipticity interval")
    if cfg.coeff_lambda is not None and cfg.coeff_Lambda is not None \
            and cfg.coeff_lambda > cfg.coeff_Lambda:
        fail("coeff_lambda exceeds coeff_Lambda")
    if cfg.source_value < 0:
        fail("source_value must be nonnegative")
    if not 0 < cfg.delta <= 1:
        fail("delta must lie in (0, 1]")
    if cfg.epsilons and any(b >= a for a, b in zip(cfg.epsilons, cfg.epsilons[1:])):
        fail("epsilons must be strictly decreasing")
    if cfg.epsilons and min(cfg.epsilons) <= 0:
        fail("epsilons must be positive")
    if cfg.alpha is not None and cfg.alpha < 0:
        fail("alpha must be nonnegative")
    if cfg.eta < 0:
        fail("eta must be nonnegative")
    if cfg.alpha_scale <= 0 or cfg.alpha_floor <= 0:
        fail("alpha_scale and alpha_floor must be positive")
    if cfg.gamma <= 0:
        fail("gamma must be positive")
    for key in ("newton_tol", "cg_tol", "opt_tol_J", "opt_tol_pg", "opt_s0",
                "opt_s_min", "backtrack", "armijo_c"):
        if getattr(cfg, key) <= 0:
            fail(f"{key} must be positive")
    if not 0 < cfg.armijo_c < 0.5:
        fail("armijo_c must lie in (0, 1/2)")
    if not 0 < cfg.backtrack < 1:
        fail("backtrack must lie in (0, 1)")
    if cfg.jacobian_shift is not None and cfg.jacobian_shift < 0:
        fail("jacobian_shift must be nonnegative")
    if cfg.synth_refine < 2:
        fail("synth_refine must be at least 2 (inverse-crime guard)")
    if cfg.seed < 0:
        fail("seed must be nonnegative")
    return cfg


def _rect_inside(inner, outer, tol=1e-12):
    return (inner[0] >= outer[0] - tol and inner[1] >= outer[1] - tol
            and inner[2] <= outer[2] + tol and inner[3] <= outer[3] + tol)


def _dilate_rect(rect, pad, domain):
    """Grow a rectangle by ``pad`` on sides that do not touch the domain wall."""
    x0, y0, x1, y1 = rect
    dx0, dy0, dx1, dy1 = domain
    tol = 1e-12
    return (x0 if x0 <= dx0 + tol else x0 - pad,
            y0 if y0 <= dy0 + tol else y0 - pad,
            x1 if x1 >= dx1 - tol else x1 + pad,
            y1 if y1 >= dy1 - tol else y1 + pad)


def _toml_value(val):
    if isinstance(val, bool):
        return "true" if val else "false"
    if isinstance(val, (int, np.integer)):
        return str(int(val))
    if isinstance(val, (float, np.floating)):
        r = repr(float(val))
        return r if ("." in r or "e" in r or "n" in r) else r + ".0"
    if isinstance(val, str):
        return '"' + val.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(val, (tuple, list)):
        return "[" + ", ".join(_toml_value(x) for x in val) + "]"
    raise TypeError(f"cannot serialize {val!r}")


def emit_config(cfg):
    """Serialize back to flat TOML; parse(emit(cfg)) == cfg."""
    lines = []
    for f in fields(SolverConfig):
        val = getattr(cfg, f.name)
        if val is None:
            continue
        lines.append(f"{f.name} = {_toml_value(val)}")
    return "\n".join(lines) + "\n"


def config_hash(cfg):
    return hashlib.sha256(emit_config(cfg).encode()).hexdigest()[:16]


@dataclass
class Setup:
    """Assembled problem: mesh, labels, fields, and cached assembly data."""

    config: SolverConfig
    mesh: geometry.Mesh
    labels: geometry.RegionLabels
    coeff: fem.CoefficientField
    f: np.ndarray
    newton: NewtonOptions
    delta: float
    sigma_mass: object = field(repr=False, default=None)
    k1: object = field(repr=False, default=None)
    mlump: np.ndarray = field(repr=False, default=None)
    blocks: np.ndarray = field(repr=False, default=None)

    @property
    def mesh_id(self):
        return self.mesh.content_id()


def coefficient_from_config(cfg, mesh):
    if cfg.coeff == "identity":
        co = fem.CoefficientField.identity(mesh)
    elif cfg.coeff == "constant":
        a11, a12, a22 = cfg.coeff_entries
        co = fem.CoefficientField.constant(mesh, a11, a12, a22,
                                           lam=cfg.coeff_lambda, Lam=cfg.coeff_Lambda)
    else:
        co = fem.CoefficientField.sinusoidal(mesh)
    if cfg.coeff_lambda is not None or cfg.coeff_Lambda is not None:
        lam = cfg.coeff_lambda if cfg.coeff_lambda is not None else co.lam
        Lam = cfg.coeff_Lambda if cfg.coeff_Lambda is not None else co.Lam
        co = fem.CoefficientField(co.cell_mats, lam, Lam)
    return co


def build_setup(cfg, refine=1):
    """Build the mesh, labels and fields; ``refine`` scales the grid density."""
    mesh = geometry.build_structured_mesh(cfg.nx * refine, cfg.ny * refine, cfg.rect)
    spec = geometry.RegionSpec(omega1=cfg.omega1, omega2=cfg.omega2,
                               sigma_side=cfg.sigma_side, sigma_span=cfg.sigma_span)
    labels = geometry.mark_regions(mesh, spec)
    coeff = coefficient_from_config(cfg, mesh)
    f = fem.build_source(mesh, labels, cfg.source_value, cfg.source_rect,
                         skirt=cfg.source_skirt)
    return Setup(config=cfg, mesh=mesh, labels=labels, coeff=coeff, f=f,
                 newton=cfg.newton_options(), delta=cfg.delta,
                 sigma_mass=fem.assemble_sigma_mass(mesh, labels),
                 k1=unit_stiffness(mesh),
                 mlump=fem.lumped_mass(mesh),
                 blocks=fem.stiffness_blocks(mesh, coeff))


def with_delta(setup, delta):
    """Clone the setup with a different conductivity floor."""
    return replace(setup, delta=float(delta),
                   config=replace(setup.config, delta=float(delta)))
