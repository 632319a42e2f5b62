"""Self-contained PDE data generators and the portable dataset container.

Kolmogorov flow: pseudo-spectral vorticity formulation on [0, 2pi]^2 with a
semi-implicit step (Crank-Nicolson viscosity, Adams-Bashforth-2 advection) and
2/3 dealiasing; velocities come from the streamfunction, so incompressibility
holds to spectral accuracy.

Rayleigh-Benard convection: primitive-variable finite differences on a 2:1
box, upwind advection, explicit central diffusion, Boussinesq buoyancy, and a
pressure projection solved by FFT in the periodic direction and a Neumann
tridiagonal solve between the walls.

Container file format (used for datasets and checkpoints alike): magic "CDNO",
u32 little-endian version, u64 length-prefixed UTF-8 JSON header, then per
buffer raw little-endian float64 bytes followed by an 8-byte blake2b checksum.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg

from .errors import (ChecksumError, DatasetSchemaError, FormatVersionError,
                     FractionError, ShapeError, StabilityError,
                     TruncatedFileError)
from .field import DEFAULT_EXTENT, GridFunction, Mesh, random_band_limited

MAGIC = b"CDNO"
FORMAT_VERSION = 1

# Rayleigh number mapping at fixed geometry: the wall gap is L_y = 1 and the
# imposed temperature difference is 1, so Ra = alpha_g * L_y^3 * dT / (nu *
# kappa) = alpha_g / (nu * kappa). With nu = kappa = 0.01 the labeled Ra is
# reached by alpha_g = Ra * 1e-4.
RB_PRESETS = {
    "ra12k": dict(nu=0.01, kappa=0.01, alpha_g=1.2),
    "ra20k": dict(nu=0.01, kappa=0.01, alpha_g=2.0),
}


@dataclass
class SimConfig:
    system: str = "kolmogorov"
    resolution: tuple = (64, 64)
    dt: float = 0.2                 # snapshot interval
    snapshots: int = 200
    re: float = 500.0               # kolmogorov viscosity = 1/re
    forcing_n: int = 4
    forcing_amplitude: float = 1.0
    ic_scale: float = 1.0           # kolmogorov initial vorticity amplitude
    nu: float = 0.01                # rayleigh-benard
    kappa: float = 0.01
    alpha_g: float = 1.2
    warmup: float = 0.0             # time to integrate before the first snapshot
    cfl_safety: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.resolution, int):
            self.resolution = (self.resolution, self.resolution)
        self.resolution = tuple(int(n) for n in self.resolution)
        if len(self.resolution) == 1:
            self.resolution = (self.resolution[0], self.resolution[0])
        if self.system not in ("kolmogorov", "rayleigh-benard"):
            raise ShapeError(f"unknown system {self.system!r}")
        for n in self.resolution:
            if n < 4 or (n & (n - 1)):
                raise ShapeError(f"resolution {n} is not a power of two >= 4")
        if self.dt <= 0 or self.snapshots < 1:
            raise ShapeError("need positive dt and at least one snapshot")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolution"] = list(self.resolution)
        return d


@dataclass
class DatasetContainer:
    variables: tuple
    mesh: Mesh
    snapshots: np.ndarray           # (n_snapshots, n_points, n_variables)
    dt: float
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.variables = tuple(self.variables)
        s = self.snapshots
        if s.ndim != 3 or s.shape[1] != self.mesh.n_points \
                or s.shape[2] != len(self.variables):
            raise ShapeError(
                f"snapshot array {s.shape} does not match mesh/variables")

    @property
    def n_snapshots(self) -> int:
        return len(self.snapshots)

    def function(self, i: int) -> GridFunction:
        return GridFunction(self.mesh, self.snapshots[i], names=self.variables)

    def select_variables(self, names) -> "DatasetContainer":
        names = tuple(names)
        missing = [v for v in names if v not in self.variables]
        if missing:
            raise DatasetSchemaError(f"dataset lacks variables {missing}")
        idx = [self.variables.index(v) for v in names]
        return DatasetContainer(names, self.mesh,
                                np.ascontiguousarray(self.snapshots[:, :, idx]),
                                self.dt, dict(self.provenance))


# -- Kolmogorov flow ----------------------------------------------------------


def _kolmogorov_wavenumbers(n: int):
    k = np.fft.fftfreq(n, d=1.0 / n)
    kx = k[:, None]
    ky = k[None, :]
    ksq = kx ** 2 + ky ** 2
    inv_ksq = np.zeros_like(ksq)
    inv_ksq[ksq > 0] = 1.0 / ksq[ksq > 0]
    cutoff = n // 3
    dealias = (np.abs(kx) <= cutoff) & (np.abs(ky) <= cutoff)
    return kx, ky, ksq, inv_ksq, dealias


def _velocity_hat(omega_hat, kx, ky, inv_ksq):
    psi_hat = omega_hat * inv_ksq
    return 1j * ky * psi_hat, -1j * kx * psi_hat


def simulate_kolmogorov(cfg: SimConfig) -> DatasetContainer:
    """Forced 2D turbulence in vorticity form; variables u_x, u_y."""
    nx, ny = cfg.resolution
    if nx != ny:
        raise ShapeError("kolmogorov flow needs a square grid")
    n = nx
    h = DEFAULT_EXTENT / n
    nu = 1.0 / cfg.re
    kx, ky, ksq, inv_ksq, dealias = _kolmogorov_wavenumbers(n)

    mesh = Mesh.uniform((n, n))
    y = mesh.points[:, 1].reshape(n, n)
    forcing = -cfg.forcing_amplitude * cfg.forcing_n * np.cos(cfg.forcing_n * y)
    f_hat = np.fft.fftn(forcing) * dealias

    rng = np.random.default_rng(cfg.seed)
    if cfg.ic_scale == 0:
        omega_hat = np.zeros((n, n), dtype=complex)
    else:
        ic = random_band_limited(mesh, modes=4, channels=1, rng=rng,
                                 scale=cfg.ic_scale)
        omega_hat = np.fft.fftn(ic.values[:, 0].reshape(n, n))

    def nonlinear(om_hat):
        om_d = om_hat * dealias
        ux_hat, uy_hat = _velocity_hat(om_d, kx, ky, inv_ksq)
        ux = np.fft.ifftn(ux_hat).real
        uy = np.fft.ifftn(uy_hat).real
        gx = np.fft.ifftn(1j * kx * om_d).real
        gy = np.fft.ifftn(1j * ky * om_d).real
        return -np.fft.fftn(ux * gx + uy * gy) * dealias, max(
            np.abs(ux).max(), np.abs(uy).max())

    def advance(om_hat, n_prev, interval):
        remaining = interval
        while remaining > 1e-14:
            n_cur, umax = nonlinear(om_hat)
            limit = cfg.cfl_safety * h / max(umax, 1e-12)
            if interval / limit > 100000:
                raise StabilityError(
                    "kolmogorov CFL bound needs more than 100000 substeps "
                    "per interval; the flow is blowing up")
            dt_sub = min(limit, remaining)
            if n_prev is None:
                n_prev = n_cur
            rhs = (om_hat * (1.0 - 0.5 * dt_sub * nu * ksq)
                   + dt_sub * (1.5 * n_cur - 0.5 * n_prev)
                   + dt_sub * f_hat)
            om_hat = rhs / (1.0 + 0.5 * dt_sub * nu * ksq)
            n_prev = n_cur
            if not np.all(np.isfinite(om_hat)):
                raise StabilityError(
                    "kolmogorov vorticity became non-finite (CFL bound violated)")
            remaining -= dt_sub
        return om_hat, n_prev

    n_prev = None
    if cfg.warmup > 0:
        omega_hat, n_prev = advance(omega_hat, n_prev, cfg.warmup)

    frames = np.empty((cfg.snapshots, n * n, 2))

    def record(i, om_hat):
        ux_hat, uy_hat = _velocity_hat(om_hat * dealias, kx, ky, inv_ksq)
        frames[i, :, 0] = np.fft.ifftn(ux_hat).real.reshape(-1)
        frames[i, :, 1] = np.fft.ifftn(uy_hat).real.reshape(-1)

    record(0, omega_hat)
    for i in range(1, cfg.snapshots):
        omega_hat, n_prev = advance(omega_hat, n_prev, cfg.dt)
        record(i, omega_hat)

    return DatasetContainer(("u_x", "u_y"), mesh, frames, cfg.dt,
                            provenance=cfg.to_dict())


# -- Rayleigh-Benard convection ----------------------------------------------


def rb_mesh(resolution, box=(2.0, 1.0)) -> Mesh:
    """Wall-resolving grid: nodes sit on both walls, x is periodic.

    The y spacing is L_y/(ny-1) so the declared mesh extent is ny*hy; the last
    row of points lies exactly on the top wall.
    """
    nx, ny = resolution
    lx, ly = box
    hy = ly / (ny - 1)
    return Mesh.uniform((nx, ny), extents=(lx, ny * hy))


def simulate_rayleigh_benard(cfg: SimConfig, box=(2.0, 1.0)) -> DatasetContainer:
    """Buoyant convection between a hot floor (T=1) and a cold lid (T=0)."""
    nx, ny = cfg.resolution
    lx, ly = box
    hx, hy = lx / nx, ly / (ny - 1)
    mesh = rb_mesh(cfg.resolution, box)
    y = np.linspace(0.0, ly, ny)

    u = np.zeros((nx, ny))
    v = np.zeros((nx, ny))
    t_field = np.tile(1.0 - y / ly, (nx, 1))
    xg = mesh.points[:, 0].reshape(nx, ny)
    yg = np.tile(y, (nx, 1))
    blob = 0.1 * ly
    t_field[(xg - lx / 4) ** 2 + (yg - ly / 4) ** 2 <= blob ** 2] = 1.0
    t_field[(xg - lx / 2) ** 2 + (yg - ly / 2) ** 2 <= blob ** 2] = -1.0
    _rb_bcs(u, v, t_field)

    # x-direction modified wavenumbers of the central second difference
    kx = np.fft.rfftfreq(nx, d=1.0 / nx)
    lam = (2.0 * np.cos(2.0 * np.pi * kx / nx) - 2.0) / hx ** 2

    frames = np.empty((cfg.snapshots, nx * ny, 3))

    def record(i):
        frames[i, :, 0] = u.reshape(-1)
        frames[i, :, 1] = v.reshape(-1)
        frames[i, :, 2] = t_field.reshape(-1)

    def step_interval(interval):
        nonlocal u, v, t_field
        remaining = interval
        while remaining > 1e-14:
            speed = max(np.abs(u).max() / hx + np.abs(v).max() / hy, 1e-12)
            adv_limit = 1.0 / speed
            diff_limit = 0.25 / (max(cfg.nu, cfg.kappa)
                                 * (1.0 / hx ** 2 + 1.0 / hy ** 2))
            dt = min(cfg.cfl_safety * min(adv_limit, diff_limit), remaining)
            if interval / dt > 1e6:
                raise StabilityError(
                    "rayleigh-benard CFL bound collapsed (flow blowing up)")
            _rb_substep(u, v, t_field, dt, cfg, hx, hy, lam)
            if not (np.isfinite(u).all() and np.isfinite(t_field).all()):
                raise StabilityError(
                    "rayleigh-benard fields became non-finite (CFL bound violated)")
            remaining -= dt

    if cfg.warmup > 0:
        step_interval(cfg.warmup)
    record(0)
    for i in range(1, cfg.snapshots):
        step_interval(cfg.dt)
        record(i)

    return DatasetContainer(("u_x", "u_y", "T"), mesh, frames, cfg.dt,
                            provenance=cfg.to_dict())


def _rb_bcs(u, v, t_field):
    u[:, 0] = 0.0
    u[:, -1] = 0.0
    v[:, 0] = 0.0
    v[:, -1] = 0.0
    t_field[:, 0] = 1.0
    t_field[:, -1] = 0.0


def _upwind(phi, u, v, hx, hy):
    """First-order upwind u.grad(phi); periodic in x, one-sided rows at walls."""
    dx_m = (phi - np.roll(phi, 1, axis=0)) / hx
    dx_p = (np.roll(phi, -1, axis=0) - phi) / hx
    adv = np.where(u > 0, u * dx_m, u * dx_p)
    dy_m = np.empty_like(phi)
    dy_p = np.empty_like(phi)
    dy_m[:, 1:] = (phi[:, 1:] - phi[:, :-1]) / hy
    dy_m[:, 0] = 0.0
    dy_p[:, :-1] = (phi[:, 1:] - phi[:, :-1]) / hy
    dy_p[:, -1] = 0.0
    adv += np.where(v > 0, v * dy_m, v * dy_p)
    return adv


def _laplacian(phi, hx, hy):
    lap = (np.roll(phi, 1, axis=0) - 2 * phi + np.roll(phi, -1, axis=0)) / hx ** 2
    lap[:, 1:-1] += (phi[:, 2:] - 2 * phi[:, 1:-1] + phi[:, :-2]) / hy ** 2
    lap[:, 0] = 0.0
    lap[:, -1] = 0.0
    return lap


def _rb_substep(u, v, t_field, dt, cfg, hx, hy, lam):
    un, vn, tn = u.copy(), v.copy(), t_field.copy()
    u -= dt * _upwind(un, un, vn, hx, hy)
    v -= dt * _upwind(vn, un, vn, hx, hy)
    t_field -= dt * _upwind(tn, un, vn, hx, hy)
    u += dt * cfg.nu * _laplacian(un, hx, hy)
    v += dt * cfg.nu * _laplacian(vn, hx, hy)
    t_field += dt * cfg.kappa * _laplacian(tn, hx, hy)
    v[:, 1:-1] += dt * cfg.alpha_g * tn[:, 1:-1]
    _rb_bcs(u, v, t_field)

    div = (np.roll(u, -1, axis=0) - np.roll(u, 1, axis=0)) / (2 * hx)
    div[:, 1:-1] += (v[:, 2:] - v[:, :-2]) / (2 * hy)
    rhs = div / dt

    p = _pressure_solve(rhs, hy, lam)
    u -= dt * (np.roll(p, -1, axis=0) - np.roll(p, 1, axis=0)) / (2 * hx)
    v[:, 1:-1] -= dt * (p[:, 2:] - p[:, :-2]) / (2 * hy)
    _rb_bcs(u, v, t_field)


def _pressure_solve(rhs, hy, lam):
    """Poisson with Neumann walls: FFT in x, tridiagonal in y per mode."""
    nx, ny = rhs.shape
    rhs_hat = np.fft.rfft(rhs, axis=0)
    p_hat = np.empty_like(rhs_hat)
    inv_h2 = 1.0 / hy ** 2
    for m in range(rhs_hat.shape[0]):
        ab = np.zeros((3, ny))
        ab[0, 1:] = inv_h2                      # super-diagonal
        ab[1, :] = -2.0 * inv_h2 + lam[m]
        ab[2, :-1] = inv_h2                     # sub-diagonal
        b = rhs_hat[m].copy()
        # Neumann walls via ghost reflection
        ab[1, 0] = -inv_h2 + lam[m]
        ab[1, -1] = -inv_h2 + lam[m]
        if m == 0:
            # Neumann + periodic leaves the mean free; pin the gauge
            ab[1, 0] = 1.0
            ab[0, 1] = 0.0
            b[0] = 0.0
        p_hat[m] = scipy.linalg.solve_banded((1, 1), ab, b)
    return np.fft.irfft(p_hat, n=nx, axis=0)


def irregularize(ds: DatasetContainer, keep_fraction: float, seed: int = 0
                 ) -> DatasetContainer:
    """Subsample to a random point cloud (same subset for every snapshot)."""
    if not 0 < keep_fraction <= 1:
        raise FractionError(f"keep fraction must be in (0, 1], got {keep_fraction}")
    n = ds.mesh.n_points
    n_keep = int(round(keep_fraction * n))
    if n_keep < 1:
        raise FractionError("keep fraction selects no points")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=n_keep, replace=False))
    mesh = Mesh.irregular(ds.mesh.points[idx], extents=ds.mesh.extents)
    return DatasetContainer(ds.variables, mesh,
                            np.ascontiguousarray(ds.snapshots[:, idx, :]),
                            ds.dt, dict(ds.provenance))


# -- container file format ----------------------------------------------------


def write_container(path, header: dict, buffers) -> None:
    """buffers: ordered (name, float64 array) pairs; shapes go in the header."""
    header = dict(header)
    header["buffers"] = [{"name": name, "shape": list(arr.shape)}
                         for name, arr in buffers]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.array(FORMAT_VERSION, "<u4").tobytes())
        f.write(np.array(len(blob), "<u8").tobytes())
        f.write(blob)
        for _, arr in buffers:
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            f.write(raw)
            f.write(hashlib.blake2b(raw, digest_size=8).digest())


def _read_exact(f, count, what):
    data = f.read(count)
    if len(data) != count:
        raise TruncatedFileError(f"file ends inside {what}")
    return data


def read_container(path):
    """Returns (header, {name: array}); verifies every buffer checksum."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic bytes")
        if magic != MAGIC:
            raise FormatVersionError(f"not a container file (magic {magic!r})")
        version = int(np.frombuffer(_read_exact(f, 4, "version"), "<u4")[0])
        if version != FORMAT_VERSION:
            raise FormatVersionError(
                f"unsupported container version {version} (expected {FORMAT_VERSION})")
        length = int(np.frombuffer(_read_exact(f, 8, "header length"), "<u8")[0])
        try:
            header = json.loads(_read_exact(f, length, "header").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatVersionError(f"unreadable container header: {e}") from e
        buffers = {}
        for spec in header.get("buffers", []):
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = _read_exact(f, 8 * count, f"buffer {spec['name']!r}")
            digest = _read_exact(f, 8, f"checksum of {spec['name']!r}")
            if hashlib.blake2b(raw, digest_size=8).digest() != digest:
                raise ChecksumError(f"buffer {spec['name']!r} failed its checksum")
            buffers[spec["name"]] = np.frombuffer(raw, "<f8").reshape(shape).copy()
    return header, buffers


def dataset_write(ds: DatasetContainer, path) -> None:
    mesh = ds.mesh
    header = {
        "kind": "dataset",
        "variables": list(ds.variables),
        "dt": ds.dt,
        "provenance": ds.provenance,
        "mesh": {
            "kind": "uniform" if mesh.is_uniform else "irregular",
            "extents": list(mesh.extents),
            "resolution": list(mesh.resolution) if mesh.is_uniform else None,
        },
    }
    buffers = [("snapshots", ds.snapshots)]
    if not mesh.is_uniform:
        buffers = [("points", mesh.points), ("quad_weights", mesh.quad_weights),
                   ("snapshots", ds.snapshots)]
    write_container(path, header, buffers)


def dataset_read(path) -> DatasetContainer:
    header, buffers = read_container(path)
    if header.get("kind") != "dataset":
        raise DatasetSchemaError(f"container at {path} is not a dataset "
                                 f"(kind={header.get('kind')!r})")
    m = header["mesh"]
    extents = tuple(m["extents"])
    if m["kind"] == "uniform":
        mesh = Mesh.uniform(tuple(m["resolution"]), extents=extents)
    else:
        mesh = Mesh.irregular(buffers["points"], extents=extents,
                              quad_weights=buffers["quad_weights"])
    return DatasetContainer(tuple(header["variables"]), mesh,
                            buffers["snapshots"], float(header["dt"]),
                            provenance=header.get("provenance", {}))
