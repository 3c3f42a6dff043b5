"""QSM physics: dipole kernel, FFT forward field, TKD baseline, synthesis.

Volumes are dense 3D scalar fields in ppm stored as (nx, ny, nz) arrays;
axis 2 is the main-field (B0) direction.  The k-space dipole kernel uses
the unshifted discrete spectrum convention of numpy's FFT, with physical
frequencies k_i = n_i / (N_i * voxel_i), so anisotropic voxels tilt the
zero cone correctly.  All spectral arithmetic runs in float64 and is
cast back to the volume dtype.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GeometryError, NumericError, ShapeError

IMAG_RESIDUE_TOL = 1e-6


@dataclass
class Volume:
    """Real-space scalar field (susceptibility or local field) in ppm."""

    values: np.ndarray
    voxel_size_mm: tuple = (1.0, 1.0, 1.0)
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3:
            raise ShapeError(f"volume must be 3D, got shape {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise NumericError("volume contains non-finite values")
        self.voxel_size_mm = tuple(float(v) for v in self.voxel_size_mm)
        if len(self.voxel_size_mm) != 3 or any(v <= 0 for v in self.voxel_size_mm):
            raise ConfigError(f"voxel sizes must be 3 positive reals, got {self.voxel_size_mm}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask)
            if self.mask.shape != self.values.shape:
                raise ShapeError("mask dims do not match volume dims")

    @property
    def dims(self):
        return self.values.shape


@dataclass
class DipoleKernel:
    """k-space dipole coefficients for a given grid and voxel size."""

    dims: tuple
    voxel_size_mm: tuple
    coefficients: np.ndarray
    b0_direction: tuple = (0.0, 0.0, 1.0)


@dataclass
class NoiseConfig:
    """Additive gaussian noise with a per-call sigma drawn from a range."""

    sigma_range_ppm: tuple = (0.0, 0.01)
    seed: int = 0
    kind: str = "additive-gaussian"

    def __post_init__(self):
        lo, hi = self.sigma_range_ppm
        if not (0.0 <= lo <= hi):
            raise ConfigError(f"sigma range must satisfy 0 <= lo <= hi, got {self.sigma_range_ppm}")
        if self.kind != "additive-gaussian":
            raise ConfigError(f"unsupported noise kind {self.kind!r}")


@dataclass
class PhantomSpec:
    """Random geometric susceptibility sources on an empty background."""

    dims: tuple = (32, 32, 32)
    voxel_size_mm: tuple = (1.0, 1.0, 1.0)
    n_spheres: int = 6
    n_cuboids: int = 4
    n_cylinders: int = 2
    radius_range_mm: tuple = (2.0, 6.0)
    chi_range_ppm: tuple = (-0.2, 0.2)
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or any(d <= 0 for d in self.dims):
            raise ConfigError(f"dims must be 3 positive ints, got {self.dims}")
        if any(n < 0 for n in (self.n_spheres, self.n_cuboids, self.n_cylinders)):
            raise ConfigError("source counts must be non-negative")
        if self.radius_range_mm[0] > self.radius_range_mm[1] or self.radius_range_mm[0] <= 0:
            raise ConfigError(f"degenerate radius range {self.radius_range_mm}")
        if self.chi_range_ppm[0] >= self.chi_range_ppm[1]:
            raise ConfigError(f"degenerate susceptibility range {self.chi_range_ppm}")


def make_dipole_kernel(dims, voxel_size_mm=(1.0, 1.0, 1.0)):
    """Axial dipole kernel 1/3 - kz^2/|k|^2 on the unshifted FFT grid.

    The 0/0 at the k-space origin is set to 0, which removes the field
    mean (susceptibility is only defined up to a constant).
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise ConfigError(f"dims must be 3 positive ints, got {dims}")
    voxel_size_mm = tuple(float(v) for v in voxel_size_mm)
    if any(v <= 0 for v in voxel_size_mm):
        raise ConfigError(f"voxel sizes must be positive, got {voxel_size_mm}")
    freqs = [np.fft.fftfreq(dims[i], d=voxel_size_mm[i]) for i in range(3)]
    kx, ky, kz = np.meshgrid(*freqs, indexing="ij")
    k2 = kx * kx + ky * ky + kz * kz
    with np.errstate(invalid="ignore", divide="ignore"):
        coef = 1.0 / 3.0 - kz * kz / k2
    coef[0, 0, 0] = 0.0
    return DipoleKernel(dims=dims, voxel_size_mm=voxel_size_mm, coefficients=coef)


def forward_field(chi, kernel):
    """Field = IFFT(D * FFT(chi)); linear in chi, real output."""
    if chi.dims != kernel.dims:
        raise ShapeError(f"volume dims {chi.dims} do not match kernel dims {kernel.dims}")
    spec = np.fft.fftn(chi.values.astype(np.float64)) * kernel.coefficients
    out = np.fft.ifftn(spec)
    renorm = np.linalg.norm(out.real) + np.finfo(np.float64).tiny
    if np.linalg.norm(out.imag) / renorm > IMAG_RESIDUE_TOL:
        raise NumericError("forward field has non-negligible imaginary residue")
    return Volume(
        out.real.astype(chi.values.dtype),
        voxel_size_mm=chi.voxel_size_mm,
        mask=chi.mask,
    )


def analytic_sphere_field(center, radius_mm, delta_chi_ppm, dims, voxel_size_mm=(1.0, 1.0, 1.0)):
    """Closed-form external field of a uniform sphere; zero inside.

    ``center`` is in voxel coordinates.  External voxels get
    dchi * (R^3/3) * (3 cos^2 theta - 1) / r^3 with theta measured from
    the B0 axis; the singular center lies inside the sphere and is
    excluded by construction.
    """
    dims = tuple(int(d) for d in dims)
    vx, vy, vz = (float(v) for v in voxel_size_mm)
    cx, cy, cz = (float(c) for c in center)
    for c, n, v in ((cx, dims[0], vx), (cy, dims[1], vy), (cz, dims[2], vz)):
        if c * v - radius_mm < 0 or c * v + radius_mm > (n - 1) * v:
            raise GeometryError("sphere does not fit inside the grid")
    ax = (np.arange(dims[0]) - cx) * vx
    ay = (np.arange(dims[1]) - cy) * vy
    az = (np.arange(dims[2]) - cz) * vz
    dx, dy, dz = np.meshgrid(ax, ay, az, indexing="ij")
    r2 = dx * dx + dy * dy + dz * dz
    r = np.sqrt(r2)
    out = np.zeros(dims, dtype=np.float64)
    ext = r > radius_mm
    cos2 = np.zeros_like(r)
    cos2[ext] = (dz[ext] / r[ext]) ** 2
    out[ext] = delta_chi_ppm * (radius_mm**3 / 3.0) * (3.0 * cos2[ext] - 1.0) / (r[ext] ** 3)
    return Volume(out, voxel_size_mm=(vx, vy, vz))


def tkd_invert(fieldvol, kernel, threshold):
    """Thresholded k-space division: clamp |D| below threshold, divide."""
    if not 0.0 < threshold < 2.0 / 3.0:
        raise ConfigError(f"TKD threshold must lie in (0, 2/3), got {threshold}")
    if fieldvol.dims != kernel.dims:
        raise ShapeError(f"volume dims {fieldvol.dims} do not match kernel dims {kernel.dims}")
    d = kernel.coefficients
    sign = np.where(d >= 0.0, 1.0, -1.0)  # sign(0) taken as +1
    d_clamped = np.where(np.abs(d) >= threshold, d, sign * threshold)
    spec = np.fft.fftn(fieldvol.values.astype(np.float64)) / d_clamped
    chi = np.fft.ifftn(spec).real
    return Volume(
        chi.astype(fieldvol.values.dtype),
        voxel_size_mm=fieldvol.voxel_size_mm,
        mask=fieldvol.mask,
    )


def _fit_center(rng, half_extents_vox, dims):
    lo = np.ceil(half_extents_vox)
    hi = np.array(dims) - 1 - np.ceil(half_extents_vox)
    if np.any(hi < lo):
        return None
    return np.array([rng.uniform(lo[i], hi[i]) for i in range(3)])


def generate_phantom(spec):
    """Susceptibility ground truth with random spheres, cuboids, cylinders.

    Deterministic for a fixed seed; sources overwrite, so every voxel
    stays inside the configured ppm range.
    """
    rng = np.random.default_rng(spec.seed)
    vals = np.zeros(spec.dims, dtype=np.float32)
    vox = np.array(spec.voxel_size_mm)
    grids = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in spec.dims), indexing="ij")

    def draw_chi():
        return rng.uniform(*spec.chi_range_ppm)

    def draw_radius():
        return rng.uniform(*spec.radius_range_mm)

    for _ in range(spec.n_spheres):
        r_mm = draw_radius()
        half = r_mm / vox
        c = _fit_center(rng, half, spec.dims)
        chi = draw_chi()
        if c is None:
            continue
        d2 = sum(((grids[i] - c[i]) * vox[i]) ** 2 for i in range(3))
        vals[d2 <= r_mm**2] = chi

    for _ in range(spec.n_cuboids):
        half_mm = np.array([draw_radius() for _ in range(3)])
        c = _fit_center(rng, half_mm / vox, spec.dims)
        chi = draw_chi()
        if c is None:
            continue
        inside = np.ones(spec.dims, dtype=bool)
        for i in range(3):
            inside &= np.abs(grids[i] - c[i]) * vox[i] <= half_mm[i]
        vals[inside] = chi

    for _ in range(spec.n_cylinders):
        axis = int(rng.integers(0, 3))
        r_mm = draw_radius()
        half_len_mm = draw_radius()
        half = np.full(3, r_mm)
        half[axis] = half_len_mm
        c = _fit_center(rng, half / vox, spec.dims)
        chi = draw_chi()
        if c is None:
            continue
        perp = [i for i in range(3) if i != axis]
        d2 = sum(((grids[i] - c[i]) * vox[i]) ** 2 for i in perp)
        inside = (d2 <= r_mm**2) & (np.abs(grids[axis] - c[axis]) * vox[axis] <= half_len_mm)
        vals[inside] = chi

    return Volume(vals, voxel_size_mm=spec.voxel_size_mm)


def add_noise(fieldvol, cfg, rng=None):
    """Field plus gaussian noise, sigma drawn uniformly per call.

    Training-pipeline augmentation only; never applied at inference.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    lo, hi = cfg.sigma_range_ppm
    sigma = float(rng.uniform(lo, hi))
    if sigma == 0.0:
        return Volume(
            fieldvol.values.copy(), voxel_size_mm=fieldvol.voxel_size_mm, mask=fieldvol.mask
        )
    noisy = fieldvol.values + rng.normal(0.0, sigma, fieldvol.dims).astype(
        fieldvol.values.dtype
    )
    return Volume(noisy, voxel_size_mm=fieldvol.voxel_size_mm, mask=fieldvol.mask)


def extract_patches(chi, fieldvol, patch, stride):
    """Co-located (field_patch, chi_patch) pairs on the anchor lattice.

    Anchors sit at every stride multiple whose patch fits entirely in
    the volume: count = prod(floor((dim - patch)/stride) + 1).
    """
    if chi.dims != fieldvol.dims:
        raise ShapeError("chi and field dims differ")
    patch = tuple(int(p) for p in patch)
    stride = tuple(int(s) for s in stride)
    if any(s <= 0 for s in stride):
        raise ConfigError(f"stride must be positive, got {stride}")
    if any(p <= 0 for p in patch):
        raise ConfigError(f"patch extents must be positive, got {patch}")
    if any(p > d for p, d in zip(patch, chi.dims)):
        raise ShapeError(f"patch {patch} larger than volume {chi.dims}")
    anchors = [range(0, chi.dims[i] - patch[i] + 1, stride[i]) for i in range(3)]
    pairs = []
    for ax in anchors[0]:
        for ay in anchors[1]:
            for az in anchors[2]:
                sl = (slice(ax, ax + patch[0]), slice(ay, ay + patch[1]), slice(az, az + patch[2]))
                pairs.append((fieldvol.values[sl].copy(), chi.values[sl].copy()))
    return pairs
