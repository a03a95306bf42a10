"""Truncated Fourier representation of functions on the torus T^nu x T.

Coefficients are stored in dense centered arrays: index ``l + l_max`` along
each of the ``nu`` time axes and, for space-time fields, ``j + j_max`` along
the last axis.  All norms use the sup-norm weight <l, j> = max(1, |l|, |j|).
"""
import itertools
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve


class NearResonanceError(ValueError):
    """A small divisor fell below the configured floor."""

    def __init__(self, msg, index=None):
        super().__init__(msg)
        self.index = index


class DiffeoError(ValueError):
    pass


@dataclass(frozen=True)
class FrequencyContext:
    nu: int
    omega: np.ndarray
    gamma: float
    tau: float
    l_max: int
    j_max: int
    divisor_floor: float = 1e-14
    s0: int = field(init=False)

    def __post_init__(self):
        om = np.atleast_1d(np.asarray(self.omega, dtype=float))
        if om.shape != (self.nu,):
            raise ValueError(f"omega must have length nu={self.nu}, got {om.shape}")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.tau <= 0 or self.l_max < 1 or self.j_max < 1:
            raise ValueError("tau, l_max and j_max must be positive")
        object.__setattr__(self, "omega", om)
        object.__setattr__(self, "s0", (self.nu + 1) // 2 + 1)

    def replace(self, **kw):
        d = dict(nu=self.nu, omega=self.omega, gamma=self.gamma, tau=self.tau,
                 l_max=self.l_max, j_max=self.j_max, divisor_floor=self.divisor_floor)
        d.update(kw)
        return FrequencyContext(**d)

    def diophantine_margin(self, L=None):
        """min over 0 < |l| <= L of |omega.l| |l|^tau / gamma (default L = 2 l_max)."""
        L = 2 * self.l_max if L is None else L
        ell = ell_grid(self.nu, L)
        sup = np.abs(ell).max(axis=-1)
        mask = sup > 0
        od = np.abs(ell @ self.omega)
        return float(np.min(od[mask] * sup[mask] ** self.tau / self.gamma))


def ell_grid(nu, L):
    """Integer vectors l with |l| <= L, shape (2L+1,)*nu + (nu,)."""
    r = np.arange(-L, L + 1)
    return np.stack(np.meshgrid(*([r] * nu), indexing="ij"), axis=-1)


def ell_sup(nu, L):
    return np.abs(ell_grid(nu, L)).max(axis=-1)


def bracket(*xs):
    """<x1, x2, ...> = max(1, |x1|, |x2|, ...), broadcasting."""
    out = np.ones(np.broadcast(*xs).shape)
    for x in xs:
        out = np.maximum(out, np.abs(x))
    return out


def _crop(c, halves, axes):
    """Center-crop (or zero-pad) ``c`` so that axis a has half-size halves[i]."""
    sl = [slice(None)] * c.ndim
    pads = [(0, 0)] * c.ndim
    need_pad = False
    for h, a in zip(halves, axes):
        cur = (c.shape[a] - 1) // 2
        if h <= cur:
            sl[a] = slice(cur - h, cur + h + 1)
        else:
            pads[a] = (h - cur, h - cur)
            need_pad = True
    out = c[tuple(sl)]
    if need_pad:
        out = np.pad(out, pads)
    return out


class ToroidalFunction:
    """A function of phi in T^nu only, by coefficients a(l), |l| <= l_max."""

    def __init__(self, coeffs):
        self.coeffs = np.asarray(coeffs, dtype=complex)
        self.nu = self.coeffs.ndim
        self.l_max = (self.coeffs.shape[0] - 1) // 2

    @classmethod
    def zeros(cls, nu, l_max):
        return cls(np.zeros((2 * l_max + 1,) * nu, complex))

    @classmethod
    def constant(cls, c, nu, l_max):
        f = cls.zeros(nu, l_max)
        f.coeffs[(l_max,) * nu] = c
        return f

    @classmethod
    def from_modes(cls, modes, nu, l_max):
        f = cls.zeros(nu, l_max)
        for ell, c in modes.items():
            f.coeffs[tuple(np.add(ell, l_max))] += c
        return f

    @classmethod
    def from_grid(cls, values, l_max):
        """Coefficients of samples on a uniform M^nu grid, cropped to l_max."""
        return cls(_from_grid(values, values.ndim, [l_max] * values.ndim))

    def grid(self, M=None):
        """Values on the uniform M^nu grid phi_k = 2 pi k / M."""
        M = 4 * self.l_max + 2 if M is None else M
        return _to_grid(self.coeffs, M, self.nu)

    def __call__(self, phi):
        """Evaluate at points phi of shape (..., nu)."""
        phi = np.atleast_2d(np.asarray(phi, float))
        ell = ell_grid(self.nu, self.l_max).reshape(-1, self.nu)
        E = np.exp(1j * phi @ ell.T)
        return E @ self.coeffs.reshape(-1)

    def resize(self, l_max):
        return ToroidalFunction(_crop(self.coeffs, [l_max] * self.nu, range(self.nu)))

    def mean(self):
        return self.coeffs[(self.l_max,) * self.nu]

    def conj(self):
        return ToroidalFunction(np.conj(np.flip(self.coeffs)))

    def is_real(self, tol=1e-12):
        return np.max(np.abs(self.coeffs - np.conj(np.flip(self.coeffs))), initial=0) <= tol

    def real_part(self):
        return ToroidalFunction(0.5 * (self.coeffs + np.conj(np.flip(self.coeffs))))

    def norm(self, s):
        if s < 0:
            raise ValueError("s must be nonnegative")
        w = bracket(ell_sup(self.nu, self.l_max)) ** (2 * s)
        return float(np.sqrt(np.sum(w * np.abs(self.coeffs) ** 2)))

    def apply_grid(self, func, l_max=None, M=None):
        """Pseudo-spectral evaluation of func(self) on an oversampled grid."""
        l_max = self.l_max if l_max is None else l_max
        M = 4 * max(self.l_max, l_max) + 3 if M is None else M
        vals = func(self.grid(M))
        return ToroidalFunction.from_grid(vals, l_max)

    def dphi(self, omega):
        ell = ell_grid(self.nu, self.l_max)
        return ToroidalFunction(1j * (ell @ np.asarray(omega)) * self.coeffs)

    def __add__(self, o):
        if np.isscalar(o):
            r = ToroidalFunction(self.coeffs.copy())
            r.coeffs[(self.l_max,) * self.nu] += o
            return r
        L = max(self.l_max, o.l_max)
        return ToroidalFunction(self.resize(L).coeffs + o.resize(L).coeffs)

    __radd__ = __add__

    def __neg__(self):
        return ToroidalFunction(-self.coeffs)

    def __sub__(self, o):
        return self + (-o)

    def __rsub__(self, o):
        return (-self) + o

    def __mul__(self, o):
        if np.isscalar(o):
            return ToroidalFunction(self.coeffs * o)
        if isinstance(o, ToroidalFunction):
            L = max(self.l_max, o.l_max)
            return ToroidalFunction(_convolve(self.coeffs, o.coeffs, [L] * self.nu,
                                              range(self.nu)))
        return NotImplemented

    __rmul__ = __mul__


class SpaceTimeField:
    """A function on T^nu x T by coefficients u_j(l), |l| <= l_max, |j| <= j_max."""

    def __init__(self, coeffs):
        self.coeffs = np.asarray(coeffs, dtype=complex)
        self.nu = self.coeffs.ndim - 1
        self.l_max = (self.coeffs.shape[0] - 1) // 2 if self.nu else 0
        self.j_max = (self.coeffs.shape[-1] - 1) // 2

    @classmethod
    def zeros(cls, nu, l_max, j_max):
        return cls(np.zeros((2 * l_max + 1,) * nu + (2 * j_max + 1,), complex))

    @classmethod
    def from_modes(cls, modes, nu, l_max, j_max):
        """modes: {(l tuple, j): coefficient}."""
        f = cls.zeros(nu, l_max, j_max)
        for (ell, j), c in modes.items():
            f.coeffs[tuple(np.add(ell, l_max)) + (j + j_max,)] += c
        return f

    @classmethod
    def random(cls, rng, nu, l_max, j_max, decay=0.0, real=True, zero_mean=True):
        shape = (2 * l_max + 1,) * nu + (2 * j_max + 1,)
        c = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        w = bracket(ell_sup(nu, l_max)[..., None], np.arange(-j_max, j_max + 1))
        f = cls(c * w ** (-decay))
        if real:
            f = f.real_part()
        if zero_mean:
            f.coeffs[..., j_max] = 0
        return f

    @property
    def shape_params(self):
        return self.nu, self.l_max, self.j_max

    def weights(self):
        return bracket(ell_sup(self.nu, self.l_max)[..., None],
                       np.arange(-self.j_max, self.j_max + 1))

    def norm(self, s):
        return sobolev_norm(self, s)

    def resize(self, l_max=None, j_max=None):
        l_max = self.l_max if l_max is None else l_max
        j_max = self.j_max if j_max is None else j_max
        return SpaceTimeField(_crop(self.coeffs, [l_max] * self.nu + [j_max],
                                    range(self.nu + 1)))

    def conj(self):
        """Coefficients of the complex conjugate function."""
        return SpaceTimeField(np.conj(np.flip(self.coeffs)))

    def real_part(self):
        return SpaceTimeField(0.5 * (self.coeffs + np.conj(np.flip(self.coeffs))))

    def is_real(self, tol=1e-12):
        return np.max(np.abs(self.coeffs - np.conj(np.flip(self.coeffs))), initial=0) <= tol

    def is_zero_mean(self):
        return not np.any(self.coeffs[..., self.j_max])

    def x_mean(self):
        return ToroidalFunction(self.coeffs[..., self.j_max])

    def zero_x_mean(self):
        c = self.coeffs.copy()
        c[..., self.j_max] = 0
        return SpaceTimeField(c)

    def copy(self):
        return SpaceTimeField(self.coeffs.copy())

    def dphi(self, omega):
        ell = ell_grid(self.nu, self.l_max)
        return SpaceTimeField(1j * (ell @ np.asarray(omega))[..., None] * self.coeffs)

    def dx(self, k=1):
        j = np.arange(-self.j_max, self.j_max + 1)
        return SpaceTimeField((1j * j) ** k * self.coeffs)

    def abs_D(self, power=1.0):
        """|D|^power, acting on the zero-mean part (j = 0 mapped to 0)."""
        j = np.abs(np.arange(-self.j_max, self.j_max + 1)).astype(float)
        w = np.zeros_like(j)
        w[j > 0] = j[j > 0] ** power
        return SpaceTimeField(w * self.coeffs)

    def times(self, a):
        """Product with a toroidal function a(phi), truncated to this band."""
        if np.isscalar(a):
            return SpaceTimeField(a * self.coeffs)
        return SpaceTimeField(_convolve(self.coeffs, a.coeffs[..., None],
                                        [self.l_max] * self.nu + [self.j_max],
                                        range(self.nu)))

    def grid(self, M=None, Mx=None):
        M = 2 * self.l_max + 2 if M is None else M
        Mx = 2 * self.j_max + 2 if Mx is None else Mx
        return _to_grid(self.coeffs, (M,) * self.nu + (Mx,), self.nu + 1)

    def inner_mask(self, l_in, j_in):
        sup = ell_sup(self.nu, self.l_max)[..., None]
        j = np.abs(np.arange(-self.j_max, self.j_max + 1))
        return (sup <= l_in) & (j <= j_in)

    def __add__(self, o):
        if isinstance(o, SpaceTimeField):
            L, J = max(self.l_max, o.l_max), max(self.j_max, o.j_max)
            return SpaceTimeField(self.resize(L, J).coeffs + o.resize(L, J).coeffs)
        return NotImplemented

    def __neg__(self):
        return SpaceTimeField(-self.coeffs)

    def __sub__(self, o):
        return self + (-o)

    def __mul__(self, c):
        if np.isscalar(c):
            return SpaceTimeField(c * self.coeffs)
        return NotImplemented

    __rmul__ = __mul__

    def to_json(self, tol=0.0):
        entries = []
        for idx in zip(*np.nonzero(np.abs(self.coeffs) > tol)):
            c = self.coeffs[idx]
            entries.append({"l": [int(i) - self.l_max for i in idx[:-1]],
                            "j": int(idx[-1]) - self.j_max,
                            "re": float(c.real), "im": float(c.imag)})
        return {"nu": self.nu, "l_max": self.l_max, "j_max": self.j_max, "entries": entries}

    @classmethod
    def from_json(cls, d):
        f = cls.zeros(int(d["nu"]), int(d["l_max"]), int(d["j_max"]))
        for e in d["entries"]:
            ell = list(e["l"])
            if len(ell) != f.nu:
                raise ValueError("entry l has wrong length")
            if max(abs(x) for x in ell + [0]) > f.l_max or abs(e["j"]) > f.j_max:
                raise ValueError("entry outside the declared truncation")
            f.coeffs[tuple(np.add(ell, f.l_max)) + (e["j"] + f.j_max,)] += complex(e["re"], e["im"])
        return f

    def dump(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def _convolve(a, b, out_halves, axes):
    """Linear convolution of centered coefficient arrays along ``axes``, cropped.

    Axes not convolved must broadcast; out_halves gives the half-size per axis
    of the result (one entry per array axis).
    """
    axes = list(axes)
    full = fftconvolve(a, b, axes=axes)
    return _crop(full, out_halves, range(full.ndim))


def _to_grid(c, M, ndim_grid):
    """Samples of a centered coefficient array on a uniform grid (leading axes)."""
    if np.isscalar(M):
        M = (M,) * ndim_grid
    buf = np.zeros(tuple(M) + c.shape[ndim_grid:], complex)
    idx = []
    for a in range(ndim_grid):
        h = (c.shape[a] - 1) // 2
        if 2 * h + 1 > M[a]:
            raise ValueError("grid too coarse for the stored band")
        idx.append(np.arange(-h, h + 1) % M[a])
    buf[np.ix_(*idx)] = c
    return np.fft.ifftn(buf, axes=range(ndim_grid)) * np.prod(M)


def _from_grid(vals, ndim_grid, halves):
    M = vals.shape[:ndim_grid]
    c = np.fft.fftn(vals, axes=range(ndim_grid)) / np.prod(M)
    for a, (h, m) in enumerate(zip(halves, M)):
        c = np.take(c, np.arange(-h, h + 1) % m, axis=a)
    return c


# public operations --------------------------------------------------------

def sobolev_norm(h, s):
    """(sum <l,j>^{2s} |h_j(l)|^2)^{1/2}; works for fields and toroidal functions."""
    if s < 0:
        raise ValueError("s must be nonnegative")
    if isinstance(h, ToroidalFunction):
        return h.norm(s)
    return float(np.sqrt(np.sum(h.weights() ** (2 * s) * np.abs(h.coeffs) ** 2)))


def inverse_omega_dphi(h, ctx, floor=None):
    """(omega.d_phi)^{-1}: divide by i omega.l, zero the l = 0 average."""
    floor = ctx.divisor_floor if floor is None else floor
    ell = ell_grid(h.nu, h.l_max)
    od = ell @ ctx.omega
    sup = np.abs(ell).max(axis=-1)
    bad = (sup > 0) & (np.abs(od) < floor)
    if np.any(bad):
        raise NearResonanceError("|omega.l| below floor", tuple(ell[bad][0]))
    div = np.where(sup > 0, 1j * od, 1.0)
    zero = sup == 0
    if isinstance(h, ToroidalFunction):
        c = h.coeffs / div
        c[zero] = 0
        return ToroidalFunction(c)
    c = h.coeffs / div[..., None]
    c[zero] = 0
    return SpaceTimeField(c)


def product(u, v, l_max=None, j_max=None):
    """Fourier convolution of two fields, truncated to (l_max, j_max)."""
    l_max = max(u.l_max, v.l_max) if l_max is None else l_max
    j_max = max(u.j_max, v.j_max) if j_max is None else j_max
    c = _convolve(u.coeffs, v.coeffs, [l_max] * u.nu + [j_max], range(u.nu + 1))
    return SpaceTimeField(c)


def product_constant(s, nu):
    """A valid constant C(s) in ||uv||_s <= C (||u||_s||v||_s0 + ||u||_s0||v||_s).

    Follows from <a+b> <= <a> + <b> and Cauchy-Schwarz; s0 = floor((nu+1)/2)+1.
    """
    s0 = (nu + 1) // 2 + 1
    return max(1.0, 2.0 ** (s - 1)) * lattice_constant(nu + 1, s0)


def lattice_constant(dim, s0, cutoff=400):
    """(sum over n in Z^dim of <n>^{-2 s0})^{1/2}, sup-norm bracket, tail bounded."""
    # shells |n| = r contain (2r+1)^dim - (2r-1)^dim points
    r = np.arange(1, cutoff + 1, dtype=float)
    shell = (2 * r + 1) ** dim - (2 * r - 1) ** dim
    total = 1.0 + np.sum(shell * r ** (-2.0 * s0))
    # tail: shell <= 2 dim (2r+1)^(dim-1) <= 2 dim 3^(dim-1) r^(dim-1)
    p = 2 * s0 - dim + 1
    tail = 2 * dim * 3 ** (dim - 1) * cutoff ** (-(p - 1)) / (p - 1)
    return float(np.sqrt(total + tail))


def c1_norm(alpha):
    g = alpha.grid()
    vals = [np.max(np.abs(g))]
    ell = ell_grid(alpha.nu, alpha.l_max)
    for i in range(alpha.nu):
        d = ToroidalFunction(1j * ell[..., i] * alpha.coeffs).grid()
        vals.append(np.max(np.abs(d)))
    return float(vals[0] + sum(vals[1:]))


def _check_diffeo(alpha, ctx):
    if not alpha.is_real(1e-10):
        raise DiffeoError("alpha must be real")
    c = c1_norm(alpha) * np.linalg.norm(ctx.omega, np.inf)
    if c >= 1:
        raise DiffeoError(f"diffeomorphism condition violated: ||alpha||_C1 |omega| = {c:.3g}")


def _phi_nodes(nu, M):
    r = 2 * np.pi * np.arange(M) / M
    return np.stack(np.meshgrid(*([r] * nu), indexing="ij"), axis=-1)


def _eval_at(coeffs, nu, pts):
    """Evaluate centered coefficients (leading nu axes) at points pts (P, nu)."""
    L = (coeffs.shape[0] - 1) // 2
    ell = ell_grid(nu, L).reshape(-1, nu)
    E = np.exp(1j * pts @ ell.T)
    return E @ coeffs.reshape(ell.shape[0], -1)


def torus_diffeo_compose(h, alpha, ctx, M=None, l_out=None):
    """(A h)(phi) = h(phi + omega alpha(phi)), by direct summation at shifted nodes."""
    _check_diffeo(alpha, ctx)
    nu = h.nu
    L = h.l_max
    l_out = L if l_out is None else l_out
    M = max(2 * max(L, l_out, alpha.l_max) + 2, 2 * l_out + 1) if M is None else M
    nodes = _phi_nodes(nu, M).reshape(-1, nu)
    a = np.real(alpha(nodes))
    pts = nodes + a[:, None] * ctx.omega[None, :]
    vals = _eval_at(h.coeffs, nu, pts)
    vals = vals.reshape((M,) * nu + h.coeffs.shape[nu:])
    return type(h)(_from_grid(vals, nu, [l_out] * nu))


def invert_diffeo(alpha, ctx, M=None, tol=1e-12, max_iter=200, l_out=None):
    """alpha_tilde with alpha_tilde(theta) + alpha(theta + omega alpha_tilde(theta)) = 0."""
    _check_diffeo(alpha, ctx)
    nu = alpha.nu
    l_out = alpha.l_max if l_out is None else l_out
    M = 2 * max(alpha.l_max, l_out) + 2 if M is None else M
    nodes = _phi_nodes(nu, M).reshape(-1, nu)
    at = np.zeros(nodes.shape[0])
    for _ in range(max_iter):
        new = -np.real(alpha(nodes + at[:, None] * ctx.omega[None, :]))
        res = np.max(np.abs(new - at))
        at = new
        if res < tol:
            break
    else:
        raise DiffeoError("fixed point for the inverse diffeomorphism did not converge")
    resid = np.max(np.abs(at + np.real(alpha(nodes + at[:, None] * ctx.omega[None, :]))))
    vals = at.reshape((M,) * nu)
    out = ToroidalFunction(_from_grid(vals, nu, [l_out] * nu)).real_part()
    out.residual = float(resid)
    out.grid_values = vals
    return out


def smoothing_projector(h, N):
    """Pi_N: zero the coefficients with max(|l|, |j|) > N."""
    if isinstance(h, ToroidalFunction):
        return ToroidalFunction(h.coeffs * (ell_sup(h.nu, h.l_max) <= N))
    sup = ell_sup(h.nu, h.l_max)[..., None]
    j = np.abs(np.arange(-h.j_max, h.j_max + 1))
    return SpaceTimeField(h.coeffs * ((sup <= N) & (j <= N)))


def grouped_norm(h, s):
    """||h||_s computed through the 2-vectors h_j(l) = (h_j(l), h_{-j}(l)), j >= 0."""
    J = h.j_max
    sup = ell_sup(h.nu, h.l_max)
    total = np.sum(bracket(sup) ** (2 * s) * np.abs(h.coeffs[..., J]) ** 2)
    for j in range(1, J + 1):
        v = np.stack([h.coeffs[..., J + j], h.coeffs[..., J - j]], axis=-1)
        total += np.sum(bracket(sup, j) ** (2 * s) * np.sum(np.abs(v) ** 2, axis=-1))
    return float(np.sqrt(total))
