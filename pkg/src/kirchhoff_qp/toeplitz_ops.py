"""Toeplitz-in-time operators on zero-mean functions of x, in 2x2 block form.

An operator R(phi) acting on h(phi, x) = sum h_k(l) e^{i(l.phi + kx)}, k != 0,
is stored through its matrix entries R_k^{k'}(l) (l is the time-Fourier index
of the phi-dependence).  Space indices are grouped as E_j = span(e^{ijx},
e^{-ijx}) and laid out along one axis of length 2J with position

    +j -> 2(j-1),  -j -> 2(j-1)+1,

so the block B_j^{j'}(l) is the contiguous 2x2 slice at rows 2(j-1):2j,
columns 2(j'-1):2j'.  The array has shape (2L+1,)*nu + (2J, 2J).
"""
import warnings

import numpy as np

from .spectral_core import SpaceTimeField, ToroidalFunction, bracket, ell_grid, ell_sup


def _perm(J):
    """Field j-index (offset by J) of each position p."""
    p = np.empty(2 * J, dtype=int)
    p[0::2] = J + np.arange(1, J + 1)
    p[1::2] = J - np.arange(1, J + 1)
    return p


def _swap(J):
    """Position permutation k -> -k."""
    s = np.arange(2 * J)
    return s ^ 1


def _space_index(J):
    """Signed space index k at each position."""
    k = np.empty(2 * J, dtype=int)
    k[0::2] = np.arange(1, J + 1)
    k[1::2] = -np.arange(1, J + 1)
    return k


def _fft_conv(a, b, nu, l_out, contract):
    """Linear convolution over the leading nu axes with a pointwise contraction."""
    la = (a.shape[0] - 1) // 2
    lb = (b.shape[0] - 1) // 2
    M = la + lb + l_out + 1
    def lift(c, h):
        buf = np.zeros((M,) * nu + c.shape[nu:], complex)
        idx = np.arange(-h, h + 1) % M
        buf[np.ix_(*([idx] * nu))] = c
        return np.fft.fftn(buf, axes=range(nu))
    prod = contract(lift(a, la), lift(b, lb))
    c = np.fft.ifftn(prod, axes=range(nu))
    idx = np.arange(-l_out, l_out + 1) % M
    return c[np.ix_(*([idx] * nu))]


class BlockDiagonal:
    """Time-independent block-diagonal operator diag_j D_j, D_j 2x2."""

    def __init__(self, blocks):
        self.blocks = np.asarray(blocks, dtype=complex)
        self.j_max = self.blocks.shape[0]

    @classmethod
    def scalar(cls, m, J):
        j = np.arange(1, J + 1)
        return cls(m * j[:, None, None] * np.eye(2)[None])

    @classmethod
    def zeros(cls, J):
        return cls(np.zeros((J, 2, 2), complex))

    def block(self, j):
        return self.blocks[j - 1]

    def to_operator(self, nu, l_max=0):
        J = self.j_max
        A = np.zeros((2 * l_max + 1,) * nu + (2 * J, 2 * J), complex)
        c = (l_max,) * nu
        for j in range(1, J + 1):
            A[c + (slice(2 * j - 2, 2 * j), slice(2 * j - 2, 2 * j))] = self.blocks[j - 1]
        return ToeplitzOperator(A)

    def conj(self):
        return BlockDiagonal(np.conj(self.blocks[:, ::-1, ::-1]))

    def __add__(self, o):
        return BlockDiagonal(self.blocks + o.blocks)

    def __sub__(self, o):
        return BlockDiagonal(self.blocks - o.blocks)

    def is_selfadjoint(self, tol=1e-12):
        return np.max(np.abs(self.blocks - np.conj(np.swapaxes(self.blocks, 1, 2))), initial=0) <= tol

    def hat(self, m):
        """D_j - m j I."""
        return self - BlockDiagonal.scalar(m, self.j_max)

    def eigenvalues(self):
        return np.linalg.eigvalsh(self.blocks)

    def frob(self):
        return np.linalg.norm(self.blocks, axis=(1, 2))

    def to_json(self, m=None):
        d = {"l_max": 0, "j_max": self.j_max, "blocks": [
            {"l": [], "j": j, "jp": j,
             "m": [[float(z.real), float(z.imag)] for z in self.blocks[j - 1].reshape(-1)]}
            for j in range(1, self.j_max + 1)]}
        if m is not None:
            d["mean_coefficient"] = float(m)
        return d

    @classmethod
    def from_json(cls, d):
        J = int(d["j_max"])
        B = np.zeros((J, 2, 2), complex)
        for b in d["blocks"]:
            if b["j"] != b["jp"] or any(b.get("l", [])):
                raise ValueError("block-diagonal file holds an off-diagonal block")
            B[b["j"] - 1] = np.array([complex(*z) for z in b["m"]]).reshape(2, 2)
        return cls(B)


class ToeplitzOperator:
    """Blocks R_j^{j'}(l), |l| <= l_max, 1 <= j, j' <= j_max (see module docstring)."""

    def __init__(self, A):
        self.A = np.asarray(A, dtype=complex)
        self.nu = self.A.ndim - 2
        self.l_max = (self.A.shape[0] - 1) // 2
        self.j_max = self.A.shape[-1] // 2

    # constructors
    @classmethod
    def zeros(cls, nu, l_max, j_max):
        return cls(np.zeros((2 * l_max + 1,) * nu + (2 * j_max, 2 * j_max), complex))

    @classmethod
    def identity(cls, nu, j_max, l_max=0):
        R = cls.zeros(nu, l_max, j_max)
        R.A[(l_max,) * nu] = np.eye(2 * j_max)
        return R

    @classmethod
    def multiplication(cls, a, j_max):
        """h -> a(phi) h."""
        return cls(a.coeffs[..., None, None] * np.eye(2 * j_max))

    @classmethod
    def fourier_multiplier(cls, w, nu, j_max, l_max=0):
        """Space multiplier e^{ikx} -> w(k) e^{ikx}; w is a callable of signed k."""
        R = cls.zeros(nu, l_max, j_max)
        R.A[(l_max,) * nu] = np.diag(w(_space_index(j_max)).astype(complex))
        return R

    @classmethod
    def abs_D(cls, nu, j_max, power=1.0, l_max=0):
        return cls.fourier_multiplier(lambda k: np.abs(k).astype(float) ** power, nu, j_max, l_max)

    @classmethod
    def random(cls, rng, nu, l_max, j_max, decay=2.0, offdiag_decay=2.0):
        shape = (2 * l_max + 1,) * nu + (2 * j_max, 2 * j_max)
        A = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        jj = np.repeat(np.arange(1, j_max + 1), 2)
        w = bracket(ell_sup(nu, l_max)[..., None, None]) ** (-decay) \
            * bracket(jj[:, None] - jj[None, :]) ** (-offdiag_decay)
        return cls(A * w)

    def copy(self):
        return ToeplitzOperator(self.A.copy())

    def block(self, ell, j, jp):
        idx = tuple(np.add(ell, self.l_max))
        return self.A[idx + (slice(2 * j - 2, 2 * j), slice(2 * jp - 2, 2 * jp))]

    def resize(self, l_max=None, j_max=None):
        l_max = self.l_max if l_max is None else l_max
        j_max = self.j_max if j_max is None else j_max
        A = self.A
        if l_max <= self.l_max:
            sl = slice(self.l_max - l_max, self.l_max + l_max + 1)
            A = A[(sl,) * self.nu]
        else:
            d = l_max - self.l_max
            A = np.pad(A, [(d, d)] * self.nu + [(0, 0), (0, 0)])
        n = 2 * j_max
        if j_max <= self.j_max:
            A = A[..., :n, :n]
        else:
            d = n - A.shape[-1]
            A = np.pad(A, [(0, 0)] * self.nu + [(0, d), (0, d)])
        return ToeplitzOperator(A)

    # linear structure
    def __add__(self, o):
        L, J = max(self.l_max, o.l_max), max(self.j_max, o.j_max)
        return ToeplitzOperator(self.resize(L, J).A + o.resize(L, J).A)

    def __neg__(self):
        return ToeplitzOperator(-self.A)

    def __sub__(self, o):
        return self + (-o)

    def __mul__(self, c):
        return ToeplitzOperator(c * self.A)

    __rmul__ = __mul__

    def __matmul__(self, o):
        return compose(self, o)

    # structure
    def conj(self):
        s = _swap(self.j_max)
        return ToeplitzOperator(np.conj(np.flip(self.A, axis=tuple(range(self.nu))))[..., s, :][..., :, s])

    def transpose(self):
        s = _swap(self.j_max)
        return ToeplitzOperator(np.swapaxes(self.A[..., s, :][..., :, s], -1, -2))

    def adjoint(self):
        return ToeplitzOperator(np.swapaxes(np.conj(np.flip(self.A, axis=tuple(range(self.nu)))), -1, -2))

    def left_space(self, w):
        """diag(w(k)) R."""
        return ToeplitzOperator(w(_space_index(self.j_max))[:, None] * self.A)

    def right_space(self, w):
        """R diag(w(k))."""
        return ToeplitzOperator(self.A * w(_space_index(self.j_max))[None, :])

    def right_abs_D(self, power=1.0):
        return self.right_space(lambda k: np.abs(k).astype(float) ** power)

    def left_abs_D(self, power=1.0):
        return self.left_space(lambda k: np.abs(k).astype(float) ** power)

    def dphi(self, omega):
        """Blocks of the commutator [omega.d_phi, R]: i omega.l R(l)."""
        od = ell_grid(self.nu, self.l_max) @ np.asarray(omega, float)
        return ToeplitzOperator(1j * od[..., None, None] * self.A)

    def at(self, phi):
        """Matrix R(phi) (2J x 2J) at a point of the torus."""
        ell = ell_grid(self.nu, self.l_max).reshape(-1, self.nu)
        e = np.exp(1j * ell @ np.asarray(phi, float))
        return np.tensordot(e, self.A.reshape(-1, 2 * self.j_max, 2 * self.j_max), axes=1)

    def to_dense(self, l_field, j_field=None):
        """Dense matrix on the field band |l| <= l_field, ordered (l, position)."""
        J = self.j_max
        ell = ell_grid(self.nu, l_field).reshape(-1, self.nu)
        n = ell.shape[0]
        M = np.zeros((n, 2 * J, n, 2 * J), complex)
        for a in range(n):
            d = ell[a][None, :] - ell
            ok = np.abs(d).max(axis=1) <= self.l_max
            for b in np.nonzero(ok)[0]:
                M[a, :, b, :] = self.A[tuple(d[b] + self.l_max)]
        return M.reshape(n * 2 * J, n * 2 * J)

    def to_json(self, tol=0.0):
        blocks = []
        ell = ell_grid(self.nu, self.l_max).reshape(-1, self.nu)
        A = self.A.reshape(-1, 2 * self.j_max, 2 * self.j_max)
        for i, l in enumerate(ell):
            for j in range(1, self.j_max + 1):
                for jp in range(1, self.j_max + 1):
                    B = A[i, 2 * j - 2:2 * j, 2 * jp - 2:2 * jp]
                    if np.max(np.abs(B)) > tol:
                        blocks.append({"l": [int(x) for x in l], "j": j, "jp": jp,
                                       "m": [[float(z.real), float(z.imag)] for z in B.reshape(-1)]})
        return {"l_max": self.l_max, "j_max": self.j_max, "blocks": blocks}

    @classmethod
    def from_json(cls, d, nu):
        R = cls.zeros(nu, int(d["l_max"]), int(d["j_max"]))
        for b in d["blocks"]:
            idx = tuple(np.add(b["l"], R.l_max))
            j, jp = b["j"], b["jp"]
            R.A[idx + (slice(2 * j - 2, 2 * j), slice(2 * jp - 2, 2 * jp))] = \
                np.array([complex(*z) for z in b["m"]]).reshape(2, 2)
        return R


# field <-> position vector

def field_to_vec(h, J=None):
    J = h.j_max if J is None else J
    return h.resize(j_max=J).coeffs[..., _perm(J)]


def vec_to_field(v, nu, J):
    l_max = (v.shape[0] - 1) // 2
    f = SpaceTimeField.zeros(nu, l_max, J)
    f.coeffs[..., _perm(J)] = v
    return f


# operations

def compose(R, B, l_out=None):
    """[RB](l) = sum_l' R(l - l') B(l'), truncated to |l| <= l_out."""
    l_out = max(R.l_max, B.l_max) if l_out is None else l_out
    J = max(R.j_max, B.j_max)
    R, B = R.resize(j_max=J), B.resize(j_max=J)
    A = _fft_conv(R.A, B.A, R.nu, l_out, lambda x, y: np.matmul(x, y))
    return ToeplitzOperator(A)


def apply(R, h, l_out=None):
    """Block action on a zero-x-mean field; the result keeps the band of h."""
    if not h.is_zero_mean():
        raise ValueError("field has a nonzero x-mean")
    l_out = h.l_max if l_out is None else l_out
    v = field_to_vec(h, R.j_max)
    out = _fft_conv(R.A, v, R.nu, l_out, lambda x, y: np.einsum("...pq,...q->...p", x, y))
    return vec_to_field(out, R.nu, R.j_max).resize(j_max=h.j_max)


def block_decay_norm(R, s):
    """sup_{j'} (sum_{l,j} <l, j-j'>^{2s} ||B_j^{j'}(l)||_F^2)^{1/2} (truncated sup)."""
    if s < 0:
        raise ValueError("s must be nonnegative")
    J = R.j_max
    A2 = np.abs(R.A.reshape(R.A.shape[:-2] + (J, 2, J, 2))) ** 2
    F2 = A2.sum(axis=(-3, -1))
    j = np.arange(1, J + 1)
    w = bracket(ell_sup(R.nu, R.l_max)[..., None, None], (j[:, None] - j[None, :])) ** (2 * s)
    col = (w * F2).reshape(-1, J, J).sum(axis=(0, 1))
    return float(np.sqrt(col.max(initial=0.0)))


def space_norm_at(R, phi, s):
    """|R(phi)|_{s,x} = sup_{j'} (sum_j <j-j'>^{2s} ||R_j^{j'}(phi)||^2)^{1/2}."""
    J = R.j_max
    M = R.at(phi).reshape(J, 2, J, 2)
    F2 = (np.abs(M) ** 2).sum(axis=(1, 3))
    j = np.arange(1, J + 1)
    w = bracket(j[:, None] - j[None, :]) ** (2 * s)
    return float(np.sqrt((w * F2).sum(axis=0).max()))


def projection_operator(q, g, l_out=None):
    """h -> q(phi, x) int_T g(phi, y) h(phi, y) dy, blocks 2 pi sum_n q_k(m-n) g_{-k'}(n)."""
    if not (q.is_zero_mean() and g.is_zero_mean()):
        raise ValueError("q and g must have zero x-mean")
    J = max(q.j_max, g.j_max)
    nu = q.nu
    l_out = q.l_max + g.l_max if l_out is None else l_out
    qv = field_to_vec(q, J)
    gv = field_to_vec(g, J)[..., _swap(J)]      # g_{-k'}
    A = _fft_conv(qv, gv, nu, l_out, lambda x, y: x[..., :, None] * y[..., None, :])
    return ToeplitzOperator(2 * np.pi * A)


def truncate_time(R, N):
    """Zero the blocks with |l| > N."""
    return ToeplitzOperator(R.A * (ell_sup(R.nu, R.l_max) <= N)[..., None, None])


def block_diag_part(R):
    """[R] = diag_j R_j^j(0)."""
    J = R.j_max
    A0 = R.A[(R.l_max,) * R.nu]
    return BlockDiagonal(np.stack([A0[2 * j - 2:2 * j, 2 * j - 2:2 * j] for j in range(1, J + 1)]))


def offdiag_part(R):
    """R - [R]."""
    return R - block_diag_part(R).to_operator(R.nu, 0)


def structural_predicates(R, tol=1e-12):
    scale = max(1.0, np.max(np.abs(R.A), initial=0.0))
    def close(X):
        return float(np.max(np.abs(X.A - R.A), initial=0.0)) <= tol * scale
    adj = R.adjoint()
    return {
        "real": bool(close(R.conj())),
        "symmetric": bool(close(R.transpose())),
        "selfadjoint": bool(close(adj)),
        "skew_adjoint": bool(np.max(np.abs(adj.A + R.A), initial=0.0) <= tol * scale),
    }


# 2x2 block algebra

def M_L(A):
    """X -> AX on 2x2 matrices, in row-major vectorization."""
    return np.kron(A, np.eye(2))


def M_R(B):
    """X -> XB on 2x2 matrices, in row-major vectorization."""
    return np.kron(np.eye(2), B.T)


def op_norm(T):
    """Operator norm of a linear map on 2x2 blocks (Frobenius), given as 4x4."""
    return float(np.linalg.norm(T, 2))


def trace_inner(A, B):
    return np.trace(A @ np.conj(B).T)


# paired (complex-coordinate) operators

class PairedOperator:
    """The operator [[P, Q], [conj(Q), conj(P)]] on pairs (z, conj z).

    Only the upper row is stored.  Written as i[[R1, R2], [-conj R2, -conj R1]],
    the Hamiltonian structure reads R1 = R1^*, R2 = R2^T with R1 = -iP, R2 = -iQ.
    """

    def __init__(self, P, Q):
        L, J = max(P.l_max, Q.l_max), max(P.j_max, Q.j_max)
        self.P = P.resize(L, J)
        self.Q = Q.resize(L, J)
        self.nu = P.nu
        self.l_max = L
        self.j_max = J

    @classmethod
    def identity(cls, nu, j_max, l_max=0):
        return cls(ToeplitzOperator.identity(nu, j_max, l_max), ToeplitzOperator.zeros(nu, l_max, j_max))

    @classmethod
    def zeros(cls, nu, l_max, j_max):
        return cls(ToeplitzOperator.zeros(nu, l_max, j_max), ToeplitzOperator.zeros(nu, l_max, j_max))

    @classmethod
    def from_R(cls, R1, R2):
        return cls(1j * R1, 1j * R2)

    @property
    def R1(self):
        return -1j * self.P

    @property
    def R2(self):
        return -1j * self.Q

    def resize(self, l_max=None, j_max=None):
        return PairedOperator(self.P.resize(l_max, j_max), self.Q.resize(l_max, j_max))

    def __add__(self, o):
        return PairedOperator(self.P + o.P, self.Q + o.Q)

    def __neg__(self):
        return PairedOperator(-self.P, -self.Q)

    def __sub__(self, o):
        return self + (-o)

    def __mul__(self, c):
        return PairedOperator(c * self.P, c * self.Q)

    __rmul__ = __mul__

    def __matmul__(self, o):
        return compose_paired(self, o)

    def norm(self, s):
        return max(block_decay_norm(self.P, s), block_decay_norm(self.Q, s))

    def norm_D(self, s):
        """|R |D||_s."""
        return self.right_abs_D().norm(s)

    def right_abs_D(self, power=1.0):
        return PairedOperator(self.P.right_abs_D(power), self.Q.right_abs_D(power))

    def left_abs_D(self, power=1.0):
        return PairedOperator(self.P.left_abs_D(power), self.Q.left_abs_D(power))

    def dphi(self, omega):
        return PairedOperator(self.P.dphi(omega), self.Q.dphi(omega))

    def truncate_time(self, N):
        return PairedOperator(truncate_time(self.P, N), truncate_time(self.Q, N))

    def is_hamiltonian(self, tol=1e-12):
        scale = max(1.0, np.max(np.abs(self.P.A), initial=0.0), np.max(np.abs(self.Q.A), initial=0.0))
        R1, R2 = self.R1, self.R2
        d1 = np.max(np.abs(R1.adjoint().A - R1.A), initial=0.0)
        d2 = np.max(np.abs(R2.transpose().A - R2.A), initial=0.0)
        return bool(max(d1, d2) <= tol * scale)

    def hamiltonian_defect(self):
        R1, R2 = self.R1, self.R2
        return float(max(np.max(np.abs(R1.adjoint().A - R1.A), initial=0.0),
                         np.max(np.abs(R2.transpose().A - R2.A), initial=0.0)))

    def apply(self, z, l_out=None):
        """Upper component P z + Q conj(z) of the action on (z, conj z)."""
        return apply(self.P, z, l_out) + apply(self.Q, z.conj(), l_out)


def compose_paired(A, B, l_out=None):
    P = compose(A.P, B.P, l_out) + compose(A.Q, B.Q.conj(), l_out)
    Q = compose(A.P, B.Q, l_out) + compose(A.Q, B.P.conj(), l_out)
    return PairedOperator(P, Q)


def operator_expm1(Psi, tol=1e-14, s=None, max_terms=60, warn=True):
    """exp(Psi) - Id as a power series; relative accuracy does not depend on |Psi|."""
    s = (Psi.nu + 1) // 2 + 1 if s is None else s
    n0 = Psi.norm(s)
    if warn and n0 > 1:
        warnings.warn(f"|Psi|_s0 = {n0:.3g} > 1; exponential series may be slow")
    out = Psi
    if n0 == 0:
        return out
    term = Psi
    for k in range(2, max_terms + 1):
        term = compose_paired(term, Psi) * (1.0 / k)
        out = out + term
        if term.norm(s) < tol * out.norm(s):
            return out
    raise RuntimeError("exponential series did not converge within %d terms" % max_terms)


def operator_exp(Psi, tol=1e-14, s=None, max_terms=60, warn=True):
    """exp(Psi) by its truncated power series, stopped on a relative term norm."""
    E = operator_expm1(Psi, tol, s, max_terms, warn)
    return PairedOperator.identity(Psi.nu, Psi.j_max, Psi.l_max) + E
